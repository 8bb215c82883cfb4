"""Command-line entry point.

One JSON config drives every subcommand; ``--set dotted.key=value``
overrides individual keys. All artifacts land under the config's
``out_dir`` and are referenced from a run manifest written next to them.
Failures exit nonzero with a machine-readable JSON error on stderr.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys

import numpy as np

from . import data as data_mod
from .data import (
    LabeledDataset,
    dataset_manifest,
    load_archive,
    make_longtail_counts,
    save_archive,
    split_divisions,
    synth_gaussian_lt,
)
from .evaluation import (
    TABLE_ROWS,
    ablation_run,
    evaluate,
    expert_count_sweep,
    expert_preference,
    hardest_negative_hist,
)
from .losses import (
    LossWeights,
    decouple_logits,
    elect_grand_teacher,
    loss_bsce,
    loss_ce,
    loss_mutual,
    loss_nt,
    loss_total,
)
from .model import BackboneConfig
from .training import (
    TrainConfig,
    build_model,
    checkpoint_load,
    checkpoint_save,
    train_stage1,
    train_stage2,
)

DEFAULT_CONFIG = {
    "seed": 0,
    "out_dir": "run",
    "dataset": {
        "kind": "synthetic",
        "num_classes": 20,
        "dims": 24,
        "n_max": 100,
        "imbalance": 100.0,
        "class_separation": 3.0,
        "test_per_class": 25,
    },
    "model": {
        "kind": "mlp",
        "stage_widths": [48, 48, 48],
        "expert_width": 48,
        "num_experts": 3,
        "taps": None,
        "use_fusion": True,
    },
    "train": {
        "epochs_stage1": 30,
        "epochs_stage2": 20,
        "base_lr": 0.05,
        "momentum": 0.9,
        "weight_decay": 5e-4,
        "batch_size": 64,
        "weights": {"alpha": 1.0, "beta": 1.0, "temperature": 1.0},
    },
}


def _deep_update(base: dict, extra: dict) -> dict:
    out = dict(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_update(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path, overrides=()) -> dict:
    with open(path) as fh:
        cfg = _deep_update(DEFAULT_CONFIG, json.load(fh))
    for item in overrides:
        key, _, raw = item.partition("=")
        if not _:
            raise ValueError(f"override {item!r} is not of the form key=value")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = cfg
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return cfg


def _train_config(cfg: dict) -> TrainConfig:
    d = dict(cfg["train"])
    d["seed"] = cfg["seed"]
    return TrainConfig.from_json(d)


def _backbone(cfg: dict, num_classes: int, input_shape) -> BackboneConfig:
    m = cfg["model"]
    return BackboneConfig(
        kind=m["kind"],
        input_shape=tuple(input_shape),
        stage_widths=tuple(m["stage_widths"]),
        expert_width=m["expert_width"],
        num_classes=num_classes,
    )


def _data_paths(cfg: dict):
    d = os.path.join(cfg["out_dir"], "data")
    return os.path.join(d, "train.bin"), os.path.join(d, "test.bin")


def build_datasets(cfg: dict):
    """Materialize (or load) the train/test datasets named by the config."""
    ds = cfg["dataset"]
    if ds["kind"] == "archive":
        return load_archive(ds["train_path"]), load_archive(ds["test_path"])
    if ds["kind"] != "synthetic":
        raise ValueError(f"unknown dataset kind {ds['kind']!r}")
    counts = make_longtail_counts(ds["num_classes"], ds["n_max"], ds["imbalance"])
    return synth_gaussian_lt(
        ds["num_classes"], ds["dims"], counts, ds["class_separation"],
        seed=cfg["seed"], test_per_class=ds["test_per_class"],
    )


def code_hash() -> str:
    """Content hash over the package's source files."""
    h = hashlib.sha256()
    pkg_dir = os.path.dirname(__file__)
    for name in sorted(os.listdir(pkg_dir)):
        if name.endswith(".py"):
            with open(os.path.join(pkg_dir, name), "rb") as fh:
                h.update(name.encode())
                h.update(fh.read())
    return h.hexdigest()


def write_manifest(cfg: dict, train_ds: LabeledDataset, artifacts: dict) -> str:
    manifest = {
        "config": cfg,
        "dataset": dataset_manifest(train_ds, seed=cfg["seed"]),
        "code_hash": code_hash(),
        "seed": cfg["seed"],
        "artifacts": artifacts,
    }
    path = os.path.join(cfg["out_dir"], "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2)
    return path


def _sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        h.update(fh.read())
    return h.hexdigest()


# -- subcommands -------------------------------------------------------------


def cmd_build_data(args) -> int:
    cfg = load_config(args.config, args.set)
    train_ds, test_ds = build_datasets(cfg)
    train_path, test_path = _data_paths(cfg)
    os.makedirs(os.path.dirname(train_path), exist_ok=True)
    save_archive(train_ds, train_path, seed=cfg["seed"])
    save_archive(test_ds, test_path, seed=cfg["seed"])
    write_manifest(cfg, train_ds, {
        "train_archive": train_path,
        "test_archive": test_path,
        "train_sha256": _sha256_file(train_path),
        "test_sha256": _sha256_file(test_path),
    })
    print(json.dumps({
        "train": train_path,
        "test": test_path,
        "division_sizes": split_divisions(train_ds.spec).sizes(),
    }))
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.set)
    os.makedirs(cfg["out_dir"], exist_ok=True)
    train_ds, _ = build_datasets(cfg)
    tconf = _train_config(cfg)
    log_path = os.path.join(cfg["out_dir"], "metrics.csv")
    if os.path.exists(log_path):
        os.remove(log_path)
    ckpt1 = os.path.join(cfg["out_dir"], "stage1.npz")
    ckpt2 = os.path.join(cfg["out_dir"], "stage2.npz")

    if args.stage2_only:
        state = checkpoint_load(args.from_checkpoint or ckpt1,
                                expect_num_classes=train_ds.spec.num_classes)
    else:
        m = cfg["model"]
        backbone = _backbone(cfg, train_ds.spec.num_classes, train_ds.inputs.shape[1:])
        model = build_model(backbone, num_experts=m["num_experts"], taps=m["taps"],
                            use_fusion=m["use_fusion"], seed=cfg["seed"])
        state = train_stage1(model, train_ds, tconf, log_path=log_path)
        checkpoint_save(state, ckpt1)
    state = train_stage2(state, train_ds, log_path=log_path)
    checkpoint_save(state, ckpt2)
    write_manifest(cfg, train_ds, {
        "stage1_checkpoint": ckpt1 if not args.stage2_only else args.from_checkpoint or ckpt1,
        "stage2_checkpoint": ckpt2,
        "metrics_csv": log_path,
    })
    print(json.dumps({"stage1": ckpt1, "stage2": ckpt2, "metrics": log_path,
                      "final_train_acc": state.history[-1]["train_acc"]}))
    return 0


def _load_eval_inputs(cfg, args):
    train_ds, test_ds = build_datasets(cfg)
    ckpt = args.checkpoint or os.path.join(cfg["out_dir"], "stage2.npz")
    state = checkpoint_load(ckpt, expect_num_classes=test_ds.spec.num_classes)
    return train_ds, test_ds, state


def cmd_eval(args) -> int:
    cfg = load_config(args.config, args.set)
    train_ds, test_ds, state = _load_eval_inputs(cfg, args)
    division = split_divisions(train_ds.spec)
    report = evaluate(state.model, test_ds, division)
    os.makedirs(cfg["out_dir"], exist_ok=True)
    out_json = os.path.join(cfg["out_dir"], "eval_report.json")
    with open(out_json, "w") as fh:
        json.dump(report.to_json(), fh, indent=2)
    out_csv = os.path.join(cfg["out_dir"], "per_class_accuracy.csv")
    with open(out_csv, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "accuracy"])
        writer.writerows(enumerate(report.per_class.tolist()))
    print(json.dumps({"overall": report.overall, "per_division": report.per_division,
                      "report": out_json}))
    return 0


def cmd_diagnose(args) -> int:
    cfg = load_config(args.config, args.set)
    train_ds, test_ds, state = _load_eval_inputs(cfg, args)
    division = split_divisions(train_ds.spec)
    report = evaluate(state.model, test_ds, division)
    hist = hardest_negative_hist(state.model, test_ds, bins=args.bins,
                                 source=args.source)
    prefs = expert_preference(report, division)
    out_dir = cfg["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    payload = {
        "hardest_negative_histogram": hist.to_json(),
        "fraction_above_0.5": hist.fraction_above(0.5),
        "expert_preference": {
            k: (v.tolist() if v is not None else None) for k, v in prefs.items()
        },
    }
    out_json = os.path.join(out_dir, "diagnostics.json")
    with open(out_json, "w") as fh:
        json.dump(payload, fh, indent=2)
    _plot_diagnostics(report, hist, out_dir)
    print(json.dumps({"diagnostics": out_json,
                      "fraction_above_0.5": payload["fraction_above_0.5"]}))
    return 0


def _plot_diagnostics(report, hist, out_dir):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    centers = (hist.bin_edges[:-1] + hist.bin_edges[1:]) / 2
    ax.bar(centers, hist.counts, width=np.diff(hist.bin_edges), edgecolor="black")
    ax.set_xlabel("max non-target probability")
    ax.set_ylabel("test samples")
    fig.tight_layout()
    fig.savefig(os.path.join(out_dir, "hardest_negative_hist.png"))
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(7, 4))
    ax.bar(np.arange(report.per_class.size), report.per_class)
    ax.set_xlabel("class (sorted by training count)")
    ax.set_ylabel("test accuracy")
    fig.tight_layout()
    fig.savefig(os.path.join(out_dir, "per_class_accuracy.png"))
    plt.close(fig)


def cmd_ablate(args) -> int:
    cfg = load_config(args.config, args.set)
    train_ds, test_ds = build_datasets(cfg)
    backbone = _backbone(cfg, train_ds.spec.num_classes, train_ds.inputs.shape[1:])
    results = ablation_run(backbone, train_ds, test_ds, _train_config(cfg),
                           rows=TABLE_ROWS, num_experts=cfg["model"]["num_experts"])
    os.makedirs(cfg["out_dir"], exist_ok=True)
    out_csv = os.path.join(cfg["out_dir"], "ablation.csv")
    with open(out_csv, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["moe", "dkf", "mu", "nt", "accuracy"])
        for flags, acc in results:
            writer.writerow([flags.use_moe, flags.use_dkf, flags.use_mu,
                             flags.use_nt, acc])
    print(json.dumps({"ablation": out_csv,
                      "rows": [(f.label(), acc) for f, acc in results]}))
    return 0


def cmd_sweep_experts(args) -> int:
    cfg = load_config(args.config, args.set)
    train_ds, test_ds = build_datasets(cfg)
    backbone = _backbone(cfg, train_ds.spec.num_classes, train_ds.inputs.shape[1:])
    arrangements = [a.strip() for a in args.arrangements.split(",") if a.strip()]
    results = expert_count_sweep(backbone, train_ds, test_ds, _train_config(cfg),
                                 arrangements)
    os.makedirs(cfg["out_dir"], exist_ok=True)
    out_csv = os.path.join(cfg["out_dir"], "expert_sweep.csv")
    with open(out_csv, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["arrangement", "num_experts", "accuracy"])
        writer.writerows(results)
    print(json.dumps({"sweep": out_csv, "rows": results}))
    return 0


def cmd_losses(args) -> int:
    """Evaluate every loss on a JSON logit file (debugging aid).

    File format: {"expert_logits": [[...], ...], "label": y,
                  "counts": [...], "alpha": a, "beta": b, "temperature": t}
    """
    import torch

    with open(args.logits) as fh:
        payload = json.load(fh)
    logits = torch.tensor(payload["expert_logits"], dtype=torch.float64)
    y = int(payload["label"])
    weights = LossWeights(
        alpha=payload.get("alpha", 1.0),
        beta=payload.get("beta", 1.0),
        temperature=payload.get("temperature", 1.0),
    )
    tau = weights.temperature
    nontargets = [decouple_logits(z, y).nontarget_logits for z in logits]
    teacher = elect_grand_teacher(nontargets)
    ce = loss_ce(logits, y)
    nt = loss_nt(teacher, nontargets, tau)
    mu = loss_mutual(logits, tau)
    out = {
        "L_ce": float(ce),
        "L_nt": float(nt),
        "L_mu": float(mu),
        "L_total": float(loss_total(ce, nt, mu, weights)),
        "consensus_index": teacher.consensus_index,
        "grand_teacher": teacher.logits.tolist(),
    }
    if "counts" in payload:
        out["L_bsce"] = float(loss_bsce(logits, y, payload["counts"]))
    print(json.dumps(out, indent=2))
    return 0


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ltmoe",
        description="Long-tailed mixture-of-experts training and diagnostics",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, **kwargs):
        p = sub.add_parser(name, **kwargs)
        p.set_defaults(fn=fn)
        if name != "losses":
            p.add_argument("config", help="path to the JSON run config")
            p.add_argument("--set", action="append", default=[],
                           metavar="KEY=VALUE", help="override a config key")
        return p

    add("build-data", cmd_build_data, help="materialize the configured dataset")
    p = add("train", cmd_train, help="run stage-1 then stage-2 training")
    p.add_argument("--stage2-only", action="store_true",
                   help="retrain classifiers from an existing stage-1 checkpoint")
    p.add_argument("--from-checkpoint", default=None)
    p = add("eval", cmd_eval, help="balanced-test evaluation with divisions")
    p.add_argument("--checkpoint", default=None)
    p = add("diagnose", cmd_diagnose, help="hardest-negative histogram and expert preference")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--bins", type=int, default=20)
    p.add_argument("--source", choices=["ensemble", "expert_mean"], default="ensemble")
    add("ablate", cmd_ablate, help="component ablation table")
    p = add("sweep-experts", cmd_sweep_experts, help="expert-count / depth sweep")
    p.add_argument("--arrangements", default="C,BC,ABC",
                   help="comma-separated tap arrangements (A=shallowest)")
    p = sub.add_parser("losses", help="evaluate losses on a logit file")
    p.set_defaults(fn=cmd_losses)
    p.add_argument("logits", help="JSON file with expert logits and a label")
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        return args.fn(args)
    except Exception as exc:  # surface a machine-readable error
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
