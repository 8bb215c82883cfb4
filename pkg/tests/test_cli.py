import csv
import hashlib
import json
import os

import numpy as np
import pytest

from ltmoe.cli import DEFAULT_CONFIG, load_config, main
from ltmoe.data import load_archive


def write_config(tmp_path, name="config.json", **overrides):
    cfg = {
        "seed": 0,
        "out_dir": str(tmp_path / "run"),
        "dataset": {
            "kind": "synthetic",
            "num_classes": 4,
            "dims": 5,
            "n_max": 30,
            "imbalance": 10.0,
            "class_separation": 2.5,
            "test_per_class": 8,
        },
        "model": {
            "kind": "mlp",
            "stage_widths": [8, 8],
            "expert_width": 8,
            "num_experts": 2,
            "taps": None,
            "use_fusion": True,
        },
        "train": {
            "epochs_stage1": 2,
            "epochs_stage2": 1,
            "base_lr": 0.05,
            "batch_size": 16,
            "weights": {"alpha": 1.0, "beta": 1.0, "temperature": 1.0},
        },
    }
    for key, value in overrides.items():
        node = cfg
        parts = key.split(".")
        for p in parts[:-1]:
            node = node[p]
        node[parts[-1]] = value
    tmp_path.mkdir(parents=True, exist_ok=True)
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


def run_cli(*argv):
    return main(list(argv))


def sha256(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


# -- config loading ----------------------------------------------------------------


def test_load_config_merges_defaults(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"seed": 7}))
    cfg = load_config(str(path))
    assert cfg["seed"] == 7
    assert cfg["dataset"]["kind"] == DEFAULT_CONFIG["dataset"]["kind"]
    assert cfg["train"]["momentum"] == DEFAULT_CONFIG["train"]["momentum"]


def test_load_config_set_overrides(tmp_path):
    path = tmp_path / "c.json"
    path.write_text("{}")
    cfg = load_config(str(path), ["train.base_lr=0.2", "dataset.kind=archive",
                                  "model.taps=[1,2]"])
    assert cfg["train"]["base_lr"] == 0.2
    assert cfg["dataset"]["kind"] == "archive"
    assert cfg["model"]["taps"] == [1, 2]


def test_load_config_bad_override(tmp_path):
    path = tmp_path / "c.json"
    path.write_text("{}")
    with pytest.raises(ValueError):
        load_config(str(path), ["no-equals-sign"])


# -- build-data -----------------------------------------------------------------------


def test_build_data_writes_archives_and_manifest(tmp_path, capsys):
    config = write_config(tmp_path)
    assert run_cli("build-data", config) == 0
    out = json.loads(capsys.readouterr().out)
    train = load_archive(out["train"])
    test = load_archive(out["test"])
    assert train.spec.counts.tolist() == [30, 14, 6, 3]
    assert test.class_counts().tolist() == [8, 8, 8, 8]
    manifest = json.loads((tmp_path / "run" / "manifest.json").read_text())
    assert manifest["dataset"]["num_classes"] == 4
    assert manifest["artifacts"]["train_sha256"] == sha256(out["train"])
    assert len(manifest["code_hash"]) == 64


def test_build_data_deterministic_bytes(tmp_path, capsys):
    config_a = write_config(tmp_path / "a", name="a.json")
    config_b = write_config(tmp_path / "b", name="b.json")
    run_cli("build-data", config_a)
    a = json.loads(capsys.readouterr().out)
    run_cli("build-data", config_b)
    b = json.loads(capsys.readouterr().out)
    assert sha256(a["train"]) == sha256(b["train"])
    assert sha256(a["test"]) == sha256(b["test"])


def test_build_data_rejects_infeasible_imbalance(tmp_path, capsys):
    config = write_config(tmp_path, **{"dataset.n_max": 5, "dataset.imbalance": 10.0})
    assert run_cli("build-data", config) == 1
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "DataError"
    assert "n_max" in err["message"]


# -- train / eval pipeline ----------------------------------------------------------------


def test_train_writes_checkpoints_and_metrics(tmp_path, capsys):
    config = write_config(tmp_path)
    assert run_cli("train", config) == 0
    out = json.loads(capsys.readouterr().out)
    assert os.path.exists(out["stage1"])
    assert os.path.exists(out["stage2"])
    with open(out["metrics"]) as fh:
        rows = list(csv.DictReader(fh))
    # 2 stage-1 epochs + 1 stage-2 epoch
    assert [r["stage"] for r in rows] == ["representation"] * 2 + ["classifier"]
    assert 0.0 <= float(out["final_train_acc"]) <= 1.0


def test_train_rerun_identical_metrics(tmp_path, capsys):
    config_a = write_config(tmp_path / "a", name="a.json")
    config_b = write_config(tmp_path / "b", name="b.json")
    run_cli("train", config_a)
    a = json.loads(capsys.readouterr().out)
    run_cli("train", config_b)
    b = json.loads(capsys.readouterr().out)
    assert a["final_train_acc"] == b["final_train_acc"]
    assert open(a["metrics"]).read() == open(b["metrics"]).read()


def test_stage2_only_matches_full_pipeline(tmp_path, capsys):
    config_a = write_config(tmp_path / "a", name="a.json")
    run_cli("train", config_a)
    full = json.loads(capsys.readouterr().out)

    config_b = write_config(tmp_path / "b", name="b.json")
    run_cli("train", config_b)
    first = json.loads(capsys.readouterr().out)
    # redo stage 2 from the saved stage-1 checkpoint
    assert run_cli("train", config_b, "--stage2-only",
                   "--from-checkpoint", first["stage1"]) == 0
    redo = json.loads(capsys.readouterr().out)
    assert redo["final_train_acc"] == full["final_train_acc"]


def test_eval_reports_division_accuracies(tmp_path, capsys):
    config = write_config(tmp_path)
    run_cli("train", config)
    capsys.readouterr()
    assert run_cli("eval", config) == 0
    out = json.loads(capsys.readouterr().out)
    assert 0.0 <= out["overall"] <= 1.0
    assert set(out["per_division"]) == {"many", "medium", "few"}
    report = json.loads(open(out["report"]).read())
    assert len(report["per_class"]) == 4
    with open(tmp_path / "run" / "per_class_accuracy.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["class", "accuracy"]
    assert len(rows) == 5


def test_eval_missing_checkpoint_errors(tmp_path, capsys):
    config = write_config(tmp_path)
    assert run_cli("eval", config) == 1
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "CheckpointError"


def test_eval_explicit_checkpoint_roundtrip(tmp_path, capsys):
    config = write_config(tmp_path)
    run_cli("train", config)
    trained = json.loads(capsys.readouterr().out)
    run_cli("eval", config)
    default = json.loads(capsys.readouterr().out)
    run_cli("eval", config, "--checkpoint", trained["stage2"])
    explicit = json.loads(capsys.readouterr().out)
    assert default["overall"] == explicit["overall"]


# -- diagnose ------------------------------------------------------------------------------


def test_diagnose_outputs(tmp_path, capsys):
    config = write_config(tmp_path)
    run_cli("train", config)
    capsys.readouterr()
    assert run_cli("diagnose", config, "--bins", "10") == 0
    out = json.loads(capsys.readouterr().out)
    payload = json.loads(open(out["diagnostics"]).read())
    hist = payload["hardest_negative_histogram"]
    assert len(hist["counts"]) == 10
    assert sum(hist["counts"]) == 32  # 4 classes x 8 test samples
    assert 0.0 <= payload["fraction_above_0.5"] <= 1.0
    prefs = payload["expert_preference"]
    for name in ("many", "medium", "few"):
        assert prefs[name] is None or len(prefs[name]) == 2
    assert os.path.exists(tmp_path / "run" / "hardest_negative_hist.png")
    assert os.path.exists(tmp_path / "run" / "per_class_accuracy.png")


# -- ablate and sweep ---------------------------------------------------------------------


def test_ablate_writes_seven_rows(tmp_path, capsys):
    config = write_config(tmp_path, **{"train.epochs_stage1": 1})
    assert run_cli("ablate", config) == 0
    out = json.loads(capsys.readouterr().out)
    with open(out["ablation"]) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 7
    assert rows[0]["moe"] == "False"
    assert rows[-1] == {**rows[-1], "moe": "True", "dkf": "True",
                        "mu": "True", "nt": "True"}
    assert all(0.0 <= float(r["accuracy"]) <= 1.0 for r in rows)


def test_sweep_experts_rows(tmp_path, capsys):
    config = write_config(tmp_path, **{"train.epochs_stage1": 1})
    assert run_cli("sweep-experts", config, "--arrangements", "B,AB") == 0
    out = json.loads(capsys.readouterr().out)
    with open(out["sweep"]) as fh:
        rows = list(csv.DictReader(fh))
    assert [(r["arrangement"], r["num_experts"]) for r in rows] == [
        ("B", "1"), ("AB", "2")]


# -- losses debugging subcommand ------------------------------------------------------------


def test_losses_equal_experts_zero_distillation(tmp_path, capsys):
    payload = {
        "expert_logits": [[1.0, 2.0, 0.5], [1.0, 2.0, 0.5]],
        "label": 0,
        "counts": [10, 5, 1],
    }
    path = tmp_path / "logits.json"
    path.write_text(json.dumps(payload))
    assert run_cli("losses", str(path)) == 0
    out = json.loads(capsys.readouterr().out)
    # identical experts: the teacher equals each student and mutual KL vanishes
    assert out["L_mu"] == pytest.approx(0.0, abs=1e-12)
    assert out["L_nt"] == pytest.approx(0.0, abs=1e-12)
    assert out["L_total"] == pytest.approx(out["L_ce"])
    assert out["consensus_index"] == 0  # hardest negative is class 1, first non-target
    assert "L_bsce" in out


def test_losses_hand_values(tmp_path, capsys):
    payload = {"expert_logits": [[0.0, 0.0]], "label": 1}
    path = tmp_path / "logits.json"
    path.write_text(json.dumps(payload))
    run_cli("losses", str(path))
    out = json.loads(capsys.readouterr().out)
    assert out["L_ce"] == pytest.approx(np.log(2.0))
    assert out["L_mu"] == 0.0
