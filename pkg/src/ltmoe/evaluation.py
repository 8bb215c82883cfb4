"""Balanced-test evaluation, expert-preference analysis, hardest-negative
histograms, and the ablation / expert-count sweep harnesses."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import torch

from .data import ClassDivision, LabeledDataset, split_divisions
from .model import BackboneConfig, parse_arrangement
from .training import TrainConfig, TrainState, build_model, run_both_stages


class EvalError(ValueError):
    pass


@dataclass(frozen=True)
class EvalReport:
    overall: float                 # ensemble accuracy on the balanced test set
    per_division: dict             # division name -> accuracy or None when empty
    per_class: np.ndarray          # shape (C,), ensemble accuracy per class
    per_expert_per_class: np.ndarray  # shape (M, C), each expert's logits alone
    num_samples: int

    def to_json(self) -> dict:
        return {
            "overall": self.overall,
            "per_division": self.per_division,
            "per_class": self.per_class.tolist(),
            "per_expert_per_class": self.per_expert_per_class.tolist(),
            "num_samples": self.num_samples,
        }


@dataclass(frozen=True)
class HardestNegativeHistogram:
    bin_edges: np.ndarray   # shape (bins+1,), spanning [0, 1]
    counts: np.ndarray      # shape (bins,), sums to the test-set size

    def fraction_above(self, threshold: float) -> float:
        centers_lo = self.bin_edges[:-1]
        mask = centers_lo >= threshold
        return float(self.counts[mask].sum()) / float(self.counts.sum())

    def to_json(self) -> dict:
        return {"bin_edges": self.bin_edges.tolist(), "counts": self.counts.tolist()}


def _model_logits(model, dataset: LabeledDataset, batch_size: int = 512) -> torch.Tensor:
    """Per-expert logits over the whole dataset, shape (M, N, C)."""
    if model.cfg.num_classes != dataset.spec.num_classes:
        raise EvalError(
            f"model has {model.cfg.num_classes} classes, dataset has "
            f"{dataset.spec.num_classes}"
        )
    model.eval()
    chunks = []
    inputs = torch.from_numpy(np.array(dataset.inputs))
    with torch.no_grad():
        for start in range(0, len(dataset), batch_size):
            out = model(inputs[start:start + batch_size])
            chunks.append(out.expert_logits)
    return torch.cat(chunks, dim=1)


def _per_class_accuracy(pred: np.ndarray, labels: np.ndarray, num_classes: int) -> np.ndarray:
    acc = np.zeros(num_classes)
    for c in range(num_classes):
        mask = labels == c
        acc[c] = float((pred[mask] == c).mean()) if mask.any() else np.nan
    return acc


def evaluate(model, test_dataset: LabeledDataset, division: ClassDivision,
             batch_size: int = 512) -> EvalReport:
    """Ensemble and per-expert accuracy with many/medium/few breakdowns.

    The division must come from the *training* count spec; the test set
    itself is balanced.
    """
    if test_dataset.split_tag != "test":
        raise EvalError("evaluate expects the balanced test split")
    logits = _model_logits(model, test_dataset, batch_size)
    labels = test_dataset.labels
    c = test_dataset.spec.num_classes
    ensemble_pred = logits.sum(dim=0).numpy().argmax(axis=-1)
    per_class = _per_class_accuracy(ensemble_pred, labels, c)
    per_expert = np.stack([
        _per_class_accuracy(logits[m].numpy().argmax(axis=-1), labels, c)
        for m in range(logits.shape[0])
    ])
    per_division = {}
    for name in ("many", "medium", "few"):
        members = sorted(getattr(division, name))
        per_division[name] = float(per_class[members].mean()) if members else None
    return EvalReport(
        overall=float((ensemble_pred == labels).mean()),
        per_division=per_division,
        per_class=per_class,
        per_expert_per_class=per_expert,
        num_samples=len(test_dataset),
    )


def expert_preference(report: EvalReport, division: ClassDivision) -> dict:
    """Per division: fraction of classes each expert is best at, ties split evenly.

    Returns {division: ratios array of length M, or None for an empty division}.
    """
    acc = report.per_expert_per_class
    m = acc.shape[0]
    out = {}
    for name in ("many", "medium", "few"):
        members = sorted(getattr(division, name))
        if not members:
            out[name] = None
            continue
        ratios = np.zeros(m)
        for c in members:
            col = acc[:, c]
            winners = np.flatnonzero(col == col.max())
            ratios[winners] += 1.0 / winners.size
        out[name] = ratios / len(members)
    return out


def hardest_negative_hist(model, test_dataset: LabeledDataset, bins: int = 20,
                          source: str = "ensemble") -> HardestNegativeHistogram:
    """Histogram of each test sample's maximum non-target probability.

    ``source`` picks the probability model: "ensemble" applies softmax to
    the summed logits (default); "expert_mean" averages the per-expert
    softmax distributions first.
    """
    if source not in ("ensemble", "expert_mean"):
        raise EvalError(f"unknown probability source {source!r}")
    logits = _model_logits(model, test_dataset)
    if source == "ensemble":
        probs = torch.softmax(logits.sum(dim=0), dim=-1)
    else:
        probs = torch.softmax(logits, dim=-1).mean(dim=0)
    probs = probs.numpy()
    labels = test_dataset.labels
    probs[np.arange(len(labels)), labels] = -1.0  # drop the target class
    hardest = probs.max(axis=-1)
    counts, edges = np.histogram(hardest, bins=bins, range=(0.0, 1.0))
    return HardestNegativeHistogram(bin_edges=edges, counts=counts.astype(np.int64))


# ---------------------------------------------------------------------------
# Ablation and sweep harnesses. Each cell trains one model through both
# stages with identical data and config, varying only the flagged parts.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AblationFlags:
    use_moe: bool = True
    use_dkf: bool = True
    use_mu: bool = True
    use_nt: bool = True

    def __post_init__(self):
        if not self.use_moe and (self.use_dkf or self.use_mu or self.use_nt):
            raise EvalError("DKF and the distillation losses require the MoE model")

    def label(self) -> str:
        on = [n for n in ("moe", "dkf", "mu", "nt") if getattr(self, "use_" + n)]
        return "+".join(on) if on else "baseline"


TABLE_ROWS = [
    AblationFlags(False, False, False, False),
    AblationFlags(True, False, False, False),
    AblationFlags(True, True, False, False),
    AblationFlags(True, True, True, False),
    AblationFlags(True, True, False, True),
    AblationFlags(True, False, True, True),
    AblationFlags(True, True, True, True),
]


def train_flagged(flags: AblationFlags, backbone: BackboneConfig,
                  train_ds: LabeledDataset, config: TrainConfig,
                  num_experts: int = 3, taps=None) -> TrainState:
    """Train one ablation configuration end to end (stage 1 + stage 2)."""
    m = num_experts if flags.use_moe else 1
    weights = replace(
        config.weights,
        alpha=config.weights.alpha if flags.use_nt else 0.0,
        beta=config.weights.beta if flags.use_mu else 0.0,
    )
    cfg = replace(config, weights=weights)
    model = build_model(
        backbone,
        num_experts=m,
        taps=taps if flags.use_moe else None,
        use_fusion=flags.use_dkf,
        seed=config.seed,
    )
    return run_both_stages(model, train_ds, cfg)


def ablation_run(backbone: BackboneConfig, train_ds: LabeledDataset,
                 test_ds: LabeledDataset, config: TrainConfig,
                 rows=tuple(TABLE_ROWS), num_experts: int = 3) -> list:
    """Balanced accuracy per ablation row; returns [(flags, accuracy), ...]."""
    division = split_divisions(train_ds.spec)
    results = []
    for flags in rows:
        state = train_flagged(flags, backbone, train_ds, config, num_experts)
        report = evaluate(state.model, test_ds, division)
        results.append((flags, report.overall))
    return results


def expert_count_sweep(backbone: BackboneConfig, train_ds: LabeledDataset,
                       test_ds: LabeledDataset, config: TrainConfig,
                       arrangements) -> list:
    """Accuracy per (M, tap arrangement) cell; arrangements are letter strings."""
    division = split_divisions(train_ds.spec)
    results = []
    for text in arrangements:
        taps = parse_arrangement(text, backbone.num_stages)
        model = build_model(backbone, num_experts=len(taps), taps=taps,
                            use_fusion=True, seed=config.seed)
        state = run_both_stages(model, train_ds, config)
        report = evaluate(state.model, test_ds, division)
        results.append((text, len(taps), report.overall))
    return results
