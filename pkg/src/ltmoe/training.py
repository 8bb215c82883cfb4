"""Two-stage decoupled training.

Stage 1 learns representations on the natural long-tailed distribution
with cross-entropy plus the two distillation terms; stage 2 freezes the
feature extractor (backbone, alignment paths, exclusive stages), swaps
in freshly initialized heads, and retrains them with balanced softmax
cross-entropy under a restarted cosine schedule.

Per-epoch data order is drawn from a generator seeded by (seed, epoch),
so resuming from a checkpoint replays the same batches.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .data import LabeledDataset
from .losses import (
    LossWeights,
    loss_bsce_batch,
    loss_ce_batch,
    loss_mutual_batch,
    loss_nt_batch,
)
from .model import BackboneConfig, MoEModel, model_from_header

CHECKPOINT_VERSION = 1

STAGE_REPRESENTATION = "representation"
STAGE_CLASSIFIER = "classifier"

CSV_FIELDS = ["epoch", "stage", "lr", "L_ce", "L_nt", "L_mu", "total", "train_acc"]


class TrainingError(RuntimeError):
    pass


class TrainingDiverged(TrainingError):
    """Raised when the loss goes non-finite; carries the offending batch's logits."""

    def __init__(self, epoch, batch_index, expert_logits, labels):
        self.epoch = epoch
        self.batch_index = batch_index
        self.expert_logits = expert_logits.detach().cpu().numpy()
        self.labels = labels.detach().cpu().numpy()
        super().__init__(
            f"non-finite loss at epoch {epoch}, batch {batch_index}; "
            f"logit range [{np.nanmin(self.expert_logits)}, {np.nanmax(self.expert_logits)}]"
        )

    def diagnostic(self) -> dict:
        return {
            "epoch": self.epoch,
            "batch_index": self.batch_index,
            "expert_logits": self.expert_logits.tolist(),
            "labels": self.labels.tolist(),
        }


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs_stage1: int = 30
    epochs_stage2: int = 20
    base_lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 64
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0

    def __post_init__(self):
        if self.epochs_stage1 < 1 or self.epochs_stage2 < 1:
            raise TrainingError("epoch counts must be >= 1")
        if self.base_lr <= 0 or self.batch_size < 1:
            raise TrainingError("base_lr and batch_size must be positive")

    def to_json(self) -> dict:
        d = asdict(self)
        d["weights"] = asdict(self.weights)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "weights" in d:
            d["weights"] = LossWeights(**d["weights"])
        return cls(**d)


@dataclass
class TrainState:
    model: MoEModel
    optimizer: torch.optim.SGD
    epoch: int
    stage: str
    history: list
    config: TrainConfig


def cosine_lr(epoch: int, total_epochs: int, base_lr: float) -> float:
    """Cosine decay from base_lr at epoch 0 to exactly 0 at total_epochs."""
    if total_epochs <= 0:
        raise TrainingError("total_epochs must be positive")
    if not (0 <= epoch <= total_epochs):
        raise TrainingError(f"epoch {epoch} outside 0..{total_epochs}")
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * epoch / total_epochs))


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    """Deterministic shuffle for one epoch, independent of prior epochs."""
    return np.random.default_rng([seed, epoch]).permutation(n)


def _tensors(dataset: LabeledDataset):
    return (
        torch.from_numpy(np.array(dataset.inputs)),
        torch.from_numpy(np.array(dataset.labels)),
    )


def _make_optimizer(params, config: TrainConfig):
    return torch.optim.SGD(
        [p for p in params if p.requires_grad],
        lr=config.base_lr,
        momentum=config.momentum,
        weight_decay=config.weight_decay,
    )


def _append_log(log_path, rows):
    if log_path is None:
        return
    new = not os.path.exists(log_path)
    with open(log_path, "a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        if new:
            writer.writeheader()
        writer.writerows(rows)


def _run_epochs(state: TrainState, dataset: LabeledDataset, total_epochs: int,
                loss_fn, log_path=None, augment=None, stop_after=None):
    """Advance state.epoch toward total_epochs, one SGD step per batch.

    The cosine schedule always spans total_epochs; stop_after only cuts the
    run short (for checkpoint-and-resume), it never reshapes the schedule.
    """
    config = state.config
    inputs, labels = _tensors(dataset)
    n = len(dataset)
    model = state.model
    inputs = inputs.to(next(model.parameters()).dtype)
    model.train()
    last = total_epochs if stop_after is None else min(stop_after, total_epochs)
    while state.epoch < last:
        epoch = state.epoch
        lr = cosine_lr(epoch, total_epochs, config.base_lr)
        for group in state.optimizer.param_groups:
            group["lr"] = lr
        order = epoch_order(config.seed, epoch, n)
        sums = {"L_ce": 0.0, "L_nt": 0.0, "L_mu": 0.0, "total": 0.0}
        correct = 0
        for bi, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start:start + config.batch_size]
            xb = inputs[idx]
            if augment is not None:
                xb = augment(xb)
            yb = labels[idx]
            out = model(xb)
            terms, total = loss_fn(out.expert_logits, yb)
            if not torch.isfinite(total):
                raise TrainingDiverged(epoch, bi, out.expert_logits, yb)
            state.optimizer.zero_grad()
            total.backward()
            state.optimizer.step()
            w = len(idx) / n
            for k, v in terms.items():
                sums[k] += float(v.detach()) * w
            sums["total"] += float(total.detach()) * w
            pred = out.ensemble_logits.detach().argmax(dim=-1)
            correct += int((pred == yb).sum())
        row = {
            "epoch": epoch,
            "stage": state.stage,
            "lr": lr,
            "train_acc": correct / n,
            **sums,
        }
        state.history.append(row)
        _append_log(log_path, [row])
        state.epoch = epoch + 1
    return state


def _stage1_loss(config: TrainConfig):
    w = config.weights

    def fn(expert_logits, yb):
        ce = loss_ce_batch(expert_logits, yb)
        nt = loss_nt_batch(expert_logits, yb, w.temperature) if w.alpha else expert_logits.new_zeros(())
        mu = loss_mutual_batch(expert_logits, w.temperature) if w.beta else expert_logits.new_zeros(())
        total = ce + w.alpha * nt + w.beta * mu
        return {"L_ce": ce, "L_nt": nt, "L_mu": mu}, total

    return fn


def train_stage1(model: MoEModel, dataset: LabeledDataset, config: TrainConfig,
                 log_path=None, augment=None, stop_after=None) -> TrainState:
    """Representation learning on the natural distribution, all parameters trained."""
    if dataset.split_tag != "train":
        raise TrainingError("stage 1 expects the train split")
    for p in model.parameters():
        p.requires_grad_(True)
    state = TrainState(
        model=model,
        optimizer=_make_optimizer(model.parameters(), config),
        epoch=0,
        stage=STAGE_REPRESENTATION,
        history=[],
        config=config,
    )
    return _run_epochs(state, dataset, config.epochs_stage1, _stage1_loss(config),
                       log_path=log_path, augment=augment, stop_after=stop_after)


def resume_stage1(state: TrainState, dataset: LabeledDataset, log_path=None) -> TrainState:
    """Continue an interrupted stage-1 run from its recorded epoch."""
    if state.stage != STAGE_REPRESENTATION:
        raise TrainingError(f"cannot resume stage 1 from a {state.stage!r} checkpoint")
    return _run_epochs(state, dataset, state.config.epochs_stage1,
                       _stage1_loss(state.config), log_path=log_path)


def train_stage2(state: TrainState, dataset: LabeledDataset, log_path=None) -> TrainState:
    """Classifier retraining: frozen extractor, fresh heads, balanced softmax CE."""
    if state.stage != STAGE_REPRESENTATION:
        raise TrainingError(f"stage 2 requires a representation checkpoint, got {state.stage!r}")
    if dataset.split_tag != "train":
        raise TrainingError("stage 2 expects the train split")
    config = state.config
    model = state.model
    for p in model.extractor_parameters():
        p.requires_grad_(False)
    gen = torch.Generator().manual_seed(config.seed + 0x5747)
    model.reinit_heads(gen)
    for p in model.head_parameters():
        p.requires_grad_(True)

    counts = torch.from_numpy(dataset.spec.counts.copy()).to(torch.float32)

    def fn(expert_logits, yb):
        bsce = loss_bsce_batch(expert_logits, yb, counts.to(expert_logits.dtype))
        nan = expert_logits.new_tensor(float("nan"))
        return {"L_ce": nan, "L_nt": nan, "L_mu": nan}, bsce

    state2 = TrainState(
        model=model,
        optimizer=_make_optimizer(model.head_parameters(), config),
        epoch=0,
        stage=STAGE_CLASSIFIER,
        history=list(state.history),
        config=config,
    )
    return _run_epochs(state2, dataset, config.epochs_stage2, fn, log_path=log_path)


def resume_stage2(state: TrainState, dataset: LabeledDataset, log_path=None) -> TrainState:
    if state.stage != STAGE_CLASSIFIER:
        raise TrainingError(f"cannot resume stage 2 from a {state.stage!r} checkpoint")
    counts = torch.from_numpy(dataset.spec.counts.copy()).to(torch.float32)

    def fn(expert_logits, yb):
        bsce = loss_bsce_batch(expert_logits, yb, counts.to(expert_logits.dtype))
        nan = expert_logits.new_tensor(float("nan"))
        return {"L_ce": nan, "L_nt": nan, "L_mu": nan}, bsce

    return _run_epochs(state, dataset, state.config.epochs_stage2, fn, log_path=log_path)


def run_both_stages(model, dataset, config, log_path=None, augment=None) -> TrainState:
    state = train_stage1(model, dataset, config, log_path=log_path, augment=augment)
    return train_stage2(state, dataset, log_path=log_path)


# ---------------------------------------------------------------------------
# Checkpoints: a single .npz archive with a JSON header plus named parameter
# and momentum-buffer arrays.
# ---------------------------------------------------------------------------


def checkpoint_save(state: TrainState, path) -> None:
    model = state.model
    header = {
        "version": CHECKPOINT_VERSION,
        "architecture": model.architecture_header(),
        "stage": state.stage,
        "epoch": state.epoch,
        "config": state.config.to_json(),
        "history": state.history,
    }
    arrays = {"header": np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)}
    for name, p in model.state_dict().items():
        arrays["param/" + name] = p.detach().cpu().numpy()
    momentum = {}
    name_by_param = {id(p): n for n, p in model.named_parameters()}
    for p, st in state.optimizer.state.items():
        buf = st.get("momentum_buffer")
        if buf is not None:
            momentum["momentum/" + name_by_param[id(p)]] = buf.detach().cpu().numpy()
    arrays.update(momentum)
    np.savez(path, **arrays)


def checkpoint_load(path, expect_num_classes: int | None = None) -> TrainState:
    try:
        archive = np.load(path)
        header = json.loads(bytes(archive["header"]).decode())
    except Exception as exc:
        raise CheckpointError(f"{path}: not a readable checkpoint ({exc})") from exc
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint version {header.get('version')} != {CHECKPOINT_VERSION}"
        )
    arch = header["architecture"]
    if expect_num_classes is not None and arch["num_classes"] != expect_num_classes:
        raise CheckpointError(
            f"{path}: checkpoint has {arch['num_classes']} classes, expected {expect_num_classes}"
        )
    config = TrainConfig.from_json(header["config"])
    model = model_from_header(arch)
    sd = {n[len("param/"):]: torch.from_numpy(archive[n])
          for n in archive.files if n.startswith("param/")}
    model.load_state_dict(sd)

    stage = header["stage"]
    if stage == STAGE_CLASSIFIER:
        for p in model.extractor_parameters():
            p.requires_grad_(False)
        optimizer = _make_optimizer(model.head_parameters(), config)
    else:
        optimizer = _make_optimizer(model.parameters(), config)
    buffers = {n[len("momentum/"):]: torch.from_numpy(archive[n])
               for n in archive.files if n.startswith("momentum/")}
    if buffers:
        params = dict(model.named_parameters())
        for name, buf in buffers.items():
            optimizer.state[params[name]] = {"momentum_buffer": buf.clone()}
    return TrainState(
        model=model,
        optimizer=optimizer,
        epoch=header["epoch"],
        stage=stage,
        history=header["history"],
        config=config,
    )


def build_model(cfg: BackboneConfig, num_experts: int, taps=None,
                use_fusion: bool = True, seed: int = 0) -> MoEModel:
    """Seeded model construction so whole runs are reproducible."""
    torch.manual_seed(seed)
    return MoEModel(cfg, num_experts=num_experts, taps=taps, use_fusion=use_fusion)
