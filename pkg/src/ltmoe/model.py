"""Multi-expert model with depth-wise feature fusion.

A staged shared backbone exposes every intermediate feature. Each expert
owns an exclusive final stage and a linear head; an alignment path of
downsampling blocks brings its assigned intermediate feature to the
exclusive feature's shape, and the two are fused by Hadamard product
before pooling and the head. Ensemble inference sums logits over experts.

Two backbone families share the same contract: a staged MLP for vector
inputs and a staged CNN (CIFAR-style: stage 1 keeps resolution, later
stages halve it and double channels) for image inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .losses import first_argmax


class ModelConfigError(ValueError):
    """Inconsistent architecture configuration."""


class ShapeError(ValueError):
    """Input does not match the configured shape."""


@dataclass(frozen=True)
class BackboneConfig:
    """Architecture of the shared backbone plus the expert stage width.

    ``kind`` is "mlp" (input_shape = (dims,), widths are layer sizes) or
    "cnn" (input_shape = (channels, H, W), widths are channel counts).
    ``stage_widths`` has one entry per shared stage; ``expert_width`` is
    the exclusive stage's output width.
    """

    kind: str
    input_shape: tuple
    stage_widths: tuple
    expert_width: int
    num_classes: int

    def __post_init__(self):
        if self.kind not in ("mlp", "cnn"):
            raise ModelConfigError(f"unknown backbone kind {self.kind!r}")
        if len(self.stage_widths) < 1:
            raise ModelConfigError("need at least one shared stage")
        if self.kind == "mlp" and len(self.input_shape) != 1:
            raise ModelConfigError("mlp backbone expects a 1-D input shape")
        if self.kind == "cnn" and len(self.input_shape) != 3:
            raise ModelConfigError("cnn backbone expects a (C, H, W) input shape")
        if self.num_classes < 2:
            raise ModelConfigError("need at least 2 classes")
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        object.__setattr__(self, "stage_widths", tuple(self.stage_widths))

    @property
    def num_stages(self) -> int:
        return len(self.stage_widths)


def assign_depths(num_experts: int, num_stages: int) -> tuple:
    """Tap depth (1-based shared-stage index) per expert.

    Up to one expert per stage, depths are distinct and spread from
    shallow to deep (a single expert takes the deepest stage). With one
    expert more than stages, two experts share the shallowest tap.
    Beyond that, depths cycle from the shallowest again.
    """
    if num_experts < 1 or num_stages < 1:
        raise ModelConfigError("num_experts and num_stages must be >= 1")
    s = num_stages
    if num_experts == 1:
        return (s,)
    if num_experts <= s:
        return tuple(
            int(round(1 + (s - 1) * i / (num_experts - 1))) for i in range(num_experts)
        )
    if num_experts == s + 1:
        return (1,) + tuple(range(1, s + 1))
    return tuple((i % s) + 1 for i in range(num_experts))


def _mlp_block(w_in: int, w_out: int) -> nn.Module:
    return nn.Sequential(nn.Linear(w_in, w_out), nn.ReLU())


class _CnnBlock(nn.Module):
    """3x3 conv (+GroupNorm+ReLU); stride 2 halves the spatial size."""

    def __init__(self, c_in: int, c_out: int, stride: int):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1)
        self.norm = nn.GroupNorm(num_groups=min(4, c_out), num_channels=c_out)
        self.act = nn.ReLU()

    def forward(self, x):
        return self.act(self.norm(self.conv(x)))


def _make_stage(cfg: BackboneConfig, w_in: int, w_out: int, first: bool) -> nn.Module:
    if cfg.kind == "mlp":
        return _mlp_block(w_in, w_out)
    return _CnnBlock(w_in, w_out, stride=1 if first else 2)


class AlignmentPath(nn.Module):
    """Chain of downsampling blocks from a tap depth to the expert feature shape.

    A tap at shared stage ``s`` passes through ``num_stages + 1 - s``
    blocks whose widths interpolate geometrically from the tap's width to
    the expert width (for channel-doubling CNN ladders this reproduces
    the doubling sequence exactly). The path never narrows below both
    endpoints, so a wide shallow feature is not squeezed through an
    intermediate bottleneck on its way to the expert.
    """

    def __init__(self, cfg: BackboneConfig, tap: int):
        super().__init__()
        if not (1 <= tap <= cfg.num_stages):
            raise ModelConfigError(f"tap depth {tap} outside 1..{cfg.num_stages}")
        n_blocks = cfg.num_stages + 1 - tap
        w0, w1 = cfg.stage_widths[tap - 1], cfg.expert_width
        ladder = [
            int(round(w0 * (w1 / w0) ** (k / n_blocks))) for k in range(n_blocks)
        ] + [w1]
        blocks = []
        for w_in, w_out in zip(ladder[:-1], ladder[1:]):
            if cfg.kind == "mlp":
                blocks.append(_mlp_block(w_in, w_out))
            else:
                blocks.append(_CnnBlock(w_in, w_out, stride=2))
        self.blocks = nn.ModuleList(blocks)
        self.tap = tap
        self._init_near_identity()

    def _init_near_identity(self):
        """Start the path's output near 1 so fusion begins as a passthrough.

        The Hadamard product of two default-initialized ReLU features is
        sparse and tiny, which stalls the fused experts early in training;
        shrinking the last affine transform and biasing it to 1 lets the
        path learn to modulate instead of having to recover from near-zero.
        """
        last = self.blocks[-1]
        with torch.no_grad():
            if isinstance(last, _CnnBlock):
                last.norm.weight.mul_(0.1)
                last.norm.bias.fill_(1.0)
            else:
                last[0].weight.mul_(0.1)
                last[0].bias.fill_(1.0)

    def forward(self, f_tap):
        out = f_tap
        for block in self.blocks:
            out = block(out)
        return out


class Expert(nn.Module):
    """Exclusive stage plus linear head for one expert."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        if cfg.kind == "mlp":
            self.exclusive = _mlp_block(cfg.stage_widths[-1], cfg.expert_width)
        else:
            self.exclusive = _CnnBlock(cfg.stage_widths[-1], cfg.expert_width, stride=2)
        self.head = nn.Linear(cfg.expert_width, cfg.num_classes)


@dataclass
class MoEOutput:
    """One forward pass: per-expert fused features and logits, plus their sum."""

    features: list                # per-stage backbone features f_1..f_S
    fused: list                   # per-expert fused feature maps
    expert_logits: torch.Tensor   # shape (M, B, C)

    @property
    def ensemble_logits(self) -> torch.Tensor:
        return self.expert_logits.sum(dim=0)


class MoEModel(nn.Module):
    """Shared staged backbone with M experts and optional depth-wise fusion."""

    def __init__(self, cfg: BackboneConfig, num_experts: int,
                 taps: tuple | None = None, use_fusion: bool = True):
        super().__init__()
        if num_experts < 1:
            raise ModelConfigError("need at least one expert")
        if taps is None:
            taps = assign_depths(num_experts, cfg.num_stages)
        taps = tuple(int(t) for t in taps)
        if len(taps) != num_experts:
            raise ModelConfigError(
                f"{len(taps)} tap depths given for {num_experts} experts"
            )
        self.cfg = cfg
        self.num_experts = num_experts
        self.taps = taps
        self.use_fusion = use_fusion

        widths = (cfg.input_shape[0],) + cfg.stage_widths
        self.stages = nn.ModuleList(
            _make_stage(cfg, widths[i], widths[i + 1], first=(i == 0))
            for i in range(cfg.num_stages)
        )
        self.experts = nn.ModuleList(Expert(cfg) for _ in range(num_experts))
        if use_fusion:
            self.alignments = nn.ModuleList(AlignmentPath(cfg, t) for t in taps)
        else:
            self.alignments = nn.ModuleList()

    # -- forward pieces ----------------------------------------------------

    def backbone_forward(self, x: torch.Tensor) -> list:
        """All shared-stage features f_1..f_S for a batch."""
        expected = self.cfg.input_shape
        if tuple(x.shape[1:]) != expected:
            raise ShapeError(f"input shape {tuple(x.shape[1:])} != configured {expected}")
        features = []
        out = x
        for stage in self.stages:
            out = stage(out)
            features.append(out)
        return features

    def _pool(self, feat: torch.Tensor) -> torch.Tensor:
        if self.cfg.kind == "cnn":
            return feat.mean(dim=(-2, -1))
        return feat

    def expert_forward(self, f_last: torch.Tensor, aligned: torch.Tensor | None,
                       expert_index: int):
        """Fused feature and logits for one expert.

        ``aligned`` is the expert's aligned intermediate feature; pass
        None when fusion is disabled. Fusion is the elementwise product,
        applied before pooling.
        """
        expert = self.experts[expert_index]
        exclusive = expert.exclusive(f_last)
        if aligned is not None:
            if aligned.shape != exclusive.shape:
                raise ShapeError(
                    f"aligned feature {tuple(aligned.shape)} does not match "
                    f"exclusive feature {tuple(exclusive.shape)}"
                )
            fused = aligned * exclusive
        else:
            fused = exclusive
        logits = expert.head(self._pool(fused))
        return fused, logits

    def forward(self, x: torch.Tensor) -> MoEOutput:
        features = self.backbone_forward(x)
        f_last = features[-1]
        fused_all, logits_all = [], []
        for m in range(self.num_experts):
            aligned = None
            if self.use_fusion:
                aligned = self.alignments[m](features[self.taps[m] - 1])
            fused, logits = self.expert_forward(f_last, aligned, m)
            fused_all.append(fused)
            logits_all.append(logits)
        return MoEOutput(
            features=features,
            fused=fused_all,
            expert_logits=torch.stack(logits_all),
        )

    # -- parameter groups ---------------------------------------------------

    def head_parameters(self):
        for expert in self.experts:
            yield from expert.head.parameters()

    def extractor_parameters(self):
        """Everything except the heads: backbone, alignments, exclusive stages."""
        head_ids = {id(p) for p in self.head_parameters()}
        for p in self.parameters():
            if id(p) not in head_ids:
                yield p

    def reinit_heads(self, generator: torch.Generator | None = None):
        """Fresh default initialization of every expert head."""
        for expert in self.experts:
            head = expert.head
            bound = 1.0 / head.in_features**0.5
            with torch.no_grad():
                head.weight.uniform_(-bound, bound, generator=generator)
                head.bias.uniform_(-bound, bound, generator=generator)

    def architecture_header(self) -> dict:
        return {
            "kind": self.cfg.kind,
            "input_shape": list(self.cfg.input_shape),
            "stage_widths": list(self.cfg.stage_widths),
            "expert_width": self.cfg.expert_width,
            "num_classes": self.cfg.num_classes,
            "num_experts": self.num_experts,
            "taps": list(self.taps),
            "use_fusion": self.use_fusion,
        }


def model_from_header(header: dict) -> MoEModel:
    cfg = BackboneConfig(
        kind=header["kind"],
        input_shape=tuple(header["input_shape"]),
        stage_widths=tuple(header["stage_widths"]),
        expert_width=header["expert_width"],
        num_classes=header["num_classes"],
    )
    return MoEModel(
        cfg,
        num_experts=header["num_experts"],
        taps=tuple(header["taps"]),
        use_fusion=header["use_fusion"],
    )


def ensemble_predict(output: MoEOutput) -> torch.Tensor:
    """Predicted class per sample: argmax of summed logits, ties to lowest index."""
    return first_argmax(output.ensemble_logits, dim=-1)


def parse_arrangement(text: str, num_stages: int) -> tuple:
    """Tap depths from a letter string, 'A' = shallowest stage."""
    letters = [ch for ch in text.upper() if not ch.isspace()]
    taps = []
    for ch in letters:
        depth = ord(ch) - ord("A") + 1
        if not (1 <= depth <= num_stages):
            raise ModelConfigError(
                f"arrangement letter {ch!r} outside stages 1..{num_stages}"
            )
        taps.append(depth)
    if not taps:
        raise ModelConfigError("empty depth arrangement")
    return tuple(taps)
