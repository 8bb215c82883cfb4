"""Loss functions for the multi-expert model.

Stage 1 combines per-expert cross-entropy, mutual distillation between
experts, and non-target distillation against an elected "grand teacher"
built from the experts' non-target logits: the cross-expert mean at the
consensus hardest-negative position and the cross-expert max everywhere
else. Stage 2 uses balanced softmax cross-entropy with class-count
priors.

All softmax computations go through log_softmax / logsumexp; raw logits
are never exponentiated directly. Teachers (the grand teacher and the
first argument of every mutual-distillation KL term) are gradient-blocked.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F


class LossInputError(ValueError):
    """Malformed logits, labels, or counts passed to a loss."""


@dataclass(frozen=True)
class LossWeights:
    """Trade-off weights for the stage-1 objective and the distillation temperature."""

    alpha: float = 1.0   # weight of the non-target distillation term
    beta: float = 1.0    # weight of the mutual distillation term
    temperature: float = 1.0

    def __post_init__(self):
        for name in ("alpha", "beta", "temperature"):
            v = getattr(self, name)
            if not (v == v and abs(v) != float("inf")):
                raise LossInputError(f"{name} must be finite, got {v}")
        if self.alpha < 0 or self.beta < 0:
            raise LossInputError("alpha and beta must be >= 0")
        if self.temperature <= 0:
            raise LossInputError("temperature must be > 0")


@dataclass(frozen=True)
class DecoupledLogits:
    """Lossless split of a logit vector into target and non-target parts."""

    target_logit: torch.Tensor     # scalar
    nontarget_logits: torch.Tensor  # shape (C-1,)
    index_map: torch.Tensor        # non-target class ids, ascending, shape (C-1,)

    def reconstruct(self) -> torch.Tensor:
        c = self.index_map.numel() + 1
        z = self.nontarget_logits.new_empty(c)
        z[self.index_map] = self.nontarget_logits
        target = (set(range(c)) - set(self.index_map.tolist())).pop()
        z[target] = self.target_logit
        return z


@dataclass(frozen=True)
class GrandTeacher:
    """Elected non-target teacher: mean at the consensus index, max elsewhere."""

    logits: torch.Tensor     # shape (C-1,), detached
    consensus_index: int     # position within the non-target ordering


def _check_finite(t: torch.Tensor, name: str):
    if not torch.isfinite(t).all():
        raise LossInputError(f"{name} contains non-finite values")


def first_argmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Argmax with ties broken to the lowest index, deterministically."""
    m = x.max(dim=dim, keepdim=True).values
    idx = torch.arange(x.shape[dim], device=x.device)
    shape = [1] * x.ndim
    shape[dim] = -1
    candidates = torch.where(x == m, idx.view(shape), x.shape[dim])
    # all-NaN rows match nothing; clamp so callers can index (loss is NaN anyway)
    return candidates.min(dim=dim).values.clamp(max=x.shape[dim] - 1)


def decouple_logits(z: torch.Tensor, y: int) -> DecoupledLogits:
    """Split logits into the target logit and the ordered non-target vector."""
    z = torch.as_tensor(z)
    if z.ndim != 1 or z.numel() < 2:
        raise LossInputError("logits must be a 1-D vector with at least 2 classes")
    c = z.numel()
    if not (0 <= y < c):
        raise LossInputError(f"label {y} out of range for {c} classes")
    index_map = torch.cat([torch.arange(y), torch.arange(y + 1, c)])
    return DecoupledLogits(
        target_logit=z[y],
        nontarget_logits=z[index_map],
        index_map=index_map,
    )


def _stack_experts(nontargets) -> torch.Tensor:
    if isinstance(nontargets, torch.Tensor):
        stacked = nontargets
        if stacked.ndim == 1:
            stacked = stacked.unsqueeze(0)
    else:
        nontargets = list(nontargets)
        if not nontargets:
            raise LossInputError("need at least one expert")
        sizes = {torch.as_tensor(v).numel() for v in nontargets}
        if len(sizes) != 1:
            raise LossInputError("expert logit vectors disagree in length")
        stacked = torch.stack([torch.as_tensor(v) for v in nontargets])
    if stacked.numel() == 0:
        raise LossInputError("need at least one expert")
    return stacked


def consensus_mean(nontargets) -> torch.Tensor:
    """Cross-expert mean of the non-target logits (one vector per expert)."""
    return _stack_experts(nontargets).mean(dim=0)


def elect_grand_teacher(nontargets) -> GrandTeacher:
    """Build the non-target teacher from all experts' non-target logits.

    The consensus hardest negative is the argmax of the cross-expert
    mean; the teacher takes the mean there and the cross-expert max at
    every other position. The result carries no gradient.
    """
    stacked = _stack_experts(nontargets).detach()
    mean = stacked.mean(dim=0)
    consensus = int(first_argmax(mean))
    teacher = stacked.max(dim=0).values
    teacher[consensus] = mean[consensus]
    return GrandTeacher(logits=teacher, consensus_index=consensus)


def nontarget_softmax(z: torch.Tensor, temperature: float = 1.0) -> torch.Tensor:
    """Softmax over the C-1 non-target classes, temperature-scaled."""
    z = torch.as_tensor(z)
    _check_finite(z, "non-target logits")
    if temperature <= 0:
        raise LossInputError("temperature must be > 0")
    return F.softmax(z / temperature, dim=-1)


def _kl(p_log: torch.Tensor, q_log: torch.Tensor) -> torch.Tensor:
    # KL(p || q) from log-probabilities; sum over the class axis.
    return (p_log.exp() * (p_log - q_log)).sum(dim=-1)


def loss_nt(teacher: GrandTeacher, student_nontargets, temperature: float = 1.0) -> torch.Tensor:
    """Sum over experts of KL(teacher non-target dist || student non-target dist)."""
    students = _stack_experts(student_nontargets)
    if students.shape[-1] != teacher.logits.numel():
        raise LossInputError("teacher and student non-target lengths differ")
    t_log = F.log_softmax(teacher.logits.detach() / temperature, dim=-1)
    s_log = F.log_softmax(students / temperature, dim=-1)
    loss = _kl(t_log.unsqueeze(0), s_log).sum()
    if temperature != 1.0:
        loss = loss * temperature**2
    return loss


def loss_mutual(expert_logits, temperature: float = 1.0) -> torch.Tensor:
    """Pairwise mutual distillation over all ordered expert pairs.

    Each KL(p^j || p^k) term blocks gradients through p^j, so every
    expert teaches every other without chasing its students.
    """
    logits = _stack_experts(expert_logits)
    m = logits.shape[0]
    if m == 1:
        return logits.new_zeros(())
    log_p = F.log_softmax(logits / temperature, dim=-1)
    log_p_teacher = log_p.detach()
    total = logits.new_zeros(())
    for j in range(m):
        for k in range(m):
            if k != j:
                total = total + _kl(log_p_teacher[j], log_p[k])
    if temperature != 1.0:
        total = total * temperature**2
    return total


def loss_ce(expert_logits, y: int) -> torch.Tensor:
    """Sum over experts of vanilla cross-entropy against the label."""
    logits = _stack_experts(expert_logits)
    c = logits.shape[-1]
    if not (0 <= y < c):
        raise LossInputError(f"label {y} out of range for {c} classes")
    return -F.log_softmax(logits, dim=-1)[:, y].sum()


def loss_total(ce, nt, mu, weights: LossWeights) -> torch.Tensor:
    """Stage-1 objective: ce + alpha * nt + beta * mu."""
    return ce + weights.alpha * nt + weights.beta * mu


def loss_bsce(expert_logits, y: int, counts) -> torch.Tensor:
    """Balanced softmax cross-entropy: CE on logits shifted by log class counts."""
    logits = _stack_experts(expert_logits)
    counts = torch.as_tensor(counts, dtype=logits.dtype)
    if torch.any(counts <= 0):
        raise LossInputError("all class counts must be positive")
    if counts.numel() != logits.shape[-1]:
        raise LossInputError("counts length must equal the number of classes")
    if not (0 <= y < logits.shape[-1]):
        raise LossInputError(f"label {y} out of range")
    shifted = logits + counts.log()
    return -F.log_softmax(shifted, dim=-1)[:, y].sum()


# ---------------------------------------------------------------------------
# Batched forms used by the training loop: expert_logits has shape (M, B, C),
# labels shape (B,). Each returns the per-sample loss averaged over the batch.
# ---------------------------------------------------------------------------


def _nontarget_batch(expert_logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    m, b, c = expert_logits.shape
    keep = torch.arange(c, device=expert_logits.device).expand(b, c) != labels.unsqueeze(1)
    return expert_logits.masked_select(keep.unsqueeze(0)).view(m, b, c - 1)


def grand_teacher_batch(expert_logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Per-sample grand-teacher non-target logits, shape (B, C-1), detached."""
    nt = _nontarget_batch(expert_logits, labels).detach()
    mean = nt.mean(dim=0)
    consensus = first_argmax(mean, dim=-1)
    teacher = nt.max(dim=0).values
    rows = torch.arange(teacher.shape[0], device=teacher.device)
    teacher[rows, consensus] = mean[rows, consensus]
    return teacher


def loss_nt_batch(expert_logits: torch.Tensor, labels: torch.Tensor, temperature: float = 1.0) -> torch.Tensor:
    nt = _nontarget_batch(expert_logits, labels)
    teacher = grand_teacher_batch(expert_logits, labels)
    t_log = F.log_softmax(teacher / temperature, dim=-1)
    s_log = F.log_softmax(nt / temperature, dim=-1)
    per_sample = _kl(t_log.unsqueeze(0), s_log).sum(dim=0)
    loss = per_sample.mean()
    if temperature != 1.0:
        loss = loss * temperature**2
    return loss


def loss_mutual_batch(expert_logits: torch.Tensor, temperature: float = 1.0) -> torch.Tensor:
    m = expert_logits.shape[0]
    if m == 1:
        return expert_logits.new_zeros(())
    log_p = F.log_softmax(expert_logits / temperature, dim=-1)
    log_p_teacher = log_p.detach()
    total = expert_logits.new_zeros(expert_logits.shape[1])
    for j in range(m):
        for k in range(m):
            if k != j:
                total = total + _kl(log_p_teacher[j], log_p[k])
    loss = total.mean()
    if temperature != 1.0:
        loss = loss * temperature**2
    return loss


def loss_ce_batch(expert_logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    log_p = F.log_softmax(expert_logits, dim=-1)
    picked = log_p.gather(-1, labels.expand(expert_logits.shape[0], -1).unsqueeze(-1))
    return -picked.sum(dim=0).mean()


def loss_bsce_batch(expert_logits: torch.Tensor, labels: torch.Tensor, counts) -> torch.Tensor:
    counts = torch.as_tensor(counts, dtype=expert_logits.dtype, device=expert_logits.device)
    if torch.any(counts <= 0):
        raise LossInputError("all class counts must be positive")
    log_p = F.log_softmax(expert_logits + counts.log(), dim=-1)
    picked = log_p.gather(-1, labels.expand(expert_logits.shape[0], -1).unsqueeze(-1))
    return -picked.sum(dim=0).mean()
