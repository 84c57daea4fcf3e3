"""Training objectives: boundary, masked-token, attention-guidance and proposal losses."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import torch
from torch import Tensor

from gmu.errors import DegenerateBatchError

CLAMP = 1e-7
THETA = 0.5
LATE_BCE_WEIGHT = 0.001
LOG_COLUMNS = ("epoch", "step", "l_bl", "l_ce", "l_tag", "l_bce", "bce_weight", "total")


def _log(p: Tensor) -> Tensor:
    return torch.log(p.clamp(CLAMP, 1 - CLAMP))


def weighted_logistic(s: Tensor, l: Tensor, theta: float = THETA) -> Tensor:
    """Class-balanced logistic loss over every moment in the batch."""
    s, l = s.reshape(-1), l.reshape(-1)
    b = (l > theta).to(s.dtype)
    n_b = s.numel()
    n_pos = float(b.sum())
    if n_pos == 0 or n_pos == n_b:
        raise DegenerateBatchError(f"{int(n_pos)} of {n_b} boundary labels are positive")
    alpha_pos = n_b / n_pos
    alpha_neg = n_b / (n_b - n_pos)
    return -(alpha_pos * b * _log(s) + alpha_neg * (1 - b) * _log(1 - s)).sum() / n_b


def loss_bl(s_start: Tensor, s_end: Tensor, l_start: Tensor, l_end: Tensor,
            theta: float = THETA) -> Tensor:
    return weighted_logistic(s_start, l_start, theta) + weighted_logistic(s_end, l_end, theta)


def loss_ce(logits: Tensor, targets: Tensor) -> tuple[Tensor, bool]:
    """Mean masked-token cross-entropy.  Targets of -1 mark unmasked samples.

    Returns ``(loss, active)``; ``active`` is False (and the loss 0) when no
    sample in the batch carries a mask.
    """
    if logits.dim() == 1:
        logits, targets = logits.unsqueeze(0), targets.reshape(1)
    keep = targets >= 0
    if not bool(keep.any()):
        return logits.sum() * 0.0, False
    logp = torch.log_softmax(logits[keep], dim=-1)
    return -logp.gather(1, targets[keep].unsqueeze(1)).mean(), True


def loss_tag(w_a: Tensor, w_hat: Tensor) -> Tensor:
    """Sum over the batch of the ground-truth-weighted negative log attention."""
    if w_a.dim() == 1:
        w_a, w_hat = w_a.unsqueeze(0), w_hat.unsqueeze(0)
    denom = w_hat.sum(dim=-1)
    if bool((denom <= 0).any()):
        raise ValueError("attention target without any positive moment")
    w = w_a.clamp_min(CLAMP)
    return -((w_hat * torch.log(w)).sum(dim=-1) / denom).sum()


def loss_bce(s_c: Tensor, y: Tensor, valid: Tensor) -> Tensor:
    """Binary cross-entropy averaged over valid proposal cells only."""
    valid = valid.expand_as(s_c)
    p, t = s_c[valid], y.to(s_c.dtype)[valid]
    return -(t * _log(p) + (1 - t) * _log(1 - p)).mean()


def bce_weight(epoch: int, upsilon: int | None) -> float:
    if upsilon is None or epoch < upsilon:
        return 1.0
    return LATE_BCE_WEIGHT


@dataclass
class LossBreakdown:
    l_bl: Tensor
    l_ce: Tensor
    l_tag: Tensor
    l_bce: Tensor
    bce_weight: float
    total: Tensor

    def row(self) -> dict[str, float]:
        out = {k: float(getattr(self, k).detach()) for k in ("l_bl", "l_ce", "l_tag", "l_bce")}
        return {**out, "bce_weight": self.bce_weight, "total": float(self.total.detach())}


def total_loss(parts: dict[str, Tensor], epoch: int, upsilon: int | None = 9) -> LossBreakdown:
    """Sum the terms; missing terms count as zero.  BCE weight drops after ``upsilon``."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    ref = next(iter(parts.values()))
    zero = ref.new_zeros(())
    terms = {k: parts.get(k, zero) for k in ("l_bl", "l_ce", "l_tag", "l_bce")}
    w = bce_weight(epoch, upsilon)
    total = terms["l_bl"] + terms["l_ce"] + terms["l_tag"] + w * terms["l_bce"]
    return LossBreakdown(bce_weight=w, total=total, **terms)


class TrainingLog:
    """Append-only CSV of per-step loss breakdowns."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "w", newline="") as fh:
            csv.writer(fh).writerow(LOG_COLUMNS)

    def append(self, epoch: int, step: int, parts: LossBreakdown) -> None:
        row = parts.row()
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow(
                [epoch, step] + [repr(row[k]) for k in LOG_COLUMNS[2:]]
            )


def read_log(path) -> list[dict[str, float]]:
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in r.items()} for r in csv.DictReader(fh)]
