"""Moment-level predictor.

Semantic fusion, local (residual 1x1 conv) and global (non-local) attention,
the attentive-pooling generator, cosine-style boundary scoring and the
biaffine start/end combination.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from gmu.encoders import uniform_fan_in_

NORM_EPS = 1e-8


def fuse_semantic(v_f: Tensor, s: Tensor) -> Tensor:
    """Row-wise Hadamard product: ``V_f`` is ``[B x] T x d``, ``s`` is ``[B x] d``."""
    if v_f.shape[-1] != s.shape[-1]:
        raise ValueError(f"feature width {v_f.shape[-1]} != semantic width {s.shape[-1]}")
    return v_f * s.unsqueeze(-2)


class ScaleShiftNorm(nn.Module):
    """Per-feature standardisation with learned scale/shift.

    Uses batch statistics in training mode when the batch holds more than
    one sample, running statistics otherwise.
    """

    def __init__(self, d: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(d))
        self.bias = nn.Parameter(torch.zeros(d))
        self.register_buffer("running_mean", torch.zeros(d))
        self.register_buffer("running_var", torch.ones(d))
        self.momentum = momentum
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:  # B x d x T
        use_batch = self.training and x.shape[0] > 1
        return F.batch_norm(
            x, self.running_mean, self.running_var, self.weight, self.bias,
            training=use_batch, momentum=self.momentum, eps=self.eps,
        )


class BasicBlock(nn.Module):
    def __init__(self, d: int):
        super().__init__()
        self.conv = nn.Conv1d(d, d, kernel_size=1, stride=1, padding=0)
        self.norm = ScaleShiftNorm(d)

    def forward(self, x: Tensor) -> Tensor:  # B x d x T
        return F.relu(self.norm(self.conv(x)))


class LocalAttention(nn.Module):
    def __init__(self, d: int, n_l: int = 3):
        super().__init__()
        self.blocks = nn.ModuleList(BasicBlock(d) for _ in range(n_l))

    def forward(self, f: Tensor) -> Tensor:
        x = f.transpose(-1, -2)
        for block in self.blocks:
            x = F.relu(x + block(x))
        return x.transpose(-1, -2)


def local_attention(f_sa: Tensor, module: LocalAttention) -> Tensor:
    squeeze = f_sa.dim() == 2
    out = module(f_sa.unsqueeze(0) if squeeze else f_sa)
    return out[0] if squeeze else out


class NLBlock(nn.Module):
    def __init__(self, d: int):
        super().__init__()
        self.query = nn.Linear(d, d, bias=False)
        self.key = nn.Linear(d, d, bias=False)
        self.value = nn.Linear(d, d, bias=False)
        for lin in (self.query, self.key, self.value):
            uniform_fan_in_(lin.weight, d)

    def forward(self, f: Tensor) -> Tensor:  # [B x] T x d
        d = f.shape[-1]
        attn = torch.softmax(self.query(f) @ self.key(f).transpose(-1, -2) / math.sqrt(d), dim=-1)
        return f + attn @ self.value(f)


class GlobalAttention(nn.Module):
    def __init__(self, d: int, n_g: int = 2):
        super().__init__()
        self.blocks = nn.ModuleList(NLBlock(d) for _ in range(n_g))

    def forward(self, f: Tensor) -> Tensor:
        for block in self.blocks:
            f = block(f)
        return f


def global_attention(f_l: Tensor, module: GlobalAttention) -> Tensor:
    return module(f_l)


@dataclass
class GeneratorOutputs:
    f_start: Tensor
    f_end: Tensor
    w_a: Tensor
    s_mask: Tensor
    f_a: Tensor


class MomentGenerator(nn.Module):
    def __init__(self, d: int):
        super().__init__()
        self.ap = nn.Linear(d, 1)
        self.start = nn.Linear(d, d)
        self.end = nn.Linear(d, d)
        self.mask = nn.Linear(d, d)

    def forward(self, f_o: Tensor) -> GeneratorOutputs:
        w_a = torch.softmax(self.ap(f_o).squeeze(-1), dim=-1)
        f_a = (w_a.unsqueeze(-1) * f_o).sum(dim=-2)
        return GeneratorOutputs(self.start(f_a), self.end(f_a), w_a, self.mask(f_a), f_a)


def generate(f_o: Tensor, module: MomentGenerator) -> GeneratorOutputs:
    return module(f_o)


class BoundaryScorer(nn.Module):
    """Per-moment ``sigmoid(W_a(u W_b))`` with ``u`` the product of unit-normalised rows."""

    def __init__(self, d: int, h: int | None = None):
        super().__init__()
        h = d if h is None else h
        self.w_b = nn.Linear(d, h, bias=False)
        self.w_a = nn.Linear(h, 1)

    def forward(self, v_f: Tensor, f: Tensor) -> Tensor:
        f_norm = f.norm(dim=-1, keepdim=True)
        if bool((f_norm == 0).any()):
            raise ValueError("boundary query feature has zero norm")
        a = v_f / v_f.norm(dim=-1, keepdim=True).clamp_min(NORM_EPS)
        u = a * (f / f_norm).unsqueeze(-2)
        return torch.sigmoid(self.w_a(self.w_b(u)).squeeze(-1))


def boundary_scores(v_f: Tensor, f: Tensor, module: BoundaryScorer) -> Tensor:
    return module(v_f, f)


def upper_mask(T: int, device=None) -> Tensor:
    return torch.ones(T, T, dtype=torch.bool, device=device).triu()


def biaffine_map(s_start: Tensor, s_end: Tensor) -> Tensor:
    """``S_m[i, j] = sqrt(s_start[i] * s_end[j])`` for ``j >= i``, else 0."""
    prod = s_start.unsqueeze(-1) * s_end.unsqueeze(-2)
    keep = upper_mask(s_start.shape[-1], s_start.device) & (prod > 0)
    # double where keeps the sqrt gradient finite where a factor is exactly zero
    safe = torch.where(keep, prod, torch.ones_like(prod))
    return torch.where(keep, safe.sqrt(), torch.zeros_like(prod))


class MaskHead(nn.Module):
    def __init__(self, d: int, vocab_size: int):
        super().__init__()
        self.proj = nn.Linear(d, vocab_size)

    def forward(self, s_mask: Tensor) -> Tensor:
        return self.proj(s_mask)


def mask_logits(s_mask: Tensor, module: MaskHead) -> Tensor:
    return module(s_mask)


@dataclass
class MomentOutputs:
    s_start: Tensor
    s_end: Tensor
    S_m: Tensor
    w_a: Tensor
    mask_logits: Tensor


class MomentPredictor(nn.Module):
    """Full moment-level path from ``(V_f, s)`` to the moment score map.

    With ``generation_guided=False`` the generated start/end queries are
    replaced by direct per-moment score heads on ``f_o``.
    """

    def __init__(self, d: int, vocab_size: int, n_l: int = 3, n_g: int = 2,
                 generation_guided: bool = True):
        super().__init__()
        self.generation_guided = generation_guided
        self.local = LocalAttention(d, n_l)
        self.globl = GlobalAttention(d, n_g)
        self.generator = MomentGenerator(d)
        self.scorer = BoundaryScorer(d)
        self.mask_head = MaskHead(d, vocab_size)
        if not generation_guided:
            self.start_head = nn.Linear(d, 1)
            self.end_head = nn.Linear(d, 1)

    def forward(self, v_f: Tensor, s: Tensor) -> MomentOutputs:
        f_o = self.globl(self.local(fuse_semantic(v_f, s)))
        gen = self.generator(f_o)
        if self.generation_guided:
            s_start = self.scorer(v_f, gen.f_start)
            s_end = self.scorer(v_f, gen.f_end)
        else:
            s_start = torch.sigmoid(self.start_head(f_o).squeeze(-1))
            s_end = torch.sigmoid(self.end_head(f_o).squeeze(-1))
        return MomentOutputs(s_start, s_end, biaffine_map(s_start, s_end), gen.w_a,
                             self.mask_head(gen.s_mask))
