"""Clip-level predictor: dense proposal sampling, clip generator and LateConv scoring.

Proposal feature maps are kept channels-first, ``B x d x T x T``, with cell
``(i, j)`` the clip from moment ``i`` to moment ``j``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from gmu.moment_level import upper_mask

KERNEL = 5


def build_sampling_weights(T: int, N: int) -> np.ndarray:
    """Interpolation weights ``W[n, i, j, t]`` gathering ``N`` samples per proposal.

    Samples sit uniformly on ``[i, j]`` in moment-index coordinates (the
    midpoint when ``N == 1``); each spreads linear-interpolation weight over
    its two neighbouring moments.
    """
    if T < 2 or N < 1:
        raise ValueError(f"need T >= 2 and N >= 1, got T={T}, N={N}")
    W = np.zeros((N, T, T, T), dtype=np.float64)
    k = np.arange(N)
    for i in range(T):
        for j in range(i, T):
            pos = np.full(N, (i + j) / 2.0) if N == 1 else i + k * (j - i) / (N - 1)
            lo = np.floor(pos).astype(int)
            frac = pos - lo
            hi = np.minimum(lo + 1, T - 1)
            W[k, i, j, lo] += 1.0 - frac
            W[k, i, j, hi] += frac
    return W


def dpgm(W: Tensor, v_f: Tensor) -> Tensor:
    """Max over samples of the weighted gathers; ``v_f`` is ``B x T x d``.

    Returns ``M_v`` as ``B x d x T x T`` with invalid cells zero.
    """
    if v_f.dim() == 2:
        return dpgm(W, v_f.unsqueeze(0))[0]
    T = v_f.shape[-2]
    if W.shape[1:] != (T, T, T):
        raise ValueError(f"sampling weights {tuple(W.shape)} do not fit T={T}")
    sampled = torch.einsum("nijt,btc->bncij", W.to(v_f.dtype), v_f)
    m_v = sampled.amax(dim=1)
    return m_v * upper_mask(T, v_f.device).to(v_f.dtype)


class ConvStack(nn.Module):
    """``n_layers`` of kernel-5 convolutions + ReLU that preserve the map size.

    The first layer pads by ``2 * n_layers`` and the rest are unpadded, so
    the net change in spatial extent is zero.
    """

    def __init__(self, d: int, n_layers: int, kernel: int = KERNEL):
        super().__init__()
        self.pad = n_layers * (kernel - 1) // 2
        self.convs = nn.ModuleList(
            nn.Conv2d(d, d, kernel, stride=1, padding=self.pad if n == 0 else 0, dilation=1)
            for n in range(n_layers)
        )
        for conv in self.convs:
            # variance-preserving init; the default shrinks the signal ~8 layers deep
            nn.init.kaiming_normal_(conv.weight, nonlinearity="relu")
            nn.init.zeros_(conv.bias)

    def forward(self, x: Tensor) -> Tensor:
        # NHWC activations run the CPU convolution kernels markedly faster
        x = x.contiguous(memory_format=torch.channels_last)
        if not self.convs or x.shape[-1] != x.shape[-2]:
            return self.forward_dense(x)
        # Outside a central core the padded map is constant per channel, and
        # so is every activation whose window misses that core.  Only the core
        # plus a one-window ring is convolved; the constant is carried along.
        reach = self.convs[0].kernel_size[0] - 1
        size, offset = x.shape[-1] + 2 * self.pad, self.pad
        const = x.new_zeros(x.shape[1])
        for conv in self.convs:
            out_size = size - reach
            lo, hi = max(offset - reach, 0), min(offset + x.shape[-1], out_size)
            x = F.relu(F.conv2d(
                _ring_pad(x, offset - lo, hi + reach - offset - x.shape[-1], const),
                conv.weight, conv.bias,
            ))
            const = F.relu(conv.weight.sum(dim=(2, 3)) @ const + conv.bias)
            size, offset = out_size, lo
        return x

    def forward_dense(self, x: Tensor) -> Tensor:
        for conv in self.convs:
            x = F.relu(conv(x))
        return x


def _ring_pad(core: Tensor, before: int, after: int, const: Tensor) -> Tensor:
    """Surround ``core`` with a ring whose channels hold ``const``."""
    if before == after == 0:
        return core
    widths = (before, after, before, after)
    ring = 1.0 - F.pad(core.new_ones(1, 1, *core.shape[-2:]), widths)
    return F.pad(core, widths) + ring * const.view(1, -1, 1, 1)


class LateConv(nn.Module):
    def __init__(self, d: int, n_layers: int = 9, kernel: int = KERNEL):
        super().__init__()
        if n_layers < 1:
            raise ValueError("LateConv needs at least the final 1x1 layer")
        self.body = ConvStack(d, n_layers - 1, kernel)
        self.head = nn.Conv2d(d, 1, kernel_size=1, stride=1, padding=0)

    def forward(self, x: Tensor) -> Tensor:
        return self.head(self.body(x)).squeeze(1)


def clip_generator(m_v: Tensor, s: Tensor, early: ConvStack) -> Tensor:
    """``f_c`` = per-channel max over valid cells of ``EarlyConv(M_v) * s``."""
    squeeze = m_v.dim() == 3
    if squeeze:
        m_v, s = m_v.unsqueeze(0), s.unsqueeze(0)
    T = m_v.shape[-1]
    m_f = early(m_v) * s[:, :, None, None]
    m_f = m_f.masked_fill(~upper_mask(T, m_v.device), float("-inf"))
    f_c = m_f.amax(dim=(-2, -1))
    return f_c[0] if squeeze else f_c


def clip_scores(m_v: Tensor, f_c: Tensor, late: LateConv) -> Tensor:
    """``S_c = sigmoid(LateConv(M_v * f_c))`` with invalid cells zero."""
    squeeze = m_v.dim() == 3
    if squeeze:
        m_v, f_c = m_v.unsqueeze(0), f_c.unsqueeze(0)
    T = m_v.shape[-1]
    s_c = torch.sigmoid(late(m_v * f_c[:, :, None, None]))
    s_c = s_c * upper_mask(T, m_v.device).to(s_c.dtype)
    return s_c[0] if squeeze else s_c


@dataclass
class ClipOutputs:
    S_c: Tensor
    f_c: Tensor
    m_v: Tensor


class ClipPredictor(nn.Module):
    """With ``generation_guided=False`` the sentence feature is the proposal query."""

    def __init__(self, d: int, T: int, N: int = 4, kappa_e: int = 8, kappa_l: int = 9,
                 generation_guided: bool = True):
        super().__init__()
        self.generation_guided = generation_guided
        self.register_buffer("W", torch.from_numpy(build_sampling_weights(T, N)), persistent=False)
        self.early = ConvStack(d, kappa_e) if generation_guided else None
        self.late = LateConv(d, kappa_l)

    def forward(self, v_f: Tensor, s: Tensor) -> ClipOutputs:
        m_v = dpgm(self.W, v_f)
        f_c = clip_generator(m_v, s, self.early) if self.generation_guided else s
        return ClipOutputs(clip_scores(m_v, f_c, self.late), f_c, m_v)
