"""Sentence encoder (BiLSTM) and visual base module."""
from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import Tensor, nn
from torch.nn.utils.rnn import pack_padded_sequence


def uniform_fan_in_(tensor: Tensor, fan_in: int) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    with torch.no_grad():
        return tensor.uniform_(-bound, bound)


class SemanticEncoder(nn.Module):
    """Token embeddings -> BiLSTM -> concatenated final states -> linear to ``d``."""

    def __init__(self, vocab_size: int, d: int, d_e: int | None = None):
        super().__init__()
        d_e = d if d_e is None else d_e
        self.vocab_size = vocab_size
        self.embedding = nn.Embedding(vocab_size, d_e)
        self.lstm = nn.LSTM(d_e, d_e, batch_first=True, bidirectional=True)
        self.proj = nn.Linear(2 * d_e, d)
        self.reset_parameters()

    def reset_parameters(self):
        d_e = self.embedding.embedding_dim
        uniform_fan_in_(self.embedding.weight, d_e)
        for name, p in self.lstm.named_parameters():
            if name.startswith("weight_hh"):
                for gate in p.data.chunk(4, dim=0):
                    nn.init.orthogonal_(gate)
            elif name.startswith("weight_ih"):
                uniform_fan_in_(p, d_e)
            else:
                nn.init.zeros_(p)
        uniform_fan_in_(self.proj.weight, 2 * d_e)
        uniform_fan_in_(self.proj.bias, 2 * d_e)

    def final_states(self, tokens: Tensor, lengths: Tensor | None = None) -> Tensor:
        if tokens.dim() == 1:
            tokens = tokens.unsqueeze(0)
        if tokens.numel() == 0 or tokens.shape[1] == 0:
            raise ValueError("empty token sequence")
        if int(tokens.min()) < 0 or int(tokens.max()) >= self.vocab_size:
            raise ValueError(f"token id outside vocabulary of size {self.vocab_size}")
        if lengths is None:
            lengths = torch.full((tokens.shape[0],), tokens.shape[1], dtype=torch.long)
        emb = self.embedding(tokens)
        packed = pack_padded_sequence(emb, lengths.cpu(), batch_first=True, enforce_sorted=False)
        _, (h, _) = self.lstm(packed)
        return torch.cat([h[0], h[1]], dim=-1)

    def forward(self, tokens: Tensor, lengths: Tensor | None = None) -> Tensor:
        """``tokens`` is ``B x L`` (or ``L``); returns ``B x d``."""
        return self.proj(self.final_states(tokens, lengths))


def encode_query(tokens: Tensor, encoder: SemanticEncoder, lengths: Tensor | None = None) -> Tensor:
    single = tokens.dim() == 1
    s = encoder(tokens, lengths)
    return s[0] if single else s


class VisualBase(nn.Module):
    """``V_f = ReLU(V_o W_base + W_pos)``."""

    def __init__(self, d_i: int, d: int, T: int):
        super().__init__()
        self.base = nn.Linear(d_i, d, bias=False)
        self.pos = nn.Parameter(torch.empty(T, d))
        uniform_fan_in_(self.base.weight, d_i)
        uniform_fan_in_(self.pos, d)

    def forward(self, v_o: Tensor) -> Tensor:
        if v_o.shape[-1] != self.base.in_features or v_o.shape[-2] != self.pos.shape[0]:
            raise ValueError(
                f"visual input of shape {tuple(v_o.shape)} does not match "
                f"T={self.pos.shape[0]}, d_i={self.base.in_features}"
            )
        return F.relu(self.base(v_o) + self.pos)


def encode_visual(v_o: Tensor, encoder: VisualBase) -> Tensor:
    return encoder(v_o)
