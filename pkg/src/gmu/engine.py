"""Model assembly, training loop and checkpoints."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from torch import Tensor, nn

from gmu.clip_level import ClipPredictor
from gmu.encoders import SemanticEncoder, VisualBase
from gmu.errors import ConfigMismatchError, DataError, DegenerateBatchError, NumericError
from gmu.ingest_io import Batch, GroundingDataset, iter_batches
from gmu.moment_level import MomentPredictor
from gmu.objectives import (
    LossBreakdown,
    TrainingLog,
    loss_bce,
    loss_bl,
    loss_ce,
    loss_tag,
    total_loss,
)

log = logging.getLogger(__name__)

FLAG_NAMES = (
    "share_encoders",
    "generation_guided_moment",
    "generation_guided_clip",
    "enable_mlm",
    "enable_tag",
)
# fields that change the parameter layout or forward semantics
ARCH_FIELDS = (
    "T", "d", "d_i", "vocab_size", "n_l", "n_g", "N", "kappa_e", "kappa_l", "L_max",
) + FLAG_NAMES


@dataclass
class TrainConfig:
    T: int = 64
    d: int = 512
    d_i: int = 0  # 0: take from the dataset
    vocab_size: int = 0  # 0: take from the dataset vocabulary
    n_l: int = 3
    n_g: int = 2
    N: int = 4
    kappa_e: int = 8
    kappa_l: int = 9
    batch_size: int = 32
    lr: float = 1e-4
    lr_decay: float = 0.5
    lr_decay_every: int = 0  # 0: every ceil(epochs / 3) epochs
    clip_lr_scale: float = 1.0  # clip-path convolutions train at lr * clip_lr_scale
    epochs: int = 30
    upsilon: int | None = 9
    o_min: float = 0.5
    o_max: float = 1.0
    theta: float = 0.5
    seed: int = 0
    L_max: int = 30
    mask_prob: float = 1.0
    dtype: str = "float32"
    share_encoders: bool = True
    generation_guided_moment: bool = True
    generation_guided_clip: bool = True
    enable_mlm: bool = True
    enable_tag: bool = True

    def __post_init__(self):
        if self.T < 2 or self.d < 1 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("T >= 2, d >= 1, batch_size >= 1 and epochs >= 0 are required")
        if not (0 <= self.o_min < self.o_max <= 1):
            raise ValueError("need 0 <= o_min < o_max <= 1")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        if self.kappa_l < 1 or self.kappa_e < 0:
            raise ValueError("kappa_l >= 1 and kappa_e >= 0 are required")
        if not self.clip_lr_scale > 0:
            raise ValueError("clip_lr_scale must be positive")

    @property
    def torch_dtype(self):
        return torch.float64 if self.dtype == "float64" else torch.float32

    @property
    def decay_interval(self) -> int:
        return self.lr_decay_every or max(1, math.ceil(self.epochs / 3))

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_decay ** (epoch // self.decay_interval)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def arch_hash(self) -> str:
        payload = json.dumps({k: getattr(self, k) for k in ARCH_FIELDS}, sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


PROFILES = {
    "paper": {},
    # CPU scale.  The deep clip stack diverges at the moment path's rate, the
    # late BCE down-weighting would freeze it before it converges, and one-word
    # synthetic queries lose their only content word when masked.
    "desk": {"T": 16, "d": 32, "batch_size": 8, "lr": 3e-3, "clip_lr_scale": 0.1,
             "upsilon": None, "mask_prob": 0.15, "epochs": 90, "lr_decay_every": 40},
}


def profile_config(name: str = "paper", **overrides) -> TrainConfig:
    if name not in PROFILES:
        raise ValueError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}")
    return TrainConfig(**{**PROFILES[name], **overrides})


# --------------------------------------------------------------------- model


@dataclass
class GMUOutputs:
    s_start: Tensor
    s_end: Tensor
    S_m: Tensor
    w_a: Tensor
    mask_logits: Tensor
    S_c: Tensor
    f_c: Tensor

    @property
    def S_f(self) -> Tensor:
        return self.S_m * self.S_c


class GMU(nn.Module):
    """Both prediction levels over a shared (or duplicated) pair of encoders."""

    def __init__(self, cfg: TrainConfig):
        super().__init__()
        if cfg.d_i < 1 or cfg.vocab_size < 4:
            raise ValueError("d_i and vocab_size must be resolved before building the model")
        self.cfg = cfg
        self.semantic = SemanticEncoder(cfg.vocab_size, cfg.d)
        self.visual = VisualBase(cfg.d_i, cfg.d, cfg.T)
        if cfg.share_encoders:
            self.semantic_clip = None
            self.visual_clip = None
        else:
            self.semantic_clip = SemanticEncoder(cfg.vocab_size, cfg.d)
            self.visual_clip = VisualBase(cfg.d_i, cfg.d, cfg.T)
        self.moment = MomentPredictor(cfg.d, cfg.vocab_size, cfg.n_l, cfg.n_g,
                                      generation_guided=cfg.generation_guided_moment)
        self.clip = ClipPredictor(cfg.d, cfg.T, cfg.N, cfg.kappa_e, cfg.kappa_l,
                                  generation_guided=cfg.generation_guided_clip)

    def flags(self) -> dict[str, bool]:
        return {
            "share_encoders": self.semantic_clip is None,
            "generation_guided_moment": self.moment.generation_guided,
            "generation_guided_clip": self.clip.generation_guided,
            "enable_mlm": self.cfg.enable_mlm,
            "enable_tag": self.cfg.enable_tag,
        }

    def forward(self, tokens: Tensor, lengths: Tensor, v_o: Tensor) -> GMUOutputs:
        s = self.semantic(tokens, lengths)
        v_f = self.visual(v_o)
        if self.semantic_clip is None:
            s_c, v_f_c = s, v_f
        else:
            s_c, v_f_c = self.semantic_clip(tokens, lengths), self.visual_clip(v_o)
        mom = self.moment(v_f, s)
        clip = self.clip(v_f_c, s_c)
        return GMUOutputs(mom.s_start, mom.s_end, mom.S_m, mom.w_a, mom.mask_logits,
                          clip.S_c, clip.f_c)


def apply_ablation_flags(cfg: TrainConfig) -> GMU:
    return GMU(cfg)


def resolve_config(cfg: TrainConfig, dataset: GroundingDataset) -> TrainConfig:
    if cfg.T != dataset.T:
        raise DataError(f"dataset resampled to T={dataset.T}, config expects T={cfg.T}")
    d_i = cfg.d_i or dataset.d_i
    vocab_size = cfg.vocab_size or len(dataset.vocab)
    if d_i != dataset.d_i:
        raise ConfigMismatchError(f"config d_i={cfg.d_i} but features have width {dataset.d_i}")
    if vocab_size != len(dataset.vocab):
        raise ConfigMismatchError(
            f"config vocab_size={cfg.vocab_size} but vocabulary holds {len(dataset.vocab)}"
        )
    return cfg.replace(d_i=d_i, vocab_size=vocab_size)


def build_model(cfg: TrainConfig) -> GMU:
    torch.manual_seed(cfg.seed)
    return GMU(cfg).to(cfg.torch_dtype)


def batch_tensors(batch: Batch, dtype=torch.float32) -> dict[str, Tensor]:
    return {
        "tokens": torch.from_numpy(batch.tokens),
        "lengths": torch.from_numpy(batch.lengths),
        "v_o": torch.from_numpy(batch.features).to(dtype),
        "l_start": torch.from_numpy(batch.l_start).to(dtype),
        "l_end": torch.from_numpy(batch.l_end).to(dtype),
        "y": torch.from_numpy(batch.y).to(dtype),
        "valid": torch.from_numpy(batch.valid),
        "w_hat": torch.from_numpy(batch.w_hat).to(dtype),
        "mask_target": torch.from_numpy(batch.mask_target),
    }


def loss_parts(out: GMUOutputs, t: dict[str, Tensor], cfg: TrainConfig) -> dict[str, Tensor]:
    parts = {
        "l_bl": loss_bl(out.s_start, out.s_end, t["l_start"], t["l_end"], cfg.theta),
        "l_bce": loss_bce(out.S_c, t["y"], t["valid"]),
    }
    if cfg.enable_mlm:
        parts["l_ce"], _ = loss_ce(out.mask_logits, t["mask_target"])
    if cfg.enable_tag:
        parts["l_tag"] = loss_tag(out.w_a, t["w_hat"])
    return parts


def compute_loss(model: GMU, batch: Batch, epoch: int) -> LossBreakdown:
    cfg = model.cfg
    t = batch_tensors(batch, cfg.torch_dtype)
    out = model(t["tokens"], t["lengths"], t["v_o"])
    return total_loss(loss_parts(out, t, cfg), epoch, cfg.upsilon)


# ---------------------------------------------------------------- training


@dataclass
class TrainState:
    model: GMU
    optimizer: torch.optim.Optimizer
    epoch: int = 0
    history: list[dict] = field(default_factory=list)

    @property
    def cfg(self) -> TrainConfig:
        return self.model.cfg


def make_optimizer(model: GMU) -> torch.optim.Adam:
    cfg = model.cfg
    clip = [p for n, p in model.named_parameters() if n.startswith("clip.")]
    rest = [p for n, p in model.named_parameters() if not n.startswith("clip.")]
    return torch.optim.Adam([
        {"params": rest, "lr": cfg.lr, "lr_scale": 1.0},
        {"params": clip, "lr": cfg.lr * cfg.clip_lr_scale, "lr_scale": cfg.clip_lr_scale},
    ])


def init_state(cfg: TrainConfig, dataset: GroundingDataset) -> TrainState:
    cfg = resolve_config(cfg, dataset)
    model = build_model(cfg)
    return TrainState(model, make_optimizer(model))


def train_epoch(state: TrainState, dataset: GroundingDataset,
                log_file: TrainingLog | None = None, dump_dir=None) -> list[dict]:
    model, opt, cfg, epoch = state.model, state.optimizer, state.cfg, state.epoch
    for group in opt.param_groups:
        group["lr"] = cfg.lr_at(epoch) * group["lr_scale"]
    model.train()
    rows = []
    for step, batch in enumerate(iter_batches(dataset, cfg.batch_size, cfg.seed, epoch,
                                              train=True,
                                              mask_prob=cfg.mask_prob if cfg.enable_mlm else 0.0)):
        try:
            parts = compute_loss(model, batch, epoch)
        except DegenerateBatchError as exc:
            log.warning("epoch %d step %d skipped: %s", epoch, step, exc)
            continue
        if not torch.isfinite(parts.total):
            batch_id = f"epoch{epoch}-step{step}"
            if dump_dir is not None:
                Path(dump_dir).mkdir(parents=True, exist_ok=True)
                (Path(dump_dir) / "nonfinite_batch.json").write_text(json.dumps({
                    "batch_id": batch_id, "indices": batch.indices.tolist(),
                    "video_ids": batch.video_ids, **parts.row(),
                }, indent=2))
            raise NumericError(f"non-finite loss in batch {batch_id} "
                               f"(samples {batch.indices.tolist()})", batch_id)
        opt.zero_grad(set_to_none=True)
        parts.total.backward()
        opt.step()
        row = {"epoch": epoch, "step": step, **parts.row()}
        rows.append(row)
        if log_file is not None:
            log_file.append(epoch, step, parts)
    state.epoch += 1
    state.history.extend(rows)
    return rows


def train(cfg: TrainConfig, dataset: GroundingDataset, log_path=None, checkpoint_path=None,
          on_epoch_end: Callable[[TrainState], bool | None] | None = None) -> TrainState:
    """Train for ``cfg.epochs`` epochs.  ``on_epoch_end`` returning True stops early."""
    if len(dataset) == 0:
        raise DataError("empty dataset")
    state = init_state(cfg, dataset)
    log_file = TrainingLog(log_path) if log_path is not None else None
    dump_dir = Path(checkpoint_path).parent if checkpoint_path is not None else None
    while state.epoch < state.cfg.epochs:
        rows = train_epoch(state, dataset, log_file, dump_dir)
        if rows:
            log.info("epoch %d: mean loss %.4f", state.epoch - 1,
                     float(np.mean([r["total"] for r in rows])))
        if on_epoch_end is not None and on_epoch_end(state):
            break
    if checkpoint_path is not None:
        save_checkpoint(state, checkpoint_path)
    return state


def parameter_hash(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, tensor in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# --------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"GMUC"
CKPT_VERSION = 1
_CKPT_HEAD = struct.Struct("<4sIQ")


def _tensor_entries(state: TrainState) -> list[tuple[str, Tensor]]:
    entries = [("model/" + k, v) for k, v in sorted(state.model.state_dict().items())]
    names = {id(p): n for n, p in state.model.named_parameters()}
    for p, st in state.optimizer.state.items():
        for key in sorted(st):
            entries.append((f"optim/{names[id(p)]}/{key}", st[key]))
    return sorted(entries, key=lambda e: e[0])


def checkpoint_bytes(state: TrainState) -> bytes:
    tensors, blobs, offset = [], [], 0
    for name, t in _tensor_entries(state):
        arr = np.ascontiguousarray(t.detach().cpu().numpy())
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        tensors.append({"name": name, "dtype": arr.dtype.str.lstrip("<>|="), "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "config": state.cfg.to_dict(),
        "config_hash": state.cfg.arch_hash(),
        "epoch": state.epoch,
        "seed": state.cfg.seed,
        "lr": [g["lr"] for g in state.optimizer.param_groups],
        "tensors": tensors,
    }
    head = json.dumps(header, sort_keys=True).encode()
    return _CKPT_HEAD.pack(CKPT_MAGIC, CKPT_VERSION, len(head)) + head + b"".join(blobs)


def save_checkpoint(state: TrainState, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(checkpoint_bytes(state))


def load_checkpoint(path, expect: TrainConfig | None = None) -> TrainState:
    """Restore model and optimizer.  ``expect`` must match the stored architecture hash."""
    data = Path(path).read_bytes()
    if len(data) < _CKPT_HEAD.size:
        raise DataError(f"{path}: truncated checkpoint")
    magic, version, head_len = _CKPT_HEAD.unpack_from(data)
    if magic != CKPT_MAGIC or version != CKPT_VERSION:
        raise DataError(f"{path}: not a version-{CKPT_VERSION} GMU checkpoint")
    header = json.loads(data[_CKPT_HEAD.size:_CKPT_HEAD.size + head_len])
    cfg = TrainConfig.from_dict(header["config"])
    if cfg.arch_hash() != header["config_hash"]:
        raise ConfigMismatchError(f"{path}: stored config does not match its hash")
    if expect is not None and expect.arch_hash() != header["config_hash"]:
        raise ConfigMismatchError(
            f"{path}: checkpoint config hash {header['config_hash']} "
            f"!= requested {expect.arch_hash()}"
        )
    body = memoryview(data)[_CKPT_HEAD.size + head_len:]
    tensors = {}
    for e in header["tensors"]:
        chunk = body[e["offset"]:e["offset"] + e["nbytes"]]
        arr = np.frombuffer(chunk, dtype=np.dtype(e["dtype"]).newbyteorder("<")).reshape(e["shape"])
        tensors[e["name"]] = torch.from_numpy(arr.copy())
    model = GMU(cfg).to(cfg.torch_dtype)
    model_state = {k[len("model/"):]: v for k, v in tensors.items() if k.startswith("model/")}
    model.load_state_dict(model_state, strict=True)
    opt = make_optimizer(model)
    params = dict(model.named_parameters())
    for name, t in tensors.items():
        if not name.startswith("optim/"):
            continue
        pname, key = name[len("optim/"):].rsplit("/", 1)
        opt.state[params[pname]][key] = t
    for g, lr in zip(opt.param_groups, header["lr"]):
        g["lr"] = lr
    return TrainState(model, opt, epoch=int(header["epoch"]))
