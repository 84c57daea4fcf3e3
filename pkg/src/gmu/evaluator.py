"""Score-map fusion, top-k extraction, recall/mIoU metrics and CSV map dumps."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from gmu.engine import batch_tensors
from gmu.grounding_core import Interval, MomentGrid, cell_to_interval, interval_iou, valid_mask
from gmu.ingest_io import GroundingDataset, Vocabulary, iter_batches, resample_moments, tokenize_and_mask

IOU_THRESHOLDS = (0.1, 0.3, 0.5, 0.7)
MAP_KINDS = ("moment", "clip", "fusion")


def fuse(S_m: np.ndarray, S_c: np.ndarray) -> np.ndarray:
    S_m, S_c = np.asarray(S_m), np.asarray(S_c)
    if S_m.shape != S_c.shape:
        raise ValueError(f"map shapes differ: {S_m.shape} vs {S_c.shape}")
    return np.where(valid_mask(S_m.shape[-1]), S_m * S_c, 0.0)


@dataclass(frozen=True)
class Prediction:
    start: float
    end: float
    score: float
    cell: tuple[int, int]

    @property
    def interval(self) -> Interval:
        return Interval(self.start, self.end)


def top_k(score_map: np.ndarray, grid: MomentGrid, k: int = 1, nms_iou: float = 0.5) -> list[Prediction]:
    """Greedy NMS over valid cells by descending score.

    Ties go to the smaller start index, then the smaller end index.  A
    candidate is dropped when its IoU with a kept interval reaches ``nms_iou``.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if not nms_iou > 0:
        raise ValueError("nms_iou must be positive")
    score_map = np.asarray(score_map, dtype=np.float64)
    ii, jj = np.nonzero(valid_mask(grid.T))
    scores = score_map[ii, jj]
    # lexsort: last key is primary
    order = np.lexsort((jj, ii, -scores))
    kept: list[Prediction] = []
    for idx in order:
        cand = cell_to_interval(grid, int(ii[idx]), int(jj[idx]))
        if any(interval_iou(cand, p.interval) >= nms_iou for p in kept):
            continue
        kept.append(Prediction(cand.start, cand.end, float(scores[idx]), (int(ii[idx]), int(jj[idx]))))
        if len(kept) == k:
            break
    return kept


@dataclass
class EvalReport:
    recall: dict[str, float]
    mIoU: float
    n_samples: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def evaluate(predictions: Sequence[Interval], gts: Sequence[Interval],
             thresholds: Sequence[float] = IOU_THRESHOLDS) -> EvalReport:
    if len(predictions) != len(gts):
        raise ValueError(f"{len(predictions)} predictions for {len(gts)} ground truths")
    if not gts:
        raise ValueError("nothing to evaluate")
    ious = np.array([interval_iou(p, g) for p, g in zip(predictions, gts)])
    recall = {f"R@1,IoU={m}": float(np.mean(ious >= m)) for m in thresholds}
    return EvalReport(recall, float(np.mean(ious)), len(gts))


def dump_maps(S_m, S_c, S_f, prefix) -> list[Path]:
    """Write ``<prefix>_{moment,clip,fusion}.csv``: T rows of T fixed 6-decimal fields."""
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    paths = []
    for kind, m in zip(MAP_KINDS, (S_m, S_c, S_f)):
        m = np.asarray(m, dtype=np.float64)
        m = np.where(valid_mask(m.shape[-1]), m, 0.0)
        path = prefix.parent / f"{prefix.name}_{kind}.csv"
        with open(path, "w") as fh:
            for row in m:
                fh.write(",".join(f"{v:.6f}" for v in row) + "\n")
        paths.append(path)
    return paths


def read_map(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", ndmin=2)


# ------------------------------------------------------------------ inference


@torch.no_grad()
def infer_maps(model, dataset: GroundingDataset, batch_size: int | None = None) -> dict[str, np.ndarray]:
    """Score maps for every sample in dataset order: ``{kind: n x T x T}``."""
    cfg = model.cfg
    model.eval()
    out = {k: [] for k in MAP_KINDS}
    for batch in iter_batches(dataset, batch_size or cfg.batch_size, train=False):
        t = batch_tensors(batch, cfg.torch_dtype)
        res = model(t["tokens"], t["lengths"], t["v_o"])
        out["moment"].append(res.S_m.double().numpy())
        out["clip"].append(res.S_c.double().numpy())
        out["fusion"].append(res.S_f.double().numpy())
    return {k: np.concatenate(v) for k, v in out.items()}


def evaluate_maps(maps: np.ndarray, dataset: GroundingDataset) -> EvalReport:
    preds = [top_k(m, s.grid, k=1)[0].interval for m, s in zip(maps, dataset.samples)]
    return evaluate(preds, [s.gt for s in dataset.samples])


def evaluate_model(model, dataset: GroundingDataset) -> dict[str, EvalReport]:
    maps = infer_maps(model, dataset)
    return {kind: evaluate_maps(maps[kind], dataset) for kind in MAP_KINDS}


@torch.no_grad()
def query_maps(model, features: np.ndarray, query: str, vocab: Vocabulary) -> dict[str, np.ndarray]:
    """Score maps for one raw ``T_raw x d_i`` feature sequence and one query."""
    cfg = model.cfg
    model.eval()
    ids = tokenize_and_mask(query, vocab, train=False, l_max=cfg.L_max).token_ids
    tokens = torch.from_numpy(ids[None].astype(np.int64))
    lengths = torch.tensor([len(ids)])
    v_o = torch.from_numpy(resample_moments(features, cfg.T)[None]).to(cfg.torch_dtype)
    res = model(tokens, lengths, v_o)
    maps = {"moment": res.S_m, "clip": res.S_c, "fusion": res.S_f}
    return {k: v[0].double().numpy() for k, v in maps.items()}


def predict(model, features: np.ndarray, query: str, vocab: Vocabulary, duration: float,
            k: int = 1, nms_iou: float = 0.5, kind: str = "fusion") -> list[Prediction]:
    if kind not in MAP_KINDS:
        raise ValueError(f"unknown map kind {kind!r}")
    maps = query_maps(model, features, query, vocab)
    return top_k(maps[kind], MomentGrid(model.cfg.T, duration), k=k, nms_iou=nms_iou)
