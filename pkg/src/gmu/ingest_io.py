"""Annotations, GMUF feature files, vocabulary, query masking and batching."""
from __future__ import annotations

import json
import logging
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from gmu.errors import (
    AnnotationError,
    DataError,
    FeatureFormatError,
    FeatureTruncatedError,
    NonFiniteFeatureError,
)
from gmu.grounding_core import (
    Interval,
    MomentGrid,
    boundary_labels,
    proposal_label_map,
    tag_labels,
)

log = logging.getLogger(__name__)

PAD, MASK, UNK = 0, 1, 2
RESERVED = {"<pad>": PAD, "<mask>": MASK, "<unk>": UNK}
L_MAX = 30

GMUF_MAGIC = b"GMUF"
GMUF_VERSION = 1
_GMUF_HEADER = struct.Struct("<4sIII")


# --------------------------------------------------------------------- vocab


class Vocabulary:
    def __init__(self, tokens: Sequence[str] = ()):
        self.token_to_id: dict[str, int] = dict(RESERVED)
        for tok in tokens:
            self.add(tok)

    def add(self, token: str) -> int:
        if token not in self.token_to_id:
            self.token_to_id[token] = len(self.token_to_id)
        return self.token_to_id[token]

    def __len__(self):
        return len(self.token_to_id)

    def __contains__(self, token):
        return token in self.token_to_id

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.token_to_id.get(t, UNK) for t in tokens]

    def decode(self, ids: Sequence[int]) -> list[str]:
        inv = {v: k for k, v in self.token_to_id.items()}
        return [inv.get(int(i), "<unk>") for i in ids]

    @classmethod
    def build(cls, queries: Sequence[str]) -> "Vocabulary":
        vocab = cls()
        for q in queries:
            for tok in tokenize(q):
                vocab.add(tok)
        return vocab

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.token_to_id, indent=0, sort_keys=False) + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        mapping = json.loads(Path(path).read_text())
        for name, idx in RESERVED.items():
            if mapping.get(name) != idx:
                raise DataError(f"vocabulary {path}: reserved token {name} must have id {idx}")
        ids = sorted(mapping.values())
        if ids != list(range(len(ids))):
            raise DataError(f"vocabulary {path}: ids are not dense")
        vocab = cls()
        vocab.token_to_id = {k: int(v) for k, v in sorted(mapping.items(), key=lambda kv: kv[1])}
        return vocab


_TRAILING_PUNCT = re.compile(r"[^\w]+$")


def tokenize(query: str) -> list[str]:
    toks = []
    for raw in query.lower().split():
        tok = _TRAILING_PUNCT.sub("", raw)
        if tok:
            toks.append(tok)
    return toks


# --------------------------------------------------------------- annotations


@dataclass
class AnnotationRecord:
    video_id: str
    gt: Interval
    query: str
    duration: float | None = None


def load_annotations(path, format: str = "json_lines") -> tuple[list[AnnotationRecord], int]:
    """Parse an annotation file.  Returns ``(records, n_dropped)``.

    Records whose end does not exceed their start are dropped and counted.
    """
    if format not in ("charades_lines", "json_lines"):
        raise ValueError(f"unknown annotation format {format!r}")
    records: list[AnnotationRecord] = []
    dropped = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            if format == "charades_lines":
                vid, start, end, query, duration = _parse_charades(line, lineno)
            else:
                vid, start, end, query, duration = _parse_json(line, lineno)
            if not (np.isfinite(start) and np.isfinite(end)):
                raise AnnotationError("non-finite timestamp", lineno)
            if end <= start:
                dropped += 1
                continue
            if start < 0:
                raise AnnotationError(f"negative start {start}", lineno)
            records.append(AnnotationRecord(vid, Interval(start, end), query, duration))
    if dropped:
        log.warning("%s: dropped %d records with end <= start", path, dropped)
    return records, dropped


def _parse_charades(line: str, lineno: int):
    head, sep, query = line.partition("##")
    parts = head.split()
    if not sep or len(parts) != 3 or not query.strip():
        raise AnnotationError("expected '<vid> <start> <end>##<sentence>'", lineno)
    try:
        start, end = float(parts[1]), float(parts[2])
    except ValueError:
        raise AnnotationError("timestamps are not numbers", lineno) from None
    return parts[0], start, end, query.strip(), None


def _parse_json(line: str, lineno: int):
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise AnnotationError(f"invalid JSON: {exc.msg}", lineno) from None
    if not isinstance(obj, dict):
        raise AnnotationError("expected a JSON object", lineno)
    missing = [k for k in ("video_id", "duration", "start", "end", "query") if k not in obj]
    if missing:
        raise AnnotationError(f"missing keys {missing}", lineno)
    try:
        return (str(obj["video_id"]), float(obj["start"]), float(obj["end"]),
                str(obj["query"]), float(obj["duration"]))
    except (TypeError, ValueError):
        raise AnnotationError("non-numeric start/end/duration", lineno) from None


def save_annotations(records: Sequence[AnnotationRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps({
                "video_id": r.video_id,
                "duration": r.duration,
                "start": r.gt.start,
                "end": r.gt.end,
                "query": r.query,
            }) + "\n")


# ------------------------------------------------------------------ features


@dataclass
class VideoFeatureSequence:
    video_id: str
    features: np.ndarray
    duration: float


def save_features(features: np.ndarray, path) -> None:
    arr = np.ascontiguousarray(features, dtype="<f4")
    if arr.ndim != 2:
        raise ValueError("features must be a 2-D matrix")
    with open(path, "wb") as fh:
        fh.write(_GMUF_HEADER.pack(GMUF_MAGIC, GMUF_VERSION, arr.shape[0], arr.shape[1]))
        fh.write(arr.tobytes(order="C"))


def read_gmuf(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _GMUF_HEADER.size:
        raise FeatureTruncatedError(f"{path}: file shorter than the GMUF header")
    magic, version, t_raw, d_i = _GMUF_HEADER.unpack_from(data)
    if magic != GMUF_MAGIC:
        raise FeatureFormatError(f"{path}: bad magic {magic!r}")
    if version != GMUF_VERSION:
        raise FeatureFormatError(f"{path}: unsupported GMUF version {version}")
    expected = t_raw * d_i * 4
    body = data[_GMUF_HEADER.size:]
    if len(body) != expected:
        raise FeatureTruncatedError(
            f"{path}: header declares {t_raw}x{d_i} floats, body holds {len(body) // 4}"
        )
    arr = np.frombuffer(body, dtype="<f4").reshape(t_raw, d_i).copy()
    if not np.isfinite(arr).all():
        raise NonFiniteFeatureError(f"{path}: non-finite feature values")
    if t_raw < 1:
        raise FeatureTruncatedError(f"{path}: empty feature matrix")
    return arr


def load_features(path, video_id: str | None = None, duration: float | None = None) -> VideoFeatureSequence:
    """Load a GMUF file.  Duration defaults to one second per row."""
    arr = read_gmuf(path)
    vid = video_id if video_id is not None else Path(path).stem
    return VideoFeatureSequence(vid, arr, float(duration) if duration is not None else float(arr.shape[0]))


def resample_moments(seq: VideoFeatureSequence | np.ndarray, T: int) -> np.ndarray:
    """Linearly interpolate the rows onto ``T`` evenly spaced positions."""
    feats = seq.features if isinstance(seq, VideoFeatureSequence) else np.asarray(seq)
    if T < 2:
        raise ValueError("T must be >= 2")
    t_raw = feats.shape[0]
    if t_raw == T:
        return feats.copy()
    if t_raw == 1:
        return np.repeat(feats, T, axis=0)
    pos = np.arange(T) * (t_raw - 1) / (T - 1)
    lo = np.clip(np.floor(pos).astype(int), 0, t_raw - 1)
    hi = np.minimum(lo + 1, t_raw - 1)
    frac = (pos - lo)[:, None]
    out = feats[lo] + frac * (feats[hi] - feats[lo])
    return out.astype(feats.dtype, copy=False)


# ------------------------------------------------------------------ queries


@dataclass
class MaskedQuery:
    token_ids: np.ndarray
    mask_index: int | None
    mask_target: int | None


def tokenize_and_mask(
    query: str, vocab: Vocabulary, rng_seed=None, train: bool = True, l_max: int = L_MAX
) -> MaskedQuery:
    toks = tokenize(query)
    if not toks:
        raise DataError(f"empty query {query!r}")
    ids = np.asarray(vocab.encode(toks[:l_max]), dtype=np.int64)
    if not train:
        return MaskedQuery(ids, None, None)
    return mask_token_ids(ids, rng_seed)


def mask_token_ids(ids: np.ndarray, rng_seed=None) -> MaskedQuery:
    """Replace one uniformly chosen non-PAD token by MASK."""
    rng = np.random.default_rng(rng_seed)
    candidates = np.flatnonzero(ids != PAD)
    pos = int(candidates[rng.integers(len(candidates))])
    masked = ids.copy()
    masked[pos] = MASK
    return MaskedQuery(masked, pos, int(ids[pos]))


# --------------------------------------------------------------- synthetic


def _segment_lengths(rng: np.random.Generator, total: int, max_segments: int) -> list[int]:
    lengths: list[int] = []
    remaining = total
    while remaining > 0:
        if len(lengths) == max_segments - 1 or remaining < 4:
            lengths.append(remaining)
            break
        seg = int(rng.integers(2, min(6, remaining - 2) + 1))
        lengths.append(seg)
        remaining -= seg
    return lengths


def make_synthetic_dataset(
    out_dir,
    n_videos: int = 200,
    T_raw: int = 16,
    d_i: int = 16,
    n_actions: int = 8,
    noise_sigma: float = 0.05,
    rng_seed: int = 7,
) -> tuple[Path, Path, Vocabulary]:
    """Write a planted-segment dataset.

    Each video lasts ``T_raw`` seconds with one feature row per second and
    is tiled by contiguous segments of distinct actions.  Row features are
    the one-hot action code plus Gaussian noise.  The single query per
    video reads ``"do action<k>"`` for one randomly chosen segment.
    """
    if n_actions > d_i:
        raise ValueError("n_actions must not exceed d_i")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    if T_raw < 2:
        raise ValueError("T_raw must be >= 2")
    out = Path(out_dir)
    feat_dir = out / "features"
    feat_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(rng_seed)
    records = []
    for v in range(n_videos):
        vid = f"syn{v:05d}"
        lengths = _segment_lengths(rng, T_raw, n_actions)
        actions = rng.permutation(n_actions)[: len(lengths)]
        feats = np.zeros((T_raw, d_i), dtype=np.float64)
        bounds = np.concatenate([[0], np.cumsum(lengths)])
        for a, s, e in zip(actions, bounds[:-1], bounds[1:]):
            feats[s:e, a] = 1.0
        if noise_sigma > 0:
            feats += rng.normal(0.0, noise_sigma, size=feats.shape)
        pick = int(rng.integers(len(lengths)))
        save_features(feats.astype(np.float32), feat_dir / f"{vid}.gmuf")
        records.append(AnnotationRecord(
            vid,
            Interval(float(bounds[pick]), float(bounds[pick + 1])),
            f"do action{int(actions[pick])}",
            float(T_raw),
        ))
    ann_path = out / "annotations.jsonl"
    save_annotations(records, ann_path)
    vocab = Vocabulary(["do"] + [f"action{k}" for k in range(n_actions)])
    vocab.save(out / "vocab.json")
    return feat_dir, ann_path, vocab


# ------------------------------------------------------------------ dataset


@dataclass
class QuerySample:
    video_id: str
    token_ids: np.ndarray
    gt: Interval
    grid: MomentGrid
    features: np.ndarray
    l_start: np.ndarray
    l_end: np.ndarray
    y: np.ndarray
    w_hat: np.ndarray
    query: str = ""


@dataclass
class GroundingDataset:
    samples: list[QuerySample]
    vocab: Vocabulary
    T: int
    d_i: int

    def __len__(self):
        return len(self.samples)


def build_dataset(
    features_dir,
    annotations,
    vocab: Vocabulary | None = None,
    T: int = 16,
    o_min: float = 0.5,
    o_max: float = 1.0,
    format: str = "json_lines",
    l_max: int = L_MAX,
    durations: dict[str, float] | None = None,
) -> GroundingDataset:
    """Assemble samples with features resampled to ``T`` and all labels precomputed.

    Durations come from the annotation when present, then from ``durations``,
    then from ``<features_dir>/durations.json``, else one second per row.
    """
    records, _ = load_annotations(annotations, format)
    if not records:
        raise DataError(f"{annotations}: no usable annotation records")
    if vocab is None:
        vocab = Vocabulary.build([r.query for r in records])
    features_dir = Path(features_dir)
    if durations is None and (features_dir / "durations.json").exists():
        durations = json.loads((features_dir / "durations.json").read_text())
    durations = durations or {}
    cache: dict[str, np.ndarray] = {}
    samples = []
    d_i = None
    for r in records:
        if r.video_id not in cache:
            path = features_dir / f"{r.video_id}.gmuf"
            if not path.exists():
                raise DataError(f"missing feature file {path}")
            cache[r.video_id] = read_gmuf(path)
        raw = cache[r.video_id]
        if d_i is None:
            d_i = raw.shape[1]
        elif raw.shape[1] != d_i:
            raise DataError(f"{r.video_id}: feature width {raw.shape[1]} != {d_i}")
        duration = r.duration or durations.get(r.video_id) or float(raw.shape[0])
        grid = MomentGrid(T, float(duration))
        gt = Interval(r.gt.start, min(r.gt.end, grid.D))
        l_start, l_end = boundary_labels(grid, r.gt)
        y, _ = proposal_label_map(grid, gt, o_min, o_max)
        ids = tokenize_and_mask(r.query, vocab, train=False, l_max=l_max).token_ids
        samples.append(QuerySample(
            r.video_id, ids, gt, grid, resample_moments(raw, T),
            l_start, l_end, y, tag_labels(grid, gt), r.query,
        ))
    return GroundingDataset(samples, vocab, T, int(d_i))


@dataclass
class Batch:
    indices: np.ndarray
    features: np.ndarray      # B x T x d_i
    tokens: np.ndarray        # B x L, PAD padded
    lengths: np.ndarray       # B
    mask_index: np.ndarray    # B, -1 when unmasked
    mask_target: np.ndarray   # B, -1 when unmasked
    l_start: np.ndarray       # B x T
    l_end: np.ndarray         # B x T
    y: np.ndarray             # B x T x T
    valid: np.ndarray         # T x T
    w_hat: np.ndarray         # B x T
    gts: list[Interval] = field(default_factory=list)
    grids: list[MomentGrid] = field(default_factory=list)
    video_ids: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.indices)


def collate(dataset: GroundingDataset, indices: Sequence[int], train: bool, seed: int = 0,
            epoch: int = 0, mask_prob: float = 1.0) -> Batch:
    samples = [dataset.samples[i] for i in indices]
    masked = []
    for i, s in zip(indices, samples):
        rng = np.random.default_rng([seed, epoch, int(i)])
        if train and rng.random() < mask_prob:
            q = mask_token_ids(s.token_ids, rng)
            masked.append((q.token_ids, q.mask_index, q.mask_target))
        else:
            masked.append((s.token_ids, -1, -1))
    L = max(len(m[0]) for m in masked)
    tokens = np.full((len(samples), L), PAD, dtype=np.int64)
    for b, (ids, _, _) in enumerate(masked):
        tokens[b, : len(ids)] = ids
    T = dataset.T
    return Batch(
        indices=np.asarray(indices, dtype=np.int64),
        features=np.stack([s.features for s in samples]),
        tokens=tokens,
        lengths=np.asarray([len(m[0]) for m in masked], dtype=np.int64),
        mask_index=np.asarray([m[1] for m in masked], dtype=np.int64),
        mask_target=np.asarray([m[2] for m in masked], dtype=np.int64),
        l_start=np.stack([s.l_start for s in samples]),
        l_end=np.stack([s.l_end for s in samples]),
        y=np.stack([s.y for s in samples]),
        valid=np.triu(np.ones((T, T), dtype=bool)),
        w_hat=np.stack([s.w_hat for s in samples]),
        gts=[s.gt for s in samples],
        grids=[s.grid for s in samples],
        video_ids=[s.video_id for s in samples],
    )


def iter_batches(
    dataset: GroundingDataset,
    batch_size: int,
    seed: int = 0,
    epoch: int = 0,
    train: bool = True,
    mask_prob: float = 1.0,
) -> Iterator[Batch]:
    """Batches as a pure function of ``(dataset, seed, epoch)``.

    Training shuffles with a generator keyed on ``(seed, epoch)`` and masks
    one token in each query with probability ``mask_prob``; evaluation keeps
    dataset order and no masking.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(dataset)
    order = np.random.default_rng([seed, epoch]).permutation(n) if train else np.arange(n)
    for start in range(0, n, batch_size):
        yield collate(dataset, order[start : start + batch_size].tolist(), train, seed, epoch,
                      mask_prob)
