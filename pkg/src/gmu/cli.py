"""Command-line entry point: ``gmu {synth,train,eval,predict,dump-maps}``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import typing
from pathlib import Path

import numpy as np

from gmu.engine import PROFILES, TrainConfig, load_checkpoint, save_checkpoint, train
from gmu.errors import DataError, NumericError
from gmu.evaluator import MAP_KINDS, dump_maps, evaluate_maps, infer_maps, predict, query_maps
from gmu.ingest_io import Vocabulary, build_dataset, make_synthetic_dataset, read_gmuf

log = logging.getLogger("gmu")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
ANNOTATION_FORMATS = ("json_lines", "charades_lines")
# seed is registered per command
_FIELD_FLAGS = [f for f in dataclasses.fields(TrainConfig) if f.name != "seed"]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _optional_int(text: str) -> int | None:
    if text.lower() in ("none", "off"):
        return None
    return int(text)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    group = p.add_argument_group("model and training (defaults are the full-scale profile)")
    hints = typing.get_type_hints(TrainConfig)
    for f in _FIELD_FLAGS:
        flag = "--" + f.name.replace("_", "-")
        kind = hints[f.name]
        help_ = f"(default: {f.default})"
        if kind is bool:
            group.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction,
                               default=argparse.SUPPRESS, help=help_)
        elif f.name == "upsilon":
            group.add_argument(flag, dest=f.name, type=_optional_int, default=argparse.SUPPRESS,
                               metavar="EPOCH|none", help=help_)
        elif f.name == "dtype":
            group.add_argument(flag, dest=f.name, choices=("float32", "float64"),
                               default=argparse.SUPPRESS, help=help_)
        else:
            group.add_argument(flag, dest=f.name, type=kind, default=argparse.SUPPRESS, help=help_)


def _add_data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--features-dir", type=Path, required=True, help="directory of <video_id>.gmuf files")
    p.add_argument("--annotations", type=Path, required=True)
    p.add_argument("--format", choices=ANNOTATION_FORMATS, default="json_lines",
                   help="annotation file format (default: json_lines)")
    p.add_argument("--vocab", type=Path, help="vocabulary JSON (default: next to the checkpoint)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gmu", description="Temporal grounding of text queries in videos.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic feature/annotation dataset")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--videos", type=int, default=200, help="(default: 200)")
    p.add_argument("--t-raw", type=int, default=16, help="feature rows per video (default: 16)")
    p.add_argument("--d-i", type=int, default=16, help="feature width (default: 16)")
    p.add_argument("--actions", type=int, default=8, help="(default: 8)")
    p.add_argument("--noise", type=float, default=0.05, help="feature noise sigma (default: 0.05)")
    p.add_argument("--seed", type=int, default=7, help="(default: 7)")

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    _add_data_flags(p)
    p.add_argument("--out", type=Path, required=True,
                   help="run directory for model.ckpt, vocab.json, config.json and train_log.csv")
    p.add_argument("--checkpoint", type=Path, help="checkpoint path (default: <out>/model.ckpt)")
    p.add_argument("--profile", choices=sorted(PROFILES), default="paper", help="(default: paper)")
    p.add_argument("--config", type=Path, help="JSON of TrainConfig fields; explicit flags win")
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="(default: 0)")
    _add_config_flags(p)

    p = sub.add_parser("eval", help="R@1 and mIoU of a checkpoint on a dataset")
    _add_data_flags(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--config", type=Path, help="expected config; its architecture must match the checkpoint")
    p.add_argument("--map", choices=MAP_KINDS + ("all",), default="all", help="(default: all)")
    p.add_argument("--out", type=Path, help="also write the report JSON here")

    p = sub.add_parser("predict", help="top intervals for one video and query")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--features", type=Path, help="a .gmuf file")
    p.add_argument("--features-dir", type=Path)
    p.add_argument("--video", help="video id inside --features-dir")
    p.add_argument("--query", required=True)
    p.add_argument("--duration", type=float, help="seconds (default: sidecar or one per feature row)")
    p.add_argument("--vocab", type=Path)
    p.add_argument("--map", choices=MAP_KINDS, default="fusion", help="(default: fusion)")
    p.add_argument("--k", type=int, default=1, help="(default: 1)")
    p.add_argument("--nms-iou", type=float, default=0.5, help="(default: 0.5)")

    p = sub.add_parser("dump-maps", help="write moment/clip/fusion score maps of one sample as CSV")
    _add_data_flags(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--sample", type=int, default=0, help="annotation index (default: 0)")
    p.add_argument("--out", type=Path, required=True, help="path prefix for the CSV files")
    return parser


def _read_json(path: Path) -> dict:
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise UsageError(f"{path}: expected a JSON object")
    return data


def resolve_train_config(args: argparse.Namespace) -> TrainConfig:
    """Profile, then ``--config`` JSON, then explicit flags."""
    merged = dict(PROFILES[args.profile])
    if args.config is not None:
        merged.update(_read_json(args.config))
    names = {f.name for f in dataclasses.fields(TrainConfig)}
    merged.update({k: v for k, v in vars(args).items() if k in names})
    try:
        return TrainConfig.from_dict(merged)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


def _vocab_for(args, checkpoint: Path) -> Vocabulary:
    path = args.vocab or checkpoint.parent / "vocab.json"
    if not path.exists():
        raise DataError(f"vocabulary {path} not found; pass --vocab")
    return Vocabulary.load(path)


def _eval_dataset(args, cfg: TrainConfig, vocab: Vocabulary):
    ds = build_dataset(args.features_dir, args.annotations, vocab, T=cfg.T, o_min=cfg.o_min,
                       o_max=cfg.o_max, format=args.format, l_max=cfg.L_max)
    if ds.d_i != cfg.d_i:
        raise DataError(f"features have width {ds.d_i}, checkpoint expects {cfg.d_i}")
    return ds


def cmd_synth(args) -> dict:
    try:
        fd, ann, vocab = make_synthetic_dataset(args.out, args.videos, args.t_raw, args.d_i,
                                                args.actions, args.noise, args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    return {"features_dir": str(fd), "annotations": str(ann), "vocab": str(args.out / "vocab.json"),
            "videos": args.videos}


def cmd_train(args) -> dict:
    cfg = resolve_train_config(args)
    vocab = Vocabulary.load(args.vocab) if args.vocab else None
    ds = build_dataset(args.features_dir, args.annotations, vocab, T=cfg.T, o_min=cfg.o_min,
                       o_max=cfg.o_max, format=args.format, l_max=cfg.L_max)
    args.out.mkdir(parents=True, exist_ok=True)
    ckpt = args.checkpoint or args.out / "model.ckpt"
    state = train(cfg, ds, log_path=args.out / "train_log.csv", checkpoint_path=None)
    save_checkpoint(state, ckpt)
    ds.vocab.save(ckpt.parent / "vocab.json")
    (args.out / "config.json").write_text(json.dumps(state.cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return {"checkpoint": str(ckpt), "epochs": state.epoch, "config_hash": state.cfg.arch_hash()}


def cmd_eval(args) -> dict:
    expect = None
    if args.config is not None:
        try:
            expect = TrainConfig.from_dict(_read_json(args.config))
        except (TypeError, ValueError) as exc:
            raise UsageError(f"{args.config}: {exc}") from exc
    state = load_checkpoint(args.checkpoint, expect=expect)
    ds = _eval_dataset(args, state.cfg, _vocab_for(args, args.checkpoint))
    maps = infer_maps(state.model, ds)
    kinds = MAP_KINDS if args.map == "all" else (args.map,)
    reports = {k: dataclasses.asdict(evaluate_maps(maps[k], ds)) for k in kinds}
    out = reports if args.map == "all" else reports[args.map]
    if args.out is not None:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(json.dumps(out, sort_keys=True, indent=2) + "\n")
    return out


def _durations(features_dir: Path | None) -> dict:
    if features_dir is not None and (features_dir / "durations.json").exists():
        return json.loads((features_dir / "durations.json").read_text())
    return {}


def cmd_predict(args) -> dict:
    if args.features is not None:
        path, video = args.features, args.features.stem
        sidecar = _durations(args.features.parent)
    elif args.features_dir is not None and args.video:
        path, video = args.features_dir / f"{args.video}.gmuf", args.video
        sidecar = _durations(args.features_dir)
    else:
        raise UsageError("predict needs --features, or --features-dir with --video")
    if args.k < 1 or not 0 < args.nms_iou:
        raise UsageError("--k must be >= 1 and --nms-iou positive")
    state = load_checkpoint(args.checkpoint)
    if not path.exists():
        raise DataError(f"missing feature file {path}")
    feats = read_gmuf(path)
    duration = args.duration or sidecar.get(video) or float(feats.shape[0])
    preds = predict(state.model, feats, args.query, _vocab_for(args, args.checkpoint), duration,
                    k=args.k, nms_iou=args.nms_iou, kind=args.map)
    return {"video_id": video, "query": args.query, "duration": duration,
            "predictions": [{"start": p.start, "end": p.end, "score": p.score, "cell": list(p.cell)}
                            for p in preds]}


def cmd_dump_maps(args) -> dict:
    state = load_checkpoint(args.checkpoint)
    ds = _eval_dataset(args, state.cfg, _vocab_for(args, args.checkpoint))
    if not 0 <= args.sample < len(ds):
        raise UsageError(f"--sample must lie in [0, {len(ds)})")
    s = ds.samples[args.sample]
    raw = read_gmuf(args.features_dir / f"{s.video_id}.gmuf")
    maps = query_maps(state.model, raw, s.query, ds.vocab)
    paths = dump_maps(maps["moment"], maps["clip"], maps["fusion"], args.out)
    return {"video_id": s.video_id, "query": s.query, "files": [str(p) for p in paths]}


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval,
            "predict": cmd_predict, "dump-maps": cmd_dump_maps}


def _setup_logging() -> None:
    name = os.environ.get("GMU_LOG_LEVEL", "info").lower()
    if name not in LOG_LEVELS:
        raise UsageError(f"GMU_LOG_LEVEL must be one of {sorted(LOG_LEVELS)}, got {name!r}")
    logging.basicConfig(level=LOG_LEVELS[name], stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s", force=True)


def run(argv: list[str] | None = None) -> int:
    try:
        _setup_logging()
        args = build_parser().parse_args(argv)
        result = COMMANDS[args.command](args)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    print(json.dumps(result, sort_keys=True, default=_jsonable))
    return EXIT_OK


def _jsonable(x):
    if isinstance(x, np.generic):
        return x.item()
    raise TypeError(type(x).__name__)


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
