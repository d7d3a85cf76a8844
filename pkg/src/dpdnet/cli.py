"""Command line entry point: ``dpdnet {synth,train,infer,eval,bench}``.

Exit status is 0 on success, 1 on runtime or I/O failure and 2 on usage errors.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .confmap import write_pgm8
from .data import (
    NORM_DIVISOR_MM,
    DepthIOError,
    ManifestError,
    condition_for_count,
    derive_seed,
    frames_to_batch,
    prepare_input,
    read_manifest,
    rescale_labels,
)
from .estimator import detect_frames
from .evaluation import (
    CountTally,
    MatchConfig,
    aggregate_by_condition,
    benchmark_fps,
    match_frame,
    report_csv,
    report_table,
)
from .model import CheckpointError, DPDNet, get_variant, load_checkpoint, save_checkpoint
from .synth import SceneConfig, SceneError, generate_dataset, generate_scene
from .tensor import set_deterministic
from .training import TrainConfig, TrainingError, train

logger = logging.getLogger("dpdnet")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2
RUNTIME_ERRORS = (OSError, ManifestError, DepthIOError, CheckpointError, TrainingError, SceneError)


class UsageError(Exception):
    pass


class RunError(Exception):
    pass


def _people_range(text: str) -> tuple[int, int]:
    try:
        lo, _, hi = text.partition("..")
        lo, hi = int(lo), int(hi or lo)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected N or A..B, got {text!r}") from None
    if lo < 0 or hi < lo:
        raise argparse.ArgumentTypeError(f"invalid range {text!r}")
    return lo, hi


def _probability(text: str) -> float:
    value = float(text)
    if not 0.0 <= value <= 1.0:
        raise argparse.ArgumentTypeError(f"must be in [0, 1], got {text}")
    return value


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {text}")
    return value


def _common(p: argparse.ArgumentParser, *names: str) -> None:
    options = {
        "manifest": (("--manifest",), dict(type=Path, help="dataset manifest (JSON lines)")),
        "checkpoint": (("--checkpoint",), dict(type=Path, help="model checkpoint file")),
        "variant": (("--variant",), dict(choices=("std", "fast"), default="std")),
        "filter_scale": (("--filter-scale",), dict(type=float, default=1.0, help="channel width multiplier")),
        "seed": (("--seed",), dict(type=int, default=0)),
        "deterministic": (("--deterministic",), dict(action="store_true", help="single-threaded, reproducible math")),
        "out": (("--out",), dict(type=Path, required=True, help="output directory")),
        "tau": (("--tau",), dict(type=float, default=0.5, help="peak threshold")),
        "match_radius": (("--match-radius",), dict(type=float, default=12.0, help="match radius in native pixels")),
        "batch": (("--batch",), dict(type=_positive_int, default=8)),
        "config": (("--config",), dict(type=Path, help="JSON object with option defaults")),
    }
    for name in names:
        flags, kw = options[name]
        p.add_argument(*flags, **kw)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dpdnet", description="Overhead depth people detection.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic dataset")
    _common(p, "out", "seed", "config")
    p.add_argument("--frames", type=_positive_int, default=32)
    p.add_argument("--people", type=_people_range, default=(1, 4), metavar="A..B")
    p.add_argument("--chairs", type=_probability, default=0.0, help="probability of each chair")
    p.add_argument("--format", choices=("pgm", "png", "raw"), default="pgm")

    p = sub.add_parser("train", help="train a model on a manifest")
    _common(p, "manifest", "variant", "filter_scale", "seed", "deterministic", "out", "batch", "config")
    p.add_argument("--epochs", type=_positive_int, default=50)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--lambda", dest="lam", type=float, default=1.0)
    p.add_argument("--val-fraction", type=float, default=0.1)

    p = sub.add_parser("infer", help="detect people in every manifest frame")
    _common(p, "manifest", "checkpoint", "seed", "deterministic", "out", "tau", "batch", "config")
    p.add_argument("--variant", choices=("std", "fast"), help="fail unless the checkpoint has this variant")
    p.add_argument("--emit-maps", action="store_true", help="also write 8-bit PGM confidence maps")

    p = sub.add_parser("eval", help="score detections against manifest ground truth")
    _common(p, "manifest", "checkpoint", "seed", "deterministic", "out", "tau", "match_radius", "batch", "config")
    p.add_argument("--detections", type=Path, help="detections CSV; inferred from --checkpoint if absent")

    p = sub.add_parser("bench", help="time single-frame inference")
    _common(p, "manifest", "checkpoint", "filter_scale", "seed", "tau", "config")
    p.add_argument("--variant", choices=("std", "fast"),
                   help="model variant without --checkpoint (default std); otherwise must match it")
    p.add_argument("--out", type=Path, help="optional output directory for bench.csv")
    p.add_argument("--warmup", type=int, default=2)
    p.add_argument("--frames", type=_positive_int, default=20, help="synthetic stream length without --manifest")
    p.add_argument("--people", type=_people_range, default=(1, 4), metavar="A..B")
    return parser


def _read_config(path: Path) -> dict:
    lines = path.read_text().strip().splitlines()
    if not lines:
        raise ValueError("empty file")
    config = json.loads(lines[0])
    if not isinstance(config, dict):
        raise ValueError("expected a single JSON object")
    return config


def parse_args(argv=None) -> argparse.Namespace:
    """Parse flags; ``--config`` supplies defaults that explicit flags override."""
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", type=Path)
    early, _ = pre.parse_known_args(argv)
    command = next((a for a in argv if a in COMMANDS), None)
    if early.config is None or command is None:
        return parser.parse_args(argv)
    try:
        config = _read_config(early.config)
    except (OSError, ValueError) as exc:
        parser.error(f"cannot read config {early.config}: {exc}")
    sub = parser._subparsers._group_actions[0].choices[command]
    # keys may be written as flags ("filter-scale", "lambda") or destinations ("lam")
    known = {}
    for action in sub._actions:
        if action.dest in ("help", "config"):
            continue
        known[action.dest] = action
        for opt in action.option_strings:
            known[opt.lstrip("-").replace("-", "_")] = action
    unknown = sorted(k for k in config if k.replace("-", "_") not in known)
    if unknown:
        parser.error(f"unknown config key(s): {', '.join(unknown)}")
    for key, value in config.items():
        action = known[key.replace("-", "_")]
        if action.type is not None and isinstance(value, str):
            value = action.type(value)
        elif isinstance(value, list):
            value = tuple(value)
        action.required = False
        sub.set_defaults(**{action.dest: value})
    return parser.parse_args(argv)


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _require(args, *names):
    for name in names:
        if getattr(args, name, None) is None:
            raise UsageError(f"--{name.replace('_', '-')} is required for {args.command}")


def _load_manifest(args):
    return read_manifest(args.manifest)


def _load_inputs(manifest, size):
    frames = [prepare_input(manifest.load_frame(i), size, manifest.norm_divisor) for i in range(len(manifest))]
    return frames_to_batch(frames)


def _load_model(args) -> DPDNet:
    model = load_checkpoint(args.checkpoint)
    wanted = getattr(args, "variant", None)
    if wanted is not None and wanted != model.variant.name:
        raise RunError(f"checkpoint/variant mismatch: checkpoint is '{model.variant.name}', requested '{wanted}'")
    return model


def _detections(args, manifest, model):
    inputs = _load_inputs(manifest, model.variant.input_size)
    return detect_frames(model, inputs, manifest.native_size, args.tau, batch_size=args.batch)


def _write_detections(path: Path, manifest, dets) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame", "row", "col", "score"])
        for rec, d in zip(manifest.records, dets):
            for row, col, score in d:
                w.writerow([rec.frame, int(row), int(col), repr(float(score))])


def read_detections(path: Path, manifest) -> list[np.ndarray]:
    """Group a detections CSV by frame, in manifest order."""
    known = {rec.frame: i for i, rec in enumerate(manifest.records)}
    grouped: list[list] = [[] for _ in manifest.records]
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"frame", "row", "col"} <= set(reader.fieldnames):
            raise RunError(f"{path}: expected columns frame,row,col[,score]")
        for lineno, row in enumerate(reader, start=2):
            if row["frame"] not in known:
                raise RunError(f"{path}:{lineno}: frame '{row['frame']}' is not in the manifest")
            grouped[known[row["frame"]]].append(
                (float(row["row"]), float(row["col"]), float(row.get("score") or 1.0)))
    return [np.array(g, dtype=np.float64).reshape(-1, 3) for g in grouped]


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    config = SceneConfig(people=args.people, chair_prob=args.chairs)
    manifest = generate_dataset(config, args.frames, args.seed, args.out, fmt=args.format)
    counts: dict[str, int] = {}
    for rec in manifest.records:
        counts[rec.condition] = counts.get(rec.condition, 0) + 1
    print(f"wrote {args.out / 'manifest.jsonl'}: {len(manifest)} frames, "
          f"{sum(len(r.heads) for r in manifest.records)} people")
    for cond, n in counts.items():
        print(f"  {cond}: {n}")
    return EXIT_OK


def cmd_train(args) -> int:
    _require(args, "manifest")
    manifest = _load_manifest(args)
    variant = get_variant(args.variant)
    try:
        config = TrainConfig(lam=args.lam, epochs=args.epochs, lr=args.lr, batch_size=args.batch,
                             val_fraction=args.val_fraction, seed=args.seed, filter_scale=args.filter_scale,
                             variant=args.variant, deterministic=args.deterministic)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    inputs = _load_inputs(manifest, variant.input_size)
    labels = [rescale_labels(r.heads, manifest.native_size, variant.input_size) for r in manifest.records]
    model, record = train(inputs, labels, config,
                          on_epoch=lambda s: logger.info("epoch %d train %.4f val %.4f", s.epoch,
                                                         s.train_loss, s.val_loss))
    args.out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, args.out / "model.dpdn")
    (args.out / "train_log.csv").write_text(record.to_csv())
    (args.out / "train_config.json").write_text(json.dumps(record.config, sort_keys=True) + "\n")
    best = record.epochs[record.best_epoch - 1]
    print(f"trained {len(record.epochs)} epochs; best epoch {best.epoch} "
          f"(val {best.val_loss:.4f}); checkpoint {args.out / 'model.dpdn'}")
    return EXIT_OK


def cmd_infer(args) -> int:
    _require(args, "manifest", "checkpoint")
    manifest = _load_manifest(args)
    model = _load_model(args)
    dets, maps = _detections(args, manifest, model)
    args.out.mkdir(parents=True, exist_ok=True)
    _write_detections(args.out / "detections.csv", manifest, dets)
    if args.emit_maps:
        (args.out / "maps").mkdir(exist_ok=True)
        for i, m in enumerate(maps):
            write_pgm8(args.out / "maps" / f"{i:06d}.pgm", m)
    print(f"{sum(len(d) for d in dets)} detections in {len(dets)} frames -> {args.out / 'detections.csv'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    _require(args, "manifest")
    manifest = _load_manifest(args)
    if args.detections is not None:
        dets = read_detections(args.detections, manifest)
    else:
        _require(args, "checkpoint")
        dets, _ = _detections(args, manifest, _load_model(args))
    cfg = MatchConfig(args.match_radius)
    tallies = [(rec.condition, match_frame(d, rec.heads, cfg)) for rec, d in zip(manifest.records, dets)]
    groups = aggregate_by_condition(tallies)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "metrics.csv").write_text(report_csv(groups))
    table = report_table(groups)
    (args.out / "metrics.txt").write_text(table)
    print(table, end="")
    return EXIT_OK


def _bench_stream(args):
    if args.manifest is not None:
        manifest = _load_manifest(args)
        frames = [manifest.load_frame(i) for i in range(len(manifest))]
        return frames, [r.condition for r in manifest.records], manifest.norm_divisor
    config = SceneConfig(people=args.people)
    frames, conditions = [], []
    for i in range(args.frames):
        frame, labels = generate_scene(config, derive_seed(args.seed, "bench", i))
        frames.append(frame)
        conditions.append(condition_for_count(len(labels)))
    return frames, conditions, NORM_DIVISOR_MM


def cmd_bench(args) -> int:
    if args.checkpoint is not None:
        model = _load_model(args)
    else:
        model = DPDNet(args.variant or "std", args.filter_scale, seed=derive_seed(args.seed, "init")).eval()
    size = model.variant.input_size
    frames, conditions, divisor = _bench_stream(args)
    if len(frames) <= args.warmup:
        raise UsageError(f"need more than --warmup {args.warmup} frames, got {len(frames)}")
    native = frames[0].shape

    def infer(frame):
        x = prepare_input(frame, size, divisor).depth[None, :, :, None]
        return detect_frames(model, x, native, args.tau, batch_size=1)

    with threadpool_limits(limits=1):
        result = benchmark_fps(infer, frames, warmup=args.warmup)
    timed = conditions[args.warmup:]
    rows = []
    order = [c for c in ("single", "two", "multi", "no-people") if c in timed]
    for cond in order + ["Totals"]:
        secs = [t for t, c in zip(result.frame_seconds, timed) if cond == "Totals" or c == cond]
        rows.append([cond, len(secs), 1.0 / np.mean(secs), 1.0 / max(secs), 1.0 / min(secs)])
    lines = [f"{'Condition':<10} {'Frames':>6} {'Mean FPS':>9} {'Min FPS':>9} {'Max FPS':>9}"]
    lines += [f"{c:<10} {n:>6d} {m:>9.2f} {lo:>9.2f} {hi:>9.2f}" for c, n, m, lo, hi in rows]
    print(f"{model.variant.name} variant, {result.timed_frames} timed frames after {args.warmup} warmup")
    print("\n".join(lines))
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        with open(args.out / "bench.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["condition", "frames", "mean_fps", "min_fps", "max_fps"])
            w.writerows(rows)
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval, "bench": cmd_bench}


def run(argv=None) -> int:
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "deterministic", False):
        set_deterministic(True)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"dpdnet {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (RunError, *RUNTIME_ERRORS) as exc:
        print(f"dpdnet {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    finally:
        if getattr(args, "deterministic", False):
            set_deterministic(False)


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
