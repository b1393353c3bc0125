"""Command-line entry point: ``evcsnn {synth-gen,ingest,train,eval}``.

Exit codes: 0 on success, 2 for invalid flags, 1 for runtime failures.
"""

from __future__ import annotations

import argparse
import logging
import math
import re
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .event_io import (
    EncodingMode,
    EventBatch,
    SensorGeometry,
    bin_to_frames,
    generate_synthetic,
    num_bins,
    parse_event_csv,
    read_dataset,
    sample_batches,
    slice_into_batches,
    split_train_val,
    write_dataset,
)
from .lif import LifParams, Reset, SurrogateSpec
from .network import NetworkConfig, load_checkpoint, save_checkpoint
from .training import AdamParams, LossTargets, TrainConfig, evaluate, export_metrics, train

logger = logging.getLogger("evcsnn")

# 32x32 sensor, 1 s batches at 100 ms bins (10 steps), 3x3 kernels: the
# smallest layout that keeps all three conv+pool blocks.
SMALL_GEOMETRY = {"width": 32, "height": 32, "duration_ms": 1000, "kernel_size": 3}
FULL_GEOMETRY = {"width": 240, "height": 180, "duration_ms": 3000, "kernel_size": 5}

CSV_NAME = re.compile(r"^(\d+)_(\d+)\.csv$")


@dataclass
class FrameSet(Sequence):
    """Bins event batches into spike frames on access, so frames are never all in memory."""

    batches: list[EventBatch]
    bin_us: int
    mode: EncodingMode
    geometry: SensorGeometry

    def __len__(self) -> int:
        return len(self.batches)

    def __getitem__(self, i):
        b = self.batches[i]
        return bin_to_frames(b, self.bin_us, self.mode, self.geometry), b.label


# -- argument parsing ----------------------------------------------------------


def _positive_int(s: str) -> int:
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {s}")
    return v


def _positive_float(s: str) -> float:
    v = float(s)
    if not (v > 0 and math.isfinite(v)):
        raise argparse.ArgumentTypeError(f"expected a positive number, got {s}")
    return v


def _seed(s: str) -> int:
    v = int(s)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in 64 unsigned bits")
    return v


def _add_geometry(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("sensor geometry")
    g.add_argument("--width", type=_positive_int, default=None, help="sensor width (default 240)")
    g.add_argument("--height", type=_positive_int, default=None, help="sensor height (default 180)")
    g.add_argument(
        "--small-geometry", action="store_true",
        help="32x32 sensor, 1 s batches, 3x3 kernels (fast desk-scale runs)",
    )


def _add_encoding(p: argparse.ArgumentParser) -> None:
    p.add_argument("--bin-ms", type=_positive_float, default=100.0, help="bin window (default 100)")
    p.add_argument(
        "--encoding", choices=[m.value for m in EncodingMode], default=EncodingMode.POLARITY_SPLIT.value,
        help="polarity: one channel per polarity; merged: single channel",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="evcsnn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-gen", help="write a synthetic event dataset")
    p.add_argument("--classes", type=_positive_int, required=True)
    p.add_argument("--per-class", type=_positive_int, required=True)
    p.add_argument("--seed", type=_seed, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--duration-ms", type=_positive_int, default=None, help="batch length")
    p.add_argument("--events-per-step", type=_positive_int, default=20, help="events per 10 ms")
    p.add_argument("--noise", type=float, default=0.05)
    _add_geometry(p)

    p = sub.add_parser("ingest", help="slice and sample CSV recordings into a dataset")
    p.add_argument("--csv-dir", type=Path, required=True, help="files named <subject>_<label>.csv")
    p.add_argument("--window-ms", type=_positive_int, default=3000)
    p.add_argument("--sample-k", type=_positive_int, default=3)
    p.add_argument("--seed", type=_seed, default=0)
    p.add_argument("--out", type=Path, required=True)
    _add_geometry(p)

    p = sub.add_parser("train", help="train the network on a dataset")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--train-frac", type=float, default=0.7)
    p.add_argument("--seed", type=_seed, default=0)
    p.add_argument("--out-weights", type=Path, required=True)
    p.add_argument("--out-metrics", type=Path, required=True)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-size", type=_positive_int, default=25)
    p.add_argument("--lr", type=_positive_float, default=0.0005)
    p.add_argument("--beta1", type=float, default=0.9)
    p.add_argument("--beta2", type=float, default=0.999)
    p.add_argument("--num-classes", type=int, default=24)
    p.add_argument("--kernel-size", type=_positive_int, default=None)
    p.add_argument("--beta", type=float, default=0.5, help="membrane decay")
    p.add_argument("--threshold", type=_positive_float, default=0.25, help="firing threshold")
    p.add_argument("--reset", choices=[r.value for r in Reset], default=Reset.SUBTRACT.value)
    p.add_argument("--slope", type=_positive_float, default=25.0, help="surrogate slope")
    p.add_argument("--no-val", action="store_true", help="train on all data, skip validation")
    _add_geometry(p)
    _add_encoding(p)

    p = sub.add_parser("eval", help="report loss and accuracy of a checkpoint")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--weights", type=Path, required=True)
    _add_geometry(p)
    _add_encoding(p)
    return parser


def _geometry(args, fallback: dict | None = None) -> tuple[SensorGeometry, dict]:
    preset = SMALL_GEOMETRY if args.small_geometry else FULL_GEOMETRY
    base = fallback or preset
    width = args.width if args.width is not None else base["width"]
    height = args.height if args.height is not None else base["height"]
    return SensorGeometry(width, height), preset


def _validate(args, parser: argparse.ArgumentParser) -> None:
    """Reject bad flag combinations before any file is read or written."""
    cmd = args.command
    if cmd in ("synth-gen", "ingest", "train"):
        outs = [args.out] if cmd != "train" else [args.out_weights, args.out_metrics]
        ins = [args.csv_dir] if cmd == "ingest" else [args.data] if cmd == "train" else []
        resolved = [p.resolve() for p in outs + ins]
        if len(set(resolved)) != len(resolved):
            parser.error("input and output paths must all be distinct")
    if cmd == "synth-gen":
        if args.classes > 65536:
            parser.error("--classes must fit in 16 bits")
        if not 0.0 <= args.noise <= 1.0:
            parser.error("--noise must lie in [0, 1]")
    if cmd == "train":
        if not 0.0 < args.train_frac < 1.0 and not args.no_val:
            parser.error("--train-frac must lie strictly between 0 and 1")
        if args.epochs < 0:
            parser.error("--epochs must be >= 0")
        if args.num_classes < 2:
            parser.error("--num-classes must be >= 2")
        if not 0.0 < args.beta < 1.0:
            parser.error("--beta must lie strictly between 0 and 1")
        if not (0.0 <= args.beta1 < 1.0 and 0.0 <= args.beta2 < 1.0):
            parser.error("--beta1/--beta2 must lie in [0, 1)")
        geometry, preset = _geometry(args)
        try:
            NetworkConfig(
                height=geometry.height, width=geometry.width,
                kernel_size=args.kernel_size or preset["kernel_size"],
                num_classes=args.num_classes,
            )
        except ValueError as exc:
            parser.error(str(exc))
    if cmd in ("train", "eval") and not (args.bin_ms * 1000).is_integer():
        parser.error("--bin-ms must be a whole number of microseconds")


# -- commands ------------------------------------------------------------------


def cmd_synth_gen(args) -> int:
    geometry, preset = _geometry(args)
    duration_us = 1000 * (args.duration_ms or preset["duration_ms"])
    rng = np.random.default_rng(args.seed)
    batches = [
        generate_synthetic(
            c, geometry, duration_us, args.events_per_step, rng,
            num_classes=args.classes, noise=args.noise, subject=k % 65536,
        )
        for c in range(args.classes)
        for k in range(args.per_class)
    ]
    write_dataset(args.out, batches)
    print(f"wrote {len(batches)} batches to {args.out}")
    return 0


def cmd_ingest(args) -> int:
    geometry, _ = _geometry(args)
    if not args.csv_dir.is_dir():
        raise FileNotFoundError(f"{args.csv_dir} is not a directory")
    files = sorted(p for p in args.csv_dir.iterdir() if CSV_NAME.match(p.name))
    if not files:
        raise ValueError(f"no <subject>_<label>.csv files in {args.csv_dir}")
    rng = np.random.default_rng(args.seed)
    out: list[EventBatch] = []
    for path in files:
        subject, label = (int(g) for g in CSV_NAME.match(path.name).groups())
        with open(path, newline="") as fh:
            events = parse_event_csv(fh, geometry, source=str(path))
        batches = slice_into_batches(events, args.window_ms * 1000, label, subject)
        if args.sample_k > len(batches):
            raise ValueError(
                f"{path}: only {len(batches)} batches of {args.window_ms} ms, "
                f"cannot sample {args.sample_k}"
            )
        out.extend(sample_batches(batches, args.sample_k, rng))
    write_dataset(args.out, out)
    print(f"wrote {len(out)} batches from {len(files)} recordings to {args.out}")
    return 0


def _time_steps(batches: Sequence[EventBatch], bin_us: int) -> int:
    steps = {num_bins(b.duration, bin_us) for b in batches}
    if len(steps) != 1:
        raise ValueError(f"batches bin to differing step counts {sorted(steps)}")
    return steps.pop()


def cmd_train(args) -> int:
    geometry, preset = _geometry(args)
    mode = EncodingMode(args.encoding)
    bin_us = int(args.bin_ms * 1000)
    batches = read_dataset(args.data)
    if not batches:
        raise ValueError(f"{args.data} holds no batches")
    if max(b.label for b in batches) >= args.num_classes:
        raise ValueError(f"dataset labels exceed --num-classes {args.num_classes}")
    lif = LifParams(args.beta, args.threshold, Reset(args.reset))
    net = NetworkConfig(
        in_channels=mode.channels,
        height=geometry.height,
        width=geometry.width,
        time_steps=_time_steps(batches, bin_us),
        kernel_size=args.kernel_size or preset["kernel_size"],
        num_classes=args.num_classes,
        hidden_lif=(lif, lif, lif),
        output_lif=lif,
        surrogate=SurrogateSpec(args.slope),
    )
    # children 0 and 1 of SeedSequence(seed) seed train()'s init and shuffle
    split_rng = np.random.default_rng(np.random.SeedSequence(args.seed).spawn(3)[2])
    if args.no_val:
        train_b, val_b = list(batches), []
    else:
        train_b, val_b = split_train_val(batches, args.train_frac, split_rng)
    if not train_b:
        raise ValueError("training split is empty")
    cfg = TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        seed=args.seed,
        targets=LossTargets(),
        adam=AdamParams(args.lr, args.beta1, args.beta2),
    )

    def progress(row):
        print(f"epoch {row.epoch} iter {row.iteration} loss {row.train_loss:.6f} acc {row.train_accuracy:.4f}")

    weights, history = train(
        FrameSet(train_b, bin_us, mode, geometry),
        cfg,
        net,
        val_samples=FrameSet(val_b, bin_us, mode, geometry) if val_b else None,
        progress=progress,
    )
    save_checkpoint(args.out_weights, net, weights)
    export_metrics(history, args.out_metrics)
    print(f"trained on {len(train_b)} batches, validated on {len(val_b)}; "
          f"wrote {args.out_weights} and {args.out_metrics}")
    return 0


def cmd_eval(args) -> int:
    config, weights = load_checkpoint(args.weights)
    mode = EncodingMode(args.encoding)
    bin_us = int(args.bin_ms * 1000)
    geometry, _ = _geometry(args, fallback={"width": config.width, "height": config.height})
    batches = read_dataset(args.data)
    if not batches:
        raise ValueError(f"{args.data} holds no batches")
    found = {
        "height": geometry.height,
        "width": geometry.width,
        "channels": mode.channels,
        "time steps": _time_steps(batches, bin_us),
    }
    expected = {
        "height": config.height,
        "width": config.width,
        "channels": config.in_channels,
        "time steps": config.time_steps,
    }
    for dim, value in found.items():
        if value != expected[dim]:
            raise ValueError(f"{dim} mismatch: checkpoint expects {expected[dim]}, data gives {value}")
    if max(b.label for b in batches) >= config.num_classes:
        raise ValueError(f"dataset labels exceed the checkpoint's {config.num_classes} classes")
    loss, acc = evaluate(FrameSet(batches, bin_us, mode, geometry), weights, config)
    print(f"loss={loss:.6f} accuracy={acc:.3f}")
    return 0


COMMANDS = {"synth-gen": cmd_synth_gen, "ingest": cmd_ingest, "train": cmd_train, "eval": cmd_eval}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    _validate(args, parser)
    try:
        return COMMANDS[args.command](args)
    except (OSError, ValueError, FloatingPointError) as exc:
        print(f"evcsnn {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
