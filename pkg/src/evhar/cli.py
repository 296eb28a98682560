"""Command-line entry point: ``evhar {encode,datagen,train,eval,infer,ablate}``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Every subcommand writes a JSON run manifest before starting work and
rewrites it on exit with the outcome.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import datetime as dt
import json
import logging
import subprocess
import sys
from pathlib import Path

import numpy as np

from . import __version__, datagen
from . import model as M
from .errors import ConfigError, EvharError, LabelError, ShapeError
from .event_codec import ACCUMULATION_MODES, EncoderConfig, EventStream, encode_clip, frame_count, video_to_events
from .formats import read_clip_dir, read_evs1, write_clip_dir
from .training.data import ClipDataset, conform_frames, load_dataset, split_indices
from .training.losses import FocalLossConfig
from .training.optim import OptimizerConfig
from .training.trainer import TrainConfig, Trainer, evaluate, write_confusion

log = logging.getLogger("evhar.cli")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
MANIFEST_NAME = "run_manifest.json"
ABLATE_COLUMNS = ("config", "f1", "accuracy", "best_val_loss", "minutes", "status")
DEFAULT_GRID = (("half-channels", {"channel-mult": 0.5}), ("double-channels", {"channel-mult": 2.0}),
                ("half-frames", {"frames": 5}), ("double-frames", {"frames": 20}))


class UsageError(EvharError):
    pass


def version_string() -> str:
    """``git describe`` of the source tree when available, else ``v<version>``."""
    here = Path(__file__).resolve().parent
    try:
        out = subprocess.run(
            ["git", "describe", "--tags", "--always", "--dirty"],
            cwd=here, capture_output=True, text=True, timeout=5, check=True,
        )
        return f"v{__version__}-g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        return f"v{__version__}"


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


def _jsonable(v):
    if dataclasses.is_dataclass(v):
        return {f.name: _jsonable(getattr(v, f.name)) for f in dataclasses.fields(v)}
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple, frozenset, set)):
        return [_jsonable(x) for x in v]
    if isinstance(v, Path):
        return str(v)
    if isinstance(v, np.generic):
        return v.item()
    return v


class RunManifest:
    """JSON record of one invocation, rewritten atomically as it progresses."""

    def __init__(self, path: Path, subcommand: str, config: dict, seed: int | None, outputs: list):
        self.path = Path(path)
        self.data = {
            "subcommand": subcommand,
            "config": _jsonable(config),
            "seed": seed,
            "version": version_string(),
            "started": _now(),
            "finished": None,
            "status": "running",
            "outputs": [str(o) for o in outputs],
            "results": {},
        }

    def write(self) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        tmp = self.path.with_name(self.path.name + ".tmp")
        tmp.write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n")
        tmp.replace(self.path)

    def finish(self, ok: bool, error: str | None = None) -> None:
        self.data["finished"] = _now()
        self.data["status"] = "success" if ok else "failed"
        if error:
            self.data["error"] = error
        self.write()


def read_manifest(path) -> dict:
    return json.loads(Path(path).read_text())


# ---------------------------------------------------------------------------
# Argument helpers
# ---------------------------------------------------------------------------


def parse_resolution(text: str) -> tuple[int, int]:
    parts = text.lower().replace(",", "x").split("x")
    try:
        vals = tuple(int(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad resolution {text!r}; use HxW or N") from None
    if len(vals) == 1:
        vals = vals * 2
    if len(vals) != 2 or min(vals) < 1:
        raise argparse.ArgumentTypeError(f"bad resolution {text!r}; use HxW or N")
    return vals


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _fractions(text: str) -> tuple[float, float, float]:
    vals = tuple(float(p) for p in text.split(","))
    if len(vals) != 3:
        raise argparse.ArgumentTypeError("split needs three comma-separated fractions")
    return vals


def _add_train_options(p: argparse.ArgumentParser) -> None:
    d, o = TrainConfig(), OptimizerConfig()
    p.add_argument("--data", required=True, help="dataset root (<class>/<sequence>/ clip directories)")
    p.add_argument("--epochs", type=_positive_int, default=d.max_epochs)
    p.add_argument("--batch", type=_positive_int, default=d.batch_size)
    p.add_argument("--lr", type=float, default=o.learning_rate)
    p.add_argument("--wd", type=float, default=o.weight_decay)
    p.add_argument("--gamma", type=float, default=d.gamma)
    p.add_argument("--patience", type=_positive_int, default=d.patience)
    p.add_argument("--channel-mult", type=float, default=1.0)
    p.add_argument("--frames", type=_positive_int, default=None, help="re-downsample clips to this many frames")
    p.add_argument("--res", type=parse_resolution, default=None, help="resize clips to HxW")
    p.add_argument("--attention", action="store_true", help="enable channel attention after the last block")
    p.add_argument("--dropout", type=float, default=M.ModelConfig().dropout_rate)
    p.add_argument("--seed", type=int, default=d.seed)
    p.add_argument("--split", type=_fractions, default=d.split, help="train,val,test fractions")
    p.add_argument("--augment-classes", default=None,
                   help="comma-separated class names for heavy augmentation (default: Eating, Washing up)")
    p.add_argument("--workers", type=_positive_int, default=None, help="batch prefetch workers (EVHAR_THREADS)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="evhar", description="Event-camera action recognition toolkit.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("encode", help="encode an event file or intensity video into a clip directory")
    p.add_argument("--input", required=True, help=".evs1 event file, or a directory of frame_*.pgm video frames")
    p.add_argument("--output", required=True)
    p.add_argument("--fps", type=float, default=30.0, help="event-frame accumulation rate")
    p.add_argument("--frames", type=_positive_int, default=10)
    p.add_argument("--res", type=parse_resolution, default=(128, 128))
    p.add_argument("--mode", choices=ACCUMULATION_MODES, default="polarity_sum")
    p.add_argument("--threshold", type=float, default=0.2, help="DVS log-contrast threshold (video input)")
    p.add_argument("--video-fps", type=float, default=None, help="frame rate of a video input (default: meta.txt)")
    p.add_argument("--manifest", default=None)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("datagen", help="generate the synthetic moving-blob dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--per-class", type=int, default=datagen.SynthConfig().samples_per_class)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=int, default=datagen.SynthConfig().noise_events_per_frame,
                   help="noise events per video frame")
    p.add_argument("--res", type=parse_resolution, default=(128, 128))
    p.add_argument("--frames", type=_positive_int, default=10)
    p.add_argument("--speed-scale", type=float, default=1.0)
    p.add_argument("--save-events", action="store_true", help="also write events.evs1 per sequence")
    p.set_defaults(func=cmd_datagen)

    p = sub.add_parser("train", help="train a model and evaluate it on the held-out split")
    _add_train_options(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "val", "test", "all"), default="test")
    p.add_argument("--out", default=None, help="output directory (default: <checkpoint dir>/eval)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="classify one sequence")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sequence", required=True, help="clip directory or .evs1 event file")
    p.add_argument("--out", default=None, help="output directory (default: <checkpoint dir>/infer)")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("ablate", help="train the baseline and each grid variant, write summary.csv")
    _add_train_options(p)
    p.add_argument("--grid", default=None, help="grid file, one 'name: key=value ...' line per variant")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)
    return parser


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def _load_stream_or_video(args) -> EventStream:
    path = Path(args.input)
    if path.is_dir():
        frames, meta = read_clip_dir(path)
        fps = args.video_fps or float(meta.get("fps", 0) or 0)
        if not fps > 0:
            raise ConfigError(f"{path}: video frame rate unknown; pass --video-fps")
        ts = np.round(np.arange(len(frames)) * (1e6 / fps)).astype(np.int64)
        return video_to_events(list(frames.astype(np.float64)), ts, EncoderConfig(dvs_threshold=args.threshold))
    return read_evs1(path)


def cmd_encode(args) -> int:
    config = EncoderConfig(args.fps, args.frames, tuple(args.res), args.threshold, args.mode)
    out = Path(args.output)
    manifest = RunManifest(Path(args.manifest or f"{out}.run.json"), "encode",
                           {"input": args.input, "output": out, "encoder": config}, None, [out])
    manifest.write()
    try:
        stream = _load_stream_or_video(args)
        if len(stream) == 0:
            print(f"warning: {args.input} holds no events; writing all-zero frames", file=sys.stderr)
        clip = encode_clip(stream, config)[0]
        write_clip_dir(out, clip, config.accumulation_rate * config.clip_length / _span_frames(stream, config))
        density = (clip > 0).mean(axis=(1, 2))
        manifest.data["results"] = {"events": len(stream), "frames": len(clip)}
        print(f"events {len(stream)}  frames {len(clip)}  resolution {clip.shape[1]}x{clip.shape[2]}")
        print("density " + " ".join(f"{d:.4f}" for d in density))
    except BaseException as exc:
        manifest.finish(False, str(exc))
        raise
    manifest.finish(True)
    return EXIT_OK


def _span_frames(stream: EventStream, config: EncoderConfig) -> int:
    """Number of accumulated event frames before downsampling."""
    if len(stream) == 0:
        return config.clip_length
    return frame_count(int(stream.t[-1] - stream.t[0]), config.accumulation_rate)


def cmd_datagen(args) -> int:
    config = datagen.SynthConfig(
        samples_per_class=args.per_class,
        resolution=tuple(args.res),
        speed_scale=args.speed_scale,
        noise_events_per_frame=args.noise,
        seed=args.seed,
        clip_length=args.frames,
        save_events=args.save_events,
    )
    out = Path(args.out)
    # Kept beside the tree so two identical runs produce identical trees.
    manifest = RunManifest(Path(f"{out}.run.json"), "datagen", {"synth": config, "out": out}, config.seed, [out])
    manifest.write()
    try:
        datagen.generate(out, config)
        summary = datagen.describe(out)
        manifest.data["results"] = {"counts": summary.counts, "density": summary.density}
        print(summary.format())
    except BaseException as exc:
        manifest.finish(False, str(exc))
        raise
    manifest.finish(True)
    return EXIT_OK


def _configs_from_args(args, frames: int, resolution, num_classes: int, overrides: dict | None = None):
    o = dict(overrides or {})
    model_cfg = M.ModelConfig(
        num_classes=num_classes,
        clip_length=frames,
        input_resolution=tuple(resolution),
        dropout_rate=args.dropout,
        attention_enabled=bool(o.get("attention", args.attention)),
        channel_multiplier=float(o.get("channel-mult", args.channel_mult)),
    )
    augment = None if args.augment_classes is None else tuple(
        c.strip() for c in args.augment_classes.split(",") if c.strip()
    )
    train_cfg = TrainConfig(
        batch_size=args.batch,
        max_epochs=args.epochs,
        patience=args.patience,
        split=tuple(args.split),
        seed=args.seed,
        gamma=args.gamma,
        optimizer=OptimizerConfig(learning_rate=args.lr, weight_decay=args.wd),
        augmentation_classes=augment,
        workers=args.workers,
    )
    return model_cfg, train_cfg


def _run_training(dataset: ClipDataset, model_cfg, train_cfg, out: Path):
    trainer = Trainer(dataset, model_cfg, train_cfg, out)
    _, report = trainer.fit()
    return trainer, report


def _report_results(report) -> dict:
    res = {
        "best_epoch": report.best_epoch,
        "best_val_f1": report.best_val_f1,
        "best_val_loss": report.best_val_loss,
        "epochs_run": len(report.history),
        "minutes": report.minutes,
        "parameter_count": report.parameter_count,
    }
    if report.test is not None:
        res["test_accuracy"] = report.test.accuracy
        res["test_f1"] = report.test.weighted_f1
    return res


def cmd_train(args) -> int:
    dataset = load_dataset(args.data, frames=args.frames, resolution=args.res)
    model_cfg, train_cfg = _configs_from_args(args, dataset.frames, dataset.resolution, dataset.num_classes)
    out = Path(args.out)
    outputs = [out / "best.ckpt", out / "training_log.csv", out / "confusion.csv"]
    manifest = RunManifest(out / MANIFEST_NAME, "train",
                           {"data": args.data, "model": model_cfg, "train": train_cfg}, args.seed, outputs)
    manifest.write()
    try:
        _, report = _run_training(dataset, model_cfg, train_cfg, out)
        manifest.data["results"] = _report_results(report)
    except BaseException as exc:
        manifest.finish(False, str(exc))
        raise
    manifest.finish(True)
    if report.test is not None:
        print(f"test accuracy {report.test.accuracy:.4f}  weighted F1 {report.test.weighted_f1:.4f}")
    print(f"parameters {report.parameter_count}  best epoch {report.best_epoch}  minutes {report.minutes:.2f}")
    return EXIT_OK


def _class_names(meta: dict, k: int) -> list[str]:
    names = str(meta.get("class_names", "")).split("|") if meta.get("class_names") else []
    return names if len(names) == k else [f"class{i}" for i in range(k)]


def cmd_eval(args) -> int:
    params, config, meta = M.load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.data, frames=config.clip_length, resolution=config.input_resolution)
    if dataset.num_classes != config.num_classes:
        raise ShapeError(f"checkpoint has {config.num_classes} classes, dataset {dataset.num_classes}")
    names = _class_names(meta, config.num_classes)
    if names != [f"class{i}" for i in range(config.num_classes)] and names != dataset.class_names:
        raise LabelError(f"dataset classes {dataset.class_names} differ from checkpoint classes {names}")
    out = Path(args.out) if args.out else Path(args.checkpoint).parent / "eval"
    manifest = RunManifest(out / MANIFEST_NAME, "eval",
                           {"checkpoint": args.checkpoint, "data": args.data, "split": args.split, "model": config},
                           meta.get("split_seed"), [out / "confusion.csv"])
    manifest.write()
    try:
        if args.split == "all":
            indices = np.arange(len(dataset))
        else:
            fractions = tuple(float(f) for f in str(meta.get("split", "0.7,0.15,0.15")).split(","))
            parts = split_indices(dataset.labels, fractions, int(meta.get("split_seed", 0)))
            indices = parts[("train", "val", "test").index(args.split)]
        alpha = tuple(float(a) for a in str(meta["alpha"]).split(",")) if "alpha" in meta else ()
        loss_config = FocalLossConfig(float(meta.get("gamma", 2.0)), alpha)
        ev = evaluate(params, config, dataset, indices, loss_config, args.split)
        out.mkdir(parents=True, exist_ok=True)
        write_confusion(out / "confusion.csv", ev.metrics.confusion)
        manifest.data["results"] = {"accuracy": ev.metrics.accuracy, "weighted_f1": ev.metrics.weighted_f1,
                                    "loss": ev.loss, "samples": int(len(indices))}
    except BaseException as exc:
        manifest.finish(False, str(exc))
        raise
    manifest.finish(True)
    print(f"accuracy {ev.metrics.accuracy:.6f}  weighted F1 {ev.metrics.weighted_f1:.6f}  samples {len(indices)}")
    return EXIT_OK


def load_sequence(path, config: M.ModelConfig) -> np.ndarray:
    """A float32 ``(1, 1, T, H, W)`` batch from a clip directory or ``.evs1`` file."""
    path = Path(path)
    if path.is_dir():
        frames, _ = read_clip_dir(path)
        frames = conform_frames(frames, config.clip_length, config.input_resolution)
        return (frames.astype(np.float32) / np.float32(255.0))[None, None]
    enc = EncoderConfig(clip_length=config.clip_length, target_resolution=config.input_resolution)
    return encode_clip(read_evs1(path), enc)[None]


def cmd_infer(args) -> int:
    params, config, meta = M.load_checkpoint(args.checkpoint)
    names = _class_names(meta, config.num_classes)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent / "infer"
    manifest = RunManifest(out / MANIFEST_NAME, "infer",
                           {"checkpoint": args.checkpoint, "sequence": args.sequence, "model": config}, None, [])
    manifest.write()
    try:
        probs = M.predict_proba(params, config, load_sequence(args.sequence, config))[0]
        best = int(np.argmax(probs))
        manifest.data["results"] = {"class": names[best], "probabilities": dict(zip(names, probs.tolist()))}
    except BaseException as exc:
        manifest.finish(False, str(exc))
        raise
    manifest.finish(True)
    for name, p in zip(names, probs):
        print(f"{name}\t{p:.6f}")
    print(f"prediction\t{names[best]}")
    return EXIT_OK


def parse_grid(text: str) -> list[tuple[str, dict]]:
    """``name: key=value ...`` lines; ``#`` starts a comment. Keys: channel-mult, frames, attention."""
    rows = []
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        name, sep, rest = line.partition(":")
        if not sep:
            name, rest = line.replace(" ", "_"), line
        opts = {}
        for item in rest.split():
            key, eq, value = item.partition("=")
            if not eq or key not in ("channel-mult", "frames", "attention"):
                raise ConfigError(f"bad grid entry {item!r}")
            opts[key] = int(value) if key in ("frames", "attention") else float(value)
        if not opts:
            raise ConfigError(f"grid line {raw!r} sets nothing")
        rows.append((name.strip(), opts))
    return rows


def cmd_ablate(args) -> int:
    grid = parse_grid(Path(args.grid).read_text()) if args.grid else list(DEFAULT_GRID)
    names = [n for n, _ in grid]
    if "baseline" in names or len(set(names)) != len(names):
        raise ConfigError("grid names must be unique and not 'baseline'")
    rows = [("baseline", {})] + grid
    out = Path(args.out)
    manifest = RunManifest(out / MANIFEST_NAME, "ablate",
                           {"data": args.data, "grid": rows, "args": {k: v for k, v in vars(args).items() if k != "func"}},
                           args.seed, [out / "summary.csv"] + [out / n for n, _ in rows])
    manifest.write()
    results = []
    datasets: dict = {}
    try:
        for name, opts in rows:
            try:
                frames = int(opts.get("frames", args.frames or 0)) or None
                if frames not in datasets:
                    datasets[frames] = load_dataset(args.data, frames=frames, resolution=args.res)
                ds = datasets[frames]
                model_cfg, train_cfg = _configs_from_args(args, ds.frames, ds.resolution, ds.num_classes, opts)
                _, report = _run_training(ds, model_cfg, train_cfg, out / name)
                results.append((name, report.test.weighted_f1, report.test.accuracy,
                                report.best_val_loss, report.minutes, "ok"))
            except (EvharError, OSError, ValueError) as exc:
                log.error("ablation row %s failed: %s", name, exc)
                results.append((name, float("nan"), float("nan"), float("nan"), float("nan"), f"failed: {exc}"))
            write_summary(out / "summary.csv", results)
        failed = [r[0] for r in results if r[5] != "ok"]
        manifest.data["results"] = {"rows": len(results), "failed": failed}
    except BaseException as exc:
        manifest.finish(False, str(exc))
        raise
    manifest.finish(not failed, f"rows failed: {failed}" if failed else None)
    for r in results:
        print(f"{r[0]:<18} f1 {r[1]:.4f}  acc {r[2]:.4f}  val_loss {r[3]:.4f}  min {r[4]:.2f}  {r[5]}")
    return EXIT_RUNTIME if failed else EXIT_OK


def write_summary(path: Path, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ABLATE_COLUMNS)
        for name, f1, acc, loss, minutes, status in rows:
            w.writerow([name, repr(float(f1)), repr(float(acc)), repr(float(loss)), repr(float(minutes)), status])


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (ConfigError, LabelError, ShapeError, UsageError) as exc:
        print(f"evhar {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (EvharError, OSError, ValueError) as exc:
        print(f"evhar {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
