"""Command-line entry point: ``whar {generate,train,eval,gradcheck,bench,ablate}``.

Exit codes: 0 success, 1 usage or configuration error, 2 check failure,
3 runtime abort (divergence, unreadable dataset or checkpoint).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Optional, Sequence

from .config import ConfigError, RunConfig, assigned_keys, dump_config, load_config
from .data import DatasetFormatError, Splits, generate_synthetic, prepare_splits, read_dataset, write_dataset
from .metrics import count_flops, format_metrics, write_metrics_csv

EXIT_OK, EXIT_USAGE, EXIT_CHECK, EXIT_ABORT = 0, 1, 2, 3
SPLITS = ("train", "val", "test")
RESOLVED = "resolved.cfg"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="config file ([section] / key = value lines)")
    common.add_argument("--seed", type=int, help="overrides train.seed (generate: generate.seed)")

    parser = _Parser(prog="whar", description="Wearable activity recognition network: data, training and analysis.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", parents=[common], help="write synthetic train/val/test .whar files")
    p.add_argument("--out", type=Path, required=True, help="output directory")

    p = sub.add_parser("train", parents=[common], help="train one model with early stopping")
    p.add_argument("--data", type=Path, help="directory with train/val/test .whar files (default: generate in memory)")
    p.add_argument("--out", type=Path, required=True, help="run directory for checkpoints and logs")
    p.add_argument("--resume", action="store_true", help="continue from <out>/last.whck")

    p = sub.add_parser("eval", help="score a checkpoint on one split")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, help="dataset directory (default: regenerate from the checkpoint's config)")
    p.add_argument("--split", choices=SPLITS, default="test")
    p.add_argument("--out", type=Path, help="write metrics CSV here")

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=20, help="random shapes per check")
    p.add_argument("--only", type=lambda s: [v for v in s.split(",") if v], help="comma-separated check names")
    p.add_argument("--out", type=Path, help="write the report here as well")

    p = sub.add_parser("bench", parents=[common], help="latency/params/FLOPs sweep, CFB vs attention fusion")
    p.add_argument("--out", type=Path, help="CSV path (default: print)")
    p.add_argument("--sensors", type=_int_list, help="sweep over N (default: config value)")
    p.add_argument("--channels", type=_int_list, help="sweep over D (default: config value)")
    p.add_argument("--iters", type=int, default=100, help="timed single-sample inferences (>= 100)")
    p.add_argument("--warmup", type=int, default=10)

    p = sub.add_parser("ablate", parents=[common], help="baseline / +MoM / +CFB / full comparison")
    p.add_argument("--data", type=Path, help="dataset directory (default: generate in memory)")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--repeats", type=int, help="seeds per variant (default: train.repeats)")
    return parser


# -- helpers ---------------------------------------------------------------------------

SHAPE_KEYS = ("n_sensors", "n_variables", "seq_len", "n_classes")


def _load(args, seed_target: str = "train") -> RunConfig:
    path = getattr(args, "config", None)
    cfg = load_config(path) if path else RunConfig()
    cfg.explicit = assigned_keys(path.read_text()) if path else set()
    if getattr(args, "seed", None) is not None:
        if seed_target == "generate":
            cfg.generate.seed = args.seed
        else:
            cfg.train.seed = args.seed
    return cfg


def _write_resolved(cfg: RunConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / RESOLVED).write_text(dump_config(cfg))


def _read_splits(data: Path) -> Splits:
    return Splits(*(read_dataset(data / f"{name}.whar") for name in SPLITS))


def _splits_for(cfg: RunConfig, data: Optional[Path]) -> Splits:
    """Normalized splits from a dataset directory, or generated from ``cfg.generate``.

    The model's input shape and class count follow the data unless the config file
    set them, in which case they must agree.
    """
    raw = _read_splits(data) if data is not None else generate_synthetic(cfg.generate)
    splits, _ = prepare_splits(raw)
    found = dict(zip(SHAPE_KEYS, splits.train.dims + (splits.train.n_classes,)))
    explicit = getattr(cfg, "explicit", set())
    for key, value in found.items():
        if f"model.{key}" in explicit and getattr(cfg.model, key) != value:
            raise ConfigError(f"model.{key} = {getattr(cfg.model, key)} but the data has {value}")
        setattr(cfg.model, key, value)
    cfg.model.validate()
    return splits


# -- commands --------------------------------------------------------------------------

def cmd_generate(args) -> int:
    cfg = _load(args, "generate")
    splits = generate_synthetic(cfg.generate)
    args.out.mkdir(parents=True, exist_ok=True)
    for name in SPLITS:
        write_dataset(args.out / f"{name}.whar", getattr(splits, name))
    _write_resolved(cfg, args.out)
    print(f"wrote {', '.join(f'{n}={len(getattr(splits, n))}' for n in SPLITS)} windows to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .model import WharNet
    from .trainer import evaluate, train

    cfg = _load(args)
    cfg.train.validate()
    splits = _splits_for(cfg, args.data)
    _write_resolved(cfg, args.out)
    model = WharNet(cfg.model, seed=cfg.train.seed)

    def report(row):
        print(
            f"epoch {row['epoch']:>3}  loss {row['train_loss']:.4f}  val acc {row['val_acc']:.4f}"
            f"  val macro-F1 {row['val_macro_f1']:.4f}  ({row['seconds']:.1f}s)",
            flush=True,
        )

    result = train(model, splits, cfg, args.out, resume=args.resume, on_epoch=report)
    val = result.best_metrics
    test = evaluate(result.model, splits.test)
    for m in (val, test):
        m.n_params, m.flops = result.model.num_parameters(), count_flops(result.model)
    write_metrics_csv(args.out / "metrics.csv", [("val", val), ("test", test)])
    print(f"best epoch {result.best_epoch} of {result.epochs_run}" + (" (early stop)" if result.stopped_early else ""))
    print(format_metrics(val, "validation (best checkpoint)"))
    print(format_metrics(test, "test"))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .trainer import Checkpoint, evaluate, model_from_checkpoint

    ckpt = Checkpoint.load(args.checkpoint)
    model, cfg = model_from_checkpoint(ckpt)
    cfg.explicit = {f"model.{key}" for key in SHAPE_KEYS}  # fixed by the checkpoint
    splits = _splits_for(cfg, args.data)
    m = evaluate(model, getattr(splits, args.split))
    m.n_params, m.flops = model.num_parameters(), count_flops(model)
    print(format_metrics(m, f"{args.split} ({args.checkpoint}, epoch {ckpt.epoch})"))
    if args.out is not None:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        write_metrics_csv(args.out, [(args.split, m)])
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_gradcheck

    try:
        report = run_gradcheck(args.only, trials=args.trials, seed=args.seed)
    except KeyError as exc:
        raise UsageError(str(exc.args[0])) from None
    text = report.format()
    print(text)
    if args.out is not None:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(report.format(timing=False) + "\n")
    return EXIT_CHECK if report.failures else EXIT_OK


def cmd_bench(args) -> int:
    from .bench import BENCH_FIELDS, MIN_ITERS, bench_rows, write_bench_csv

    cfg = _load(args)
    cfg.model.validate()
    if args.iters < MIN_ITERS:
        raise UsageError(f"--iters must be at least {MIN_ITERS}")
    sensors = args.sensors or [cfg.model.n_sensors]
    channels = args.channels or [cfg.model.mfe.channels]
    rows = bench_rows(cfg.model, sensors, channels, args.iters, args.warmup, cfg.train.seed)
    if args.out is not None:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        write_bench_csv(args.out, rows)
        _write_resolved(cfg, args.out.parent)
    print("  ".join(BENCH_FIELDS))
    for row in rows:
        print("  ".join(f"{row[k]:.1f}" if isinstance(row[k], float) else str(row[k]) for k in BENCH_FIELDS))
    for cfb_row, att_row in zip(rows[::2], rows[1::2]):
        ratio = cfb_row["fusion_flops"] / att_row["fusion_flops"]
        print(f"N={cfb_row['n_sensors']} D={cfb_row['channels']}: fusion FLOPs CFB/attention = {ratio:.3f}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .trainer import run_ablation, write_ablation_csv

    cfg = _load(args)
    cfg.train.validate()
    splits = _splits_for(cfg, args.data)
    repeats = args.repeats if args.repeats is not None else cfg.train.repeats
    if repeats < 1:
        raise UsageError("--repeats must be >= 1")
    cfg.train.repeats = repeats
    _write_resolved(cfg, args.out)
    rows = run_ablation(splits, cfg, repeats, out_dir=args.out / "runs")
    write_ablation_csv(args.out / "ablation.csv", rows)
    print(f"{'variant':<9} {'acc':>7} {'macro-F1':>9} {'median':>7} {'params':>9} {'flops':>11} {'p50 us':>9}")
    for r in rows:
        print(
            f"{r.variant:<9} {r.accuracy:>7.4f} {r.macro_f1:>9.4f} {r.macro_f1_median:>7.4f}"
            f" {r.params:>9} {r.flops:>11} {r.latency_p50_us or 0:>9.1f}"
        )
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "bench": cmd_bench,
    "ablate": cmd_ablate,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    from .trainer import CheckpointError, TrainingDiverged

    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, UsageError) as exc:
        print(f"whar {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDiverged, CheckpointError, DatasetFormatError, FileNotFoundError) as exc:
        print(f"whar {args.command}: aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
