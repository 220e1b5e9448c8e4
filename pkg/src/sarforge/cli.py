"""Command-line entry point: generate, train, evaluate, predict.

Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.
Every command writes a plain-text ``key=value`` manifest next to its output.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import InvalidSplitError, read_dataset, split, stack, write_dataset
from .emfield import DegenerateGridError
from .evaluate import emit_report, evaluate_split, to_gray8, write_pgm
from .generate import GenerationConfig, generate, resolve_threads
from .neuralnet.checkpoint import load_checkpoint, save_checkpoint
from .neuralnet.optim import PRESETS, config_to_dict, get_preset
from .neuralnet.train import TrainingDivergence, predict, train, write_history
from .neuralnet.unet import UNetConfig
from .phantom import (
    CLASS_NAMES,
    FIELD_FREQUENCIES,
    TISSUE_TABLE_VERSION,
    InvalidSpecError,
    NoValidPlacementError,
    PhantomSpec,
    coil_preset,
    load_phantom_spec,
)

log = logging.getLogger("sarforge")


class UsageError(Exception):
    pass


def _positions(text):
    parts = text.lower().split("x")
    if len(parts) not in (2, 3):
        raise argparse.ArgumentTypeError(f"expected AxB or AxBxSeeds, got {text!r}")
    try:
        values = [int(p) for p in parts]
    except ValueError:
        raise argparse.ArgumentTypeError(f"non-integer count in {text!r}") from None
    if values[0] < 1 or values[1] < 1:
        raise argparse.ArgumentTypeError("placement counts must be >= 1")
    return tuple(values)


def _flatten(prefix, mapping):
    out = {}
    for k, v in mapping.items():
        key = f"{prefix}.{k}" if prefix else k
        if isinstance(v, dict):
            out.update(_flatten(key, v))
        elif isinstance(v, (tuple, list)):
            out[key] = ",".join(repr(x) if isinstance(x, float) else str(x) for x in v)
        elif isinstance(v, float):
            out[key] = repr(v)
        else:
            out[key] = str(v)
    return out


def write_manifest(path, command, **sections):
    """Write sorted ``key=value`` lines; nested dicts become dotted keys."""
    entries = {"command": command, "version": __version__}
    entries.update(_flatten("", sections))
    lines = [f"{k}={entries[k]}" for k in sorted(entries)]
    Path(path).write_text("\n".join(lines) + "\n")
    return Path(path)


def _existing_file(path, what):
    if path is None:
        raise UsageError(f"--{what} is required")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {p}")
    return p


def _output_dir(path):
    if path is None:
        raise UsageError("--out is required")
    p = Path(path)
    if p.exists() and not p.is_dir():
        raise UsageError(f"--out {p} exists and is not a directory")
    p.mkdir(parents=True, exist_ok=True)
    return p


def _output_file(path):
    if path is None:
        raise UsageError("--out is required")
    p = Path(path)
    if p.is_dir():
        raise UsageError(f"--out {p} is a directory")
    if not p.parent.exists():
        raise UsageError(f"output directory {p.parent} does not exist")
    return p


def cmd_generate(args):
    out = _output_file(args.out)
    nx, ny, *rest = args.positions
    n_seeds = rest[0] if rest else 8
    if n_seeds < 1:
        raise UsageError("at least one phantom seed is required (AxBxSeeds with Seeds >= 1)")
    spec = PhantomSpec()
    if args.phantom_config:
        spec = load_phantom_spec(_existing_file(args.phantom_config, "phantom-config"))
    if args.grid is not None:
        spec = replace(spec, grid_size=args.grid)
    spec = replace(spec, frequency=FIELD_FREQUENCIES[args.field]).validate()
    cfg = GenerationConfig(
        field_tag=args.field,
        phantom_seeds=tuple(range(args.seed, args.seed + n_seeds)),
        counts=(nx, ny),
        range_x=tuple(args.range_x),
        range_y=tuple(args.range_y),
        spec=spec,
    )
    threads = resolve_threads(args.threads)
    result = generate(cfg, threads=threads)
    if not result.samples:
        raise RuntimeError("every sample was rejected; nothing to write")
    write_dataset(result.samples, out)
    print(f"placements considered {result.placements_considered}, built {len(result.samples)}, "
          f"rejected {len(result.rejected)}")
    for seed, placement, reason in result.rejected:
        log.info("rejected seed %d at (%.4f, %.4f): %s", seed, placement.offset_x, placement.offset_y, reason)
    write_manifest(
        f"{out}.manifest", "generate",
        field=args.field, phantom_seeds=list(cfg.phantom_seeds), positions=[nx, ny],
        range_x=list(cfg.range_x), range_y=list(cfg.range_y), threads=threads, out=str(out),
        phantom={k: v for k, v in asdict(spec).items() if k != "tissue_overrides"},
        tissue=_tissue_entries(spec), coil=asdict(coil_preset(args.field)),
        placements_considered=result.placements_considered,
        samples_built=len(result.samples), samples_rejected=len(result.rejected),
    )
    return 0


def _tissue_entries(spec):
    out = {"table_version": TISSUE_TABLE_VERSION}
    for p in spec.properties()[1:]:
        out[CLASS_NAMES[p.class_id]] = {
            "conductivity": p.conductivity, "density": p.density, "rel_permittivity": p.rel_permittivity,
        }
    return out


def _load_split(path, seed):
    samples = read_dataset(path)
    try:
        return samples, split(len(samples), seed=seed)
    except InvalidSplitError as exc:
        raise UsageError(str(exc)) from None


def cmd_train(args):
    data = _existing_file(args.dataset, "dataset")
    out = _output_dir(args.out)
    opt = get_preset(args.preset, args.epochs)
    arch = UNetConfig(depth=args.depth, base_channels=args.base_channels)
    samples, parts = _load_split(data, args.seed)
    try:
        arch.check_input(*samples[0].input.shape)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    manifest = dict(
        dataset=str(data), preset=args.preset, seed=args.seed, out=str(out),
        arch=asdict(arch), optimizer=config_to_dict(opt),
        split={"train": len(parts.train), "val": len(parts.val), "test": len(parts.test)},
    )
    write_manifest(out / "manifest.txt", "train", **manifest)
    x_tr, y_tr = stack(samples, parts.train)
    x_va, y_va = stack(samples, parts.val)
    try:
        result = train(x_tr, y_tr, x_va, y_va, arch, opt, seed=args.seed)
    except TrainingDivergence as exc:
        write_history(exc.history, out / "history.csv")
        raise
    write_history(result.history, out / "history.csv")
    save_checkpoint(result.final, out / "final.sarw")
    save_checkpoint(result.best, out / "best.sarw")
    if result.history:
        last = result.history[-1]
        print(f"final train_rmse {last.train_rmse:.5f} val_rmse {last.val_rmse:.5f} "
              f"(best checkpoint from epoch {result.best.epoch})")
    else:
        print("no epochs run; checkpoints hold the initial weights")
    return 0


def _load_model(path, shape):
    ckpt = load_checkpoint(_existing_file(path, "checkpoint"))
    try:
        ckpt.arch.check_input(*shape)
    except ValueError as exc:
        raise RuntimeError(f"checkpoint {ckpt.arch} cannot take dataset rasters of shape {shape}: {exc}") from None
    if ckpt.arch.in_channels != 1:
        raise RuntimeError(f"checkpoint expects {ckpt.arch.in_channels} input channels, dataset has 1")
    return ckpt


def cmd_evaluate(args):
    data = _existing_file(args.dataset, "dataset")
    _existing_file(args.checkpoint, "checkpoint")
    out = _output_dir(args.out)
    samples, parts = _load_split(data, args.seed)
    ckpt = _load_model(args.checkpoint, samples[0].input.shape)
    report, preds = evaluate_split(
        lambda x: predict(ckpt.params, ckpt.arch, x), samples, parts.test, mask_only=args.mask_only_metrics,
    )
    emit_report(report, samples, preds, out, image_ids=parts.test[: args.images])
    banner = report.banner()
    print(banner)
    write_manifest(
        out / "manifest.txt", "evaluate",
        dataset=str(data), checkpoint=str(args.checkpoint), seed=args.seed, out=str(out),
        mask_only_metrics=args.mask_only_metrics, test_samples=len(parts.test),
        mean_rmse_pct=report.mean_rmse_pct, max_rmse_pct=report.max_rmse_pct,
        mean_ssim=report.mean_ssim, min_ssim=report.min_ssim, passes=report.passes,
    )
    return 0


def cmd_predict(args):
    data = _existing_file(args.dataset, "dataset")
    _existing_file(args.checkpoint, "checkpoint")
    out = _output_file(args.out)
    samples = read_dataset(data)
    if not 0 <= args.sample < len(samples):
        raise RuntimeError(f"sample id {args.sample} out of range for {len(samples)} samples")
    ckpt = _load_model(args.checkpoint, samples[0].input.shape)
    pred = predict(ckpt.params, ckpt.arch, samples[args.sample].input[None])[0]
    if out.suffix == ".npy":
        np.save(out, pred.astype(np.float32))
    else:
        write_pgm(out, to_gray8(np.clip(pred, 0.0, 1.0), 1.0))
    write_manifest(f"{out}.manifest", "predict", dataset=str(data), checkpoint=str(args.checkpoint),
                   sample=args.sample, out=str(out), peak=float(pred.max()))
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="sarforge", description="SAR map prediction from B1 maps.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="simulate a SARD dataset")
    g.add_argument("--field", choices=sorted(FIELD_FREQUENCIES), default="3T")
    g.add_argument("--grid", type=int, help="cells per side (default from phantom config, 64)")
    g.add_argument("--positions", type=_positions, default=(8, 8, 8), metavar="AxB[xSeeds]")
    g.add_argument("--range-x", type=float, nargs=2, default=(-0.01, 0.01), metavar=("MIN", "MAX"))
    g.add_argument("--range-y", type=float, nargs=2, default=(-0.01, 0.01), metavar=("MIN", "MAX"))
    g.add_argument("--seed", type=int, default=0, help="first phantom seed")
    g.add_argument("--phantom-config", help="key=value phantom spec file")
    g.add_argument("--threads", type=int)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a U-Net on a dataset")
    t.add_argument("--dataset", required=True)
    t.add_argument("--preset", choices=sorted(PRESETS), default="adam-3t")
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int, default=0, help="split, init and shuffle seed")
    t.add_argument("--depth", type=int, default=3)
    t.add_argument("--base-channels", type=int, default=16)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="score a checkpoint on the test split")
    e.add_argument("--dataset", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--seed", type=int, default=0, help="split seed used for training")
    e.add_argument("--mask-only-metrics", action="store_true")
    e.add_argument("--images", type=int, default=3, help="test samples to render as PGM triplets")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="predict the SAR map of one sample")
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sample", type=int, required=True)
    p.add_argument("--out", required=True, help=".npy for raw float32, otherwise PGM")
    p.set_defaults(func=cmd_predict)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(message)s", stream=sys.stderr)
    if getattr(args, "epochs", None) is not None and args.epochs < 0:
        parser.error("--epochs must be >= 0")
    if getattr(args, "threads", None) is not None and args.threads < 1:
        parser.error("--threads must be >= 1")
    try:
        return args.func(args)
    except (UsageError, InvalidSpecError, NoValidPlacementError, DegenerateGridError) as exc:
        print(f"sarforge {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (RuntimeError, ValueError, OSError) as exc:
        print(f"sarforge {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
