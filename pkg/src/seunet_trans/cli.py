"""Command-line front end: train, eval, predict, gradcheck, synth.

Options may come from a plain ``key=value`` config file (``--config``);
explicit flags override config values, and unknown config keys are rejected.
Exit codes: 0 success, 1 usage error, 2 validation/test failure, 3 I/O error.

Given one seed, repeated runs write bitwise-identical logs, checkpoints, and
reports: nothing time- or host-dependent enters the artifacts.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from . import checks, figures
from .arch import SeUNetTrans, build_variant, ENCODER_PRESETS, VARIANTS
from .checkpoint import CheckpointError, load_checkpoint
from .data import (
    DataError,
    ManifestNotFoundError,
    generate_synthetic,
    load_dataset,
    load_manifest,
)
from .metrics import report_keyvalues, write_report
from .tensor import AutodiffError, ShapeError, Tensor
from .train import Adam, EpochLog, evaluate_model, train_loop

__all__ = ["main", "UsageError"]


class UsageError(Exception):
    """Bad command line or config file."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# option name -> (type, default); None defaults mean "required"
_OPTIONS: dict[str, dict[str, tuple]] = {
    "train": {
        "variant": (str, "M"),
        "manifest": (str, None),
        "size": (int, 256),
        "epochs": (int, 25),
        "batch": (int, 8),
        "lr": (float, 1e-4),
        "weight_decay": (float, 1e-4),
        "seed": (int, 0),
        "widths": (str, "desk"),
        "out": (str, "runs/train"),
        "checkpoint_dir": (str, ""),
        "checkpoint_every": (int, 10),
        "metrics_every": (int, 1),
    },
    "eval": {
        "checkpoint": (str, None),
        "manifest": (str, None),
        "size": (int, 256),
        "batch": (int, 8),
        "threshold": (float, 0.5),
        "out": (str, "runs/eval"),
    },
    "predict": {
        "checkpoint": (str, None),
        "manifest": (str, None),
        "size": (int, 256),
        "batch": (int, 8),
        "threshold": (float, 0.5),
        "out": (str, "runs/predict"),
    },
    "gradcheck": {
        "tolerance": (float, 0.0),  # floor: checks run at max(own threshold, this)
        "seeds": (int, 20),
        "checks": (str, ""),
    },
    "synth": {
        "n": (int, 8),
        "size": (int, 64),
        "seed": (int, 0),
        "out": (str, None),
    },
}


@dataclass
class RunConfig:
    command: str
    values: dict

    def __getattr__(self, name):
        try:
            return self.values[name]
        except KeyError:
            raise AttributeError(name)


def _read_config_file(path: str) -> dict[str, str]:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {path}")
    values: dict[str, str] = {}
    for lineno, line in enumerate(p.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {line!r}")
        values[key.strip()] = value.strip()
    return values


def _build_config(command: str, args: argparse.Namespace) -> RunConfig:
    options = _OPTIONS[command]
    config_values: dict[str, str] = {}
    if args.config:
        config_values = _read_config_file(args.config)
        unknown = set(config_values) - set(options)
        if unknown:
            raise UsageError(f"unknown config keys for {command}: {', '.join(sorted(unknown))}")
    merged: dict = {}
    for name, (typ, default) in options.items():
        flag_value = getattr(args, name)
        if flag_value is not None:
            merged[name] = flag_value
        elif name in config_values:
            try:
                merged[name] = typ(config_values[name])
            except ValueError as exc:
                raise UsageError(f"config key {name}: {exc}")
        elif default is not None:
            merged[name] = default
        else:
            raise UsageError(f"missing required option --{name.replace('_', '-')}")
    cfg = RunConfig(command=command, values=merged)
    _validate_config(cfg)
    return cfg


def _validate_config(cfg: RunConfig) -> None:
    v = cfg.values
    if "variant" in v and v["variant"] not in VARIANTS:
        raise UsageError(f"variant must be one of {sorted(VARIANTS)}, got {v['variant']!r}")
    if "widths" in v and v["widths"] not in ENCODER_PRESETS:
        raise UsageError(f"widths must be one of {sorted(ENCODER_PRESETS)}, got {v['widths']!r}")
    for key in ("epochs", "batch", "n", "seeds", "checkpoint_every"):
        if key in v and v[key] < 1:
            raise UsageError(f"{key} must be >= 1, got {v[key]}")
    if "seed" in v and v["seed"] < 0:
        raise UsageError(f"seed must be >= 0, got {v['seed']}")
    if "size" in v and cfg.command in ("train", "eval", "predict"):
        if v["size"] < 16 or v["size"] % 16:
            raise UsageError(f"size must be a positive multiple of 16, got {v['size']}")
    elif "size" in v and v["size"] < 8:
        raise UsageError(f"size must be >= 8, got {v['size']}")
    if "lr" in v and v["lr"] <= 0:
        raise UsageError(f"lr must be positive, got {v['lr']}")
    if "weight_decay" in v and v["weight_decay"] < 0:
        raise UsageError(f"weight_decay must be >= 0, got {v['weight_decay']}")
    if "threshold" in v and not 0.0 <= v["threshold"] <= 1.0:
        raise UsageError(f"threshold must lie in [0, 1], got {v['threshold']}")
    if "tolerance" in v and v["tolerance"] < 0:
        raise UsageError(f"tolerance must be non-negative, got {v['tolerance']}")
    if "metrics_every" in v and v["metrics_every"] < 0:
        raise UsageError(f"metrics_every must be >= 0, got {v['metrics_every']}")


def _make_parser() -> _Parser:
    parser = _Parser(prog="seunet", description=__doc__)
    sub = parser.add_subparsers(dest="command")
    help_text = {
        "train": "fit a model on a training manifest",
        "eval": "score a checkpoint against a test manifest",
        "predict": "write probability maps and masks for a manifest",
        "gradcheck": "run the finite-difference gradient suite",
        "synth": "generate a synthetic ellipse dataset",
    }
    for command, options in _OPTIONS.items():
        p = sub.add_parser(command, help=help_text[command])
        p.add_argument("--config", default=None, help="key=value config file")
        for name, (typ, _default) in options.items():
            p.add_argument(f"--{name.replace('_', '-')}", dest=name, type=typ, default=None)
    return parser


# ---------------------------------------------------------------------------
# command handlers
# ---------------------------------------------------------------------------


def _log_tsv(logs: list[EpochLog]) -> str:
    lines = ["epoch\tloss\tmDC\tmIoU\tmPre\tmRec"]
    for log in logs:
        metric = (
            f"{log.mdc:.6f}\t{log.miou:.6f}\t{log.mpre:.6f}\t{log.mrec:.6f}"
            if log.mdc is not None
            else "\t\t\t"
        )
        lines.append(f"{log.epoch}\t{log.loss:.6f}\t{metric}")
    return "\n".join(lines) + "\n"


def _cmd_train(cfg: RunConfig) -> int:
    manifest = load_manifest(cfg.manifest, target_size=cfg.size, split="train")
    samples = load_dataset(manifest)
    widths, bottleneck = ENCODER_PRESETS[cfg.widths]
    spec = build_variant(cfg.variant, encoder_widths=widths + (bottleneck,))
    model = SeUNetTrans(spec, seed=cfg.seed)
    optimizer = Adam(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    out_dir = Path(cfg.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_dir = Path(cfg.checkpoint_dir) if cfg.checkpoint_dir else out_dir / "checkpoints"
    logs = train_loop(
        model,
        samples,
        epochs=cfg.epochs,
        batch_size=cfg.batch,
        seed=cfg.seed,
        optimizer=optimizer,
        checkpoint_dir=ckpt_dir,
        checkpoint_every=cfg.checkpoint_every,
        metrics_every=cfg.metrics_every,
        log_fn=print,
    )
    (out_dir / "log.tsv").write_text(_log_tsv(logs))
    figures.save_loss_curve(logs, out_dir / "loss_curve.png")
    print(f"wrote {out_dir / 'log.tsv'} and checkpoints in {ckpt_dir}")
    return 0


def _load_eval_inputs(cfg: RunConfig):
    model, _optimizer, _meta = load_checkpoint(cfg.checkpoint)
    manifest = load_manifest(cfg.manifest, target_size=cfg.size, split="test")
    samples = load_dataset(manifest)
    return model, samples


def _cmd_eval(cfg: RunConfig) -> int:
    model, samples = _load_eval_inputs(cfg)
    report = evaluate_model(model, samples, batch_size=cfg.batch, threshold=cfg.threshold)
    out_dir = Path(cfg.out)
    write_report(report, out_dir)
    figures.save_metric_figure(report, out_dir / "metrics.png")
    sys.stdout.write(report_keyvalues(report))
    return 0


def _cmd_predict(cfg: RunConfig) -> int:
    model, samples = _load_eval_inputs(cfg)
    out_dir = Path(cfg.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    model.eval()
    rows = ["index\tsource\tprobability_png\tmask_png\tpositive_fraction"]
    for start in range(0, len(samples), cfg.batch):
        chunk = samples[start : start + cfg.batch]
        x = Tensor(np.stack([s.image for s in chunk]).astype(model.dtype))
        probs = model.forward(x).data
        for offset, sample in enumerate(chunk):
            i = start + offset
            prob = probs[offset, 0]
            mask = (prob >= cfg.threshold).astype(np.uint8)
            prob_path = out_dir / f"prob_{i:04d}.png"
            mask_path = out_dir / f"mask_{i:04d}.png"
            Image.fromarray((prob * 255.0).round().astype(np.uint8), mode="L").save(prob_path)
            Image.fromarray(mask * 255, mode="L").save(mask_path)
            figures.save_prediction_panel(
                sample.image,
                prob,
                mask,
                out_dir / f"panel_{i:04d}.png",
                ground_truth=sample.mask,
            )
            rows.append(
                f"{i}\t{sample.source_id}\t{prob_path.name}\t{mask_path.name}"
                f"\t{float(mask.mean()):.6f}"
            )
    (out_dir / "predictions.tsv").write_text("\n".join(rows) + "\n")
    print(f"wrote {len(samples)} predictions to {out_dir}")
    return 0


def _cmd_gradcheck(cfg: RunConfig) -> int:
    names = [n.strip() for n in cfg.checks.split(",") if n.strip()] or None
    if names:
        unknown = set(names) - set(checks.SUITE)
        if unknown:
            raise UsageError(f"unknown checks: {', '.join(sorted(unknown))}")
    outcomes = checks.run_gradcheck_suite(seeds=cfg.seeds, tolerance=cfg.tolerance, names=names)
    for outcome in outcomes:
        print(outcome.line())
    worst = max(o.max_rel_err for o in outcomes)
    if all(o.passed for o in outcomes):
        print(f"PASS max_rel_err={worst:.3e}")
        return 0
    print(f"FAIL max_rel_err={worst:.3e}")
    return 2


def _cmd_synth(cfg: RunConfig) -> int:
    dataset = generate_synthetic(cfg.n, cfg.size, cfg.seed, cfg.out)
    print(f"wrote {cfg.n} samples at {cfg.size}x{cfg.size} under {dataset.out_dir}")
    print(f"manifest: {dataset.manifest_path}")
    return 0


_HANDLERS = {
    "train": _cmd_train,
    "eval": _cmd_eval,
    "predict": _cmd_predict,
    "gradcheck": _cmd_gradcheck,
    "synth": _cmd_synth,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = _make_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError("missing subcommand (train | eval | predict | gradcheck | synth)")
        cfg = _build_config(args.command, args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        return _HANDLERS[cfg.command](cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ManifestNotFoundError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (DataError, CheckpointError, ShapeError, AutodiffError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
