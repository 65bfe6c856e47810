"""Command-line entry point.

Exit status: 0 on success, 1 for invalid input (usage, config, files,
shapes), 2 when a run fails at runtime.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from .attention import series_weights
from .data import inject_noise_bands, load_seqb, synth_clusters, write_seqb
from .errors import (ConfigError, ContractError, SeqbFormatError, ShapeError)
from .gradsuite import CHECKS, run_gradient_suite
from .noise_study import load_study_config, run_noise_study
from .tensor import Tensor
from .train import Checkpoint, evaluate, load_config, train

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
VALIDATION_ERRORS = (ConfigError, ShapeError, ContractError, SeqbFormatError, FileNotFoundError)

SYNTH_KEYS = {"D": int, "N": int, "classes": int, "samples": int, "components": int,
              "sigma": float, "separation": float, "offset": float, "seed": int,
              "noise_bands": int, "noise_scale": float}
SYNTH_DEFAULTS = {"D": 8, "N": 20, "classes": 2, "samples": 200, "seed": 0}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _write_csv(path: Path, header: List[str], rows) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


def parse_synth_spec(text: str) -> dict:
    """``D=8,N=20,classes=2,samples=200,seed=0``; ``default`` or ``""`` for defaults.

    ``samples`` counts per class. ``noise_bands`` > 0 appends injected rows.
    """
    spec = dict(SYNTH_DEFAULTS)
    text = text.strip()
    if text.lower() in ("", "default", "defaults"):
        return spec
    for part in (p.strip() for p in text.split(",") if p.strip()):
        if "=" not in part:
            raise ConfigError(f"synth spec entries look like key=value, got {part!r}")
        key, value = (s.strip() for s in part.split("=", 1))
        if key not in SYNTH_KEYS:
            raise ConfigError(f"unknown synth key {key!r}; known: {', '.join(SYNTH_KEYS)}")
        try:
            spec[key] = SYNTH_KEYS[key](value)
        except ValueError:
            raise ConfigError(f"bad value for {key}: {value!r}") from None
    return spec


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out_dir is not None:
        changes["out_dir"] = args.out_dir
    if args.epochs is not None:
        changes["epochs"] = args.epochs
    if not cfg.out_dir and "out_dir" not in changes:
        changes["out_dir"] = "runs/train"
    cfg = dataclasses.replace(cfg, **changes)
    resume = Checkpoint.load(args.resume) if args.resume else None
    result = train(cfg, resume=resume)
    last = result.history[-1] if result.history else {}
    _say(args, f"model       {result.model.summary()}")
    for key in ("train_loss", "train_acc", "val_acc", "macro_f1"):
        if key in last:
            _say(args, f"{key:<12}{last[key]:.6f}")
    _say(args, f"checkpoint  {result.checkpoint_path}")
    _say(args, f"history     {result.history_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    ds = load_seqb(args.dataset)
    m = evaluate(ckpt, ds)
    print(m.table())
    if args.out_dir:
        out = Path(args.out_dir)
        _write_csv(out / "eval_metrics.csv", ["metric", "value"],
                   [["samples", m.n_samples], ["accuracy", repr(m.accuracy)], ["macro_f1", repr(m.macro_f1)]]
                   + ([["sens_spec", repr(m.sens_spec)]] if m.sens_spec is not None else []))
        _write_csv(out / "eval_confusion.csv", ["true"] + [f"pred_{j}" for j in range(len(m.confusion))],
                   [[i] + row.tolist() for i, row in enumerate(m.confusion)])
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    checks = None
    if args.module:
        checks = [c.strip() for c in args.module.split(",") if c.strip()]
    seeds = range(args.seed, args.seed + args.seeds) if args.seed is not None else range(args.seeds)
    result = run_gradient_suite(checks, seeds=seeds, tol=args.tol)
    print(result.table())
    if args.out_dir:
        _write_csv(Path(args.out_dir) / "gradcheck.csv", ["layer", "seeds", "max_rel_error", "pass"],
                   [[c, len(r), repr(result.worst(c)), result.worst(c) < result.tol]
                    for c, r in result.reports.items()])
    return EXIT_OK if result.passed else EXIT_RUNTIME


def cmd_synth(args) -> int:
    spec = parse_synth_spec(args.spec)
    if args.seed is not None:
        spec["seed"] = args.seed
    bands = spec.pop("noise_bands", 0)
    scale = spec.pop("noise_scale", 1.0)
    ds = synth_clusters(spec.pop("D"), spec.pop("N"), spec.pop("classes"), spec.pop("samples"),
                        seed=spec["seed"], **{k: v for k, v in spec.items() if k != "seed"})
    if bands:
        ds = inject_noise_bands(ds, bands, seed=spec["seed"] + 1000, noise_scale=scale)
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_seqb(ds, out)
    _say(args, f"wrote {len(ds)} samples (D={ds.n_features}, classes={ds.n_classes}) to {out}")
    return EXIT_OK


def cmd_noise_study(args) -> int:
    cfg, settings = load_study_config(args.config)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else list(range(5))
    if args.seed is not None:
        seeds = [args.seed + s for s in seeds]
    if args.epochs is not None:
        cfg = dataclasses.replace(cfg, epochs=args.epochs)
    log = None if args.quiet else (lambda msg: print(msg, file=sys.stderr))
    report = run_noise_study(cfg, seeds, settings, log=log)
    print(report.table())
    out = args.out_dir or cfg.out_dir or "runs/noise_study"
    paths = report.write(out)
    _say(args, "\n".join(f"{k:<12}{p}" for k, p in paths.items()))
    return EXIT_OK


def cmd_inspect(args) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    model = ckpt.model()
    print(f"model        {model.summary()}")
    print(f"epoch        {ckpt.epoch}")
    print(f"adam steps   {ckpt.optim_t}")
    print(f"config hash  {ckpt.config_hash}")
    for key, value in ckpt.config.to_dict().items():
        print(f"  {key:<14}{value}")
    print("parameters")
    for name, p in model.parameters().items():
        print(f"  {name:<32}{str(p.shape):<14}|max| {np.abs(p.data).max():.4g}")
    taus = model.taus()
    if taus:
        print("tau")
        for name, value in taus.items():
            print(f"  {name:<10}{value:+.6f}")
    if ckpt.history:
        last = ckpt.history[-1]
        print("last epoch   " + "  ".join(f"{k}={v:.6g}" for k, v in last.items() if k != "epoch"))
    if args.dataset:
        ds = load_seqb(args.dataset)
        _, ctx = model.forward(Tensor(ds.stacked()), capture_masks=True, return_context=True)
        if not ctx.masks:
            raise ConfigError("this model has no attention blocks, so there are no masks to export")
        out = Path(args.out_dir or "runs/inspect")
        out.mkdir(parents=True, exist_ok=True)
        np.savez_compressed(out / "attention_masks.npz", **{k: np.asarray(v) for k, v in ctx.masks.items()})
        rows = []
        for name, mask in ctx.masks.items():
            for i, w in enumerate(series_weights(np.asarray(mask))):
                rows.extend([name, i, int(ds.labels[i]), j, repr(float(v))] for j, v in enumerate(w))
        _write_csv(out / "attention_weights.csv", ["block", "sample", "label", "index", "mean_weight"], rows)
        print(f"masks        {out / 'attention_masks.npz'}")
    return EXIT_OK


def _say(args, text: str) -> None:
    if not args.quiet:
        print(text)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override the run seed")
    common.add_argument("--out-dir", default=None, help="directory for output files")
    common.add_argument("--quiet", action="store_true", help="suppress progress output")

    p = _Parser(prog="attnbof", description="Neural bag-of-features with 2D attention.",
                parents=[common])
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    t = sub.add_parser("train", parents=[common], help="train from a config file")
    t.add_argument("config")
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--resume", default=None, help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a dataset")
    e.add_argument("checkpoint")
    e.add_argument("dataset")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    g.add_argument("--module", default=None, help=f"comma-separated subset of: {', '.join(CHECKS)}")
    g.add_argument("--tol", type=float, default=1e-4)
    g.add_argument("--seeds", type=int, default=10, help="number of random draws per layer")
    g.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("synth", parents=[common], help="write a synthetic dataset")
    s.add_argument("spec", help="key=value list, or 'default'")
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_synth)

    n = sub.add_parser("noise-study", parents=[common], help="clean vs noisy comparison")
    n.add_argument("config")
    n.add_argument("--seeds", default=None, help="comma-separated seeds (default 0,1,2,3,4)")
    n.add_argument("--epochs", type=int, default=None)
    n.set_defaults(func=cmd_noise_study)

    i = sub.add_parser("inspect", parents=[common], help="describe a checkpoint")
    i.add_argument("checkpoint")
    i.add_argument("--dataset", default=None, help="export per-sample attention masks for this dataset")
    i.set_defaults(func=cmd_inspect)
    return p


def _merge_globals(argv: List[str], parser) -> argparse.Namespace:
    # global flags may appear before the subcommand; the subparser defaults
    # would otherwise overwrite them with None
    pre = argparse.Namespace()
    head = _Parser(add_help=False)
    head.add_argument("--seed", type=int, default=None)
    head.add_argument("--out-dir", default=None)
    head.add_argument("--quiet", action="store_true")
    cut = next((k for k, a in enumerate(argv) if a in {"train", "eval", "gradcheck", "synth",
                                                           "noise-study", "inspect"}), len(argv))
    head.parse_known_args(argv[:cut], namespace=pre)
    args = parser.parse_args(argv)
    for key in ("seed", "out_dir"):
        if getattr(args, key, None) is None:
            setattr(args, key, getattr(pre, key))
    args.quiet = bool(getattr(args, "quiet", False) or pre.quiet)
    return args


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = _merge_globals(argv, parser)
    except UsageError as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_INVALID
    if not getattr(args, "command", None):
        parser.print_usage(sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(message)s", stream=sys.stderr, force=True)
    try:
        return args.func(args)
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime failure
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
