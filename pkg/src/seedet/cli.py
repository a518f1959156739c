"""Command line entry point.

Exit codes: 0 success, 1 usage error, 2 numeric failure (non-finite
values, divergence), 3 I/O or file format error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERIC = 2
EXIT_IO = 3


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _build_parser() -> _Parser:
    p = _Parser(prog="seedet", description="3D nodule detection toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    mk = sub.add_parser("make-phantoms", help="generate a synthetic dataset")
    mk.add_argument("--config", required=True, help="phantom config JSON file")
    mk.add_argument("--out", required=True, help="output dataset directory")

    tr = sub.add_parser("train", help="train a detector")
    tr.add_argument("--config", help="run config JSON file (desk-scale defaults if omitted)")
    tr.add_argument("--data", required=True, help="dataset directory")
    tr.add_argument("--out", required=True, help="checkpoint output path")
    tr.add_argument("--log", help="loss log CSV path (default: <out>.log.csv)")
    tr.add_argument(
        "--ablation",
        choices=("no_se", "no_focal", "baseline"),
        help="train an ablation arm instead of the full model",
    )
    tr.add_argument(
        "--full-scale",
        action="store_true",
        help="without --config: use the full-scale defaults instead of desk scale",
    )
    tr.add_argument("--seed", type=int, help="override the config seed")
    tr.add_argument("--quiet", action="store_true", help="suppress progress lines")

    de = sub.add_parser("detect", help="run a checkpoint over one volume")
    de.add_argument("--ckpt", required=True, help="checkpoint file from train")
    de.add_argument("--volume", required=True, help=".vol3 volume to scan")
    de.add_argument("--out", required=True, help="candidates CSV output path")

    ev = sub.add_parser("eval", help="score candidates against annotations")
    ev.add_argument("--candidates", required=True, help="candidates CSV")
    ev.add_argument("--annotations", required=True, help="annotations CSV")
    ev.add_argument("--out", required=True, help="FROC CSV output path")
    ev.add_argument("--svg", help="also render the FROC curve to this file")
    ev.add_argument("--bootstrap", type=int, default=0, metavar="N",
                    help="N bootstrap resamples for confidence bands (0 = off)")
    ev.add_argument("--seed", type=int, default=0, help="bootstrap seed")

    gc = sub.add_parser("gradcheck", help="finite-difference check of every operator")
    gc.add_argument("--quiet", action="store_true")
    return p


def _ensure_parent(path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)


def _cmd_make_phantoms(args) -> int:
    from .phantom import PhantomConfig, make_phantom_dataset

    with open(args.config) as f:
        cfg = PhantomConfig.from_dict(json.load(f))
    manifest = make_phantom_dataset(cfg, args.out)
    print(f"wrote {len(manifest['files'])} volumes to {args.out}")
    return EXIT_OK


def _cmd_train(args) -> int:
    from .config import RunConfig, load_run_config
    from .trainer import train

    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    config = load_run_config(args.config, desk=not args.full_scale, **overrides)
    if args.ablation:
        config = config.with_ablation(args.ablation)
    log_path = args.log or f"{args.out}.log.csv"

    def progress(step, total, breakdown):
        if not args.quiet and (step % 10 == 0 or step == total - 1):
            print(
                f"step {step + 1}/{total} loss {breakdown.total:.4f} "
                f"(cls {breakdown.cls:.4f}, reg {breakdown.reg:.4f}, pos {breakdown.n_pos})",
                flush=True,
            )

    result = train(config, args.data, out_checkpoint=args.out, log_path=log_path,
                   progress=progress)
    print(f"trained {result.steps} steps, final loss {result.final_loss:.4f}")
    print(f"checkpoint: {args.out}\nloss log: {log_path}")
    return EXIT_OK


def _cmd_detect(args) -> int:
    from .data import Volume, read_vol3
    from .evaluation import write_candidates
    from .trainer import detect_volume, restore

    net, config, _ = restore(args.ckpt)
    scan_id = Path(args.volume).stem
    volume = Volume(scan_id, read_vol3(args.volume))
    candidates = detect_volume(net, volume, config)
    _ensure_parent(args.out)
    write_candidates(args.out, candidates)
    print(f"{len(candidates)} candidates -> {args.out}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    from .data import read_annotations
    from .evaluation import (
        bootstrap_band,
        evaluate_candidates,
        read_candidates,
        write_froc_csv,
    )

    candidates = read_candidates(args.candidates)
    annotations = read_annotations(args.annotations)
    curve, matches = evaluate_candidates(candidates, annotations)
    band = None
    if args.bootstrap > 0:
        band = bootstrap_band(matches, n_resamples=args.bootstrap, seed=args.seed)
    _ensure_parent(args.out)
    write_froc_csv(args.out, curve, band)
    if args.svg:
        from .figures import froc_figure

        _ensure_parent(args.svg)
        froc_figure({"detector": curve}, args.svg,
                    bands={"detector": band} if band else None)
        print(f"figure: {args.svg}")
    for rate, sens in zip(curve.target_fp_rates, curve.target_sensitivities):
        print(f"sensitivity at {rate:g} FP/scan: {sens:.4f}")
    print(f"mean sensitivity: {curve.mean_sensitivity:.4f}")
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite, suite_passed

    results = run_suite(verbose=not args.quiet)
    worst = max(r.max_rel_err for r in results)
    if suite_passed(results):
        print(f"all {len(results)} operator checks passed (worst rel err {worst:.3e})")
        return EXIT_OK
    failed = [r.name for r in results if not r.ok()]
    print(f"gradient checks FAILED: {', '.join(failed)}", file=sys.stderr)
    return EXIT_NUMERIC


_COMMANDS = {
    "make-phantoms": _cmd_make_phantoms,
    "train": _cmd_train,
    "detect": _cmd_detect,
    "eval": _cmd_eval,
    "gradcheck": _cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as e:
        print(f"seedet: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help and friends
        return int(e.code or 0)

    from .checkpoint import CheckpointFormatError
    from .data import VolumeFormatError
    from .tensor import NumericError

    try:
        return _COMMANDS[args.command](args)
    except _UsageError as e:
        print(f"seedet: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as e:
        print(f"seedet: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError, TypeError) as e:
        print(f"seedet: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (VolumeFormatError, CheckpointFormatError) as e:
        print(f"seedet: file error: {e}", file=sys.stderr)
        return EXIT_IO
    except OSError as e:
        print(f"seedet: i/o error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
