"""Command-line entry point.

Exit codes: 0 success, 1 failed stage or failed trend check, 2 usage or
configuration error, 3 data error, 4 non-finite loss. Every failure prints a
single line ``dcrgan: error: <kind>: <message>`` on stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys

import numpy as np

from . import dataset as dsm
from . import evaluate as ev
from . import nn
from . import pipeline as pl

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _fail(kind: str, message: str, code: int) -> int:
    flat = " ".join(str(message).split())
    print(f"dcrgan: error: {kind}: {flat}", file=sys.stderr)
    return code


def _add_run_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="flat key=value config file")
    g = p.add_argument_group("run settings (override the config file)")
    for f in dataclasses.fields(pl.RunConfig):
        g.add_argument("--" + f.name.replace("_", "-"), dest=f.name, default=None, metavar="V")


def _run_config(args) -> pl.RunConfig:
    overrides = {}
    for f in dataclasses.fields(pl.RunConfig):
        raw = getattr(args, f.name, None)
        if raw is not None:
            overrides[f.name] = pl.RunConfig.parse_value(f.name, raw)
    return pl.RunConfig.from_file(args.config, overrides).validate()


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dcrgan", description="Metric-guided GAN feature synthesis for zero-shot learning.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth-data", help="write a synthetic dataset in the interchange format")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--num-seen", type=int, default=dsm.SynthConfig.num_seen)
    s.add_argument("--num-unseen", type=int, default=4)
    s.add_argument("--instances-per-class", type=int, default=60)
    s.add_argument("--d-v", type=int, default=64)
    s.add_argument("--d-a", type=int, default=dsm.SynthConfig.d_a)
    s.add_argument("--sigma", type=float, default=1.0)
    s.add_argument("--unseen-overlap", type=float, default=0.0)

    t = sub.add_parser("train", help="train metric network, rectifier and generator")
    _add_run_flags(t)
    t.add_argument("--no-resume", action="store_true", help="retrain stages even if checkpoints exist")

    e = sub.add_parser("eval", help="train if needed, then evaluate")
    _add_run_flags(e)
    e.add_argument("--mode", choices=("zsl", "gzsl"), default="gzsl")

    a = sub.add_parser("ablate", help="run every ablation variant and write a CSV")
    _add_run_flags(a)
    a.add_argument("--variants", default=",".join(pl.VARIANTS))
    a.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds from --seed")
    a.add_argument("--trend-check", action="store_true",
                   help="fail unless median H(C5) >= median H(C1) over the seeds")
    a.add_argument("--csv", default=None, help="output CSV (default <out_dir>/ablation.csv)")

    x = sub.add_parser("export-reps", help="write representations and feature projections as CSV")
    _add_run_flags(x)
    x.add_argument("--out", required=True)
    x.add_argument("--per-class", type=int, default=100)
    return p


def cmd_synth_data(args) -> int:
    cfg = dsm.SynthConfig(num_seen=args.num_seen, num_unseen=args.num_unseen,
                          instances_per_class=args.instances_per_class, d_v=args.d_v, d_a=args.d_a,
                          visual_noise_sigma=args.sigma, unseen_overlap=args.unseen_overlap, seed=args.seed)
    try:
        cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    manifest = dsm.save(dsm.synth_generate(cfg), args.out)
    print(manifest)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _run_config(args)
    run = pl.train_run(cfg, resume=not args.no_resume)
    for stage, d in run.stage_dirs.items():
        print(f"{stage:4s} {'reused ' if stage in run.resumed else 'trained'} {d}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _run_config(args)
    print(pl.eval_run(cfg, args.mode).table())
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _run_config(args)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    unknown = [v for v in variants if v not in pl.VARIANTS]
    if unknown:
        raise UsageError(f"unknown variants {unknown}; expected a subset of {list(pl.VARIANTS)}")
    if args.seeds < 1:
        raise UsageError("--seeds must be positive")
    reports = []
    for k in range(args.seeds):
        reports += pl.ablate_run(cfg.replace(seed=cfg.seed + k), variants)
    path = args.csv or f"{cfg.out_dir}/ablation.csv"
    ev.write_reports_csv(reports, path)
    for r in reports:
        print(f"{r.variant:3s} seed={r.seed} U={100 * r.u:.2f} S={100 * r.s:.2f} H={100 * r.h:.2f}")
    if args.trend_check:
        if not {"C1", "C5"} <= set(variants):
            raise UsageError("--trend-check needs variants C1 and C5")
        med = {v: float(np.median([r.h for r in reports if r.variant == v])) for v in ("C1", "C5")}
        ok = med["C5"] >= med["C1"]
        print(f"trend H(C5)={med['C5']:.4f} >= H(C1)={med['C1']:.4f}: {'pass' if ok else 'FAIL'}")
        if not ok:
            return _fail("trend", f"median H(C5)={med['C5']:.4f} < median H(C1)={med['C1']:.4f}", EXIT_FAIL)
    return EXIT_OK


def cmd_export_reps(args) -> int:
    cfg = _run_config(args)
    run = pl.train_run(cfg)
    rng = pl.stage_rng(cfg.seed, "export")
    for p in ev.export_representations(run.M, run.R, run.ds, args.out, run.bundle, args.per_class, rng):
        print(p)
    return EXIT_OK


COMMANDS = {"synth-data": cmd_synth_data, "train": cmd_train, "eval": cmd_eval,
            "ablate": cmd_ablate, "export-reps": cmd_export_reps}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](args)
    except UsageError as exc:
        return _fail("usage", exc, EXIT_USAGE)
    except pl.ConfigError as exc:
        return _fail("config", exc, EXIT_USAGE)
    except dsm.DatasetError as exc:
        return _fail("data", exc, EXIT_DATA)
    except nn.NumericError as exc:
        return _fail("numeric", exc, EXIT_NUMERIC)
    except pl.StageError as exc:
        return _fail("stage", exc, EXIT_FAIL)
    except OSError as exc:
        return _fail("io", exc, EXIT_FAIL)


if __name__ == "__main__":
    sys.exit(main())
