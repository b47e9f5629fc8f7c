"""Command line entry point. Exit codes: 0 ok, 1 usage, 2 data error, 3 numeric failure."""
from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from . import geometry as geo
from .ablation import ABLATION_COLUMNS, run_ablation_suite
from .bench import BENCH_COLUMNS, bench_complexity, powers_of_two
from .config import RunConfig
from .data import load_dataset, write_dataset
from .formats import CheckpointError, fmt, read_cloud, write_csv
from .gradcheck import CHECKS, TOLERANCE, run_checks
from .train import (EVAL_COLUMNS, METRIC_COLUMNS, PreconditionError, evaluate, load_checkpoint,
                    metric_rows_to_table, save_checkpoint, train_stage)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("mambatron")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def _csv(path, header, rows):
    write_csv(path, header, [[fmt(v) for v in r] for r in rows])


def _load_config(path):
    try:
        return RunConfig.load(path)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}")
    except (KeyError, ValueError) as e:
        raise UsageError(f"bad config {path}: {e}")


def _dataset(data_dir, split, cfg):
    samples = load_dataset(data_dir, split, cfg.grid, cfg.sigma)
    if not samples:
        raise ValueError(f"no {split} samples in {data_dir}")
    return samples


def cmd_gen_data(args):
    rows = write_dataset(args.out, args.seed)
    print(f"wrote {len(rows)} samples to {args.out}")


def _train(args, stage):
    cfg = _load_config(args.config)
    init = None
    if stage == "cross":
        if not args.init or not os.path.exists(args.init):
            raise PreconditionError(f"cross stage needs a uni-stage checkpoint, got {args.init!r}")
        init, init_stage = load_checkpoint(args.init)
        if init_stage != "uni":
            raise PreconditionError(f"{args.init} is a {init_stage!r} checkpoint, expected 'uni'")
        # the initial weights fix the architecture; the new config only drives optimization
        init.cfg = init.cfg.replace(**{k: v for k, v in cfg.items() if k in _OPTIM_KEYS})
    train = _dataset(args.data, "train", cfg if init is None else init.cfg)
    model, rows = train_stage(cfg, stage, train, init=init)
    save_checkpoint(args.out, model, stage)
    _csv(args.out + ".metrics.csv", METRIC_COLUMNS, metric_rows_to_table(rows))
    print(f"{stage}: final total {rows[-1]['total']:.6g}; wrote {args.out}")


_OPTIM_KEYS = ("optimizer", "lr", "momentum", "epochs", "batch_size", "clip_norm", "affine_steps",
               "affine_candidates", "seed", "w_cd", "w_2d", "w_proj", "w_style")


def cmd_eval(args):
    if not os.path.exists(args.ckpt):
        raise FileNotFoundError(f"checkpoint not found: {args.ckpt}")
    model, _ = load_checkpoint(args.ckpt)
    rows = evaluate(model, _dataset(args.data, "test", model.cfg))
    _csv(args.out, EVAL_COLUMNS, rows)
    avg = rows[-1]
    print(f"test cd_e3 {avg[1]:.4f} (partial baseline {avg[3]:.4f}), fscore {avg[2]:.4f}")


def cmd_bench(args):
    if args.lmin < 1 or args.lmax < args.lmin:
        raise UsageError("need 1 <= lmin <= lmax")
    rows, slopes = bench_complexity(powers_of_two(args.lmin, args.lmax), args.wblk, args.c, args.reps)
    _csv(args.out, BENCH_COLUMNS, rows)
    for k, v in slopes.items():
        print(f"slope {k} {v:.4f}")


def cmd_order(args):
    cloud = read_cloud(args.cloud)
    if len(cloud) < args.np:
        raise ValueError(f"cloud has {len(cloud)} points, fewer than n_p={args.np}")
    kp = cloud[geo.fps(cloud, args.np)]
    if args.mode == "xyz":
        perm = geo.xyz_order(kp, args.g)
    elif args.mode == "apr":
        affine = geo.AffineParams()
        if args.ckpt:
            affine = load_checkpoint(args.ckpt)[0].affine
        perm = geo.apr(kp, affine, args.g)
    else:
        perm = np.random.default_rng(args.seed).permutation(len(kp))
    rows = [(i, int(p)) + tuple(kp[p]) for i, p in enumerate(perm)]
    _csv(args.out, ("index", "perm", "x", "y", "z"), rows)
    print(f"path_length {geo.path_length(kp, perm):.6f}")


def cmd_grad_check(args):
    if args.module is not None and args.module not in CHECKS:
        raise UsageError(f"unknown module {args.module!r}; choose from {', '.join(CHECKS)}")
    results = run_checks(None if args.module is None else [args.module])
    bad = False
    for name, err in results.items():
        ok = err <= TOLERANCE
        bad |= not ok
        print(f"{name:10s} max_rel_err {err:.3e} {'ok' if ok else 'FAIL'}")
    if bad:
        return EXIT_NUMERIC


def cmd_ablate(args):
    cfg = _load_config(args.config)
    rows = run_ablation_suite(cfg, _dataset(args.data, "train", cfg), _dataset(args.data, "test", cfg))
    _csv(args.out, ABLATION_COLUMNS, rows)
    for r in rows:
        print(f"{r[0]:15s} cd_e3 {r[1]:.4f}")


def build_parser():
    p = _Parser(prog="mambatron", description="Point-cloud completion with MambaTron cells.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("gen-data", help="write the synthetic dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=42)
    s.set_defaults(func=cmd_gen_data)

    for name, stage in (("train-uni", "uni"), ("train-cross", "cross")):
        s = sub.add_parser(name, help=f"{stage} training stage")
        s.add_argument("--config", required=True)
        s.add_argument("--data", required=True)
        s.add_argument("--out", required=True)
        if stage == "cross":
            s.add_argument("--init", required=True)
        s.set_defaults(func=lambda a, st=stage: _train(a, st))

    s = sub.add_parser("eval", help="per-class test metrics")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("bench", help="compute scaling of the cell vs full attention")
    s.add_argument("--lmin", type=int, default=256)
    s.add_argument("--lmax", type=int, default=8192)
    s.add_argument("--wblk", type=int, default=4)
    s.add_argument("--c", type=int, default=64)
    s.add_argument("--reps", type=int, default=1)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("order", help="keypoint serialization of one cloud")
    s.add_argument("--cloud", required=True)
    s.add_argument("--mode", choices=("xyz", "apr", "random"), required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--np", type=int, default=64)
    s.add_argument("--g", type=int, default=32)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--ckpt", help="take the affine for apr mode from this checkpoint")
    s.set_defaults(func=cmd_order)

    s = sub.add_parser("grad-check", help="finite-difference gradient checks")
    s.add_argument("--module")
    s.set_defaults(func=cmd_grad_check)

    s = sub.add_parser("ablate", help="baseline plus single-flag ablations")
    s.add_argument("--config", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_ablate)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        code = args.func(args)
    except (UsageError, PreconditionError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (FloatingPointError, geo.DegenerateTransformError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, CheckpointError, ValueError, KeyError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK if code is None else code


if __name__ == "__main__":
    sys.exit(main())
