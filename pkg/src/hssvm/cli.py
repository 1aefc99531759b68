"""Command-line entry point: ``hssvm <command> [options]``.

Exit codes: 0 success, 1 usage or I/O error, 2 some grid cells failed.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import statistics
import sys
import time
from contextlib import contextmanager

import numpy as np

from . import dataset, hss, svm
from .cluster import build_tree
from .kernel import DEFAULT_ORACLE_CAP, KernelMatrix, KernelSpec, OracleCapError, dense_kernel

log = logging.getLogger("hssvm")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _floats(s: str) -> list[float]:
    try:
        vals = [float(t) for t in s.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {s!r}")
    if not vals or any(not v > 0 for v in vals):
        raise argparse.ArgumentTypeError(f"values must be positive: {s!r}")
    return vals


def _ints(s: str) -> list[int]:
    try:
        return [int(t) for t in s.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {s!r}")


def _beta(s: str):
    if s == "auto":
        return s
    v = float(s)
    if not v > 0:
        raise argparse.ArgumentTypeError("beta must be positive or 'auto'")
    return v


def _positive(kind):
    def conv(s):
        v = kind(s)
        if not v > 0:
            raise argparse.ArgumentTypeError(f"must be positive: {s}")
        return v
    return conv


def _nonneg(s):
    v = float(s)
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be non-negative: {s}")
    return v


def _hss_flags(p):
    p.add_argument("--rel-tol", type=_nonneg, default=1.0)
    p.add_argument("--abs-tol", type=_nonneg, default=0.1)
    p.add_argument("--max-rank", type=_positive(int), default=200)
    p.add_argument("--leaf-size", type=_positive(int), default=128)
    p.add_argument("--hss-approximate-neighbors", type=int, default=None,
                   help="accepted for compatibility; has no effect")


def _common_flags(p):
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--remap01", action="store_true",
                   help="read labels {0,1} as {-1,+1}")
    p.add_argument("--oracle-cap", type=_positive(int), default=DEFAULT_ORACLE_CAP)
    p.add_argument("--threads", type=_positive(int), default=os.cpu_count() or 1)
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="hssvm", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("compress", help="compress one kernel matrix to HSS form")
    p.add_argument("--data", required=True)
    p.add_argument("--h", type=_floats, required=True)
    p.add_argument("--out")
    p.add_argument("--subsample", type=_positive(int))
    _hss_flags(p)
    _common_flags(p)

    p = sub.add_parser("train", help="train one model and save it")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--h", type=_floats, required=True)
    p.add_argument("--C", type=_floats, required=True)
    p.add_argument("--beta", type=_beta, default="auto")
    p.add_argument("--max-it", type=_positive(int), default=10)
    p.add_argument("--subsample", type=_positive(int))
    _hss_flags(p)
    _common_flags(p)

    p = sub.add_parser("predict", help="label a dataset with a saved model")
    p.add_argument("--model", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--out")
    _common_flags(p)

    p = sub.add_parser("grid", help="(h, C) grid search with one compression per h")
    p.add_argument("--data", required=True)
    p.add_argument("--test")
    p.add_argument("--test-fraction", type=float, default=0.3)
    p.add_argument("--out")
    p.add_argument("--h", type=_floats, default=[0.1, 1.0, 10.0])
    p.add_argument("--C", type=_floats, default=[0.1, 1.0, 10.0])
    p.add_argument("--beta", type=_beta, default="auto")
    p.add_argument("--max-it", type=_positive(int), default=10)
    p.add_argument("--subsample", type=_positive(int))
    p.add_argument("--no-timings", action="store_true",
                   help="write 0.000 in the time columns (byte-reproducible output)")
    _hss_flags(p)
    _common_flags(p)

    p = sub.add_parser("svd-decay", help="singular values of dense kernel matrices")
    p.add_argument("--data", required=True)
    p.add_argument("--h", type=_floats, default=[0.1, 1.0, 10.0])
    p.add_argument("--out")
    p.add_argument("--subsample", type=_positive(int))
    _common_flags(p)

    p = sub.add_parser("bench", help="compress+factor timings on synthetic data")
    p.add_argument("--sizes", type=_ints, default=[20000, 40000])
    p.add_argument("--features", type=_positive(int), default=8)
    p.add_argument("--h", type=_floats, default=[0.5])
    p.add_argument("--beta", type=_beta, default="auto")
    p.add_argument("--repeats", type=_positive(int), default=3)
    p.add_argument("--out")
    _hss_flags(p)
    _common_flags(p)
    return ap


@contextmanager
def _output(path):
    if path is None:
        yield sys.stdout
    else:
        with open(path, "w", newline="") as fh:
            yield fh


def _load(path, args, num_features=None):
    try:
        return dataset.load(path, remap01=args.remap01, num_features=num_features)
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror or exc}") from None
    except ValueError as exc:
        raise UsageError(f"{path}: {exc}") from None


def _maybe_subsample(ds, args):
    n = getattr(args, "subsample", None)
    return dataset.subsample(ds, n, args.seed) if n else ds


def _single(vals, flag):
    if len(vals) != 1:
        raise UsageError(f"{flag} takes a single value here")
    return vals[0]


def _config(args) -> svm.TrainConfig:
    return svm.TrainConfig(rel_tol=args.rel_tol, abs_tol=args.abs_tol,
                           max_rank=args.max_rank, leaf_size=args.leaf_size,
                           beta=getattr(args, "beta", "auto"),
                           max_it=getattr(args, "max_it", 10), seed=args.seed)


def cmd_compress(args) -> int:
    ds = _maybe_subsample(_load(args.data, args), args)
    h = _single(args.h, "--h")
    t0 = time.perf_counter()
    tree, perm = build_tree(ds, args.leaf_size, args.seed)
    m = hss.compress(KernelMatrix(KernelSpec(h), dataset.apply_permutation(ds, perm)),
                     tree, args.rel_tol, args.abs_tol, args.max_rank, args.seed)
    m.perm = perm
    elapsed = time.perf_counter() - t0
    if args.out:
        with open(args.out, "wb") as fh:
            hss.dump(m, fh)
    print(f"d={m.d} hss_rank={m.hss_rank} memory_mb={m.memory_bytes / 1e6:.6g} "
          f"compress_s={elapsed:.3f}")
    return 0


def cmd_train(args) -> int:
    ds = _maybe_subsample(_load(args.data, args), args)
    h = _single(args.h, "--h")
    C = _single(args.C, "--C")
    model = svm.train(ds, h, C, _config(args))
    with open(args.model, "wb") as fh:
        svm.save_model(model, fh)
    print(f"trained d={ds.d} h={h:g} C={C:g} support_vectors={model.n_support} "
          f"bias={model.bias:.6g}")
    return 0


def cmd_predict(args) -> int:
    try:
        with open(args.model, "rb") as fh:
            model = svm.load_model(fh)
    except OSError as exc:
        raise UsageError(f"cannot read model {args.model}: {exc.strerror or exc}") from None
    except ValueError as exc:
        raise UsageError(f"{args.model}: {exc}") from None
    test = _load(args.test, args)
    labels = model.predict(test)
    with _output(args.out) as fh:
        fh.writelines(f"{int(v):+d}\n" for v in labels)
    acc = 100.0 * np.count_nonzero(labels == test.y) / max(test.d, 1)
    print(f"accuracy_pct={acc:.6g} ({test.d} rows)", file=sys.stderr)
    return 0


def cmd_grid(args) -> int:
    data = _load(args.data, args)
    if args.test:
        test = _load(args.test, args)
        n = max(data.num_features, test.num_features)
        train, test = data.with_num_features(n), test.with_num_features(n)
        train = _maybe_subsample(train, args)
    else:
        train, test = dataset.random_split(_maybe_subsample(data, args),
                                           args.test_fraction, args.seed)
    res = svm.train_grid(train, test, args.h, args.C, _config(args), threads=args.threads)
    log.info("compressions=%d factorizations=%d admm_runs=%d",
             res.counters.compressions, res.counters.factorizations,
             res.counters.admm_runs)
    with _output(args.out) as fh:
        res.write_csv(fh, timings=not args.no_timings)
    return 2 if res.failed else 0


def cmd_svd_decay(args) -> int:
    ds = _maybe_subsample(_load(args.data, args), args)
    if ds.d > args.oracle_cap:
        raise UsageError(f"d={ds.d} exceeds --oracle-cap {args.oracle_cap}; "
                         "use --subsample to reduce it")
    cols = []
    for h in args.h:
        K = dense_kernel(KernelSpec(h), ds, cap=args.oracle_cap)
        s = np.linalg.svd(K, compute_uv=False)
        cols.append(s)
        log.info("h=%g eps-rank(1e-6)=%d", h, int(np.count_nonzero(s > 1e-6 * s[0])))
    with _output(args.out) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k"] + [f"h={h:g}" for h in args.h])
        for k in range(ds.d):
            w.writerow([k + 1] + [f"{c[k]:.6g}" for c in cols])
    return 0


def cmd_bench(args) -> int:
    h = _single(args.h, "--h")
    cfg = _config(args)
    rows = []
    for d in args.sizes:
        rng = np.random.default_rng(args.seed)
        ds = dataset.from_arrays(rng.random((d, args.features)),
                                 np.where(rng.random(d) < 0.5, 1, -1))
        times = []
        for _ in range(args.repeats):
            ck = svm.prepare(ds, h, cfg)
            times.append(ck.compress_s + ck.factor_s)
        rows.append((d, statistics.median(times), ck.hss.hss_rank))
    with _output(args.out) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["d", "compress_factor_s", "hss_rank", "ratio"])
        prev = None
        for d, t, r in rows:
            w.writerow([d, f"{t:.3f}", r, "" if prev is None else f"{t / prev:.3f}"])
            prev = t
    return 0


COMMANDS = {
    "compress": cmd_compress,
    "train": cmd_train,
    "predict": cmd_predict,
    "grid": cmd_grid,
    "svd-decay": cmd_svd_decay,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "hss_approximate_neighbors", None) is not None:
        log.warning("--hss-approximate-neighbors=%d accepted and ignored",
                    args.hss_approximate_neighbors)
    try:
        return COMMANDS[args.command](args)
    except (UsageError, OracleCapError) as exc:
        print(f"hssvm {args.command}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"hssvm {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
