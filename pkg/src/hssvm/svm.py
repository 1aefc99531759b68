"""SVM training on HSS-compressed kernels, prediction, and grid search.

For each bandwidth ``h`` the kernel is compressed and the shifted operator
factorized once; every ``C`` in the grid then costs one ADMM run plus one
structured matvec for the bias.
"""
from __future__ import annotations

import csv
import logging
import math
import struct
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import admm, hss
from .cluster import build_tree
from .dataset import Dataset, apply_permutation
from .kernel import KernelMatrix, KernelSpec, cross_kernel

log = logging.getLogger(__name__)

SV_THRESHOLD = 1e-12
MARGIN_EPS = 1e-8

CSV_HEADER = ["h", "C", "accuracy_pct", "compress_s", "factor_s", "admm_s",
              "memory_mb", "hss_rank"]


@dataclass
class SvmModel:
    kernel: KernelSpec
    support_points: sp.csr_matrix
    coeffs: np.ndarray
    bias: float
    C: float
    meta: dict = field(default_factory=dict)

    @property
    def n_support(self) -> int:
        return self.coeffs.size

    @property
    def num_features(self) -> int:
        return self.support_points.shape[1]

    def decision_function(self, X) -> np.ndarray:
        if isinstance(X, Dataset):
            X = X.X
        elif not sp.issparse(X):
            X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if self.n_support == 0:
            return np.full(X.shape[0], self.bias)
        return cross_kernel(self.kernel, X, self.support_points) @ self.coeffs + self.bias

    def predict(self, X) -> np.ndarray:
        return np.where(self.decision_function(X) >= 0.0, 1, -1).astype(np.int8)


def sign_label(value: float) -> int:
    """+1 for non-negative decision values (ties go to +1)."""
    return 1 if value >= 0.0 else -1


def predict(model: SvmModel, f) -> int:
    """Label of a single feature vector (dense 1-D or sparse row)."""
    return sign_label(float(model.decision_function(f)[0]))


def evaluate(model: SvmModel, test: Dataset) -> float:
    """Percentage of test rows whose predicted label matches."""
    if test.d == 0:
        raise ValueError("empty test set")
    correct = int(np.count_nonzero(model.predict(test) == test.y))
    return 100.0 * correct / test.d


def margin_set(z: np.ndarray, C: float) -> np.ndarray:
    eps = MARGIN_EPS * C
    M = (z > eps) & (z < C - eps)
    if not M.any():
        M = z > eps
    return M


def compute_bias(m, z, y, C: float) -> float:
    """Average bias over margin support vectors with one structured matvec.

    ``b = (sum_{j in M} y_j - z_y^T K~ e_M) / |M|`` so that margin vectors
    satisfy ``y_j (sum_i z_y,i K_ij + b) = 1`` on average.
    """
    z = np.asarray(z, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    M = margin_set(z, C)
    count = int(M.sum())
    if count == 0:
        return 0.0
    KM = m.matvec(M.astype(np.float64))
    return float((y[M].sum() - (y * z) @ KM) / count)


def build_model(train: Dataset, z, bias: float, spec: KernelSpec, C: float,
                meta: dict | None = None) -> SvmModel:
    z = np.asarray(z, dtype=np.float64)
    keep = np.flatnonzero(np.abs(z) > SV_THRESHOLD)
    return SvmModel(spec, train.X[keep], train.y[keep] * z[keep], float(bias),
                    float(C), dict(meta or {}))


@dataclass
class TrainConfig:
    rel_tol: float = 1.0
    abs_tol: float = 0.1
    max_rank: int = 200
    leaf_size: int = 128
    beta: float | str = "auto"
    max_it: int = admm.DEFAULT_MAX_IT
    seed: int = 42

    def beta_for(self, d: int) -> float:
        return admm.auto_beta(d) if self.beta == "auto" else float(self.beta)


@dataclass
class CompressedKernel:
    """One bandwidth's cached compression and factorization."""

    spec: KernelSpec
    train: Dataset           # in tree order
    hss: hss.HssMatrix
    factor: hss.ShiftedFactorization
    pre: admm.Precomputed
    compress_s: float
    factor_s: float


def prepare(train: Dataset, h: float, cfg: TrainConfig) -> CompressedKernel:
    spec = KernelSpec(h)
    t0 = time.perf_counter()
    tree, perm = build_tree(train, cfg.leaf_size, cfg.seed)
    ptrain = apply_permutation(train, perm)
    m = hss.compress(KernelMatrix(spec, ptrain), tree, cfg.rel_tol, cfg.abs_tol,
                     cfg.max_rank, cfg.seed)
    m.perm = perm
    t1 = time.perf_counter()
    f = hss.factor_shifted(m, cfg.beta_for(train.d))
    pre = admm.precompute(f, ptrain.y)
    t2 = time.perf_counter()
    return CompressedKernel(spec, ptrain, m, f, pre, t1 - t0, t2 - t1)


def fit_C(ck: CompressedKernel, C: float, cfg: TrainConfig) -> SvmModel:
    conf = admm.AdmmConfig(ck.factor.beta, C, cfg.max_it)
    state = admm.run(ck.factor, ck.pre, conf)
    b = compute_bias(ck.hss, state.z, ck.train.y, C)
    meta = dict(d=ck.train.d, seed=cfg.seed, rel_tol=cfg.rel_tol,
                abs_tol=cfg.abs_tol, max_rank=cfg.max_rank, beta=conf.beta,
                max_it=cfg.max_it)
    return build_model(ck.train, state.z, b, ck.spec, C, meta)


def train(ds: Dataset, h: float, C: float, cfg: TrainConfig | None = None) -> SvmModel:
    cfg = cfg or TrainConfig()
    return fit_C(prepare(ds, h, cfg), C, cfg)


@dataclass
class GridRow:
    h: float
    C: float
    accuracy_pct: float
    compress_s: float
    factor_s: float
    admm_s: float
    memory_mb: float
    hss_rank: int
    error: str | None = None


@dataclass
class GridCounters:
    compressions: int = 0
    factorizations: int = 0
    admm_runs: int = 0


@dataclass
class GridResult:
    rows: list
    models: dict
    counters: GridCounters

    @property
    def failed(self) -> bool:
        return any(r.error for r in self.rows)

    def write_csv(self, fh, timings: bool = True) -> None:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in self.rows:
            t = (lambda v: f"{v:.3f}") if timings else (lambda v: "0.000")
            w.writerow([f"{r.h:.6g}", f"{r.C:.6g}", f"{r.accuracy_pct:.6g}",
                        t(r.compress_s), t(r.factor_s), t(r.admm_s),
                        f"{r.memory_mb:.6g}", r.hss_rank])


def train_grid(train: Dataset, test: Dataset, h_list, C_list,
               cfg: TrainConfig | None = None, threads: int = 1) -> GridResult:
    """Evaluate every (h, C) pair, compressing and factorizing once per h."""
    cfg = cfg or TrainConfig()
    h_list, C_list = list(h_list), list(C_list)
    if not h_list or not C_list:
        raise ValueError("empty parameter grid")
    counters = GridCounters()
    lock = threading.Lock()
    nan = math.nan

    def one_h(h):
        rows, models = [], {}
        try:
            ck = prepare(train, h, cfg)
        except Exception as exc:  # recorded per cell, grid continues
            log.error("h=%g: compression/factorization failed: %s", h, exc)
            return [GridRow(h, C, nan, nan, nan, nan, nan, -1, str(exc))
                    for C in C_list], models
        with lock:
            counters.compressions += 1
            counters.factorizations += 1
        mem = ck.hss.memory_bytes / 1e6
        for C in C_list:
            try:
                t0 = time.perf_counter()
                model = fit_C(ck, C, cfg)
                admm_s = time.perf_counter() - t0
                with lock:
                    counters.admm_runs += 1
                acc = evaluate(model, test)
            except Exception as exc:
                log.error("h=%g C=%g failed: %s", h, C, exc)
                rows.append(GridRow(h, C, nan, ck.compress_s, ck.factor_s, nan,
                                    mem, ck.hss.hss_rank, str(exc)))
                continue
            models[(h, C)] = model
            rows.append(GridRow(h, C, acc, ck.compress_s, ck.factor_s, admm_s,
                                mem, ck.hss.hss_rank))
        return rows, models

    if threads > 1 and len(h_list) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one_h, h_list))
    else:
        results = [one_h(h) for h in h_list]
    rows, models = [], {}
    for r, m in results:
        rows.extend(r)
        models.update(m)
    return GridResult(rows, models, counters)


# -- model container -------------------------------------------------------

_MAGIC = b"SVM1"
_VERSION = 1
_FAMILIES = {"gaussian": 0}
_HEADER = struct.Struct("<4sIIdddQQ")
_META = struct.Struct("<QQdddQQ")


def save_model(model: SvmModel, fh) -> None:
    """Little-endian ``SVM1`` container: header, metadata, sparse SVs, coeffs."""
    X = sp.csr_matrix(model.support_points)
    X.sort_indices()
    meta = model.meta
    parts = [
        _HEADER.pack(_MAGIC, _VERSION, _FAMILIES[model.kernel.family],
                     model.kernel.h, model.C, model.bias, model.n_support,
                     model.num_features),
        _META.pack(int(meta.get("d", 0)), int(meta.get("seed", 0)),
                   float(meta.get("rel_tol", 0.0)), float(meta.get("abs_tol", 0.0)),
                   float(meta.get("beta", 0.0)), int(meta.get("max_rank", 0)),
                   int(meta.get("max_it", 0))),
        X.indptr.astype("<i8").tobytes(),
        X.indices.astype("<i8").tobytes(),
        X.data.astype("<f8").tobytes(),
        np.asarray(model.coeffs, dtype="<f8").tobytes(),
    ]
    fh.write(b"".join(parts))


def load_model(fh) -> SvmModel:
    data = fh.read()
    if len(data) < _HEADER.size + _META.size:
        raise ValueError("truncated SVM1 container")
    magic, version, fam, h, C, bias, nsv, nf = _HEADER.unpack_from(data, 0)
    if magic != _MAGIC:
        raise ValueError("not an SVM1 model file")
    if version != _VERSION:
        raise ValueError(f"unsupported SVM1 version {version}")
    family = {v: k for k, v in _FAMILIES.items()}.get(fam)
    if family is None:
        raise ValueError(f"unknown kernel family code {fam}")
    d, seed, rel_tol, abs_tol, beta, max_rank, max_it = _META.unpack_from(
        data, _HEADER.size)
    off = _HEADER.size + _META.size

    def take(count, dtype):
        nonlocal off
        arr = np.frombuffer(data, dtype=dtype, count=count, offset=off).copy()
        off += arr.nbytes
        return arr

    try:
        indptr = take(nsv + 1, "<i8")
        indices = take(int(indptr[-1]), "<i8")
        values = take(int(indptr[-1]), "<f8")
        coeffs = take(nsv, "<f8")
    except ValueError as exc:
        raise ValueError(f"truncated SVM1 container: {exc}") from None
    X = sp.csr_matrix((values, indices, indptr), shape=(nsv, nf))
    meta = dict(d=d, seed=seed, rel_tol=rel_tol, abs_tol=abs_tol, beta=beta,
                max_rank=max_rank, max_it=max_it)
    return SvmModel(KernelSpec(h, family), X, coeffs, bias, C, meta)
