"""Gaussian kernel evaluation: single entries, blocks, and the dense matrix."""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .dataset import Dataset

DEFAULT_ORACLE_CAP = 4096

# Keep a dense feature copy when it stays under this many bytes.
_DENSE_CACHE_BYTES = 256 * 2**20

# Instrumentation: how often the O(d^2) paths ran in this process.
calls: Counter = Counter()


class OracleCapError(RuntimeError):
    """Refusal to materialize a dense d x d matrix above the configured cap."""


@dataclass(frozen=True)
class KernelSpec:
    h: float
    family: str = "gaussian"

    def __post_init__(self):
        if self.family != "gaussian":
            raise ValueError(f"unsupported kernel family {self.family!r}")
        if not (self.h > 0 and np.isfinite(self.h)):
            raise ValueError(f"bandwidth must be positive, got {self.h}")

    @property
    def gamma(self) -> float:
        return 1.0 / (2.0 * self.h * self.h)


def _as_row(f) -> np.ndarray | sp.csr_matrix:
    if sp.issparse(f):
        return sp.csr_matrix(f).reshape(1, -1)
    return np.asarray(f, dtype=np.float64).reshape(1, -1)


def eval(spec: KernelSpec, fi, fj) -> float:
    """exp(-||fi - fj||^2 / (2 h^2)) for two sparse or dense vectors."""
    a, b = _as_row(fi), _as_row(fj)
    n = max(a.shape[1], b.shape[1])
    a = _widen(a, n)
    b = _widen(b, n)
    diff = a - b
    if sp.issparse(diff):
        vals = diff.data
    else:
        vals = np.ravel(diff)
    if not np.all(np.isfinite(vals)):
        raise ValueError("non-finite feature value")
    return float(np.exp(-spec.gamma * float(np.dot(vals, vals))))


def _widen(M, n):
    if M.shape[1] == n:
        return M
    if sp.issparse(M):
        M = sp.csr_matrix(M)
        return sp.csr_matrix((M.data, M.indices, M.indptr), shape=(M.shape[0], n))
    out = np.zeros((M.shape[0], n))
    out[:, :M.shape[1]] = M
    return out


class KernelMatrix:
    """Element/block accessor for the kernel matrix of one dataset.

    Squared distances use cached row norms and inner products, clamped at
    zero; the diagonal is exactly one.
    """

    def __init__(self, spec: KernelSpec, ds: Dataset):
        X = ds.X
        if not np.all(np.isfinite(X.data)):
            raise ValueError("non-finite feature value")
        self.spec = spec
        self.d = ds.d
        if X.shape[0] * X.shape[1] * 8 <= _DENSE_CACHE_BYTES:
            self._X = X.toarray()
            self.sqnorms = np.einsum("ij,ij->i", self._X, self._X)
        else:
            self._X = X
            self.sqnorms = np.asarray(X.multiply(X).sum(axis=1)).ravel()

    @property
    def shape(self):
        return (self.d, self.d)

    def _check(self, idx):
        idx = np.asarray(idx, dtype=np.intp).ravel()
        if idx.size and (idx.min() < 0 or idx.max() >= self.d):
            raise IndexError(f"kernel index out of range [0, {self.d})")
        return idx

    def block(self, rows, cols) -> np.ndarray:
        rows = self._check(rows)
        cols = self._check(cols)
        if rows.size == 0 or cols.size == 0:
            return np.zeros((rows.size, cols.size))
        G = self._X[rows] @ self._X[cols].T
        if sp.issparse(G):
            G = G.toarray()
        D2 = self.sqnorms[rows, None] + self.sqnorms[None, cols] - 2.0 * np.asarray(G)
        np.maximum(D2, 0.0, out=D2)
        D2[rows[:, None] == cols[None, :]] = 0.0
        return np.exp(-self.spec.gamma * D2)

    def entry(self, i: int, j: int) -> float:
        return float(self.block([i], [j])[0, 0])

    def diag_block(self, idx) -> np.ndarray:
        """Symmetric block K(idx, idx)."""
        B = self.block(idx, idx)
        B = 0.5 * (B + B.T)
        np.fill_diagonal(B, 1.0)
        return B


def eval_block(spec: KernelSpec, ds: Dataset, rows, cols) -> np.ndarray:
    return KernelMatrix(spec, ds).block(rows, cols)


def _features(A):
    return A.X if isinstance(A, Dataset) else sp.csr_matrix(A, dtype=np.float64)


def cross_kernel(spec: KernelSpec, A, B, chunk: int = 2048) -> np.ndarray:
    """K(a_i, b_j) between the rows of two datasets or feature matrices."""
    XA, XB = _features(A), _features(B)
    n = max(XA.shape[1], XB.shape[1])
    XA, XB = _widen(XA, n), _widen(XB, n)
    if not (np.all(np.isfinite(XA.data)) and np.all(np.isfinite(XB.data))):
        raise ValueError("non-finite feature value")
    nb = np.asarray(XB.multiply(XB).sum(axis=1)).ravel()
    dense = (XB.shape[0] + chunk) * n * 8 <= _DENSE_CACHE_BYTES
    if dense:
        XB = XB.toarray()
    out = np.empty((XA.shape[0], XB.shape[0]))
    gamma = spec.gamma
    for lo in range(0, XA.shape[0], chunk):
        Xa = XA[lo:lo + chunk]
        na = np.asarray(Xa.multiply(Xa).sum(axis=1)).ravel()
        G = Xa.toarray() @ XB.T if dense else (Xa @ XB.T).toarray()
        D2 = na[:, None] + nb[None, :] - 2.0 * G
        np.maximum(D2, 0.0, out=D2)
        out[lo:lo + chunk] = np.exp(-gamma * D2)
    return out


def dense_kernel(spec: KernelSpec, ds: Dataset,
                 cap: int = DEFAULT_ORACLE_CAP) -> np.ndarray:
    """Full symmetric kernel matrix; refuses d above ``cap``."""
    if ds.d > cap:
        raise OracleCapError(
            f"dense kernel of d={ds.d} exceeds oracle cap {cap}; subsample first")
    calls["dense_kernel"] += 1
    return KernelMatrix(spec, ds).diag_block(np.arange(ds.d))
