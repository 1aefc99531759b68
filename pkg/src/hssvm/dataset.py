"""Labeled sparse datasets in the ``label idx:val ...`` row format.

Rows are stored as a CSR matrix with 0-based columns; the text format is
1-based.  Datasets are treated as immutable once built.
"""
from __future__ import annotations

import io
import math
from dataclasses import dataclass
from typing import Iterable, TextIO

import numpy as np
import scipy.sparse as sp


class ParseError(ValueError):
    """Malformed row in a sparse-row text stream."""

    def __init__(self, lineno: int, msg: str):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


class ValidationError(ValueError):
    """Well-formed input that violates a dataset invariant."""


_LABELS = {"+1": 1, "-1": -1, "1": 1}


@dataclass(frozen=True)
class Dataset:
    X: sp.csr_matrix
    y: np.ndarray

    def __post_init__(self):
        if self.X.shape[0] != self.y.shape[0]:
            raise ValidationError(
                f"{self.X.shape[0]} rows but {self.y.shape[0]} labels")
        if self.y.size and not np.all(np.abs(self.y) == 1):
            raise ValidationError("labels must be -1 or +1")
        self.y.setflags(write=False)

    @property
    def d(self) -> int:
        return self.X.shape[0]

    @property
    def num_features(self) -> int:
        return self.X.shape[1]

    def __len__(self):
        return self.d

    def row(self, i: int) -> sp.csr_matrix:
        return self.X[i]

    def take(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.intp)
        return Dataset(self.X[idx], self.y[idx].copy())

    def with_num_features(self, n: int) -> "Dataset":
        """Widen (never narrow) the feature space to ``n`` columns."""
        if n < self.num_features:
            raise ValidationError(
                f"cannot shrink feature space from {self.num_features} to {n}")
        if n == self.num_features:
            return self
        X = sp.csr_matrix((self.X.data, self.X.indices, self.X.indptr),
                          shape=(self.d, n))
        return Dataset(X, self.y)


def from_arrays(X, y) -> Dataset:
    """Build a dataset from a dense or sparse matrix and a label vector."""
    X = sp.csr_matrix(X, dtype=np.float64)
    X.sort_indices()
    X.eliminate_zeros()
    return Dataset(X, np.asarray(y, dtype=np.int8).copy())


def _parse_label(tok: str, lineno: int, remap01: bool) -> int:
    if tok in _LABELS:
        return _LABELS[tok]
    if tok == "0":
        if remap01:
            return -1
        raise ValidationError(
            f"line {lineno}: label 0 requires the {{0,1}} remap flag")
    try:
        float(tok)
    except ValueError:
        raise ParseError(lineno, f"malformed label {tok!r}") from None
    raise ValidationError(f"line {lineno}: label {tok!r} not in {{-1,+1}}")


def parse_sparse_rows(stream: TextIO | Iterable[str], remap01: bool = False,
                      num_features: int | None = None) -> Dataset:
    """Parse ``label idx:val idx:val ...`` rows.

    Blank lines and lines starting with ``#`` are skipped.  Indices are
    1-based and must be strictly ascending within a row.  ``num_features``
    widens the feature space (e.g. to match a training set); it must not be
    smaller than the largest index seen.
    """
    indptr = [0]
    indices: list[int] = []
    values: list[float] = []
    labels: list[int] = []
    max_idx = 0
    for lineno, line in enumerate(stream, start=1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        toks = s.split()
        labels.append(_parse_label(toks[0], lineno, remap01))
        prev = 0
        for tok in toks[1:]:
            idx_s, sep, val_s = tok.partition(":")
            if not sep or not idx_s.isdigit():
                raise ParseError(lineno, f"malformed feature token {tok!r}")
            idx = int(idx_s)
            if idx < 1:
                raise ParseError(lineno, f"feature index {idx} < 1")
            if idx <= prev:
                raise ParseError(
                    lineno, f"feature index {idx} not ascending after {prev}")
            try:
                val = float(val_s)
            except ValueError:
                raise ParseError(lineno, f"malformed value {val_s!r}") from None
            if not math.isfinite(val):
                raise ParseError(lineno, f"non-finite value {val_s!r}")
            prev = idx
            indices.append(idx - 1)
            values.append(val)
        max_idx = max(max_idx, prev)
        indptr.append(len(indices))
    if num_features is None:
        num_features = max_idx
    elif num_features < max_idx:
        raise ValidationError(
            f"feature index {max_idx} exceeds num_features={num_features}")
    X = sp.csr_matrix(
        (np.asarray(values, dtype=np.float64),
         np.asarray(indices, dtype=np.int32),
         np.asarray(indptr, dtype=np.int64)),
        shape=(len(labels), num_features))
    return Dataset(X, np.asarray(labels, dtype=np.int8))


def load(path, remap01: bool = False, num_features: int | None = None) -> Dataset:
    with open(path, "r") as fh:
        return parse_sparse_rows(fh, remap01=remap01, num_features=num_features)


def write_sparse_rows(ds: Dataset, stream: TextIO) -> None:
    """Write ``ds`` with 17 significant digits so that parsing round-trips."""
    X = ds.X
    for i in range(ds.d):
        lo, hi = X.indptr[i], X.indptr[i + 1]
        parts = ["+1" if ds.y[i] > 0 else "-1"]
        parts.extend(f"{j + 1}:{v:.17g}"
                     for j, v in zip(X.indices[lo:hi], X.data[lo:hi]))
        stream.write(" ".join(parts) + "\n")


def dumps(ds: Dataset) -> str:
    buf = io.StringIO()
    write_sparse_rows(ds, buf)
    return buf.getvalue()


@dataclass(frozen=True)
class Permutation:
    """Bijection on ``{0..d-1}``; ``forward[i]`` is the source of slot ``i``."""

    forward: np.ndarray
    inverse: np.ndarray

    @classmethod
    def from_forward(cls, forward) -> "Permutation":
        forward = np.asarray(forward, dtype=np.intp).copy()
        n = forward.size
        inverse = np.full(n, -1, dtype=np.intp)
        if n and (forward.min() < 0 or forward.max() >= n):
            raise ValidationError("permutation entries out of range")
        inverse[forward] = np.arange(n)
        if np.any(inverse < 0):
            raise ValidationError("permutation has repeated entries")
        forward.setflags(write=False)
        inverse.setflags(write=False)
        return cls(forward, inverse)

    @classmethod
    def identity(cls, n: int) -> "Permutation":
        return cls.from_forward(np.arange(n))

    def __len__(self):
        return self.forward.size

    def inverted(self) -> "Permutation":
        return Permutation(self.inverse, self.forward)

    def then(self, other: "Permutation") -> "Permutation":
        """Permutation equal to applying ``self`` first and ``other`` second."""
        if len(other) != len(self):
            raise ValidationError("permutation sizes differ")
        return Permutation.from_forward(self.forward[other.forward])


def apply_permutation(ds: Dataset, p: Permutation) -> Dataset:
    if len(p) != ds.d:
        raise ValidationError(f"permutation of size {len(p)} for d={ds.d}")
    return ds.take(p.forward)


def random_split(ds: Dataset, test_fraction: float, seed: int):
    """Split rows into (train, test); the test part has round(fraction*d) rows."""
    if not 0.0 < test_fraction < 1.0:
        raise ValidationError("test_fraction must lie in (0, 1)")
    n_test = int(math.floor(test_fraction * ds.d + 0.5))
    if n_test == 0 or n_test == ds.d:
        raise ValidationError(
            f"split of d={ds.d} at {test_fraction} leaves an empty part")
    order = np.random.default_rng(seed).permutation(ds.d)
    test_idx = np.sort(order[:n_test])
    train_idx = np.sort(order[n_test:])
    return ds.take(train_idx), ds.take(test_idx)


def subsample(ds: Dataset, n: int, seed: int) -> Dataset:
    """Uniform sample of ``n`` rows without replacement, original order kept."""
    if n >= ds.d:
        return ds
    idx = np.sort(np.random.default_rng(seed).choice(ds.d, size=n, replace=False))
    return ds.take(idx)
