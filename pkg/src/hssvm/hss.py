"""Symmetric HSS compression of kernel matrices and shifted ULV solves.

The representation uses nested interpolative bases.  For a node ``i`` with
index range ``I_i`` the off-diagonal block row is approximated as

    K(I_i, I_i^c) ~= U_i K(J_i, I_i^c)

where ``J_i`` is a set of skeleton rows.  Leaves store ``U_i`` explicitly;
inner nodes store a translation ``R_i`` with ``U_i = diag(U_a, U_b) R_i``
and select their skeleton from the children's skeletons.  Sibling
couplings are exact kernel entries ``B = K(J_a, J_b)``, which makes the
approximation symmetric by construction.

Everything is expressed in the tree ordering: index ``t`` refers to the
point at position ``t`` of the cluster permutation.
"""
from __future__ import annotations

import logging
import struct
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .cluster import ClusterTree, Node
from .dataset import Permutation
from .kernel import DEFAULT_ORACLE_CAP, OracleCapError
from .rng import stream

log = logging.getLogger(__name__)

_EPS = np.finfo(np.float64).eps


class FactorizationError(np.linalg.LinAlgError):
    def __init__(self, node: int, msg: str = "singular reduced block"):
        super().__init__(f"node {node}: {msg}; retry with a larger beta")
        self.node = node


@dataclass
class NodeAudit:
    """What the truncation rule saw at one node."""

    sigma: np.ndarray
    threshold: float
    rank: int
    capped: bool
    exhaustive: bool
    n_cols: int
    deficient: bool = False

    def obeyed(self) -> bool:
        nxt = self.sigma[self.rank] if self.rank < self.sigma.size else 0.0
        return nxt <= self.threshold or self.capped or self.deficient


@dataclass
class HssMatrix:
    tree: ClusterTree
    D: list
    U: list
    B: list
    skel: list
    rel_tol: float = 0.0
    abs_tol: float = 0.0
    max_rank: int = 0
    audit: list = field(default_factory=list)
    perm: Permutation | None = None

    @property
    def d(self) -> int:
        return self.tree.d

    @property
    def shape(self):
        return (self.d, self.d)

    @property
    def ranks(self) -> list[int]:
        return [0 if s is None else len(s) for s in self.skel]

    @property
    def hss_rank(self) -> int:
        return max(self.ranks[1:], default=0)

    @property
    def memory_bytes(self) -> int:
        total = 0
        for arrs in (self.D, self.U, self.B, self.skel):
            total += sum(a.nbytes for a in arrs if a is not None)
        return total

    def matvec(self, v) -> np.ndarray:
        """K~ v (or K~ V for a 2-D block of vectors)."""
        v = np.asarray(v, dtype=np.float64)
        if v.shape[0] != self.d:
            raise ValueError(f"vector of length {v.shape[0]} for d={self.d}")
        V = v.reshape(self.d, -1)
        nodes = self.tree.nodes
        n = len(nodes)
        up = [None] * n
        for i in range(n - 1, 0, -1):
            nd = nodes[i]
            if nd.is_leaf:
                up[i] = self.U[i].T @ V[nd.lo:nd.hi]
            else:
                up[i] = self.U[i].T @ np.vstack((up[nd.left], up[nd.right]))
        down = [None] * n
        out = np.empty_like(V)
        for i in range(n):
            nd = nodes[i]
            if nd.is_leaf:
                y = self.D[i] @ V[nd.lo:nd.hi]
                if i:
                    y += self.U[i] @ down[i]
                out[nd.lo:nd.hi] = y
                continue
            a, b = nd.left, nd.right
            ga = self.B[i] @ up[b]
            gb = self.B[i].T @ up[a]
            if i:
                g = self.U[i] @ down[i]
                ka = ga.shape[0]
                ga += g[:ka]
                gb += g[ka:]
            down[a], down[b] = ga, gb
        return out.reshape(v.shape)

    __matmul__ = matvec

    def assemble_dense(self, cap: int = DEFAULT_ORACLE_CAP) -> np.ndarray:
        """Materialize K~ column by column (test oracle only)."""
        if self.d > cap:
            raise OracleCapError(f"d={self.d} exceeds oracle cap {cap}")
        return self.matvec(np.eye(self.d))


def _sample_columns(tree: ClusterTree, i: int, max_rank: int, seed: int):
    """Columns of node ``i``'s far field used to build its basis.

    The sample budget is split evenly over the far ranges (sibling first,
    then each ancestor's sibling), which biases it toward nearby points;
    small far fields are taken whole.
    """
    far = tree.far_ranges(i)
    total = sum(hi - lo for lo, hi in far)
    omega = 2 * max_rank + 10
    if total <= 3 * max_rank or total <= omega:
        return np.concatenate([np.arange(lo, hi) for lo, hi in far]), True
    rng = stream(seed, "hss", i)
    by_size = sorted(range(len(far)), key=lambda r: far[r][1] - far[r][0])
    take = [0] * len(far)
    remaining = omega
    for pos, r in enumerate(by_size):
        lo, hi = far[r]
        take[r] = min(remaining // (len(far) - pos), hi - lo)
        remaining -= take[r]
    cols = []
    for (lo, hi), t in zip(far, take):
        if t == hi - lo:
            cols.append(np.arange(lo, hi))
        elif t:
            cols.append(lo + rng.choice(hi - lo, size=t, replace=False))
    return np.sort(np.concatenate(cols)), False


def _row_id(A: np.ndarray, k: int):
    """Row interpolative decomposition ``A ~= X A[J]`` of rank <= k.

    Returns ``(J, X, deficient)``; ``deficient`` is set when pivoted QR
    finds fewer than ``k`` numerically independent rows.
    """
    n = A.shape[0]
    if k == 0:
        return np.zeros(0, dtype=np.intp), np.zeros((n, 0)), False
    if k >= n:
        return np.arange(n), np.eye(n), False
    _, R, P = sla.qr(A.T, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    floor = max(A.shape) * _EPS * diag[0]
    deficient = False
    while k > 0 and diag[k - 1] <= floor:
        k -= 1
        deficient = True
    X = np.zeros((n, k))
    X[P[:k], np.arange(k)] = 1.0
    if k:
        T = sla.solve_triangular(R[:k, :k], R[:k, k:])
        X[P[k:]] = T.T
    return P[:k].copy(), X, deficient


def _truncation_rank(A: np.ndarray, rel_tol, abs_tol, max_rank):
    if A.size == 0:
        return 0, np.zeros(0), abs_tol, False
    s = sla.svdvals(A)
    # values at working-precision noise level are never kept
    floor = max(A.shape) * _EPS * s[0]
    threshold = max(abs_tol, rel_tol * s[0], floor)
    k_tol = int(np.count_nonzero(s > threshold))
    return min(k_tol, max_rank), s, threshold, k_tol > max_rank


def compress(accessor, tree: ClusterTree, rel_tol: float = 1.0,
             abs_tol: float = 0.1, max_rank: int = 200,
             seed: int = 42) -> HssMatrix:
    """Bottom-up HSS compression of the matrix served by ``accessor``.

    ``accessor`` must provide ``block(rows, cols)`` and ``diag_block(idx)``
    in tree ordering.  A node's rank is the smallest ``k`` with
    ``sigma_{k+1} <= max(abs_tol, rel_tol * sigma_1)`` over the sampled
    interaction, capped at ``max_rank``.
    """
    if rel_tol < 0 or abs_tol < 0:
        raise ValueError("tolerances must be non-negative")
    if max_rank < 1:
        raise ValueError("max_rank must be positive")
    nodes = tree.nodes
    n = len(nodes)
    D, U, B, skel = [None] * n, [None] * n, [None] * n, [None] * n
    audit = [None] * n
    for i in range(n - 1, -1, -1):
        nd = nodes[i]
        if nd.is_leaf:
            rows = np.arange(nd.lo, nd.hi)
            D[i] = accessor.diag_block(rows)
        else:
            a, b = nd.left, nd.right
            rows = np.concatenate((skel[a], skel[b]))
            B[i] = accessor.block(skel[a], skel[b])
        if i == 0:
            break
        cols, exhaustive = _sample_columns(tree, i, max_rank, seed)
        A = accessor.block(rows, cols)
        k, sigma, thr, capped = _truncation_rank(A, rel_tol, abs_tol, max_rank)
        J, X, deficient = _row_id(A, k)
        if capped:
            log.warning("node %d: rank cap %d reached before tolerance", i, max_rank)
        skel[i] = rows[J]
        U[i] = X
        audit[i] = NodeAudit(sigma, thr, len(J), capped, exhaustive, cols.size,
                             deficient)
    return HssMatrix(tree, D, U, B, skel, rel_tol, abs_tol, max_rank, audit)


class _DenseFactor:
    """Cholesky with LU fallback for a small dense reduced block."""

    def __init__(self, A: np.ndarray, node: int):
        self.n = A.shape[0]
        self.chol = None
        self.lu = None
        if self.n == 0:
            return
        if not np.all(np.isfinite(A)):
            raise FactorizationError(node, "non-finite reduced block")
        try:
            self.chol = sla.cho_factor(A, lower=True, check_finite=False)
            return
        except np.linalg.LinAlgError:
            pass
        with warnings.catch_warnings():
            # singularity is judged from the pivots below
            warnings.simplefilter("ignore", sla.LinAlgWarning)
            lu, piv = sla.lu_factor(A, check_finite=False)
        d = np.abs(np.diag(lu))
        if d.min() <= self.n * _EPS * max(d.max(), 1.0):
            raise FactorizationError(node)
        self.lu = (lu, piv)

    def solve(self, b: np.ndarray) -> np.ndarray:
        if self.n == 0:
            return b.copy()
        if self.chol is not None:
            return sla.cho_solve(self.chol, b, check_finite=False)
        return sla.lu_solve(self.lu, b, check_finite=False)

    @property
    def nbytes(self) -> int:
        f = self.chol[0] if self.chol is not None else (self.lu[0] if self.lu else None)
        return 0 if f is None else f.nbytes


@dataclass
class _NodeFactor:
    Q: np.ndarray
    k: int
    Dke: np.ndarray
    W: np.ndarray
    fac: _DenseFactor


class ShiftedFactorization:
    """ULV-style factorization of ``K~ + beta I``.

    Each node rotates its basis onto ``k`` rows with an orthogonal ``Q``,
    eliminates the remaining rows locally, and passes the ``k x k`` Schur
    complement to its parent.  Only generator-sized blocks are touched.
    """

    def __init__(self, m: HssMatrix, beta: float):
        if not beta > 0:
            raise ValueError("beta must be positive")
        t0 = time.perf_counter()
        self.hss = m
        self.beta = float(beta)
        nodes = m.tree.nodes
        n = len(nodes)
        self._nodes: list = [None] * n
        S = [None] * n
        Rk = [None] * n
        for i in range(n - 1, -1, -1):
            nd = nodes[i]
            if nd.is_leaf:
                Dl = m.D[i] + self.beta * np.eye(nd.size)
                Ul = m.U[i]
            else:
                a, b = nd.left, nd.right
                C = Rk[a] @ m.B[i] @ Rk[b].T
                Dl = np.block([[S[a], C], [C.T, S[b]]])
                if i:
                    Ul = sla.block_diag(Rk[a], Rk[b]) @ m.U[i]
                S[a] = S[b] = Rk[a] = Rk[b] = None
            if i == 0:
                self._root = _DenseFactor(Dl, 0)
                break
            nl, k = Ul.shape
            if k == 0:
                Q = np.eye(nl)
                Rk[i] = np.zeros((0, 0))
            else:
                Q, Rfull = sla.qr(Ul, mode="full")
                Rk[i] = Rfull[:k]
            Dh = Q.T @ Dl @ Q
            Dh = 0.5 * (Dh + Dh.T)
            Dkk, Dke, Dee = Dh[:k, :k], Dh[:k, k:], Dh[k:, k:]
            fac = _DenseFactor(Dee, i)
            W = fac.solve(Dke.T)
            Sk = Dkk - Dke @ W
            S[i] = 0.5 * (Sk + Sk.T)
            self._nodes[i] = _NodeFactor(Q, k, Dke, W, fac)
        self.factor_seconds = time.perf_counter() - t0

    @property
    def d(self) -> int:
        return self.hss.d

    @property
    def memory_bytes(self) -> int:
        total = self._root.nbytes
        for nf in self._nodes:
            if nf is not None:
                total += nf.Q.nbytes + nf.Dke.nbytes + nf.W.nbytes + nf.fac.nbytes
        return total

    def shifted_matvec(self, x) -> np.ndarray:
        return self.hss.matvec(x) + self.beta * np.asarray(x, dtype=np.float64)

    def solve(self, b) -> np.ndarray:
        """x with (K~ + beta I) x = b; ``b`` may hold several columns."""
        b = np.asarray(b, dtype=np.float64)
        if b.shape[0] != self.d:
            raise ValueError(f"right-hand side of length {b.shape[0]} for d={self.d}")
        Bm = b.reshape(self.d, -1)
        nodes = self.hss.tree.nodes
        n = len(nodes)
        red = [None] * n
        ye = [None] * n
        x_root = None
        for i in range(n - 1, -1, -1):
            nd = nodes[i]
            if nd.is_leaf:
                r = Bm[nd.lo:nd.hi]
            else:
                r = np.vstack((red[nd.left], red[nd.right]))
                red[nd.left] = red[nd.right] = None
            if i == 0:
                x_root = self._root.solve(r)
                break
            nf = self._nodes[i]
            rh = nf.Q.T @ r
            k = nf.k
            ye[i] = nf.fac.solve(rh[k:])
            red[i] = rh[:k] - nf.Dke @ ye[i]
        out = np.empty_like(Bm)
        xk = [None] * n
        for i in range(n):
            nd = nodes[i]
            if i == 0:
                xl = x_root
            else:
                nf = self._nodes[i]
                xe = ye[i] - nf.W @ xk[i]
                xl = nf.Q @ np.vstack((xk[i], xe))
            if nd.is_leaf:
                out[nd.lo:nd.hi] = xl
            else:
                ka = self._nodes[nd.left].k
                xk[nd.left], xk[nd.right] = xl[:ka], xl[ka:]
        return out.reshape(b.shape)


def factor_shifted(m: HssMatrix, beta: float) -> ShiftedFactorization:
    return ShiftedFactorization(m, beta)


def solve(f: ShiftedFactorization, b) -> np.ndarray:
    return f.solve(b)


def matvec(m: HssMatrix, v) -> np.ndarray:
    return m.matvec(v)


def assemble_dense(m: HssMatrix, cap: int = DEFAULT_ORACLE_CAP) -> np.ndarray:
    return m.assemble_dense(cap)


# -- binary container ------------------------------------------------------

_MAGIC = b"HSS1"
_VERSION = 1
_HEADER = struct.Struct("<4sIQQQQddQB")
_NODE = struct.Struct("<qqqqqq")


def _put(buf: list, arr: np.ndarray, dtype: str):
    buf.append(np.ascontiguousarray(arr, dtype=dtype).tobytes())


def dump(m: HssMatrix, fh) -> None:
    """Write ``m`` as a little-endian ``HSS1`` container."""
    nodes = m.tree.nodes
    has_perm = m.perm is not None
    parts = [_HEADER.pack(_MAGIC, _VERSION, m.d, m.tree.leaf_size, m.hss_rank,
                          len(nodes), m.rel_tol, m.abs_tol, m.max_rank,
                          int(has_perm))]
    for i, nd in enumerate(nodes):
        k = -1 if m.skel[i] is None else len(m.skel[i])
        parts.append(_NODE.pack(nd.lo, nd.hi, nd.parent, nd.left, nd.right, k))
    if has_perm:
        _put(parts, m.perm.forward, "<i8")
    for i, nd in enumerate(nodes):
        if m.skel[i] is not None:
            _put(parts, m.skel[i], "<i8")
            _put(parts, m.U[i], "<f8")
        if nd.is_leaf:
            _put(parts, m.D[i], "<f8")
        else:
            _put(parts, m.B[i], "<f8")
    fh.write(b"".join(parts))


def load(fh) -> HssMatrix:
    try:
        return _load(fh.read())
    except struct.error as exc:
        raise ValueError(f"truncated HSS1 container: {exc}") from None


def _load(data: bytes) -> HssMatrix:
    if len(data) < _HEADER.size:
        raise ValueError("truncated HSS1 container")
    head = _HEADER.unpack_from(data, 0)
    magic, version, d, leaf_size, _, n_nodes, rel_tol, abs_tol, max_rank, has_perm = head
    if magic != _MAGIC:
        raise ValueError("not an HSS1 container")
    if version != _VERSION:
        raise ValueError(f"unsupported HSS1 version {version}")
    off = _HEADER.size
    nodes, ks = [], []
    for _ in range(n_nodes):
        lo, hi, parent, left, right, k = _NODE.unpack_from(data, off)
        off += _NODE.size
        nodes.append(Node(lo, hi, parent, left, right))
        ks.append(k)
    for nd in nodes[1:]:
        nd.level = nodes[nd.parent].level + 1

    def take(count, dtype):
        nonlocal off
        arr = np.frombuffer(data, dtype=dtype, count=count, offset=off).copy()
        off += arr.nbytes
        return arr

    perm = Permutation.from_forward(take(d, "<i8")) if has_perm else None
    tree = ClusterTree(nodes, leaf_size)
    n = len(nodes)
    D, U, B, skel = [None] * n, [None] * n, [None] * n, [None] * n
    for i, nd in enumerate(nodes):
        if ks[i] >= 0:
            skel[i] = take(ks[i], "<i8").astype(np.intp)
            rows = nd.size if nd.is_leaf else ks[nd.left] + ks[nd.right]
            U[i] = take(rows * ks[i], "<f8").reshape(rows, ks[i])
        if nd.is_leaf:
            D[i] = take(nd.size * nd.size, "<f8").reshape(nd.size, nd.size)
        else:
            B[i] = take(ks[nd.left] * ks[nd.right], "<f8").reshape(
                ks[nd.left], ks[nd.right])
    return HssMatrix(tree, D, U, B, skel, rel_tol, abs_tol, max_rank, [], perm)
