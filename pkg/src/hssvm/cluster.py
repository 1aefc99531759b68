"""Recursive PCA-median bisection defining the HSS block hierarchy."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataset import Dataset, Permutation
from .rng import stream

POWER_ITERATIONS = 20
MIN_LEAF_SIZE = 16


@dataclass
class Node:
    lo: int
    hi: int
    parent: int = -1
    left: int = -1
    right: int = -1
    level: int = 0

    @property
    def size(self) -> int:
        return self.hi - self.lo

    @property
    def is_leaf(self) -> bool:
        return self.left < 0


@dataclass
class ClusterTree:
    """Binary tree over contiguous ranges of the permuted point ordering.

    ``nodes[0]`` is the root; children always have larger ids than their
    parent, so iterating ids in reverse is a valid bottom-up order.
    """

    nodes: list[Node]
    leaf_size: int
    d: int = field(init=False)

    def __post_init__(self):
        self.d = self.nodes[0].hi if self.nodes else 0

    def __len__(self):
        return len(self.nodes)

    @property
    def root(self) -> Node:
        return self.nodes[0]

    def leaves(self) -> list[int]:
        return [i for i, n in enumerate(self.nodes) if n.is_leaf]

    def depth(self) -> int:
        return max(n.level for n in self.nodes)

    def sibling(self, i: int) -> int:
        p = self.nodes[self.nodes[i].parent]
        return p.right if p.left == i else p.left

    def far_ranges(self, i: int) -> list[tuple[int, int]]:
        """Ranges of the siblings of ``i`` and of each ancestor below the root.

        Together they tile the complement of node ``i``'s range, nearest
        (smallest) first.
        """
        out = []
        while self.nodes[i].parent >= 0:
            s = self.nodes[self.sibling(i)]
            out.append((s.lo, s.hi))
            i = self.nodes[i].parent
        return out

    def validate(self) -> None:
        root = self.root
        assert root.lo == 0 and root.hi == self.d
        for n in self.nodes:
            if n.is_leaf:
                assert 1 <= n.size <= self.leaf_size or self.d == 0
            else:
                a, b = self.nodes[n.left], self.nodes[n.right]
                assert a.lo == n.lo and a.hi == b.lo and b.hi == n.hi


def _top_direction(P, rng: np.random.Generator) -> np.ndarray | None:
    """Leading right singular vector of the centred points (power method)."""
    mu = np.asarray(P.mean(axis=0)).ravel()
    v = rng.standard_normal(P.shape[1])
    nv = np.linalg.norm(v)
    if nv == 0:
        return None
    v /= nv
    for _ in range(POWER_ITERATIONS):
        u = np.asarray(P @ v).ravel() - mu @ v
        w = np.asarray(P.T @ u).ravel() - mu * u.sum()
        nw = np.linalg.norm(w)
        if nw == 0 or not np.isfinite(nw):
            return None
        v = w / nw
    return v


def build_tree(ds: Dataset, leaf_size: int = 128, seed: int = 42):
    """Bisect recursively at the median projection onto the top principal axis.

    Returns ``(tree, perm)`` where ``perm.forward[i]`` is the original index
    of the point at tree position ``i``.
    """
    if leaf_size < MIN_LEAF_SIZE:
        raise ValueError(f"leaf_size must be >= {MIN_LEAF_SIZE}")
    if ds.d < 1:
        raise ValueError("cannot cluster an empty dataset")
    X = ds.X.toarray() if ds.d * ds.num_features * 8 <= 256 * 2**20 else ds.X
    order = np.arange(ds.d)
    nodes = [Node(0, ds.d)]
    todo = [0]
    while todo:
        i = todo.pop()
        node = nodes[i]
        if node.size <= leaf_size:
            continue
        idx = order[node.lo:node.hi]
        P = X[idx]
        v = _top_direction(P, stream(seed, "cluster", i))
        half = node.size // 2
        if v is not None:
            proj = np.asarray(P @ v).ravel()
            spread = proj.max() - proj.min()
            scale = max(np.abs(proj).max(), 1.0)
            if spread > 1e-12 * scale:
                order[node.lo:node.hi] = idx[np.argsort(proj, kind="stable")]
        # constant projections keep the current order: an even split by index
        mid = node.lo + half
        node.left = len(nodes)
        node.right = len(nodes) + 1
        nodes.append(Node(node.lo, mid, parent=i, level=node.level + 1))
        nodes.append(Node(mid, node.hi, parent=i, level=node.level + 1))
        todo.extend([node.right, node.left])
    return ClusterTree(nodes, leaf_size), Permutation.from_forward(order)
