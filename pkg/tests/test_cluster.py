import math

import numpy as np
import pytest

from hssvm import dataset
from hssvm.cluster import build_tree
from hssvm.hss import compress
from hssvm.kernel import KernelMatrix, KernelSpec, dense_kernel


def two_blobs(n=50, gap=50.0, seed=0):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((n, 2))
    B = rng.standard_normal((n, 2)) + [gap, 0.0]
    X = np.empty((2 * n, 2))
    X[0::2], X[1::2] = A, B          # interleave so ordering alone cannot separate them
    blob = np.tile([0, 1], n)
    return dataset.from_arrays(X, np.where(blob == 0, 1, -1)), blob


def test_single_leaf():
    ds = dataset.from_arrays(np.random.default_rng(0).random((10, 3)), [1, -1] * 5)
    tree, perm = build_tree(ds, leaf_size=16)
    assert len(tree) == 1 and tree.root.is_leaf
    assert perm.forward.tolist() == list(range(10))


def test_blobs_split_at_root():
    ds, blob = two_blobs()
    tree, perm = build_tree(ds, leaf_size=64)
    root = tree.root
    for child in (tree.nodes[root.left], tree.nodes[root.right]):
        members = blob[perm.forward[child.lo:child.hi]]
        assert len(set(members.tolist())) == 1


def test_ranges_tile():
    ds = dataset.from_arrays(np.random.default_rng(1).standard_normal((257, 5)),
                             np.where(np.arange(257) % 3, 1, -1))
    tree, perm = build_tree(ds, leaf_size=64)
    tree.validate()
    leaves = sorted((tree.nodes[i].lo, tree.nodes[i].hi) for i in tree.leaves())
    assert leaves[0][0] == 0 and leaves[-1][1] == 257
    assert all(a[1] == b[0] for a, b in zip(leaves, leaves[1:]))
    assert all(1 <= hi - lo <= 64 for lo, hi in leaves)
    assert sorted(perm.forward.tolist()) == list(range(257))


@pytest.mark.parametrize("d,leaf", [(1000, 16), (3000, 128), (513, 32)])
def test_depth_bound(d, leaf):
    ds = dataset.from_arrays(np.random.default_rng(d).standard_normal((d, 4)), np.ones(d))
    tree, _ = build_tree(ds, leaf_size=leaf)
    assert tree.depth() <= math.ceil(math.log2(d / leaf)) + 2


def test_constant_points_even_split():
    ds = dataset.from_arrays(np.ones((100, 3)), np.ones(100))
    tree, perm = build_tree(ds, leaf_size=16)
    tree.validate()
    assert perm.forward.tolist() == list(range(100))
    assert tree.depth() <= math.ceil(math.log2(100 / 16)) + 2


def test_deterministic():
    ds = dataset.from_arrays(np.random.default_rng(5).standard_normal((400, 3)), np.ones(400))
    _, p1 = build_tree(ds, 32, seed=3)
    _, p2 = build_tree(ds, 32, seed=3)
    assert np.array_equal(p1.forward, p2.forward)


def test_leaf_size_minimum():
    ds = dataset.from_arrays(np.ones((4, 1)), np.ones(4))
    with pytest.raises(ValueError):
        build_tree(ds, leaf_size=8)


def test_far_clusters_decouple():
    ds, _ = two_blobs(n=64, gap=60.0)
    tree, perm = build_tree(ds, leaf_size=64)
    spec = KernelSpec(0.5)
    K = dense_kernel(spec, dataset.apply_permutation(ds, perm))
    a, b = tree.nodes[tree.root.left], tree.nodes[tree.root.right]
    assert K[a.lo:a.hi, b.lo:b.hi].max() < 1e-12
    m = compress(KernelMatrix(spec, dataset.apply_permutation(ds, perm)), tree,
                 rel_tol=1e-3, abs_tol=1e-6, max_rank=64)
    assert m.ranks[tree.root.left] == 0 and m.ranks[tree.root.right] == 0
