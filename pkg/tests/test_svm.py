import io

import numpy as np
import pytest
import scipy.sparse as sp

from hssvm import dataset, hss, kernel, oracle, svm
from hssvm.cluster import build_tree
from hssvm.kernel import KernelMatrix, KernelSpec
from hssvm.svm import SvmModel, TrainConfig

from conftest import blobs

FAST = TrainConfig(leaf_size=16)


def exact_hss(ds, h):
    tree, perm = build_tree(ds, 16, 0)
    pds = dataset.apply_permutation(ds, perm)
    m = hss.compress(KernelMatrix(KernelSpec(h), pds), tree, 0.0, 0.0, ds.d)
    return m, pds


def stub_model(bias):
    return SvmModel(KernelSpec(1.0), sp.csr_matrix((0, 2)), np.zeros(0), bias, 1.0)


def separable(n=40, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-1, 1, (n, 2))
    X[:, 0] += np.where(np.arange(n) % 2, 1.5, -1.5)
    return dataset.from_arrays(X, np.where(np.arange(n) % 2, 1, -1))


def test_bias_mirrored_pair():
    ds = dataset.from_arrays([[-1.0, 0.0], [1.0, 0.0]], [1, -1])
    m, pds = exact_hss(ds, 1.0)
    assert svm.compute_bias(m, np.array([0.5, 0.5]), pds.y, 1.0) == pytest.approx(0.0, abs=1e-15)


def test_bias_single_margin_vector():
    ds = dataset.from_arrays(np.random.default_rng(1).standard_normal((4, 2)), [1, -1, -1, 1])
    m, pds = exact_hss(ds, 1.0)
    K = kernel.dense_kernel(KernelSpec(1.0), pds)
    z = np.array([0.4, 1.0, 0.0, 1.0])
    y = pds.y.astype(float)
    direct = y[0] - sum(y[i] * z[i] * K[i, 0] for i in range(4))
    assert svm.compute_bias(m, z, y, 1.0) == pytest.approx(direct, abs=1e-14)


def test_bias_matches_dense_oracle():
    ds = blobs(60, 3)
    tree, perm = build_tree(ds, 16, 42)
    pds = dataset.apply_permutation(ds, perm)
    m = hss.compress(KernelMatrix(KernelSpec(1.0), pds), tree, 1e-2, 1e-3, 30)
    z = np.random.default_rng(2).uniform(-0.2, 1.2, 60).clip(0, 1)
    y = pds.y.astype(float)
    ref = oracle.dense_bias(m.assemble_dense(), z, y, 1.0)
    assert svm.compute_bias(m, z, y, 1.0) == pytest.approx(ref, abs=1e-8)


def test_bias_fallbacks():
    m, pds = exact_hss(blobs(20, 0), 1.0)
    assert svm.compute_bias(m, np.zeros(20), pds.y, 1.0) == 0.0
    assert svm.margin_set(np.full(3, 2.0), 2.0).all()   # all at C: use every SV


@pytest.mark.parametrize("value,label", [(2.5, 1), (-0.1, -1), (0.0, 1)])
def test_sign_rule(value, label):
    assert svm.sign_label(value) == label
    assert svm.predict(stub_model(value), np.zeros(2)) == label


def test_separable_toy():
    ds = separable()
    model = svm.train(ds, 1.0, 10.0, FAST)
    assert svm.evaluate(model, ds) == 100.0
    K = kernel.dense_kernel(KernelSpec(1.0), ds)
    sol = oracle.solve_qp_dense(K, ds.y.astype(float), 10.0)
    b = oracle.dense_bias(K, sol.x, ds.y, 10.0)
    ref = np.where(K @ (ds.y * sol.x) + b >= 0, 1, -1)
    assert np.array_equal(model.predict(ds), ref)


def test_evaluate_examples(heart):
    ds = separable()
    perfect = svm.train(ds, 1.0, 10.0, FAST)
    assert svm.evaluate(perfect, ds) == 100.0
    # constant +1 predictor on a label vector with 3846 positives out of 16281
    y = -np.ones(16281, dtype=int)
    y[np.random.default_rng(0).choice(16281, 3846, replace=False)] = 1
    test = dataset.from_arrays(sp.csr_matrix((16281, 2)), y)
    assert svm.evaluate(stub_model(1.0), test) == pytest.approx(23.62, abs=5e-3)
    model = svm.train(heart, 1.0, 1.0, TrainConfig(leaf_size=32))
    shuffled = dataset.apply_permutation(
        heart, dataset.Permutation.from_forward(np.random.default_rng(5).permutation(heart.d)))
    assert svm.evaluate(model, heart) == svm.evaluate(model, shuffled)
    with pytest.raises(ValueError):
        svm.evaluate(model, heart.take([]))


def test_grid_counts_and_rows(heart):
    train, test = dataset.random_split(heart, 0.3, 1)
    res = svm.train_grid(train, test, [0.1, 1, 10], [0.1, 1, 10], TrainConfig(leaf_size=32))
    assert len(res.rows) == 9 and not res.failed
    c = res.counters
    assert (c.compressions, c.factorizations, c.admm_runs) == (3, 3, 9)
    for r in res.rows:
        model = res.models[(r.h, r.C)]
        pred = np.array([svm.predict(model, test.X[i]) for i in range(test.d)])
        assert r.accuracy_pct == 100.0 * np.count_nonzero(pred == test.y) / test.d


def test_grid_single_h(heart):
    train, test = dataset.random_split(heart, 0.3, 1)
    res = svm.train_grid(train, test, [1.0], [0.1, 1, 10], TrainConfig(leaf_size=32))
    c = res.counters
    assert (c.compressions, c.factorizations, c.admm_runs) == (1, 1, 3)


def test_grid_threads_same_rows(heart):
    train, test = dataset.random_split(heart, 0.3, 2)
    cfg = TrainConfig(leaf_size=32)
    a = svm.train_grid(train, test, [0.5, 1, 2], [1, 10], cfg, threads=1)
    b = svm.train_grid(train, test, [0.5, 1, 2], [1, 10], cfg, threads=3)
    assert [(r.h, r.C, r.accuracy_pct) for r in a.rows] == \
        [(r.h, r.C, r.accuracy_pct) for r in b.rows]


def test_grid_failed_cell_continues(heart, monkeypatch):
    real = svm.prepare

    def flaky(train, h, cfg):
        if h == 0.5:
            raise hss.FactorizationError(3)
        return real(train, h, cfg)
    monkeypatch.setattr(svm, "prepare", flaky)
    train, test = dataset.random_split(heart, 0.3, 1)
    res = svm.train_grid(train, test, [0.5, 1.0], [1.0], TrainConfig(leaf_size=32))
    assert res.failed and len(res.rows) == 2
    assert res.rows[0].error and np.isnan(res.rows[0].accuracy_pct)
    assert res.rows[1].error is None
    with pytest.raises(ValueError):
        svm.train_grid(train, test, [], [1.0])


def test_training_path_is_structured(heart, monkeypatch):
    before = kernel.calls["dense_kernel"], kernel.calls["oracle"]

    def boom(*a, **k):
        raise AssertionError("dense path used during training")
    monkeypatch.setattr(hss.HssMatrix, "assemble_dense", boom)
    svm.train(heart, 1.0, 1.0, TrainConfig(leaf_size=32))
    assert (kernel.calls["dense_kernel"], kernel.calls["oracle"]) == before


def test_model_round_trip(heart):
    model = svm.train(heart, 1.0, 10.0, TrainConfig(leaf_size=32))
    buf = io.BytesIO()
    svm.save_model(model, buf)
    again = svm.load_model(io.BytesIO(buf.getvalue()))
    assert np.array_equal(model.decision_function(heart), again.decision_function(heart))
    assert again.meta["max_it"] == 10 and again.C == 10.0
    with pytest.raises(ValueError):
        svm.load_model(io.BytesIO(b"NOPE" + buf.getvalue()[4:]))
    with pytest.raises(ValueError):
        svm.load_model(io.BytesIO(buf.getvalue()[:-9]))


def test_support_vector_threshold():
    ds = separable(10)
    model = svm.build_model(ds, np.r_[1e-13, 0.5, np.zeros(8)], 0.0, KernelSpec(1.0), 1.0)
    assert model.n_support == 1 and model.coeffs[0] == 0.5 * ds.y[1]


def test_csv_format():
    res = svm.GridResult([svm.GridRow(0.1, 10, 84.0, 1.23456, 0.5, 0.01, 1.5, 7)], {},
                         svm.GridCounters())
    buf = io.StringIO()
    res.write_csv(buf)
    assert buf.getvalue().splitlines() == [
        "h,C,accuracy_pct,compress_s,factor_s,admm_s,memory_mb,hss_rank",
        "0.1,10,84,1.235,0.500,0.010,1.5,7"]
    buf = io.StringIO()
    res.write_csv(buf, timings=False)
    assert buf.getvalue().splitlines()[1] == "0.1,10,84,0.000,0.000,0.000,1.5,7"


def test_parity_with_exact_qp_heart(heart):
    # small-scale stand-in for the ijcnn1 parity check; split seed is fixed
    tr, te = dataset.random_split(heart, 0.3, 1)
    res = svm.train_grid(tr, te, [1.0, 10.0], [1.0, 10.0], TrainConfig(leaf_size=32))
    y = tr.y.astype(float)
    for r in res.rows:
        K = kernel.dense_kernel(KernelSpec(r.h), tr)
        sol = oracle.solve_qp_dense(K, y, r.C)
        b = oracle.dense_bias(K, sol.x, y, r.C)
        keep = sol.x > svm.SV_THRESHOLD
        ref = svm.SvmModel(KernelSpec(r.h), tr.X[keep], y[keep] * sol.x[keep], b, r.C)
        assert abs(r.accuracy_pct - svm.evaluate(ref, te)) <= 3.0
