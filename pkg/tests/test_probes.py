import numpy as np
import pytest
from scipy.optimize import minimize

from countlab import model, probes
from countlab.errors import (DegenerateDataError, ShapeError,
                             StratificationError, TapError)

from conftest import small_net


def qp_reference(K, y, C):
    """Independent dual solver: SLSQP on the soft-margin QP."""
    n = len(y)
    y = np.asarray(y, dtype=np.float64)

    def neg_dual(a):
        ay = a * y
        return -(a.sum() - 0.5 * ay @ K @ ay)

    def neg_dual_grad(a):
        return -(np.ones(n) - y * (K @ (a * y)))

    res = minimize(neg_dual, np.full(n, C / 2), jac=neg_dual_grad,
                   bounds=[(0.0, C)] * n,
                   constraints=[{"type": "eq", "fun": lambda a: a @ y,
                                 "jac": lambda a: y}],
                   method="SLSQP", options={"maxiter": 500, "ftol": 1e-12})
    return res.x, -res.fun


def separable_blobs(seed=0, n_per=20, gap=4.0):
    rng = np.random.default_rng(seed)
    a = rng.normal(0, 0.5, (n_per, 2)) + [gap, 0]
    b = rng.normal(0, 0.5, (n_per, 2)) - [gap, 0]
    X = np.vstack([a, b])
    y = np.concatenate([np.ones(n_per), -np.ones(n_per)])
    return X, y


class TestKernels:
    def test_rbf_matches_naive(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(5, 3))
        b = rng.normal(size=(4, 3))
        K = probes.kernel_matrix(a, b, "rbf", gamma=0.7)
        for i in range(5):
            for j in range(4):
                d2 = float(((a[i] - b[j]) ** 2).sum())
                assert K[i, j] == pytest.approx(np.exp(-0.7 * d2), rel=1e-10)

    def test_linear_matches_naive(self):
        rng = np.random.default_rng(1)
        a = rng.normal(size=(3, 4))
        K = probes.kernel_matrix(a, a, "linear")
        for i in range(3):
            for j in range(3):
                assert K[i, j] == pytest.approx(float(a[i] @ a[j]))

    def test_rbf_diag_and_symmetry(self):
        a = np.random.default_rng(2).normal(size=(6, 3))
        K = probes.kernel_matrix(a, a, "rbf", gamma=0.1)
        assert np.allclose(np.diagonal(K), 1.0)
        assert np.allclose(K, K.T)
        assert K.min() > 0.0 and K.max() <= 1.0

    def test_rbf_needs_gamma(self):
        with pytest.raises(ValueError):
            probes.kernel_matrix(np.zeros((2, 2)), np.zeros((2, 2)), "rbf")

    def test_unknown_kernel(self):
        with pytest.raises(ValueError):
            probes.kernel_matrix(np.zeros((2, 2)), np.zeros((2, 2)), "poly")


class TestSmoAgainstQpOracle:
    @pytest.mark.parametrize("seed", range(8))
    def test_dual_matches_slsqp(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(3, 7))
        X = rng.normal(size=(n, 2))
        y = rng.choice([-1.0, 1.0], size=n)
        if len(np.unique(y)) < 2:
            y[0] = -y[1]
        C = float(rng.choice([0.3, 1.0, 5.0]))
        gamma = float(rng.choice([0.1, 1.0]))
        K = probes.kernel_matrix(X, X, "rbf", gamma)
        m = probes.svm_train(X, y, "rbf", C, gamma, tol=1e-6)
        ref_alpha, ref_obj = qp_reference(K, y, C)
        obj = probes.dual_objective(K, y, m.alphas)
        assert obj == pytest.approx(ref_obj, abs=1e-4)
        # feasibility of the SMO solution
        assert abs(m.alphas @ y) < 1e-8
        assert m.alphas.min() >= -1e-12 and m.alphas.max() <= C + 1e-12
        assert probes.kkt_violation(K, y, m.alphas, C) < 1e-3

    def test_two_point_analytic(self):
        # symmetric pair, linear kernel: alpha* = 2 / ||x1 - x2||^2, margins +-1
        X = np.array([[1.0, 0.0], [-1.0, 0.0]])
        y = np.array([1.0, -1.0])
        m = probes.svm_train(X, y, "linear", C=100.0, tol=1e-8)
        assert m.alphas[0] == pytest.approx(0.5, abs=1e-6)
        assert m.alphas[1] == pytest.approx(0.5, abs=1e-6)
        assert m.bias == pytest.approx(0.0, abs=1e-6)
        margin = probes.svm_margin(m, X)
        assert margin == pytest.approx([1.0, -1.0], abs=1e-6)

    def test_box_constraint_active(self):
        # overlapping points force alpha to the C bound
        X = np.array([[0.0, 0.0], [0.0, 0.0], [3.0, 0.0]])
        y = np.array([1.0, -1.0, 1.0])
        C = 0.5
        K = probes.kernel_matrix(X, X, "rbf", 1.0)
        m = probes.svm_train(X, y, "rbf", C, 1.0, tol=1e-8)
        _, ref_obj = qp_reference(K, y, C)
        assert probes.dual_objective(K, y, m.alphas) == pytest.approx(ref_obj, abs=1e-4)
        assert m.alphas[1] == pytest.approx(C, abs=1e-6)

    def test_dual_objective_arithmetic(self):
        K = np.array([[1.0, 0.5], [0.5, 1.0]])
        y = np.array([1.0, -1.0])
        alpha = np.array([0.4, 0.4])
        ay = alpha * y
        expected = 0.8 - 0.5 * float(ay @ K @ ay)
        assert probes.dual_objective(K, y, alpha) == pytest.approx(expected)


class TestSvmTraining:
    def test_separable_blobs_perfect(self):
        X, y = separable_blobs()
        m = probes.svm_train(X, y, "rbf", C=10.0, gamma=0.5)
        pred, margin = probes.svm_predict(m, X)
        assert (pred == y).all()
        assert (margin * y > 0).all()

    def test_precomputed_kernel_equivalent(self):
        X, y = separable_blobs(seed=3, n_per=10)
        K = probes.kernel_matrix(X, X, "rbf", 0.5)
        a = probes.svm_train(X, y, "rbf", 2.0, 0.5)
        b = probes.svm_train(X, y, "rbf", 2.0, 0.5, precomputed_kernel=K)
        assert np.allclose(a.alphas, b.alphas)
        assert a.bias == pytest.approx(b.bias)

    def test_margin_from_kernel_matches_direct(self):
        X, y = separable_blobs(seed=4, n_per=8)
        m = probes.svm_train(X, y, "rbf", 1.0, 0.3)
        Xq = np.random.default_rng(5).normal(size=(6, 2))
        Kq = probes.kernel_matrix(Xq, X, "rbf", 0.3)
        assert np.allclose(probes._margin_from_kernel(m, Kq),
                           probes.svm_margin(m, Xq), atol=1e-10)

    def test_single_class_rejected(self):
        with pytest.raises(DegenerateDataError):
            probes.svm_train(np.zeros((4, 2)), np.ones(4))

    def test_non_pm1_labels_rejected(self):
        with pytest.raises(DegenerateDataError):
            probes.svm_train(np.zeros((4, 2)), np.array([0, 1, 0, 1]))

    def test_nonpositive_c_rejected(self):
        X, y = separable_blobs(n_per=3)
        with pytest.raises(ValueError):
            probes.svm_train(X, y, C=0.0)

    def test_query_dim_mismatch(self):
        X, y = separable_blobs(n_per=5)
        m = probes.svm_train(X, y, "rbf", 1.0, 0.5)
        with pytest.raises(ShapeError):
            probes.svm_margin(m, np.zeros((2, 3)))

    def test_zero_margin_predicts_positive(self):
        X = np.array([[1.0], [-1.0]])
        m = probes.svm_train(X, np.array([1.0, -1.0]), "linear", C=10.0)
        pred, margin = probes.svm_predict(m, np.zeros(1))
        assert margin == pytest.approx(0.0, abs=1e-8)
        assert pred == 1


class TestMulticlass:
    def _three_blobs(self, seed=0, n_per=15):
        rng = np.random.default_rng(seed)
        centers = np.array([[0.0, 0.0], [5.0, 0.0], [0.0, 5.0]])
        X = np.vstack([rng.normal(0, 0.4, (n_per, 2)) + c for c in centers])
        y = np.repeat([0, 1, 2], n_per)
        return X, y

    def test_blobs_classified(self):
        X, y = self._three_blobs()
        m = probes.multiclass_train(X, y, "rbf", C=10.0, gamma=0.5)
        assert (probes.multiclass_predict(m, X) == y).all()

    def test_one_model_per_class(self):
        X, y = self._three_blobs()
        m = probes.multiclass_train(X, y, "rbf", C=1.0, gamma=0.5)
        assert list(m.classes) == [0, 1, 2]
        assert len(m.models) == 3

    def test_tie_breaks_to_lowest_class(self):
        m = probes.OvrModel(np.array([3, 7]), None)
        probes_margins = np.array([[0.2, 0.2], [0.1, 0.5]])
        pred = m.classes[np.argmax(probes_margins, axis=1)]
        assert list(pred) == [3, 7]

    def test_single_class_rejected(self):
        with pytest.raises(DegenerateDataError):
            probes.multiclass_train(np.zeros((4, 2)), np.zeros(4))


class TestStratifiedFolds:
    def test_every_fold_every_class(self):
        y = np.repeat([0, 1, 2], 9)
        assign = probes.stratified_folds(y, 3, seed=0)
        for f in range(3):
            assert set(y[assign == f]) == {0, 1, 2}

    def test_deterministic(self):
        y = np.repeat([0, 1], 10)
        assert np.array_equal(probes.stratified_folds(y, 3, seed=5),
                              probes.stratified_folds(y, 3, seed=5))

    def test_class_smaller_than_folds_rejected(self):
        y = np.array([0, 0, 0, 1, 1])
        with pytest.raises(StratificationError):
            probes.stratified_folds(y, 3, seed=0)

    def test_balanced_fold_sizes(self):
        y = np.repeat([0, 1], 9)
        assign = probes.stratified_folds(y, 3, seed=1)
        assert sorted(np.bincount(assign)) == [6, 6, 6]


class TestGridSearch:
    def test_picks_from_grid_and_separates(self):
        X, y = separable_blobs(seed=7, n_per=12)
        cfg = probes.ProbeConfig(c_grid=(0.1, 1.0, 10.0),
                                 gamma_grid=(0.01, 0.1, 1.0))
        C, gamma, acc = probes.cv_grid_search(X, y, cfg, seed=0)
        assert C in cfg.c_grid and gamma in cfg.gamma_grid
        assert acc == 1.0

    def test_tie_breaks_toward_small_c_and_gamma(self):
        # wide-margin blobs: every grid point separates perfectly, so the
        # scan order (ascending gamma, then ascending C) keeps the smallest
        X, y = separable_blobs(seed=8, n_per=9, gap=50.0)
        cfg = probes.ProbeConfig(c_grid=(10.0, 1.0, 100.0),
                                 gamma_grid=(1e-3, 1e-2))
        C, gamma, acc = probes.cv_grid_search(X, y, cfg, seed=0)
        assert acc == 1.0
        assert C == 1.0 and gamma == 1e-3

    def test_multiclass_route(self):
        X = np.vstack([np.random.default_rng(9).normal(0, 0.3, (9, 2)) + c
                       for c in ([0, 0], [6, 0], [0, 6])])
        y = np.repeat([0, 1, 2], 9)
        cfg = probes.ProbeConfig(c_grid=(1.0, 10.0), gamma_grid=(0.1, 1.0))
        C, gamma, acc = probes.cv_grid_search(X, y, cfg, seed=0, multiclass=True)
        assert acc == 1.0

    def test_too_few_samples(self):
        with pytest.raises(StratificationError):
            probes.cv_grid_search(np.zeros((2, 2)), np.array([1, -1]),
                                  probes.ProbeConfig(), seed=0)


class TestStandardize:
    def test_train_moments(self):
        X = np.random.default_rng(0).normal(3.0, 2.0, size=(50, 4)).astype(np.float32)
        Z = probes.standardize(X)
        assert np.allclose(Z.mean(axis=0), 0.0, atol=1e-5)
        assert np.allclose(Z.std(axis=0), 1.0, atol=1e-3)

    def test_constant_dim_maps_to_zero(self):
        X = np.ones((10, 2), dtype=np.float32)
        X[:, 1] = np.arange(10)
        Z = probes.standardize(X)
        assert (Z[:, 0] == 0).all()

    def test_test_split_uses_train_stats(self):
        tr = np.zeros((4, 1), dtype=np.float32)
        tr[:, 0] = [0, 0, 2, 2]          # mean 1, std 1
        te = np.array([[3.0]], dtype=np.float32)
        ztr, zte = probes.standardize(tr, te)
        assert zte[0, 0] == pytest.approx(2.0)


class TestActivationExtraction:
    def test_unknown_tap(self, tiny_net):
        x = np.zeros((2, 1, 12, 12), dtype=np.float32)
        with pytest.raises(TapError):
            probes.extract_activations(tiny_net, x, "pool9",
                                       taps={"pool1": 2})

    def test_matches_manual_forward(self, tiny_net):
        from countlab import nn
        x = np.random.default_rng(0).uniform(0, 1, (3, 1, 12, 12)).astype(np.float32)
        taps = model.tap_indices(tiny_net)
        act = probes.extract_activations(tiny_net, x, "pool1", taps=taps)
        cache = nn.forward(tiny_net, x)
        manual = cache.layers[taps["pool1"]].outputs.reshape(3, -1)
        assert np.array_equal(act.features, manual)

    def test_batching_consistent(self, tiny_net):
        x = np.random.default_rng(1).uniform(0, 1, (7, 1, 12, 12)).astype(np.float32)
        taps = model.tap_indices(tiny_net)
        a = probes.extract_activations(tiny_net, x, "pool1", taps=taps, batch_size=2)
        b = probes.extract_activations(tiny_net, x, "pool1", taps=taps, batch_size=64)
        assert np.array_equal(a.features, b.features)

    def test_subsample_dims(self):
        assert np.array_equal(probes.subsample_dims(5, 10, 0), np.arange(5))
        sel = probes.subsample_dims(100, 10, seed=3)
        assert len(sel) == 10
        assert len(np.unique(sel)) == 10
        assert np.array_equal(sel, np.sort(sel))
        assert np.array_equal(sel, probes.subsample_dims(100, 10, seed=3))


class TestSuperclassFraction:
    def test_hand_built_matrix(self):
        conf = np.zeros((10, 10))
        conf[0, 2] = 3          # even -> even (same parity)
        conf[0, 1] = 1          # even -> odd
        conf[3, 5] = 4          # odd -> odd (same parity)
        conf[np.arange(10), np.arange(10)] = 100  # diagonal ignored
        frac = probes.superclass_confusion_fraction(conf)
        assert frac == pytest.approx(7 / 8)

    def test_diagonal_only_returns_none(self):
        assert probes.superclass_confusion_fraction(np.eye(10)) is None

    def test_wrong_shape(self):
        with pytest.raises(ShapeError):
            probes.superclass_confusion_fraction(np.eye(6))
