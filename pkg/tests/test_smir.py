import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sslseg.smir import (
    _sym_sqrt,
    kernel_matrix,
    normalize_scores,
    smi_estimate,
    smir_fit,
    smir_gradient,
    smir_objective,
    smir_posteriors,
    smir_targets,
)


def toy():
    # two separated pairs of labeled points per class plus two unlabeled points
    X = np.array([[0.0, 0.0], [0.3, 0.1], [4.0, 4.0], [4.2, 3.9], [0.1, 0.2], [4.1, 4.1]])
    y = np.array([0, 0, 1, 1, -1, -1])
    return X, y


def descent_oracle(K, d, y, c, gamma, lam, iters=20000):
    # plain gradient descent on the explicit objective, step 1/L
    n = len(K)
    A = np.zeros((n, c))
    K_half, _ = _sym_sqrt(K)
    s = 1 / np.sqrt(d)
    B = K_half * s
    lab = y >= 0
    H = B[lab].T @ B[lab] - gamma * (c / n) * (s[:, None] * K * s) + lam * np.eye(n)
    step = 1.0 / np.linalg.eigvalsh(H).max()
    for _ in range(iters):
        A = A - step * smir_gradient(A, K, d, y, gamma, lam, K_half)
    return A


def hessian(K, d, y, c, gamma, lam):
    # Hessian of the objective w.r.t. one column of A (identical for every column)
    n = len(K)
    K_half, _ = _sym_sqrt(K)
    s = 1 / np.sqrt(d)
    B = K_half * s
    lab = y >= 0
    return B[lab].T @ B[lab] - gamma * (c / n) * (s[:, None] * K * s) + lam * np.eye(n)


def test_kernel_matches_formula():
    X = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 2.0], [1.0, 1.0]])
    K, d = kernel_matrix(X, sigma=0.8)
    for i in range(4):
        for j in range(4):
            v = np.exp(-np.sum((X[i] - X[j]) ** 2) / (2 * 0.8**2))
            assert abs(K[i, j] - v) < 1e-12
    assert np.allclose(d, K.sum(1)) and np.all(np.diag(K) == 1)


def test_kernel_identical_points_and_sigma():
    X = np.array([[1.0, 2.0], [1.0, 2.0], [0.0, 0.0]])
    K, _ = kernel_matrix(X)
    assert np.array_equal(K[0], K[1])
    with pytest.raises(ValueError):
        kernel_matrix(X, sigma=0.0)


def test_smi_values():
    rng = np.random.default_rng(0)
    K = np.eye(6)
    assert smi_estimate(K, np.ones(6), np.zeros((6, 3))) == -0.5
    n, c = 6, 3
    Q, _ = np.linalg.qr(rng.normal(size=(n, c)))
    A = Q * np.sqrt(n / c)  # A^T A = (n/c) I
    assert smi_estimate(K, np.ones(n), A) == pytest.approx((c - 1) / 2)
    K2, d2 = kernel_matrix(rng.normal(size=(6, 2)))
    B = rng.normal(size=(6, 3))
    assert smi_estimate(K2, d2, B) == pytest.approx(smi_estimate(K2, d2, B[:, [2, 0, 1]]))


def test_convexity_guard():
    X, y = toy()
    K, d = kernel_matrix(X)
    n, c = 6, 2
    with pytest.raises(ValueError, match="convexity condition violated"):
        smir_fit(K, d, y, c, gamma=1.0, lam=c / n)
    with pytest.raises(ValueError, match="convexity condition violated"):
        smir_fit(K, d, y, c, gamma=1.0, lam=0.1)
    smir_fit(K, d, y, c, gamma=1.0, lam=c / n * 1.0001)


def test_fit_matches_descent_oracle():
    X, y = toy()
    K, d = kernel_matrix(X)
    c, gamma = 2, 1.0
    lam = 2 * gamma * c / 6
    A = smir_fit(K, d, y, c, gamma, lam)
    A_gd = descent_oracle(K, d, y, c, gamma, lam)
    diff = smir_objective(A, K, d, y, gamma, lam) - smir_objective(A_gd, K, d, y, gamma, lam)
    assert abs(diff) < 1e-6
    assert np.abs(smir_gradient(A, K, d, y, gamma, lam)).max() < 1e-8


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.integers(3, 10), st.floats(0.0, 3.0), st.floats(1.001, 5.0))
def test_hessian_psd_above_bound(seed, n, gamma, factor):
    rng = np.random.default_rng(seed)
    c = int(rng.integers(2, 4))
    K, d = kernel_matrix(rng.normal(size=(n, 2)))
    y = np.full(n, -1)
    y[: max(1, n // 2)] = rng.integers(0, c, max(1, n // 2))
    lam = factor * gamma * c / n if gamma > 0 else 0.1
    assert np.linalg.eigvalsh(hessian(K, d, y, c, gamma, lam)).min() >= -1e-8


def test_large_ridge_shrinks_solution():
    X, y = toy()
    K, d = kernel_matrix(X)
    small = smir_fit(K, d, y, 2, gamma=0.0, lam=1.0)
    large = smir_fit(K, d, y, 2, gamma=0.0, lam=1e8)
    assert np.abs(large).max() < 1e-7
    assert np.abs(large).max() < 1e-6 * np.abs(small).max()
    # row normalization is scale invariant, so the shrunken A keeps its posterior profile
    _, p_large = smir_posteriors(K, d, large)
    assert np.allclose(p_large.sum(1), 1, atol=1e-9) and np.all(p_large >= 0)


def test_posteriors_identical_columns_and_ties():
    X, _ = toy()
    K, d = kernel_matrix(X)
    A = np.tile(np.abs(np.random.default_rng(1).normal(size=(6, 1))), (1, 3))
    labels, probs = smir_posteriors(K, d, A)
    assert np.allclose(probs, 1 / 3) and np.all(labels == 0)
    labels, probs = normalize_scores(np.array([[-1.0, -2.0]]))
    assert np.allclose(probs, 0.5) and labels.tolist() == [0]


def test_posteriors_recover_training_labels():
    X, y = toy()
    K, d = kernel_matrix(X)
    A = smir_fit(K, d, y, 2)
    labels, probs = smir_posteriors(K, d, A)
    assert labels.tolist() == [0, 0, 1, 1, 0, 1]
    assert np.allclose(probs.sum(1), 1, atol=1e-9)


def test_engine_subsample_and_extension():
    rng = np.random.default_rng(2)
    y = np.repeat([0, 1, 2], 60)
    E = np.array([[0, 0], [5, 0], [0, 5]])[y] + rng.normal(scale=0.5, size=(180, 2))
    lab = np.arange(0, 180, 6)
    unl = np.setdiff1d(np.arange(180), lab)
    model, labels, soft = smir_targets(E[lab], y[lab], E[unl], 3, max_points=80, seed=1)
    assert len(model.X) == 80
    assert np.allclose(soft.sum(1), 1) and np.all(soft >= 0)
    assert np.mean(labels == y[unl]) > 0.9
    # scoring training points through the kernel map reproduces the fitted scores
    assert np.allclose(model.scores(model.X), model.scores(), atol=1e-6)
    full, labels_full, _ = smir_targets(E[lab], y[lab], E[unl], 3, max_points=2000)
    assert model.residual < 1e-8 and full.residual < 1e-8
