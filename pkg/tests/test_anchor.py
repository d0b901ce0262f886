import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import sparse

from sslseg.anchor import (
    SingularSystemError,
    anchor_graph,
    build_Z,
    infer_soft_targets,
    knn_indices,
    reduced_laplacian,
    select_anchors,
    solve_soft_labels,
)


def dense_reduced_laplacian(Z):
    # materialize W = Z Lam^-1 Z^T and L = D - W explicitly
    Z = Z.toarray() if sparse.issparse(Z) else Z
    W = Z @ np.diag(1.0 / Z.sum(0)) @ Z.T
    L = np.diag(W.sum(1)) - W
    return Z.T @ L @ Z, W, L


def random_instance(rng, n=None, p=None, c=None, d=3):
    n = n or int(rng.integers(6, 51))
    p = p or int(rng.integers(2, min(10, n) + 1))
    c = c or int(rng.integers(2, 4))
    X = rng.normal(size=(n, d))
    anchors = X[rng.choice(n, p, replace=False)]
    s = int(rng.integers(1, min(3, p) + 1))
    # anchors are data points, so the median-distance default can collapse to ~0
    Z = build_Z(X, anchors, s=s, sigma=float(rng.uniform(0.5, 2.0)))
    return X, anchors, Z, n, p, c


def test_knn_tie_break_lowest_index():
    ref = np.array([[1.0], [-1.0], [1.0], [3.0]])
    idx, d2 = knn_indices(np.array([[0.0]]), ref, 3)
    assert idx.tolist() == [[0, 1, 2]]
    assert d2.tolist() == [[1.0, 1.0, 1.0]]


def test_anchors_all_labeled_points():
    X = np.random.default_rng(0).normal(size=(7, 3))
    assert np.array_equal(select_anchors(X, 7), X)


def test_anchors_two_clouds():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(20, 2)) * 0.1
    b = rng.normal(size=(20, 2)) * 0.1 + 10
    U = select_anchors(np.vstack([a, b]), 2, seed=3)
    inside = lambda cloud, u: np.all(u >= cloud.min(0)) and np.all(u <= cloud.max(0))
    assert sum(inside(a, u) for u in U) == 1 and sum(inside(b, u) for u in U) == 1
    assert np.array_equal(U, select_anchors(np.vstack([a, b]), 2, seed=3))


def test_anchor_errors():
    X = np.zeros((3, 2))
    with pytest.raises(ValueError):
        select_anchors(X, 4)
    with pytest.raises(ValueError):
        select_anchors(np.random.default_rng(0).normal(size=(5, 2)), 2, n_classes=3)


def test_Z_indicator_and_equidistant():
    anchors = np.array([[0.0, 0.0], [2.0, 0.0], [0.0, 5.0]])
    Z = build_Z(np.array([[2.0, 0.0]]), anchors, s=1).toarray()
    assert Z.tolist() == [[0.0, 1.0, 0.0]]
    Z2 = build_Z(np.array([[1.0, 0.0]]), anchors, s=2, sigma=0.7).toarray()
    assert np.allclose(Z2, [[0.5, 0.5, 0.0]], atol=0)


def test_Z_matches_hand_oracle():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(5, 3))
    U = rng.normal(size=(2, 3))
    sigma = 0.9
    Z = build_Z(X, U, s=2, sigma=sigma).toarray()
    expect = np.zeros((5, 2))
    for i in range(5):
        for k in range(2):
            expect[i, k] = np.exp(-np.sum((X[i] - U[k]) ** 2) / (2 * sigma**2))
        expect[i] /= expect[i].sum()
    assert np.abs(Z - expect).max() < 1e-12


def test_Z_zero_row_error():
    with pytest.raises(ValueError, match="all-zero kernel row"):
        build_Z(np.array([[100.0]]), np.array([[0.0], [1.0]]), s=1, sigma=1e-3)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31))
def test_Z_rows_are_probability_vectors(seed):
    rng = np.random.default_rng(seed)
    _, _, Z, n, p, _ = random_instance(rng)
    Zd = Z.toarray()
    assert np.all(Zd >= 0)
    assert np.allclose(Zd.sum(1), 1, atol=1e-9)
    assert np.all((Zd > 0).sum(1) <= Z.getnnz(axis=1).max())


def test_identity_Z_laplacian():
    Z = sparse.identity(4, format="csr")
    Lhat = reduced_laplacian(Z)
    dense, W, L = dense_reduced_laplacian(Z)
    # W = Lam^-1 = I, D = diag(W 1) = I, hence L_hat = 0
    assert np.allclose(W, np.eye(4)) and np.allclose(Lhat, 0)
    assert np.abs(Lhat - dense).max() < 1e-12


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31))
def test_factored_laplacian_equals_dense(seed):
    rng = np.random.default_rng(seed)
    _, _, Z, n, p, _ = random_instance(rng, n=int(rng.integers(5, 21)), p=int(rng.integers(2, 6)))
    if (np.asarray(Z.sum(0)).ravel() <= 0).any():
        with pytest.raises(ValueError):
            reduced_laplacian(Z)
        return
    Lhat = reduced_laplacian(Z)
    dense, _, _ = dense_reduced_laplacian(Z)
    assert np.abs(Lhat - dense).max() < 1e-10
    assert np.allclose(Lhat, Lhat.T)
    assert np.linalg.eigvalsh(Lhat).min() >= -1e-8
    assert np.abs(Lhat @ np.ones(Lhat.shape[0])).max() < 1e-10


def test_zero_lambda_rejected():
    Z = sparse.csr_matrix(np.array([[1.0, 0.0], [1.0, 0.0]]))
    with pytest.raises(ValueError, match="zero total weight"):
        reduced_laplacian(Z)


def test_identity_solve_returns_Y():
    Z = sparse.identity(5, format="csr")
    Y = np.eye(3)[[0, 1, 2, 0, 1]]
    A = solve_soft_labels(Z, reduced_laplacian(Z), Y, gamma=0.0)
    assert np.allclose(A, Y, atol=1e-14)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31))
def test_solve_first_order_condition(seed):
    rng = np.random.default_rng(seed)
    X, U, Z, n, p, c = random_instance(rng)
    keep = np.flatnonzero(np.asarray(Z.sum(0)).ravel() > 0)
    Z = Z[:, keep]
    Lhat = reduced_laplacian(Z)
    Y = np.zeros((n, c))
    lab = rng.choice(n, max(c, n // 3), replace=False)
    Y[lab, rng.integers(0, c, len(lab))] = 1
    gamma = float(rng.uniform(0.001, 1.0))
    M = (Z.T @ Z).toarray()
    try:
        A = solve_soft_labels(Z, Lhat, Y, gamma=gamma)
    except SingularSystemError:
        return
    grad = M @ A - Z.T @ Y + gamma * Lhat @ A
    assert np.abs(grad).max() < 1e-8


def test_singular_system_hint():
    # two anchors always shared equally: Z^T Z is rank one
    Z = sparse.csr_matrix(np.full((4, 2), 0.5))
    with pytest.raises(SingularSystemError, match="ridge of 1e-10"):
        solve_soft_labels(Z, np.zeros((2, 2)), np.eye(2)[[0, 1, 0, 1]], gamma=0.0)


def test_large_gamma_gives_constant_columns():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(30, 2))
    U = X[:6]
    Z = build_Z(X, U, s=3)
    Lhat = reduced_laplacian(Z)
    # null space oracle: eigenvectors of L_hat with ~0 eigenvalue
    w, V = np.linalg.eigh(Lhat)
    assert np.sum(w < 1e-10 * w.max()) == 1  # connected graph
    Y = np.zeros((30, 2))
    Y[:5, 0] = 1
    Y[5:10, 1] = 1
    A = solve_soft_labels(Z, Lhat, Y, gamma=1e8)
    # the limit is the best constant fit: every column equal to the class mean of Y
    limit = np.ones((6, 1)) * Y.mean(0)
    assert np.abs(A - limit).max() < 1e-4
    null = V[:, 0]
    resid = A - np.outer(null, null @ A)
    assert np.abs(resid).max() < 1e-4


def test_inference_identity_and_ties():
    Z = sparse.identity(3, format="csr")
    A = np.eye(3)[[2, 0, 1]]
    labels, soft = infer_soft_targets(Z, A)
    assert labels.tolist() == [2, 0, 1]
    assert np.allclose(soft, A)
    labels, soft = infer_soft_targets(sparse.identity(1, format="csr"), np.array([[0.4, 0.4]]))
    assert labels.tolist() == [0]
    assert np.allclose(soft, [[0.5, 0.5]])


def test_inference_needs_positive_mass():
    with pytest.raises(ValueError):
        infer_soft_targets(sparse.identity(2, format="csr"), -np.ones((2, 2)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.01, 100))
def test_balanced_labels_scale_invariant(seed, scale):
    rng = np.random.default_rng(seed)
    _, _, Z, n, p, c = random_instance(rng)
    A = rng.uniform(0.05, 1.0, size=(p, c))
    labels, _ = infer_soft_targets(Z, A)
    A2 = A.copy()
    j = int(rng.integers(c))
    A2[:, j] *= scale
    labels2, _ = infer_soft_targets(Z, A2)
    S = (Z @ A).toarray() if sparse.issparse(Z @ A) else Z @ A
    balanced = S / S.sum(0)
    # ignore rows whose two best balanced scores are within rounding of each other
    top = np.sort(balanced, 1)
    clear = top[:, -1] - top[:, -2] > 1e-12 * top[:, -1]
    assert np.array_equal(labels[clear], labels2[clear])


def test_small_instance_matches_harmonic_oracle():
    # two tight clusters of three points, one anchor and one labeled point per cluster
    X = np.array([[0.0], [0.1], [0.2], [5.0], [5.1], [5.2]])
    U = np.array([[0.1], [5.1]])
    Z = build_Z(X, U, s=2)
    Lhat = reduced_laplacian(Z)
    Y = np.zeros((6, 2))
    Y[0, 0] = 1
    Y[3, 1] = 1
    A = solve_soft_labels(Z, Lhat, Y, gamma=0.01)
    labels, _ = infer_soft_targets(Z, A)

    _, W, L = dense_reduced_laplacian(Z)
    lab, unl = np.array([0, 3]), np.array([1, 2, 4, 5])
    F_U = np.linalg.solve(L[np.ix_(unl, unl)], W[np.ix_(unl, lab)] @ Y[lab])
    F = Y.copy()
    F[unl] = F_U
    oracle = np.argmax(F / F.sum(0), axis=1)
    assert labels.tolist() == oracle.tolist() == [0, 0, 0, 1, 1, 1]


def test_engine_end_to_end():
    rng = np.random.default_rng(5)
    centres = np.array([[0, 0], [6, 0], [0, 6]])
    y = np.repeat(np.arange(3), 40)
    E = centres[y] + rng.normal(scale=0.5, size=(120, 2))
    perm = rng.permutation(120)
    lab, unl = perm[:30], perm[30:]
    graph, labels_u, soft_u = anchor_graph(E[lab], y[lab], E[unl], 3, p=12, s=3, seed=1)
    assert np.mean(labels_u == y[unl]) > 0.95
    assert np.allclose(soft_u.sum(1), 1) and np.all(soft_u >= 0)
    assert np.all(graph.Lam > 0)
    resid = (graph.Z.T @ graph.Z).toarray() @ graph.A + graph.gamma * graph.Lhat @ graph.A
    Y = np.zeros((120, 3))
    Y[np.arange(30), y[lab]] = 1
    assert np.abs(resid - graph.Z.T @ Y).max() < 1e-8
