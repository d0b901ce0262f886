"""Anchor-graph label propagation.

Every sample is written as a convex combination of a few nearby anchors
(the rows of ``Z``).  Smoothness is imposed through the reduced Laplacian
``Z^T L Z`` of the anchor-induced graph ``W = Z Lambda^-1 Z^T``, which is
assembled from p x p products only.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import linalg, sparse
from scipy.cluster.vq import kmeans2

__all__ = [
    "AnchorGraph",
    "SingularSystemError",
    "select_anchors",
    "build_Z",
    "reduced_laplacian",
    "solve_soft_labels",
    "infer_soft_targets",
    "knn_indices",
    "anchor_graph",
]


class SingularSystemError(np.linalg.LinAlgError):
    pass


def knn_indices(query, ref, k, self_index=None, chunk=2048):
    """Indices and squared distances of the ``k`` nearest ``ref`` rows per query row.

    Ties are broken by lower reference index.  ``self_index[i]``, when
    given, is a reference row that query ``i`` must skip (itself).
    """
    query = np.asarray(query, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    k = min(k, len(ref) - (0 if self_index is None else 1))
    ref_sq = (ref**2).sum(1)
    idx_out = np.empty((len(query), k), dtype=np.intp)
    d_out = np.empty((len(query), k))
    for start in range(0, len(query), chunk):
        q = query[start : start + chunk]
        d = (q**2).sum(1)[:, None] - 2.0 * q @ ref.T + ref_sq[None, :]
        np.maximum(d, 0.0, out=d)
        if self_index is not None:
            d[np.arange(len(q)), self_index[start : start + len(q)]] = np.inf
        order = _smallest(d, k)
        idx_out[start : start + len(q)] = order
        d_out[start : start + len(q)] = np.take_along_axis(d, order, axis=1)
    return idx_out, d_out


def _smallest(d, k):
    """Column indices of the k smallest entries per row, ordered by (value, index)."""
    rows = np.arange(len(d))[:, None]
    if k >= d.shape[1]:
        return np.argsort(d, axis=1, kind="stable")
    part = np.argpartition(d, k - 1, axis=1)[:, :k]
    # sort the candidates by value, then index
    key = np.take_along_axis(d, part, axis=1)
    o = np.lexsort((part, key), axis=1)
    order = np.take_along_axis(part, o, axis=1)
    kth = d[rows[:, 0], order[:, -1]]
    # ties straddling the cut: fall back to a full stable sort for those rows
    tied = np.flatnonzero((d <= kth[:, None]).sum(1) > k)
    if tied.size:
        order[tied] = np.argsort(d[tied], axis=1, kind="stable")[:, :k]
    return order


def select_anchors(X_L, p, seed=0, n_classes=None, iters=25):
    """k-means (k-means++ start) centres of the labeled embeddings."""
    X_L = np.asarray(X_L, dtype=np.float64)
    if p > len(X_L):
        raise ValueError(f"p={p} anchors requested from {len(X_L)} labeled rows")
    if n_classes is not None and p < n_classes:
        raise ValueError(f"p={p} must be at least the class count {n_classes}")
    if p == len(X_L):
        return X_L.copy()
    init = _kmeanspp(X_L, p, np.random.default_rng(seed))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        centres, _ = kmeans2(X_L, init, iter=iters, minit="matrix")
    return centres


def _kmeanspp(X, p, rng):
    # D^2 seeding with a running nearest-centre distance (linear in p)
    idx = [int(rng.integers(len(X)))]
    best = ((X - X[idx[0]]) ** 2).sum(1)
    for _ in range(1, p):
        total = best.sum()
        if total <= 0:
            j = int(rng.integers(len(X)))
        else:
            j = int(np.searchsorted(np.cumsum(best), rng.random() * total, side="right"))
            j = min(j, len(X) - 1)
        idx.append(j)
        np.minimum(best, ((X - X[j]) ** 2).sum(1), out=best)
    return X[idx].copy()


def build_Z(X, anchors, s=3, sigma=None):
    """Row-stochastic sparse weights of each row of ``X`` over its ``s`` nearest anchors.

    Weights are Gaussian in the Euclidean distance; ``sigma`` defaults to
    the median of all selected neighbour distances.
    """
    X = np.asarray(X, dtype=np.float64)
    anchors = np.asarray(anchors, dtype=np.float64)
    p = len(anchors)
    if s > p:
        raise ValueError(f"s={s} exceeds the number of anchors {p}")
    idx, d2 = knn_indices(X, anchors, s)
    if sigma is None:
        sigma = float(np.median(np.sqrt(d2)))
        if sigma == 0:
            sigma = 1.0
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    w = np.exp(-d2 / (2.0 * sigma**2))
    rowsum = w.sum(1)
    bad = np.flatnonzero(rowsum == 0)
    if bad.size:
        raise ValueError(f"all-zero kernel row {bad[0]}: sigma={sigma:g} is too small")
    w /= rowsum[:, None]
    n = len(X)
    Z = sparse.csr_matrix((w.ravel(), idx.ravel(), np.arange(0, n * s + 1, s)), shape=(n, p))
    return Z


def _dense(M):
    return M.toarray() if sparse.issparse(M) else np.asarray(M, dtype=np.float64)


def reduced_laplacian(Z):
    """``Z^T (D - W) Z`` with ``W = Z Lambda^-1 Z^T``, without forming n x n matrices."""
    Lam = np.asarray(Z.sum(axis=0)).ravel()
    zero = np.flatnonzero(Lam <= 0)
    if zero.size:
        raise ValueError(f"anchor {zero[0]} has zero total weight (Lambda entry is 0)")
    # degrees of W: W 1 = Z Lambda^-1 Z^T 1
    deg = np.asarray(Z @ (np.asarray(Z.T @ np.ones(Z.shape[0])).ravel() / Lam)).ravel()
    ZtZ = _dense(Z.T @ Z)
    if sparse.issparse(Z):
        ZtDZ = _dense(Z.T @ sparse.diags(deg) @ Z)
    else:
        ZtDZ = Z.T @ (deg[:, None] * Z)
    Lhat = ZtDZ - ZtZ @ (ZtZ / Lam[:, None])
    return 0.5 * (Lhat + Lhat.T)


def solve_soft_labels(Z, Lhat, Y, gamma=0.01, ridge=0.0):
    """Minimizer of ``0.5||ZA - Y||_F^2 + 0.5 gamma tr(A^T Lhat A)``.

    Solves ``(Z^T Z + gamma Lhat) A = Z^T Y`` by Cholesky.
    """
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    ZtZ = _dense(Z.T @ Z)
    M = ZtZ + gamma * Lhat
    if ridge:
        M = M + ridge * np.eye(len(M))
    rhs = _dense(Z.T @ sparse.csr_matrix(Y)) if sparse.issparse(Z) else Z.T @ Y
    try:
        factor = linalg.cho_factor(M)
    except linalg.LinAlgError:
        raise SingularSystemError(
            "anchor system is singular; use gamma > 0 or a ridge of 1e-10"
        ) from None
    if np.min(np.diag(factor[0]) ** 2) < 1e-14 * np.max(np.diag(M)):
        raise SingularSystemError("anchor system is singular; use gamma > 0 or a ridge of 1e-10")
    return linalg.cho_solve(factor, rhs)


def infer_soft_targets(Z, A):
    """Class-balanced labels and soft targets from anchor soft labels.

    The score of class j is ``(Z A)_ij / lambda_j`` with the class mass
    ``lambda_j = 1^T Z a_j``.  Returns ``(labels, soft)`` with 0-based
    labels (ties go to the lowest class) and rows of ``soft`` on the simplex.
    """
    S = np.asarray(Z @ A)
    lam = S.sum(axis=0)
    valid = lam > 0
    if not valid.any():
        raise ValueError("every class has non-positive mass")
    scores = np.full_like(S, -np.inf)
    scores[:, valid] = S[:, valid] / lam[valid]
    labels = np.argmax(scores, axis=1)
    soft = np.where(valid, np.maximum(scores, 0.0), 0.0)
    total = soft.sum(1, keepdims=True)
    c = S.shape[1]
    soft = np.divide(soft, total, out=np.full_like(soft, 1.0 / c), where=total > 0)
    return labels, soft


@dataclass
class AnchorGraph:
    anchors: np.ndarray
    Z: sparse.csr_matrix
    Lam: np.ndarray
    Lhat: np.ndarray
    gamma: float
    A: np.ndarray = None


def anchor_graph(E_L, y_L, E_U, n_classes, p=500, s=3, gamma=0.01, sigma=None, seed=0):
    """Run the full engine; returns ``(graph, labels_U, soft_U)`` for the unlabeled rows."""
    p = min(p, len(E_L))
    anchors = select_anchors(E_L, p, seed=seed, n_classes=n_classes)
    X = np.vstack([E_L, E_U])
    Z = build_Z(X, anchors, s=min(s, len(anchors)), sigma=sigma)
    # anchors that no sample selected carry no weight; drop them
    Lam = np.asarray(Z.sum(axis=0)).ravel()
    keep = np.flatnonzero(Lam > 0)
    if len(keep) < len(anchors):
        Z = Z[:, keep]
        anchors = anchors[keep]
        Lam = Lam[keep]
    Lhat = reduced_laplacian(Z)
    Y = np.zeros((len(X), n_classes))
    Y[np.arange(len(y_L)), y_L] = 1.0
    A = solve_soft_labels(Z, Lhat, Y, gamma)
    labels, soft = infer_soft_targets(Z, A)
    graph = AnchorGraph(anchors, Z, Lam, Lhat, gamma, A)
    n_l = len(E_L)
    return graph, labels[n_l:], soft[n_l:]
