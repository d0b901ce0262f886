"""Squared-loss mutual information regularized kernel classifier.

Class scores are linear in the empirical kernel map,
``S = K^{1/2} D^{-1/2} A`` on the training points, where ``K`` is a
Gaussian kernel matrix and ``D`` its degree matrix.  Fitting minimizes

    0.5 * sum_{labeled i} ||S_i - p_i||^2  -  gamma * SMI(A)  +  0.5 * lam * ||A||_F^2

with ``SMI(A) = c/(2n) tr(A^T D^{-1/2} K D^{-1/2} A) - 1/2``.  The problem
is convex when ``lam > gamma * c / n`` and reduces to one SPD system
shared by all class columns.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg
from scipy.spatial.distance import cdist, pdist

__all__ = [
    "KernelModel",
    "median_distance",
    "kernel_matrix",
    "smi_estimate",
    "smir_objective",
    "smir_gradient",
    "smir_fit",
    "smir_posteriors",
    "normalize_scores",
    "smir_targets",
]

EIG_FLOOR = 1e-10


def median_distance(X):
    d = pdist(np.asarray(X, dtype=np.float64))
    med = float(np.median(d)) if d.size else 1.0
    return med if med > 0 else 1.0


def kernel_matrix(X, sigma=None):
    """Gaussian kernel matrix and its degree vector (the diagonal of D)."""
    X = np.asarray(X, dtype=np.float64)
    if sigma is None:
        sigma = median_distance(X)
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    K = np.exp(-cdist(X, X, "sqeuclidean") / (2.0 * sigma**2))
    np.fill_diagonal(K, 1.0)
    return K, K.sum(axis=1)


def _sym_sqrt(K, floor=EIG_FLOOR):
    w, V = np.linalg.eigh(K)
    w = np.maximum(w, floor)
    root = np.sqrt(w)
    return (V * root) @ V.T, (V / root) @ V.T


def smi_estimate(K, d, A):
    n, c = A.shape
    s = 1.0 / np.sqrt(d)
    M = s[:, None] * K * s[None, :]
    return float(c / (2.0 * n) * np.trace(A.T @ M @ A) - 0.5)


def _parts(K, d, y, c, K_half=None):
    n = len(K)
    if K_half is None:
        K_half, _ = _sym_sqrt(K)
    s = 1.0 / np.sqrt(d)
    B = K_half * s[None, :]
    M = s[:, None] * K * s[None, :]
    lab = np.flatnonzero(y >= 0)
    P = np.zeros((len(lab), c))
    P[np.arange(len(lab)), y[lab]] = 1.0
    return B, M, lab, P


def smir_objective(A, K, d, y, gamma, lam, K_half=None):
    """Value of the fitting objective; ``y`` holds 0-based labels, -1 if unlabeled."""
    n, c = A.shape
    B, M, lab, P = _parts(K, d, y, c, K_half)
    R = B[lab] @ A - P
    return float(0.5 * (R**2).sum() - gamma * smi_estimate(K, d, A) + 0.5 * lam * (A**2).sum())


def smir_gradient(A, K, d, y, gamma, lam, K_half=None):
    n, c = A.shape
    B, M, lab, P = _parts(K, d, y, c, K_half)
    BL = B[lab]
    return BL.T @ (BL @ A - P) - gamma * (c / n) * (M @ A) + lam * A


@dataclass
class KernelModel:
    X: np.ndarray
    sigma: float
    K: np.ndarray
    d: np.ndarray
    K_half: np.ndarray
    K_inv_half: np.ndarray
    gamma: float
    lam: float
    A: np.ndarray = None
    residual: float = np.nan

    def scores(self, X_new=None):
        """Class scores on the training points, or on new points via the kernel map."""
        s = 1.0 / np.sqrt(self.d)
        if X_new is None:
            return self.K_half @ (s[:, None] * self.A)
        Phi = np.exp(-cdist(np.asarray(X_new, dtype=np.float64), self.X, "sqeuclidean")
                     / (2.0 * self.sigma**2))
        return Phi @ (self.K_inv_half @ (s[:, None] * self.A))


def smir_fit(K, d, y, n_classes, gamma=1.0, lam=None, K_half=None):
    """Closed-form minimizer ``A`` (n x c).

    ``y`` holds 0-based labels for labeled rows and -1 elsewhere.  ``lam``
    defaults to ``2 * gamma * c / n``.  Raises when ``lam <= gamma c / n``.
    """
    n, c = len(K), n_classes
    y = np.asarray(y)
    if lam is None:
        lam = 2.0 * gamma * c / n
    if not np.allclose(K, K.T) or (K < 0).any():
        raise ValueError("kernel matrix must be symmetric and non-negative")
    if lam <= gamma * c / n:
        raise ValueError(
            f"convexity condition violated: lam={lam:g} <= gamma*c/n={gamma * c / n:g}"
        )
    B, M, lab, P = _parts(K, d, y, c, K_half)
    BL = B[lab]
    H = BL.T @ BL - gamma * (c / n) * M + lam * np.eye(n)
    H = 0.5 * (H + H.T)
    try:
        A = linalg.cho_solve(linalg.cho_factor(H), BL.T @ P)
    except linalg.LinAlgError:
        raise np.linalg.LinAlgError("SMIR system is singular") from None
    return A


def smir_posteriors(K, d, A, K_half=None):
    """Posteriors of the training points; returns ``(labels, probs)``."""
    if K_half is None:
        K_half, _ = _sym_sqrt(K)
    return normalize_scores(K_half @ (A / np.sqrt(d)[:, None]))


def normalize_scores(scores):
    """Clamp-and-normalize scores onto the simplex; ties go to the lowest class."""
    scores = np.asarray(scores, dtype=np.float64)
    c = scores.shape[1]
    labels = np.argmax(scores, axis=1)
    pos = np.maximum(scores, 0.0)
    total = pos.sum(1, keepdims=True)
    probs = np.divide(pos, total, out=np.full_like(pos, 1.0 / c), where=total > 0)
    return labels, probs


def smir_targets(E_L, y_L, E_U, n_classes, gamma=1.0, lam=None, sigma=None,
                 max_points=2000, seed=0):
    """Engine entry point; returns ``(model, labels_U, soft_U)``.

    When labeled plus unlabeled rows exceed ``max_points`` the fit uses a
    uniform random subsample (always containing a labeled row of every
    class) and the remaining unlabeled rows are scored through the kernel map.
    """
    E_L = np.asarray(E_L, dtype=np.float64)
    E_U = np.asarray(E_U, dtype=np.float64)
    n_l, n_u = len(E_L), len(E_U)
    pool = np.vstack([E_L, E_U])
    y_pool = np.concatenate([np.asarray(y_L), -np.ones(n_u, dtype=np.intp)])
    if n_l + n_u <= max_points:
        sub = np.arange(n_l + n_u)
    else:
        rng = np.random.default_rng((seed, 3))
        sub = np.sort(rng.choice(n_l + n_u, size=max_points, replace=False))
        present = set(y_pool[sub].tolist())
        extra = [np.flatnonzero(y_L == k)[0] for k in range(n_classes) if k not in present]
        if extra:
            sub = np.sort(np.concatenate([sub[: len(sub) - len(extra)], extra]))
    X = pool[sub]
    if sigma is None:
        sigma = median_distance(X)
    K, d = kernel_matrix(X, sigma)
    K_half, K_inv_half = _sym_sqrt(K)
    if lam is None:
        lam = 2.0 * gamma * n_classes / len(X)
    A = smir_fit(K, d, y_pool[sub], n_classes, gamma, lam, K_half=K_half)
    model = KernelModel(X, sigma, K, d, K_half, K_inv_half, gamma, lam, A)
    model.residual = float(
        np.abs(smir_gradient(A, K, d, y_pool[sub], gamma, lam, K_half)).max()
    )
    scores = np.empty((n_u, n_classes))
    in_sub = sub[sub >= n_l] - n_l
    train_scores = model.scores()
    scores[in_sub] = train_scores[sub >= n_l]
    rest = np.setdiff1d(np.arange(n_u), in_sub)
    if rest.size:
        scores[rest] = model.scores(E_U[rest])
    labels, soft = normalize_scores(scores)
    return model, labels, soft
