"""Safe combination of semi-supervised regressors.

Given a supervised baseline ``f0`` and base predictions ``f_1..f_b`` on
the unlabeled rows, the prediction maximizing the worst-case gain over all
simplex weightings is the projection of ``f0`` onto the convex hull of the
``f_i``.  That projection is a quadratic program over the simplex.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .anchor import knn_indices

__all__ = [
    "RegressorEnsemble",
    "project_simplex",
    "supervised_baseline",
    "self_training_knn",
    "build_base_regressors",
    "safer_combine",
    "worst_case_gain",
    "safer_targets",
]


def project_simplex(v):
    """Euclidean projection of a vector onto the probability simplex (sort-based)."""
    v = np.asarray(v, dtype=np.float64)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    ind = np.arange(1, len(v) + 1)
    rho = np.count_nonzero(u - css / ind > 0)
    theta = css[rho - 1] / rho
    return np.maximum(v - theta, 0.0)


def _onehot(y, c):
    out = np.zeros((len(y), c))
    out[np.arange(len(y)), y] = 1.0
    return out


def supervised_baseline(E_L, y_L, E_U, n_classes, k=5, neighbours=None):
    """Neighbour class frequencies over the ``k`` nearest labeled points."""
    if len(E_L) == 0:
        raise ValueError("no labeled points")
    idx = neighbours[:, :k] if neighbours is not None else knn_indices(E_U, E_L, k)[0]
    return _onehot(y_L, n_classes)[idx].mean(axis=1)


def self_training_knn(E_L, y_L, E_U, n_classes, k, iterations=1, neighbours=None):
    """kNN estimate refined by self-training.

    Iteration 0 averages the one-hot labels of the ``k`` nearest labeled
    points.  Each further iteration re-estimates every unlabeled point from
    its ``k`` nearest neighbours among labeled and unlabeled points, using
    the previous estimates as the unlabeled values.  ``neighbours`` may
    carry precomputed ``(labeled, pool)`` neighbour lists with at least
    ``k`` columns each.
    """
    lab_nb, pool_nb = neighbours if neighbours is not None else (None, None)
    f = supervised_baseline(E_L, y_L, E_U, n_classes, k, lab_nb)
    if iterations == 0 or len(E_U) == 0:
        return f
    n_l = len(E_L)
    if pool_nb is None:
        pool = np.vstack([E_L, E_U])
        pool_nb, _ = knn_indices(E_U, pool, k, self_index=np.arange(n_l, n_l + len(E_U)))
    idx = pool_nb[:, :k]
    values_l = _onehot(y_L, n_classes)
    for _ in range(iterations):
        values = np.vstack([values_l, f])
        f = values[idx].mean(axis=1)
    return f


def _neighbour_lists(E_L, E_U, k):
    # nearest-first ordering means the first k' columns are the k'-NN lists
    lab_nb, _ = knn_indices(E_U, E_L, k)
    pool = np.vstack([E_L, E_U])
    n_l = len(E_L)
    pool_nb, _ = knn_indices(E_U, pool, k, self_index=np.arange(n_l, n_l + len(E_U)))
    return lab_nb, pool_nb


def build_base_regressors(E_L, y_L, E_U, n_classes, ks=(3, 7, 11), iterations=1, neighbours=None):
    if neighbours is None and len(E_U):
        neighbours = _neighbour_lists(E_L, E_U, max(ks))
    return [self_training_knn(E_L, y_L, E_U, n_classes, k, iterations, neighbours) for k in ks]


@dataclass
class RegressorEnsemble:
    f0: np.ndarray
    f_list: list
    alpha: np.ndarray
    f_star: np.ndarray
    kkt_residual: float
    objective: float


def _objective(alpha, f0, F):
    diff = np.tensordot(alpha, F, axes=1) - f0
    return float((diff**2).sum())


def safer_combine(f0, f_list, iters=500, tol=0.0):
    """Weights on the simplex minimizing ``||sum_i alpha_i f_i - f0||^2``.

    Accelerated projected gradient with step ``1/L``, ``L`` the largest
    eigenvalue of the Gram matrix of the base predictions.  Returns a
    :class:`RegressorEnsemble`.
    """
    f0 = np.asarray(f0, dtype=np.float64)
    F = np.stack([np.asarray(f, dtype=np.float64) for f in f_list])
    if F.shape[1:] != f0.shape:
        raise ValueError(f"prediction shapes {F.shape[1:]} vs baseline {f0.shape}")
    if not (np.isfinite(F).all() and np.isfinite(f0).all()):
        raise ValueError("non-finite predictions")
    b = len(F)
    flat = F.reshape(b, -1)
    G = flat @ flat.T
    h = flat @ f0.ravel()
    L = float(np.linalg.eigvalsh(G)[-1]) if b else 0.0
    alpha = np.full(b, 1.0 / b)
    if L > 0:
        # Nesterov momentum with gradient restart; plain steps stall when G is ill-conditioned
        z, t = alpha.copy(), 1.0
        for _ in range(iters):
            g = G @ z - h
            new = project_simplex(z - g / L)
            step = np.abs(new - alpha).max()
            if g @ (new - alpha) > 0:
                z, t = new.copy(), 1.0
            else:
                t_next = (1 + np.sqrt(1 + 4 * t * t)) / 2
                z = new + (t - 1) / t_next * (new - alpha)
                t = t_next
            alpha = new
            if step <= tol:
                break
    grad = G @ alpha - h
    kkt = float(np.abs(alpha - project_simplex(alpha - grad)).max())
    f_star = np.tensordot(alpha, F, axes=1)
    return RegressorEnsemble(f0, list(F), alpha, f_star, kkt, _objective(alpha, f0, F))


def worst_case_gain(f, f0, f_list, alpha):
    """``sum_i alpha_i (||f0 - f_i||^2 - ||f - f_i||^2)`` over the base predictions."""
    f = np.asarray(f, dtype=np.float64)
    f0 = np.asarray(f0, dtype=np.float64)
    if f.shape != f0.shape or any(np.shape(fi) != f0.shape for fi in f_list):
        raise ValueError("shape mismatch")
    if len(alpha) != len(f_list):
        raise ValueError(f"{len(alpha)} weights for {len(f_list)} regressors")
    return float(
        sum(a * (((f0 - fi) ** 2).sum() - ((f - fi) ** 2).sum()) for a, fi in zip(alpha, f_list))
    )


def safer_targets(E_L, y_L, E_U, n_classes, k0=5, ks=(3, 7, 11), iterations=1, iters=500):
    """Engine entry point; returns ``(ensemble, soft_U)`` with rows on the simplex."""
    nb = _neighbour_lists(E_L, E_U, max(k0, *ks)) if len(E_U) else None
    f0 = supervised_baseline(E_L, y_L, E_U, n_classes, k0, None if nb is None else nb[0])
    f_list = build_base_regressors(E_L, y_L, E_U, n_classes, ks, iterations, nb)
    ens = safer_combine(f0, f_list, iters=iters)
    soft = np.maximum(ens.f_star, 0.0)
    total = soft.sum(1, keepdims=True)
    soft = np.divide(soft, total, out=np.full_like(soft, 1.0 / n_classes), where=total > 0)
    return ens, soft
