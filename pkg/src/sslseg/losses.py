"""Composite training losses over labeled and pseudo-labeled rows.

``mse`` and ``mae`` train on the labeled rows only.  ``manif``, ``smir``
and ``safer`` extend the target matrix with soft targets for the
unlabeled rows produced by the anchor-graph, SMIR and safe-combination
engines and apply squared error over the extended rows.  ``weiave``
combines the three engines' soft targets by a floored harmonic mean.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

__all__ = [
    "LOSS_KINDS",
    "SSL_KINDS",
    "SSLConfig",
    "SoftTargets",
    "ExtendedTargets",
    "EngineError",
    "harmonic_combine",
    "engine_targets",
    "assemble_targets",
    "loss_value_and_grad",
]

LOSS_KINDS = ("mse", "mae", "manif", "smir", "safer", "weiave")
SSL_KINDS = ("manif", "smir", "safer", "weiave")
ENGINES = ("manif", "safer", "smir")
HARMONIC_EPS = 1e-6


class EngineError(RuntimeError):
    pass


@dataclass
class SSLConfig:
    anchor_p: int = 500
    anchor_s: int = 3
    anchor_gamma: float = 0.01
    anchor_sigma: float = None
    safer_k0: int = 5
    safer_ks: tuple = (3, 7, 11)
    safer_iterations: int = 1
    safer_iters: int = 500
    smir_gamma: float = 1.0
    smir_lam: float = None
    smir_sigma: float = None
    smir_max_points: int = 2000
    unlabeled_weight: float = 1.0
    weiave_mode: str = "targets"
    seed: int = 0


@dataclass
class SoftTargets:
    """Soft targets for a set of unlabeled rows, tagged with the engine that made them."""

    rows: np.ndarray
    probs: np.ndarray
    source: str

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.intp)
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if len(self.rows) != len(self.probs):
            raise ValueError("rows and probability vectors differ in length")
        if self.probs.size:
            if (self.probs < 0).any() or not np.allclose(self.probs.sum(1), 1.0, atol=1e-9):
                raise ValueError(f"{self.source}: soft targets must lie on the simplex")


@dataclass
class ExtendedTargets:
    """Target matrix over labeled then unlabeled rows.

    ``rows`` index the dataset's patch matrix.  ``weights`` scale each row's
    contribution.  ``components`` is only set for ``weiave`` in ``losses``
    mode and holds one target matrix per engine.
    """

    rows: np.ndarray
    T: np.ndarray
    kind: str
    weights: np.ndarray = None
    n_labeled: int = None
    components: list = None
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}; expected one of {LOSS_KINDS}")
        self.rows = np.asarray(self.rows, dtype=np.intp)
        self.T = np.asarray(self.T, dtype=np.float64)
        if self.weights is None:
            self.weights = np.ones(len(self.rows))
        if self.n_labeled is None:
            self.n_labeled = len(self.rows)
        if len(self.T) != len(self.rows) or len(self.weights) != len(self.rows):
            raise ValueError("target rows, matrix and weights differ in length")

    @classmethod
    def from_matrix(cls, T, kind="mse", weights=None):
        return cls(np.arange(len(T)), T, kind, weights)

    def subset(self, sel):
        return ExtendedTargets(
            self.rows[sel],
            self.T[sel],
            self.kind,
            self.weights[sel],
            n_labeled=int(np.count_nonzero(np.asarray(sel) < self.n_labeled)),
            components=None if self.components is None else [C[sel] for C in self.components],
        )


def _squared(out, T, w):
    n = len(out)
    r = out - T
    loss = 0.5 * float((w * (r**2).sum(1)).sum()) / n
    return loss, (w[:, None] * r) / n


def loss_value_and_grad(outputs, targets, kind=None):
    """Loss and its gradient with respect to ``outputs``.

    Squared kinds use ``(1/2n) sum_i w_i ||y_i - t_i||^2``; ``mae`` uses
    ``(1/n) sum_i w_i sum_j |y_ij - t_ij|`` with subgradient 0 at zero
    residual.  ``targets`` may be a plain matrix (weights 1).
    """
    if not isinstance(targets, ExtendedTargets):
        targets = ExtendedTargets.from_matrix(targets, kind or "mse")
    kind = kind or targets.kind
    outputs = np.asarray(outputs)
    if outputs.shape != targets.T.shape:
        raise ValueError(f"outputs {outputs.shape} vs targets {targets.T.shape}")
    n = len(outputs)
    if n == 0:
        return 0.0, np.zeros_like(outputs)
    w = targets.weights
    if kind == "mae":
        r = outputs - targets.T
        loss = float((w * np.abs(r).sum(1)).sum()) / n
        return loss, (w[:, None] * np.sign(r)) / n
    if kind == "weiave" and targets.components:
        parts = [_squared(outputs, C, w) for C in targets.components]
        inv = [1.0 / (L + HARMONIC_EPS) for L, _ in parts]
        m = len(parts)
        H = m / sum(inv)
        grad = sum((H**2 / m) * v**2 * g for v, (_, g) in zip(inv, parts))
        return float(H), grad
    return _squared(outputs, targets.T, w)


def harmonic_combine(prob_list, eps=HARMONIC_EPS):
    """Per-component floored harmonic mean of several soft-target matrices, row-renormalized."""
    P = np.stack([np.asarray(p, dtype=np.float64) for p in prob_list])
    h = len(P) / (1.0 / (P + eps)).sum(axis=0)
    return h / h.sum(axis=1, keepdims=True)


def engine_targets(engine, E_L, y_L, E_U, n_classes, cfg):
    """Run one engine on embeddings; returns an :class:`SoftTargets` over 0..u-1."""
    from .anchor import anchor_graph
    from .safer import safer_targets
    from .smir import smir_targets

    try:
        if engine == "manif":
            _, _, soft = anchor_graph(
                E_L, y_L, E_U, n_classes, p=cfg.anchor_p, s=cfg.anchor_s,
                gamma=cfg.anchor_gamma, sigma=cfg.anchor_sigma, seed=cfg.seed,
            )
        elif engine == "safer":
            _, soft = safer_targets(
                E_L, y_L, E_U, n_classes, k0=cfg.safer_k0, ks=tuple(cfg.safer_ks),
                iterations=cfg.safer_iterations, iters=cfg.safer_iters,
            )
        elif engine == "smir":
            _, _, soft = smir_targets(
                E_L, y_L, E_U, n_classes, gamma=cfg.smir_gamma, lam=cfg.smir_lam,
                sigma=cfg.smir_sigma, max_points=cfg.smir_max_points, seed=cfg.seed,
            )
        else:
            raise ValueError(f"unknown engine {engine!r}")
    except Exception as exc:
        raise EngineError(f"{engine} engine failed: {exc}") from exc
    return SoftTargets(np.arange(len(E_U)), soft, engine)


def assemble_targets(kind, dataset, embeddings, cfg=None, cache=None):
    """Build the extended target matrix for one loss kind.

    ``embeddings`` has one row per dataset row.  ``cache`` (a dict) lets
    several calls share engine outputs computed on the same embeddings.
    """
    cfg = cfg or SSLConfig()
    if kind not in LOSS_KINDS:
        raise ValueError(f"unknown loss kind {kind!r}; expected one of {LOSS_KINDS}")
    lab, unl = dataset.labeled_idx, dataset.unlabeled_idx
    T_L = dataset.T
    if kind in ("mse", "mae") or len(unl) == 0:
        return ExtendedTargets(lab, T_L, kind)

    c = dataset.n_classes
    E_L, E_U = embeddings[lab], embeddings[unl]
    y_L = dataset.y[lab]
    cache = {} if cache is None else cache
    engines = ENGINES if kind == "weiave" else (kind,)
    info = {"runtime_s": {}}
    for name in engines:
        if name not in cache:
            t0 = time.perf_counter()
            cache[name] = engine_targets(name, E_L, y_L, E_U, c, cfg)
            cache.setdefault("_runtime", {})[name] = time.perf_counter() - t0
            log.info("%s engine: %.2fs", name, cache["_runtime"][name])
        info["runtime_s"][name] = cache["_runtime"][name]

    probs = {name: cache[name].probs for name in engines}
    components = None
    if kind == "weiave":
        soft = harmonic_combine([probs[n] for n in ENGINES])
        info["agreement"] = _agreement(probs)
        if cfg.weiave_mode == "losses":
            components = [np.vstack([T_L, probs[n]]) for n in ENGINES]
        elif cfg.weiave_mode != "targets":
            raise ValueError(f"weiave_mode must be 'targets' or 'losses', got {cfg.weiave_mode!r}")
    else:
        soft = probs[kind]
    weights = np.concatenate([np.ones(len(lab)), np.full(len(unl), cfg.unlabeled_weight)])
    return ExtendedTargets(
        np.concatenate([lab, unl]),
        np.vstack([T_L, soft]),
        kind,
        weights,
        n_labeled=len(lab),
        components=components,
        info=info,
    )


def _agreement(probs):
    out = {}
    names = sorted(probs)
    hard = {n: np.argmax(probs[n], axis=1) for n in names}
    for i, a in enumerate(names):
        for b in names[i + 1 :]:
            out[f"{a}-{b}"] = float(np.mean(hard[a] == hard[b]))
    return out
