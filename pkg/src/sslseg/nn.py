"""Dense feed-forward classifier with stacked-autoencoder pretraining.

The default topology maps a 1125-value patch through two sigmoid encoder
layers (400, 80), a 27-unit sigmoid hidden layer and a softmax head.
Training is plain mini-batch gradient descent with a fixed step.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import expit, softmax

from .losses import ExtendedTargets, loss_value_and_grad
from .raster_io import ModelBundle

log = logging.getLogger(__name__)

__all__ = [
    "Layer",
    "MlpModel",
    "TrainConfig",
    "TrainingDivergedError",
    "DEFAULT_DIMS",
    "init_layer",
    "build_classifier",
    "forward",
    "embed",
    "head",
    "pretrain_encoders",
    "reconstruction_mse",
    "finetune",
    "gradient_check",
    "model_to_bundle",
    "model_from_bundle",
]

DEFAULT_DIMS = (1125, 400, 80, 27)
ACTIVATIONS = ("sigmoid", "linear", "softmax")
EMBED_DEPTH = 2


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray
    activation: str = "sigmoid"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    def apply(self, X):
        z = X @ self.weight.T + self.bias
        if self.activation == "sigmoid":
            return expit(z)
        if self.activation == "softmax":
            return softmax(z, axis=1)
        return z

    def copy(self):
        return Layer(self.weight.copy(), self.bias.copy(), self.activation)


class MlpModel:
    def __init__(self, layers):
        self.layers = list(layers)
        for i, layer in enumerate(self.layers):
            if layer.activation == "softmax" and i != len(self.layers) - 1:
                raise ValueError("softmax is only allowed on the final layer")
            if i and layer.weight.shape[1] != self.layers[i - 1].weight.shape[0]:
                raise ValueError(f"layer {i} input dim does not chain")

    @property
    def dims(self):
        return [self.layers[0].weight.shape[1]] + [l.weight.shape[0] for l in self.layers]

    @property
    def dtype(self):
        return self.layers[0].weight.dtype

    def copy(self):
        return MlpModel([l.copy() for l in self.layers])

    def astype(self, dtype):
        return MlpModel(
            [Layer(l.weight.astype(dtype), l.bias.astype(dtype), l.activation) for l in self.layers]
        )

    def parameters(self):
        for layer in self.layers:
            yield layer.weight
            yield layer.bias


@dataclass
class TrainConfig:
    epochs: int = 50
    lr: float = 0.01
    batch_size: int = 32
    seed: int = 0
    loss: str = "mse"
    refresh_every: int = 0  # epochs between soft-target refreshes; 0 = never

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs ≥ 1 required")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1:
            raise ValueError("batch size ≥ 1 required")


def init_layer(n_in, n_out, activation, rng, dtype=np.float64):
    r = np.sqrt(6.0 / (n_in + n_out))
    weight = rng.uniform(-r, r, size=(n_out, n_in)).astype(dtype)
    return Layer(weight, np.zeros(n_out, dtype=dtype), activation)


def build_classifier(encoders, n_classes, hidden=27, seed=0, dtype=np.float64):
    """Stack pretrained encoders with a freshly initialized hidden layer and softmax head."""
    rng = np.random.default_rng((seed, 1))
    layers = [Layer(e.weight.astype(dtype), e.bias.astype(dtype), "sigmoid") for e in encoders]
    width = layers[-1].weight.shape[0]
    if hidden:
        layers.append(init_layer(width, hidden, "sigmoid", rng, dtype))
        width = hidden
    layers.append(init_layer(width, n_classes, "softmax", rng, dtype))
    return MlpModel(layers)


def _run(layers, X, chunk=4096):
    if X.shape[1] != layers[0].weight.shape[1]:
        raise ValueError(f"input has {X.shape[1]} columns, model expects {layers[0].weight.shape[1]}")
    dtype = layers[0].weight.dtype
    outs = []
    for start in range(0, max(len(X), 1), chunk):
        h = np.asarray(X[start : start + chunk], dtype=dtype)
        for layer in layers:
            h = layer.apply(h)
        outs.append(h)
    return np.concatenate(outs) if len(outs) > 1 else outs[0]


def forward(model, X):
    """Class probabilities, one row per input row."""
    return _run(model.layers, X)


def embed(model, X):
    """Output of the second encoder layer (the 80-dim code by default)."""
    return _run(model.layers[:EMBED_DEPTH], X)


def head(model, E):
    """Apply the layers after the embedding; ``head(m, embed(m, X)) == forward(m, X)``."""
    return _run(model.layers[EMBED_DEPTH:], E)


def _forward_cache(layers, X):
    acts = [X]
    for layer in layers:
        acts.append(layer.apply(acts[-1]))
    return acts


def _backward(layers, acts, grad_out, first=0):
    """Gradients (dW, db) per layer given dLoss/dOutput; layers before ``first`` are frozen."""
    grads = [None] * len(layers)
    g = grad_out
    for i in range(len(layers) - 1, first - 1, -1):
        layer, a = layers[i], acts[i + 1]
        if layer.activation == "sigmoid":
            delta = g * a * (1.0 - a)
        elif layer.activation == "softmax":
            delta = a * (g - (g * a).sum(axis=1, keepdims=True))
        else:
            delta = g
        grads[i] = (delta.T @ acts[i], delta.sum(axis=0))
        if i > first:
            g = delta @ layer.weight
    return grads


def _sgd_epochs(layers, X, loss_fn, cfg, rows=None, first=0, stage=""):
    """Shared mini-batch loop; returns the per-epoch mean batch loss."""
    rows = np.arange(len(X)) if rows is None else np.asarray(rows)
    rng = np.random.default_rng((cfg.seed, 2, sum(map(ord, stage))))
    dtype = layers[0].weight.dtype
    history = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(rows))
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            sel = order[start : start + cfg.batch_size]
            xb = np.asarray(X[rows[sel]], dtype=dtype)
            acts = _forward_cache(layers, xb)
            loss, grad = loss_fn(acts[-1], sel)
            if not np.isfinite(loss):
                raise TrainingDivergedError(f"{stage or 'training'}: non-finite loss at epoch {epoch}")
            for layer, gw in zip(layers, _backward(layers, acts, grad, first)):
                if gw is None:
                    continue
                layer.weight -= cfg.lr * gw[0]
                layer.bias -= cfg.lr * gw[1]
            total += float(loss) * len(sel)
        history.append(total / len(order))
        log.debug("%s epoch %d loss %.6g", stage, epoch, history[-1])
    return history


def reconstruction_mse(encoder, decoder, X):
    recon = _run([encoder, decoder], X)
    return float(np.mean((recon - X) ** 2))


def pretrain_encoders(X, dims=DEFAULT_DIMS[1:3], cfg=None, dtype=np.float64):
    """Greedy layerwise autoencoder pretraining.

    Each stage trains a sigmoid encoder and a linear decoder to reconstruct
    the stage input under squared error, then feeds the encoder output to
    the next stage.  Returns ``(encoders, histories)`` where ``histories``
    holds, per stage, the epoch-averaged elementwise reconstruction MSE.
    """
    cfg = cfg or TrainConfig(lr=0.05)
    X = np.asarray(X, dtype=dtype)
    if X.size == 0:
        raise ValueError("pretraining data is empty")
    if not np.isfinite(X).all():
        raise ValueError("pretraining data contains non-finite values")
    encoders, histories = [], []
    H = X
    for stage, width in enumerate(dims):
        rng = np.random.default_rng((cfg.seed, 0, stage))
        enc = init_layer(H.shape[1], width, "sigmoid", rng, dtype)
        dec = init_layer(width, H.shape[1], "linear", rng, dtype)
        target = H

        m = H.shape[1]

        # per-element normalization keeps the step size independent of width
        def loss_fn(out, sel, target=target, m=m):
            loss, g = loss_value_and_grad(out, target[sel], "mse")
            return loss / m, g / m

        hist = _sgd_epochs([enc, dec], H, loss_fn, cfg, stage=f"pretrain-{stage}")
        encoders.append(enc)
        histories.append([2.0 * h for h in hist])
        H = _run([enc], H)
    return encoders, histories


def finetune(model, dataset, targets, cfg, refresh=None, freeze=0):
    """Full-network gradient descent on the composite loss.

    ``targets`` is an :class:`ExtendedTargets` whose ``rows`` index
    ``dataset.X``.  ``refresh(model)``, when given and ``cfg.refresh_every``
    is positive, rebuilds the targets every that many epochs.  Layers with
    index below ``freeze`` are held fixed.  Returns ``(model, history)``.
    """
    model = model.copy()
    X = dataset.X if hasattr(dataset, "X") else dataset
    if len(targets.rows) and targets.rows.max() >= len(X):
        raise ValueError("targets reference rows outside the dataset")
    history = []
    period = cfg.refresh_every if (refresh and cfg.refresh_every) else cfg.epochs
    done = 0
    while done < cfg.epochs:
        n = min(period, cfg.epochs - done)
        if done and refresh:
            targets = refresh(model)
        chunk = replace(cfg, epochs=n, seed=cfg.seed + done)
        tg = targets

        def loss_fn(out, sel, tg=tg):
            return loss_value_and_grad(out, tg.subset(sel))

        history += _sgd_epochs(model.layers, X, loss_fn, chunk, rows=tg.rows,
                               first=freeze, stage="finetune")
        done += n
    return model, history


def loss_on(model, X, targets):
    """Full-data loss of ``model`` on ``targets`` (rows index ``X``)."""
    out = forward(model, X[targets.rows])
    return loss_value_and_grad(out, targets)[0]


def _param_grads(model, X, targets):
    acts = _forward_cache(model.layers, X)
    loss, g = loss_value_and_grad(acts[-1], targets)
    grads = []
    for gw, gb in _backward(model.layers, acts, g):
        grads += [gw, gb]
    return loss, grads


def gradient_check(model, X, targets, loss_kind=None, step=1e-5):
    """Largest relative discrepancy between backprop and central differences.

    Runs in float64 over every parameter; ``targets`` is a target matrix or
    an :class:`ExtendedTargets` aligned with the rows of ``X``.
    """
    model = model.astype(np.float64)
    X = np.asarray(X, dtype=np.float64)
    if not isinstance(targets, ExtendedTargets):
        targets = ExtendedTargets.from_matrix(targets, loss_kind or "mse")
    elif loss_kind is not None:
        targets = replace(targets, kind=loss_kind)
    _, analytic = _param_grads(model, X, targets)
    worst = 0.0
    for param, ga in zip(model.parameters(), analytic):
        flat = param.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            up = loss_value_and_grad(_run(model.layers, X), targets)[0]
            flat[j] = orig - step
            down = loss_value_and_grad(_run(model.layers, X), targets)[0]
            flat[j] = orig
            gn = (up - down) / (2 * step)
            a = ga.reshape(-1)[j]
            worst = max(worst, abs(a - gn) / max(1.0, abs(a) + abs(gn)))
    return worst


def model_to_bundle(model, norm=None, metadata=None):
    return ModelBundle(
        [l.weight for l in model.layers],
        [l.bias for l in model.layers],
        [l.activation for l in model.layers],
        None if norm is None else norm.mean,
        None if norm is None else norm.std,
        dict(metadata or {}),
    )


def model_from_bundle(bundle, dtype=np.float64):
    return MlpModel(
        [
            Layer(np.asarray(w, dtype=dtype), np.asarray(b, dtype=dtype), act)
            for w, b, act in zip(bundle.weights, bundle.biases, bundle.activations)
        ]
    )
