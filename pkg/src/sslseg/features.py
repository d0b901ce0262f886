"""Per-pixel features: NDVI, channel normalization, patches and data splits."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .raster_io import BandStack

__all__ = [
    "NormStats",
    "PatchDataset",
    "compute_ndvi",
    "add_ndvi",
    "normalize_channels",
    "apply_normalization",
    "extract_patch",
    "extract_patches",
    "build_dataset",
    "DEFAULT_RATIOS",
]

DEFAULT_RATIOS = (0.16, 0.64, 0.20)


def compute_ndvi(nir, red):
    """(NIR - R) / (NIR + R), with 0 where both bands are 0."""
    nir = np.asarray(nir, dtype=np.float64)
    red = np.asarray(red, dtype=np.float64)
    if nir.shape != red.shape:
        raise ValueError(f"band size mismatch: {nir.shape} vs {red.shape}")
    if (nir < 0).any() or (red < 0).any():
        raise ValueError("NDVI needs non-negative reflectances")
    total = nir + red
    out = np.zeros_like(total)
    np.divide(nir - red, total, out=out, where=total > 0)
    return out


def add_ndvi(stack, nir="nir", red="red", name="ndvi"):
    """Append an NDVI band when the stack has a NIR band; otherwise return it as is."""
    if nir not in stack.band_names or name in stack.band_names:
        return stack
    return stack.with_band(name, compute_ndvi(stack.band(nir), stack.band(red)))


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if (self.std <= 0).any():
            raise ValueError("normalization std must be positive for every band")


def normalize_channels(stack):
    """Z-score every band; returns the normalized stack and the statistics used."""
    data = stack.data.astype(np.float64)
    mean = data.mean(axis=(1, 2))
    std = data.std(axis=(1, 2))
    const = np.flatnonzero(std == 0)
    if const.size:
        raise ValueError(f"zero variance band: {stack.band_names[const[0]]}")
    stats = NormStats(mean, std)
    return apply_normalization(stack, stats), stats


def apply_normalization(stack, stats):
    if len(stats.mean) != stack.n_bands:
        raise ValueError(f"stats cover {len(stats.mean)} bands, stack has {stack.n_bands}")
    data = (stack.data.astype(np.float64) - stats.mean[:, None, None]) / stats.std[:, None, None]
    return BandStack(stack.band_names, data)


def _padded(data, half):
    return np.pad(data, ((0, 0), (half, half), (half, half)), mode="reflect")


def extract_patch(stack, x, y, patch=15):
    """Band-major flattened ``patch x patch`` window centred on pixel (x, y).

    Samples falling outside the image are mirrored back in (reflect padding,
    edge pixel not repeated).
    """
    if not (0 <= x < stack.width and 0 <= y < stack.height):
        raise ValueError(f"centre ({x},{y}) outside {stack.width}x{stack.height} image")
    return extract_patches(stack, np.array([x]), np.array([y]), patch)[0]


def extract_patches(stack, xs, ys, patch=15, padded=None):
    """Vectorized :func:`extract_patch` for arrays of centres.

    ``padded`` lets callers reuse a pre-padded copy of the data when
    extracting many chunks from the same raster.
    """
    if patch % 2 != 1:
        raise ValueError("patch size must be odd")
    xs = np.asarray(xs, dtype=np.intp)
    ys = np.asarray(ys, dtype=np.intp)
    if padded is None:
        padded = _padded(stack.data, patch // 2)
    windows = sliding_window_view(padded, (patch, patch), axis=(1, 2))
    # windows: (bands, H, W, patch, patch) -> rows (n, bands, patch, patch)
    out = windows[:, ys, xs].transpose(1, 0, 2, 3)
    return out.reshape(len(xs), -1)


@dataclass
class PatchDataset:
    """Patch vectors for annotated pixels, split into labeled/unlabeled/test.

    ``y`` holds the 0-based true class of every row; only ``labeled_idx``
    rows are treated as known during training.  ``coords`` is ``(x, y)``.
    """

    X: np.ndarray
    y: np.ndarray
    coords: np.ndarray
    labeled_idx: np.ndarray
    unlabeled_idx: np.ndarray
    test_idx: np.ndarray
    n_classes: int

    def __post_init__(self):
        sets = [set(self.labeled_idx.tolist()), set(self.unlabeled_idx.tolist()),
                set(self.test_idx.tolist())]
        if sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2]:
            raise ValueError("labeled/unlabeled/test index sets overlap")

    @property
    def T(self):
        """One-hot targets of the labeled rows."""
        return np.eye(self.n_classes)[self.y[self.labeled_idx]]

    @property
    def n_features(self):
        return self.X.shape[1]


def _split_counts(n, ratios):
    counts = [int(round(r * n)) for r in ratios]
    # rounding can overshoot by one when ratios sum to 1
    while sum(counts) > n:
        counts[int(np.argmax(counts))] -= 1
    return counts


def split_indices(mask, ratios=DEFAULT_RATIOS, seed=0, n_classes=None):
    """Stratified per-class split of annotated pixels.

    Returns three arrays of flat pixel indices (labeled, unlabeled, test),
    each sorted, plus the class count.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios):
        raise ValueError(f"need three non-negative ratios, got {ratios}")
    if any(r > 1 for r in ratios) or sum(ratios) > 1 + 1e-12:
        raise ValueError(f"ratios must not exceed 1 (got {ratios})")
    labels = mask.labels.ravel()
    if n_classes is None:
        n_classes = int(labels.max())
    rng = np.random.default_rng(seed)
    parts = ([], [], [])
    for k in range(1, n_classes + 1):
        idx = np.flatnonzero(labels == k)
        if idx.size == 0:
            raise ValueError(f"class {k} absent from the mask")
        idx = rng.permutation(idx)
        counts = _split_counts(idx.size, ratios)
        start = 0
        for part, cnt in zip(parts, counts):
            part.append(idx[start : start + cnt])
            start += cnt
    return tuple(np.sort(np.concatenate(p)) for p in parts), n_classes


def build_dataset(stack, mask, ratios=DEFAULT_RATIOS, seed=0, patch=15, n_classes=None):
    """Assemble the patch dataset; rows are ordered labeled, unlabeled, test."""
    mask.check(like=stack)
    (lab, unl, tst), n_classes = split_indices(mask, ratios, seed, n_classes)
    flat = np.concatenate([lab, unl, tst])
    ys, xs = np.divmod(flat, stack.width)
    X = extract_patches(stack, xs, ys, patch)
    y = mask.labels.ravel()[flat].astype(np.intp) - 1
    nl, nu = len(lab), len(unl)
    return PatchDataset(
        X=X,
        y=y,
        coords=np.stack([xs, ys], axis=1),
        labeled_idx=np.arange(nl),
        unlabeled_idx=np.arange(nl, nl + nu),
        test_idx=np.arange(nl + nu, len(flat)),
        n_classes=n_classes,
    )
