"""Synthetic CIR + nDSM scenes with known ground truth.

Scenes are a ground background with rectangular "building" blobs and
elliptical "vegetation" blobs.  Buildings are elevated with flat NDVI,
vegetation is elevated with a high NIR response.  They stand in for
aerial orthoimagery at desk scale.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .raster_io import BandStack, LabelMask

__all__ = ["SyntheticSceneSpec", "synth_generate", "RAW_BANDS"]

RAW_BANDS = ("nir", "red", "green", "ndsm")

# class 1 building, 2 vegetation, 3 ground; columns follow RAW_BANDS
DEFAULT_SIGNATURES = (
    (0.35, 0.33, 0.30, 0.70),
    (0.80, 0.20, 0.30, 0.55),
    (0.30, 0.25, 0.24, 0.00),
)


@dataclass
class SyntheticSceneSpec:
    width: int = 128
    height: int = 128
    n_classes: int = 3
    blobs_per_class: tuple = (9, 12)
    blob_size: tuple = (8, 22)
    signatures: tuple = DEFAULT_SIGNATURES
    noise: float = 0.08
    building_height: float = 0.70
    seed: int = 0
    max_tries: int = 2000
    gap: int = 2
    background_class: int = field(default=3)

    def __post_init__(self):
        sigs = [tuple(s) for s in self.signatures]
        if len(sigs) != self.n_classes:
            raise ValueError(f"{len(sigs)} signatures for {self.n_classes} classes")
        if len(set(sigs)) != len(sigs):
            raise ValueError("class signatures must be pairwise distinct")
        if any(len(s) != len(RAW_BANDS) for s in sigs):
            raise ValueError(f"signatures need {len(RAW_BANDS)} values ({', '.join(RAW_BANDS)})")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")


def _shape_mask(kind, h, w):
    if kind == "rect":
        return np.ones((h, w), dtype=bool)
    yy, xx = np.mgrid[0:h, 0:w]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    return ((yy - cy) / (h / 2.0)) ** 2 + ((xx - cx) / (w / 2.0)) ** 2 <= 1.0


def synth_generate(spec):
    """Render a scene; returns ``(BandStack, LabelMask)``.

    The band stack carries the raw bands nir, red, green and ndsm; NDVI is
    derived from them downstream.  Blobs never overlap (``gap`` pixels of
    background are kept between them).
    """
    rng = np.random.default_rng(spec.seed)
    H, W = spec.height, spec.width
    labels = np.full((H, W), spec.background_class, dtype=np.uint8)
    occupied = np.zeros((H, W), dtype=bool)
    lo, hi = spec.blob_size
    plan = [(1, "rect", spec.blobs_per_class[0]), (2, "ellipse", spec.blobs_per_class[1])]
    for cls, kind, count in plan:
        placed, tries = 0, 0
        while placed < count:
            tries += 1
            if tries > spec.max_tries:
                raise RuntimeError(
                    f"could not place {count} class-{cls} blobs within {spec.max_tries} tries"
                )
            h, w = rng.integers(lo, hi + 1, size=2)
            if h >= H or w >= W:
                continue
            y0, x0 = rng.integers(0, H - h), rng.integers(0, W - w)
            g = spec.gap
            if occupied[max(y0 - g, 0) : y0 + h + g, max(x0 - g, 0) : x0 + w + g].any():
                continue
            shape = _shape_mask(kind, h, w)
            labels[y0 : y0 + h, x0 : x0 + w][shape] = cls
            occupied[y0 : y0 + h, x0 : x0 + w] = True
            placed += 1

    sig = np.asarray(spec.signatures, dtype=np.float64)
    data = sig[labels.astype(np.intp) - 1].transpose(2, 0, 1).copy()
    data[3][labels == 1] = spec.building_height
    if spec.noise > 0:
        data += rng.normal(0.0, spec.noise, size=data.shape)
    # reflectances and heights stay physical
    np.clip(data, 0.0, None, out=data)
    return BandStack(list(RAW_BANDS), data), LabelMask(labels)
