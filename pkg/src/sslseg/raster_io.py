"""Raster, label-mask, annotation and model file formats.

A raster on disk is a pair of files sharing a stem: ``<stem>.hdr`` is a
small ``key value`` text header and ``<stem>.bin`` holds the raw planar
payload (band-major, row-major within a band).  Band stacks use
little-endian float32 (``f32le``), label masks use uint8 (``u8``).

Model files are a single binary document: a magic line, one line of JSON
describing the layers, then the concatenated f32le weight and bias
payloads in layer order.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from shapely.geometry import LinearRing

__all__ = [
    "RasterFormatError",
    "BandStack",
    "LabelMask",
    "PolygonAnnotation",
    "ModelBundle",
    "load_band_stack",
    "save_band_stack",
    "load_label_mask",
    "save_label_mask",
    "load_annotations",
    "save_annotations",
    "rasterize_annotations",
    "save_model",
    "load_model",
]

MODEL_MAGIC = b"SSLSEG-MODEL 1\n"


class RasterFormatError(ValueError):
    """Malformed or inconsistent file contents."""


def _paths(path):
    path = Path(path)
    if path.suffix in (".hdr", ".bin"):
        path = path.with_suffix("")
    return Path(f"{path}.hdr"), Path(f"{path}.bin")


@dataclass
class BandStack:
    """Planar multi-band raster.

    ``data`` has shape ``(bands, height, width)`` and is stored as float32.
    """

    band_names: list
    data: np.ndarray

    def __post_init__(self):
        self.band_names = [str(b) for b in self.band_names]
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise ValueError("band data must be 3-d (bands, height, width)")
        if len(self.band_names) != self.data.shape[0]:
            raise ValueError(
                f"{len(self.band_names)} band names for {self.data.shape[0]} bands"
            )
        if len(set(self.band_names)) != len(self.band_names):
            raise ValueError(f"band names not unique: {self.band_names}")
        _check_finite(self.data)

    @property
    def height(self):
        return self.data.shape[1]

    @property
    def width(self):
        return self.data.shape[2]

    @property
    def n_bands(self):
        return self.data.shape[0]

    def band(self, name):
        return self.data[self.band_names.index(name)]

    def with_band(self, name, values):
        values = np.asarray(values, dtype=np.float32)[None]
        return BandStack(self.band_names + [name], np.concatenate([self.data, values]))

    def __eq__(self, other):
        if not isinstance(other, BandStack):
            return NotImplemented
        return (
            self.band_names == other.band_names
            and self.data.shape == other.data.shape
            and self.data.tobytes() == other.data.tobytes()
        )


def _check_finite(data):
    bad = ~np.isfinite(data)
    if bad.any():
        b, y, x = (int(v) for v in np.argwhere(bad)[0])
        raise RasterFormatError(f"non-finite value at band {b}, pixel ({x},{y})")


@dataclass
class LabelMask:
    """Per-pixel class codes, 0 = unannotated and 1..c = class."""

    labels: np.ndarray

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 2:
            raise ValueError("label mask must be 2-d (height, width)")
        if labels.size and (labels.min() < 0 or labels.max() > 255):
            raise ValueError("label codes must fit in 0..255")
        self.labels = np.ascontiguousarray(labels, dtype=np.uint8)

    @property
    def height(self):
        return self.labels.shape[0]

    @property
    def width(self):
        return self.labels.shape[1]

    def check(self, n_classes=None, like=None):
        if like is not None and (self.height, self.width) != (like.height, like.width):
            raise ValueError(
                f"mask is {self.width}x{self.height}, raster is {like.width}x{like.height}"
            )
        if n_classes is not None and self.labels.max(initial=0) > n_classes:
            raise ValueError(f"label {self.labels.max()} exceeds class count {n_classes}")
        return self

    def __eq__(self, other):
        if not isinstance(other, LabelMask):
            return NotImplemented
        return np.array_equal(self.labels, other.labels)


def _write_header(path, fields):
    with open(path, "w") as fh:
        for key, value in fields.items():
            if isinstance(value, (list, tuple)):
                value = " ".join(str(v) for v in value)
            fh.write(f"{key} {value}\n")


def _read_header(path):
    fields = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition(" ")
            fields[key] = value.strip()
    for key in ("width", "height", "dtype"):
        if key not in fields:
            raise RasterFormatError(f"{path}: header missing '{key}'")
    try:
        width, height = int(fields["width"]), int(fields["height"])
    except ValueError:
        raise RasterFormatError(f"{path}: non-integer dimensions") from None
    if width <= 0 or height <= 0:
        raise RasterFormatError(f"{path}: header dims must be positive")
    return fields, width, height


def _read_payload(path, dtype, count):
    with open(path, "rb") as fh:
        raw = fh.read()
    itemsize = np.dtype(dtype).itemsize
    if len(raw) != count * itemsize:
        raise RasterFormatError(
            f"payload length mismatch: expected {count * itemsize} bytes, found {len(raw)}"
        )
    return np.frombuffer(raw, dtype=dtype).copy()


def save_band_stack(stack, path):
    if stack.width == 0 or stack.height == 0 or stack.n_bands == 0:
        raise ValueError("cannot save an empty band stack")
    hdr, binp = _paths(path)
    hdr.parent.mkdir(parents=True, exist_ok=True)
    _write_header(
        hdr,
        {
            "format": "bandstack",
            "width": stack.width,
            "height": stack.height,
            "bands": stack.band_names,
            "dtype": "f32le",
        },
    )
    stack.data.astype("<f4").tofile(binp)


def load_band_stack(path):
    hdr, binp = _paths(path)
    if not hdr.exists() or not binp.exists():
        raise FileNotFoundError(f"band stack {hdr} / {binp} not found")
    fields, width, height = _read_header(hdr)
    if fields["dtype"] != "f32le":
        raise RasterFormatError(f"unsupported dtype {fields['dtype']!r}")
    names = fields.get("bands", "").split()
    if not names:
        raise RasterFormatError(f"{hdr}: no band names")
    data = _read_payload(binp, "<f4", width * height * len(names))
    data = data.reshape(len(names), height, width).astype(np.float32)
    _check_finite(data)
    return BandStack(names, data)


def save_label_mask(mask, path):
    if mask.width == 0 or mask.height == 0:
        raise ValueError("cannot save an empty label mask")
    hdr, binp = _paths(path)
    hdr.parent.mkdir(parents=True, exist_ok=True)
    _write_header(
        hdr, {"format": "labelmask", "width": mask.width, "height": mask.height, "dtype": "u8"}
    )
    mask.labels.tofile(binp)


def load_label_mask(path):
    hdr, binp = _paths(path)
    if not hdr.exists() or not binp.exists():
        raise FileNotFoundError(f"label mask {hdr} / {binp} not found")
    fields, width, height = _read_header(hdr)
    if fields["dtype"] != "u8":
        raise RasterFormatError(f"unsupported dtype {fields['dtype']!r}")
    data = _read_payload(binp, np.uint8, width * height)
    return LabelMask(data.reshape(height, width))


# --- annotations -----------------------------------------------------------


@dataclass
class PolygonAnnotation:
    class_id: int
    vertices: list

    def __post_init__(self):
        self.class_id = int(self.class_id)
        self.vertices = [(float(x), float(y)) for x, y in self.vertices]
        if self.class_id < 1:
            raise ValueError(f"class_id must be >= 1, got {self.class_id}")
        if len(self.vertices) < 3:
            raise ValueError("polygon needs at least 3 vertices")
        if not LinearRing(self.vertices).is_simple:
            raise ValueError(f"polygon (class {self.class_id}) is self-intersecting")


def load_annotations(path):
    """Read a JSON annotation document.

    The document is ``{"polygons": [{"class_id": 1, "vertices": [[x, y], ...]}, ...]}``
    with vertices in pixel coordinates (pixel ``(i, j)`` covers
    ``[i, i+1] x [j, j+1]``).
    """
    with open(path) as fh:
        doc = json.load(fh)
    return [PolygonAnnotation(p["class_id"], p["vertices"]) for p in doc["polygons"]]


def save_annotations(polygons, path):
    doc = {"polygons": [{"class_id": p.class_id, "vertices": p.vertices} for p in polygons]}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)


def _inside_or_on_edge(vertices, px, py):
    # even-odd ray casting; a point lying on an edge counts as inside
    vx = np.asarray([v[0] for v in vertices])
    vy = np.asarray([v[1] for v in vertices])
    x1, y1 = vx, vy
    x2, y2 = np.roll(vx, -1), np.roll(vy, -1)
    px = px[..., None]
    py = py[..., None]

    cross = (x2 - x1) * (py - y1) - (y2 - y1) * (px - x1)
    within_box = (
        (px >= np.minimum(x1, x2))
        & (px <= np.maximum(x1, x2))
        & (py >= np.minimum(y1, y2))
        & (py <= np.maximum(y1, y2))
    )
    on_edge = ((cross == 0) & within_box).any(-1)

    straddles = (y1 > py) != (y2 > py)
    with np.errstate(divide="ignore", invalid="ignore"):
        x_at = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
    crossings = (straddles & (px < x_at)).sum(-1)
    return on_edge | (crossings % 2 == 1)


def rasterize_annotations(polygons, width, height):
    """Burn polygons into a label mask by pixel-centre containment.

    Polygons are applied in order, so later polygons overwrite earlier
    ones where they overlap.
    """
    labels = np.zeros((height, width), dtype=np.uint8)
    if not polygons:
        return LabelMask(labels)
    for poly in polygons:
        verts = np.asarray(poly.vertices)
        if (
            verts[:, 0].min() < 0
            or verts[:, 0].max() > width
            or verts[:, 1].min() < 0
            or verts[:, 1].max() > height
        ):
            raise ValueError(
                f"polygon (class {poly.class_id}) has a vertex outside [0,{width}]x[0,{height}]"
            )
        x0 = max(int(np.floor(verts[:, 0].min() - 0.5)), 0)
        x1 = min(int(np.ceil(verts[:, 0].max() - 0.5)), width - 1)
        y0 = max(int(np.floor(verts[:, 1].min() - 0.5)), 0)
        y1 = min(int(np.ceil(verts[:, 1].max() - 0.5)), height - 1)
        if x1 < x0 or y1 < y0:
            continue
        ys, xs = np.mgrid[y0 : y1 + 1, x0 : x1 + 1]
        inside = _inside_or_on_edge(poly.vertices, xs + 0.5, ys + 0.5)
        labels[y0 : y1 + 1, x0 : x1 + 1][inside] = poly.class_id
    return LabelMask(labels)


# --- models ----------------------------------------------------------------


@dataclass
class ModelBundle:
    """A serializable network plus everything needed to run it on a raster.

    ``weights[i]`` has shape ``(out, in)``.  ``norm_mean``/``norm_std`` are
    the per-band statistics applied before patch extraction.
    """

    weights: list
    biases: list
    activations: list
    norm_mean: np.ndarray = None
    norm_std: np.ndarray = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    @property
    def layer_dims(self):
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    def validate(self):
        if not self.weights:
            raise ValueError("model has no layers")
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise ValueError("weights, biases and activations differ in length")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ValueError(f"layer {i}: bias shape {b.shape} vs weight {w.shape}")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ValueError(
                    f"layer {i}: input dim {w.shape[1]} does not chain with "
                    f"previous output {self.weights[i - 1].shape[0]}"
                )
        meta = self.metadata
        if "n_classes" in meta and self.layer_dims[-1] != meta["n_classes"]:
            raise ValueError(f"final dim {self.layer_dims[-1]} != n_classes {meta['n_classes']}")
        if "patch_size" in meta and "bands" in meta:
            expect = meta["patch_size"] ** 2 * len(meta["bands"])
            if self.layer_dims[0] != expect:
                raise ValueError(f"first dim {self.layer_dims[0]} != patch_size^2*bands = {expect}")


def save_model(model, path):
    model.validate()
    header = {
        "layers": [
            {"shape": list(w.shape), "activation": act}
            for w, act in zip(model.weights, model.activations)
        ],
        "dtype": "f32le",
        "norm_mean": None if model.norm_mean is None else [float(v) for v in model.norm_mean],
        "norm_std": None if model.norm_std is None else [float(v) for v in model.norm_std],
        "metadata": model.metadata,
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for w, b in zip(model.weights, model.biases):
            fh.write(np.ascontiguousarray(w, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(b, dtype="<f4").tobytes())


def load_model(path):
    if not os.path.exists(path):
        raise FileNotFoundError(f"model file {path} not found")
    with open(path, "rb") as fh:
        if fh.readline() != MODEL_MAGIC:
            raise RasterFormatError(f"{path}: not a model file")
        header = json.loads(fh.readline())
        payload = fh.read()
    shapes = [tuple(layer["shape"]) for layer in header["layers"]]
    for k in range(1, len(shapes)):
        if shapes[k][1] != shapes[k - 1][0]:
            raise RasterFormatError(
                f"{path}: layer chain broken at layer {k}: {shapes[k - 1]} -> {shapes[k]}"
            )
    expected = sum(o * i + o for o, i in shapes) * 4
    if len(payload) != expected:
        raise RasterFormatError(
            f"payload length mismatch: expected {expected} bytes, found {len(payload)}"
        )
    flat = np.frombuffer(payload, dtype="<f4")
    weights, biases, pos = [], [], 0
    for n_out, n_in in shapes:
        weights.append(flat[pos : pos + n_out * n_in].reshape(n_out, n_in).astype(np.float32))
        pos += n_out * n_in
        biases.append(flat[pos : pos + n_out].astype(np.float32))
        pos += n_out
    mean, std = header.get("norm_mean"), header.get("norm_std")
    return ModelBundle(
        weights,
        biases,
        [layer["activation"] for layer in header["layers"]],
        None if mean is None else np.asarray(mean),
        None if std is None else np.asarray(std),
        header.get("metadata", {}),
    )
