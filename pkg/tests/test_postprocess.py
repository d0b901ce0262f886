import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sslseg.postprocess import (
    confusion,
    csi_from_f1,
    disc_footprint,
    erode_binary,
    f1_from_pr,
    majority_filter,
    metrics,
    postprocess_buildings,
)
from sslseg.raster_io import LabelMask


def majority_oracle(labels, radius, shape="disc"):
    h, w = labels.shape
    out = labels.copy()
    for y in range(h):
        for x in range(w):
            votes = {}
            for yy in range(max(0, y - radius), min(h, y + radius + 1)):
                for xx in range(max(0, x - radius), min(w, x + radius + 1)):
                    if shape == "disc" and (yy - y) ** 2 + (xx - x) ** 2 > radius**2:
                        continue
                    votes[labels[yy, xx]] = votes.get(labels[yy, xx], 0) + 1
            top = max(votes.values())
            winners = [k for k, v in votes.items() if v == top]
            if len(winners) == 1:
                out[y, x] = winners[0]
    return out


def erosion_oracle(binary, window):
    h, w = binary.shape
    r = window // 2
    out = np.zeros_like(binary, dtype=np.uint8)
    for y in range(h):
        for x in range(w):
            ok = True
            for yy in range(y - r, y + r + 1):
                for xx in range(x - r, x + r + 1):
                    if not (0 <= yy < h and 0 <= xx < w) or binary[yy, xx] == 0:
                        ok = False
            out[y, x] = ok
    return out


def test_footprint():
    fp = disc_footprint(1)
    assert fp.astype(int).tolist() == [[0, 1, 0], [1, 1, 1], [0, 1, 0]]
    assert disc_footprint(21).sum() == sum(
        1 for dy in range(-21, 22) for dx in range(-21, 22) if dx * dx + dy * dy <= 441
    )
    with pytest.raises(ValueError):
        disc_footprint(2, "hexagon")


def test_majority_examples():
    m = np.full((3, 3), 1)
    m[1, 1] = 2
    assert majority_filter(LabelMask(m), 1).labels.tolist() == [[1] * 3] * 3
    const = LabelMask(np.full((5, 4), 3))
    assert np.array_equal(majority_filter(const, 2).labels, const.labels)
    with pytest.raises(ValueError):
        majority_filter(const, 0)


def test_majority_tie_keeps_original():
    # 2x2 checkerboard, radius covering everything: 2 vs 2 everywhere
    m = np.array([[1, 2], [2, 1]])
    assert np.array_equal(majority_filter(LabelMask(m), 5).labels, m)


def test_majority_global_mode():
    rng = np.random.default_rng(0)
    m = rng.integers(1, 4, size=(9, 11))
    m[0, :] = 1
    out = majority_filter(LabelMask(m), 30).labels
    assert np.all(out == np.bincount(m.ravel()).argmax())


@pytest.mark.parametrize("shape", ["disc", "square"])
def test_majority_matches_oracle_16x16(shape):
    m = np.random.default_rng(1).integers(1, 4, size=(16, 16))
    assert np.array_equal(majority_filter(LabelMask(m), 3, shape).labels, majority_oracle(m, 3, shape))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 32), st.integers(1, 32), st.integers(1, 6), st.integers(1, 4))
def test_majority_property(seed, h, w, radius, c):
    m = np.random.default_rng(seed).integers(0, c + 1, size=(h, w))
    assert np.array_equal(majority_filter(LabelMask(m), radius).labels, majority_oracle(m, radius))


def test_erosion_examples():
    single = np.zeros((15, 15), dtype=np.uint8)
    single[7, 7] = 1
    assert not erode_binary(LabelMask(single), 7).labels.any()
    block = np.zeros((30, 30), dtype=np.uint8)
    block[5:25, 5:25] = 1
    out = erode_binary(LabelMask(block), 7).labels
    assert out.sum() == 14 * 14 and out[8:22, 8:22].all()
    assert np.array_equal(out, erosion_oracle(block, 7))
    assert not erode_binary(LabelMask(np.zeros((4, 4), np.uint8))).labels.any()
    with pytest.raises(ValueError):
        erode_binary(LabelMask(block), 6)


def test_erosion_borders_erode():
    full = np.ones((9, 9), dtype=np.uint8)
    out = erode_binary(LabelMask(full), 3).labels
    assert not out[0].any() and out[1:-1, 1:-1].all()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 32), st.integers(1, 32),
       st.sampled_from([1, 3, 5, 7]), st.floats(0.3, 0.95))
def test_erosion_property(seed, h, w, window, density):
    b = (np.random.default_rng(seed).random((h, w)) < density).astype(np.uint8)
    out = erode_binary(LabelMask(b), window).labels
    assert np.array_equal(out, erosion_oracle(b, window))
    assert np.all(out <= b)
    if window == 1:
        assert np.array_equal(out, b)


def test_pipeline_order():
    pred = np.full((40, 40), 3)
    pred[5:30, 5:30] = 1
    pred[12, 12] = 2
    out = postprocess_buildings(LabelMask(pred), radius=2, window=3).labels
    assert out[12, 12] == 1  # hole voted away before erosion
    expect = erosion_oracle(majority_oracle((pred == 1).astype(np.uint8), 2), 3)
    assert np.array_equal(out, expect)


def test_confusion_examples():
    truth = np.array([[1] * 9 + [2]])
    pred = np.array([[1] * 8 + [2, 1]])
    cc = confusion(LabelMask(pred), LabelMask(truth), classes=[1])
    assert (int(cc.tp[0]), int(cc.fp[0]), int(cc.fn[0]), int(cc.tn[0])) == (8, 1, 1, 0)
    same = confusion(LabelMask(truth), LabelMask(truth))
    assert not same.fp.any() and not same.fn.any()
    with pytest.raises(ValueError):
        confusion(LabelMask(truth), LabelMask(truth[:, :5]))


@settings(max_examples=30)
@given(st.integers(0, 2**31))
def test_confusion_matches_loop(seed):
    rng = np.random.default_rng(seed)
    t = rng.integers(0, 4, size=(6, 7))
    p = rng.integers(1, 4, size=(6, 7))
    cc = confusion(LabelMask(p), LabelMask(t))
    for i, k in enumerate(cc.classes):
        tp = fp = fn = tn = 0
        for a, b in zip(p.ravel(), t.ravel()):
            if b == 0:
                continue
            tp += a == k and b == k
            fp += a == k and b != k
            fn += a != k and b == k
            tn += a != k and b != k
        assert (cc.tp[i], cc.fp[i], cc.fn[i], cc.tn[i]) == (tp, fp, fn, tn)
        assert cc.tp[i] + cc.fp[i] + cc.fn[i] + cc.tn[i] == np.count_nonzero(t)


def test_metrics_substitution():
    truth = np.array([[1] * 9 + [2]])
    pred = np.array([[1] * 8 + [2, 1]])
    m = metrics(confusion(LabelMask(pred), LabelMask(truth), classes=[1]))[1]
    assert m["precision"] == pytest.approx(8 / 9) and m["recall"] == pytest.approx(8 / 9)
    assert m["csi"] == pytest.approx(0.8)
    assert m["accuracy"] == pytest.approx(0.8)


def test_metrics_empty_class_is_zero():
    m = metrics(confusion(LabelMask(np.array([[2, 2]])), LabelMask(np.array([[2, 2]])), classes=[1, 2]))
    assert m[1] == {"accuracy": 1.0, "precision": 0.0, "recall": 0.0, "f1": 0.0, "csi": 0.0}
    assert m[2]["f1"] == 1.0


def test_f1_and_csi_identity_on_table_row():
    f1 = f1_from_pr(0.871, 0.943)
    assert abs(100 * f1 - 90.6) <= 0.1
    assert abs(100 * csi_from_f1(0.906) - 82.7) <= 0.15


@settings(max_examples=30)
@given(st.integers(0, 2**31))
def test_csi_identity_on_reports(seed):
    rng = np.random.default_rng(seed)
    p, t = rng.integers(1, 3, size=(5, 5)), rng.integers(1, 3, size=(5, 5))
    for m in metrics(confusion(LabelMask(p), LabelMask(t))).values():
        assert m["csi"] == pytest.approx(csi_from_f1(m["f1"]), abs=1e-12)
