import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from fgsb import dataset as ds
from fgsb.dataset import (CanvasError, DatasetManifest, InvalidRangeError, SlicePair, augment_hflip,
                          build_manifest, denormalize_intensity, extract_prior_mask, generate_phantom_dataset,
                          normalize_intensity, pad_to_canvas, phantom_remap, stack_pairs)
from fgsb.slice_io import SliceFormatError, read_raw, read_slice, write_raw, write_slice


def _pair(rng, shape=(8, 10), mask=True):
    src = rng.uniform(-1, 1, shape).astype(np.float32)
    tgt = rng.uniform(-1, 1, shape).astype(np.float32)
    m = (rng.random(shape) > 0.5).astype(np.float32) if mask else None
    return SlicePair(src, tgt, m, "s0", 0)


def test_normalize_endpoints():
    raw = np.full((4, 4), 3.0)
    assert np.all(normalize_intensity(raw, 3.0, 7.0) == -1.0)
    assert np.all(normalize_intensity(np.full((4, 4), 5.0), 3.0, 7.0) == 0.0)
    assert np.all(normalize_intensity(np.full((4, 4), 7.0), 3.0, 7.0) == 1.0)


@given(lo=st.floats(-1e3, 1e3), width=st.floats(1e-2, 1e3), seed=st.integers(0, 2 ** 31))
@settings(max_examples=50, deadline=None)
def test_normalize_roundtrip(lo, width, seed):
    hi = lo + width
    raw = np.random.default_rng(seed).uniform(lo, hi, (6, 6))
    out = normalize_intensity(raw, lo, hi)
    assert out.min() >= -1 and out.max() <= 1
    np.testing.assert_allclose(denormalize_intensity(out, lo, hi), raw, atol=1e-6 * max(1.0, abs(lo), abs(hi)))


def test_normalize_monotone(rng):
    raw = np.sort(rng.uniform(0, 10, 100))
    assert np.all(np.diff(normalize_intensity(raw, 0, 10)) >= 0)


def test_normalize_invalid_range():
    with pytest.raises(InvalidRangeError):
        normalize_intensity(np.zeros(3), 1.0, 1.0)
    with pytest.raises(InvalidRangeError):
        denormalize_intensity(np.zeros(3), 2.0, 1.0)


def test_normalize_clips_and_counts():
    before = ds.clip_counter["normalize_intensity"]
    out = normalize_intensity(np.array([-5.0, 0.5, 9.0]), 0.0, 1.0)
    assert out.tolist() == [-1.0, 0.0, 1.0]
    assert ds.clip_counter["normalize_intensity"] == before + 2


def test_pad_identity_and_constant():
    img = np.random.default_rng(0).uniform(-1, 1, (24, 24))
    assert np.array_equal(pad_to_canvas(img, (24, 24)), img)
    const = np.full((20, 18), 0.5)
    assert np.all(pad_to_canvas(const, (32, 32)) == 0.5)


def test_pad_center_crop_oracle(rng):
    img = rng.uniform(-1, 1, (100, 100))
    out = pad_to_canvas(img, (128, 140))
    top, left = (128 - 100) // 2, (140 - 100) // 2
    assert np.array_equal(out[top:top + 100, left:left + 100], img)
    border = np.ones_like(out, bool)
    border[top:top + 100, left:left + 100] = False
    assert np.all(out[border] == img.min())


def test_pad_too_large():
    with pytest.raises(CanvasError):
        pad_to_canvas(np.zeros((10, 30)), (16, 16))


def test_prior_mask_thresholds(rng):
    tgt = rng.uniform(-1, 1, (16, 16))
    assert np.all(extract_prior_mask(tgt, -1.0) == 1)
    assert np.all(extract_prior_mask(tgt, 1.0 + 1e-9) == 0)
    m = extract_prior_mask(tgt, 0.6)
    oracle = np.array([[1.0 if v >= 0.6 else 0.0 for v in row] for row in tgt])
    assert np.array_equal(m, oracle)


def test_hflip(rng):
    pair = _pair(rng)
    assert augment_hflip(pair, 0.0, rng) is pair
    once = augment_hflip(pair, 1.0, rng)
    twice = augment_hflip(once, 1.0, rng)
    for key in ("source", "target", "prior_mask"):
        a, b = getattr(pair, key), getattr(once, key)
        W = a.shape[1]
        for j in range(W):
            assert np.array_equal(b[:, j], a[:, W - 1 - j])
        assert np.array_equal(getattr(twice, key), a)


def test_hflip_probability_and_range(rng):
    pair = _pair(rng)
    flips = sum(augment_hflip(pair, 0.3, rng) is not pair for _ in range(4000))
    assert abs(flips / 4000 - 0.3) < 0.03
    with pytest.raises(ValueError):
        augment_hflip(pair, 1.5, rng)


def test_slicepair_validation(rng):
    with pytest.raises(ValueError):
        SlicePair(np.zeros((4, 4)), np.zeros((4, 5)))
    with pytest.raises(ValueError):
        SlicePair(np.full((4, 4), 1.5), np.zeros((4, 4)))
    with pytest.raises(ValueError):
        SlicePair(np.zeros((4, 4)), np.zeros((4, 4)), np.full((4, 4), 0.5))


def test_phantom_deterministic_and_valid():
    a = generate_phantom_dataset(7, 3, 5, (32, 32), lesion_rate=1.0, n_test_subjects=1)
    b = generate_phantom_dataset(7, 3, 5, (32, 32), lesion_rate=1.0, n_test_subjects=1)
    for p, q in zip(a.pairs, b.pairs):
        assert np.array_equal(p.source, q.source) and np.array_equal(p.target, q.target)
        assert np.array_equal(p.prior_mask, q.prior_mask)
    assert set(a.subjects("train")).isdisjoint(a.subjects("test"))
    assert len(a.subjects("test")) == 1 and len(a.pairs) == 15
    c = generate_phantom_dataset(8, 3, 5, (32, 32), lesion_rate=1.0)
    assert any(not np.array_equal(p.source, q.source) for p, q in zip(a.pairs, c.pairs))


def test_phantom_remap_outside_lesions():
    man = generate_phantom_dataset(1, 2, 6, (32, 32), lesion_rate=1.0)
    n_lesion = 0
    for p in man.pairs:
        out = p.prior_mask == 0
        np.testing.assert_allclose(p.target[out], phantom_remap(p.source)[out], atol=1e-6)
        n_lesion += int(p.prior_mask.sum() > 0)
        # lesions are brighter than any tissue in the target
        if p.prior_mask.sum():
            assert p.target.max() > p.target[out].max()
    assert n_lesion > 0


def test_phantom_remap_monotone():
    s = np.linspace(-1, 1, 501)
    r = phantom_remap(s)
    assert np.all(np.diff(r) > 0) and r[0] == -1 and r[-1] == 1


def test_phantom_args():
    with pytest.raises(ValueError):
        generate_phantom_dataset(0, 0, 4)
    with pytest.raises(ValueError):
        generate_phantom_dataset(0, 2, 4, (16, 16), n_test_subjects=2)


@pytest.mark.parametrize("fmt", ["fgsb", "png"])
def test_manifest_roundtrip(tmp_path, fmt):
    man = generate_phantom_dataset(2, 2, 3, (16, 16), lesion_rate=1.0, n_test_subjects=1)
    path = man.save(tmp_path, fmt=fmt)
    back = DatasetManifest.load(path)
    tol = 0 if fmt == "fgsb" else 2.0 / 65535
    assert back.canvas == man.canvas and back.splits == man.splits
    for p, q in zip(man.pairs, back.pairs):
        assert (p.subject_id, p.slice_index) == (q.subject_id, q.slice_index)
        np.testing.assert_allclose(q.source, p.source, atol=tol)
        np.testing.assert_array_equal(q.prior_mask, p.prior_mask)
    # manifest lines are sorted-key JSON
    first = json.loads(path.read_text().splitlines()[0])
    assert list(first) == sorted(first)


def test_manifest_missing_file(tmp_path):
    man = generate_phantom_dataset(2, 2, 2, (16, 16))
    path = man.save(tmp_path)
    next((tmp_path / "slices").rglob("*_target.fgsb")).unlink()
    with pytest.raises(FileNotFoundError):
        DatasetManifest.load(path)


def test_manifest_rejects_wrong_shape(tmp_path):
    man = generate_phantom_dataset(2, 2, 2, (16, 16))
    path = man.save(tmp_path)
    f = next((tmp_path / "slices").rglob("*_source.fgsb"))
    write_raw(f, np.zeros((8, 8), np.float32))
    with pytest.raises(CanvasError):
        DatasetManifest.load(path)


def test_manifest_split_overlap_rejected(rng):
    p = _pair(rng)
    with pytest.raises(ValueError):
        DatasetManifest([p], {"s0": "validation"}, p.shape)


def test_build_manifest(rng):
    raw_src = [rng.uniform(100, 900, (12, 10)) for _ in range(3)]
    raw_tgt = [rng.uniform(0, 50, (12, 10)) for _ in range(3)]
    masks = [np.ones((12, 10)) for _ in range(3)]
    man = build_manifest({"a": list(zip(raw_src, raw_tgt, masks)), "b": list(zip(raw_src, raw_tgt))},
                         (16, 16), test_subjects=["b"], prior_threshold=0.5)
    lo = min(x.min() for x in raw_src)
    hi = max(x.max() for x in raw_src)
    assert man.normalization["a"]["source"] == [lo, hi]
    assert man.splits == {"a": "train", "b": "test"}
    pa = man.subset("train")[0]
    assert pa.prior_mask.sum() == 12 * 10  # padding of a supplied mask is background
    np.testing.assert_allclose(pa.source[2:14, 3:13], normalize_intensity(raw_src[0], lo, hi), atol=1e-6)
    pb = man.subset("test")[0]
    assert np.array_equal(pb.prior_mask, extract_prior_mask(pb.target, 0.5))


def test_build_manifest_drops_background():
    blank = (np.zeros((8, 8)), np.zeros((8, 8)))
    real = (np.linspace(0, 1, 64).reshape(8, 8), np.linspace(0, 1, 64).reshape(8, 8))
    man = build_manifest({"a": [blank, real]}, (8, 8))
    assert [p.slice_index for p in man.pairs] == [1]


def test_stack_pairs(rng):
    pairs = [_pair(rng), _pair(rng, mask=False)]
    src, tgt, mask = stack_pairs(pairs)
    assert src.shape == (2, 1, 8, 10) and mask.shape == (2, 1, 8, 10)
    assert mask[1].sum() == 0


@given(arrays(np.float32, st.tuples(st.integers(1, 20), st.integers(1, 20)),
              elements=st.floats(-1, 1, width=32)))
@settings(max_examples=40, deadline=None)
def test_raw_roundtrip_exact(tmp_path_factory, img):
    f = tmp_path_factory.mktemp("raw") / "x.fgsb"
    write_slice(f, img)
    assert np.array_equal(read_slice(f), img)


def test_png_roundtrip(tmp_path, rng):
    img = rng.uniform(-1, 1, (9, 7)).astype(np.float32)
    write_slice(tmp_path / "x.png", img)
    np.testing.assert_allclose(read_slice(tmp_path / "x.png"), img, atol=1.0 / 65535 + 1e-7)


def test_raw_format_errors(tmp_path):
    (tmp_path / "bad.fgsb").write_bytes(b"NOPE" + bytes(8))
    with pytest.raises(SliceFormatError):
        read_raw(tmp_path / "bad.fgsb")
    (tmp_path / "short.fgsb").write_bytes(b"FG")
    with pytest.raises(SliceFormatError):
        read_raw(tmp_path / "short.fgsb")
    with pytest.raises(SliceFormatError):
        write_raw(tmp_path / "x.fgsb", np.zeros((2, 2, 2)))
