import gzip
import math
import struct

import numpy as np
import pytest

from subspaces.data import (
    Dataset,
    corrupt_gaussian,
    inject_label_noise,
    load_idx,
    synth_blobs,
    synth_split,
    write_idx,
)
from subspaces.errors import FormatError, InputError


def idx_images(pixels):
    pixels = np.asarray(pixels, dtype=np.uint8)
    n, r, c = pixels.shape
    return struct.pack(">IIII", 0x803, n, r, c) + pixels.tobytes()


def idx_labels(labels):
    return struct.pack(">II", 0x801, len(labels)) + bytes(labels)


@pytest.fixture
def fixture_files(tmp_path):
    pixels = np.array([[[0, 255, 51], [102, 0, 0], [0, 0, 255]], [[1, 2, 3], [4, 5, 6], [7, 8, 9]]])
    img, lab = tmp_path / "img.idx", tmp_path / "lab.idx"
    img.write_bytes(idx_images(pixels))
    lab.write_bytes(idx_labels([3, 1]))
    return img, lab, pixels


# ---- synthetic blobs --------------------------------------------------------

def test_blobs_deterministic():
    a, b = synth_blobs(3, 200, 5, 4, 0.1), synth_blobs(3, 200, 5, 4, 0.1)
    assert np.array_equal(a.inputs, b.inputs) and np.array_equal(a.labels, b.labels)
    assert a.fingerprint() == b.fingerprint()
    assert synth_blobs(4, 200, 5, 4, 0.1).fingerprint() != a.fingerprint()


def test_blobs_zero_spread_separable():
    ds = synth_blobs(0, 300, 6, 5, 0.0)
    centers = np.array([ds.inputs[ds.labels == c].mean(axis=0) for c in range(5)])
    pred = np.argmin(((ds.inputs[:, None, :] - centers[None]) ** 2).sum(axis=2), axis=1)
    assert np.mean(pred == ds.labels) == 1.0


def test_blobs_balanced():
    ds = synth_blobs(0, 10_000, 4, 10, 0.2)
    assert np.bincount(ds.labels).tolist() == [1000] * 10
    assert ds.inputs.min() >= 0 and ds.inputs.max() <= 1
    assert not ds.noise_mask.any()


def test_split_shares_centers_but_not_samples():
    train, test = synth_split(0, 500, 500, 4, 3, 0.05)
    assert not np.array_equal(train.inputs, test.inputs)
    for c in range(3):
        assert np.allclose(train.inputs[train.labels == c].mean(0), test.inputs[test.labels == c].mean(0), atol=0.02)


@pytest.mark.parametrize("args", [(0, 1, 3, 2, 0.1), (0, 10, 3, 1, 0.1), (0, 10, 3, 2, -1.0)])
def test_blobs_invalid(args):
    with pytest.raises(InputError):
        synth_blobs(*args)


def test_dataset_validation():
    with pytest.raises(InputError):
        Dataset(np.zeros((3, 2)), np.array([0, 1, 2]), 2)
    with pytest.raises(InputError):
        Dataset(np.zeros((3, 2)), np.array([0, 1]), 2)


# ---- IDX --------------------------------------------------------------------

def test_idx_fixture_exact(fixture_files):
    img, lab, pixels = fixture_files
    ds = load_idx(img, lab, num_classes=4)
    assert ds.inputs.shape == (2, 9)
    assert ds.inputs[0, 1] == 1.0 and ds.inputs[0, 0] == 0.0
    assert ds.inputs[0, 2] == 51 / 255 and ds.inputs[0, 3] == 0.4
    assert np.array_equal(ds.inputs, pixels.reshape(2, 9) / 255.0)
    assert ds.labels.tolist() == [3, 1] and ds.num_classes == 4


def test_idx_gzip(fixture_files, tmp_path):
    img, lab, pixels = fixture_files
    gz = tmp_path / "img.idx.gz"
    gz.write_bytes(gzip.compress(img.read_bytes()))
    assert np.array_equal(load_idx(gz, lab).inputs, load_idx(img, lab).inputs)


def test_idx_wrong_magic(fixture_files):
    img, lab, _ = fixture_files
    with pytest.raises(FormatError, match="offset 0"):
        load_idx(img, img)


def test_idx_truncated(fixture_files, tmp_path):
    img, lab, _ = fixture_files
    short = tmp_path / "short.idx"
    short.write_bytes(img.read_bytes()[:-3])
    with pytest.raises(FormatError, match="truncated data at offset 31"):
        load_idx(short, lab)
    stub = tmp_path / "stub.idx"
    stub.write_bytes(b"\x00\x00")
    with pytest.raises(FormatError, match="offset"):
        load_idx(stub, lab)


def test_idx_count_mismatch(fixture_files, tmp_path):
    img, _, _ = fixture_files
    lab = tmp_path / "three.idx"
    lab.write_bytes(idx_labels([0, 1, 2]))
    with pytest.raises(FormatError, match="count mismatch at offset 4"):
        load_idx(img, lab)


def test_idx_round_trip_byte_exact(tmp_path):
    ds = synth_blobs(0, 50, 16, 4, 0.2)
    write_idx(ds, tmp_path / "a.img", tmp_path / "a.lab")
    back = load_idx(tmp_path / "a.img", tmp_path / "a.lab", 4)
    write_idx(back, tmp_path / "b.img", tmp_path / "b.lab")
    assert (tmp_path / "a.img").read_bytes() == (tmp_path / "b.img").read_bytes()
    assert (tmp_path / "a.lab").read_bytes() == (tmp_path / "b.lab").read_bytes()
    assert np.array_equal(back.labels, ds.labels)
    assert np.array_equal(back.inputs, np.rint(ds.inputs * 255) / 255)


# ---- label noise ------------------------------------------------------------

def test_noise_zero_is_identity():
    ds = synth_blobs(0, 100, 3, 3, 0.1)
    out = inject_label_noise(ds, 0.0, 1)
    assert np.array_equal(out.labels, ds.labels) and not out.noise_mask.any()


def test_full_noise_coincidence_rate():
    n, k = 20_000, 10
    ds = synth_blobs(0, n, 2, k, 0.1)
    out = inject_label_noise(ds, 1.0, 7)
    assert out.noise_mask.all()
    same = np.mean(out.labels == ds.labels)
    assert abs(same - 0.1) <= 3 * math.sqrt(0.1 * 0.9 / n)


@pytest.mark.parametrize("c", [0.25, 0.29, 0.5])
def test_noise_changes_only_masked_entries(c):
    ds = synth_blobs(0, 100, 3, 4, 0.1)
    out = inject_label_noise(ds, c, 3)
    assert out.noise_mask.sum() == math.floor(round(c * 100, 9))
    assert np.array_equal(out.inputs, ds.inputs)
    assert np.array_equal(out.labels[~out.noise_mask], ds.labels[~out.noise_mask])
    again = inject_label_noise(ds, c, 3)
    assert np.array_equal(again.labels, out.labels) and np.array_equal(again.noise_mask, out.noise_mask)


def test_noise_fraction_validated():
    with pytest.raises(InputError):
        inject_label_noise(synth_blobs(0, 10, 2, 2, 0.1), 1.5, 0)


# ---- corruption -------------------------------------------------------------

def test_corruption():
    ds = synth_blobs(0, 200, 10, 3, 0.1)
    assert corrupt_gaussian(ds, 0.0, 0) is ds
    heavy = corrupt_gaussian(ds, 10.0, 0)
    at_bounds = np.mean((heavy.inputs == 0.0) | (heavy.inputs == 1.0))
    assert at_bounds >= 0.9
    assert np.array_equal(corrupt_gaussian(ds, 0.3, 5).inputs, corrupt_gaussian(ds, 0.3, 5).inputs)
    assert np.array_equal(heavy.labels, ds.labels)
    with pytest.raises(InputError):
        corrupt_gaussian(ds, -1.0, 0)
