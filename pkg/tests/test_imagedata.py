from __future__ import annotations

import hashlib
import io
import json
import pickle
import tarfile

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from djescc import imagedata
from djescc.imagedata import (
    FetchError,
    IntegrityError,
    check_image_batch,
    denormalize,
    export_image,
    import_image,
    load_dataset,
    normalize,
    prepare_dataset,
    read_split,
    write_split,
)


# -- normalize / denormalize -------------------------------------------------

def test_normalize_examples():
    out = normalize(np.array([255, 0, 51], np.uint8))
    assert out[0] == 1.0
    assert out[1] == 0.0
    assert out[2] == pytest.approx(0.2, abs=1e-7)
    assert out.dtype == np.float32


def test_normalize_rejects_out_of_range():
    with pytest.raises(ValueError):
        normalize(np.array([256]))
    with pytest.raises(ValueError):
        normalize(np.array([-1]))


def test_denormalize_examples():
    assert denormalize(1.0) == 255
    assert denormalize(0.0) == 0
    assert denormalize(0.5) == 128  # round half up
    assert denormalize(np.array([-0.3, 1.7])).tolist() == [0, 255]


def test_roundtrip_all_8bit_values():
    r = np.arange(256, dtype=np.uint8)
    assert np.array_equal(denormalize(normalize(r)), r)


@settings(max_examples=50, deadline=None)
@given(arrays(np.uint8, st.tuples(st.integers(1, 3), st.integers(1, 8), st.integers(1, 8),
                                  st.sampled_from([1, 3]))))
def test_roundtrip_property(raw):
    x = normalize(raw)
    assert x.min() >= 0 and x.max() <= 1
    assert np.array_equal(denormalize(x), raw)


def test_check_image_batch():
    check_image_batch(np.zeros((2, 8, 12, 3)))
    with pytest.raises(ValueError):
        check_image_batch(np.zeros((2, 6, 8, 3)))
    with pytest.raises(ValueError):
        check_image_batch(np.full((1, 4, 4, 3), 1.5))
    with pytest.raises(ValueError):
        check_image_batch(np.zeros((4, 4, 3)))


# -- image files ---------------------------------------------------------------

def test_export_import_bit_identical(tmp_path, rng):
    q = rng.integers(0, 256, (32, 32, 3), dtype=np.uint8)
    path = export_image(normalize(q), tmp_path / "a.png")
    back = import_image(path)
    assert back.shape == (1, 32, 32, 3)
    assert np.array_equal(denormalize(back[0]), q)
    # uint8 input with a batch axis is written unchanged
    export_image(q[None], tmp_path / "b.png")
    assert np.array_equal(denormalize(import_image(tmp_path / "b.png")[0]), q)


def test_export_quantizes_floats(tmp_path, rng):
    x = rng.random((8, 8, 3))
    export_image(x, tmp_path / "f.png")
    assert np.array_equal(denormalize(import_image(tmp_path / "f.png")[0]), denormalize(x))


def test_export_grayscale(tmp_path):
    g = np.arange(16, dtype=np.uint8).reshape(4, 4, 1)
    export_image(g, tmp_path / "g.png")
    assert import_image(tmp_path / "g.png").shape == (1, 4, 4, 1)


def test_export_errors(tmp_path):
    with pytest.raises(ValueError):
        export_image(np.zeros((2, 4, 4, 3)), tmp_path / "two.png")
    with pytest.raises(OSError):
        export_image(np.zeros((4, 4, 3)), tmp_path / "missing_dir" / "x.png")


def test_import_corrupt_file(tmp_path):
    bad = tmp_path / "bad.png"
    bad.write_bytes(b"not an image")
    with pytest.raises(ValueError):
        import_image(bad)


def test_image_grid_layout():
    a = np.zeros((4, 4, 3), np.uint8)
    b = np.full((4, 4, 3), 9, np.uint8)
    g = imagedata.image_grid([[a, b], [b, a]], pad=1)
    assert g.shape == (2 * 5 + 1, 2 * 5 + 1, 3)
    assert (g[1:5, 6:10] == 9).all()
    assert (g[0] == 255).all()


# -- cache and archives -------------------------------------------------------

def _cifar_tarball(path, n_per_batch=2, n_test=3, seed=0):
    rng = np.random.default_rng(seed)
    batches = {}
    buf = io.BytesIO()
    with tarfile.open(fileobj=buf, mode="w:gz") as tar:
        names = [f"data_batch_{i}" for i in range(1, 6)] + ["test_batch"]
        for name in names:
            n = n_test if name == "test_batch" else n_per_batch
            data = rng.integers(0, 256, (n, 3072), dtype=np.uint8)
            labels = rng.integers(0, 10, n).tolist()
            batches[name] = (data, labels)
            blob = pickle.dumps({b"data": data, b"labels": labels})
            info = tarfile.TarInfo(f"cifar-10-batches-py/{name}")
            info.size = len(blob)
            tar.addfile(info, io.BytesIO(blob))
    path.write_bytes(buf.getvalue())
    return batches, hashlib.md5(buf.getvalue()).hexdigest()


def test_prepare_cifar_from_local_archive(tmp_path):
    archive = tmp_path / "cifar.tar.gz"
    batches, md5 = _cifar_tarball(archive)
    cache = tmp_path / "cache"
    prepare_dataset("cifar10", cache, url=archive.as_uri(), md5=md5)
    train = read_split(cache, "cifar10", "train")
    test = read_split(cache, "cifar10", "test")
    assert train.count == 10 and test.count == 3
    assert train.shape == (32, 32, 3)
    # channel-planar rows become NHWC images
    first = batches["data_batch_1"][0][0].reshape(3, 32, 32).transpose(1, 2, 0)
    assert np.array_equal(train.raw[0], first)
    assert train.labels.tolist()[:2] == batches["data_batch_1"][1]
    manifest = json.loads((cache / "cifar10" / "test" / "manifest.json").read_text())
    assert manifest["count"] == 3
    assert manifest["dims"] == [32, 32, 3]
    assert manifest["source_url"] == archive.as_uri()
    assert len(manifest["sha256"]) == 64


def test_prepare_md5_mismatch(tmp_path):
    archive = tmp_path / "cifar.tar.gz"
    _cifar_tarball(archive)
    with pytest.raises(IntegrityError):
        prepare_dataset("cifar10", tmp_path / "c", url=archive.as_uri(), md5="0" * 32)


def test_prepare_unreachable(tmp_path):
    with pytest.raises(FetchError):
        prepare_dataset("cifar10", tmp_path / "c", url=(tmp_path / "nope.tar.gz").as_uri())


def test_load_without_cache_or_network(tmp_path):
    with pytest.raises(FetchError):
        load_dataset("cifar10", "test", cache_dir=tmp_path, download=False)


def test_cached_split_tamper_detected(tmp_path, rng):
    raw = rng.integers(0, 256, (5, 8, 8, 3), dtype=np.uint8)
    d = write_split(tmp_path, "cifar10", "test", raw, "local")
    assert np.array_equal(read_split(tmp_path, "cifar10", "test").raw, raw)
    arr = np.load(d / "images.npy")
    arr[0, 0, 0, 0] ^= 1
    np.save(d / "images.npy", arr)
    with pytest.raises(IntegrityError):
        read_split(tmp_path, "cifar10", "test")


def test_load_dataset_deterministic_order(tmp_path, rng):
    raw = rng.integers(0, 256, (20, 8, 8, 3), dtype=np.uint8)
    write_split(tmp_path, "cifar10", "train", raw, "local", labels=np.arange(20))
    a = load_dataset("cifar10", "train", tmp_path, seed=3)
    b = load_dataset("cifar10", "train", tmp_path, seed=3)
    assert a.raw.tobytes() == b.raw.tobytes()
    assert not np.array_equal(a.raw, raw)
    assert np.array_equal(raw[a.labels], a.raw)
    sub = load_dataset("cifar10", "train", tmp_path, seed=3, count=5)
    assert np.array_equal(sub.raw, a.raw[:5])
    plain = load_dataset("cifar10", "train", tmp_path)
    assert np.array_equal(plain.raw, raw)


def test_load_dataset_bad_names(tmp_path):
    with pytest.raises(ValueError):
        load_dataset("mnist", "train", tmp_path)
    with pytest.raises(ValueError):
        load_dataset("cifar10", "unlabeled", tmp_path)


def test_stl10_layout(tmp_path):
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, (2, 96, 96, 3), dtype=np.uint8)
    # on disk: per image, per channel, column-major 96x96
    disk = images.transpose(0, 3, 2, 1).tobytes()
    labels = np.array([1, 10], np.uint8).tobytes()
    buf = io.BytesIO()
    with tarfile.open(fileobj=buf, mode="w:gz") as tar:
        for name, blob in (("test_X.bin", disk), ("test_y.bin", labels),
                           ("unlabeled_X.bin", disk)):
            info = tarfile.TarInfo(f"stl10_binary/{name}")
            info.size = len(blob)
            tar.addfile(info, io.BytesIO(blob))
    archive = tmp_path / "stl.tar.gz"
    archive.write_bytes(buf.getvalue())
    prepare_dataset("stl10", tmp_path / "c", url=archive.as_uri(), md5=None)
    test = load_dataset("stl10", "test", tmp_path / "c", download=False)
    assert test.shape == (96, 96, 3)
    assert np.array_equal(test.raw, images)
    assert test.labels.tolist() == [0, 9]
    unl = load_dataset("stl10", "unlabeled", tmp_path / "c", download=False)
    assert unl.labels is None and unl.count == 2


def test_batches_cover_split_in_order(rng):
    raw = rng.integers(0, 256, (7, 4, 4, 3), dtype=np.uint8)
    ds = imagedata.DatasetSplit("x", "train", raw)
    order = np.array([6, 5, 4, 3, 2, 1, 0])
    got = np.concatenate(list(ds.batches(3, order)))
    assert np.array_equal(denormalize(got), raw[::-1])
    assert [len(b) for b in ds.batches(3)] == [3, 3, 1]


# -- bundled photo crops ---------------------------------------------------------

def test_photo_crops_deterministic_and_shaped():
    a = load_dataset("photos32", "train", count=6)
    b = load_dataset("photos32", "train", count=6)
    assert a.raw.shape == (6, 32, 32, 3) and a.raw.dtype == np.uint8
    assert a.raw.tobytes() == b.raw.tobytes()
    t = load_dataset("photos96", "test", count=2)
    assert t.shape == (96, 96, 3)


def test_photo_sources_disjoint():
    assert not set(imagedata.PHOTO_TRAIN) & set(imagedata.PHOTO_TEST)


@pytest.mark.desk
def test_cifar10_split_sizes():
    try:
        train = load_dataset("cifar10", "train")
        test = load_dataset("cifar10", "test")
    except FetchError as exc:
        pytest.skip(f"CIFAR-10 unavailable: {exc}")
    assert (train.count, test.count) == (50000, 10000)
    assert train.shape == test.shape == (32, 32, 3)
