"""Image datasets, 8-bit conversion and lossless image files.

Images travel through the package as ``(batch, h, w, c)`` arrays with values
in ``[0, 1]``. Datasets are cached as raw 8-bit arrays and converted on
demand with :func:`normalize`.

Cache layout::

    <cache>/<dataset>/<split>/images.npy
    <cache>/<dataset>/<split>/manifest.json
"""

from __future__ import annotations

import hashlib
import json
import os
import pickle
import shutil
import tarfile
import tempfile
import urllib.request
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image

CACHE_ENV = "DJESCC_CACHE"

SOURCES = {
    "cifar10": {
        "url": "https://www.cs.toronto.edu/~kriz/cifar-10-python.tar.gz",
        "md5": "c58f30108f718f92721af3b95e74349a",
        "splits": {"train": 50000, "test": 10000},
        "shape": (32, 32, 3),
    },
    "stl10": {
        "url": "http://ai.stanford.edu/~acoates/stl10/stl10_binary.tar.gz",
        "md5": "91f7769df0f17e558f3565bffb0c7dfb",
        "splits": {"train": 5000, "test": 8000, "unlabeled": 100000},
        "shape": (96, 96, 3),
    },
}

# Photos bundled with scikit-image / scikit-learn. Train and test crops come
# from disjoint source photos.
PHOTO_TRAIN = ["astronaut", "coffee", "rocket", "hubble_deep_field", "immunohistochemistry",
               "stereo_motorcycle", "retina", "china.jpg"]
PHOTO_TEST = ["chelsea", "flower.jpg"]


class FetchError(RuntimeError):
    """Dataset is not cached and could not be downloaded."""


class IntegrityError(RuntimeError):
    """Cached or downloaded bytes do not match the recorded checksum."""


@dataclass
class DatasetSplit:
    name: str
    split: str
    raw: np.ndarray  # uint8, (count, h, w, c)
    labels: np.ndarray | None = None  # only consumed by extractor pretraining

    @property
    def count(self) -> int:
        return len(self.raw)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.raw.shape[1:])

    def images(self, start: int = 0, stop: int | None = None) -> np.ndarray:
        return normalize(self.raw[start:stop])

    def subset(self, count: int) -> "DatasetSplit":
        labels = None if self.labels is None else self.labels[:count]
        return DatasetSplit(self.name, self.split, np.ascontiguousarray(self.raw[:count]), labels)

    def batches(self, batch_size: int, order: np.ndarray | None = None) -> Iterator[np.ndarray]:
        """Yield normalized batches, optionally in a given index order."""
        idx = np.arange(self.count) if order is None else np.asarray(order)
        for lo in range(0, len(idx), batch_size):
            yield normalize(self.raw[idx[lo:lo + batch_size]])


def normalize(raw) -> np.ndarray:
    """Map 8-bit pixel values to ``[0, 1]`` as float32."""
    raw = np.asarray(raw)
    if raw.size and (raw.min() < 0 or raw.max() > 255):
        raise ValueError("8-bit input expected")
    return raw.astype(np.float32) / np.float32(255.0)


def denormalize(img) -> np.ndarray:
    """Quantize ``[0, 1]`` values to uint8 with round-half-up, then clamp."""
    img = np.asarray(img, dtype=np.float64)
    return np.clip(np.floor(img * 255.0 + 0.5), 0, 255).astype(np.uint8)


def check_image_batch(x) -> None:
    x = np.asarray(x)
    if x.ndim != 4:
        raise ValueError(f"expected (batch, h, w, c), got shape {x.shape}")
    if x.shape[1] % 4 or x.shape[2] % 4:
        raise ValueError(f"h and w must be divisible by 4, got {x.shape[1:3]}")
    if x.size and (x.min() < 0 or x.max() > 1):
        raise ValueError("image values must lie in [0, 1]")


# ---------------------------------------------------------------------------
# Image files
# ---------------------------------------------------------------------------

def export_image(img, path) -> Path:
    """Write one image as an 8-bit PNG.

    Float input in ``[0, 1]`` is quantized with :func:`denormalize`; uint8
    input is written as is. A leading batch axis of size one is dropped.
    """
    arr = np.asarray(img)
    if arr.ndim == 4:
        if arr.shape[0] != 1:
            raise ValueError("export_image writes a single image")
        arr = arr[0]
    if arr.dtype != np.uint8:
        arr = denormalize(arr)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    path = Path(path)
    Image.fromarray(arr).save(path, format="PNG")
    return path


def import_image(path) -> np.ndarray:
    """Read an image file into a ``(1, h, w, c)`` float array in ``[0, 1]``."""
    try:
        with Image.open(path) as im:
            im.load()
            arr = np.asarray(im)
    except (OSError, SyntaxError) as exc:
        raise ValueError(f"cannot read image {path}: {exc}") from exc
    if arr.ndim == 2:
        arr = arr[..., None]
    if arr.dtype != np.uint8:
        raise ValueError(f"{path}: expected an 8-bit image, got {arr.dtype}")
    return normalize(arr[None])


def image_grid(rows, pad: int = 2) -> np.ndarray:
    """Tile a list of rows of equally sized uint8 images into one image."""
    rows = [[np.asarray(im) for im in row] for row in rows]
    h, w, c = rows[0][0].shape
    ncol = max(len(r) for r in rows)
    out = np.full((len(rows) * (h + pad) + pad, ncol * (w + pad) + pad, c), 255, np.uint8)
    for i, row in enumerate(rows):
        for j, im in enumerate(row):
            y, x = pad + i * (h + pad), pad + j * (w + pad)
            out[y:y + h, x:x + w] = im
    return out


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------

def default_cache_dir() -> Path:
    return Path(os.environ.get(CACHE_ENV, Path.home() / ".cache" / "djescc"))


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _md5(path: Path) -> str:
    h = hashlib.md5()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_split(cache_dir, name: str, split: str, raw: np.ndarray, source: str,
                labels: np.ndarray | None = None) -> Path:
    """Store an 8-bit split in the cache together with its manifest."""
    raw = np.ascontiguousarray(raw, dtype=np.uint8)
    d = Path(cache_dir) / name / split
    d.mkdir(parents=True, exist_ok=True)
    np.save(d / "images.npy", raw)
    manifest = {
        "source_url": source,
        "sha256": _sha256(d / "images.npy"),
        "count": int(raw.shape[0]),
        "dims": list(raw.shape[1:]),
    }
    if labels is not None:
        np.save(d / "labels.npy", np.asarray(labels, np.int64))
        manifest["labels_sha256"] = _sha256(d / "labels.npy")
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return d


def read_split(cache_dir, name: str, split: str, verify: bool = True) -> DatasetSplit:
    d = Path(cache_dir) / name / split
    manifest = json.loads((d / "manifest.json").read_text())
    path = d / "images.npy"
    if verify and _sha256(path) != manifest["sha256"]:
        raise IntegrityError(f"checksum mismatch for {path}")
    raw = np.load(path, mmap_mode="r")
    if raw.shape[0] != manifest["count"] or list(raw.shape[1:]) != manifest["dims"]:
        raise IntegrityError(f"{path} does not match its manifest")
    labels = None
    if "labels_sha256" in manifest:
        if verify and _sha256(d / "labels.npy") != manifest["labels_sha256"]:
            raise IntegrityError(f"checksum mismatch for {d / 'labels.npy'}")
        labels = np.load(d / "labels.npy")
    return DatasetSplit(name, split, raw, labels)


def _download(url: str, dest: Path, md5: str | None, timeout: float = 30.0) -> None:
    try:
        with urllib.request.urlopen(url, timeout=timeout) as resp, open(dest, "wb") as f:
            shutil.copyfileobj(resp, f)
    except (OSError, ValueError) as exc:
        raise FetchError(f"could not download {url}: {exc}") from exc
    if md5 is not None and _md5(dest) != md5:
        raise IntegrityError(f"md5 mismatch for {url}")


def _extract_cifar10(archive: Path) -> dict[str, tuple]:
    files = {"train": [f"data_batch_{i}" for i in range(1, 6)], "test": ["test_batch"]}
    out = {}
    with tarfile.open(archive) as tar:
        members = {Path(m.name).name: m for m in tar.getmembers() if m.isfile()}
        for split, names in files.items():
            parts, labels = [], []
            for fn in names:
                batch = pickle.load(tar.extractfile(members[fn]), encoding="bytes")
                parts.append(np.asarray(batch[b"data"], np.uint8).reshape(-1, 3, 32, 32))
                labels.append(np.asarray(batch[b"labels"], np.int64))
            out[split] = (np.concatenate(parts).transpose(0, 2, 3, 1), np.concatenate(labels))
    return out


def _extract_stl10(archive: Path) -> dict[str, tuple]:
    files = {"train": "train", "test": "test", "unlabeled": "unlabeled"}
    out = {}
    with tarfile.open(archive) as tar:
        members = {Path(m.name).name: m for m in tar.getmembers() if m.isfile()}
        for split, stem in files.items():
            if f"{stem}_X.bin" not in members:
                continue
            buf = np.frombuffer(tar.extractfile(members[f"{stem}_X.bin"]).read(), np.uint8)
            # stored column-major per channel
            images = buf.reshape(-1, 3, 96, 96).transpose(0, 3, 2, 1)
            labels = None
            if f"{stem}_y.bin" in members:
                y = np.frombuffer(tar.extractfile(members[f"{stem}_y.bin"]).read(), np.uint8)
                labels = y.astype(np.int64) - 1
            out[split] = (images, labels)
    return out


def prepare_dataset(name: str, cache_dir=None, url: str | None = None,
                    md5: str | None = "default") -> Path:
    """Download and unpack a dataset archive into the cache."""
    if name not in SOURCES:
        raise ValueError(f"unknown downloadable dataset {name!r}")
    src = SOURCES[name]
    cache_dir = Path(cache_dir or default_cache_dir())
    url = url or src["url"]
    md5 = src["md5"] if md5 == "default" else md5
    with tempfile.TemporaryDirectory() as tmp:
        archive = Path(tmp) / "archive.tar.gz"
        _download(url, archive, md5)
        extract = _extract_cifar10 if name == "cifar10" else _extract_stl10
        for split, (raw, labels) in extract(archive).items():
            write_split(cache_dir, name, split, raw, url, labels)
    return cache_dir / name


def photo_crops(split: str, count: int, size: int = 32, seed: int = 0) -> np.ndarray:
    """Random square crops from the sample photos shipped with scikit-image
    and scikit-learn, as a stand-in natural-image source when no benchmark
    dataset can be fetched. Crops are downsampled 2x from a 2*size window so
    that they carry object-scale structure rather than flat texture."""
    from skimage import data as skdata
    from sklearn.datasets import load_sample_image

    names = {"train": PHOTO_TRAIN, "test": PHOTO_TEST}[split]
    photos = []
    for n in names:
        im = load_sample_image(n) if n.endswith(".jpg") else getattr(skdata, n)()
        if isinstance(im, tuple):  # stereo pair: keep the left view
            im = im[0]
        im = np.asarray(im)
        if im.ndim == 2:
            im = np.repeat(im[..., None], 3, axis=2)
        photos.append(im[..., :3])
    rng = np.random.default_rng([seed, 0 if split == "train" else 1])
    win = 2 * size
    out = np.empty((count, size, size, 3), np.uint8)
    for i in range(count):
        im = photos[rng.integers(len(photos))]
        y = rng.integers(im.shape[0] - win + 1)
        x = rng.integers(im.shape[1] - win + 1)
        crop = im[y:y + win, x:x + win].astype(np.float64)
        crop = crop.reshape(size, 2, size, 2, 3).mean(axis=(1, 3))
        if rng.random() < 0.5:
            crop = crop[:, ::-1]
        out[i] = np.floor(crop + 0.5).astype(np.uint8)
    return out


def load_dataset(name: str, split: str, cache_dir=None, seed: int | None = None,
                 download: bool = True, count: int | None = None) -> DatasetSplit:
    """Load a dataset split as 8-bit images.

    ``name`` is ``cifar10`` or ``stl10`` (cached, downloaded on first use) or
    ``photos32`` / ``photos96`` (generated from bundled sample photos, ``count``
    images). A ``seed`` applies a deterministic permutation to the order.
    """
    if name.startswith("photos"):
        size = int(name[len("photos"):] or 32)
        raw = photo_crops(split, count or (2000 if split == "train" else 200), size,
                          seed=0 if seed is None else seed)
        return DatasetSplit(name, split, raw)
    if name not in SOURCES:
        raise ValueError(f"unknown dataset {name!r}")
    if split not in SOURCES[name]["splits"]:
        raise ValueError(f"{name} has no split {split!r}")
    cache_dir = Path(cache_dir or default_cache_dir())
    if not (cache_dir / name / split / "manifest.json").exists():
        if not download:
            raise FetchError(f"{name}/{split} is not cached under {cache_dir}")
        prepare_dataset(name, cache_dir)
    ds = read_split(cache_dir, name, split)
    idx = np.arange(ds.count)
    if seed is not None:
        idx = np.random.default_rng(seed).permutation(ds.count)
    if count is not None:
        idx = idx[:count]
    labels = None if ds.labels is None else ds.labels[idx]
    return DatasetSplit(name, split, np.ascontiguousarray(ds.raw[idx]), labels)

