"""Dataset ingestion and synthesis.

Datasets are held in memory as float32 tensors of shape (N, C, H, W) with
values in [0, 1]. Named datasets are resolved under ``$DTI_DATA_DIR``
(default ``./data``).
"""
from __future__ import annotations

import gzip
import logging
import math
import os
import struct
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch

from .transforms import make_grid, sample

log = logging.getLogger(__name__)

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801
IMAGE_SUFFIXES = {".jpg", ".jpeg", ".png", ".bmp", ".gif", ".tif", ".tiff", ".webp"}


@dataclass
class Dataset:
    images: torch.Tensor
    labels: np.ndarray | None = None
    name: str = ""

    def __len__(self):
        return self.images.shape[0]

    @property
    def shape(self):
        return tuple(self.images.shape[1:])

    @property
    def n_classes(self):
        return None if self.labels is None else int(len(np.unique(self.labels)))

    def subset(self, indices, name=None) -> "Dataset":
        idx = np.asarray(indices)
        labels = None if self.labels is None else self.labels[idx]
        return Dataset(self.images[torch.as_tensor(idx)], labels, name or self.name)


@dataclass(frozen=True)
class DatasetSpec:
    name: str
    n_samples: int | None
    n_classes: int | None
    shape: tuple
    default_steps: str
    note: str = ""


# Samples, classes, dimensions and transformation sequences of the benchmark datasets.
DATASETS = {
    "mnist": DatasetSpec("mnist", 70_000, 10, (1, 28, 28), "aff-morpho-tps"),
    "mnist-test": DatasetSpec("mnist-test", 10_000, 10, (1, 28, 28), "aff-morpho-tps"),
    "usps": DatasetSpec("usps", 9_298, 10, (1, 16, 16), "col-aff-tps"),
    "fashion-mnist": DatasetSpec("fashion-mnist", 70_000, 10, (1, 28, 28), "col-aff-tps"),
    "frgc": DatasetSpec("frgc", 2_462, 20, (3, 32, 32), "col-aff-tps"),
    "svhn": DatasetSpec("svhn", 99_289, 10, (3, 28, 28), "col-proj", "+ unlabeled extra split"),
    "mnist-1k": DatasetSpec("mnist-1k", 1_000, 10, (1, 28, 28), "aff-morpho-tps"),
    "mnist-color": DatasetSpec("mnist-color", 70_000, 10, (3, 28, 28), "col-aff-tps"),
    "affnist-test": DatasetSpec("affnist-test", 320_000, 10, (1, 40, 40), "aff-morpho-tps"),
    "photos": DatasetSpec("photos", None, None, (3, 128, 128), "col-proj", "1k to 15k images"),
}
# Desk-scale MNIST pool (10k real digits, see scripts/fetch_mnist_npm.py); not a benchmark row.
EXTRA_DATASETS = {
    "mnist-10k": DatasetSpec("mnist-10k", 10_000, 10, (1, 28, 28), "aff-morpho-tps"),
}


def dataset_spec(name: str) -> DatasetSpec:
    base = name.split(":", 1)[0]
    if base in DATASETS:
        return DATASETS[base]
    if base in EXTRA_DATASETS:
        return EXTRA_DATASETS[base]
    if base == "folder":
        return DATASETS["photos"]
    raise KeyError(f"unknown dataset {name!r}")


def data_root(root=None) -> Path:
    return Path(root or os.environ.get("DTI_DATA_DIR") or "data")


# -- IDX ------------------------------------------------------------------------

def _open(path, mode="rb"):
    path = Path(path)
    return gzip.open(path, mode) if path.suffix == ".gz" else open(path, mode)


def read_idx(path) -> tuple[int, np.ndarray]:
    """Return ``(magic, array)`` for an unsigned-byte IDX file (optionally gzipped)."""
    with _open(path) as f:
        raw = f.read()
    if len(raw) < 4:
        raise ValueError(f"{path}: truncated IDX header")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic >> 8 != 0x08:
        raise ValueError(f"{path}: bad IDX magic {magic:#010x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise ValueError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = math.prod(dims)
    if len(raw) - header < count:
        raise ValueError(f"{path}: truncated IDX payload ({len(raw) - header} of {count} bytes)")
    return magic, np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def write_idx(path, array: np.ndarray):
    array = np.ascontiguousarray(array)
    if array.dtype != np.uint8:
        raise ValueError("only unsigned-byte IDX files are supported")
    header = struct.pack(">I", 0x0800 | array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    with _open(path, "wb") as f:
        f.write(header + array.tobytes())


def load_idx(images_path, labels_path=None, name="") -> Dataset:
    """Load IDX images (magic 0x803) and optional labels (0x801); pixels scaled to [0, 1]."""
    magic, imgs = read_idx(images_path)
    if magic != IDX_IMAGES:
        raise ValueError(f"{images_path}: expected image magic {IDX_IMAGES:#010x}, got {magic:#010x}")
    labels = None
    if labels_path is not None:
        magic, labels = read_idx(labels_path)
        if magic != IDX_LABELS:
            raise ValueError(f"{labels_path}: expected label magic {IDX_LABELS:#010x}, got {magic:#010x}")
        if len(labels) != len(imgs):
            raise ValueError("image and label counts differ")
        labels = labels.astype(np.int64)
    images = torch.from_numpy(imgs.astype(np.float32) / 255.0).unsqueeze(1)
    return Dataset(images, labels, name)


def _find(directory: Path, stem: str) -> Path:
    for cand in (directory / stem, directory / (stem + ".gz")):
        if cand.exists():
            return cand
    raise FileNotFoundError(f"{directory / stem}[.gz] not found (set DTI_DATA_DIR)")


def concat(datasets, name="") -> Dataset:
    labels = None
    if all(d.labels is not None for d in datasets):
        labels = np.concatenate([d.labels for d in datasets])
    return Dataset(torch.cat([d.images for d in datasets]), labels, name)


# -- array container ------------------------------------------------------------------

def save_npz(dataset: Dataset, path):
    arrays = {"images": dataset.images.numpy()}
    if dataset.labels is not None:
        arrays["labels"] = dataset.labels
    np.savez_compressed(path, **arrays)


def load_npz(path, name="") -> Dataset:
    with np.load(path) as z:
        images = z["images"]
        labels = z["labels"].astype(np.int64) if "labels" in z else None
    if images.dtype == np.uint8:
        images = images.astype(np.float32) / 255.0
    images = torch.from_numpy(np.ascontiguousarray(images, dtype=np.float32))
    if images.dim() == 3:
        images = images.unsqueeze(1)
    elif images.shape[-1] in (1, 3) and images.shape[1] not in (1, 3):
        images = images.permute(0, 3, 1, 2).contiguous()
    return Dataset(images, labels, name or Path(path).stem)


# -- synthesis --------------------------------------------------------------------

def _index_rng(seed, i):
    return np.random.default_rng([seed, i])


def make_mnist_color(dataset: Dataset, seed: int = 0) -> Dataset:
    """Random foreground/background colors per image: ``fg * x + bg * (1 - x)``."""
    x = dataset.images
    if x.shape[1] != 1:
        raise ValueError("MNIST-color expects greyscale input")
    colors = np.stack([_index_rng(seed, i).random(6) for i in range(len(dataset))])
    colors = torch.from_numpy(colors.astype(np.float32))
    fg = colors[:, :3, None, None]
    bg = colors[:, 3:, None, None]
    return Dataset(fg * x + bg * (1 - x), dataset.labels, "mnist-color")


def make_mnist_1k(dataset: Dataset, seed: int = 0, n: int = 1000) -> Dataset:
    idx = np.sort(np.random.default_rng(seed).choice(len(dataset), size=n, replace=False))
    return dataset.subset(idx, "mnist-1k")


def subsample(dataset: Dataset, n: int, seed: int = 0) -> Dataset:
    if n >= len(dataset):
        return dataset
    idx = np.sort(np.random.default_rng(seed).choice(len(dataset), size=n, replace=False))
    return dataset.subset(idx, f"{dataset.name}[{n}]")


@dataclass(frozen=True)
class AffineRanges:
    rotation_deg: float = 20.0
    scale: tuple = (0.8, 1.2)
    shear: float = 0.2
    translation: float = 0.12


IDENTITY_RANGES = AffineRanges(0.0, (1.0, 1.0), 0.0, 0.0)


def random_affine_offsets(rng, ranges: AffineRanges = AffineRanges()) -> np.ndarray:
    """Offsets from identity (6 values) of a random rotation/scale/shear/translation."""
    theta = math.radians(rng.uniform(-ranges.rotation_deg, ranges.rotation_deg))
    s = rng.uniform(*ranges.scale)
    h = rng.uniform(-ranges.shear, ranges.shear)
    t = rng.uniform(-ranges.translation, ranges.translation, size=2)
    rot = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    mat = s * rot @ np.array([[1.0, h], [0.0, 1.0]])
    return np.concatenate([mat - np.eye(2), t[:, None]], axis=1).ravel()


def pad_center(images: torch.Tensor, size: int) -> torch.Tensor:
    H, W = images.shape[-2:]
    top, left = (size - H) // 2, (size - W) // 2
    return torch.nn.functional.pad(images, (left, size - W - left, top, size - H - top))


def make_affine_augmented(dataset: Dataset, seed: int = 0, pad_to: int = 40,
                          ranges: AffineRanges = AffineRanges()) -> Dataset:
    """affNIST-style substitute: zero-pad then warp each image by a random affine map."""
    padded = pad_center(dataset.images, pad_to)
    offsets = np.stack([random_affine_offsets(_index_rng(seed, i), ranges) for i in range(len(dataset))])
    out = torch.empty_like(padded)
    for start in range(0, len(dataset), 1024):
        p = torch.from_numpy(offsets[start:start + 1024]).float()
        grid = make_grid("affine", p, pad_to, pad_to)
        out[start:start + 1024] = sample(padded[start:start + 1024], grid, pad="zeros")
    return Dataset(out.clamp(0, 1), dataset.labels, "affnist-synth")


def load_image_folder(path, size: int = 128) -> Dataset:
    """Recursively load images, resize the shorter side to ``size`` and center crop."""
    from PIL import Image

    files = sorted(p for p in Path(path).rglob("*") if p.suffix.lower() in IMAGE_SUFFIXES)
    images = []
    for f in files:
        try:
            with Image.open(f) as im:
                images.append(resize_center_crop(im.convert("RGB"), size))
        except Exception as exc:  # unreadable or truncated file
            warnings.warn(f"skipping {f}: {exc}")
    if not images:
        raise ValueError(f"no readable images under {path}")
    arr = np.stack(images).astype(np.float32) / 255.0
    return Dataset(torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous(), None, Path(path).name)


def resize_center_crop(im, size: int) -> np.ndarray:
    from PIL import Image

    w, h = im.size
    scale = size / min(w, h)
    nw, nh = max(size, round(w * scale)), max(size, round(h * scale))
    im = im.resize((nw, nh), Image.BILINEAR)
    left, top = (nw - size) // 2, (nh - size) // 2
    return np.asarray(im.crop((left, top, left + size, top + size)))


# -- named datasets ---------------------------------------------------------------

def _load_mnist_dir(directory: Path, split: str, name: str) -> Dataset:
    prefix = "train" if split == "train" else "t10k"
    return load_idx(_find(directory, f"{prefix}-images-idx3-ubyte"),
                    _find(directory, f"{prefix}-labels-idx1-ubyte"), name)


def load_dataset(name: str, root=None, source: str | None = None, data_seed: int = 0,
                 subset: int | None = None) -> Dataset:
    """Resolve a dataset by name.

    ``source`` overrides the base dataset of derived sets (``mnist-1k`` draws
    from ``mnist-test`` by default, ``mnist-color`` from ``mnist``,
    ``affnist-test`` falls back to a synthetic warp of ``mnist-test``).
    ``subset`` keeps a seeded random subset of that many samples.
    """
    root = data_root(root)
    if name.endswith(".npz"):
        ds = load_npz(name)
    elif name.startswith("folder:"):
        ds = load_image_folder(name.split(":", 1)[1])
    elif name in ("mnist", "fashion-mnist"):
        d = root / name
        ds = concat([_load_mnist_dir(d, "train", name), _load_mnist_dir(d, "test", name)], name)
    elif name == "mnist-test":
        ds = _load_mnist_dir(root / "mnist", "test", name)
    elif name == "mnist-10k":
        d = root / "mnist-10k"
        ds = load_idx(_find(d, "images-idx3-ubyte"), _find(d, "labels-idx1-ubyte"), name)
    elif name == "mnist-1k":
        ds = make_mnist_1k(load_dataset(source or "mnist-test", root), data_seed)
    elif name == "mnist-color":
        ds = make_mnist_color(load_dataset(source or "mnist", root), data_seed)
    elif name == "affnist-test":
        cached = root / "affnist-test.npz"
        if cached.exists() and source is None:
            ds = load_npz(cached, name)
        else:
            log.info("affnist-test not found; using the synthetic affine substitute")
            ds = make_affine_augmented(load_dataset(source or "mnist-test", root), data_seed)
    elif name in ("usps", "frgc", "svhn"):
        ds = load_npz(root / f"{name}.npz", name)
    else:
        raise KeyError(f"unknown dataset {name!r}")
    if subset:
        ds = subsample(ds, subset, data_seed)
    return ds


def channels_of(name: str) -> int:
    return dataset_spec(name).shape[0]


def with_name(ds: Dataset, name: str) -> Dataset:
    return replace(ds, name=name)
