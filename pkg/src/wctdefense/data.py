"""IDX (MNIST / Fashion-MNIST) ingestion."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import IngestionError

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

# file stems per split for the standard distributions
SPLITS = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


@dataclass
class Dataset:
    images: np.ndarray  # (N, 1, H, W) float64 in [0, 1]
    labels: np.ndarray  # (N,) int64
    name: str = ""

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.labels[idx], self.name)

    def head(self, n: int) -> "Dataset":
        return self.subset(np.arange(min(n, len(self))))


def _read(path: Path) -> bytes:
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise IngestionError(f"{path}: {exc.strerror}") from exc
    return gzip.decompress(raw) if raw[:2] == b"\x1f\x8b" else raw


def _header(buf: bytes, path: Path, magic: int, ndim: int) -> tuple:
    need = 4 + 4 * ndim
    if len(buf) < need:
        raise IngestionError(f"{path}: truncated header at offset {len(buf)} (need {need} bytes)")
    found = struct.unpack(">I", buf[:4])[0]
    if found != magic:
        raise IngestionError(f"{path}: bad magic 0x{found:08x} at offset 0, expected 0x{magic:08x}")
    return struct.unpack(f">{ndim}I", buf[4:need]), need


def read_idx_images(path) -> np.ndarray:
    path = Path(path)
    buf = _read(path)
    (n, rows, cols), off = _header(buf, path, IMAGE_MAGIC, 3)
    end = off + n * rows * cols
    if len(buf) < end:
        raise IngestionError(f"{path}: truncated pixel data at offset {len(buf)} (need {end} bytes)")
    px = np.frombuffer(buf, dtype=np.uint8, count=n * rows * cols, offset=off)
    return px.reshape(n, 1, rows, cols).astype(np.float64) / 255.0


def read_idx_labels(path) -> np.ndarray:
    path = Path(path)
    buf = _read(path)
    (n,), off = _header(buf, path, LABEL_MAGIC, 1)
    if len(buf) < off + n:
        raise IngestionError(f"{path}: truncated label data at offset {len(buf)} (need {off + n} bytes)")
    return np.frombuffer(buf, dtype=np.uint8, count=n, offset=off).astype(np.int64)


def load_idx_dataset(images_path, labels_path, name: str = "") -> Dataset:
    """Parse an IDX image/label file pair; gzip-compressed files are accepted."""
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if len(images) != len(labels):
        raise IngestionError(
            f"{images_path}: {len(images)} images but {labels_path} has {len(labels)} labels")
    return Dataset(images, labels, name)


def find_split(root, split: str) -> tuple:
    """Locate the image/label files of a split inside ``root`` (plain or ``.gz``)."""
    root = Path(root)
    out = []
    for stem in SPLITS[split]:
        for cand in (root / stem, root / f"{stem}.gz", root / stem.replace("-idx", ".idx")):
            if cand.exists():
                out.append(cand)
                break
        else:
            raise IngestionError(f"{root}: no {stem} file found")
    return tuple(out)


def load_split(root, split: str, name: str = "") -> Dataset:
    return load_idx_dataset(*find_split(root, split), name=name or Path(root).name)


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write uint8 IDX files; images are ``(N, H, W)`` or ``(N, 1, H, W)`` in [0, 1] or uint8."""
    images = np.asarray(images)
    if images.ndim == 4:
        images = images[:, 0]
    if images.dtype != np.uint8:
        images = np.clip(np.rint(images * 255.0), 0, 255).astype(np.uint8)
    n, h, w = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IMAGE_MAGIC, n, h, w) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", LABEL_MAGIC, len(labels))
                                  + np.asarray(labels, dtype=np.uint8).tobytes())
