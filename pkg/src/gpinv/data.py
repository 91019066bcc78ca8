"""Datasets and image I/O.

Synthetic corpus: image ``i`` of a corpus with seed ``s`` is generated from
``RngStream(s, 0x5EED0000 + i)`` alone, so any image can be regenerated
without the others.  Each image is a smooth background (a random sum of
low-frequency cosines) with one to three anti-aliased disks or rectangles.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .numerics import RngStream

CORPUS_STREAM_BASE = 0x5EED0000
GAUSSIAN_STREAM = 0x6A055
SUPERSAMPLE = 4


class DatasetError(ValueError):
    pass


def synthetic_image(seed: int, index: int, size: int = 32, channels: int = 1) -> np.ndarray:
    """One ``(channels, size, size)`` uint8 image."""
    g = RngStream(seed, CORPUS_STREAM_BASE + index).numpy()
    n = size * SUPERSAMPLE
    coords = (np.arange(n) + 0.5) / n
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    img = np.empty((channels, n, n))
    base = g.uniform(0.25, 0.75, size=channels)
    for c in range(channels):
        field = np.zeros((n, n))
        for _ in range(4):
            fy, fx = g.integers(0, 4, size=2)
            phase = g.uniform(0, 2 * np.pi)
            field += g.normal(0, 0.06) * np.cos(2 * np.pi * (fy * yy + fx * xx) + phase)
        img[c] = base[c] + field
    for _ in range(g.integers(1, 4)):
        colour = g.uniform(0.05, 0.95, size=channels)
        cy, cx = g.uniform(0.2, 0.8, size=2)
        if g.random() < 0.5:
            r = g.uniform(0.1, 0.25)
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 < r ** 2
        else:
            hy, hx = g.uniform(0.08, 0.25, size=2)
            mask = (np.abs(yy - cy) < hy) & (np.abs(xx - cx) < hx)
        img[:, mask] = colour[:, None]
    img = img.reshape(channels, size, SUPERSAMPLE, size, SUPERSAMPLE).mean(axis=(2, 4))
    return np.clip(np.floor(img * 256), 0, 255).astype(np.uint8)


def synthetic_corpus(n: int, seed: int = 0, size: int = 32, channels: int = 1) -> np.ndarray:
    return np.stack([synthetic_image(seed, i, size, channels) for i in range(n)])


def gaussian_dataset(n: int, dim: int, seed: int = 0) -> np.ndarray:
    return RngStream(seed, GAUSSIAN_STREAM).numpy().standard_normal((n, dim)).astype(np.float32)


def read_png(path) -> np.ndarray:
    """Read an 8-bit PNG as ``(C, H, W)`` uint8."""
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.dtype != np.uint8:
        raise DatasetError(f"{path}: expected an 8-bit image, got {arr.dtype}")
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr[..., :3].transpose(2, 0, 1)
    return np.ascontiguousarray(arr)


def write_png(path, img8: np.ndarray) -> None:
    arr = np.asarray(img8, dtype=np.uint8)
    arr = arr[0] if arr.shape[0] == 1 else arr.transpose(1, 2, 0)
    Image.fromarray(arr).save(path, format="PNG", optimize=False, compress_level=6)


def read_vector(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", dtype=np.float32, ndmin=1)


def write_vector(path, x) -> None:
    np.savetxt(path, np.atleast_2d(np.asarray(x, dtype=np.float64)), delimiter=",", fmt="%.9g")


def load_dataset(spec: str, in_shape: tuple, seed: int = 0) -> np.ndarray:
    """Resolve ``io.dataset``: ``gaussian:N``, ``synthetic:N``, a ``.npy`` file or a PNG directory.

    Vector problems yield float32 ``(N, n)``; image problems uint8 ``(N, C, H, W)``.
    """
    kind, _, count = spec.partition(":")
    if kind in ("gaussian", "synthetic") and count.isdigit():
        n = int(count)
        if n < 1:
            raise DatasetError("dataset is empty")
        if kind == "gaussian":
            if len(in_shape) != 1:
                raise DatasetError("gaussian datasets are for vector problems")
            return gaussian_dataset(n, in_shape[0], seed)
        C, H, W = in_shape
        if H != W:
            raise DatasetError("synthetic corpus images are square")
        return synthetic_corpus(n, seed, H, C)
    path = Path(spec)
    if not path.exists():
        raise DatasetError(f"dataset path does not exist: {path}")
    if path.is_file() and path.suffix == ".npy":
        data = np.load(path)
    elif path.is_dir():
        files = sorted(path.glob("*.png"))
        if not files:
            raise DatasetError(f"no PNG files in dataset directory {path}")
        data = np.stack([read_png(f) for f in files])
    else:
        raise DatasetError(f"unsupported dataset {path}")
    if len(data) == 0:
        raise DatasetError(f"dataset {path} is empty")
    if tuple(data.shape[1:]) != tuple(in_shape):
        raise DatasetError(f"dataset items have shape {tuple(data.shape[1:])}, config expects {tuple(in_shape)}")
    return data
