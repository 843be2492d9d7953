"""Vertically partitioned datasets: synthetic clusters, synthetic images, and MNIST IDX files."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .diffcore import Rng
from .errors import ConfigError, ConsistencyError, FormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class SplitDataset:
    """Per-party feature blocks. Party ``k`` (1-based) owns ``x_train[k - 1]``; the last party is active."""

    x_train: list[np.ndarray]
    x_test: list[np.ndarray]
    y_train: np.ndarray
    y_test: np.ndarray
    num_classes: int
    slices: list[tuple[int, int]]
    image_shape: tuple[int, int] | None = None

    @property
    def n_parties(self) -> int:
        return len(self.x_train)

    @property
    def n_train(self) -> int:
        return len(self.y_train)

    def widths(self) -> list[int]:
        return [b - a for a, b in self.slices]


def even_slices(dim: int, k: int) -> list[tuple[int, int]]:
    if dim < k:
        raise ConfigError(f"cannot split {dim} features among {k} parties")
    edges = np.linspace(0, dim, k + 1).round().astype(int)
    return [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:])]


def split_columns(x: np.ndarray, slices) -> list[np.ndarray]:
    return [np.ascontiguousarray(x[:, a:b]) for a, b in slices]


def stratified_split(y: np.ndarray, test_frac: float, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
    train, test = [], []
    for c in np.unique(y):
        idx = np.flatnonzero(y == c)
        idx = idx[rng.permutation(len(idx))]
        n_test = int(round(len(idx) * test_frac))
        test.append(idx[:n_test])
        train.append(idx[n_test:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


def _minmax(x: np.ndarray) -> np.ndarray:
    lo, hi = x.min(axis=0), x.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    return (x - lo) / span


def _balanced_labels(n: int, C: int, rng: Rng) -> np.ndarray:
    y = np.arange(n) % C
    return y[rng.permutation(n)]


def gen_synthetic(n: int, C: int, dim: int, spread: float, rng: Rng, parties: int = 2,
                  test_frac: float = 0.2, separation: float = 1.0) -> SplitDataset:
    """Gaussian clusters centred on a randomly rotated, scaled simplex.

    The rotation spreads class information over every coordinate so each
    party's slice is informative on its own.
    """
    if n < 10 * C:
        raise ConfigError(f"need at least {10 * C} samples for {C} classes, got {n}")
    if dim < parties or dim < C:
        raise ConfigError(f"dim {dim} too small for {parties} parties / {C} classes")
    y = _balanced_labels(n, C, rng.child("labels"))
    vertices = np.eye(C) - 1.0 / C
    vertices /= np.linalg.norm(vertices, axis=1, keepdims=True)
    q, _ = np.linalg.qr(rng.child("rotation").normal((dim, dim)))
    means = separation * vertices @ q[:C]
    x = means[y] + spread * rng.child("noise").normal((n, dim))
    x = _minmax(x)
    tr, te = stratified_split(y, test_frac, rng.child("split"))
    slices = even_slices(dim, parties)
    return SplitDataset(split_columns(x[tr], slices), split_columns(x[te], slices), y[tr], y[te], C, slices)


def gen_images(n: int, C: int, side: int, spread: float, rng: Rng, test_frac: float = 0.2) -> SplitDataset:
    """Two-party synthetic images: each sample is ``side x 2*side``, split into left/right halves.

    Class prototypes are smoothed random patterns in [0, 1]; samples add
    Gaussian pixel noise and are clipped back to [0, 1].
    """
    if n < 10 * C:
        raise ConfigError(f"need at least {10 * C} samples for {C} classes, got {n}")
    y = _balanced_labels(n, C, rng.child("labels"))
    raw = rng.child("prototypes").uniform(0.0, 1.0, (C, side, 2 * side))
    k = np.array([0.25, 0.5, 0.25])
    for axis in (1, 2):
        raw = np.apply_along_axis(lambda v: np.convolve(np.pad(v, 1, mode="edge"), k, mode="valid"), axis, raw)
    protos = _minmax(raw.reshape(C, -1).T).T.reshape(C, side, 2 * side)
    imgs = np.clip(protos[y] + spread * rng.child("noise").normal((n, side, 2 * side)), 0.0, 1.0)
    left = imgs[:, :, :side].reshape(n, -1)
    right = imgs[:, :, side:].reshape(n, -1)
    x = np.concatenate([left, right], axis=1)
    tr, te = stratified_split(y, test_frac, rng.child("split"))
    slices = [(0, side * side), (side * side, 2 * side * side)]
    return SplitDataset(split_columns(x[tr], slices), split_columns(x[te], slices), y[tr], y[te], C, slices,
                        image_shape=(side, side))


def read_idx(path) -> np.ndarray:
    """Parse an IDX file (images ``0x00000803`` or labels ``0x00000801``), optionally gzipped."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        import gzip
        raw = gzip.decompress(raw)
    return parse_idx(raw)


def parse_idx(raw: bytes) -> np.ndarray:
    if len(raw) < 8:
        raise FormatError(f"IDX header truncated: {raw[:8].hex()}")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic == IDX_IMAGES_MAGIC:
        count, rows, cols = struct.unpack(">III", raw[4:16])
        body = np.frombuffer(raw, dtype=np.uint8, offset=16)
        if body.size != count * rows * cols:
            raise FormatError(f"IDX image payload has {body.size} bytes, header says {count}x{rows}x{cols}")
        return body.reshape(count, rows, cols)
    if magic == IDX_LABELS_MAGIC:
        (count,) = struct.unpack(">I", raw[4:8])
        body = np.frombuffer(raw, dtype=np.uint8, offset=8)
        if body.size != count:
            raise FormatError(f"IDX label payload has {body.size} bytes, header says {count}")
        return body.copy()
    raise FormatError(f"bad IDX magic bytes {raw[:4].hex(' ')}")


def write_idx(path, arr: np.ndarray):
    arr = np.asarray(arr, dtype=np.uint8)
    if arr.ndim == 3:
        header = struct.pack(">IIII", IDX_IMAGES_MAGIC, *arr.shape)
    elif arr.ndim == 1:
        header = struct.pack(">II", IDX_LABELS_MAGIC, arr.shape[0])
    else:
        raise FormatError(f"cannot write IDX for array of shape {arr.shape}")
    Path(path).write_bytes(header + arr.tobytes())


def load_mnist_idx(images_path, labels_path, classes=None, parties: int = 2, rng: Rng | None = None,
                   test_frac: float = 0.2, test_images=None, test_labels=None) -> SplitDataset:
    """Load MNIST-format IDX files, keep ``classes``, scale to [0, 1], split columns evenly.

    Without separate test files a stratified split of the given files is used.
    Labels are remapped to ``0..len(classes)-1`` in the order given.
    """
    imgs = read_idx(images_path)
    labels = read_idx(labels_path)
    if imgs.ndim != 3 or labels.ndim != 1:
        raise FormatError("expected an image file and a label file")
    if imgs.shape[0] != labels.shape[0]:
        raise ConsistencyError(f"{imgs.shape[0]} images but {labels.shape[0]} labels")

    def prep(im, lb):
        keep = np.isin(lb, classes) if classes is not None else np.ones(lb.shape, bool)
        im, lb = im[keep], lb[keep]
        if classes is not None:
            remap = {int(c): i for i, c in enumerate(classes)}
            lb = np.array([remap[int(v)] for v in lb], dtype=np.int64)
        # vertical strips: party k gets columns of the image, left to right
        strips = np.array_split(im, parties, axis=2)
        flat = np.concatenate([s.reshape(s.shape[0], -1) for s in strips], axis=1)
        return flat.astype(np.float64) / 255.0, lb.astype(np.int64)

    x, y = prep(imgs, labels)
    C = len(classes) if classes is not None else int(y.max()) + 1
    widths = [s.shape[2] * imgs.shape[1] for s in np.array_split(imgs[:1], parties, axis=2)]
    edges = np.cumsum([0] + widths)
    slices = [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:])]
    shape = (imgs.shape[1], imgs.shape[2] // parties) if imgs.shape[2] % parties == 0 else None
    if test_images is not None:
        ti, tl = read_idx(test_images), read_idx(test_labels)
        if ti.shape[0] != tl.shape[0]:
            raise ConsistencyError(f"{ti.shape[0]} test images but {tl.shape[0]} test labels")
        xt, yt = prep(ti, tl)
        return SplitDataset(split_columns(x, slices), split_columns(xt, slices), y, yt, C, slices, shape)
    tr, te = stratified_split(y, test_frac, (rng or Rng(0)).child("split"))
    return SplitDataset(split_columns(x[tr], slices), split_columns(x[te], slices), y[tr], y[te], C, slices,
                        shape)
