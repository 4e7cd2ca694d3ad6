"""Desk-scale tasks: binary parity, an MNIST subset read from IDX files, and 2-D point clouds."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

IDX_TYPES = {
    0x08: np.dtype("u1"),
    0x09: np.dtype("i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
MNIST_IMAGE_MAGIC = 2051  # 0x00000803: unsigned bytes, rank 3
MNIST_LABEL_MAGIC = 2049  # 0x00000801: unsigned bytes, rank 1
PATCH = 7

POINTCLOUD_CLASSES = ("circle", "square", "two_moons")
POINTCLOUD_NOISE = 0.05
CACHE_VERSION = 1


class IdxFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} (byte offset {offset})")


@dataclass
class TaskData:
    task: str
    train_x: np.ndarray | list[np.ndarray]
    train_y: np.ndarray
    test_x: np.ndarray | list[np.ndarray]
    test_y: np.ndarray
    n_max: int
    feature_dim: int
    classes: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for ys in (self.train_y, self.test_y):
            if len(ys) and (ys.min() < 0 or ys.max() >= self.classes):
                raise ValueError(f"labels must lie in [0, {self.classes})")


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

def iter_batches(xs, ys: np.ndarray, batch_size: int,
                 rng: np.random.Generator | None = None) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield ``(inputs, labels)`` batches; shuffled when ``rng`` is given.

    Variable-length inputs (a list of 1-D arrays) are bucketed by length so
    every batch stacks into a rectangular array without padding.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if isinstance(xs, np.ndarray):
        order = rng.permutation(len(ys)) if rng is not None else np.arange(len(ys))
        for i in range(0, len(order), batch_size):
            idx = order[i:i + batch_size]
            yield xs[idx], ys[idx]
        return
    lengths = np.array([len(x) for x in xs])
    chunks = []
    for length in np.unique(lengths):
        idx = np.flatnonzero(lengths == length)
        if rng is not None:
            idx = rng.permutation(idx)
        chunks.extend(idx[i:i + batch_size] for i in range(0, len(idx), batch_size))
    if rng is not None:
        chunks = [chunks[i] for i in rng.permutation(len(chunks))]
    for idx in chunks:
        yield np.stack([xs[i] for i in idx]), ys[idx]


# ---------------------------------------------------------------------------
# parity
# ---------------------------------------------------------------------------

def parity_label(bits) -> int:
    return int(np.bitwise_xor.reduce(np.asarray(bits, dtype=np.int64))) if len(bits) else 0


def _parity_examples(rng: np.random.Generator, count: int, max_len: int, min_len: int):
    lengths = rng.integers(min_len, max_len + 1, size=count)
    xs = [rng.integers(0, 2, size=int(n)).astype(np.int64) for n in lengths]
    ys = np.array([parity_label(x) for x in xs], dtype=np.int64)
    return xs, ys


def gen_parity(count: int, max_len: int, seed: int, test_count: int | None = None,
               min_len: int = 1) -> TaskData:
    """Random bit strings of length ``min_len..max_len``; label is their XOR."""
    if max_len < 1 or min_len < 1 or min_len > max_len:
        raise ValueError("need 1 <= min_len <= max_len")
    rng = np.random.default_rng(seed)
    test_count = count // 4 if test_count is None else test_count
    train_x, train_y = _parity_examples(rng, count, max_len, min_len)
    test_x, test_y = _parity_examples(rng, test_count, max_len, min_len)
    return TaskData("parity", train_x, train_y, test_x, test_y, n_max=max_len, feature_dim=1,
                    classes=2, meta={"seed": seed, "max_len": max_len, "vocab": 2})


# ---------------------------------------------------------------------------
# IDX files
# ---------------------------------------------------------------------------

@dataclass
class IdxFile:
    magic: int
    dims: tuple[int, ...]
    data: np.ndarray

    @property
    def type_code(self) -> int:
        return (self.magic >> 8) & 0xFF


def parse_idx(blob: bytes) -> IdxFile:
    if len(blob) < 4:
        raise IdxFormatError("file shorter than the 4-byte magic number", len(blob))
    zero, type_code, ndim = struct.unpack(">HBB", blob[:4])
    if zero != 0:
        raise IdxFormatError(f"magic must start with two zero bytes, got {zero:#06x}", 0)
    if type_code not in IDX_TYPES:
        raise IdxFormatError(f"unknown element type {type_code:#04x}", 2)
    if ndim == 0:
        raise IdxFormatError("rank 0 is not allowed", 3)
    header = 4 + 4 * ndim
    if len(blob) < header:
        raise IdxFormatError(f"header declares {ndim} extents but file ends", len(blob))
    dims = struct.unpack(f">{ndim}I", blob[4:header])
    dtype = IDX_TYPES[type_code]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    payload = len(blob) - header
    if payload < expected:
        raise IdxFormatError(f"payload truncated: {payload} of {expected} bytes", len(blob))
    if payload > expected:
        raise IdxFormatError(f"{payload - expected} trailing bytes after payload", header + expected)
    data = np.frombuffer(blob, dtype=dtype, offset=header).reshape(dims)
    magic = (type_code << 8) | ndim
    return IdxFile(magic=magic, dims=tuple(dims), data=data)


def serialize_idx(idx: IdxFile) -> bytes:
    dtype = IDX_TYPES[idx.type_code]
    ndim = len(idx.dims)
    if idx.magic != (idx.type_code << 8) | ndim:
        raise ValueError(f"magic {idx.magic:#010x} does not match rank {ndim}")
    header = struct.pack(">HBB", 0, idx.type_code, ndim) + struct.pack(f">{ndim}I", *idx.dims)
    return header + np.ascontiguousarray(idx.data, dtype=dtype).tobytes()


def make_idx(array: np.ndarray) -> IdxFile:
    array = np.asarray(array)
    codes = {np.dtype(v).newbyteorder("="): k for k, v in IDX_TYPES.items()}
    key = array.dtype.newbyteorder("=")
    if key not in codes:
        raise ValueError(f"no IDX type code for dtype {array.dtype}")
    code = codes[key]
    return IdxFile(magic=(code << 8) | array.ndim, dims=tuple(array.shape), data=array)


def read_idx(path) -> IdxFile:
    path = Path(path)
    blob = path.read_bytes()
    if path.suffix == ".gz":
        blob = gzip.decompress(blob)
    return parse_idx(blob)


def write_idx(path, array: np.ndarray) -> None:
    Path(path).write_bytes(serialize_idx(make_idx(array)))


def _find(directory: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx")):
        if (directory / name).exists():
            return directory / name
    raise FileNotFoundError(f"no {stem}[.gz] in {directory}")


def load_mnist_arrays(path, split: str = "train") -> tuple[np.ndarray, np.ndarray]:
    """Images ``(N, 28, 28)`` uint8 and labels ``(N,)`` from a directory of IDX files."""
    directory = Path(path)
    prefix = "t10k" if split == "test" else "train"
    images = read_idx(_find(directory, f"{prefix}-images-idx3-ubyte"))
    labels = read_idx(_find(directory, f"{prefix}-labels-idx1-ubyte"))
    if images.magic != MNIST_IMAGE_MAGIC:
        raise IdxFormatError(f"image file magic {images.magic} != {MNIST_IMAGE_MAGIC}", 0)
    if labels.magic != MNIST_LABEL_MAGIC:
        raise IdxFormatError(f"label file magic {labels.magic} != {MNIST_LABEL_MAGIC}", 0)
    if images.dims[0] != labels.dims[0]:
        raise ValueError(f"{images.dims[0]} images but {labels.dims[0]} labels")
    return images.data, labels.data


def patchify(images: np.ndarray, patch: int = PATCH) -> np.ndarray:
    """``(N, H, W)`` to ``(N, (H/p)*(W/p), p*p)``, patches in row-major grid order."""
    N, H, W = images.shape
    if H % patch or W % patch:
        raise ValueError(f"image {H}x{W} not divisible into {patch}x{patch} patches")
    gh, gw = H // patch, W // patch
    x = images.reshape(N, gh, patch, gw, patch).transpose(0, 1, 3, 2, 4)
    return x.reshape(N, gh * gw, patch * patch)


def load_mnist_subset(path, per_class: int, seed: int, test_per_class: int | None = None,
                      patch: int = PATCH) -> TaskData:
    """Class-balanced train/test draw from the IDX files under ``path``.

    Train and test are sampled without overlap from the ``train`` files;
    pixels are scaled to ``[0, 1]`` and cut into ``patch x patch`` tokens.
    """
    images, labels = load_mnist_arrays(path, "train")
    test_per_class = per_class // 2 if test_per_class is None else test_per_class
    rng = np.random.default_rng(seed)
    tr, te = [], []
    for c in range(10):
        idx = np.flatnonzero(labels == c)
        need = per_class + test_per_class
        if len(idx) < need:
            raise ValueError(f"class {c} has {len(idx)} images, need {need}")
        pick = rng.permutation(idx)[:need]
        tr.append(pick[:per_class])
        te.append(pick[per_class:])
    tr = rng.permutation(np.concatenate(tr))
    te = rng.permutation(np.concatenate(te))
    scaled = images.astype(np.float32) / 255.0
    tokens = patchify(scaled, patch)
    return TaskData(
        "mnist", tokens[tr], labels[tr].astype(np.int64), tokens[te], labels[te].astype(np.int64),
        n_max=tokens.shape[1], feature_dim=patch * patch, classes=10,
        meta={"seed": seed, "per_class": per_class, "test_per_class": test_per_class,
              "train_index": tr, "test_index": te},
    )


# ---------------------------------------------------------------------------
# point clouds
# ---------------------------------------------------------------------------

def _rotation(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def _sample_shape(rng: np.random.Generator, label: int, m: int) -> tuple[np.ndarray, dict]:
    if label == 0:
        r = rng.uniform(0.6, 1.2)
        t = rng.uniform(0, 2 * np.pi, m)
        base = r * np.stack([np.cos(t), np.sin(t)], axis=1)
        params = {"radius": r}
    elif label == 1:
        s = rng.uniform(1.0, 2.0)
        side = rng.integers(0, 4, m)
        u = rng.uniform(-s / 2, s / 2, m)
        edge = np.full(m, s / 2)
        xs = np.where(side == 0, u, np.where(side == 1, edge, np.where(side == 2, u, -edge)))
        ys = np.where(side == 0, edge, np.where(side == 1, u, np.where(side == 2, -edge, u)))
        base = np.stack([xs, ys], axis=1)
        params = {"side": s}
    else:
        r = rng.uniform(0.5, 1.0)
        upper = rng.random(m) < 0.5
        t = rng.uniform(0, np.pi, m)
        xs = np.where(upper, np.cos(t), 1 - np.cos(t))
        ys = np.where(upper, np.sin(t), 0.5 - np.sin(t))
        base = r * (np.stack([xs, ys], axis=1) - np.array([0.5, 0.25]))
        params = {"scale": r}
    theta = rng.uniform(0, 2 * np.pi)
    center = rng.uniform(-1.0, 1.0, 2)
    pts = base @ _rotation(theta).T + center + rng.normal(0, POINTCLOUD_NOISE, (m, 2))
    params.update(center=center, theta=theta)
    return pts, params


def _pointcloud_split(rng, count, m):
    labels = rng.integers(0, len(POINTCLOUD_CLASSES), count)
    clouds, params = [], []
    for y in labels:
        pts, p = _sample_shape(rng, int(y), m)
        clouds.append(pts)
        params.append(p)
    xs = np.stack(clouds) if clouds else np.zeros((0, m, 2))
    return xs.astype(np.float32), labels.astype(np.int64), params


def gen_pointcloud(count: int, points_per_cloud: int = 64, seed: int = 0,
                   test_count: int | None = None) -> TaskData:
    """Noisy circles, squares and two-moons under random rotation and translation."""
    if points_per_cloud < 8:
        raise ValueError("points_per_cloud must be >= 8")
    rng = np.random.default_rng(seed)
    test_count = count // 4 if test_count is None else test_count
    trx, try_, trp = _pointcloud_split(rng, count, points_per_cloud)
    tex, tey, tep = _pointcloud_split(rng, test_count, points_per_cloud)
    return TaskData("pointcloud", trx, try_, tex, tey, n_max=points_per_cloud, feature_dim=2,
                    classes=len(POINTCLOUD_CLASSES),
                    meta={"seed": seed, "train_params": trp, "test_params": tep,
                          "noise": POINTCLOUD_NOISE})


# ---------------------------------------------------------------------------
# cache
# ---------------------------------------------------------------------------

def cache_key(task: str, seed: int, **sizes) -> str:
    parts = [task, f"seed{seed}"] + [f"{k}{v}" for k, v in sorted(sizes.items())]
    return "-".join(parts)


def _pack(xs):
    if isinstance(xs, np.ndarray):
        return {"x": xs}
    lengths = np.array([len(x) for x in xs], dtype=np.int64)
    flat = np.concatenate(xs) if xs else np.zeros(0, dtype=np.int64)
    return {"flat": flat, "lengths": lengths}


def _unpack(arrs, prefix):
    if f"{prefix}_x" in arrs:
        return arrs[f"{prefix}_x"]
    offsets = np.cumsum(arrs[f"{prefix}_lengths"])[:-1]
    return [a.copy() for a in np.split(arrs[f"{prefix}_flat"], offsets)]


def save_task_cache(data: TaskData, directory, key: str) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / f"{key}.npz"
    arrays = {"version": np.array(CACHE_VERSION),
              "header": np.array([data.n_max, data.feature_dim, data.classes]),
              "task": np.array(data.task)}
    for prefix, xs, ys in (("train", data.train_x, data.train_y), ("test", data.test_x, data.test_y)):
        for k, v in _pack(xs).items():
            arrays[f"{prefix}_{k}"] = v
        arrays[f"{prefix}_y"] = ys
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_task_cache(directory, key: str) -> TaskData | None:
    path = Path(directory) / f"{key}.npz"
    if not path.exists():
        return None
    with np.load(path, allow_pickle=False) as arrs:
        if int(arrs["version"]) != CACHE_VERSION:
            return None
        n_max, feature_dim, classes = (int(v) for v in arrs["header"])
        return TaskData(str(arrs["task"]), _unpack(arrs, "train"), arrs["train_y"],
                        _unpack(arrs, "test"), arrs["test_y"], n_max, feature_dim, classes,
                        meta={"cache_key": key})
