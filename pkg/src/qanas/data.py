"""Dataset readers and the bundled toy tasks."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

# IDX type byte -> big-endian numpy dtype
IDX_TYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
_IDX_CODES = {v.newbyteorder("="): k for k, v in IDX_TYPES.items()}


def _open(path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def parse_idx(buf: bytes) -> np.ndarray:
    if len(buf) < 4:
        raise ValueError("IDX buffer too short")
    zero, code, ndim = struct.unpack(">HBB", buf[:4])
    if zero != 0 or code not in IDX_TYPES:
        raise ValueError(f"bad IDX magic {buf[:4].hex()}")
    dims = struct.unpack(f">{ndim}I", buf[4 : 4 + 4 * ndim])
    dtype = IDX_TYPES[code]
    offset = 4 + 4 * ndim
    count = int(np.prod(dims, dtype=np.int64))
    if len(buf) - offset != count * dtype.itemsize:
        raise ValueError(
            f"IDX payload is {len(buf) - offset} bytes, header implies {count * dtype.itemsize}"
        )
    data = np.frombuffer(buf, dtype=dtype, count=count, offset=offset)
    return data.reshape(dims).astype(dtype.newbyteorder("="))


def read_idx(path) -> np.ndarray:
    with _open(path) as f:
        return parse_idx(f.read())


def encode_idx(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    code = _IDX_CODES.get(arr.dtype.newbyteorder("="))
    if code is None:
        raise ValueError(f"dtype {arr.dtype} has no IDX type code")
    header = struct.pack(">HBB", 0, code, arr.ndim) + struct.pack(f">{arr.ndim}I", *arr.shape)
    return header + arr.astype(IDX_TYPES[code]).tobytes()


def write_idx(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(encode_idx(arr))


def read_csv(path, image_shape: tuple[int, ...] | None = None, skip_header: bool = False):
    """Rows of ``label, pixel, pixel, ...``; pixels scaled by 1/255."""
    raw = np.loadtxt(path, delimiter=",", skiprows=int(skip_header), ndmin=2)
    y = raw[:, 0].astype(np.int64)
    x = raw[:, 1:] / 255.0
    if image_shape is not None:
        x = x.reshape(len(x), *image_shape)
    return x, y


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray

    @property
    def train(self):
        return self.x_train, self.y_train

    @property
    def test(self):
        return self.x_test, self.y_test

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.x_train.shape[1:])

    @property
    def num_classes(self) -> int:
        return int(max(self.y_train.max(), self.y_test.max())) + 1


def split(x, y, n_train: int, n_test: int, seed: int = 0) -> Dataset:
    if n_train + n_test > len(x):
        raise ValueError(f"asked for {n_train}+{n_test} samples, have {len(x)}")
    perm = np.random.default_rng(seed).permutation(len(x))
    tr, te = perm[:n_train], perm[n_train : n_train + n_test]
    return Dataset(x[tr], y[tr], x[te], y[te])


def digits_arrays() -> tuple[np.ndarray, np.ndarray]:
    """Bundled 8x8 grayscale digits (1797 images, 10 classes), NHWC in [0, 1]."""
    root = resources.files("qanas") / "data"
    x = parse_idx((root / "digits-images-idx3-ubyte").read_bytes())
    y = parse_idx((root / "digits-labels-idx1-ubyte").read_bytes())
    return x[..., None].astype(np.float64) / 255.0, y.astype(np.int64)


def digits(n_train: int = 1000, n_test: int = 500, seed: int = 0) -> Dataset:
    x, y = digits_arrays()
    return split(x, y, n_train, n_test, seed)


def spirals(n: int = 400, noise: float = 0.1, turns: float = 1.5, seed: int = 0):
    """Two interleaved spirals in the plane."""
    rng = np.random.default_rng(seed)
    per = n // 2
    t = np.sqrt(rng.uniform(0, 1, per)) * turns * 2 * np.pi
    arm = np.stack([t * np.cos(t), t * np.sin(t)], axis=1) / (turns * 2 * np.pi)
    x = np.concatenate([arm, -arm]) + rng.normal(0, noise, (2 * per, 2))
    y = np.concatenate([np.zeros(per, np.int64), np.ones(per, np.int64)])
    perm = rng.permutation(2 * per)
    return x[perm], y[perm]


def linearly_separable(n: int = 200, seed: int = 0, margin: float = 0.2):
    """Two Gaussian-ish clouds split by a random hyperplane with a margin."""
    rng = np.random.default_rng(seed)
    w = rng.standard_normal(2)
    w /= np.linalg.norm(w)
    x = []
    while len(x) < n:
        p = rng.uniform(-1, 1, 2)
        if abs(p @ w) >= margin:
            x.append(p)
    x = np.asarray(x)
    return x, (x @ w > 0).astype(np.int64)


def load_dataset(cfg: dict, seed: int = 0) -> Dataset:
    """Build a dataset from a ``[dataset]`` config section."""
    name = cfg.get("name", "digits")
    n_train = int(cfg.get("n_train", 1000))
    n_test = int(cfg.get("n_test", 500))
    split_seed = int(cfg.get("split_seed", seed))
    if name == "digits":
        return digits(n_train, n_test, split_seed)
    if name == "spirals":
        x, y = spirals(n_train + n_test, seed=split_seed)
        return split(x, y, n_train, n_test, split_seed)
    if name == "idx":
        x = read_idx(cfg["images"]).astype(np.float64) / 255.0
        if x.ndim == 3:
            x = x[..., None]
        y = read_idx(cfg["labels"]).astype(np.int64)
        return split(x, y, n_train, n_test, split_seed)
    if name == "csv":
        shape = tuple(int(v) for v in cfg["image_shape"].replace(",", " ").split())
        x, y = read_csv(cfg["path"], shape, cfg.get("skip_header", "false") == "true")
        return split(x, y, n_train, n_test, split_seed)
    raise ValueError(f"unknown dataset {name!r}")
