"""Named learnable parameters and the binary checkpoint container.

Checkpoint layout (little-endian throughout):

    magic "SVPS" | version u32 | entry count u32
    per entry: name length u32 | UTF-8 name | dtype tag u8 (0=f32, 1=f64)
               | rank u8 | dims u64 * rank | row-major payload

Round trips are bit-exact at the same dtype.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import Tensor, get_default_dtype

_MAGIC = b"SVPS"
_VERSION = 1
_DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_TAG_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


@dataclass
class Parameter:
    name: str
    tensor: Tensor
    init: str
    seed: int

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self):
        return self.tensor.grad


def _derived_seed(base_seed: int, name: str) -> int:
    """Stable per-parameter seed, independent of creation order."""
    digest = hashlib.sha256(f"{base_seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def _init_array(scheme: str, shape, fan_in: int | None, rng: np.random.Generator, dtype) -> np.ndarray:
    if scheme == "zeros":
        return np.zeros(shape, dtype=dtype)
    if scheme == "ones":
        return np.ones(shape, dtype=dtype)
    if scheme == "kaiming":
        if fan_in is None or fan_in <= 0:
            raise ConfigError(f"kaiming init needs a positive fan_in, got {fan_in}")
        bound = float(np.sqrt(6.0 / fan_in))
        return rng.uniform(-bound, bound, size=shape).astype(dtype)
    if scheme == "normal0.02":
        return (0.02 * rng.standard_normal(size=shape)).astype(dtype)
    raise ConfigError(f"unknown init scheme {scheme!r}")


class ParameterStore:
    """Ordered registry of uniquely named parameters for one model."""

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self._params: dict[str, Parameter] = {}

    def parameter(self, name: str, shape, init: str = "kaiming", fan_in: int | None = None) -> Tensor:
        if name in self._params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        seed = _derived_seed(self.seed, name)
        rng = np.random.default_rng(seed)
        data = _init_array(init, tuple(shape), fan_in, rng, get_default_dtype())
        t = Tensor(data, requires_grad=True)
        self._params[name] = Parameter(name, t, init, seed)
        return t

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def parameters(self) -> list[Parameter]:
        return list(self._params.values())

    def names(self) -> list[str]:
        return list(self._params.keys())

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.tensor.grad = None

    def num_values(self) -> int:
        return sum(p.tensor.size for p in self._params.values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.tensor.data for name, p in self._params.items()}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        """Load values in place; reports every mismatched parameter at once."""
        problems = []
        for name, p in self._params.items():
            if name not in arrays:
                problems.append(f"missing parameter {name!r}")
                continue
            arr = arrays[name]
            if tuple(arr.shape) != p.tensor.shape:
                problems.append(f"{name!r}: checkpoint shape {tuple(arr.shape)} vs model {p.tensor.shape}")
        extra = set(arrays) - set(self._params)
        for name in sorted(extra):
            problems.append(f"unexpected parameter {name!r} in checkpoint")
        if problems:
            raise ShapeError("checkpoint/model mismatch: " + "; ".join(problems))
        for name, p in self._params.items():
            p.tensor.data = np.ascontiguousarray(arrays[name], dtype=p.tensor.data.dtype)


def write_checkpoint(path, arrays: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(arrays)))
        for name, arr in arrays.items():
            arr = np.ascontiguousarray(arr)
            if arr.dtype not in _DTYPE_TAGS:
                raise ConfigError(f"cannot checkpoint dtype {arr.dtype} for {name!r}")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<BB", _DTYPE_TAGS[arr.dtype], arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def read_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _MAGIC:
        raise ConfigError(f"{path}: not a checkpoint file (bad magic)")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != _VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {version}")
    offset = 12
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        name = blob[offset:offset + name_len].decode("utf-8")
        offset += name_len
        tag, rank = struct.unpack_from("<BB", blob, offset)
        offset += 2
        dims = struct.unpack_from(f"<{rank}Q", blob, offset)
        offset += 8 * rank
        dtype = _TAG_DTYPES[tag]
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(blob, dtype=dtype, count=n, offset=offset).reshape(dims)
        offset += n * dtype.itemsize
        arrays[name] = arr.astype(dtype.newbyteorder("="))
    return arrays
