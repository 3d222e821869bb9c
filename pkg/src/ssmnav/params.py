"""Named parameter store, initializers, serialization, and layer wrappers.

Every trainable tensor lives in a ``ParamStore`` under a dotted name.
Iteration is always in lexicographic name order, which fixes both the
serialization layout and optimizer update order.
"""

from __future__ import annotations

import struct

import numpy as np

from .autodiff import (
    Tensor,
    ShapeError,
    add,
    embedding,
    layer_norm,
    matmul,
    relu,
)

MAGIC = b"SSNVPS\x00\x01"
FORMAT_VERSION = 1


class ParamStore:
    """Dict of named Tensors with seeded initialization and a binary format.

    File layout (all integers little-endian):
      8-byte magic ``SSNVPS\\x00\\x01``; uint32 format version; uint64 seed;
      uint64 tensor count; then per tensor in lexicographic name order:
      uint64 name byte length, UTF-8 name bytes, uint64 rank, rank uint64
      dims, then rank-product float32 values (row-major, little-endian).
    """

    def __init__(self, seed: int = 0, dtype=np.float32):
        self.seed = int(seed)
        self.dtype = np.dtype(dtype)
        self.rng = np.random.default_rng(seed)
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        t = Tensor(np.asarray(data, dtype=self.dtype), requires_grad=True)
        self._params[name] = t
        return t

    def uniform(self, name: str, shape, scale: float) -> Tensor:
        return self.add(name, self.rng.uniform(-scale, scale, size=shape))

    def linear_weight(self, name: str, fan_in: int, fan_out: int) -> Tensor:
        return self.uniform(name, (fan_in, fan_out), 1.0 / np.sqrt(fan_in))

    def zeros(self, name: str, shape) -> Tensor:
        return self.add(name, np.zeros(shape))

    def ones(self, name: str, shape) -> Tensor:
        return self.add(name, np.ones(shape))

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self) -> list[tuple[str, Tensor]]:
        return [(n, self._params[n]) for n in self.names()]

    def tensors(self) -> list[Tensor]:
        return [self._params[n] for n in self.names()]

    def total_params(self) -> int:
        return sum(t.size for t in self._params.values())

    def zero_grads(self) -> None:
        for t in self._params.values():
            t.zero_grad()

    def save(self, path: str) -> None:
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<I", FORMAT_VERSION))
            fh.write(struct.pack("<Q", self.seed))
            fh.write(struct.pack("<Q", len(self._params)))
            for name, t in self.items():
                nb = name.encode("utf-8")
                fh.write(struct.pack("<Q", len(nb)))
                fh.write(nb)
                fh.write(struct.pack("<Q", t.ndim))
                for d in t.shape:
                    fh.write(struct.pack("<Q", d))
                fh.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())

    @classmethod
    def load(cls, path: str, dtype=np.float32) -> "ParamStore":
        with open(path, "rb") as fh:
            if fh.read(8) != MAGIC:
                raise ValueError(f"{path}: bad magic, not a parameter file")
            (version,) = struct.unpack("<I", fh.read(4))
            if version != FORMAT_VERSION:
                raise ValueError(f"{path}: unsupported format version {version}")
            (seed,) = struct.unpack("<Q", fh.read(8))
            (count,) = struct.unpack("<Q", fh.read(8))
            store = cls(seed=seed, dtype=dtype)
            prev = None
            for _ in range(count):
                (nlen,) = struct.unpack("<Q", fh.read(8))
                name = fh.read(nlen).decode("utf-8")
                if prev is not None and name <= prev:
                    raise ValueError(f"{path}: names out of order at {name!r}")
                prev = name
                (rank,) = struct.unpack("<Q", fh.read(8))
                dims = struct.unpack(f"<{rank}Q", fh.read(8 * rank))
                n = int(np.prod(dims)) if rank else 1
                raw = fh.read(4 * n)
                if len(raw) != 4 * n:
                    raise ValueError(f"{path}: truncated data for {name!r}")
                data = np.frombuffer(raw, dtype="<f4").reshape(dims)
                store.add(name, data)
            if fh.read(1):
                raise ValueError(f"{path}: trailing bytes after last tensor")
        return store


# ---------------------------------------------------------------------------
# layer wrappers


class Linear:
    """Affine map on the last axis: [..., d_in] -> [..., d_out]."""

    def __init__(self, store: ParamStore, name: str, d_in: int, d_out: int,
                 bias: bool = True):
        self.d_in, self.d_out = d_in, d_out
        self.weight = store.linear_weight(f"{name}.weight", d_in, d_out)
        self.bias = store.zeros(f"{name}.bias", (d_out,)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise ShapeError(f"Linear expects last dim {self.d_in}, got {x.shape}")
        y = matmul(x, self.weight)
        if self.bias is not None:
            y = add(y, self.bias)
        return y


class LayerNorm:
    def __init__(self, store: ParamStore, name: str, dim: int):
        self.gain = store.ones(f"{name}.gain", (dim,))
        self.shift = store.zeros(f"{name}.shift", (dim,))

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.shift)


class Embedding:
    def __init__(self, store: ParamStore, name: str, count: int, dim: int):
        self.table = store.uniform(f"{name}.table", (count, dim), 1.0 / np.sqrt(dim))

    def __call__(self, ids: np.ndarray) -> Tensor:
        return embedding(self.table, ids)


class FeedForward:
    """Two-layer MLP with ReLU: d -> hidden -> d."""

    def __init__(self, store: ParamStore, name: str, dim: int, hidden: int,
                 d_out: int | None = None):
        self.lin1 = Linear(store, f"{name}.lin1", dim, hidden)
        self.lin2 = Linear(store, f"{name}.lin2", hidden, d_out if d_out is not None else dim)

    def __call__(self, x: Tensor) -> Tensor:
        return self.lin2(relu(self.lin1(x)))
