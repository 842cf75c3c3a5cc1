"""Dense float64 matrix helpers, the seeded generator, and the tensor record format.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64 in C
(row-major) order; vectors are 1-D arrays.

Random numbers come from :class:`SeededRng`, which draws raw 64-bit words
from the PCG64 bit generator (PCG-XSL-RR 128/64, seeded through numpy's
``SeedSequence``). numpy guarantees the raw PCG64 stream is identical across
releases and platforms, so every derived quantity below is computed from raw
words by fixed arithmetic instead of numpy's distribution methods:

* uniform in [0, 1): ``(word >> 11) * 2**-53``
* standard normal: Box-Muller over two consecutive uniforms
* integer in [0, n): ``word % n``
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

from .errors import BankFormatError, ParameterError, ShapeError, VersionMismatchError

TENSOR_MAGIC = b"MTAT"
TENSOR_VERSION = 1
_HEADER = struct.Struct("<4sBII")
_MASK64 = (1 << 64) - 1


def as_matrix(x) -> np.ndarray:
    m = np.ascontiguousarray(x, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise ShapeError(f"expected a non-empty 2-D matrix, got shape {m.shape}")
    return m


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim not in (1, 2) or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def scale_add(alpha: float, a: np.ndarray, beta: float, b: np.ndarray) -> np.ndarray:
    """Return ``alpha * a + beta * b`` elementwise."""
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    return alpha * a + beta * b


def stable_hash64(text: str) -> int:
    """Platform-independent 64-bit hash (first 8 bytes of SHA-256, little-endian)."""
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "little")


class SeededRng:
    """Single-owner deterministic generator; see the module docstring for the algorithm."""

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self._bits = np.random.PCG64(self.seed)

    def __repr__(self) -> str:
        return f"SeededRng(seed={self.seed})"

    def derive(self, key: str) -> "SeededRng":
        """Independent stream keyed by ``seed XOR hash(key)``; does not consume from self."""
        return SeededRng(self.seed ^ stable_hash64(key))

    def raw(self, n: int) -> np.ndarray:
        return np.asarray(self._bits.random_raw(n), dtype=np.uint64).reshape(n)

    def uniform(self, n: int, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
        if not lo < hi:
            raise ParameterError(f"uniform range needs lo < hi, got [{lo}, {hi})")
        u = (self.raw(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        out = lo + (hi - lo) * u
        # rounding can land exactly on hi for wide ranges
        return np.minimum(out, np.nextafter(hi, lo))

    def normal(self, n: int) -> np.ndarray:
        m = (n + 1) // 2
        u = self.uniform(2 * m)
        u1 = 1.0 - u[0::2]  # (0, 1], keeps log finite
        u2 = u[1::2]
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.empty(2 * m)
        z[0::2] = r * np.cos(2.0 * np.pi * u2)
        z[1::2] = r * np.sin(2.0 * np.pi * u2)
        return z[:n]

    def integer(self, bound: int) -> int:
        if bound < 1:
            raise ParameterError("bound must be positive")
        return int(self.raw(1)[0] % np.uint64(bound))

    def permutation(self, n: int) -> list[int]:
        """Fisher-Yates shuffle of ``range(n)``."""
        order = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.integer(i + 1)
            order[i], order[j] = order[j], order[i]
        return order

    def choice(self, weights: np.ndarray) -> int:
        """Index drawn with probability proportional to non-negative ``weights``."""
        total = float(np.sum(weights))
        if not total > 0:
            raise ParameterError("choice weights must have a positive sum")
        target = self.uniform(1)[0] * total
        cumulative = np.cumsum(weights)
        return min(int(np.searchsorted(cumulative, target, side="right")), len(weights) - 1)


def uniform_matrix(rng: SeededRng, rows: int, cols: int, lo: float, hi: float) -> np.ndarray:
    if rows < 1 or cols < 1:
        raise ParameterError(f"matrix dims must be positive, got {rows}x{cols}")
    return rng.uniform(rows * cols, lo, hi).reshape(rows, cols)


def tensor_to_bytes(x: np.ndarray) -> bytes:
    """Serialize a matrix (vectors as 1×n) into a tensor record."""
    m = np.asarray(x, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise ShapeError(f"tensor records hold matrices, got shape {m.shape}")
    rows, cols = m.shape
    header = _HEADER.pack(TENSOR_MAGIC, TENSOR_VERSION, rows, cols)
    return header + np.ascontiguousarray(m, dtype="<f8").tobytes()


def tensor_from_bytes(buf: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(buf) < _HEADER.size:
        raise BankFormatError(f"{source}: truncated tensor header")
    magic, version, rows, cols = _HEADER.unpack_from(buf)
    if magic != TENSOR_MAGIC:
        raise BankFormatError(f"{source}: bad magic {magic!r}")
    if version != TENSOR_VERSION:
        raise VersionMismatchError(f"{source}: tensor version {version}, expected {TENSOR_VERSION}")
    expected = _HEADER.size + 8 * rows * cols
    if len(buf) != expected:
        raise BankFormatError(f"{source}: expected {expected} bytes, found {len(buf)}")
    data = np.frombuffer(buf, dtype="<f8", offset=_HEADER.size).astype(np.float64)
    return data.reshape(rows, cols)


def write_tensor(path: str | Path, x: np.ndarray) -> str:
    """Write a tensor record and return the SHA-256 hex digest of the file."""
    payload = tensor_to_bytes(x)
    Path(path).write_bytes(payload)
    return hashlib.sha256(payload).hexdigest()


def read_tensor(path: str | Path) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes(), str(path))


def checksum(arrays) -> str:
    """SHA-256 over the tensor-record serialization of a sequence of arrays."""
    h = hashlib.sha256()
    for a in arrays:
        h.update(tensor_to_bytes(a))
    return h.hexdigest()


def frozen_copy(x) -> np.ndarray:
    out = np.array(x, dtype=np.float64, order="C", copy=True)
    out.setflags(write=False)
    return out
