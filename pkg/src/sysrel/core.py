"""Shared numeric types: quantized tensors, sign matrices, and seeded RNG streams.

Everything here is immutable after construction and safe to share across
threads, except SeededStream, which is single-owner (one consumer per stream).
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

I8_MIN = -128
I8_MAX = 127

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15


def mix64(z: int) -> int:
    """Finalizing 64-bit mixer (splitmix64). Pure integer ops, platform-stable."""
    z &= _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


class SeededStream:
    """Counter-based uniform random stream.

    Draw k of seed s is a pure function of (s, k): replaying any counter range
    reproduces identical values on every platform, and block draws are
    bit-identical to the equivalent sequence of scalar draws.
    """

    __slots__ = ("seed", "counter")

    def __init__(self, seed: int, counter: int = 0):
        self.seed = seed & _MASK64
        self.counter = int(counter)

    def fork(self, tag: int) -> "SeededStream":
        """Derive an independent substream. Deterministic in (seed, tag)."""
        return SeededStream(mix64(self.seed ^ mix64(tag)))

    def next_u64(self) -> int:
        v = mix64((self.seed + (self.counter + 1) * _GAMMA) & _MASK64)
        self.counter += 1
        return v

    def uniform(self) -> float:
        """One double in [0, 1) with 53 significant bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def normal(self) -> float:
        """Standard normal via Box-Muller; consumes two draws."""
        u1 = self.uniform()
        u2 = self.uniform()
        if u1 <= 0.0:
            u1 = 2.0**-53
        return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)

    def randint(self, lo: int, hi: int) -> int:
        """One integer in [lo, hi). Fixed-point scaling keeps it reproducible."""
        if hi <= lo:
            raise ValueError("empty range")
        return lo + ((self.next_u64() * (hi - lo)) >> 64)

    def u64_block(self, n: int) -> np.ndarray:
        """n raw draws as uint64, identical to n successive next_u64 calls."""
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = (np.uint64(self.seed) + idx * np.uint64(_GAMMA)).astype(np.uint64)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
            z = z ^ (z >> np.uint64(31))
        self.counter += n
        return z

    def uniform_block(self, n: int) -> np.ndarray:
        return (self.u64_block(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))

    def sign_block(self, n: int) -> np.ndarray:
        """n entries in {+1, -1} from the low bit of each draw."""
        bits = self.u64_block(n) & np.uint64(1)
        return np.where(bits == 1, 1, -1).astype(np.int64)

    def normal_block(self, n: int) -> np.ndarray:
        """n standard normals (Box-Muller over paired uniform draws)."""
        u1 = np.maximum(self.uniform_block(n), 2.0**-53)
        u2 = self.uniform_block(n)
        return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)

    def permutation(self, n: int) -> list[int]:
        """Fisher-Yates permutation of range(n)."""
        perm = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.randint(0, i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return perm


def _round_half_away(values: np.ndarray) -> np.ndarray:
    return np.sign(values) * np.floor(np.abs(values) + 0.5)


class QuantTensor:
    """Integer tensor with a single symmetric quantization step.

    data is the flat row-major int8 buffer; dims are the extents. The real
    value of element k is data[k] * scale.
    """

    __slots__ = ("dims", "data", "scale")

    def __init__(self, dims, data, scale: float):
        dims = tuple(int(d) for d in dims)
        if any(d < 1 for d in dims):
            raise ValueError(f"non-positive extent in dims {dims}")
        arr = np.asarray(data).reshape(-1)
        if arr.size != int(np.prod(dims)):
            raise ValueError(f"data length {arr.size} does not match dims {dims}")
        wide = arr.astype(np.int64)
        if wide.min(initial=0) < I8_MIN or wide.max(initial=0) > I8_MAX:
            raise ValueError("element outside the signed 8-bit range")
        scale = float(scale)
        if not scale > 0.0:
            raise ValueError(f"scale must be positive, got {scale}")
        buf = wide.astype(np.int8)
        buf.setflags(write=False)
        self.dims = dims
        self.data = buf
        self.scale = scale

    def as_array(self) -> np.ndarray:
        return self.data.reshape(self.dims)

    def dequantize(self) -> np.ndarray:
        return self.as_array().astype(np.float64) * self.scale

    def __repr__(self):
        return f"QuantTensor(dims={self.dims}, scale={self.scale})"


class WideTensor:
    """Accumulator-domain tensor (24/32-bit values held in int64).

    Same layout rules as QuantTensor; scale is the real value of one
    accumulator quantum (product of the operand scales for a GEMM output).
    """

    __slots__ = ("dims", "data", "scale")

    def __init__(self, dims, data, scale: float):
        dims = tuple(int(d) for d in dims)
        if any(d < 1 for d in dims):
            raise ValueError(f"non-positive extent in dims {dims}")
        arr = np.asarray(data, dtype=np.int64).reshape(-1).copy()
        if arr.size != int(np.prod(dims)):
            raise ValueError(f"data length {arr.size} does not match dims {dims}")
        scale = float(scale)
        if not scale > 0.0:
            raise ValueError(f"scale must be positive, got {scale}")
        arr.setflags(write=False)
        self.dims = dims
        self.data = arr
        self.scale = scale

    def as_array(self) -> np.ndarray:
        return self.data.reshape(self.dims)

    def dequantize(self) -> np.ndarray:
        return self.as_array().astype(np.float64) * self.scale

    def __repr__(self):
        return f"WideTensor(dims={self.dims}, scale={self.scale})"


def quantize(values, scale: float) -> QuantTensor:
    """Quantize real values to int8: round half away from zero, then clamp.

    Clamping to [-128, 127] is the re-quantization saturation mechanism:
    out-of-range values map to the nearest representable boundary.
    """
    if not float(scale) > 0.0:
        raise ValueError(f"scale must be positive, got {scale}")
    arr = np.asarray(values, dtype=np.float64)
    q = _round_half_away(arr / float(scale))
    q = np.clip(q, I8_MIN, I8_MAX).astype(np.int64)
    return QuantTensor(arr.shape if arr.shape else (1,), q, scale)


def dequantize(t: QuantTensor) -> np.ndarray:
    return t.dequantize()


class SignMatrix:
    """Dense {+1, -1} matrix derived from a 2-D tensor (zero maps to +1)."""

    __slots__ = ("rows", "cols", "signs")

    def __init__(self, rows: int, cols: int, signs):
        rows, cols = int(rows), int(cols)
        if rows < 1 or cols < 1:
            raise ValueError("rows and cols must be positive")
        arr = np.asarray(signs, dtype=np.int8).reshape(-1)
        if arr.size != rows * cols:
            raise ValueError("signs length does not match rows*cols")
        if not np.all(np.abs(arr) == 1):
            raise ValueError("sign entries must be +1 or -1")
        arr = arr.copy()
        arr.setflags(write=False)
        self.rows = rows
        self.cols = cols
        self.signs = arr

    def as_array(self) -> np.ndarray:
        return self.signs.reshape(self.rows, self.cols)

    def row(self, i: int) -> np.ndarray:
        return self.as_array()[i]


def sign_matrix(w: QuantTensor) -> SignMatrix:
    """Elementwise sign of a 2-D tensor; entry is +1 iff the element is >= 0."""
    if len(w.dims) != 2:
        raise ValueError(f"sign_matrix needs a 2-D tensor, got dims {w.dims}")
    arr = w.as_array()
    signs = np.where(arr >= 0, 1, -1).astype(np.int8)
    return SignMatrix(w.dims[0], w.dims[1], signs)


def save_tensor(t: QuantTensor, manifest_path, name: str) -> None:
    """Write the tensor as a JSON manifest plus a raw binary blob.

    Byte k of the blob is element k of the row-major flattening, as a signed
    two's-complement byte.
    """
    manifest_path = Path(manifest_path)
    blob_path = manifest_path.with_suffix(".bin")
    manifest = {
        "name": name,
        "dims": list(t.dims),
        "scale": t.scale,
        "dtype": "i8",
        "file": blob_path.name,
    }
    blob_path.write_bytes(t.data.tobytes())
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n")


def load_tensor(manifest_path) -> QuantTensor:
    manifest_path = Path(manifest_path)
    manifest = json.loads(manifest_path.read_text())
    for key in ("name", "dims", "scale", "dtype", "file"):
        if key not in manifest:
            raise ValueError(f"tensor manifest missing field '{key}': {manifest_path}")
    if manifest["dtype"] != "i8":
        raise ValueError(f"unsupported dtype {manifest['dtype']!r} in {manifest_path}")
    blob = (manifest_path.parent / manifest["file"]).read_bytes()
    data = np.frombuffer(blob, dtype=np.int8)
    return QuantTensor(manifest["dims"], data, manifest["scale"])
