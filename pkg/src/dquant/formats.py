"""Binary file formats (all little-endian).

DQT1 tensor
    ``b"DQTENS01"``, u8 rank, rank x u32 extents, u8 dtype tag
    (0 = float32, 1 = float64), raw row-major payload.

DQC1 codebooks
    ``b"DQCODE01"``, u32 M, u32 K, u32 D, u8 dtype tag, then ``M*K*D`` codes
    in that dtype, followed by ``M*K`` EMA counts and ``M*K*D`` EMA sums.
    The EMA state is always written as float64 because it is accumulated in
    float64; this keeps the round trip bit-exact for float32 codebooks too.

DQP1 parameters
    ``b"DQPARM01"``, u32 version (= 1), u32 record count, then per record a
    u16 name length, the UTF-8 name and a DQT1-encoded tensor.
"""

from __future__ import annotations

import glob as _glob
import struct
from pathlib import Path

import numpy as np

from .quantizer import Codebook, DepthwiseQuantizer

__all__ = [
    "FormatError",
    "ShapeMismatchError",
    "encode_tensor",
    "decode_tensor",
    "save_tensor",
    "load_tensor",
    "import_tensors",
    "save_codebooks",
    "load_codebooks",
    "save_parameters",
    "load_parameters",
]

TENSOR_MAGIC = b"DQTENS01"
CODEBOOK_MAGIC = b"DQCODE01"
PARAM_MAGIC = b"DQPARM01"
PARAM_VERSION = 1

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAGS = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class FormatError(ValueError):
    """Malformed file; ``offset`` is the byte position where parsing failed."""

    def __init__(self, message: str, offset: int, path=None):
        where = f"{path}: " if path else ""
        super().__init__(f"{where}{message} at byte offset {offset}")
        self.offset = offset
        self.path = path


class ShapeMismatchError(ValueError):
    pass


def _tag(dtype) -> int:
    try:
        return _TAGS[np.dtype(dtype)]
    except KeyError:
        raise TypeError(f"unsupported dtype {dtype}; use float32 or float64") from None


class _Reader:
    def __init__(self, buf: bytes, offset: int = 0, path=None):
        self.buf = buf
        self.pos = offset
        self.path = path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated {what}: need {n} bytes, {len(self.buf) - self.pos} left",
                              self.pos, self.path)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def array(self, dtype, count: int, what: str) -> np.ndarray:
        dtype = np.dtype(dtype)
        raw = self.take(dtype.itemsize * count, what)
        return np.frombuffer(raw, dtype=dtype).copy()

    def magic(self, expected: bytes):
        start = self.pos
        got = self.take(len(expected), "magic")
        if got != expected:
            raise FormatError(f"bad magic {got!r}, expected {expected!r}", start, self.path)

    def dtype(self):
        start = self.pos
        (tag,) = self.unpack("<B", "dtype tag")
        if tag not in _DTYPES:
            raise FormatError(f"unknown dtype tag {tag}", start, self.path)
        return _DTYPES[tag]


def encode_tensor(arr) -> bytes:
    arr = np.asarray(arr)
    tag = _tag(arr.dtype)
    if arr.ndim > 255:
        raise ValueError("rank too large")
    head = TENSOR_MAGIC + struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + struct.pack("<B", tag) + np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes()


def _read_tensor(r: _Reader) -> np.ndarray:
    r.magic(TENSOR_MAGIC)
    (rank,) = r.unpack("<B", "rank")
    shape = r.unpack(f"<{rank}I", "extents")
    dtype = r.dtype()
    data = r.array(dtype, int(np.prod(shape, dtype=np.int64)), "payload")
    return data.reshape(shape).astype(dtype.newbyteorder("="), copy=False)


def decode_tensor(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Parse one DQT1 tensor at ``offset``; returns it and the end offset."""
    r = _Reader(buf, offset)
    return _read_tensor(r), r.pos


def save_tensor(path, arr) -> None:
    Path(path).write_bytes(encode_tensor(arr))


def load_tensor(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    r = _Reader(buf, 0, path)
    arr = _read_tensor(r)
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes", r.pos, path)
    return arr


def import_tensors(pattern) -> list[np.ndarray]:
    """Load every DQT1 file matching a glob; all must share one shape."""
    paths = sorted(_glob.glob(str(pattern)))
    if not paths:
        raise FileNotFoundError(f"no files match {pattern}")
    out, first = [], None
    for p in paths:
        t = load_tensor(p)
        if first is None:
            first = (p, t.shape)
        elif t.shape != first[1]:
            raise ShapeMismatchError(
                f"shape {t.shape} in {p} differs from shape {first[1]} in {first[0]}")
        out.append(t)
    return out


def save_codebooks(path, q: DepthwiseQuantizer) -> None:
    codes = np.stack([b.codes for b in q.books])
    tag = _tag(codes.dtype)
    M, K, D = codes.shape
    parts = [CODEBOOK_MAGIC, struct.pack("<IIIB", M, K, D, tag),
             np.ascontiguousarray(codes, dtype=_DTYPES[tag]).tobytes(),
             np.stack([b.counts for b in q.books]).astype("<f8").tobytes(),
             np.stack([b.sums for b in q.books]).astype("<f8").tobytes()]
    Path(path).write_bytes(b"".join(parts))


def load_codebooks(path, axis: int = 0, gamma: float = 0.99, epsilon: float = 1e-5,
                   shared: bool = False) -> DepthwiseQuantizer:
    """Read a DQC1 file; ``shared`` re-ties identical books into one object."""
    buf = Path(path).read_bytes()
    r = _Reader(buf, 0, path)
    r.magic(CODEBOOK_MAGIC)
    M, K, D = r.unpack("<III", "header")
    dtype = r.dtype()
    codes = r.array(dtype, M * K * D, "codes").reshape(M, K, D)
    counts = r.array("<f8", M * K, "counts").reshape(M, K)
    sums = r.array("<f8", M * K * D, "sums").reshape(M, K, D)
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes", r.pos, path)
    native = dtype.newbyteorder("=")
    if shared:
        book = Codebook(codes[0].astype(native), gamma, epsilon, counts[0], sums[0])
        return DepthwiseQuantizer([book] * M, axis)
    return DepthwiseQuantizer([Codebook(codes[i].astype(native), gamma, epsilon, counts[i], sums[i])
                               for i in range(M)], axis)


def save_parameters(path, named) -> None:
    """Write ``(name, array)`` pairs (or a dict) in order."""
    items = list(named.items()) if isinstance(named, dict) else list(named)
    parts = [PARAM_MAGIC, struct.pack("<II", PARAM_VERSION, len(items))]
    for name, arr in items:
        raw = name.encode("utf-8")
        parts += [struct.pack("<H", len(raw)), raw, encode_tensor(arr)]
    Path(path).write_bytes(b"".join(parts))


def load_parameters(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    r = _Reader(buf, 0, path)
    r.magic(PARAM_MAGIC)
    start = r.pos
    version, count = r.unpack("<II", "header")
    if version != PARAM_VERSION:
        raise FormatError(f"unsupported version {version}", start, path)
    out = {}
    for _ in range(count):
        (n,) = r.unpack("<H", "name length")
        name = r.take(n, "name").decode("utf-8")
        out[name] = _read_tensor(r)
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes", r.pos, path)
    return out
