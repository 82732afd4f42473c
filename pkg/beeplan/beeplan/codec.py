"""Lossless compression of FP16 activation streams.

An FP16 value's high byte holds the sign, the exponent, and the top two
mantissa bits; its low byte holds the rest of the mantissa. The two bytes
have very different statistics, so splitting a stream into a high lane and
a low lane before entropy coding compresses better than coding the raw
interleaved bytes.

Container layout, little-endian throughout:

    magic         4 bytes   b"BBC1"
    version       1 byte    1
    backend_id    1 byte
    flags         1 byte    bit 0: byte-split applied
    element_count 8 bytes
    high_len      8 bytes
    low_len       8 bytes
    high blob, then low blob
"""

import logging
import struct
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Callable, Dict, Optional, Tuple, Union

import numpy as np
import zstandard as zstd

from .errors import BackendUnknown, CorruptContainer, LaneLengthMismatch, OddLength

log = logging.getLogger(__name__)

MAGIC = b"BBC1"
VERSION = 1
HEADER = struct.Struct("<4sBBBQQQ")
FLAG_SPLIT = 0x01

ZSTD_LEVEL = 3
ZLIB_LEVEL = 6


@dataclass(frozen=True)
class Backend:
    """A pair of pure transforms with decode(encode(x), len(x)) == x.

    `decode` takes the expected output size and never produces more than one
    byte past it, so a small blob cannot inflate without bound.
    """

    name: str
    backend_id: int
    encode: Callable[[bytes], bytes]
    decode: Callable[[bytes, int], bytes]


def _zstd_encode(data: bytes) -> bytes:
    return zstd.ZstdCompressor(level=ZSTD_LEVEL).compress(data)


def _zstd_decode(data: bytes, limit: int) -> bytes:
    declared = zstd.frame_content_size(data)
    if declared > limit:
        raise CorruptContainer(f"frame declares {declared} bytes, at most {limit}")
    # Frames without a content size get a buffer one byte past the limit.
    return zstd.ZstdDecompressor().decompress(data, max_output_size=limit + 1)


def _zlib_decode(data: bytes, limit: int) -> bytes:
    d = zlib.decompressobj()
    out = d.decompress(data, limit + 1)
    if len(out) <= limit and not d.eof:
        raise zlib.error("incomplete or truncated stream")
    return out


def _identity(data: bytes) -> bytes:
    return bytes(data)


def _identity_decode(data: bytes, limit: int) -> bytes:
    return bytes(data)


BACKENDS = {
    b.name: b
    for b in (
        Backend("identity", 0, _identity, _identity_decode),
        Backend("zstd", 1, _zstd_encode, _zstd_decode),
        Backend(
            "zlib",
            2,
            lambda data: zlib.compress(data, ZLIB_LEVEL),
            _zlib_decode,
        ),
    )
}
BACKENDS_BY_ID = {b.backend_id: b for b in BACKENDS.values()}


def get_backend(key: Union[str, int]) -> Backend:
    table: Dict[Any, Backend] = BACKENDS_BY_ID if isinstance(key, int) else BACKENDS
    try:
        return table[key]
    except KeyError:
        raise BackendUnknown(f"no backend registered as {key!r}")


def _lanes(data: bytes) -> np.ndarray:
    if len(data) % 2:
        raise OddLength(f"FP16 stream has odd length {len(data)}")
    return np.frombuffer(data, dtype=np.uint8).reshape(-1, 2)


def byte_split(data: bytes) -> Tuple[bytes, bytes]:
    """Separate an FP16 stream into (high lane, low lane)."""
    pairs = _lanes(data)
    return pairs[:, 1].tobytes(), pairs[:, 0].tobytes()


def byte_merge(high: bytes, low: bytes) -> bytes:
    """Interleave two lanes back into an FP16 stream."""
    if len(high) != len(low):
        raise LaneLengthMismatch(f"high lane {len(high)} bytes, low lane {len(low)}")
    out = np.empty((len(high), 2), dtype=np.uint8)
    out[:, 0] = np.frombuffer(low, dtype=np.uint8)
    out[:, 1] = np.frombuffer(high, dtype=np.uint8)
    return out.tobytes()


def entropy(data: bytes) -> float:
    """Shannon entropy in bits per byte; zero for empty input."""
    if not data:
        return 0.0
    counts = np.bincount(np.frombuffer(data, dtype=np.uint8), minlength=256)
    p = counts[counts > 0] / len(data)
    h = float(-(p * np.log2(p)).sum())
    if h <= 0:
        return 0.0
    return min(h, 8.0)


@dataclass(frozen=True)
class CodecContainer:
    backend_id: int
    split: bool
    element_count: int
    high_blob: bytes
    low_blob: bytes
    version: int = VERSION

    def encode(self) -> bytes:
        header = HEADER.pack(
            MAGIC,
            self.version,
            self.backend_id,
            FLAG_SPLIT if self.split else 0,
            self.element_count,
            len(self.high_blob),
            len(self.low_blob),
        )
        return header + self.high_blob + self.low_blob

    @classmethod
    def decode(cls, buf: bytes) -> "CodecContainer":
        if len(buf) < HEADER.size:
            raise CorruptContainer(f"{len(buf)} bytes is shorter than the header")
        magic, version, backend_id, flags, count, high_len, low_len = (
            HEADER.unpack_from(buf)
        )
        if magic != MAGIC:
            raise CorruptContainer(f"bad magic {magic!r}")
        if version != VERSION:
            raise CorruptContainer(f"unsupported version {version}")
        if flags & ~FLAG_SPLIT:
            raise CorruptContainer(f"unknown flags {flags:#04x}")
        if HEADER.size + high_len + low_len != len(buf):
            raise CorruptContainer(
                f"header promises {high_len} + {low_len} blob bytes, "
                f"container holds {len(buf) - HEADER.size}"
            )
        high_end = HEADER.size + high_len
        return cls(
            backend_id=backend_id,
            split=bool(flags & FLAG_SPLIT),
            element_count=count,
            high_blob=bytes(buf[HEADER.size : high_end]),
            low_blob=bytes(buf[high_end:]),
            version=version,
        )


def _encode_lanes(
    backend: Backend, high: bytes, low: bytes, parallel: bool
) -> Tuple[bytes, bytes]:
    if not parallel:
        return backend.encode(high), backend.encode(low)
    with ThreadPoolExecutor(max_workers=2) as pool:
        hi = pool.submit(backend.encode, high)
        lo = pool.submit(backend.encode, low)
        return hi.result(), lo.result()


def compress(
    data: bytes,
    backend: Union[str, int] = "zstd",
    split: bool = True,
    parallel: bool = False,
) -> CodecContainer:
    """Compress an FP16 stream, optionally byte-split into two lanes that are
    coded independently."""
    codec = get_backend(backend)
    count = len(_lanes(data))
    if split:
        high, low = byte_split(data)
        high_blob, low_blob = _encode_lanes(codec, high, low, parallel)
    else:
        high_blob, low_blob = codec.encode(data), b""
    log.debug(
        "%s %s: %d elements -> %d + %d bytes",
        codec.name,
        "split" if split else "raw",
        count,
        len(high_blob),
        len(low_blob),
    )
    return CodecContainer(codec.backend_id, split, count, high_blob, low_blob)


def _decode_blob(codec: Backend, blob: bytes, expect: int, what: str) -> bytes:
    try:
        out = codec.decode(blob, expect)
    except (zstd.ZstdError, zlib.error) as exc:
        raise CorruptContainer(f"{what}: {exc}") from exc
    if len(out) != expect:
        raise CorruptContainer(f"{what}: decoded {len(out)} bytes, expected {expect}")
    return out


def decompress(c: CodecContainer) -> bytes:
    """The exact stream `c` was made from."""
    if c.version != VERSION:
        raise CorruptContainer(f"unsupported version {c.version}")
    codec = get_backend(c.backend_id)
    if c.split:
        high = _decode_blob(codec, c.high_blob, c.element_count, "high lane")
        low = _decode_blob(codec, c.low_blob, c.element_count, "low lane")
        return byte_merge(high, low)
    if c.low_blob:
        raise CorruptContainer("raw-mode container has a low lane")
    return _decode_blob(codec, c.high_blob, 2 * c.element_count, "stream")


def compress_bytes(
    data: bytes, backend: Union[str, int] = "zstd", split: bool = True
) -> bytes:
    return compress(data, backend, split).encode()


def decompress_bytes(buf: bytes) -> bytes:
    return decompress(CodecContainer.decode(buf))


@dataclass(frozen=True)
class EntropyReport:
    backend: str
    raw_entropy: float
    high_entropy: float
    low_entropy: float

    raw_bytes: int
    lane_bytes: int
    """Length of each lane; half of `raw_bytes`."""

    raw_compressed: int
    """The whole stream coded without splitting."""

    high_compressed: int
    low_compressed: int

    raw_ms: Optional[float] = None
    split_ms: Optional[float] = None

    @property
    def split_compressed(self) -> int:
        return self.high_compressed + self.low_compressed

    @property
    def ratio(self) -> float:
        """Split-mode compressed size over raw size."""
        if not self.raw_bytes:
            return 1.0
        return self.split_compressed / self.raw_bytes

    @property
    def raw_ratio(self) -> float:
        if not self.raw_bytes:
            return 1.0
        return self.raw_compressed / self.raw_bytes

    def to_json(self) -> Dict[str, Any]:
        out: Dict[str, Any] = {
            "backend": self.backend,
            "raw_entropy": self.raw_entropy,
            "high_entropy": self.high_entropy,
            "low_entropy": self.low_entropy,
            "raw_bytes": self.raw_bytes,
            "lane_bytes": self.lane_bytes,
            "raw_compressed": self.raw_compressed,
            "high_compressed": self.high_compressed,
            "low_compressed": self.low_compressed,
            "split_compressed": self.split_compressed,
            "ratio": self.ratio,
            "raw_ratio": self.raw_ratio,
        }
        if self.raw_ms is not None:
            out["raw_ms"] = self.raw_ms
            out["split_ms"] = self.split_ms
        return out


def analyze(
    data: bytes, backend: Union[str, int] = "zstd", timing: bool = False
) -> EntropyReport:
    """Lane entropies and compressed sizes of both modes.

    With `timing`, also record how long each mode took to compress. Timings
    vary run to run, so they are off by default.
    """
    codec = get_backend(backend)
    high, low = byte_split(data)

    start = time.perf_counter()
    raw_blob = codec.encode(data)
    raw_ms = (time.perf_counter() - start) * 1000

    start = time.perf_counter()
    high_blob, low_blob = codec.encode(high), codec.encode(low)
    split_ms = (time.perf_counter() - start) * 1000

    return EntropyReport(
        backend=codec.name,
        raw_entropy=entropy(data),
        high_entropy=entropy(high),
        low_entropy=entropy(low),
        raw_bytes=len(data),
        lane_bytes=len(high),
        raw_compressed=len(raw_blob),
        high_compressed=len(high_blob),
        low_compressed=len(low_blob),
        raw_ms=raw_ms if timing else None,
        split_ms=split_ms if timing else None,
    )


DISTRIBUTIONS = ("gaussian", "uniform", "constant")


def generate_activations(
    count: int, dist: str = "gaussian", seed: int = 0, scale: float = 1.0
) -> bytes:
    """A synthetic FP16 activation stream of `count` elements."""
    assert count >= 0
    assert dist in DISTRIBUTIONS, f"unknown distribution {dist!r}"
    rng = np.random.default_rng(seed)
    if dist == "gaussian":
        values = rng.normal(0.0, scale, count)
    elif dist == "uniform":
        values = rng.uniform(-scale, scale, count)
    else:
        values = np.full(count, scale)
    return values.astype("<f2").tobytes()
