"""Runtime pieces of speculative decoding over a pipeline: scoring and
pruning draft candidates before they cross a hop, packing the survivors
without padding, and a KV cache whose rejected slots become holes that are
compacted later.
"""

import logging
import math
import struct
import threading
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, FrozenSet, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import (
    BadDistribution,
    CorruptOffsets,
    DimMismatch,
    IndexOutOfRegion,
    NotFp16,
    ParseError,
    ShapeMismatch,
)

log = logging.getLogger(__name__)

PROB_TOLERANCE = 1e-6


# Scoring.


@dataclass(frozen=True)
class CandidateScore:
    candidate_id: int
    features: Tuple[float, float, float]
    """(max probability, probability of this candidate, entropy in bits)."""

    score: float


@dataclass(frozen=True)
class ConfidenceOnly:
    """Score a candidate by the proxy head's probability for it."""


MLP_MAGIC = b"BBMS"
MLP_HEADER = struct.Struct("<4sIII")
MLP_IN = 3
MLP_HIDDEN = 16


@dataclass(frozen=True, eq=False)
class MlpScorer:
    """features -> hidden (ReLU) -> 1 (sigmoid)."""

    w1: np.ndarray
    """Shape (3, hidden)."""

    b1: np.ndarray
    w2: np.ndarray
    """Shape (hidden, 1)."""

    b2: np.ndarray

    def __post_init__(self) -> None:
        hidden = self.w1.shape[1]
        assert self.w1.shape == (MLP_IN, hidden)
        assert self.b1.shape == (hidden,)
        assert self.w2.shape == (hidden, 1)
        assert self.b2.shape == (1,)

    @classmethod
    def zeros(cls, hidden: int = MLP_HIDDEN) -> "MlpScorer":
        return cls(
            np.zeros((MLP_IN, hidden), np.float32),
            np.zeros(hidden, np.float32),
            np.zeros((hidden, 1), np.float32),
            np.zeros(1, np.float32),
        )

    def __call__(self, features: np.ndarray) -> np.ndarray:
        h = np.maximum(features @ self.w1 + self.b1, 0.0)
        z = (h @ self.w2 + self.b2)[:, 0]
        return 1.0 / (1.0 + np.exp(-z))


Scorer = Union[ConfidenceOnly, MlpScorer]


def load_mlp(buf: bytes) -> MlpScorer:
    """Read a scorer weight file: header, then float32 W1, b1, W2, b2 in
    row-major order."""
    if len(buf) < MLP_HEADER.size:
        raise ParseError("scorer file is shorter than its header")
    magic, n_in, hidden, n_out = MLP_HEADER.unpack_from(buf)
    if magic != MLP_MAGIC:
        raise ParseError(f"bad scorer magic {magic!r}")
    if n_in != MLP_IN or n_out != 1 or hidden < 1:
        raise ShapeMismatch(
            f"scorer must be {MLP_IN} -> hidden -> 1, got {n_in} -> {hidden} -> {n_out}"
        )
    sizes = [n_in * hidden, hidden, hidden * n_out, n_out]
    if len(buf) != MLP_HEADER.size + 4 * sum(sizes):
        raise ShapeMismatch(
            f"scorer file has {len(buf)} bytes for dims {n_in}x{hidden}x{n_out}"
        )
    flat = np.frombuffer(buf, dtype="<f4", offset=MLP_HEADER.size)
    parts = np.split(flat, np.cumsum(sizes)[:-1])
    return MlpScorer(
        parts[0].reshape(n_in, hidden).astype(np.float32),
        parts[1].astype(np.float32),
        parts[2].reshape(hidden, n_out).astype(np.float32),
        parts[3].astype(np.float32),
    )


def save_mlp(scorer: MlpScorer) -> bytes:
    hidden = scorer.w1.shape[1]
    header = MLP_HEADER.pack(MLP_MAGIC, MLP_IN, hidden, 1)
    body = b"".join(
        np.ascontiguousarray(a, dtype="<f4").tobytes()
        for a in (scorer.w1, scorer.b1, scorer.w2, scorer.b2)
    )
    return header + body


@dataclass(frozen=True)
class PruneConfig:
    tau: float = 0.5
    scorer: Scorer = field(default_factory=ConfidenceOnly)

    def __post_init__(self) -> None:
        assert 0 <= self.tau <= 1


def _entropy_bits(p: np.ndarray) -> np.ndarray:
    """Entropy of each row of `p`, in bits."""
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log2(np.where(p > 0, p, 1.0)), 0.0)
    return np.maximum(-terms.sum(axis=1), 0.0)


def score_candidates(
    p_hat: np.ndarray, candidates: Sequence[int], cfg: PruneConfig = PruneConfig()
) -> List[CandidateScore]:
    """Features and retention scores for draft candidates.

    `p_hat` is the proxy head's distribution over the vocabulary: a single
    vector shared by every candidate, or one row per candidate.
    """
    p = np.asarray(p_hat, dtype=np.float64)
    if p.ndim == 1:
        p = np.broadcast_to(p, (len(candidates), p.shape[0]))
    elif p.ndim != 2 or p.shape[0] != len(candidates):
        raise ShapeMismatch(
            f"expected one distribution per candidate, got shape {p.shape} "
            f"for {len(candidates)} candidates"
        )
    if not candidates:
        return []
    if (p < 0).any() or (np.abs(p.sum(axis=1) - 1.0) > PROB_TOLERANCE).any():
        raise BadDistribution("proxy distribution must be non-negative and sum to 1")

    ids = np.asarray(candidates, dtype=np.int64)
    if (ids < 0).any() or (ids >= p.shape[1]).any():
        raise ShapeMismatch(f"candidate ids must lie in [0, {p.shape[1]})")

    rows = np.arange(len(ids))
    feats = np.stack([p.max(axis=1), p[rows, ids], _entropy_bits(p)], axis=1)
    if isinstance(cfg.scorer, MlpScorer):
        scores = cfg.scorer(feats.astype(np.float32)).astype(np.float64)
    else:
        scores = feats[:, 1]
    scores = np.clip(scores, 0.0, 1.0)
    return [
        CandidateScore(int(v), (float(f[0]), float(f[1]), float(f[2])), float(s))
        for v, f, s in zip(ids, feats, scores)
    ]


def prune(scores: Sequence[CandidateScore], tau: float) -> List[int]:
    """Positions of the candidates that survive: score at least `tau`."""
    return [i for i, s in enumerate(scores) if s.score >= tau]


def prune_request(scores: Sequence[CandidateScore], tau: float) -> List[int]:
    """Like `prune`, but never leaves a request with nothing to verify: if
    every candidate falls below `tau`, the best one is kept."""
    kept = prune(scores, tau)
    if kept or not scores:
        return kept
    best = max(range(len(scores)), key=lambda i: (scores[i].score, -i))
    return [best]


def retention_threshold(scores: Sequence[float], keep_fraction: float) -> float:
    """A threshold that keeps (at least) the top `keep_fraction` of `scores`.
    Ties at the threshold are all kept."""
    assert 0 < keep_fraction <= 1 and len(scores) > 0
    ordered = sorted(scores, reverse=True)
    k = max(1, math.ceil(keep_fraction * len(ordered) - 1e-9))
    return float(ordered[k - 1])


# Padding-free packing.


@dataclass(frozen=True, eq=False)
class PackedBatch:
    payload: np.ndarray
    """FP16 array of shape (1, total, dim)."""

    offsets: np.ndarray
    """Request boundaries: offsets[r] to offsets[r + 1] belong to request r."""

    @property
    def dim(self) -> int:
        return int(self.payload.shape[2])

    @property
    def counts(self) -> List[int]:
        return [int(n) for n in np.diff(self.offsets)]


def _to_fp16(rows: np.ndarray) -> np.ndarray:
    if rows.dtype == np.float16:
        return rows
    if not np.issubdtype(rows.dtype, np.floating):
        raise NotFp16(f"hidden vectors have dtype {rows.dtype}")
    with np.errstate(over="ignore", under="ignore"):
        out = rows.astype(np.float16)
    lost = ~((out == rows) | (np.isnan(out) & np.isnan(rows)))
    if lost.any():
        raise NotFp16(f"{int(lost.sum())} values change when cast to FP16")
    return out


def pack(
    per_request: Sequence[Sequence[Any]], dim: Optional[int] = None
) -> PackedBatch:
    """Concatenate every request's retained hidden vectors into one tensor.

    Vectors of any float dtype are accepted as long as every value survives
    the cast to FP16 unchanged.
    """
    rows: List[np.ndarray] = []
    offsets = [0]
    for r, req in enumerate(per_request):
        for k, vec in enumerate(req):
            v = np.asarray(vec)
            if v.ndim != 1:
                raise DimMismatch(f"request {r} entry {k}: expected a vector")
            if dim is None:
                dim = v.shape[0]
            elif v.shape[0] != dim:
                raise DimMismatch(
                    f"request {r} entry {k}: dimension {v.shape[0]}, expected {dim}"
                )
            rows.append(v)
        offsets.append(len(rows))
    dim = dim or 0
    if rows:
        payload = _to_fp16(np.stack(rows))[None, :, :]
    else:
        payload = np.zeros((1, 0, dim), dtype=np.float16)
    return PackedBatch(payload, np.asarray(offsets, dtype=np.int64))


def _check_offsets(pb: PackedBatch) -> None:
    off = pb.offsets
    if pb.payload.ndim != 3 or pb.payload.shape[0] != 1:
        raise CorruptOffsets(f"payload shape {pb.payload.shape} is not (1, total, dim)")
    if off.ndim != 1 or len(off) < 1 or off[0] != 0:
        raise CorruptOffsets("offsets must start at 0")
    if (np.diff(off) < 0).any():
        raise CorruptOffsets("offsets must be non-decreasing")
    if off[-1] != pb.payload.shape[1]:
        raise CorruptOffsets(
            f"offsets end at {off[-1]}, payload holds {pb.payload.shape[1]} vectors"
        )


def unpack(pb: PackedBatch) -> List[List[np.ndarray]]:
    """Rebuild the per-request layout from a packed batch."""
    _check_offsets(pb)
    flat = pb.payload[0]
    return [
        [flat[k] for k in range(int(lo), int(hi))]
        for lo, hi in zip(pb.offsets, pb.offsets[1:])
    ]


def encode_packed(pb: PackedBatch) -> bytes:
    """Offset count, offsets, then the FP16 payload; little-endian."""
    _check_offsets(pb)
    head = struct.pack("<I", len(pb.offsets))
    offsets = pb.offsets.astype("<u4").tobytes()
    return head + offsets + pb.payload.astype("<f2").tobytes()


def decode_packed(buf: bytes) -> PackedBatch:
    if len(buf) < 4:
        raise CorruptOffsets("packed batch is shorter than its offset count")
    (count,) = struct.unpack_from("<I", buf)
    start = 4 + 4 * count
    if count < 1 or len(buf) < start:
        raise CorruptOffsets(f"packed batch cannot hold {count} offsets")
    offsets = np.frombuffer(buf, dtype="<u4", count=count, offset=4).astype(np.int64)
    body = len(buf) - start
    total = int(offsets[-1])
    if body % 2 or (total == 0 and body) or (total and (body // 2) % total):
        raise CorruptOffsets(f"{body} payload bytes do not hold {total} vectors")
    dim = body // 2 // total if total else 0
    if body:
        payload = np.frombuffer(buf, dtype="<f2", offset=start).astype(np.float16)
    else:
        payload = np.zeros(0, dtype=np.float16)
    pb = PackedBatch(payload.reshape(1, total, dim), offsets)
    _check_offsets(pb)
    return pb


# Three-region KV cache.


@dataclass(frozen=True)
class KvCacheState:
    """Physical slots are laid out as a compact prefix, then a hole region
    (committed tokens mixed with rejected ones), then the uncommitted new
    region. `holes` indexes into the hole region."""

    entries: Tuple[Any, ...] = ()
    prefix_len: int = 0
    hole_len: int = 0
    holes: FrozenSet[int] = frozenset()
    new_len: int = 0

    appended: int = 0
    """Tokens ever appended; the default payload of the next one."""

    def __post_init__(self) -> None:
        assert len(self.entries) == self.prefix_len + self.hole_len + self.new_len
        assert all(0 <= h < self.hole_len for h in self.holes)

    @property
    def committed_len(self) -> int:
        return self.prefix_len + self.hole_len - len(self.holes)

    def visible_slots(self) -> List[int]:
        """Physical indices attention may read, in logical order."""
        base = self.prefix_len
        return (
            list(range(base))
            + [base + k for k in range(self.hole_len) if k not in self.holes]
            + list(range(base + self.hole_len, len(self.entries)))
        )

    def attention_mask(self) -> np.ndarray:
        mask = np.ones(len(self.entries), dtype=bool)
        for h in self.holes:
            mask[self.prefix_len + h] = False
        return mask


def kv_append(
    state: KvCacheState, n_tokens: int, payloads: Optional[Sequence[Any]] = None
) -> KvCacheState:
    """Grow the new region by `n_tokens` slots."""
    assert n_tokens >= 0
    if payloads is None:
        payloads = range(state.appended, state.appended + n_tokens)
    assert len(payloads) == n_tokens
    return replace(
        state,
        entries=state.entries + tuple(payloads),
        new_len=state.new_len + n_tokens,
        appended=state.appended + n_tokens,
    )


def kv_commit(state: KvCacheState, accepted: Sequence[int]) -> KvCacheState:
    """Accept some of the new region; the rest become holes. Accepted indices
    are relative to the new region."""
    acc = set(accepted)
    for k in acc:
        if not 0 <= k < state.new_len:
            raise IndexOutOfRegion(
                f"accepted index {k} is outside the new region of {state.new_len}"
            )
    rejected = {state.hole_len + k for k in range(state.new_len) if k not in acc}
    return replace(
        state,
        hole_len=state.hole_len + state.new_len,
        holes=state.holes | rejected,
        new_len=0,
    )


def _committed(state: KvCacheState) -> Tuple[Any, ...]:
    end = state.prefix_len + state.hole_len
    return tuple(state.entries[i] for i in state.visible_slots() if i < end)


def kv_compact(state: KvCacheState) -> KvCacheState:
    """Physically drop the holes. The new region is kept as it is."""
    if not state.hole_len:
        return state
    end = state.prefix_len + state.hole_len
    committed = _committed(state)
    return replace(
        state,
        entries=committed + state.entries[end:],
        prefix_len=len(committed),
        hole_len=0,
        holes=frozenset(),
    )


def kv_visible(state: KvCacheState) -> List[Any]:
    """The logical token sequence: everything except holes, in order."""
    return [state.entries[i] for i in state.visible_slots()]


class KvCache:
    """A single-writer KV cache that compacts in the background.

    Appends and reads proceed while a compaction runs; a commit waits for
    it, since it reshapes the region being compacted.
    """

    def __init__(self, state: KvCacheState = KvCacheState()):
        self._state = state
        self._lock = threading.Lock()
        self._pool = ThreadPoolExecutor(max_workers=1, thread_name_prefix="kv-compact")
        self._pending: Optional[Future] = None

    @property
    def state(self) -> KvCacheState:
        with self._lock:
            return self._state

    def append(self, n_tokens: int, payloads: Optional[Sequence[Any]] = None) -> None:
        with self._lock:
            self._state = kv_append(self._state, n_tokens, payloads)

    def commit(self, accepted: Sequence[int]) -> None:
        self.wait()
        with self._lock:
            self._state = kv_commit(self._state, accepted)

    def visible(self) -> List[Any]:
        with self._lock:
            return kv_visible(self._state)

    def compact(self) -> None:
        self.compact_async().result()

    def compact_async(self) -> Future:
        self.wait()
        snapshot = self.state
        self._pending = self._pool.submit(self._compact, snapshot)
        return self._pending

    def _compact(self, snapshot: KvCacheState) -> None:
        end = snapshot.prefix_len + snapshot.hole_len
        committed = _committed(snapshot)
        with self._lock:
            cur = self._state
            # Only the new region can have changed since the snapshot.
            assert cur.prefix_len == snapshot.prefix_len
            assert cur.hole_len == snapshot.hole_len
            self._state = replace(
                cur,
                entries=committed + cur.entries[end:],
                prefix_len=len(committed),
                hole_len=0,
                holes=frozenset(),
            )
        log.debug("compacted %d slots down to %d", end, len(committed))

    def wait(self) -> None:
        pending, self._pending = self._pending, None
        if pending is not None:
            pending.result()

    def close(self) -> None:
        self.wait()
        self._pool.shutdown()

    def __enter__(self) -> "KvCache":
        return self

    def __exit__(self, *exc: Any) -> None:
        self.close()
