"""A real pipeline over TCP: a source, a chain of stages, and a sink, with
shaped links standing in for slow internet hops.

Frames, little-endian:

    magic        4 bytes   b"BBF1"
    msg_type     1 byte    0 activations, 1 packed SD batch, 2 ack, 3 shutdown
    batch_id     8 bytes   the decoding step
    micro_index  2 bytes
    flags        1 byte    bit 0 compressed, bit 1 byte-split
    payload_len  4 bytes
    payload

The source sends one step's micro-batches, then waits for the sink's ack of
that step before starting the next. Acks travel back upstream through every
stage and carry the SHA-256 digest of everything the sink has reassembled.
"""

import hashlib
import logging
import queue
import socket
import struct
import threading
import time
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import codec
from .errors import BeeplanError, ConnectionLost, FrameCorrupt
from .sim import RunMetrics
from .specdec import decode_packed, encode_packed, pack

log = logging.getLogger(__name__)

MAGIC = b"BBF1"
HEADER = struct.Struct("<4sBQHBI")
FLAG_COMPRESSED = 0x01
FLAG_SPLIT = 0x02
TIMEOUT_S = 60.0

Address = Tuple[str, int]


class MsgType(IntEnum):
    ACTIVATIONS = 0
    PACKED_SD = 1
    ACK = 2
    SHUTDOWN = 3


@dataclass(frozen=True)
class Frame:
    msg_type: MsgType
    batch_id: int
    micro_index: int = 0
    flags: int = 0
    payload: bytes = b""

    @property
    def compressed(self) -> bool:
        return bool(self.flags & FLAG_COMPRESSED)

    def encode(self) -> bytes:
        header = HEADER.pack(
            MAGIC,
            self.msg_type,
            self.batch_id,
            self.micro_index,
            self.flags,
            len(self.payload),
        )
        return header + self.payload

    @classmethod
    def parse_header(cls, head: bytes) -> Tuple[MsgType, int, int, int, int]:
        magic, msg_type, batch_id, micro_index, flags, length = HEADER.unpack(head)
        if magic != MAGIC:
            raise FrameCorrupt(f"bad magic {magic!r}")
        try:
            kind = MsgType(msg_type)
        except ValueError:
            raise FrameCorrupt(f"unknown message type {msg_type}")
        if flags & ~(FLAG_COMPRESSED | FLAG_SPLIT):
            raise FrameCorrupt(f"unknown flags {flags:#04x}")
        return kind, batch_id, micro_index, flags, length

    @classmethod
    def decode(cls, buf: bytes) -> "Frame":
        if len(buf) < HEADER.size:
            raise FrameCorrupt(f"{len(buf)} bytes is shorter than a frame header")
        kind, batch_id, micro_index, flags, length = cls.parse_header(
            buf[: HEADER.size]
        )
        if len(buf) != HEADER.size + length:
            raise FrameCorrupt(
                f"payload_len says {length}, frame carries {len(buf) - HEADER.size}"
            )
        return cls(kind, batch_id, micro_index, flags, bytes(buf[HEADER.size :]))


def _recv_exact(sock: socket.socket, n: int) -> Optional[bytes]:
    """Read exactly `n` bytes, or None on a clean end of stream before the
    first byte."""
    buf = bytearray(n)
    view = memoryview(buf)
    got = 0
    while got < n:
        try:
            k = sock.recv_into(view[got:], n - got)
        except OSError as exc:
            raise ConnectionLost(f"receive failed: {exc}") from exc
        if k == 0:
            if got == 0:
                return None
            raise ConnectionLost(f"peer closed after {got} of {n} bytes")
        got += k
    return bytes(buf)


def read_frame(sock: socket.socket) -> Optional[Frame]:
    """The next frame on `sock`, or None if the peer closed cleanly."""
    head = _recv_exact(sock, HEADER.size)
    if head is None:
        return None
    kind, batch_id, micro_index, flags, length = Frame.parse_header(head)
    payload = _recv_exact(sock, length) if length else b""
    if payload is None:
        raise ConnectionLost("peer closed before the frame payload")
    return Frame(kind, batch_id, micro_index, flags, payload)


def _sendall(sock: socket.socket, data: bytes) -> None:
    try:
        sock.sendall(data)
    except OSError as exc:
        raise ConnectionLost(f"send failed: {exc}") from exc


# Link shaping.


@dataclass
class TokenBucket:
    """Bytes conform at `rate` per second, with up to `capacity` bytes of
    saved-up credit. Spending more than is available puts the bucket in
    debt; the caller waits until it is paid back."""

    rate: float
    """Bytes per second."""

    capacity: float = 0.0
    start_full: bool = False
    clock: Callable[[], float] = time.monotonic

    _tokens: float = field(init=False, repr=False)
    _last: float = field(init=False, repr=False)
    _lock: threading.Lock = field(
        init=False, repr=False, default_factory=threading.Lock
    )

    def __post_init__(self) -> None:
        assert self.rate > 0 and self.capacity >= 0
        self._tokens = self.capacity if self.start_full else 0.0
        self._last = self.clock()

    def consume(self, n: int) -> float:
        """Take `n` bytes; returns how many seconds to wait before they may
        leave."""
        with self._lock:
            now = self.clock()
            refill = (now - self._last) * self.rate
            self._tokens = min(self.capacity, self._tokens + refill)
            self._last = now
            self._tokens -= n
            return max(0.0, -self._tokens / self.rate)


@dataclass(frozen=True)
class LinkShape:
    rate: float = float("inf")
    """Bits per second; infinity for an unshaped link."""

    latency: float = 0.0
    """Added one-way latency, milliseconds."""

    @classmethod
    def parse(cls, text: str) -> "LinkShape":
        """`RATE_MBPS,LATENCY_MS`, where the rate may be `inf`."""
        try:
            rate, latency = text.split(",")
            return cls(float(rate) * 1e6, float(latency))
        except ValueError:
            raise ValueError(f"expected RATE_MBPS,LATENCY_MS, got {text!r}")

    @property
    def passthrough(self) -> bool:
        return self.rate == float("inf") and self.latency == 0


_STOP = object()


class ShapedLink:
    """The sending side of a shaped connection.

    `send` blocks for the frame's serialization time at the shaped rate,
    then hands it to a delay line that writes it to the socket once the
    added latency has passed. Per-frame transfer time runs from the call to
    `send` until the socket write completes.
    """

    def __init__(self, sock: socket.socket, shape: LinkShape):
        self.sock = sock
        self.shape = shape
        self.transfer_ms: List[float] = []
        self._error: Optional[BaseException] = None
        self._bucket: Optional[TokenBucket] = None
        self._line: Optional[queue.Queue] = None
        self._thread: Optional[threading.Thread] = None
        if not shape.passthrough:
            if shape.rate != float("inf"):
                self._bucket = TokenBucket(shape.rate / 8)
            self._line = queue.Queue()
            self._thread = threading.Thread(target=self._deliver, daemon=True)
            self._thread.start()

    def _deliver(self) -> None:
        assert self._line is not None
        while True:
            item = self._line.get()
            if item is _STOP:
                return
            due, start, data, record = item
            delay = due - time.monotonic()
            if delay > 0:
                time.sleep(delay)
            try:
                _sendall(self.sock, data)
            except ConnectionLost as exc:
                self._error = exc
                return
            if record:
                self.transfer_ms.append((time.monotonic() - start) * 1000)

    def send(self, data: bytes, record: bool = True) -> None:
        """Send one frame. Only recorded frames count towards `transfer_ms`."""
        if self._error is not None:
            raise self._error
        start = time.monotonic()
        if self._line is None:
            _sendall(self.sock, data)
            if record:
                self.transfer_ms.append((time.monotonic() - start) * 1000)
            return
        if self._bucket is not None:
            wait = self._bucket.consume(len(data))
            if wait > 0:
                time.sleep(wait)
        due = time.monotonic() + self.shape.latency / 1000
        self._line.put((due, start, data, record))

    def close(self) -> None:
        """Wait for frames still in flight."""
        if self._thread is not None:
            assert self._line is not None
            self._line.put(_STOP)
            self._thread.join()
            self._thread = None
        if self._error is not None:
            raise self._error


def shape_link(sock: socket.socket, rate: float, latency: float) -> ShapedLink:
    """Shape the sending side of `sock` to `rate` bits/s plus `latency` ms."""
    assert rate > 0
    return ShapedLink(sock, LinkShape(rate, latency))


# Roles.


@dataclass(frozen=True)
class WireConfig:
    """What the source sends. Every role must agree on it."""

    batch: int = 4
    """Requests per step (B)."""

    micro_batches: int = 1
    hidden_dim: int = 4096
    steps: int = 1
    compression: bool = False
    split: bool = True
    backend: str = "zstd"
    dist: str = "gaussian"
    seed: int = 0

    packed_tree: int = 0
    """When positive, send packed SD batches with up to this many retained
    candidates per request instead of plain activations."""

    def __post_init__(self) -> None:
        assert self.micro_batches >= 1 and self.batch % self.micro_batches == 0
        assert self.steps >= 1 and self.hidden_dim >= 1

    @property
    def micro_batch_size(self) -> int:
        return self.batch // self.micro_batches

    @property
    def frame_bytes(self) -> int:
        return self.micro_batch_size * self.hidden_dim * 2


@dataclass(frozen=True)
class StageConfig:
    per_block_ms: float = 0.0
    """Synthetic compute per block per request."""

    blocks: int = 1
    slots: int = 2

    def compute_ms(self, b: int) -> float:
        return self.per_block_ms * self.blocks * b


def _flags(cfg: WireConfig) -> int:
    if not cfg.compression:
        return 0
    return FLAG_COMPRESSED | (FLAG_SPLIT if cfg.split else 0)


def _encode_payload(raw: bytes, cfg: WireConfig) -> bytes:
    if not cfg.compression:
        return raw
    return codec.compress(raw, cfg.backend, cfg.split).encode()


def _decode_payload(frame: Frame) -> bytes:
    if not frame.compressed:
        return frame.payload
    try:
        return codec.decompress(codec.CodecContainer.decode(frame.payload))
    except BeeplanError as exc:
        raise FrameCorrupt(
            f"step {frame.batch_id} micro-batch {frame.micro_index}: {exc}"
        ) from exc


def _payloads(cfg: WireConfig) -> List[List[bytes]]:
    """Raw payloads for every step and micro-batch, made up front so that
    generating them does not count against the run."""
    M, b = cfg.micro_batches, cfg.micro_batch_size
    out = []
    for step in range(cfg.steps):
        row = []
        for k in range(M):
            seed = cfg.seed + step * M + k
            if cfg.packed_tree:
                rng = np.random.default_rng(seed)
                counts = rng.integers(1, cfg.packed_tree + 1, size=b)
                reqs = [
                    rng.standard_normal((int(n), cfg.hidden_dim)).astype(np.float16)
                    for n in counts
                ]
                row.append(encode_packed(pack([list(r) for r in reqs], cfg.hidden_dim)))
            else:
                row.append(
                    codec.generate_activations(b * cfg.hidden_dim, cfg.dist, seed)
                )
        out.append(row)
    return out


def _connect(addr: Address) -> socket.socket:
    try:
        sock = socket.create_connection(addr, timeout=TIMEOUT_S)
    except OSError as exc:
        raise ConnectionLost(f"cannot connect to {addr[0]}:{addr[1]}: {exc}") from exc
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    return sock


def listen(addr: Address) -> socket.socket:
    server = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    server.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    server.bind(addr)
    server.listen(1)
    server.settimeout(TIMEOUT_S)
    return server


def _accept(server: socket.socket) -> socket.socket:
    try:
        conn, _ = server.accept()
    except OSError as exc:
        raise ConnectionLost(f"no upstream connection: {exc}") from exc
    conn.settimeout(TIMEOUT_S)
    conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    return conn


def run_source(connect: Address, cfg: WireConfig, shape: LinkShape) -> RunMetrics:
    """Send every step and wait for the sink's acks. The metrics cover the
    first hop and the end-to-end run."""
    payloads = _payloads(cfg)
    sent = hashlib.sha256()
    kind = MsgType.PACKED_SD if cfg.packed_tree else MsgType.ACTIVATIONS
    flags = 0 if cfg.packed_tree else _flags(cfg)
    codec_ms = 0.0

    sock = _connect(connect)
    link = ShapedLink(sock, shape)
    digest = b""
    try:
        start = time.monotonic()
        for step, row in enumerate(payloads):
            for k, raw in enumerate(row):
                t0 = time.perf_counter()
                body = raw if cfg.packed_tree else _encode_payload(raw, cfg)
                codec_ms += (time.perf_counter() - t0) * 1000
                sent.update(raw)
                link.send(Frame(kind, step, k, flags, body).encode())
                log.debug("source sent step %d micro-batch %d", step, k)
            ack = read_frame(sock)
            if ack is None or ack.msg_type != MsgType.ACK or ack.batch_id != step:
                raise FrameCorrupt(f"expected the ack of step {step}, got {ack}")
        link.send(Frame(MsgType.SHUTDOWN, cfg.steps).encode(), record=False)
        final = read_frame(sock)
        if final is None or final.msg_type != MsgType.ACK:
            raise ConnectionLost("pipeline closed without a final ack")
        completion = (time.monotonic() - start) * 1000
        digest = final.payload
        link.close()
    finally:
        sock.close()

    mean = sum(link.transfer_ms) / len(link.transfer_ms)
    return RunMetrics(
        throughput=cfg.batch * cfg.steps * 1000 / completion,
        completion_ms=completion,
        stage_busy_ms=[],
        stage_idle_ms=[],
        hop_transfer_ms=[mean],
        hop_transfer_total_ms=[sum(link.transfer_ms)],
        hop_codec_ms=[codec_ms],
        extra={"lossless": digest == sent.digest(), "digest": sent.hexdigest()},
    )


class _Worker(threading.Thread):
    """A thread that keeps its exception for the joiner."""

    def __init__(self, name: str, target: Callable[[], None]):
        super().__init__(name=name, daemon=True)
        self._target_fn = target
        self.error: Optional[BaseException] = None

    def run(self) -> None:
        try:
            self._target_fn()
        except Exception as exc:
            self.error = exc


def _join_all(workers: Sequence[_Worker]) -> None:
    """Wait for every worker; raise the first error as soon as it appears.
    Workers blocked forever by a failed peer are daemons and are left behind."""
    pending = list(workers)
    while pending:
        for w in pending:
            w.join(0.05)
            if w.error is not None:
                raise w.error
        pending = [w for w in pending if w.is_alive()]


def run_stage(
    server: socket.socket,
    connect: Address,
    stage: StageConfig,
    cfg: WireConfig,
    shape: LinkShape,
) -> RunMetrics:
    """Serve one pipeline stage: accept from upstream on `server`, forward to
    `connect` over a shaped link, and relay acks back."""
    up = _accept(server)
    down = _connect(connect)
    link = ShapedLink(down, shape)
    inbox: queue.Queue = queue.Queue(maxsize=stage.slots)
    outbox: queue.Queue = queue.Queue(maxsize=stage.slots)
    up_lock = threading.Lock()
    busy = [0.0]
    encode_ms = [0.0]
    decode_ms = [0.0]
    delay_s = stage.compute_ms(cfg.micro_batch_size) / 1000

    def receive() -> None:
        while True:
            frame = read_frame(up)
            if frame is None:
                raise ConnectionLost("upstream closed before shutdown")
            if frame.msg_type == MsgType.ACK:
                raise FrameCorrupt("ack received from upstream")
            inbox.put(frame)
            if frame.msg_type == MsgType.SHUTDOWN:
                return

    def compute() -> None:
        while True:
            frame = inbox.get()
            if frame.msg_type == MsgType.SHUTDOWN:
                outbox.put(frame)
                return
            t0 = time.perf_counter()
            raw = _decode_payload(frame)
            t1 = time.perf_counter()
            time.sleep(delay_s)
            t2 = time.perf_counter()
            if frame.msg_type == MsgType.PACKED_SD:
                body = raw
            else:
                body = _encode_payload(raw, cfg)
            t3 = time.perf_counter()
            decode_ms[0] += (t1 - t0) * 1000
            busy[0] += (t2 - t1) * 1000
            encode_ms[0] += (t3 - t2) * 1000
            outbox.put(
                Frame(
                    frame.msg_type, frame.batch_id, frame.micro_index, frame.flags, body
                )
            )

    def send() -> None:
        while True:
            frame = outbox.get()
            link.send(frame.encode(), record=frame.msg_type != MsgType.SHUTDOWN)
            log.debug(
                "stage forwarded %s step %d micro-batch %d",
                frame.msg_type.name,
                frame.batch_id,
                frame.micro_index,
            )
            if frame.msg_type == MsgType.SHUTDOWN:
                return

    def relay() -> None:
        while True:
            frame = read_frame(down)
            if frame is None:
                return
            if frame.msg_type != MsgType.ACK:
                raise FrameCorrupt(f"{frame.msg_type.name} received from downstream")
            with up_lock:
                _sendall(up, frame.encode())

    workers = [
        _Worker(name, fn)
        for name, fn in (
            ("receive", receive),
            ("compute", compute),
            ("send", send),
            ("relay", relay),
        )
    ]
    try:
        for w in workers:
            w.start()
        # The relay ends last, when the sink hangs up after its final ack.
        _join_all(workers)
        link.close()
    finally:
        down.close()
        up.close()

    n = len(link.transfer_ms)
    return RunMetrics(
        throughput=0.0,
        completion_ms=0.0,
        stage_busy_ms=[busy[0]],
        stage_idle_ms=[],
        hop_transfer_ms=[sum(link.transfer_ms) / n] if n else [0.0],
        hop_transfer_total_ms=[sum(link.transfer_ms)],
        hop_codec_ms=[encode_ms[0]],
        extra={"decode_ms": decode_ms[0]},
    )


def run_sink(server: socket.socket, cfg: WireConfig) -> RunMetrics:
    """Reassemble every step, ack it, and answer shutdown with the digest of
    everything received."""
    conn = _accept(server)
    received = hashlib.sha256()
    decode_ms = 0.0
    counts: Dict[int, int] = {}
    try:
        while True:
            frame = read_frame(conn)
            if frame is None:
                raise ConnectionLost("upstream closed before shutdown")
            if frame.msg_type == MsgType.SHUTDOWN:
                final = Frame(MsgType.ACK, frame.batch_id, 0, 0, received.digest())
                _sendall(conn, final.encode())
                break
            t0 = time.perf_counter()
            if frame.msg_type == MsgType.PACKED_SD:
                decode_packed(frame.payload)
                raw = frame.payload
            elif frame.msg_type == MsgType.ACTIVATIONS:
                raw = _decode_payload(frame)
            else:
                raise FrameCorrupt(f"sink cannot handle {frame.msg_type.name}")
            decode_ms += (time.perf_counter() - t0) * 1000
            received.update(raw)
            step = frame.batch_id
            counts[step] = counts.get(step, 0) + 1
            log.debug("sink got step %d micro-batch %d", step, frame.micro_index)
            if counts[step] == cfg.micro_batches:
                ack = Frame(MsgType.ACK, step, 0, 0, received.digest())
                _sendall(conn, ack.encode())
    finally:
        conn.close()
    return RunMetrics(
        throughput=0.0,
        completion_ms=0.0,
        stage_busy_ms=[],
        stage_idle_ms=[],
        hop_transfer_ms=[],
        hop_transfer_total_ms=[],
        hop_codec_ms=[],
        extra={"decode_ms": decode_ms, "digest": received.hexdigest()},
    )


def merge_metrics(
    source: RunMetrics, stages: Sequence[RunMetrics], sink: RunMetrics
) -> RunMetrics:
    """One view of a whole run. Hop h's codec time is the sender's encode
    plus the receiver's decode."""
    completion = source.completion_ms
    senders = [source, *stages]
    receivers = [*stages, sink]
    busy = [m.stage_busy_ms[0] for m in stages]
    return RunMetrics(
        throughput=source.throughput,
        completion_ms=completion,
        stage_busy_ms=busy,
        stage_idle_ms=[completion - b for b in busy],
        hop_transfer_ms=[m.hop_transfer_ms[0] for m in senders],
        hop_transfer_total_ms=[m.hop_transfer_total_ms[0] for m in senders],
        hop_codec_ms=[
            s.hop_codec_ms[0] + r.extra["decode_ms"] for s, r in zip(senders, receivers)
        ],
        extra={"lossless": source.extra["lossless"]},
    )


def run_loopback(
    stages: Sequence[StageConfig], cfg: WireConfig, shape: LinkShape
) -> RunMetrics:
    """Run source, stages, and sink as threads on 127.0.0.1, every hop
    shaped the same way."""
    servers = [listen(("127.0.0.1", 0)) for _ in range(len(stages) + 1)]
    ports = [s.getsockname()[1] for s in servers]
    results: Dict[str, Any] = {}

    def sink_job() -> None:
        results["sink"] = run_sink(servers[-1], cfg)

    def stage_job(i: int) -> Callable[[], None]:
        def job() -> None:
            results[i] = run_stage(
                servers[i], ("127.0.0.1", ports[i + 1]), stages[i], cfg, shape
            )

        return job

    workers = [_Worker("sink", sink_job)] + [
        _Worker(f"stage{i}", stage_job(i)) for i in reversed(range(len(stages)))
    ]
    try:
        for w in workers:
            w.start()
        source = run_source(("127.0.0.1", ports[0]), cfg, shape)
        _join_all(workers)
    finally:
        for s in servers:
            s.close()
    merged = merge_metrics(
        source, [results[i] for i in range(len(stages))], results["sink"]
    )
    log.info(
        "loopback run: %d stages, M=%d, %.1f ms",
        len(stages),
        cfg.micro_batches,
        merged.completion_ms,
    )
    return merged


def run_wire(
    role: str,
    cfg: WireConfig,
    shape: LinkShape,
    listen_addr: Optional[Address] = None,
    connect_addr: Optional[Address] = None,
    stage: StageConfig = StageConfig(),
) -> RunMetrics:
    """Play one role of a pipeline spread over separate processes."""
    if role == "source":
        assert connect_addr is not None
        return run_source(connect_addr, cfg, shape)
    assert listen_addr is not None
    server = listen(listen_addr)
    try:
        if role == "stage":
            assert connect_addr is not None
            return run_stage(server, connect_addr, stage, cfg, shape)
        assert role == "sink", f"unknown role {role!r}"
        return run_sink(server, cfg)
    finally:
        server.close()
