import socket
import threading
import time

import pytest

from beeplan.errors import ConnectionLost, FrameCorrupt
from beeplan.wire import (
    HEADER,
    Frame,
    LinkShape,
    MsgType,
    ShapedLink,
    StageConfig,
    TokenBucket,
    WireConfig,
    read_frame,
    run_loopback,
    run_wire,
    shape_link,
)

MBPS = 1_000_000

# One request of this width is a 416400-byte frame: 166.56 ms at 20 Mbps.
WIDE = 208_200


class FakeClock:
    def __init__(self):
        self.now = 0.0

    def __call__(self):
        return self.now


def test_frame_header():
    frame = Frame(MsgType.ACTIVATIONS, 7, 3, 0x03, b"abc")
    buf = frame.encode()
    assert HEADER.size == 20
    assert buf[:4] == b"BBF1"
    assert len(buf) == 23
    assert Frame.decode(buf) == frame
    assert Frame.decode(buf).compressed


@pytest.mark.parametrize(
    "corrupt",
    [
        lambda b: b"XXXX" + b[4:],
        lambda b: b[:4] + bytes([9]) + b[5:],
        lambda b: b[:15] + bytes([0x80]) + b[16:],
        lambda b: b[:-1],
        lambda b: b[:10],
    ],
)
def test_corrupt_frames(corrupt):
    buf = Frame(MsgType.ACK, 1, 0, 0, b"digest").encode()
    with pytest.raises(FrameCorrupt):
        Frame.decode(corrupt(buf))


def test_read_frame_over_socket():
    a, b = socket.socketpair()
    with a, b:
        frames = [
            Frame(MsgType.ACTIVATIONS, 0, k, 0, bytes([k]) * 100) for k in range(3)
        ]
        a.sendall(b"".join(f.encode() for f in frames))
        a.sendall(Frame(MsgType.SHUTDOWN, 1).encode())
        a.shutdown(socket.SHUT_WR)
        assert [read_frame(b) for _ in range(3)] == frames
        assert read_frame(b) == Frame(MsgType.SHUTDOWN, 1)
        # A clean end of stream between frames.
        assert read_frame(b) is None


def test_read_frame_truncated():
    a, b = socket.socketpair()
    with a, b:
        a.sendall(Frame(MsgType.ACTIVATIONS, 0, 0, 0, b"x" * 50).encode()[:40])
        a.shutdown(socket.SHUT_WR)
        with pytest.raises(ConnectionLost):
            read_frame(b)


def test_token_bucket_debt():
    clock = FakeClock()
    bucket = TokenBucket(1000.0, clock=clock)
    assert bucket.consume(500) == pytest.approx(0.5)
    # Waiting out the debt brings the bucket back to zero.
    clock.now = 0.5
    assert bucket.consume(500) == pytest.approx(0.5)
    clock.now = 2.0
    assert bucket.consume(0) == 0.0


def test_token_bucket_burst():
    clock = FakeClock()
    bucket = TokenBucket(1000.0, capacity=300.0, start_full=True, clock=clock)
    assert bucket.consume(200) == 0.0
    assert bucket.consume(200) == pytest.approx(0.1)
    # Credit never grows past the capacity.
    clock.now = 100.0
    assert bucket.consume(400) == pytest.approx(0.1)


def test_link_shape_parse():
    assert LinkShape.parse("20,5") == LinkShape(20 * MBPS, 5.0)
    assert LinkShape.parse("inf,0").passthrough
    with pytest.raises(ValueError):
        LinkShape.parse("20")


def drain(sock, n, out):
    got = 0
    while got < n:
        chunk = sock.recv(65536)
        if not chunk:
            break
        got += len(chunk)
    out.append(time.monotonic())


def test_shaped_rate():
    a, b = socket.socketpair()
    with a, b:
        done = []
        reader = threading.Thread(target=drain, args=(b, MBPS, done))
        reader.start()
        link = shape_link(a, 8 * MBPS, 0.0)
        link.send(bytes(MBPS))
        link.close()
        reader.join()
        # 1 MB at 8 Mbps is one second.
        assert link.transfer_ms[0] == pytest.approx(1000.0, rel=0.1)


def test_shaped_latency():
    a, b = socket.socketpair()
    with a, b:
        done = []
        reader = threading.Thread(target=drain, args=(b, 10, done))
        reader.start()
        link = ShapedLink(a, LinkShape(latency=50.0))
        start = time.monotonic()
        link.send(bytes(10))
        link.close()
        reader.join()
        assert (done[0] - start) * 1000 >= 50.0


def test_loopback_transfer_time():
    cfg = WireConfig(batch=1, hidden_dim=WIDE, steps=1)
    stages = [StageConfig(), StageConfig()]
    m = run_loopback(stages, cfg, LinkShape(20 * MBPS, 0.0))
    assert m.extra["lossless"]
    frame = HEADER.size + 2 * WIDE
    expect = frame / (20 * MBPS / 8) * 1000
    assert len(m.hop_transfer_ms) == 3
    for t in m.hop_transfer_ms:
        assert t == pytest.approx(expect, rel=0.1)


def test_loopback_compression_saves_transfer():
    shape = LinkShape(20 * MBPS, 0.0)
    plain = run_loopback([StageConfig()], WireConfig(batch=1, hidden_dim=WIDE), shape)
    packed = run_loopback(
        [StageConfig()],
        WireConfig(batch=1, hidden_dim=WIDE, compression=True, dist="gaussian"),
        shape,
    )
    assert packed.extra["lossless"]
    assert sum(packed.hop_transfer_total_ms) < sum(plain.hop_transfer_total_ms)
    assert all(ms > 0 for ms in packed.hop_codec_ms)


def test_loopback_micro_batching_overlaps():
    # A 250 KB step: 100 ms per hop and 100 ms of compute when sent whole.
    shape = LinkShape(20 * MBPS, 0.0)
    stage = [StageConfig(per_block_ms=25.0)]
    whole = run_loopback(stage, WireConfig(batch=4, hidden_dim=31_250), shape)
    split = run_loopback(
        stage, WireConfig(batch=4, micro_batches=4, hidden_dim=31_250), shape
    )
    assert whole.extra["lossless"] and split.extra["lossless"]
    assert split.completion_ms < whole.completion_ms
    assert whole.throughput == pytest.approx(4 * 1000 / whole.completion_ms)


def test_loopback_packed_sd_batches():
    cfg = WireConfig(batch=4, micro_batches=2, hidden_dim=64, steps=3, packed_tree=5)
    m = run_loopback([StageConfig(), StageConfig()], cfg, LinkShape())
    assert m.extra["lossless"]
    assert len(m.stage_busy_ms) == 2


def test_source_without_downstream():
    # A bound socket that never listens refuses connections.
    with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as held:
        held.bind(("127.0.0.1", 0))
        addr = held.getsockname()
        with pytest.raises(ConnectionLost):
            run_wire("source", WireConfig(batch=1), LinkShape(), connect_addr=addr)
