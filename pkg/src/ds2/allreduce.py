"""Chunked ring all-reduce over in-process or TCP transports.

The vector is split into ``N`` contiguous segments.  During reduce-scatter
step ``s`` rank ``r`` sends its running partial of segment ``(r - s) mod N``
to its successor, which adds its own contribution; after ``N - 1`` steps
rank ``r`` owns the complete sum of segment ``(r + 1) mod N``.  The
all-gather phase circulates the finished segments for another ``N - 1``
steps.  Segment ``j`` is therefore always accumulated in the cyclic rank
order ``j, j+1, ..., j-1``; :func:`reference_sum` reproduces that order in a
single process.
"""

from __future__ import annotations

import queue
import random
import socket
import struct
import threading
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

HEADER = struct.Struct("<IIQ")  # phase|step, segment, total vector length
DEFAULT_TIMEOUT = 30.0


class TransportTimeout(TimeoutError):
    pass


class ProtocolError(RuntimeError):
    pass


@dataclass(frozen=True)
class RingTopology:
    size: int

    def __post_init__(self):
        if self.size < 1:
            raise ValueError("ring needs at least one worker")

    def successor(self, rank: int) -> int:
        return (rank + 1) % self.size

    def predecessor(self, rank: int) -> int:
        return (rank - 1) % self.size

    def segments(self, length: int) -> list[slice]:
        """Contiguous partition of ``range(length)`` into ``size`` pieces."""
        base, extra = divmod(length, self.size)
        edges = [0]
        for j in range(self.size):
            edges.append(edges[-1] + base + (1 if j < extra else 0))
        return [slice(edges[j], edges[j + 1]) for j in range(self.size)]

    def accumulation_order(self, segment: int) -> list[int]:
        return [(segment + k) % self.size for k in range(self.size)]


# --------------------------------------------------------------------------
# transports


class Transport:
    """Reliable, ordered, message-preserving links from one rank to its peers."""

    rank: int

    def __init__(self):
        self.messages_sent = 0
        self.bytes_sent = 0
        self.payload_bytes_sent = 0

    def send(self, peer: int, data: bytes):
        raise NotImplementedError

    def recv(self, peer: int, timeout: float | None = None) -> bytes:
        raise NotImplementedError

    def reset_counters(self):
        self.messages_sent = self.bytes_sent = self.payload_bytes_sent = 0

    def close(self):
        pass


class InProcessHub:
    """Queues connecting ``n`` in-process endpoints, with optional random delays."""

    def __init__(self, n: int, max_delay: float = 0.0, seed: int | None = None):
        self.n = n
        self.max_delay = max_delay
        self._queues = {(a, b): queue.Queue() for a in range(n) for b in range(n) if a != b}
        self._rng = random.Random(seed)
        self._lock = threading.Lock()
        self.endpoints = [InProcessTransport(self, r) for r in range(n)]

    def _delay(self):
        if self.max_delay > 0:
            with self._lock:
                d = self._rng.uniform(0, self.max_delay)
            time.sleep(d)


class InProcessTransport(Transport):
    def __init__(self, hub: InProcessHub, rank: int):
        super().__init__()
        self.hub = hub
        self.rank = rank
        self.timeout = DEFAULT_TIMEOUT

    def send(self, peer, data):
        self.hub._delay()
        self.hub._queues[(self.rank, peer)].put(bytes(data))
        self.messages_sent += 1
        self.bytes_sent += len(data)

    def recv(self, peer, timeout=None):
        self.hub._delay()
        try:
            return self.hub._queues[(peer, self.rank)].get(timeout=timeout or self.timeout)
        except queue.Empty:
            raise TransportTimeout(f"rank {self.rank}: no message from {peer}") from None


def read_addresses(path) -> dict[int, tuple[str, int]]:
    """Parse ``rank host:port`` lines."""
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        rank, addr = line.split()
        host, port = addr.rsplit(":", 1)
        out[int(rank)] = (host, int(port))
    return out


def _recv_exact(sock, n):
    buf = bytearray()
    while len(buf) < n:
        try:
            chunk = sock.recv(n - len(buf))
        except socket.timeout:
            raise TransportTimeout("socket receive timed out") from None
        if not chunk:
            raise TransportTimeout("peer closed the connection")
        buf.extend(chunk)
    return bytes(buf)


class SocketTransport(Transport):
    """TCP links to the ring successor and from the predecessor.

    Frames are ``[u32 length][payload]`` little-endian.  A sender thread drains
    a bounded queue so a blocked successor cannot stall the receive path.
    """

    def __init__(self, rank: int, addresses: dict[int, tuple[str, int]], timeout: float = DEFAULT_TIMEOUT):
        super().__init__()
        self.rank = rank
        self.n = len(addresses)
        self.timeout = timeout
        self.succ = (rank + 1) % self.n
        self.pred = (rank - 1) % self.n
        self._out = None
        self._in = None
        self._listener = None
        self._sendq: queue.Queue = queue.Queue(maxsize=8)
        self._send_error: BaseException | None = None
        self._thread = None
        if self.n == 1:
            return
        host, port = addresses[rank]
        self._listener = socket.create_server((host, port), reuse_port=False)
        self._listener.settimeout(timeout)
        self._addresses = addresses

    def connect(self):
        """Connect to the successor and accept the predecessor (call on every rank)."""
        if self.n == 1:
            return self
        result = {}

        def accept():
            try:
                conn, _ = self._listener.accept()
                conn.settimeout(self.timeout)
                result["in"] = conn
            except OSError as e:  # pragma: no cover - surfaced below
                result["err"] = e

        t = threading.Thread(target=accept, daemon=True)
        t.start()
        deadline = time.monotonic() + self.timeout
        host, port = self._addresses[self.succ]
        while True:
            try:
                self._out = socket.create_connection((host, port), timeout=self.timeout)
                break
            except OSError:
                if time.monotonic() > deadline:
                    raise TransportTimeout(f"rank {self.rank}: cannot reach successor {host}:{port}")
                time.sleep(0.01)
        self._out.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        t.join(self.timeout)
        if "in" not in result:
            raise TransportTimeout(f"rank {self.rank}: predecessor never connected")
        self._in = result["in"]
        self._thread = threading.Thread(target=self._sender, daemon=True)
        self._thread.start()
        return self

    def _sender(self):
        while True:
            item = self._sendq.get()
            if item is None:
                return
            try:
                self._out.sendall(struct.pack("<I", len(item)) + item)
            except OSError as e:
                self._send_error = e
                return

    def send(self, peer, data):
        if peer != self.succ:
            raise ProtocolError(f"rank {self.rank} only links to its successor {self.succ}")
        if self._send_error is not None:
            raise TransportTimeout(f"send to {peer} failed: {self._send_error}")
        try:
            self._sendq.put(bytes(data), timeout=self.timeout)
        except queue.Full:
            raise TransportTimeout("send queue stayed full") from None
        self.messages_sent += 1
        self.bytes_sent += len(data) + 4

    def recv(self, peer, timeout=None):
        if peer != self.pred:
            raise ProtocolError(f"rank {self.rank} only receives from its predecessor {self.pred}")
        if timeout is not None:
            self._in.settimeout(timeout)
        (n,) = struct.unpack("<I", _recv_exact(self._in, 4))
        return _recv_exact(self._in, n)

    def close(self):
        if self._thread is not None:
            self._sendq.put(None)
            self._thread.join(1.0)
        for s in (self._out, self._in, self._listener):
            if s is not None:
                try:
                    s.close()
                except OSError:
                    pass


def free_ports(n: int, host="127.0.0.1") -> dict[int, tuple[str, int]]:
    socks = [socket.socket() for _ in range(n)]
    for s in socks:
        s.bind((host, 0))
    out = {r: (host, s.getsockname()[1]) for r, s in enumerate(socks)}
    for s in socks:
        s.close()
    return out


# --------------------------------------------------------------------------
# collective


def _pack(phase_step: int, segment: int, total: int, arr: np.ndarray) -> bytes:
    return HEADER.pack(phase_step, segment, total) + np.ascontiguousarray(arr, dtype="<f8").tobytes()


def _unpack(msg: bytes, expect_segment: int, total: int, seg_len: int) -> np.ndarray:
    if len(msg) < HEADER.size:
        raise ProtocolError("message shorter than header")
    _, segment, n = HEADER.unpack_from(msg)
    if n != total:
        raise ProtocolError(f"vector length mismatch: peer has {n}, local has {total}")
    if segment != expect_segment:
        raise ProtocolError(f"expected segment {expect_segment}, got {segment}")
    arr = np.frombuffer(msg, dtype="<f8", offset=HEADER.size)
    if arr.size != seg_len:
        raise ProtocolError("segment payload has the wrong size")
    return arr


def ring_allreduce(local, rank: int, topo: RingTopology, transport: Transport, timeout: float | None = None) -> np.ndarray:
    """Element-wise sum of ``local`` over all ranks, returned on every rank."""
    buf = np.array(local, dtype=np.float64, copy=True).reshape(-1)
    N = topo.size
    if N == 1:
        return buf
    total = buf.size
    segs = topo.segments(total)
    succ, pred = topo.successor(rank), topo.predecessor(rank)
    for s in range(N - 1):
        send_j = (rank - s) % N
        recv_j = (rank - s - 1) % N
        payload = _pack(s, send_j, total, buf[segs[send_j]])
        transport.send(succ, payload)
        transport.payload_bytes_sent += len(payload) - HEADER.size
        incoming = _unpack(transport.recv(pred, timeout), recv_j, total, segs[recv_j].stop - segs[recv_j].start)
        # running partial first, own contribution second
        buf[segs[recv_j]] = incoming + buf[segs[recv_j]]
    for s in range(N - 1):
        send_j = (rank + 1 - s) % N
        recv_j = (rank - s) % N
        payload = _pack(N + s, send_j, total, buf[segs[send_j]])
        transport.send(succ, payload)
        transport.payload_bytes_sent += len(payload) - HEADER.size
        incoming = _unpack(transport.recv(pred, timeout), recv_j, total, segs[recv_j].stop - segs[recv_j].start)
        buf[segs[recv_j]] = incoming
    return buf


def reference_sum(vectors) -> np.ndarray:
    """Single-process sum using the ring's per-segment accumulation order."""
    vectors = [np.asarray(v, dtype=np.float64).reshape(-1) for v in vectors]
    topo = RingTopology(len(vectors))
    out = np.empty_like(vectors[0])
    for j, sl in enumerate(topo.segments(out.size)):
        order = topo.accumulation_order(j)
        acc = vectors[order[0]][sl].copy()
        for r in order[1:]:
            acc = acc + vectors[r][sl]
        out[sl] = acc
    return out


def run_threads(fn, n: int, timeout: float = 120.0):
    """Run ``fn(rank)`` on ``n`` threads and return results in rank order; re-raise failures."""
    results: list = [None] * n
    errors: list = [None] * n

    def body(r):
        try:
            results[r] = fn(r)
        except BaseException as e:  # noqa: BLE001 - propagated to caller
            errors[r] = e

    threads = [threading.Thread(target=body, args=(r,), daemon=True) for r in range(n)]
    for t in threads:
        t.start()
    for t in threads:
        t.join(timeout)
        if t.is_alive():
            raise TransportTimeout("collective did not finish (possible deadlock)")
    for e in errors:
        if e is not None:
            raise e
    return results


def allreduce_inprocess(vectors, max_delay=0.0, seed=None):
    """Convenience: all-reduce a list of vectors over a fresh in-process hub."""
    n = len(vectors)
    hub = InProcessHub(n, max_delay=max_delay, seed=seed)
    topo = RingTopology(n)
    out = run_threads(lambda r: ring_allreduce(vectors[r], r, topo, hub.endpoints[r]), n)
    return out, hub


# --------------------------------------------------------------------------
# benchmark


def bench_allreduce(sizes, worker_counts, repeats: int = 3, transport: str = "inproc"):
    """Rows of (size, N, seconds per call, MB/s per worker, payload bytes per worker)."""
    rows = []
    for size in sizes:
        for n in worker_counts:
            vecs = [np.full(size, float(r + 1)) for r in range(n)]
            best = float("inf")
            sent = 0
            for _ in range(repeats):
                if transport == "socket" and n > 1:
                    addrs = free_ports(n)
                    eps = [SocketTransport(r, addrs) for r in range(n)]
                    run_threads(lambda r: eps[r].connect(), n)
                else:
                    eps = InProcessHub(n).endpoints
                topo = RingTopology(n)
                t0 = time.perf_counter()
                run_threads(lambda r: ring_allreduce(vecs[r], r, topo, eps[r]), n)
                best = min(best, time.perf_counter() - t0)
                sent = eps[0].payload_bytes_sent if n > 1 else 0
                for e in eps:
                    e.close()
            mbps = (sent / 1e6) / best if best > 0 else 0.0
            rows.append((size, n, best, mbps, sent))
    return rows


def expected_payload_bytes(size: int, n: int, rank: int = 0) -> int:
    """Payload bytes rank ``rank`` sends: every segment except one, twice over."""
    if n == 1:
        return 0
    segs = RingTopology(n).segments(size)
    lens = [s.stop - s.start for s in segs]
    rs = sum(lens[(rank - s) % n] for s in range(n - 1))
    ag = sum(lens[(rank + 1 - s) % n] for s in range(n - 1))
    return 8 * (rs + ag)


def write_bench_tsv(rows, path):
    with open(path, "w", encoding="utf-8") as f:
        f.write("size\tN\tseconds\tMB/s\tpayload_bytes\n")
        for size, n, sec, mbps, sent in rows:
            f.write(f"{size}\t{n}\t{sec:.6g}\t{mbps:.6g}\t{sent}\n")
