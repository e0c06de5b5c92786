"""Eager dynamic batching for streaming inference.

Requests are audio chunks from concurrent streams.  Whenever the engine is
idle and work is queued, a batch is formed at once from whatever is
waiting, taking at most one chunk per stream (the oldest) so every stream's
chunks run in order.  There is no waiting for a fuller batch.

Two drivers share the batch-forming rule: a deterministic virtual-time
simulation (``simulate``) and a threaded wall-clock scheduler
(``BatchDispatcher``) in front of a real engine.  A small socket protocol
and load generator sit on top.
"""

from __future__ import annotations

import itertools
import json
import math
import socket
import socketserver
import struct
import threading
import time
from collections import Counter, deque
from concurrent.futures import Future
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ds2.ctc import log_softmax
from ds2.decoder import DecoderConfig, beam_search, greedy_decode

DEFAULT_MAX_BATCH = 32


class QueueFullError(RuntimeError):
    """Raised by ``submit`` when the queue bound is reached (backpressure)."""


# --------------------------------------------------------------------------
# requests, batches, statistics


@dataclass
class Request:
    stream: int
    frames: int  # chunk length; the payload lives in ``data`` when real
    arrival: float
    data: np.ndarray | None = field(default=None, repr=False)
    final: bool = False
    seq: int = 0
    handle: Future | None = field(default=None, repr=False, compare=False)
    start: float = math.nan
    done: float = math.nan

    @property
    def latency(self) -> float:
        return self.done - self.arrival


@dataclass
class Batch:
    items: list
    formed: float
    finished: float = math.nan

    @property
    def size(self) -> int:
        return len(self.items)

    @property
    def work(self) -> int:
        return sum(r.frames for r in self.items)


class LatencyStats:
    """Reservoir of completed-request latencies (uniform sample once full)."""

    def __init__(self, capacity: int = 100_000, seed: int = 0):
        self.capacity = capacity
        self.samples: list[float] = []
        self.count = 0
        self._rng = np.random.default_rng(seed)

    def add(self, x: float):
        self.count += 1
        if len(self.samples) < self.capacity:
            self.samples.append(x)
        else:
            j = int(self._rng.integers(self.count))
            if j < self.capacity:
                self.samples[j] = x

    def percentile(self, q: float) -> float:
        if not self.samples:
            return math.nan
        return float(np.percentile(self.samples, q))

    @property
    def median(self) -> float:
        return self.percentile(50)

    @property
    def p98(self) -> float:
        return self.percentile(98)


def take_batch(queue: deque, max_batch: int) -> list:
    """Remove and return the oldest chunk of each waiting stream, FIFO, at most ``max_batch``."""
    picked, streams, keep = [], set(), deque()
    while queue and len(picked) < max_batch:
        r = queue.popleft()
        if r.stream in streams:
            keep.append(r)
        else:
            streams.add(r.stream)
            picked.append(r)
    keep.extend(queue)
    queue.clear()
    queue.extend(keep)
    return picked


# --------------------------------------------------------------------------
# virtual time


@dataclass(frozen=True)
class CostModel:
    """Engine time for one batch: ``overhead + per_frame * max_frames + per_item * size``."""

    overhead: float = 0.007
    per_frame: float = 0.0005
    per_item: float = 0.0

    def batch_time(self, items) -> float:
        return self.overhead + self.per_frame * max(r.frames for r in items) + self.per_item * len(items)


def stream_trace(n_streams: int, duration: float, chunk_frames: int = 10, period: float = 0.1,
                 seed: int = 0, poisson: bool = True) -> list[Request]:
    """Arrivals from ``n_streams`` users each sending a chunk every ``period`` on average.

    With ``poisson`` the gaps are exponential; otherwise periodic with a
    random phase per stream.
    """
    rng = np.random.default_rng(seed)
    out = []
    for s in range(n_streams):
        t = float(rng.uniform(0, period))
        seq = 0
        while t < duration:
            out.append(Request(s, chunk_frames, t, seq=seq))
            seq += 1
            t += float(rng.exponential(period)) if poisson else period
    out.sort(key=lambda r: (r.arrival, r.stream))
    return out


@dataclass
class SimResult:
    batches: list
    requests: list
    stats: LatencyStats

    def histogram(self) -> Counter:
        return Counter(b.size for b in self.batches)

    @property
    def mean_batch(self) -> float:
        return float(np.mean([b.size for b in self.batches]))

    def work_fraction(self, min_size: int = 2) -> float:
        total = sum(b.work for b in self.batches)
        return sum(b.work for b in self.batches if b.size >= min_size) / total


def simulate(trace: Sequence[Request], cost: CostModel = CostModel(), max_batch: int = DEFAULT_MAX_BATCH) -> SimResult:
    """Single-threaded event loop; deterministic for a given trace."""
    if max_batch < 1:
        raise ValueError("max_batch must be >= 1")
    reqs = [Request(r.stream, r.frames, r.arrival, seq=r.seq) for r in trace]
    reqs.sort(key=lambda r: (r.arrival, r.stream, r.seq))
    queue: deque = deque()
    batches = []
    stats = LatencyStats()
    clock, i, n = 0.0, 0, len(reqs)
    while i < n or queue:
        if not queue:
            clock = max(clock, reqs[i].arrival)
        while i < n and reqs[i].arrival <= clock:
            queue.append(reqs[i])
            i += 1
        items = take_batch(queue, max_batch)
        b = Batch(items, clock)
        clock += cost.batch_time(items)
        b.finished = clock
        for r in items:
            r.start, r.done = b.formed, clock
            stats.add(r.latency)
        batches.append(b)
    return SimResult(batches, reqs, stats)


def load_sweep(loads: Sequence[int], duration: float = 60.0, cost: CostModel = CostModel(),
               max_batch: int = DEFAULT_MAX_BATCH, seed: int = 0, **trace_kw):
    """One simulation per load level, batched and serial on the same trace."""
    rows = []
    for load in loads:
        trace = stream_trace(load, duration, seed=seed, **trace_kw)
        rows.append((load, simulate(trace, cost, max_batch), simulate(trace, cost, 1)))
    return rows


def sweep_tsv(rows) -> str:
    lines = ["load\tmode\tmedian_ms\tp98_ms\tmean_batch\twork_in_batches_ge2"]
    for load, batched, serial in rows:
        for mode, res in (("batched", batched), ("serial", serial)):
            lines.append(f"{load}\t{mode}\t{res.stats.median * 1e3:.3f}\t{res.stats.p98 * 1e3:.3f}\t"
                         f"{res.mean_batch:.3f}\t{res.work_fraction():.4f}")
    lines.append("hist\tload\tbatch_size\tcount\tfraction")
    for load, batched, _ in rows:
        h = batched.histogram()
        total = sum(h.values())
        for size in sorted(h):
            lines.append(f"hist\t{load}\t{size}\t{h[size]}\t{h[size] / total:.4f}")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# real engine


def stream_forward(net, state, chunk, final: bool = False) -> np.ndarray:
    """Log-probability frames that ``chunk`` makes available for one stream."""
    logits = net.stream_step(state, chunk, final)
    if not len(logits):
        return logits
    return log_softmax(logits)


class StreamingEngine:
    """Per-stream state over a unidirectional network."""

    def __init__(self, net):
        if net.bidirectional:
            raise ValueError("streaming inference needs a unidirectional model")
        self.net = net
        self.states: dict = {}
        self.lock = threading.Lock()

    def open(self, stream):
        self.states[stream] = self.net.stream_start()

    def close(self, stream):
        self.states.pop(stream, None)

    def process(self, items: Sequence[Request]) -> list[np.ndarray]:
        with self.lock:
            out = []
            for r in items:
                if r.stream not in self.states:
                    self.open(r.stream)
                data = r.data if r.data is not None else np.zeros((0, self.net.input_dim))
                out.append(stream_forward(self.net, self.states[r.stream], data, r.final))
            return out


def calibrate(engine: StreamingEngine, frames=(1, 10, 40), repeats: int = 5) -> CostModel:
    """Least-squares fit of overhead and per-frame cost from timed single-chunk runs."""
    rows, ts = [], []
    for f in frames:
        data = np.zeros((f, engine.net.input_dim))
        for k in range(repeats):
            sid = ("calibrate", f, k)
            engine.open(sid)
            t0 = time.perf_counter()
            engine.process([Request(sid, f, 0.0, data)])
            ts.append(time.perf_counter() - t0)
            rows.append((1.0, f))
            engine.close(sid)
    (a, b), *_ = np.linalg.lstsq(np.array(rows), np.array(ts), rcond=None)
    return CostModel(max(float(a), 0.0), max(float(b), 0.0))


class BatchDispatcher:
    """Wall-clock eager batching in front of ``engine.process``."""

    def __init__(self, engine, max_batch: int = DEFAULT_MAX_BATCH, max_queue: int = 4096):
        if max_batch < 1:
            raise ValueError("max_batch must be >= 1")
        self.engine = engine
        self.max_batch = max_batch
        self.max_queue = max_queue
        self.queue: deque = deque()
        self.cond = threading.Condition()
        self.batches: list[Batch] = []
        self.stats = LatencyStats()
        self._seq = itertools.count()
        self._running = False
        self._thread: threading.Thread | None = None

    def start(self):
        self._running = True
        self._thread = threading.Thread(target=self._loop, daemon=True, name="dispatch")
        self._thread.start()
        return self

    def stop(self):
        with self.cond:
            self._running = False
            self.cond.notify_all()
        if self._thread is not None:
            self._thread.join()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()

    def submit(self, stream, data, final: bool = False) -> Future:
        if not self._running:
            raise RuntimeError("dispatcher is not running")
        data = np.asarray(data, dtype=np.float64)
        fut: Future = Future()
        r = Request(stream, len(data), time.perf_counter(), data, final, next(self._seq), fut)
        with self.cond:
            if len(self.queue) >= self.max_queue:
                raise QueueFullError(f"queue holds {len(self.queue)} requests (bound {self.max_queue})")
            self.queue.append(r)
            self.cond.notify()
        return fut

    def _loop(self):
        while True:
            with self.cond:
                while self._running and not self.queue:
                    self.cond.wait()
                if not self.queue:
                    return
                items = take_batch(self.queue, self.max_batch)
            b = Batch(items, time.perf_counter())
            try:
                outs = self.engine.process(items)
            except Exception as e:  # deliver the failure to every waiter
                for r in items:
                    r.handle.set_exception(e)
                continue
            b.finished = time.perf_counter()
            self.batches.append(b)
            for r, out in zip(items, outs):
                r.start, r.done = b.formed, b.finished
                self.stats.add(r.latency)
                r.handle.set_result(out)


# --------------------------------------------------------------------------
# socket protocol: [u32 length][u8 kind][payload], length counts the payload


START_STREAM, AUDIO_CHUNK, END_STREAM, TRANSCRIPT = 1, 2, 3, 4
KINDS = {START_STREAM: "START_STREAM", AUDIO_CHUNK: "AUDIO_CHUNK", END_STREAM: "END_STREAM", TRANSCRIPT: "TRANSCRIPT"}
_HEAD = struct.Struct("<IB")
MAX_MESSAGE = 64 << 20


class ProtocolError(RuntimeError):
    pass


def pack_message(kind: int, payload: bytes = b"") -> bytes:
    if kind not in KINDS:
        raise ProtocolError(f"unknown message kind {kind}")
    return _HEAD.pack(len(payload), kind) + payload


def _recv_exact(sock, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        part = sock.recv(n - len(buf))
        if not part:
            raise ConnectionError("peer closed the connection")
        buf += part
    return bytes(buf)


def recv_message(sock) -> tuple[int, bytes]:
    n, kind = _HEAD.unpack(_recv_exact(sock, _HEAD.size))
    if kind not in KINDS:
        raise ProtocolError(f"unknown message kind {kind}")
    if n > MAX_MESSAGE:
        raise ProtocolError(f"message of {n} bytes exceeds the {MAX_MESSAGE} byte limit")
    return kind, _recv_exact(sock, n)


def encode_frames(frames: np.ndarray) -> bytes:
    return np.ascontiguousarray(frames, dtype="<f4").tobytes()


def decode_frames(payload: bytes, dim: int) -> np.ndarray:
    if len(payload) % (4 * dim):
        raise ProtocolError(f"chunk of {len(payload)} bytes is not a whole number of {dim}-bin frames")
    return np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(-1, dim)


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        srv = self.server
        sock = self.request
        stream = None
        frames = []
        try:
            while True:
                kind, payload = recv_message(sock)
                if kind == START_STREAM:
                    cfg = json.loads(payload.decode("utf-8") or "{}")
                    stream = (cfg.get("stream_id", ""), next(srv.ids))
                    srv.engine.open(stream)
                    frames = []
                elif kind == AUDIO_CHUNK:
                    if stream is None:
                        raise ProtocolError("AUDIO_CHUNK before START_STREAM")
                    out = srv.dispatcher.submit(stream, decode_frames(payload, srv.engine.net.input_dim)).result()
                    frames.append(out)
                    sock.sendall(pack_message(TRANSCRIPT, srv.partial(frames).encode("utf-8")))
                elif kind == END_STREAM:
                    if stream is None:
                        raise ProtocolError("END_STREAM before START_STREAM")
                    frames.append(srv.dispatcher.submit(stream, np.zeros((0, srv.engine.net.input_dim)), True).result())
                    sock.sendall(pack_message(TRANSCRIPT, srv.final(frames).encode("utf-8")))
                    srv.engine.close(stream)
                    stream = None
                else:
                    raise ProtocolError(f"client may not send {KINDS[kind]}")
        except (ConnectionError, OSError, ProtocolError, ValueError):
            pass
        finally:
            if stream is not None:
                srv.engine.close(stream)


class InferenceServer(socketserver.ThreadingTCPServer):
    """TCP front end: one connection carries one stream at a time."""

    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, addr, net, symbols: Sequence[str], max_batch: int = DEFAULT_MAX_BATCH,
                 decoder: DecoderConfig | None = None, lm=None):
        super().__init__(addr, _Handler)
        self.engine = StreamingEngine(net)
        self.dispatcher = BatchDispatcher(self.engine, max_batch).start()
        self.symbols = list(symbols)
        self.decoder = decoder or DecoderConfig(beam_width=32, prune_p=0.99, max_symbols=40)
        self.lm = lm
        self.ids = itertools.count()

    def _lp(self, frames):
        return np.concatenate([f for f in frames if len(f)] or [np.zeros((0, self.engine.net.num_outputs))])

    def partial(self, frames) -> str:
        lp = self._lp(frames)
        return "".join(self.symbols[i] for i in greedy_decode(lp)) if len(lp) else ""

    def final(self, frames) -> str:
        lp = self._lp(frames)
        if not len(lp):
            return ""
        return beam_search(lp, self.decoder, lm=self.lm, symbols=self.symbols).text

    def server_close(self):
        self.dispatcher.stop()
        super().server_close()


class StreamClient:
    def __init__(self, host: str, port: int, timeout: float = 30.0):
        self.sock = socket.create_connection((host, port), timeout=timeout)

    def start(self, **cfg):
        self.sock.sendall(pack_message(START_STREAM, json.dumps(cfg).encode("utf-8")))

    def send_chunk(self, frames) -> str:
        self.sock.sendall(pack_message(AUDIO_CHUNK, encode_frames(frames)))
        return self._transcript()

    def end(self) -> str:
        self.sock.sendall(pack_message(END_STREAM))
        return self._transcript()

    def _transcript(self) -> str:
        kind, payload = recv_message(self.sock)
        if kind != TRANSCRIPT:
            raise ProtocolError(f"expected TRANSCRIPT, got {KINDS[kind]}")
        return payload.decode("utf-8")

    def close(self):
        self.sock.close()


def socket_load(host: str, port: int, streams: int, chunks: int, chunk_frames: int, dim: int,
                period: float = 0.0, seed: int = 0) -> LatencyStats:
    """``streams`` concurrent clients, each sending ``chunks`` random chunks; round-trip latencies."""
    stats = LatencyStats()
    lock = threading.Lock()
    errors = []

    def client(k):
        rng = np.random.default_rng([seed, k])
        try:
            c = StreamClient(host, port)
            c.start(stream_id=f"load{k}")
            for _ in range(chunks):
                t0 = time.perf_counter()
                c.send_chunk(rng.normal(size=(chunk_frames, dim)))
                dt = time.perf_counter() - t0
                with lock:
                    stats.add(dt)
                if period:
                    time.sleep(max(0.0, period - dt))
            c.end()
            c.close()
        except Exception as e:  # reported after join
            errors.append(e)

    threads = [threading.Thread(target=client, args=(k,)) for k in range(streams)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        raise errors[0]
    return stats
