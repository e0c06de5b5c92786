import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ds2.allreduce import (
    HEADER,
    InProcessHub,
    ProtocolError,
    RingTopology,
    SocketTransport,
    TransportTimeout,
    allreduce_inprocess,
    bench_allreduce,
    expected_payload_bytes,
    free_ports,
    read_addresses,
    reference_sum,
    ring_allreduce,
    run_threads,
    write_bench_tsv,
)


class TestTopology:
    @given(st.integers(1, 9), st.integers(0, 50))
    def test_segments_partition(self, n, length):
        segs = RingTopology(n).segments(length)
        assert len(segs) == n
        assert segs[0].start == 0 and segs[-1].stop == length
        assert all(a.stop == b.start for a, b in zip(segs, segs[1:]))

    def test_single_cycle(self):
        topo = RingTopology(5)
        seen, r = [], 0
        for _ in range(5):
            seen.append(r)
            r = topo.successor(r)
        assert sorted(seen) == list(range(5)) and r == 0
        assert topo.predecessor(0) == 4


class TestRing:
    def test_pair(self):
        a, b = np.array([1.0, 2.0, 3.0]), np.array([10.0, 20.0, 30.0])
        out, _ = allreduce_inprocess([a, b])
        for o in out:
            np.testing.assert_array_equal(o, a + b)

    def test_ones_n8(self):
        out, _ = allreduce_inprocess([np.ones(1024)] * 8)
        assert all(np.all(o == 8.0) for o in out)

    @pytest.mark.parametrize("n", [1, 2, 3, 4, 8])
    def test_bitwise_fixed_order(self, n):
        rng = np.random.default_rng(n)
        for length in (1, 7, 100, 1001):
            vecs = [rng.normal(size=length) * 10.0 ** rng.integers(-3, 4) for _ in range(n)]
            out, _ = allreduce_inprocess(vecs)
            ref = reference_sum(vecs)
            for o in out:
                assert o.tobytes() == ref.tobytes()

    @pytest.mark.parametrize("n", [2, 3, 4, 8])
    def test_dyadic_equals_ascending_sum(self, n):
        # exactly representable partial sums, so every order agrees with np.sum
        rng = np.random.default_rng(10 + n)
        vecs = [rng.integers(-2**20, 2**20, size=257) / 1024.0 for _ in range(n)]
        out, _ = allreduce_inprocess(vecs)
        direct = np.sum(np.stack(vecs), axis=0)
        assert all(o.tobytes() == direct.tobytes() for o in out)

    @pytest.mark.parametrize("n", [1, 2, 3, 4, 8])
    def test_message_accounting(self, n):
        size = 1000
        _, hub = allreduce_inprocess([np.ones(size)] * n)
        for r, ep in enumerate(hub.endpoints):
            assert ep.messages_sent == 2 * (n - 1)
            assert ep.payload_bytes_sent == expected_payload_bytes(size, n, r)
            assert abs(ep.payload_bytes_sent - 2 * (n - 1) / n * size * 8) <= 2 * (n - 1) * 8
            assert ep.bytes_sent == ep.payload_bytes_sent + 2 * (n - 1) * HEADER.size

    def test_repeatable(self):
        rng = np.random.default_rng(0)
        vecs = [rng.normal(size=64) for _ in range(4)]
        a, _ = allreduce_inprocess(vecs)
        b, _ = allreduce_inprocess(vecs)
        assert a[0].tobytes() == b[0].tobytes()

    def test_length_mismatch(self):
        hub = InProcessHub(2)
        topo = RingTopology(2)
        vecs = [np.ones(4), np.ones(5)]
        with pytest.raises(ProtocolError):
            run_threads(lambda r: ring_allreduce(vecs[r], r, topo, hub.endpoints[r], timeout=2), 2)

    def test_missing_peer_times_out(self):
        hub = InProcessHub(2)
        with pytest.raises(TransportTimeout):
            ring_allreduce(np.ones(3), 0, RingTopology(2), hub.endpoints[0], timeout=0.2)

    def test_randomized_delay_fuzz(self):
        rng = np.random.default_rng(1)
        for run in range(1000):
            n = int(rng.choice([2, 3, 4, 8]))
            length = int(rng.integers(1, 20))
            vecs = [rng.normal(size=length) for _ in range(n)]
            out, _ = allreduce_inprocess(vecs, max_delay=2e-5, seed=run)
            ref = reference_sum(vecs)
            assert all(o.tobytes() == ref.tobytes() for o in out)


class TestSocket:
    def test_socket_ring(self):
        n = 3
        addrs = free_ports(n)
        eps = [SocketTransport(r, addrs, timeout=10) for r in range(n)]
        run_threads(lambda r: eps[r].connect(), n)
        rng = np.random.default_rng(2)
        vecs = [rng.normal(size=50) for _ in range(n)]
        topo = RingTopology(n)
        out = run_threads(lambda r: ring_allreduce(vecs[r], r, topo, eps[r]), n)
        ref = reference_sum(vecs)
        assert all(o.tobytes() == ref.tobytes() for o in out)
        assert all(e.messages_sent == 2 * (n - 1) for e in eps)
        for e in eps:
            e.close()

    def test_disconnect_times_out(self):
        addrs = free_ports(2)
        eps = [SocketTransport(r, addrs, timeout=5) for r in range(2)]
        run_threads(lambda r: eps[r].connect(), 2)
        eps[1].close()
        with pytest.raises(TransportTimeout):
            ring_allreduce(np.ones(4), 0, RingTopology(2), eps[0], timeout=0.5)
        eps[0].close()

    def test_address_file(self, tmp_path):
        p = tmp_path / "ring.txt"
        p.write_text("0 127.0.0.1:5000\n# comment\n1 localhost:5001\n")
        assert read_addresses(p) == {0: ("127.0.0.1", 5000), 1: ("localhost", 5001)}


def test_bench_rows(tmp_path):
    rows = bench_allreduce([1000, 4000], [1, 2, 4], repeats=1)
    assert len(rows) == 6
    for size, n, sec, mbps, sent in rows:
        assert sent == expected_payload_bytes(size, n)
        assert sec > 0
    # fixed size: per-worker bytes follow 2(N-1)/N, increasing in N
    sent_1000 = [r[4] for r in rows if r[0] == 1000]
    assert sent_1000 == sorted(sent_1000) and sent_1000[0] == 0
    write_bench_tsv(rows, tmp_path / "b.tsv")
    assert (tmp_path / "b.tsv").read_text().splitlines()[0] == "size\tN\tseconds\tMB/s\tpayload_bytes"
