"""Stream a unidirectional model chunk by chunk, then sweep simulated load.

Run with ``python3 demos/streaming_dispatch.py``.
"""

import numpy as np

from ds2.dispatch import BatchDispatcher, StreamingEngine, calibrate, load_sweep, sweep_tsv
from ds2.nn import ConvSpec, DenseSpec, Network, RecurrentSpec, RowConvSpec

net = Network(
    40,
    [ConvSpec(8, 5, stride_time=2), RecurrentSpec(32, kind="gru", bidirectional=False), RowConvSpec(2), DenseSpec(32)],
    alphabet_size=5,
    seed=0,
)
rng = np.random.default_rng(0)
utts = {k: rng.normal(size=(60, 40)) for k in range(8)}

# eight concurrent streams, 10-frame chunks, batched whenever the engine frees up
with BatchDispatcher(StreamingEngine(net), max_batch=8) as d:
    futs = {k: [d.submit(k, x[i : i + 10], final=(i + 10 >= len(x))) for i in range(0, len(x), 10)]
            for k, x in utts.items()}
    outs = {k: np.concatenate([f.result(timeout=30) for f in fs]) for k, fs in futs.items()}
err = max(float(np.max(np.abs(outs[k] - net.predict(x)[0][0]))) for k, x in utts.items())
sizes = [b.size for b in d.batches]
print(f"streamed vs full forward, max |diff| = {err:.1e}")
print(f"{len(sizes)} batches, mean size {np.mean(sizes):.2f}, p98 latency {d.stats.p98 * 1e3:.1f} ms")

cost = calibrate(StreamingEngine(net))
print(f"measured cost model: {cost.overhead * 1e3:.2f} ms per batch + {cost.per_frame * 1e3:.3f} ms per frame")
print(sweep_tsv(load_sweep([1, 5, 10, 20, 30], duration=30.0)), end="")
