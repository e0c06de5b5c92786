"""Layer stack, flat parameter vector, sizing helper and checkpoints."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict
from math import prod
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from ds2.nn.layers import (
    LAYER_TYPES,
    ConvSpec,
    DenseSpec,
    Layer,
    OutputSpec,
    RecurrentSpec,
    RowConvSpec,
    time_mask,
)

MAGIC = b"DS2C"
CHECKPOINT_VERSION = 1

_SPEC_NAMES = {
    "conv": ConvSpec,
    "recurrent": RecurrentSpec,
    "rowconv": RowConvSpec,
    "dense": DenseSpec,
    "output": OutputSpec,
}
_SPEC_KEYS = {v: k for k, v in _SPEC_NAMES.items()}


class ParamVector:
    """Flat parameter and gradient arrays with named per-layer views."""

    def __init__(self, layout: list[tuple[int, str, tuple]]):
        self.layout = layout
        sizes = [prod(shape) for _, _, shape in layout]
        self.size = int(sum(sizes))
        self.data = np.zeros(self.size)
        self.grad = np.zeros(self.size)
        self.offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(int)

    def views(self, arr) -> list[dict[str, np.ndarray]]:
        n_layers = max((i for i, _, _ in self.layout), default=-1) + 1
        out: list[dict[str, np.ndarray]] = [{} for _ in range(n_layers)]
        for k, (i, name, shape) in enumerate(self.layout):
            out[i][name] = arr[self.offsets[k] : self.offsets[k + 1]].reshape(shape)
        return out

    def zero_grad(self):
        self.grad[...] = 0.0


def _build_layers(input_dim: int, specs: Sequence) -> list[Layer]:
    layers: list[Layer] = []
    freq, chans = input_dim, 1
    for k, spec in enumerate(specs):
        cls = LAYER_TYPES.get(type(spec))
        if cls is None:
            raise TypeError(f"unknown layer spec {spec!r}")
        if isinstance(spec, ConvSpec):
            if spec.filter_freq is None and freq != 1:
                freq, chans = 1, freq * chans
        else:
            freq, chans = 1, freq * chans
        layer = cls(spec, freq, chans)
        layers.append(layer)
        freq, chans = layer.out_structure()
    return layers


def count_params(input_dim: int, specs: Sequence) -> int:
    """Trainable parameter count, computed from shapes alone."""
    return sum(prod(s) for layer in _build_layers(input_dim, specs) for s in layer.param_shapes().values())


class Network:
    """Ordered layer stack ending in a linear layer of ``alphabet_size + 1`` logits."""

    def __init__(self, input_dim: int, specs: Sequence, alphabet_size: int, seed: int = 0):
        specs = list(specs)
        if any(isinstance(s, OutputSpec) for s in specs):
            raise ValueError("the output layer is appended automatically")
        self.input_dim = int(input_dim)
        self.alphabet_size = int(alphabet_size)
        self.specs = specs + [OutputSpec(self.alphabet_size + 1)]
        self.layers = _build_layers(self.input_dim, self.specs)
        layout = [
            (i, name, tuple(shape))
            for i, layer in enumerate(self.layers)
            for name, shape in layer.param_shapes().items()
        ]
        self.params = ParamVector(layout)
        pviews, gviews = self.params.views(self.params.data), self.params.views(self.params.grad)
        for i, layer in enumerate(self.layers):
            layer.bind(pviews[i], gviews[i])
        rng = np.random.default_rng(seed)
        for layer in self.layers:
            layer.init_params(rng)
        self._forward_done = False

    # ------------------------------------------------------------------
    @property
    def bidirectional(self) -> bool:
        return any(isinstance(s, RecurrentSpec) and s.bidirectional for s in self.specs)

    @property
    def num_outputs(self) -> int:
        return self.alphabet_size + 1

    @property
    def blank_index(self) -> int:
        return self.alphabet_size

    @property
    def time_stride(self) -> int:
        out = 1
        for s in self.specs:
            if isinstance(s, ConvSpec):
                out *= s.stride_time
        return out

    def last_input_frame(self, t: int) -> int:
        """Largest input frame index that output frame ``t`` of a unidirectional stack reads."""
        for layer in reversed(self.layers):
            s = layer.spec
            if isinstance(s, ConvSpec):
                t = t * s.stride_time + layer.pt[1]
            elif isinstance(s, RowConvSpec):
                t = t + s.context
        return t

    def num_params(self) -> int:
        return self.params.size

    def get_flat(self) -> np.ndarray:
        return self.params.data.copy()

    def set_flat(self, flat):
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != self.params.data.shape:
            raise ValueError(f"flat vector has {flat.size} entries, network has {self.params.size}")
        self.params.data[...] = flat

    def out_lengths(self, lengths):
        lengths = np.asarray(lengths)
        for layer in self.layers:
            lengths = layer.out_lengths(lengths)
        return lengths

    # ------------------------------------------------------------------
    def forward(self, x, lengths, train: bool = False):
        """Logits ``(B, T', K)`` and output lengths for a zero-padded batch."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 2:
            x = x[None]
        lengths = np.asarray(lengths, dtype=int).reshape(-1)
        if x.shape[2] != self.input_dim:
            raise ValueError(f"input has {x.shape[2]} features, network expects {self.input_dim}")
        if len(lengths) != x.shape[0] or np.any(lengths > x.shape[1]) or np.any(lengths < 1):
            raise ValueError("lengths must be in [1, T] for every batch item")
        h = x * time_mask(lengths, x.shape[1])[:, :, None]
        for layer in self.layers:
            h, lengths = layer.forward(h, lengths, train)
        self._forward_done = True
        return h, lengths

    def backward(self, dlogits) -> np.ndarray:
        """Accumulate parameter gradients from logits gradients; returns the flat gradient."""
        if not self._forward_done:
            raise RuntimeError("backward called without a cached forward pass")
        self.params.zero_grad()
        d = np.asarray(dlogits, dtype=np.float64)
        for layer in reversed(self.layers):
            d = layer.backward(d)
        self._forward_done = False
        return self.params.grad

    def loss_and_grad(self, x, lengths, labels, train=True, workers=1):
        """Summed CTC loss, per-item losses and the flat gradient of the sum."""
        from ds2.ctc import ctc_batch

        logits, out_len = self.forward(x, lengths, train=train)
        losses, dlogits = ctc_batch(logits, out_len, labels, blank=self.blank_index, workers=workers)
        grad = self.backward(dlogits)
        return float(losses.sum()), losses, grad

    def predict(self, x, lengths=None):
        """Per-frame log-probabilities for inference (no gradient cache kept)."""
        from ds2.ctc import log_softmax

        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 2:
            x = x[None]
        if lengths is None:
            lengths = [x.shape[1]] * x.shape[0]
        logits, out_len = self.forward(x, lengths, train=False)
        self._forward_done = False
        for layer in self.layers:
            layer._cache = None
        return log_softmax(logits), out_len

    # ------------------------------------------------------------------
    # streaming for unidirectional stacks
    def stream_start(self):
        if self.bidirectional:
            raise ValueError("streaming needs a unidirectional network")
        return [layer.stream_start() for layer in self.layers]

    def stream_step(self, state, frames, final=False):
        """Feed feature frames; returns whatever logits the available context allows."""
        h = np.asarray(frames, dtype=np.float64).reshape(-1, self.input_dim)
        for layer, st in zip(self.layers, state):
            h = layer.stream_step(st, h, final)
        return h

    # ------------------------------------------------------------------
    def architecture(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "alphabet_size": self.alphabet_size,
            "layers": [{"type": _SPEC_KEYS[type(s)], **asdict(s)} for s in self.specs[:-1]],
        }

    @classmethod
    def from_architecture(cls, arch: dict, seed: int = 0) -> "Network":
        specs = []
        for entry in arch["layers"]:
            entry = dict(entry)
            specs.append(_SPEC_NAMES[entry.pop("type")](**entry))
        return cls(arch["input_dim"], specs, arch["alphabet_size"], seed=seed)

    def copy(self) -> "Network":
        net = Network.from_architecture(self.architecture())
        net.set_flat(self.params.data)
        for a, b in zip(self.layers, net.layers):
            b.load_buffers({k: v.copy() for k, v in a.buffers().items()})
        return net


# --------------------------------------------------------------------------
# sizing


def hidden_for_budget(
    budget: int,
    build: Callable[[int], tuple[int, Sequence, int]],
    lo: int = 1,
    hi: int = 1 << 15,
) -> int:
    """Width whose parameter count is closest to ``budget``.

    ``build(hidden)`` returns ``(input_dim, specs, num_outputs)``; the count
    grows monotonically with ``hidden`` so a bisection suffices.
    """

    def total(h):
        input_dim, specs, n_out = build(h)
        return count_params(input_dim, list(specs) + [OutputSpec(n_out)])

    while lo < hi:
        mid = (lo + hi) // 2
        if total(mid) < budget:
            lo = mid + 1
        else:
            hi = mid
    best = min((h for h in (lo - 1, lo) if h >= 1), key=lambda h: abs(total(h) - budget))
    return best


def table_stack(hidden: int, n_recurrent: int, n_total: int, input_dim: int = 161, kind="simple",
                conv_channels: int | None = None, batchnorm=True) -> list:
    """One 1D conv, ``n_recurrent`` bidirectional layers, dense layers up to ``n_total``.

    The output layer counts toward ``n_total``.
    """
    n_dense = n_total - 1 - n_recurrent - 1
    if n_dense < 0:
        raise ValueError("n_total too small for the requested recurrent depth")
    conv = ConvSpec(conv_channels or hidden, filter_time=11, stride_time=2, batchnorm=batchnorm)
    rnn = [RecurrentSpec(hidden, kind=kind, batchnorm=batchnorm) for _ in range(n_recurrent)]
    dense = [DenseSpec(hidden, batchnorm=batchnorm) for _ in range(n_dense)]
    return [conv] + rnn + dense


# --------------------------------------------------------------------------
# checkpoints


def alphabet_hash(symbols: Sequence[str]) -> bytes:
    return hashlib.sha256("\n".join(symbols).encode("utf-8")).digest()[:8]


def save_checkpoint(net: Network, path, symbols: Sequence[str] | None = None, extra: dict | None = None):
    """Binary layout (little-endian)::

        b"DS2C" | u32 version | 8-byte alphabet hash
        u32 len | architecture JSON
        u32 n_layers, then per layer:
            u8 tag | u32 n_tensors, then per tensor:
                u16 len | name | u8 ndim | u32 * ndim shape | float64 payload
    """
    h = alphabet_hash(symbols) if symbols is not None else b"\0" * 8
    arch = net.architecture()
    if extra:
        arch = {**arch, "extra": extra}
    blob = json.dumps(arch, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC + struct.pack("<I", CHECKPOINT_VERSION) + h)
        f.write(struct.pack("<I", len(blob)) + blob)
        f.write(struct.pack("<I", len(net.layers)))
        for layer in net.layers:
            tensors = {**layer.params, **layer.buffers()}
            f.write(struct.pack("<BI", layer.tag, len(tensors)))
            for name, arr in tensors.items():
                nb = name.encode("ascii")
                f.write(struct.pack("<H", len(nb)) + nb)
                f.write(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
                f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


class CheckpointError(ValueError):
    pass


def load_checkpoint(path, symbols: Sequence[str] | None = None) -> tuple[Network, dict]:
    data = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError("checkpoint truncated")
        out = data[pos : pos + n]
        pos += n
        return out

    if take(4) != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    h = take(8)
    if symbols is not None and h != alphabet_hash(symbols):
        raise CheckpointError("checkpoint was trained with a different alphabet")
    (n,) = struct.unpack("<I", take(4))
    arch = json.loads(take(n).decode("utf-8"))
    extra = arch.pop("extra", {})
    net = Network.from_architecture(arch)
    (n_layers,) = struct.unpack("<I", take(4))
    if n_layers != len(net.layers):
        raise CheckpointError("layer count does not match architecture")
    for layer in net.layers:
        tag, n_t = struct.unpack("<BI", take(5))
        if tag != layer.tag:
            raise CheckpointError(f"layer tag {tag} where {layer.tag} ({layer.kind}) expected")
        bufs = {}
        for _ in range(n_t):
            (ln,) = struct.unpack("<H", take(2))
            name = take(ln).decode("ascii")
            (ndim,) = struct.unpack("<B", take(1))
            shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
            arr = np.frombuffer(take(8 * prod(shape)), dtype="<f8").reshape(shape)
            if name in layer.params:
                if layer.params[name].shape != arr.shape:
                    raise CheckpointError(f"{layer.kind}.{name}: shape {arr.shape} mismatch")
                layer.params[name][...] = arr
            else:
                bufs[name] = arr
        layer.load_buffers(bufs)
    return net, extra
