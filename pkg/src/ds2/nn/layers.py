"""Layer implementations with hand-written backward passes.

Sequence activations are ``(B, T, D)`` float64 arrays accompanied by a
length vector; frames at or past an item's length are kept at exactly zero
and receive zero gradient.  Every layer owns views into the network's flat
parameter and gradient vectors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

RELU_CAP = 20.0
BN_EPS = 1e-5
BN_MOMENTUM = 0.95


def clipped_relu(x):
    return np.minimum(np.maximum(x, 0.0), RELU_CAP)


def clipped_relu_grad(x, dout):
    """Upstream gradient passed through where ``0 < x < 20``, zero elsewhere."""
    return dout * ((x > 0.0) & (x < RELU_CAP))


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def time_mask(lengths, T) -> np.ndarray:
    return (np.arange(T)[None, :] < np.asarray(lengths)[:, None]).astype(np.float64)


# --------------------------------------------------------------------------
# layer specifications


@dataclass(frozen=True)
class ConvSpec:
    """Time/frequency convolution.  ``filter_freq=None`` means 1D (time only)."""

    channels: int
    filter_time: int
    filter_freq: int | None = None
    stride_time: int = 1
    stride_freq: int = 1
    batchnorm: bool = False

    @property
    def context(self) -> int:
        return (self.filter_time - 1) // 2

    def __post_init__(self):
        if self.stride_time < 1 or self.stride_freq < 1:
            raise ValueError("strides must be >= 1")
        if self.filter_time < 1 or (self.filter_freq is not None and self.filter_freq < 1):
            raise ValueError("filter sizes must be >= 1")


@dataclass(frozen=True)
class RecurrentSpec:
    hidden: int
    kind: str = "simple"  # or "gru"
    bidirectional: bool = True
    batchnorm: bool = False

    def __post_init__(self):
        if self.kind not in ("simple", "gru"):
            raise ValueError(f"unknown recurrence {self.kind!r}")


@dataclass(frozen=True)
class RowConvSpec:
    context: int  # future frames, tau

    def __post_init__(self):
        if self.context < 0:
            raise ValueError("row convolution context must be >= 0")


@dataclass(frozen=True)
class DenseSpec:
    hidden: int
    batchnorm: bool = False


@dataclass(frozen=True)
class OutputSpec:
    classes: int


# --------------------------------------------------------------------------
# sequence-wise batch normalization


class SeqBatchNorm:
    """Per-unit normalization with statistics over every valid (item, frame)."""

    def __init__(self, units, eps=BN_EPS, momentum=BN_MOMENTUM):
        self.units = units
        self.eps = eps
        self.momentum = momentum
        self.running_mean = np.zeros(units)
        self.running_var = np.ones(units)
        self.primed = False
        self.gamma = None  # views assigned by the owning layer
        self.beta = None
        self.dgamma = None
        self.dbeta = None
        self._cache = None

    def forward(self, x, row_mask, train):
        """``x`` is (N, units); ``row_mask`` is a length-N 0/1 vector."""
        if train:
            valid = row_mask > 0
            n = int(valid.sum())
            if n < 2:
                raise ValueError("batch norm in training mode needs at least 2 valid frames")
            xv = x[valid]
            mean = xv.mean(axis=0)
            var = xv.var(axis=0)
            m = self.momentum
            if self.primed:
                self.running_mean = m * self.running_mean + (1 - m) * mean
                self.running_var = m * self.running_var + (1 - m) * var
            else:
                self.running_mean = mean.copy()
                self.running_var = var.copy()
                self.primed = True
        else:
            if not self.primed:
                raise RuntimeError("batch norm inference needs running statistics from training")
            mean, var = self.running_mean, self.running_var
            n = None
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean) * inv_std * row_mask[:, None]
        self._cache = (xhat, inv_std, row_mask, n, train)
        return self.gamma * xhat + self.beta * row_mask[:, None]

    def apply_inference(self, x):
        if not self.primed:
            raise RuntimeError("batch norm inference needs running statistics from training")
        inv_std = 1.0 / np.sqrt(self.running_var + self.eps)
        return self.gamma * (x - self.running_mean) * inv_std + self.beta

    def backward(self, dy):
        xhat, inv_std, row_mask, n, train = self._cache
        dy = dy * row_mask[:, None]
        self.dgamma += (dy * xhat).sum(axis=0)
        self.dbeta += dy.sum(axis=0)
        dxhat = dy * self.gamma
        if not train:
            return dxhat * inv_std
        s1 = dxhat.sum(axis=0)
        s2 = (dxhat * xhat).sum(axis=0)
        dx = inv_std / n * (n * dxhat - s1 - xhat * s2)
        return dx * row_mask[:, None]


# --------------------------------------------------------------------------
# layers


def _uniform(rng, shape, fan_in, fan_out):
    r = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-r, r, size=shape)


class Layer:
    kind = ""
    tag = 0

    def __init__(self, spec, in_freq, in_channels):
        self.spec = spec
        self.in_freq = in_freq
        self.in_channels = in_channels
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.bn: SeqBatchNorm | None = None
        self._cache = None

    @property
    def in_dim(self):
        return self.in_freq * self.in_channels

    def param_shapes(self) -> dict[str, tuple]:
        raise NotImplementedError

    def out_structure(self) -> tuple[int, int]:
        """(freq, channels) of the output; non-convolutional layers use freq=1."""
        raise NotImplementedError

    @property
    def out_dim(self):
        f, c = self.out_structure()
        return f * c

    def out_lengths(self, lengths):
        return np.asarray(lengths)

    def bind(self, params: dict, grads: dict):
        self.params, self.grads = params, grads
        if self.bn is not None:
            self.bn.gamma, self.bn.beta = params["gamma"], params["beta"]
            self.bn.dgamma, self.bn.dbeta = grads["gamma"], grads["beta"]

    def init_params(self, rng):
        raise NotImplementedError

    def _init_affine(self, units):
        if self.bn is not None:
            self.params["gamma"][...] = 1.0
            self.params["beta"][...] = 0.0
        else:
            self.params["b"][...] = 0.0

    def _affine_shapes(self, units):
        return {"gamma": (units,), "beta": (units,)} if self.bn is not None else {"b": (units,)}

    def _shift(self, z, row_mask, train):
        """Bias add, or batch norm of the input projection when enabled."""
        if self.bn is None:
            return z + self.params["b"]
        flat = z.reshape(-1, z.shape[-1])
        return self.bn.forward(flat, row_mask, train).reshape(z.shape)

    def _shift_backward(self, dz):
        if self.bn is None:
            self.grads["b"] += dz.reshape(-1, dz.shape[-1]).sum(axis=0)
            return dz
        flat = dz.reshape(-1, dz.shape[-1])
        return self.bn.backward(flat).reshape(dz.shape)

    def buffers(self) -> dict[str, np.ndarray]:
        if self.bn is None:
            return {}
        return {"running_mean": self.bn.running_mean, "running_var": self.bn.running_var}

    def load_buffers(self, bufs):
        if self.bn is not None and bufs:
            self.bn.running_mean = np.array(bufs["running_mean"], dtype=np.float64)
            self.bn.running_var = np.array(bufs["running_var"], dtype=np.float64)
            self.bn.primed = True

    def forward(self, x, lengths, train):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError

    def _need_cache(self):
        if self._cache is None:
            raise RuntimeError(f"{self.kind} layer: backward called without a cached forward pass")
        return self._cache

    # streaming: default is a per-frame layer
    def stream_start(self):
        return None

    def stream_step(self, state, x, final):
        y, _ = self.forward(x[None], np.array([x.shape[0]]), train=False)
        self._cache = None
        return y[0]


class Conv(Layer):
    kind = "conv"
    tag = 1

    def __init__(self, spec: ConvSpec, in_freq, in_channels):
        super().__init__(spec, in_freq, in_channels)
        self.kt = spec.filter_time
        self.kf = 1 if spec.filter_freq is None else spec.filter_freq
        if spec.filter_freq is None and in_freq != 1:
            raise ValueError("1D convolution expects features as channels")
        if self.kf > in_freq + self.kf - 1:
            raise ValueError("frequency filter wider than padded input")
        self.pt = ((self.kt - 1) // 2, self.kt - 1 - (self.kt - 1) // 2)
        self.pf = ((self.kf - 1) // 2, self.kf - 1 - (self.kf - 1) // 2)
        self.out_freq = -(-in_freq // spec.stride_freq)
        if spec.batchnorm:
            self.bn = SeqBatchNorm(spec.channels)

    def param_shapes(self):
        s = self.spec
        shapes = {"W": (s.channels, self.in_channels, self.kt, self.kf)}
        shapes.update(self._affine_shapes(s.channels))
        return shapes

    def out_structure(self):
        return self.out_freq, self.spec.channels

    def out_lengths(self, lengths):
        return -(-np.asarray(lengths) // self.spec.stride_time)

    def init_params(self, rng):
        s = self.spec
        fan_in = self.in_channels * self.kt * self.kf
        fan_out = s.channels * self.kt * self.kf
        self.params["W"][...] = _uniform(rng, self.params["W"].shape, fan_in, fan_out)
        self._init_affine(s.channels)

    def _windows(self, xp):
        """Strided (B, T', F', C, kt, kf) windows of a time-padded input."""
        B, Tp = xp.shape[:2]
        x4 = xp.reshape(B, Tp, self.in_freq, self.in_channels)
        x4 = np.pad(x4, ((0, 0), (0, 0), self.pf, (0, 0)))
        win = np.lib.stride_tricks.sliding_window_view(x4, (self.kt, self.kf), axis=(1, 2))
        win = win[:, :: self.spec.stride_time, :: self.spec.stride_freq]
        return win[:, :, : self.out_freq]

    def _linear(self, win):
        return np.tensordot(win, self.params["W"], axes=([3, 4, 5], [1, 2, 3]))

    def forward(self, x, lengths, train):
        B, T, D = x.shape
        if D != self.in_dim:
            raise ValueError(f"conv input feature dimension {D} != expected {self.in_dim}")
        if T < 1:
            raise ValueError("conv input time dimension is empty")
        xp = np.pad(x, ((0, 0), self.pt, (0, 0)))
        win = self._windows(xp)
        z = self._linear(win)  # (B, T', F', O)
        out_len = self.out_lengths(lengths)
        To = z.shape[1]
        mask = time_mask(out_len, To)
        row_mask = np.repeat(mask.reshape(-1), self.out_freq)
        pre = self._shift(z, row_mask, train)
        y = clipped_relu(pre) * mask[:, :, None, None]
        self._cache = (win, pre, mask, x.shape)
        return y.reshape(B, To, -1), out_len

    def backward(self, dout):
        win, pre, mask, xshape = self._need_cache()
        B, T, D = xshape
        To = pre.shape[1]
        dy = dout.reshape(pre.shape) * mask[:, :, None, None]
        dz = self._shift_backward(clipped_relu_grad(pre, dy))
        W = self.params["W"]
        self.grads["W"] += np.tensordot(dz, win, axes=([0, 1, 2], [0, 1, 2]))
        st, sf = self.spec.stride_time, self.spec.stride_freq
        Tp = T + self.kt - 1
        Fp = self.in_freq + self.kf - 1
        dxp = np.zeros((B, Tp, Fp, self.in_channels))
        Fo = self.out_freq
        for i in range(self.kt):
            for j in range(self.kf):
                dxp[:, i : i + st * To : st, j : j + sf * Fo : sf, :] += dz @ W[:, :, i, j]
        dx = dxp[:, self.pt[0] : self.pt[0] + T, self.pf[0] : self.pf[0] + self.in_freq]
        self._cache = None
        return dx.reshape(B, T, D)

    # streaming keeps a window of time-padded input frames
    def stream_start(self):
        return {"buf": np.zeros((self.pt[0], self.in_dim)), "offset": 0, "k": 0, "seen": 0}

    def stream_step(self, state, x, final):
        st = self.spec.stride_time
        buf = np.concatenate([state["buf"], x]) if len(x) else state["buf"]
        state["seen"] += len(x)
        if final:
            buf = np.concatenate([buf, np.zeros((self.pt[1], self.in_dim))])
        avail = state["offset"] + len(buf)
        k0 = state["k"]
        k1 = (avail - self.kt) // st + 1 if avail >= self.kt else 0  # exclusive
        if final:
            k1 = min(k1, -(-state["seen"] // st))
        out = np.zeros((0, self.out_dim))
        if k1 > k0:
            lo = k0 * st - state["offset"]
            hi = (k1 - 1) * st + self.kt - state["offset"]
            win = self._windows(buf[None, lo:hi])
            z = self._linear(win)[0]
            pre = z + self.params["b"] if self.bn is None else self.bn.apply_inference(z)
            out = clipped_relu(pre).reshape(k1 - k0, -1)
            state["k"] = k1
        keep_from = state["k"] * st - state["offset"]
        state["buf"] = buf[keep_from:]
        state["offset"] += keep_from
        return out


class Recurrent(Layer):
    """Simple or GRU recurrence; the two directions share input weights."""

    kind = "rnn"
    tag = 2

    def __init__(self, spec: RecurrentSpec, in_freq, in_channels):
        super().__init__(spec, in_freq, in_channels)
        if spec.kind == "gru":
            self.kind, self.tag = "gru", 3
        self.gates = 3 if spec.kind == "gru" else 1
        if spec.batchnorm:
            self.bn = SeqBatchNorm(self.gates * spec.hidden)

    @property
    def directions(self):
        return ("fwd", "bwd") if self.spec.bidirectional else ("fwd",)

    def param_shapes(self):
        H, G = self.spec.hidden, self.gates
        shapes = {"W": (G * H, self.in_dim)}
        for d in self.directions:
            shapes[f"U_{d}"] = (G * H, H)
        shapes.update(self._affine_shapes(G * H))
        return shapes

    def out_structure(self):
        return 1, self.spec.hidden

    def init_params(self, rng):
        H, G = self.spec.hidden, self.gates
        self.params["W"][...] = _uniform(rng, (G * H, self.in_dim), self.in_dim, H)
        for d in self.directions:
            self.params[f"U_{d}"][...] = _uniform(rng, (G * H, H), H, H)
        self._init_affine(G * H)

    def _step(self, xw_t, h_prev, U, m_t):
        if self.gates == 1:
            pre = xw_t + h_prev @ U.T
            return clipped_relu(pre) * m_t, (pre,)
        H = self.spec.hidden
        u = h_prev @ U.T
        z = sigmoid(xw_t[:, :H] + u[:, :H])
        r = sigmoid(xw_t[:, H : 2 * H] + u[:, H : 2 * H])
        uh = u[:, 2 * H :]
        cand_pre = xw_t[:, 2 * H :] + r * uh
        cand = clipped_relu(cand_pre)
        h = ((1.0 - z) * h_prev + z * cand) * m_t
        return h, (z, r, uh, cand_pre, cand)

    def _step_backward(self, dh, h_prev, U, m_t, saved):
        """Returns (d input projection, d h_prev) and accumulates dU."""
        dh = dh * m_t
        if self.gates == 1:
            (pre,) = saved
            dpre = clipped_relu_grad(pre, dh)
            return dpre, dpre @ U, dpre.T @ h_prev
        z, r, uh, cand_pre, cand = saved
        dz = dh * (cand - h_prev)
        dcand_pre = clipped_relu_grad(cand_pre, dh * z)
        dr = dcand_pre * uh
        dz_pre = dz * z * (1.0 - z)
        dr_pre = dr * r * (1.0 - r)
        dxw = np.concatenate([dz_pre, dr_pre, dcand_pre], axis=1)
        du = np.concatenate([dz_pre, dr_pre, dcand_pre * r], axis=1)
        dh_prev = dh * (1.0 - z) + du @ U
        return dxw, dh_prev, du.T @ h_prev

    def _scan(self, xw, mask, U, reverse, h0=None):
        B, T, _ = xw.shape
        H = self.spec.hidden
        hs = np.zeros((B, T, H))
        saved = [None] * T
        h = np.zeros((B, H)) if h0 is None else h0
        order = range(T - 1, -1, -1) if reverse else range(T)
        for t in order:
            h, saved[t] = self._step(xw[:, t], h, U, mask[:, t, None])
            hs[:, t] = h
        return hs, saved

    def forward(self, x, lengths, train):
        B, T, D = x.shape
        if D != self.in_dim:
            raise ValueError(f"recurrent input dimension {D} != expected {self.in_dim}")
        mask = time_mask(lengths, T)
        xw = self._shift(x @ self.params["W"].T, mask.reshape(-1), train)
        out = np.zeros((B, T, self.spec.hidden))
        runs = {}
        for d in self.directions:
            hs, saved = self._scan(xw, mask, self.params[f"U_{d}"], reverse=(d == "bwd"))
            runs[d] = (hs, saved)
            out += hs
        self._cache = (x, mask, runs)
        return out, np.asarray(lengths)

    def backward(self, dout):
        x, mask, runs = self._need_cache()
        B, T, _ = x.shape
        H = self.spec.hidden
        dout = dout * mask[:, :, None]
        dxw = np.zeros((B, T, self.gates * H))
        for d in self.directions:
            U = self.params[f"U_{d}"]
            hs, saved = runs[d]
            reverse = d == "bwd"
            dh_carry = np.zeros((B, H))
            order = range(T) if reverse else range(T - 1, -1, -1)
            dU = self.grads[f"U_{d}"]
            for t in order:
                tp = t + 1 if reverse else t - 1
                h_prev = hs[:, tp] if 0 <= tp < T else np.zeros((B, H))
                g, dh_carry, dU_t = self._step_backward(
                    dout[:, t] + dh_carry, h_prev, U, mask[:, t, None], saved[t]
                )
                dxw[:, t] += g
                dU += dU_t
        dxw = self._shift_backward(dxw)
        self.grads["W"] += dxw.reshape(-1, dxw.shape[-1]).T @ x.reshape(-1, x.shape[-1])
        self._cache = None
        return dxw @ self.params["W"]

    def stream_start(self):
        if self.spec.bidirectional:
            raise ValueError("bidirectional recurrence cannot be streamed")
        return {"h": np.zeros((1, self.spec.hidden))}

    def stream_step(self, state, x, final):
        if not len(x):
            return np.zeros((0, self.spec.hidden))
        xw = x[None] @ self.params["W"].T
        xw = xw + self.params["b"] if self.bn is None else self.bn.apply_inference(xw)
        hs, _ = self._scan(xw, np.ones((1, len(x))), self.params["U_fwd"], False, state["h"])
        state["h"] = hs[:, -1]
        return hs[0]


class RowConv(Layer):
    """Per-unit weighted sum over the current and ``context`` future frames."""

    kind = "rowconv"
    tag = 4

    def param_shapes(self):
        return {"W": (self.in_dim, self.spec.context + 1)}

    def out_structure(self):
        return 1, self.in_dim

    def init_params(self, rng):
        tau = self.spec.context
        self.params["W"][...] = _uniform(rng, self.params["W"].shape, tau + 1, 1)

    def _apply(self, h, n_out):
        W = self.params["W"]
        r = np.zeros((h.shape[0], n_out, h.shape[2]))
        for j in range(W.shape[1]):
            r += W[:, j] * h[:, j : j + n_out]
        return r

    def forward(self, x, lengths, train):
        B, T, D = x.shape
        if D != self.in_dim:
            raise ValueError(f"row convolution input dimension {D} != expected {self.in_dim}")
        tau = self.spec.context
        hp = np.pad(x, ((0, 0), (0, tau), (0, 0)))
        mask = time_mask(lengths, T)
        r = self._apply(hp, T) * mask[:, :, None]
        self._cache = (hp, mask)
        return r, np.asarray(lengths)

    def backward(self, dout):
        hp, mask = self._need_cache()
        B, Tp, D = hp.shape
        T = mask.shape[1]
        dr = dout * mask[:, :, None]
        W = self.params["W"]
        dhp = np.zeros_like(hp)
        for j in range(W.shape[1]):
            self.grads["W"][:, j] += (dr * hp[:, j : j + T]).sum(axis=(0, 1))
            dhp[:, j : j + T] += dr * W[:, j]
        self._cache = None
        return dhp[:, :T]

    def stream_start(self):
        return {"buf": np.zeros((0, self.in_dim))}

    def stream_step(self, state, x, final):
        tau = self.spec.context
        buf = np.concatenate([state["buf"], x])
        n_real = len(buf)
        if final:
            buf = np.concatenate([buf, np.zeros((tau, self.in_dim))])
            n_out = n_real
        else:
            n_out = max(0, len(buf) - tau)
        out = self._apply(buf[None], n_out)[0] if n_out else np.zeros((0, self.in_dim))
        state["buf"] = buf[n_out:] if not final else np.zeros((0, self.in_dim))
        return out


class Dense(Layer):
    kind = "dense"
    tag = 5
    activation = True

    def __init__(self, spec, in_freq, in_channels):
        super().__init__(spec, in_freq, in_channels)
        if isinstance(spec, DenseSpec) and spec.batchnorm:
            self.bn = SeqBatchNorm(spec.hidden)

    @property
    def units(self):
        return self.spec.hidden

    def param_shapes(self):
        shapes = {"W": (self.units, self.in_dim)}
        shapes.update(self._affine_shapes(self.units))
        return shapes

    def out_structure(self):
        return 1, self.units

    def init_params(self, rng):
        self.params["W"][...] = _uniform(rng, (self.units, self.in_dim), self.in_dim, self.units)
        self._init_affine(self.units)

    def forward(self, x, lengths, train):
        B, T, D = x.shape
        if D != self.in_dim:
            raise ValueError(f"dense input dimension {D} != expected {self.in_dim}")
        mask = time_mask(lengths, T)
        pre = self._shift(x @ self.params["W"].T, mask.reshape(-1), train)
        y = (clipped_relu(pre) if self.activation else pre) * mask[:, :, None]
        self._cache = (x, pre, mask)
        return y, np.asarray(lengths)

    def backward(self, dout):
        x, pre, mask = self._need_cache()
        dy = dout * mask[:, :, None]
        dz = clipped_relu_grad(pre, dy) if self.activation else dy
        dz = self._shift_backward(dz)
        self.grads["W"] += dz.reshape(-1, dz.shape[-1]).T @ x.reshape(-1, x.shape[-1])
        self._cache = None
        return dz @ self.params["W"]


class Output(Dense):
    """Linear projection to alphabet + blank logits; softmax is fused into the loss."""

    kind = "output"
    tag = 6
    activation = False

    @property
    def units(self):
        return self.spec.classes


def softmax_output(hidden: np.ndarray) -> np.ndarray:
    z = np.asarray(hidden, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


LAYER_TYPES = {ConvSpec: Conv, RecurrentSpec: Recurrent, RowConvSpec: RowConv, DenseSpec: Dense, OutputSpec: Output}
