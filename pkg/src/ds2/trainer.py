"""Synchronous minibatch SGD with Nesterov momentum and a length curriculum.

A global minibatch is split evenly over ``workers`` model replicas.  Each
replica returns the summed CTC loss and gradient of its shard; the shards
are combined with a ring all-reduce, divided by the global batch size,
clipped by L2 norm and applied with the same update on every replica, so
replicas stay bit-identical.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from ds2.allreduce import InProcessHub, RingTopology, ring_allreduce, run_threads
from ds2.ctc import min_frames
from ds2.nn import Network, load_checkpoint, save_checkpoint


@dataclass
class TrainConfig:
    learning_rate: float = 3e-4
    anneal_factor: float = 1.2
    momentum: float = 0.99
    clip_threshold: float = 400.0
    minibatch_size: int = 8
    epochs: int = 10
    sortagrad: bool = True
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.anneal_factor <= 1:
            raise ValueError("anneal_factor must be > 1")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.clip_threshold <= 0:
            raise ValueError("clip_threshold must be positive")
        if self.minibatch_size < 1 or self.epochs < 0 or self.workers < 1:
            raise ValueError("minibatch_size, workers must be >= 1 and epochs >= 0")
        if self.minibatch_size % self.workers:
            raise ValueError(
                f"minibatch_size {self.minibatch_size} is not divisible by {self.workers} workers"
            )

    def to_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in fields(self))

    @classmethod
    def from_text(cls, text: str, **overrides) -> "TrainConfig":
        return cls(**{**parse_kv(text, {f.name: f.type for f in fields(cls)}), **overrides})

    @classmethod
    def load(cls, path, **overrides) -> "TrainConfig":
        return cls.from_text(Path(path).read_text(encoding="utf-8"), **overrides)


def _coerce(value: str, typ):
    typ = typ if isinstance(typ, str) else getattr(typ, "__name__", str(typ))
    if typ == "bool":
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if typ == "int":
        return int(value)
    if typ == "float":
        return float(value)
    return value


def parse_kv(text: str, types: dict | None = None) -> dict:
    """``key=value`` lines; ``#`` starts a comment.  Known keys are type-coerced."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {n}: expected key=value")
        k, v = (s.strip() for s in line.split("=", 1))
        if types is not None:
            if k not in types:
                raise ValueError(f"line {n}: unknown key {k!r}")
            v = _coerce(v, types[k])
        out[k] = v
    return out


@dataclass
class OptimizerState:
    velocity: np.ndarray
    epoch: int = 0
    learning_rate: float = 3e-4
    step: int = 0

    def to_dict(self):
        return {"epoch": self.epoch, "learning_rate": self.learning_rate, "step": self.step}


# --------------------------------------------------------------------------
# pieces


def sortagrad_order(lengths: Sequence[int], batch_size: int, epoch: int, seed: int,
                    sortagrad: bool = True) -> list[np.ndarray]:
    """Minibatches of utterance indices for one epoch.

    Epoch 0 with the curriculum on: stable sort by length, then consecutive
    chunks, so batch-max length never decreases.  Otherwise: a seeded
    shuffle of utterances, then consecutive chunks.
    """
    lengths = np.asarray(lengths)
    if epoch == 0 and sortagrad:
        order = np.argsort(lengths, kind="stable")
    else:
        order = np.random.default_rng([seed, epoch]).permutation(len(lengths))
    return [order[i : i + batch_size] for i in range(0, len(order), batch_size)]


def clip_gradient(grad: np.ndarray, threshold: float) -> tuple[np.ndarray, bool]:
    """Rescale to norm ``threshold`` when the L2 norm exceeds it; returns (grad, clipped)."""
    norm = float(np.sqrt(np.dot(grad, grad)))
    if not math.isfinite(norm):
        raise FloatingPointError("non-finite gradient")
    if norm > threshold:
        return grad * (threshold / norm), True
    return grad, False


def nesterov_step(params: np.ndarray, grad: np.ndarray, velocity: np.ndarray, lr: float, momentum: float):
    """In-place Nesterov update in the lookahead-parameter form.

    ``v <- mu v - lr g``; ``theta <- theta + mu v - lr g`` where ``theta``
    denotes the lookahead point at which gradients are evaluated.
    """
    if params.shape != grad.shape or params.shape != velocity.shape:
        raise ValueError("params, grad and velocity shapes differ")
    velocity *= momentum
    velocity -= lr * grad
    params += momentum * velocity - lr * grad


# --------------------------------------------------------------------------
# data


@dataclass
class Utterance:
    features: np.ndarray  # (T, F)
    label: list[int]
    id: str = ""
    text: str = ""

    def __len__(self):
        return self.features.shape[0]


def pad_batch(utts: Sequence[Utterance]):
    T = max(len(u) for u in utts)
    F = utts[0].features.shape[1]
    x = np.zeros((len(utts), T, F))
    for i, u in enumerate(utts):
        x[i, : len(u)] = u.features
    return x, np.array([len(u) for u in utts]), [list(u.label) for u in utts]


@dataclass
class EpochStats:
    epoch: int
    loss: float
    learning_rate: float
    wall_time: float
    steps: int
    clipped: int
    grad_norms: list = field(default_factory=list)
    dev_cer: float | None = None

    def record(self) -> dict:
        r = {"epoch": self.epoch, "loss": self.loss, "lr": self.learning_rate,
             "wall_time": self.wall_time, "steps": self.steps, "clipped": self.clipped}
        if self.dev_cer is not None:
            r["dev_cer"] = self.dev_cer
        return r


# --------------------------------------------------------------------------
# trainer


class Trainer:
    """Owns the model replicas, the optimizer state and the worker ring."""

    def __init__(self, net: Network, cfg: TrainConfig, ctc_workers: int = 1, hub: InProcessHub | None = None):
        self.cfg = cfg
        if hub is not None and len(hub.endpoints) != cfg.workers:
            raise ValueError(f"transport has {len(hub.endpoints)} endpoints, config asks for {cfg.workers} workers")
        self.replicas = [net] + [net.copy() for _ in range(cfg.workers - 1)]
        # each replica keeps its own velocity; they stay equal because updates are
        self._vel = [np.zeros(net.num_params()) for _ in range(cfg.workers)]
        self.state = OptimizerState(self._vel[0], 0, cfg.learning_rate)
        self.ctc_workers = ctc_workers
        self.topo = RingTopology(cfg.workers)
        self.hub = hub if hub is not None else (InProcessHub(cfg.workers) if cfg.workers > 1 else None)
        self.history: list[EpochStats] = []

    @property
    def net(self) -> Network:
        return self.replicas[0]

    def usable(self, data: Sequence[Utterance]) -> list[Utterance]:
        """Drop utterances whose label cannot fit the strided output length."""
        out = []
        for u in data:
            T_out = int(self.net.out_lengths([len(u)])[0])
            if min_frames(u.label) <= T_out:
                out.append(u)
        return out

    def _worker_grad(self, rank: int, shard: Sequence[Utterance]):
        net = self.replicas[rank]
        x, lengths, labels = pad_batch(shard)
        loss, _, grad = net.loss_and_grad(x, lengths, labels, train=True, workers=self.ctc_workers)
        return np.concatenate([grad, [loss]])

    def step(self, batch: Sequence[Utterance]) -> tuple[float, float, bool]:
        """One synchronous update; returns (mean loss, pre-clip grad norm, clipped)."""
        W = self.cfg.workers
        B = len(batch)
        if B % W:
            raise ValueError(f"batch of {B} cannot be split over {W} workers")
        per = B // W
        shards = [batch[r * per : (r + 1) * per] for r in range(W)]
        if W == 1:
            reduced = [self._worker_grad(0, shards[0])]
        else:
            def work(r):
                local = self._worker_grad(r, shards[r])
                return ring_allreduce(local, r, self.topo, self.hub.endpoints[r])

            reduced = run_threads(work, W)
        st = self.state
        for r, vec in enumerate(reduced):
            g = vec[:-1] / B
            norm = float(np.sqrt(np.dot(g, g)))
            g, clipped = clip_gradient(g, self.cfg.clip_threshold)
            nesterov_step(self.replicas[r].params.data, g, self._vel[r], st.learning_rate, self.cfg.momentum)
        st.step += 1
        return float(reduced[0][-1]) / B, norm, clipped

    def train_epoch(self, data: Sequence[Utterance]) -> EpochStats:
        if not data:
            raise ValueError("training set is empty")
        cfg, st = self.cfg, self.state
        t0 = time.perf_counter()
        batches = sortagrad_order([len(u) for u in data], cfg.minibatch_size, st.epoch, cfg.seed, cfg.sortagrad)
        losses, norms, clipped = [], [], 0
        for idx in batches:
            if len(idx) % cfg.workers:
                idx = idx[: len(idx) - len(idx) % cfg.workers]
                if not len(idx):
                    continue
            loss, norm, c = self.step([data[i] for i in idx])
            losses.append(loss * len(idx))
            norms.append(norm)
            clipped += int(c)
        n = sum(len(b) - len(b) % cfg.workers for b in batches)
        stats = EpochStats(st.epoch, float(sum(losses) / max(n, 1)), st.learning_rate,
                           time.perf_counter() - t0, len(norms), clipped, norms)
        st.epoch += 1
        st.learning_rate = cfg.learning_rate / cfg.anneal_factor**st.epoch
        self.history.append(stats)
        return stats

    def fit(self, train: Sequence[Utterance], dev: Sequence[Utterance] | None = None,
            out_dir=None, symbols: Sequence[str] | None = None, metrics_path=None, log=None,
            extra: dict | None = None):
        """Run ``cfg.epochs`` epochs; keep the checkpoint with the best dev CER.

        ``extra`` is stored in every checkpoint next to the epoch and config.
        """
        from ds2.datapipe import cer
        from ds2.decoder import greedy_decode

        train = self.usable(train)
        out = Path(out_dir) if out_dir is not None else None
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
        best = math.inf
        for _ in range(self.cfg.epochs):
            stats = self.train_epoch(train)
            if dev:
                hyps, refs = [], []
                for u in dev:
                    lp, _ = self.net.predict(u.features)
                    hyps.append(greedy_decode(lp[0]))
                    refs.append(list(u.label))
                stats.dev_cer = float(np.mean([cer(r, h) for r, h in zip(refs, hyps)]))
            if metrics_path is not None:
                with open(metrics_path, "a", encoding="utf-8") as f:
                    f.write(json.dumps(stats.record()) + "\n")
            if log is not None:
                log(stats)
            if out is not None:
                meta = {**(extra or {}), "epoch": stats.epoch, "config": asdict(self.cfg)}
                save_checkpoint(self.net, out / "last.ds2c", symbols, meta)
                score = stats.dev_cer if stats.dev_cer is not None else stats.loss
                if score < best:
                    best = score
                    save_checkpoint(self.net, out / "best.ds2c", symbols, meta)
        return self.history


def replicas_identical(trainer: Trainer) -> bool:
    ref = trainer.replicas[0].params.data.tobytes()
    return all(r.params.data.tobytes() == ref for r in trainer.replicas[1:])


def resume(path, cfg: TrainConfig, symbols=None) -> Trainer:
    net, extra = load_checkpoint(path, symbols)
    tr = Trainer(net, cfg)
    tr.state.epoch = int(extra.get("epoch", -1)) + 1
    tr.state.learning_rate = cfg.learning_rate / cfg.anneal_factor**tr.state.epoch
    return tr
