"""``ds2`` command-line entry point.

Every subcommand that writes artifacts puts them under its output
directory together with ``run.json``: the resolved configuration and a
git-style blob hash of every input file.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from ds2 import __version__

# --------------------------------------------------------------------------
# run plumbing


def blob_hash(path) -> str:
    """Content hash computed the way git names blobs."""
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def write_run_manifest(out_dir, command: str, config: dict, inputs=()):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rec = {
        "command": command,
        "version": __version__,
        "config": config,
        "inputs": {str(p): blob_hash(p) for p in inputs if p and Path(p).is_file()},
    }
    (out / "run.json").write_text(json.dumps(rec, indent=2, sort_keys=True) + "\n", encoding="utf-8")


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# feature front end stored with every checkpoint


@dataclass
class Frontend:
    sample_rate: int
    window: float
    hop: float
    mean: list | None = None
    std: list | None = None

    def raw(self, clip) -> np.ndarray:
        from ds2.features import compute_spectrogram

        if clip.sample_rate != self.sample_rate:
            raise ValueError(f"audio is {clip.sample_rate} Hz, model expects {self.sample_rate} Hz")
        return compute_spectrogram(clip, self.window, self.hop).frames

    def __call__(self, clip) -> np.ndarray:
        f = self.raw(clip)
        if self.mean is None:
            return f
        return (f - np.asarray(self.mean)) / np.asarray(self.std)

    @property
    def hop_samples(self) -> int:
        return int(round(self.hop * self.sample_rate))

    @property
    def input_dim(self) -> int:
        return int(round(self.window * self.sample_rate)) // 2 + 1

    def fit(self, clips):
        stacked = np.concatenate([self.raw(c) for c in clips])
        self.mean = stacked.mean(axis=0).tolist()
        self.std = (stacked.std(axis=0) + 1e-6).tolist()
        return self


def load_model(path):
    from ds2.nn import load_checkpoint

    net, extra = load_checkpoint(path)
    if "frontend" not in extra or "symbols" not in extra:
        raise ValueError(f"{path} lacks front-end metadata; was it written by `ds2 train`?")
    return net, Frontend(**extra["frontend"]), list(extra["symbols"]), extra


# --------------------------------------------------------------------------
# train configuration


@dataclass
class TrainRun:
    """All keys accepted by ``ds2 train --config``; see README for meanings."""

    data: str = "tone"  # tone | manifest
    manifest: str = ""
    dev_manifest: str = ""
    alphabet: str = ""
    n_train: int = 500
    n_dev: int = 100
    min_chars: int = 1
    max_chars: int = 12
    data_seed: int = 0
    sample_rate: int = 16000
    window: float = 0.020
    hop: float = 0.010
    conv_channels: int = 16
    conv_width: int = 5
    conv_stride: int = 2
    rnn_layers: int = 1
    rnn_hidden: int = 32
    rnn_kind: str = "simple"
    bidirectional: bool = True
    batchnorm: bool = False
    rowconv: int = 0
    dense: int = 0
    learning_rate: float = 1e-3
    anneal_factor: float = 1.2
    momentum: float = 0.99
    clip_threshold: float = 25.0
    minibatch_size: int = 16
    epochs: int = 10
    sortagrad: bool = True
    seed: int = 0
    workers: int = 1
    ctc_workers: int = 1

    @classmethod
    def resolve(cls, text: str = "", overrides: dict | None = None) -> "TrainRun":
        from ds2.trainer import parse_kv

        types = {f.name: f.type for f in fields(cls)}
        vals = parse_kv(text, types)
        for k, v in (overrides or {}).items():
            if k not in types:
                raise UsageError(f"unknown config key {k!r}")
            vals[k] = parse_kv(f"{k}={v}", types)[k] if isinstance(v, str) else v
        return cls(**vals)

    def specs(self):
        from ds2.nn import ConvSpec, DenseSpec, RecurrentSpec, RowConvSpec

        s = [ConvSpec(self.conv_channels, self.conv_width, stride_time=self.conv_stride, batchnorm=self.batchnorm)]
        for _ in range(self.rnn_layers):
            s.append(RecurrentSpec(self.rnn_hidden, self.rnn_kind, self.bidirectional, self.batchnorm))
        if self.rowconv:
            s.append(RowConvSpec(self.rowconv))
        if self.dense:
            s.append(DenseSpec(self.dense, self.batchnorm))
        return s

    def train_config(self):
        from ds2.trainer import TrainConfig

        keys = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in asdict(self).items() if k in keys})


def _manifest_data(path, frontend: Frontend | None, alphabet, fit: bool):
    from ds2.datapipe import read_manifest
    from ds2.features import Alphabet, load_audio
    from ds2.trainer import Utterance

    entries = read_manifest(path)
    base = Path(path).parent
    clips = [load_audio(base / e.audio_path, frontend.sample_rate) for e in entries]
    if alphabet is None:
        alphabet = Alphabet(sorted({c for e in entries for c in e.transcript}))
    if fit:
        frontend.fit(clips)
    utts = [Utterance(frontend(c), alphabet.encode(e.transcript), e.id, e.transcript) for c, e in zip(clips, entries)]
    return utts, alphabet


def build_training_data(run: TrainRun):
    from ds2.features import Alphabet
    from ds2.synth import HOP, SAMPLE_RATE, WINDOW, ToneTask, make_dataset

    if run.data == "tone":
        task, train, _ = make_dataset(run.n_train, run.data_seed, ToneTask(min_chars=run.min_chars, max_chars=run.max_chars))
        _, dev, _ = make_dataset(run.n_dev, run.data_seed + 1, task)
        fe = Frontend(SAMPLE_RATE, WINDOW, HOP, task.mean.tolist(), task.std.tolist())
        return train, dev, list(task.symbols), fe, []
    if run.data == "manifest":
        if not run.manifest:
            raise UsageError("data=manifest needs manifest=<path>")
        fe = Frontend(run.sample_rate, run.window, run.hop)
        alpha = Alphabet(list(run.alphabet)) if run.alphabet else None
        train, alpha = _manifest_data(run.manifest, fe, alpha, fit=True)
        dev = _manifest_data(run.dev_manifest, fe, alpha, fit=False)[0] if run.dev_manifest else []
        return train, dev, alpha.symbols, fe, [run.manifest, run.dev_manifest]
    raise UsageError(f"unknown data source {run.data!r} (tone or manifest)")


# --------------------------------------------------------------------------
# subcommands


def cmd_train(args):
    from ds2.nn import Network
    from ds2.trainer import Trainer

    text = Path(args.config).read_text(encoding="utf-8") if args.config else ""
    over = dict(kv.split("=", 1) for kv in args.set)
    for k in ("seed", "epochs", "workers"):
        if getattr(args, k) is not None:
            over[k] = getattr(args, k)
    run = TrainRun.resolve(text, over)
    train, dev, symbols, fe, inputs = build_training_data(run)
    net = Network(fe.input_dim, run.specs(), len(symbols), seed=run.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics = out / "metrics.jsonl"
    metrics.unlink(missing_ok=True)
    tr = Trainer(net, run.train_config(), ctc_workers=run.ctc_workers)
    log = None if args.quiet else (lambda s: print(json.dumps(s.record()), flush=True))
    tr.fit(train, dev or None, out, symbols, metrics, log, extra={"frontend": asdict(fe), "symbols": symbols})
    write_run_manifest(out, "train", asdict(run), [args.config, *inputs])
    return 0


def _decode_inputs(args, fe: Frontend):
    from ds2.datapipe import read_manifest
    from ds2.features import load_audio

    items = []
    if args.manifest:
        base = Path(args.manifest).parent
        for e in read_manifest(args.manifest):
            items.append((e.id, fe(load_audio(base / e.audio_path, fe.sample_rate))))
    for p in args.inputs:
        if str(p).endswith(".npy"):
            items.append((Path(p).stem, np.load(p)))
        else:
            items.append((Path(p).stem, fe(load_audio(p, fe.sample_rate))))
    if not items:
        raise UsageError("nothing to decode: give audio files or --manifest")
    return items


def cmd_decode(args):
    from ds2.decoder import DecoderConfig, beam_search, greedy_decode
    from ds2.lm import NGramModel

    net, fe, symbols, _ = load_model(args.checkpoint)
    lm = NGramModel.load(args.lm) if args.lm else None
    cfg = DecoderConfig(args.alpha, args.beta, args.beam, args.prune_p, args.max_symbols)
    lines = []
    for uid, feats in _decode_inputs(args, fe):
        lp, _ = net.predict(feats)
        if args.beam == 1 and args.alpha == 0 and args.beta == 0:
            text = "".join(symbols[i] for i in greedy_decode(lp[0]))
        else:
            text = beam_search(lp[0], cfg, lm=lm, symbols=symbols).text
        lines.append(f"{uid}\t{text}")
    body = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "hypotheses.tsv").write_text(body, encoding="utf-8")
        write_run_manifest(args.out, "decode", vars_of(args), [args.checkpoint, args.lm, args.manifest, *args.inputs])
    sys.stdout.write(body)
    return 0


def _transcript(args) -> str:
    if args.transcript_file:
        return Path(args.transcript_file).read_text(encoding="utf-8").strip()
    if args.transcript is None:
        raise UsageError("give --transcript or --transcript-file")
    return args.transcript


def _align(args):
    from ds2.datapipe import align_with_model
    from ds2.features import Alphabet, load_audio

    net, fe, symbols, _ = load_model(args.checkpoint)
    clip = load_audio(args.audio, fe.sample_rate)
    labels = Alphabet(symbols).encode(_transcript(args))
    al = align_with_model(net, fe(clip), labels, min_logprob=args.min_logprob)
    return net, fe, symbols, clip, al


def cmd_align(args):
    net, fe, symbols, clip, al = _align(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_run_manifest(out, "align", vars_of(args), [args.checkpoint, args.audio, args.transcript_file])
    if not al.feasible:
        print(f"ds2 align: rejected: {al.reason}", file=sys.stderr)
        return 1
    names = symbols + ["<blank>"]
    with open(out / "alignment.tsv", "w", encoding="utf-8") as f:
        f.write("frame\tinput_frame\tsymbol\n")
        for t, c in enumerate(al.path):
            f.write(f"{t}\t{t * net.time_stride}\t{names[c]}\n")
    print(f"aligned {len(al.path)} frames")
    return 0


def cmd_segment(args):
    from ds2.datapipe import ManifestEntry, segment, splice, write_manifest
    from ds2.features import write_wav

    net, fe, symbols, clip, al = _align(args)
    out = Path(args.out)
    (out / "segments").mkdir(parents=True, exist_ok=True)
    write_run_manifest(out, "segment", vars_of(args), [args.checkpoint, args.audio, args.transcript_file])
    if not al.feasible:
        print(f"ds2 segment: rejected: {al.reason}", file=sys.stderr)
        return 1
    space = symbols.index(" ") if " " in symbols else None
    if args.require_space and space is None:
        raise UsageError("--require-space but the alphabet has no space")
    segs = segment(al, args.min_blank_run, args.require_space, space, source=Path(args.audio).stem)
    entries = []
    with open(out / "segments.tsv", "w", encoding="utf-8") as f:
        f.write("id\tstart_frame\tend_frame\tspeech_start\tspeech_end\ttranscript\n")
        for i, s in enumerate(segs):
            s = s.scaled(net.time_stride)
            sid = f"{s.source}-{i:04d}"
            text = "".join(symbols[c] for c in s.labels)
            piece = splice(clip, s, fe.hop_samples)
            write_wav(out / "segments" / f"{sid}.wav", piece)
            entries.append(ManifestEntry(sid, f"segments/{sid}.wav", text, piece.duration))
            f.write(f"{sid}\t{s.start}\t{s.end}\t{s.speech_start}\t{s.speech_end}\t{text}\n")
    write_manifest(out / "manifest.jsonl", entries)
    print(f"{len(segs)} segments")
    return 0


def cmd_augment(args):
    from ds2.datapipe import ManifestEntry, augment_noise, read_manifest, write_manifest
    from ds2.features import load_audio, write_wav

    entries = read_manifest(args.manifest)
    base = Path(args.manifest).parent
    clips = [load_audio(base / e.audio_path, args.sample_rate) for e in entries]
    noise = [load_audio(p, args.sample_rate) for p in args.noise]
    mixed, records = augment_noise(clips, noise, args.fraction, (args.snr_low, args.snr_high), args.seed)
    out = Path(args.out)
    (out / "audio").mkdir(parents=True, exist_ok=True)
    snr = dict(records)
    new = []
    for i, (e, c) in enumerate(zip(entries, mixed)):
        write_wav(out / "audio" / f"{e.id}.wav", c)
        new.append(ManifestEntry(e.id, f"audio/{e.id}.wav", e.transcript, c.duration))
    write_manifest(out / "manifest.jsonl", new)
    with open(out / "augmented.tsv", "w", encoding="utf-8") as f:
        f.write("id\tsnr_db\n")
        for i in sorted(snr):
            f.write(f"{entries[i].id}\t{snr[i]:.4f}\n")
    write_run_manifest(out, "augment", vars_of(args), [args.manifest, *args.noise])
    print(f"augmented {len(records)} of {len(entries)}")
    return 0


def cmd_lm_build(args):
    from ds2.lm import train_ngram, write_arpa

    lines = Path(args.corpus).read_text(encoding="utf-8").splitlines()
    model = train_ngram([l for l in lines if l.strip()], args.order, args.discount, args.min_count, args.mode)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_arpa(model, out / "lm.arpa")
    write_run_manifest(out, "lm-build", vars_of(args), [args.corpus])
    print(f"wrote {out / 'lm.arpa'} ({len(model.vocab)} types)")
    return 0


def cmd_serve(args):
    from ds2.decoder import DecoderConfig
    from ds2.dispatch import InferenceServer
    from ds2.lm import NGramModel

    net, fe, symbols, _ = load_model(args.checkpoint)
    lm = NGramModel.load(args.lm) if args.lm else None
    cfg = DecoderConfig(args.alpha, args.beta, args.beam, 0.99, 40)
    srv = InferenceServer((args.host, args.port), net, symbols, args.max_batch, cfg, lm)
    host, port = srv.server_address
    print(f"listening on {host}:{port}", flush=True)
    try:
        srv.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        srv.server_close()
    return 0


def cmd_loadgen(args):
    from ds2.dispatch import CostModel, load_sweep, socket_load, sweep_tsv

    loads = [int(x) for x in args.loads.split(",")]
    if args.connect:
        host, port = args.connect.rsplit(":", 1)
        lines = ["load\tmedian_ms\tp98_ms"]
        for load in loads:
            st = socket_load(host, int(port), load, args.chunks, args.chunk_frames, args.dim, args.period, args.seed)
            lines.append(f"{load}\t{st.median * 1e3:.3f}\t{st.p98 * 1e3:.3f}")
        body = "\n".join(lines) + "\n"
    else:
        cost = CostModel(args.overhead, args.per_frame)
        body = sweep_tsv(load_sweep(loads, args.duration, cost, args.max_batch, args.seed))
    _emit(args, "loadgen", "loadgen.tsv", body)
    return 0


def cmd_bench_allreduce(args):
    from ds2.allreduce import bench_allreduce, write_bench_tsv

    rows = bench_allreduce([int(x) for x in args.sizes.split(",")], [int(x) for x in args.workers.split(",")],
                           args.repeats, args.transport)
    lines = ["size\tN\tseconds\tMB/s\tpayload_bytes"]
    lines += [f"{s}\t{n}\t{sec:.6g}\t{mb:.6g}\t{sent}" for s, n, sec, mb, sent in rows]
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        write_bench_tsv(rows, Path(args.out) / "allreduce.tsv")
        write_run_manifest(args.out, "bench-allreduce", vars_of(args))
    print("\n".join(lines))
    return 0


def cmd_bench_alloc(args):
    from ds2.memarena import bench_alloc

    res = bench_alloc(args.ops, capacity=args.capacity, seed=args.seed)
    _emit(args, "bench-alloc", "alloc.txt", "".join(f"{k}={v}\n" for k, v in res.items()))
    return 0


def cmd_eval_wer(args):
    from ds2.datapipe import corpus_error_rate

    refs = Path(args.ref).read_text(encoding="utf-8").splitlines()
    hyps = Path(args.hyp).read_text(encoding="utf-8").splitlines()
    rate = corpus_error_rate(refs, hyps, words=not args.cer)
    _emit(args, "eval-wer", "score.txt", f"{rate}\n", [args.ref, args.hyp])
    return 0


def cmd_synth(args):
    from ds2.datapipe import ManifestEntry, write_manifest
    from ds2.features import write_wav
    from ds2.synth import ToneTask, make_long_recording

    task = ToneTask(min_chars=args.min_chars, max_chars=args.max_chars)
    rng = np.random.default_rng(args.seed)
    out = Path(args.out)
    (out / "audio").mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(args.n):
        lab = task.random_label(rng)
        clip, _ = task.render(lab, rng)
        uid = f"tone-{i:05d}"
        write_wav(out / "audio" / f"{uid}.wav", clip)
        entries.append(ManifestEntry(uid, f"audio/{uid}.wav", task.text(lab), clip.duration))
    write_manifest(out / "manifest.jsonl", entries)
    if args.long:
        rec = make_long_recording(task, args.long, seed=args.seed + 1)
        write_wav(out / "long.wav", rec.clip)
        (out / "long.txt").write_text(task.text(rec.transcript) + "\n", encoding="utf-8")
        with open(out / "long_truth.tsv", "w", encoding="utf-8") as f:
            f.write("index\tstart_frame\tend_frame\ttranscript\n")
            for i, ((a, b), lab) in enumerate(zip(rec.spans, rec.labels)):
                f.write(f"{i}\t{a}\t{b}\t{task.text(lab)}\n")
    write_run_manifest(out, "synth", vars_of(args))
    print(f"wrote {args.n} utterances to {out}")
    return 0


def _emit(args, command, name, body, inputs=()):
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / name).write_text(body, encoding="utf-8")
        write_run_manifest(args.out, command, vars_of(args), inputs)
    sys.stdout.write(body)


def vars_of(args) -> dict:
    return {k: v for k, v in vars(args).items() if k != "func"}


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ds2", description="End-to-end CTC speech recognition toolkit.")
    p.add_argument("--version", action="version", version=f"ds2 {__version__}")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, func, help):
        sp = sub.add_parser(name, help=help, description=help)
        sp.set_defaults(func=func)
        return sp

    t = add("train", cmd_train, "train a model from a key=value config")
    t.add_argument("--config", help="key=value config file")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--workers", type=int)
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--quiet", action="store_true")

    d = add("decode", cmd_decode, "transcribe audio files with a trained model")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("inputs", nargs="*", help="audio (.wav / raw float32) or feature (.npy) files")
    d.add_argument("--manifest")
    d.add_argument("--lm", help="ARPA language model")
    d.add_argument("--alpha", type=float, default=0.0)
    d.add_argument("--beta", type=float, default=0.0)
    d.add_argument("--beam", type=int, default=32)
    d.add_argument("--prune-p", type=float, default=1.0)
    d.add_argument("--max-symbols", type=int)
    d.add_argument("--out")

    for name, func, help in (("align", cmd_align, "force-align a long recording to its transcript"),
                             ("segment", cmd_segment, "cut a long recording into utterances at long blank runs")):
        a = add(name, func, help)
        a.add_argument("--checkpoint", required=True)
        a.add_argument("--audio", required=True)
        a.add_argument("--transcript")
        a.add_argument("--transcript-file")
        a.add_argument("--min-logprob", type=float, default=-9.21, help="mean emission log posterior floor")
        a.add_argument("--out", required=True)
        if name == "segment":
            a.add_argument("--min-blank-run", type=int, default=7, help="in model output frames")
            a.add_argument("--require-space", action="store_true")

    g = add("augment", cmd_augment, "mix noise into a fraction of a dataset")
    g.add_argument("--manifest", required=True)
    g.add_argument("--noise", nargs="+", required=True)
    g.add_argument("--fraction", type=float, default=0.4)
    g.add_argument("--snr-low", type=float, default=0.0)
    g.add_argument("--snr-high", type=float, default=30.0)
    g.add_argument("--sample-rate", type=int)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)

    m = add("lm-build", cmd_lm_build, "train a Kneser-Ney n-gram model and write ARPA")
    m.add_argument("--corpus", required=True, help="one sentence per line")
    m.add_argument("--order", type=int, default=3)
    m.add_argument("--mode", choices=("word", "char"), default="word")
    m.add_argument("--discount", type=float, default=0.75)
    m.add_argument("--min-count", type=int, default=1)
    m.add_argument("--out", required=True)

    s = add("serve", cmd_serve, "streaming inference server with eager batching")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=int, default=8765)
    s.add_argument("--max-batch", type=int, default=32)
    s.add_argument("--lm")
    s.add_argument("--alpha", type=float, default=0.0)
    s.add_argument("--beta", type=float, default=0.0)
    s.add_argument("--beam", type=int, default=32)

    lg = add("loadgen", cmd_loadgen, "latency and batch-size sweep over load levels")
    lg.add_argument("--loads", default="10,20,30")
    lg.add_argument("--duration", type=float, default=60.0)
    lg.add_argument("--seed", type=int, default=0)
    lg.add_argument("--overhead", type=float, default=0.007, help="simulated seconds per batch")
    lg.add_argument("--per-frame", type=float, default=0.0005, help="simulated seconds per frame")
    lg.add_argument("--max-batch", type=int, default=32)
    lg.add_argument("--connect", metavar="HOST:PORT", help="drive a live server instead of simulating")
    lg.add_argument("--chunks", type=int, default=20)
    lg.add_argument("--chunk-frames", type=int, default=10)
    lg.add_argument("--dim", type=int, default=65)
    lg.add_argument("--period", type=float, default=0.0)
    lg.add_argument("--out")

    b = add("bench-allreduce", cmd_bench_allreduce, "ring all-reduce throughput")
    b.add_argument("--sizes", default="1000,100000,1000000")
    b.add_argument("--workers", default="2,4,8")
    b.add_argument("--repeats", type=int, default=3)
    b.add_argument("--transport", choices=("inproc", "socket"), default="inproc")
    b.add_argument("--out")

    ba = add("bench-alloc", cmd_bench_alloc, "arena vs fresh allocations")
    ba.add_argument("--ops", type=int, default=2000)
    ba.add_argument("--capacity", type=int, default=1 << 26)
    ba.add_argument("--seed", type=int, default=0)
    ba.add_argument("--out")

    e = add("eval-wer", cmd_eval_wer, "corpus WER (or CER) of line-aligned reference and hypothesis files")
    e.add_argument("ref")
    e.add_argument("hyp")
    e.add_argument("--cer", action="store_true")
    e.add_argument("--out")

    sy = add("synth", cmd_synth, "write a synthetic tone dataset (and optionally a long recording)")
    sy.add_argument("--n", type=int, default=20)
    sy.add_argument("--min-chars", type=int, default=1)
    sy.add_argument("--max-chars", type=int, default=12)
    sy.add_argument("--long", type=int, default=0, help="utterances in an extra long recording")
    sy.add_argument("--seed", type=int, default=0)
    sy.add_argument("--out", required=True)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"ds2 {args.command}: error: {e}", file=sys.stderr)
        return 2
    except (ValueError, OSError, KeyError, RuntimeError) as e:
        print(f"ds2 {args.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
