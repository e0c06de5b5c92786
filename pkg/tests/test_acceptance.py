"""End-to-end acceptance gate.

Each test records one verdict through ``verdict``; ``conftest.py`` prints
the PASS/FAIL table at the end of the session, marking any criterion
whose test errored before reaching its verdict as FAIL.
"""

import math
import time

import numpy as np
import pytest

from oracles import (
    brute_force_decode,
    central_difference,
    ctc_path_sum,
    edit_distance,
    peaked_family,
    random_instance,
    rel_error,
    softmax,
)

VERDICTS: dict[int, tuple[bool, str, str]] = {}

TITLES = {
    1: "CTC loss equals brute-force path sum",
    2: "CTC gradient matches central differences",
    3: "parallel CTC equals reference",
    4: "full-stack gradient check",
    5: "exhaustive beam equals brute-force argmax",
    6: "large-vocabulary pruning",
    7: "ring all-reduce",
    8: "data-parallel equivalence",
    9: "tone task learning and SortaGrad clipping",
    10: "streaming equivalence",
    11: "batch dispatch simulation",
    12: "buddy arena",
    13: "long-recording segmentation and filtering",
    14: "deterministic train runs",
}


def verdict(n: int, ok: bool, detail: str):
    VERDICTS[n] = (bool(ok), TITLES[n], detail)
    assert ok, f"criterion {n}: {detail}"


# --------------------------------------------------------------------------


def test_01_ctc_brute_force():
    from ds2.ctc import ctc_loss_reference

    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(500):
        logits, label = random_instance(rng, 6, 3, 3)
        loss, _ = ctc_loss_reference(logits, label)
        worst = max(worst, abs(math.exp(-loss) - ctc_path_sum(softmax(logits), label, logits.shape[1] - 1)))
    elapsed = time.perf_counter() - t0
    verdict(1, worst <= 1e-9 and elapsed < 10, f"max |diff| {worst:.2e}, {elapsed:.2f} s")


def test_02_ctc_gradient():
    from ds2.ctc import ctc_loss_reference

    rng = np.random.default_rng(102)
    worst = 0.0
    for _ in range(50):
        logits, label = random_instance(rng, 10, 4, 4, T_min=2)
        _, grad = ctc_loss_reference(logits, label)
        num = central_difference(lambda: ctc_loss_reference(logits, label)[0], logits, h=1e-5)
        worst = max(worst, rel_error(grad, num))
    verdict(2, worst <= 1e-6, f"max relative error {worst:.2e}")


def test_03_parallel_ctc():
    from ds2 import ctc
    from ds2.ctc import ctc_loss_parallel, ctc_loss_reference

    rng = np.random.default_rng(103)
    worst, garbage_seen, band_clean = 0.0, 0, True
    for i in range(500):
        logits, label = random_instance(rng, 20, 8, 5)
        r_loss, r_grad = ctc_loss_reference(logits, label)
        p_loss, p_grad, lat = ctc_loss_parallel(logits, label, workers=1 + i % 4, return_lattice=True)
        worst = max(worst, abs(r_loss - p_loss), float(np.max(np.abs(r_grad - p_grad))))
        band = ctc.valid_band(len(lat.augmented_label), logits.shape[0])
        garbage_seen += bool((np.isfinite(lat.alpha) & ~band).any())
        band_clean &= bool(np.all(lat.combined[~band] == -np.inf))
    ok = worst <= 1e-9 and band_clean and garbage_seen > 0
    verdict(3, ok, f"max diff {worst:.2e}; {garbage_seen} lattices had finite cells outside the band, "
                   f"all cancelled: {band_clean}")


def test_04_full_stack_gradient():
    from test_nn import finite_difference_per_tensor

    from ds2.nn import ConvSpec, DenseSpec, Network, RecurrentSpec, RowConvSpec

    specs = [
        ConvSpec(2, 3, 2, stride_time=2, stride_freq=2, batchnorm=True),
        RecurrentSpec(3, batchnorm=True),
        RecurrentSpec(3, kind="gru", batchnorm=True),
        RowConvSpec(2),
        DenseSpec(4),
    ]
    net = Network(4, specs, alphabet_size=3, seed=0)
    x = np.random.default_rng(104).normal(size=(2, 9, 4))
    errs = finite_difference_per_tensor(net, x, [9, 7], [[0, 1], [2]])
    worst = max(errs, key=errs.get)
    verdict(4, errs[worst] <= 1e-5, f"{len(errs)} tensors, worst {worst} at {errs[worst]:.2e}")


def test_05_exhaustive_beam():
    from ds2.decoder import DecoderConfig, beam_search
    from ds2.ctc import log_softmax

    rng = np.random.default_rng(105)
    cases = []
    for T in range(1, 5):
        for A in (1, 2):
            cases += [rng.normal(scale=1.5, size=(T, A + 1)) for _ in range(40)]
            # coarse logits produce exactly tied label sequences
            cases += [rng.integers(0, 2, size=(T, A + 1)).astype(float) for _ in range(20)]
            cases.append(np.zeros((T, A + 1)))
    bad = 0
    for logits in cases:
        T, K = logits.shape
        res = beam_search(log_softmax(logits), DecoderConfig(beam_width=K ** T))
        _, lab = brute_force_decode(logits, K - 1)
        bad += tuple(res.labels) != lab
    verdict(5, bad == 0, f"{len(cases) - bad}/{len(cases)} exact matches")


def test_06_pruning():
    from ds2.decoder import DecoderConfig, beam_search

    rng = np.random.default_rng(106)
    evals_full = evals_pruned = differ = total = 0
    for _ in range(20):
        lp = peaked_family(rng, 50, 6000)
        full = beam_search(lp, DecoderConfig(beam_width=4))
        pruned = beam_search(lp, DecoderConfig(beam_width=4, prune_p=0.99, max_symbols=40))
        evals_full += full.candidate_evals
        evals_pruned += pruned.candidate_evals
        differ += edit_distance(full.labels, pruned.labels)
        total += len(full.labels)
    ratio, rate = evals_full / evals_pruned, differ / total
    verdict(6, ratio >= 100 and rate <= 0.005, f"{ratio:.0f}x fewer evaluations, {differ}/{total} symbols differ")


def test_07_ring_allreduce():
    from ds2.allreduce import allreduce_inprocess, reference_sum

    rng = np.random.default_rng(107)
    bitwise = messages = True
    for n in (1, 2, 3, 4, 8):
        for length in (1, 7, 100, 1001):
            vecs = [rng.normal(size=length) * 10.0 ** rng.integers(-3, 4) for _ in range(n)]
            out, hub = allreduce_inprocess(vecs)
            ref = reference_sum(vecs)
            bitwise &= all(o.tobytes() == ref.tobytes() for o in out)
            messages &= all(ep.messages_sent == 2 * (n - 1) for ep in hub.endpoints)
    fuzz_ok = 0
    for run in range(1000):
        n = int(rng.choice([2, 3, 4, 8]))
        length = int(rng.integers(1, 20))
        vecs = [rng.normal(size=length) for _ in range(n)]
        out, _ = allreduce_inprocess(vecs, max_delay=2e-5, seed=run)
        ref = reference_sum(vecs)
        fuzz_ok += all(o.tobytes() == ref.tobytes() for o in out)
    verdict(7, bitwise and messages and fuzz_ok == 1000,
            f"bitwise {bitwise}, 2(N-1) messages {messages}, fuzz {fuzz_ok}/1000 completed and exact")


def test_08_data_parallel():
    from test_trainer import small_net, toy_data

    from ds2.trainer import TrainConfig, Trainer, replicas_identical

    data = toy_data(8, seed=108)
    one = Trainer(small_net(seed=8), TrainConfig(learning_rate=1e-3, minibatch_size=8, workers=1))
    four = Trainer(small_net(seed=8), TrainConfig(learning_rate=1e-3, minibatch_size=8, workers=4))
    for _ in range(5):
        one.step(data)
        four.step(data)
    dist = float(np.max(np.abs(one.net.get_flat() - four.net.get_flat())))
    moved = float(np.max(np.abs(one.net.get_flat() - small_net(seed=8).get_flat())))
    ok = dist <= 1e-10 and replicas_identical(four) and moved > 0
    verdict(8, ok, f"max parameter distance {dist:.1e} after 5 steps (parameters moved {moved:.1e})")


# --------------------------------------------------------------------------
# tone task, shared by criteria 9 and 13

MIN_EPOCHS_FOR_PIPELINE = 8


@pytest.fixture(scope="module")
def tone_model():
    from ds2.decoder import greedy_decode
    from ds2.nn import ConvSpec, Network, RecurrentSpec
    from ds2.synth import ToneTask, make_dataset
    from ds2.trainer import TrainConfig, Trainer

    task, train, _ = make_dataset(500, 0, ToneTask(min_chars=1, max_chars=12))
    _, dev, _ = make_dataset(200, 1, task)
    net = Network(task.input_dim, [ConvSpec(16, 5, stride_time=2), RecurrentSpec(32)], alphabet_size=5, seed=0)
    tr = Trainer(net, TrainConfig(learning_rate=1e-3, momentum=0.99, minibatch_size=16, clip_threshold=25))
    usable = tr.usable(train)
    t0 = time.perf_counter()
    accs, reached = [], None
    for epoch in range(30):
        tr.train_epoch(usable)
        acc = float(np.mean([greedy_decode(net.predict(u.features)[0][0]) == u.label for u in dev]))
        accs.append(acc)
        if reached is None and acc >= 0.95:
            reached = epoch + 1
        if reached is not None and epoch + 1 >= MIN_EPOCHS_FOR_PIPELINE:
            break
    return {
        "task": task, "net": net, "train": train, "accs": accs, "reached": reached,
        "seconds": time.perf_counter() - t0, "n_train": len(usable),
    }


def epoch0_clips(train, lr, sortagrad, seed):
    from ds2.nn import ConvSpec, Network, RecurrentSpec
    from ds2.trainer import TrainConfig, Trainer

    net = Network(train[0].features.shape[1], [ConvSpec(16, 5, stride_time=2), RecurrentSpec(32)],
                  alphabet_size=5, seed=seed)
    cfg = TrainConfig(learning_rate=lr, momentum=0.99, minibatch_size=16, clip_threshold=25,
                      sortagrad=sortagrad, seed=seed)
    tr = Trainer(net, cfg)
    return tr.train_epoch(tr.usable(train)).clipped


def test_09_tone_task(tone_model):
    m = tone_model
    learned = m["reached"] is not None and m["seconds"] < 600
    on = sum(epoch0_clips(m["train"], 3e-3, True, s) for s in range(3))
    off = sum(epoch0_clips(m["train"], 3e-3, False, s) for s in range(3))
    detail = (f"{m['n_train']} utterances; held-out accuracy {m['accs'][-1]:.3f}, >=0.95 first at epoch "
              f"{m['reached']} ({m['seconds']:.0f} s for {len(m['accs'])} epochs); "
              f"epoch-0 clips at 3x lr over seeds 0-2: sortagrad off {off} vs on {on}")
    verdict(9, learned and off > on, detail)


def test_10_streaming():
    from ds2.dispatch import stream_forward
    from ds2.nn import ConvSpec, DenseSpec, Network, RecurrentSpec, RowConvSpec

    specs = [
        ConvSpec(3, 3, stride_time=2, batchnorm=True),
        RecurrentSpec(6, bidirectional=False),
        RecurrentSpec(5, kind="gru", bidirectional=False, batchnorm=True),
        RowConvSpec(2),
        DenseSpec(5),
    ]
    net = Network(4, specs, alphabet_size=3, seed=10)
    rng = np.random.default_rng(110)
    # one training pass gives the BN layers running statistics for inference
    net.loss_and_grad(rng.normal(size=(3, 30, 4)), [30, 25, 20], [[0, 1], [2], [1, 1]])
    worst = 0.0
    for T in (1, 23, 40):
        x = rng.normal(size=(T, 4))
        full, _ = net.predict(x)
        for chunk in (1, 7, T):
            st_ = net.stream_start()
            parts = [stream_forward(net, st_, x[i : i + chunk]) for i in range(0, T, chunk)]
            parts.append(stream_forward(net, st_, np.zeros((0, 4)), final=True))
            got = np.concatenate([p for p in parts if len(p)])
            assert got.shape == full[0].shape
            worst = max(worst, float(np.max(np.abs(got - full[0]))))
    verdict(10, worst <= 1e-10, f"max |chunked - full| {worst:.1e} over chunks 1, 7 and full")


def test_11_dispatch():
    from ds2.dispatch import CostModel, load_sweep

    (_, b10, s10), (_, b30, _) = load_sweep([10, 30], duration=60.0, cost=CostModel(), seed=0)
    frac = b10.work_fraction(2)
    ok = frac > 0.5 and b30.mean_batch > b10.mean_batch and b10.stats.p98 <= s10.stats.p98
    verdict(11, ok, f"load 10: {frac:.1%} of work in batches >=2, mean batch {b10.mean_batch:.2f} "
                    f"(load 30: {b30.mean_batch:.2f}); p98 batched {b10.stats.p98 * 1e3:.1f} ms "
                    f"vs serial {s10.stats.p98 * 1e3:.1f} ms")


def test_12_arena():
    from ds2.memarena import Arena

    rng = np.random.default_rng(112)
    capacity = 1 << 24
    a = Arena(capacity, 256)
    live, tags = [], {}
    warm = a.alloc(1 << 20)
    a.free(warm)
    baseline = a.system_calls_after_warmup
    for i in range(100_000):
        grow = rng.random() < (0.6 if len(live) < 64 else 0.4)
        if grow or not live:
            blk = a.alloc(int(rng.integers(1, 1 << 16)))
            v = a.view(blk)
            assert np.shares_memory(v, a.buffer) and blk.offset % blk.size == 0
            tags[blk.id] = i % 251
            v[:] = tags[blk.id]
            live.append(blk)
        else:
            blk = live.pop(int(rng.integers(len(live))))
            # a neighbour overwriting this block would show up here
            assert np.all(a.view(blk) == tags.pop(blk.id))
            a.free(blk)
        if i % 10 == 0:
            a.check_invariants()
    syscalls = a.system_calls_after_warmup - baseline
    for blk in live:
        a.free(blk)
    a.check_invariants()
    ok = syscalls == 0 and a.free_blocks() == [(0, capacity)]
    verdict(12, ok, f"1e5 ops, {syscalls} system allocations after warmup, "
                    f"free list after teardown {a.free_blocks()}")


def test_13_pipeline(tone_model):
    from ds2.datapipe import align_with_model, corrupt_label, filter_features, roc_auc, segment, train_filter
    from ds2.synth import make_dataset, make_long_recording

    task, net = tone_model["task"], tone_model["net"]
    seg_ok, worst = True, 0
    for seed in range(100, 105):
        rec = make_long_recording(task, 20, seed=seed)
        al = align_with_model(net, task.features(rec.clip), rec.transcript)
        segs = segment(al, 7)
        seg_ok &= len(segs) == 20 and [s.labels for s in segs] == rec.labels
        for s, (lo, hi) in zip(segs, rec.spans):
            x = s.scaled(2)
            worst = max(worst, abs(x.speech_start - lo), abs(x.speech_end - hi))

    _, pool, _ = make_dataset(400, 7, task)
    rng = np.random.default_rng(113)
    feats, bad = [], []
    for u in pool:
        is_bad = rng.random() < 0.5
        lab = corrupt_label(u.label, 0.3, 5, rng) if is_bad else u.label
        feats.append(filter_features(net.predict(u.features)[0][0], lab))
        bad.append(is_bad)
    bad = np.array(bad)
    X = np.array([f.vector() for f in feats])
    feasible = np.array([f.feasible for f in feats])
    fit = feasible.copy()
    fit[200:] = False
    clf = train_filter(X[fit], bad[fit])
    # infeasible pairs are hard rejects, so they rank as certainly bad
    scores = np.ones(len(pool))
    scores[feasible] = clf.score(X[feasible])
    auc = roc_auc(scores[200:], bad[200:])
    ok = seg_ok and worst <= 2 and auc >= 0.9
    verdict(13, ok, f"5 recordings x 20 utterances segmented exactly: {seg_ok}, worst boundary error "
                    f"{worst} frames; filter AUC {auc:.3f}")


def test_14_deterministic_train(tmp_path):
    from ds2.cli import main

    conf = tmp_path / "tiny.conf"
    conf.write_text("data = tone\nn_train = 48\nn_dev = 8\nmax_chars = 4\nrnn_hidden = 12\n"
                    "conv_channels = 6\nminibatch_size = 8\nepochs = 2\nbatchnorm = on\n")
    same = {}
    for workers in (1, 4):
        outs = []
        for run in range(2):
            out = tmp_path / f"w{workers}-{run}"
            rc = main(["train", "--config", str(conf), "--seed", "5", "--workers", str(workers),
                       "--out", str(out), "--quiet"])
            assert rc == 0
            outs.append(out)
        same[workers] = all((outs[0] / n).read_bytes() == (outs[1] / n).read_bytes()
                            for n in ("best.ds2c", "last.ds2c"))
    verdict(14, all(same.values()), f"byte-identical checkpoints: 1 worker {same[1]}, 4 workers {same[4]}")
