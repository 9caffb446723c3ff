"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The lines are printed together at the end of the run by the terminal-summary
hook in conftest.py.  Criteria 10 and 11 train small models for five seeds
and take several minutes; they are marked ``slow``.
"""
import contextlib
import io
import itertools
import math
import re
import time
from dataclasses import replace
from fractions import Fraction

import numpy as np
import pytest

from conftest import random_books
from helpers import tiny_model, toy_batch
from signdiff.cli import main
from signdiff.diffusion import FINETUNE, PRETRAIN, TokenSequence, VocabSpec, forward_mask, mask_from_indices, oracle_fill_dist, reverse_step
from signdiff.experiments import ToySetup, _tc, build_toy, pretraining_gains, utc_convergence
from signdiff.metrics import corpus_bleu, dtw_jpe, frame_costs, sibleu
from signdiff.mop import avg_embed, init_mop_params, mop_embed, mop_forward
from signdiff.objectives import batch_loss, loss_tok, smooth_l1
from signdiff.pipeline import train_model
from signdiff.predictor import ARBaseline, ModelConfig, OraclePredictor, TinyMDLM, generate
from signdiff.scheduler import UTC, build_schedule, count_orders_plain, count_orders_utc
from signdiff.tokenizer import MotionConfig, detokenize, fit_codebooks, gen_synthetic_pairs, tokenize

SEEDS = range(5)


def verdict(record_property, n, ok, detail):
    line = f"criterion {n:>2} {'PASS' if ok else 'FAIL'}  {detail}"
    record_property("acceptance", line)
    print(line)
    assert ok, line


# -- 1, 2: order counts --------------------------------------------------------


def test_c01_order_count_exactness(tmp_path, record_property):
    buf = io.StringIO()
    t0 = time.perf_counter()
    with contextlib.redirect_stdout(buf):
        code = main(["--out", str(tmp_path), "order-count", "100", "4"])
    secs = time.perf_counter() - t0
    out = buf.getvalue()
    plain = int(re.search(r"^plain = (\d+)$", out, re.M).group(1))
    utc = int(re.search(r"^utc   = (\d+)$", out, re.M).group(1))
    ratio = Fraction(re.search(r"^ratio = (\S+)$", out, re.M).group(1))
    mant, exp = re.search(r"^plain ~ ([\d.]+)e(\d+)$", out, re.M).groups()
    ok = (
        code == 0
        and int(exp) == 123
        and abs(float(mant) - 2.9) <= 0.05
        and ratio == Fraction(plain, utc)
        and ratio > 10**41
        and secs < 1.0
    )
    verdict(record_property, 1, ok, f"plain ~ {mant}e{exp}, ratio ~ {float(ratio):.3e}, {secs:.3f} s")


def _enumerate_orders(M, k, stages):
    """Every distinct sequence of revealed sets, stage by stage, chunks of size min(k, remaining)."""
    n = 0

    def rec(si, left):
        nonlocal n
        if si == len(stages):
            n += 1
            return
        if not left:
            rec(si + 1, set(stages[si + 1]) if si + 1 < len(stages) else set())
            return
        for pick in itertools.combinations(sorted(left), min(k, len(left))):
            rec(si, left - set(pick))

    rec(0, set(stages[0]))
    return n


def test_c02_bruteforce_order_equivalence(record_property):
    t0 = time.perf_counter()
    bad = []
    for M in range(1, 9):
        utc_stages = [
            [i for i in range(M) if i % 4 == 0],
            [i for i in range(M) if i % 4 == 2],
            [i for i in range(M) if i % 2 == 1],
        ]
        for k in range(1, M + 1):
            if count_orders_plain(M, k) != _enumerate_orders(M, k, [list(range(M))]):
                bad.append(("plain", M, k))
            if count_orders_utc(M, k) != _enumerate_orders(M, k, utc_stages):
                bad.append(("utc", M, k))
    secs = time.perf_counter() - t0
    verdict(record_property, 2, not bad and secs < 10, f"36 (M, k) pairs x 2 counters, mismatches={bad}, {secs:.2f} s")


# -- 3, 4: process ---------------------------------------------------------------


def test_c03_oracle_recovery(record_property):
    voc = VocabSpec(10, 16)
    rng = np.random.default_rng(3)
    M = 12
    failures = runs = 0
    for _ in range(100):
        L = int(rng.integers(0, M + 1))
        truth = TokenSequence(rng.integers(0, 10, size=int(rng.integers(1, 6))), rng.integers(0, 16, size=(3, L)))
        orc = OraclePredictor(truth.padded(M, voc.eos_id), voc)
        for variant in ("plain", "utc"):
            for k in (1, 2, 4, M):
                out, _ = generate(orc, truth.text, build_schedule(M, k, variant), int(rng.integers(1 << 30)))
                failures += out != truth
                runs += 1
    verdict(record_property, 3, failures == 0, f"{runs} oracle generations, {failures} failures")


def test_c04_process_statistics(record_property):
    voc = VocabSpec(10, 16)
    n = 100_000
    seq = TokenSequence([], np.zeros((3, n), dtype=np.int64))
    worst_f = 0.0
    for t in (0.2, 0.5, 0.9):
        for seed in range(20):
            frac = forward_mask(seq, t, FINETUNE, seed, voc).sign_masked.mean()
            worst_f = max(worst_f, abs(frac - t))
    worst_r = 0.0
    t = 0.8
    state = mask_from_indices(seq, seq.sign_positions(), t, voc)
    fill = oracle_fill_dist(state, seq, voc)
    for s in (0.2, 0.6):
        for seed in range(20):
            frac = reverse_step(state, s, fill, seed, voc).sign_masked.mean()
            worst_r = max(worst_r, abs(frac - s / t))
    ok = worst_f <= 0.02 and worst_r <= 0.03
    verdict(record_property, 4, ok, f"max |mask frac - t| = {worst_f:.4f}, max |survivor frac - s/t| = {worst_r:.4f}")


# -- 5, 6: gradients and closed forms -----------------------------------------------


def _fd_worst(model, phase, rng, per_tensor=30, eps=1e-4):
    states, truths, windows = toy_batch(model, phase, 0.6, seed=int(rng.integers(1 << 20)))
    _, grads = batch_loss(model, states, truths, windows, phase)
    worst = 0.0
    for name, v in model.params.items():
        flat, g = v.reshape(-1), grads[name].reshape(-1)
        for j in rng.choice(flat.size, size=min(per_tensor, flat.size), replace=False):
            old = flat[j]
            flat[j] = old + eps
            up = batch_loss(model, states, truths, windows, phase, with_grad=False)[0].l_total
            flat[j] = old - eps
            dn = batch_loss(model, states, truths, windows, phase, with_grad=False)[0].l_total
            flat[j] = old
            num = (up - dn) / (2 * eps)
            scale = max(abs(num), abs(g[j]))
            if scale > 1e-7:
                worst = max(worst, abs(num - g[j]) / scale)
    return worst


def test_c05_gradient_fidelity(record_property):
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    model = tiny_model("attn", "segment", seed=11)
    assert model.cfg.n_blocks == 2 and any(k.startswith("mop.") for k in model.params) and any(k.startswith("lat.") for k in model.params)
    worst = {phase: _fd_worst(model, phase, rng) for phase in (PRETRAIN, FINETUNE)}
    secs = time.perf_counter() - t0
    ok = max(worst.values()) < 1e-4 and secs < 120
    verdict(record_property, 5, ok, f"max rel err pre={worst[PRETRAIN]:.2e} sft={worst[FINETUNE]:.2e} over {len(model.params)} tensors, {secs:.1f} s")


def test_c06_closed_form_losses(record_property):
    lt = loss_tok(np.full((3, 8), 1 / 8), [0, 3, 7], 0.5)
    small, _ = smooth_l1(np.full((4, 3), 0.5), np.zeros((4, 3)))
    large, _ = smooth_l1(np.full((4, 3), 2.0), np.zeros((4, 3)))
    ok = abs(lt - 6 * math.log(8)) < 1e-9 and abs(small - 0.125) < 1e-9 and abs(large - 1.5) < 1e-9
    verdict(record_property, 6, ok, f"loss_tok={lt:.12f} (6 ln 8={6 * math.log(8):.12f}), smooth-L1 {small}, {large}")


# -- 7, 8: metrics ---------------------------------------------------------------


def _all_paths_dtw(C):
    """Enumerate monotone warping paths; take the least summed cost (ties to the longer path), then average."""
    n, m = C.shape
    best = (math.inf, 0)

    def walk(i, j, total, length):
        nonlocal best
        total += C[i, j]
        length += 1
        if i == n - 1 and j == m - 1:
            if total < best[0] or (total == best[0] and length > best[1]):
                best = (total, length)
            return
        if i + 1 < n:
            walk(i + 1, j, total, length)
        if j + 1 < m:
            walk(i, j + 1, total, length)
        if i + 1 < n and j + 1 < m:
            walk(i + 1, j + 1, total, length)

    walk(0, 0, 0.0, 0)
    return best[0] / best[1]


def test_c07_dtw_oracle_equivalence(record_property):
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(200):
        n, m = (int(x) for x in rng.integers(1, 7, size=2))
        a, b = rng.normal(size=(n, 3)), rng.normal(size=(m, 3))
        worst = max(worst, abs(dtw_jpe(a, b) - _all_paths_dtw(frame_costs(a, b))))
    a = rng.normal(size=(6, 3))
    ident = dtw_jpe(a, a)
    dup = dtw_jpe(np.repeat(a, 2, axis=0), a)
    ok = worst <= 1e-12 and ident == 0.0 and dup == 0.0
    verdict(record_property, 7, ok, f"200 pairs, max |dtw - exhaustive| = {worst:.1e}, identity={ident}, duplication={dup}")


def _reference_bleu(hyps, refs, N=4):
    match = [0] * N
    total = [0] * N
    hyp_len = ref_len = 0
    for h, r in zip(hyps, refs):
        hyp_len += len(h)
        ref_len += len(r)
        for n in range(1, N + 1):
            hg = [tuple(h[i : i + n]) for i in range(len(h) - n + 1)]
            rg = [tuple(r[i : i + n]) for i in range(len(r) - n + 1)]
            for g in set(hg):
                match[n - 1] += min(hg.count(g), rg.count(g))
            total[n - 1] += len(hg)
    if hyp_len == 0 or 0 in match:
        return 0.0
    log_p = sum(math.log(match[i] / total[i]) for i in range(N)) / N
    bp = 1.0 if hyp_len > ref_len else math.exp(1 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(log_p)


def test_c08_sibleu_contract(record_property):
    rng = np.random.default_rng(8)
    same = sibleu([3, 1, 4, 1, 5, 9, 2, 6], [3, 1, 4, 1, 5, 9, 2, 6])
    disjoint = corpus_bleu([[1, 2, 3, 4, 5]], [[6, 7, 8, 9, 10]])
    worst = 0.0
    for _ in range(20):
        refs = [list(rng.integers(0, 4, size=int(rng.integers(4, 16)))) for _ in range(int(rng.integers(1, 6)))]
        hyps = [[x if rng.random() < 0.75 else int(rng.integers(0, 4)) for x in r][: int(rng.integers(2, len(r) + 2))] for r in refs]
        worst = max(worst, abs(corpus_bleu(hyps, refs) - _reference_bleu(hyps, refs)))
    ok = abs(same - 100.0) < 1e-9 and disjoint == 0.0 and worst < 1e-6
    verdict(record_property, 8, ok, f"identical={same:.6f}, disjoint={disjoint}, 20 corpora max diff={worst:.1e}")


# -- 9: decoding efficiency ---------------------------------------------------------


def test_c09_parallel_decoding_efficiency(record_property):
    from signdiff.metrics import bench_latency

    books = random_books(N_c=64, d_c=16, seed=9)
    cfg = ModelConfig(50, 64, 16, d_model=64, n_blocks=2, max_len=128, mixer="attn", positions="segment")
    mdlm, ar = TinyMDLM(cfg, books, 0), ARBaseline(cfg, books, 0)
    rng = np.random.default_rng(9)
    texts = [rng.integers(0, 50, size=4) for _ in range(50)]
    lat = bench_latency(mdlm, ar, texts, M=100, k=4).latency
    p, a = lat["mdlm_plain"], lat["ar"]
    ok = p["calls"] == 25 and a["calls"] == 100 and p["n"] == a["n"] == 50 and p["mean_s"] < a["mean_s"]
    verdict(
        record_property, 9, ok,
        f"calls {p['calls']:.0f} vs {a['calls']:.0f}, mean {p['mean_s'] * 1e3:.2f} ms vs {a['mean_s'] * 1e3:.2f} ms "
        f"(utc {lat['mdlm_utc']['calls']:.0f} calls, {lat['mdlm_utc']['mean_s'] * 1e3:.2f} ms)",
    )


# -- 10, 11: directional training runs --------------------------------------------------


@pytest.fixture(scope="module")
def toy_runs():
    """Per seed: toy data, the two 50-epoch fine-tuning curves and models, and elapsed seconds."""
    runs = {}
    for seed in SEEDS:
        t0 = time.perf_counter()
        data = build_toy(seed)
        curves, models = utc_convergence(seed, 50, data=data)
        runs[seed] = (data, curves, models, time.perf_counter() - t0)
    return runs


@pytest.mark.slow
def test_c10_utc_convergence(toy_runs, record_property):
    wins, parts, secs = 0, [], 0.0
    for seed, (_, curves, _, s) in toy_runs.items():
        p, u = curves["plain"][-1], curves[UTC][-1]
        assert len(curves[UTC]) == 50
        wins += u < p
        parts.append(f"{u:.1f}/{p:.1f}")
        secs += s
    ok = wins >= 4 and secs < 1800
    verdict(record_property, 10, ok, f"utc < plain at epoch 50 in {wins}/5 seeds (utc/plain {' '.join(parts)}), {secs:.0f} s")


@pytest.mark.slow
def test_c11_pretraining_gains(toy_runs, record_property):
    tok_wins = sib_wins = tri_vs_tok = 0
    parts = []
    for seed, (data, _, models, _) in toy_runs.items():
        r = pretraining_gains(seed, 25, 25, data=data, scratch=models[UTC])
        s, tri, tok = r["scratch"], r["tri"], r["tok"]
        tok_wins += tri["dev_l_tok"] < s["dev_l_tok"]
        sib_wins += tri["sibleu"] > s["sibleu"]
        tri_vs_tok += tri["sibleu"] > tok["sibleu"]
        parts.append(f"s{seed}: l_tok {tri['dev_l_tok']:.1f}/{s['dev_l_tok']:.1f} SiBLEU {tri['sibleu']:.1f}/{s['sibleu']:.1f}/{tok['sibleu']:.1f}")
    ok = tok_wins >= 4 and sib_wins >= 4 and tri_vs_tok >= 3
    verdict(
        record_property, 11, ok,
        f"tri beats scratch on dev l_tok {tok_wins}/5 and SiBLEU {sib_wins}/5, tri beats tok-only SiBLEU {tri_vs_tok}/5 "
        f"[tri/scratch, tri/scratch/tok] {'; '.join(parts)}",
    )


# -- 12, 13: embedding and tokenizer ----------------------------------------------------


def test_c12_mop_ablation_machinery(record_property):
    setup = ToySetup(n_train=100, n_dev=10, pool_shards=0, codebook_iters=20)
    data = build_toy(12, setup)
    finals = {}
    for mode in ("dense", "avg", "top1", "top2"):
        model = TinyMDLM(replace(data.model, embed_mode=mode), data.books, 12)
        hist = train_model(model, data.train, _tc(data, setup, 12, 8), "finetune", UTC)
        losses = [h.l_tok for h in hist]
        finals[mode] = (losses[0], losses[-1], all(math.isfinite(x) for x in losses))
    trains = all(fin and last < first for first, last, fin in finals.values())

    # zero-initialized gate equals simple average, at the embedding and at the model output
    dense = TinyMDLM(data.model, data.books, 3)
    avg = TinyMDLM(replace(data.model, embed_mode="avg"), data.books, 3)
    avg.params = dense.params
    st = forward_mask(data.train[0].seq.padded(data.M, dense.vocab.eos_id), 0.5, FINETUNE, 0, dense.vocab)
    out_gap = float(np.max(np.abs(dense.predict(st).sign - avg.predict(st).sign)))
    mop = {k: v for k, v in dense.params.items() if k.startswith("mop.")}
    ids = np.random.default_rng(0).integers(0, data.books.N_c, size=(50, 3))
    e_gap = max(float(np.max(np.abs(mop_embed(i, data.books, mop)[0] - avg_embed(i, data.books, mop)))) for i in ids)
    _, g0 = mop_embed(ids[0], data.books, mop)

    rng = np.random.default_rng(12)
    p = init_mop_params(16, 64, rng)
    p["mop.gate_w2"] = rng.normal(scale=3.0, size=p["mop.gate_w2"].shape)
    p["mop.gate_b2"] = rng.normal(scale=3.0, size=3)
    _, _, cache = mop_forward(p, rng.normal(scale=3.0, size=(10_000, 3, 16)))
    g_err = float(np.max(np.abs(cache.gates.sum(1) - 1)))

    ok = trains and np.array_equal(g0, np.full(3, 1 / 3)) and e_gap < 1e-12 and out_gap < 1e-12 and g_err < 1e-9
    desc = " ".join(f"{m}:{a:.1f}->{b:.1f}" for m, (a, b, _) in finals.items())
    verdict(record_property, 12, ok, f"8-epoch l_tok {desc}; zero-gate gap emb={e_gap:.1e} out={out_gap:.1e}; gate sum err={g_err:.1e}")


def test_c13_tokenizer_fidelity(record_property):
    pairs = gen_synthetic_pairs(60, 13, MotionConfig(max_signs=4))
    books = fit_codebooks([m for m, _ in pairs], 64, 16, 50, 0)
    rng = np.random.default_rng(13)
    hits = total = 0
    for _ in range(100):
        ids = rng.integers(0, books.N_c, size=(3, int(rng.integers(1, 12))))
        hits += int((tokenize(detokenize(ids, books), books) == ids).sum())
        total += ids.size
    rate = hits / total
    verdict(record_property, 13, rate >= 0.95, f"id recovery {100 * rate:.2f}% over 100 sequences")
