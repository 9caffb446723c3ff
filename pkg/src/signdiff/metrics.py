"""Token-level BLEU over sign streams, DTW joint-position error, and the latency benchmark."""
from __future__ import annotations

import math
import statistics
import time
from collections import Counter
from contextlib import nullcontext
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .scheduler import build_schedule

HEADER_NOTE = "sibleu_hands averages the left- and right-hand corpus scores"


def _ngrams(seq, n):
    return Counter(tuple(seq[i : i + n]) for i in range(len(seq) - n + 1))


def corpus_bleu(hyps, refs, max_n: int = 4) -> float:
    """Corpus BLEU in percent: clipped n-gram precisions pooled over the corpus,
    geometric mean, brevity penalty, no smoothing (any zero precision gives 0)."""
    if len(hyps) != len(refs):
        raise ValueError("hypothesis and reference corpora differ in size")
    match = [0] * max_n
    total = [0] * max_n
    hyp_len = ref_len = 0
    for h, r in zip(hyps, refs):
        h = [int(x) for x in h]
        r = [int(x) for x in r]
        hyp_len += len(h)
        ref_len += len(r)
        for n in range(1, max_n + 1):
            hc = _ngrams(h, n)
            rc = _ngrams(r, n)
            match[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
            total[n - 1] += max(len(h) - n + 1, 0)
    if hyp_len == 0 or any(m == 0 for m in match):
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(match, total)) / max_n
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(log_p)


def sibleu(hyp, ref, max_n: int = 4) -> float:
    """BLEU of a single token stream against its reference."""
    return corpus_bleu([hyp], [ref], max_n)


def sibleu_parts(hyps, refs, max_n: int = 4) -> tuple[float, float]:
    """(body, hands) scores over corpora of (3, L) part-token arrays."""
    per_part = []
    for j in range(3):
        per_part.append(corpus_bleu([np.asarray(h)[j] for h in hyps], [np.asarray(r)[j] for r in refs], max_n))
    return per_part[0], 0.5 * (per_part[1] + per_part[2])


def frame_costs(gen, ref, joints=None) -> np.ndarray:
    """(T_gen, T_ref) matrix of mean per-joint Euclidean error.

    ``joints`` is a list of column-index groups, one per joint; by default
    every column is its own joint.
    """
    a = np.asarray(gen, dtype=np.float64)
    b = np.asarray(ref, dtype=np.float64)
    if joints is None:
        joints = [[c] for c in range(a.shape[1])]
    diff = a[:, None, :] - b[None, :, :]
    per_joint = [np.sqrt((diff[:, :, list(cols)] ** 2).sum(-1)) for cols in joints]
    return np.mean(per_joint, axis=0)


def dtw_jpe(gen, ref, joints=None) -> float:
    """Path-averaged DTW cost without spatial pre-alignment.

    The warping path minimizes the summed frame cost (ties go to the longer
    path); the returned value is that sum divided by the path length.
    """
    gen = getattr(gen, "frames", gen)
    ref = getattr(ref, "frames", ref)
    if len(gen) == 0 or len(ref) == 0:
        raise ValueError("DTW needs two nonempty sequences")
    total, length = kernels.dtw_accumulate(np.ascontiguousarray(frame_costs(gen, ref, joints)))
    return total / length


def part_joints(part_slices, parts) -> list:
    return [[c] for p in parts for c in range(part_slices[p].start, part_slices[p].stop)]


@dataclass
class MetricReport:
    sibleu_body: float = 0.0
    sibleu_hands: float = 0.0
    dtw_body: float = 0.0
    dtw_hands: float = 0.0
    latency: dict = field(default_factory=dict)

    def table(self) -> str:
        rows = [
            ("SiBLEU-body", self.sibleu_body),
            ("SiBLEU-hands", self.sibleu_hands),
            ("DTW-JPE-body", self.dtw_body),
            ("DTW-JPE-hands", self.dtw_hands),
        ]
        for name, stats in self.latency.items():
            rows.append((f"{name} s/sample", stats["mean_s"]))
            rows.append((f"{name} calls/sample", stats["calls"]))
        w = max(len(r[0]) for r in rows)
        lines = [f"# {HEADER_NOTE}"] + [f"{name:<{w}}  {val:>12.6f}" for name, val in rows]
        return "\n".join(lines)

    def line(self, run: str = "run") -> str:
        kv = {
            "sibleu_body": self.sibleu_body,
            "sibleu_hands": self.sibleu_hands,
            "dtw_body": self.dtw_body,
            "dtw_hands": self.dtw_hands,
        }
        for name, stats in self.latency.items():
            kv[f"{name}_mean_s"] = stats["mean_s"]
            kv[f"{name}_calls"] = stats["calls"]
        return f"run={run} " + " ".join(f"{k}={v:.6g}" for k, v in kv.items())


def evaluate_pairs(gen_tokens, ref_tokens, gen_motions, ref_motions, part_slices) -> MetricReport:
    body, hands = sibleu_parts(gen_tokens, ref_tokens)
    bj = part_joints(part_slices, ["b"])
    hj = part_joints(part_slices, ["l", "r"])
    dtw_b, dtw_h = [], []
    for g, r in zip(gen_motions, ref_motions):
        g = getattr(g, "frames", g)
        r = getattr(r, "frames", r)
        if len(g) == 0:
            # nothing generated: score against a single rest-pose frame
            g = np.zeros((1, r.shape[1]))
        dtw_b.append(dtw_jpe(g, r, bj))
        dtw_h.append(dtw_jpe(g, r, hj))
    return MetricReport(body, hands, float(np.mean(dtw_b)) if dtw_b else 0.0, float(np.mean(dtw_h)) if dtw_h else 0.0)


def _single_thread():
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        return nullcontext()
    return threadpool_limits(limits=1)


def bench_latency(mdlm, ar, texts, M: int = 100, k: int = 4, repeats: int = 1, warmup: int = 2, seed: int = 0) -> MetricReport:
    """Wall time and predictor calls per sample for plain and checkpointed parallel decoding vs. AR.

    Models must share the same width; timing uses the monotonic performance
    counter with BLAS pinned to one thread.
    """
    from .predictor import ar_generate, generate

    if mdlm.cfg.d_model != ar.cfg.d_model or mdlm.cfg.n_blocks != ar.cfg.n_blocks:
        raise ValueError("compared models must share backbone width and depth")
    runs = {
        "mdlm_plain": lambda txt, s: generate(mdlm, txt, build_schedule(M, k, "plain"), s),
        "mdlm_utc": lambda txt, s: generate(mdlm, txt, build_schedule(M, k, "utc"), s),
        "ar": lambda txt, s: ar_generate(ar, txt, M, s, stop_at_eos=False),
    }
    report = MetricReport()
    with _single_thread():
        for name, fn in runs.items():
            for w in range(warmup):
                fn(texts[w % len(texts)], seed)
            times, calls = [], []
            for r in range(repeats):
                for i, txt in enumerate(texts):
                    t0 = time.perf_counter()
                    _, st = fn(txt, seed + i)
                    times.append(time.perf_counter() - t0)
                    calls.append(st.calls)
            report.latency[name] = {
                "mean_s": statistics.fmean(times),
                "std_s": statistics.pstdev(times) if len(times) > 1 else 0.0,
                "calls": statistics.fmean(calls),
                "n": len(times),
            }
    return report
