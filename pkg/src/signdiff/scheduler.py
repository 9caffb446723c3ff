"""Reverse-process schedules: confidence-based unmasking with optional temporal checkpoints.

Positions here are 0-based offsets into the generated sign span of length M.
The checkpoint variant splits generation into three stages whose allowed
positions are the stride-4 grid, the remaining stride-2 grid, and everything
else, so the states at t = 0.75 and t = 0.5 hold evenly spaced tokens at
quarter and half temporal resolution.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Mapping

import numpy as np

from .rng import make_rng

PLAIN = "plain"
UTC = "utc"
VARIANTS = (PLAIN, UTC)


@dataclass(frozen=True)
class Stage:
    start_t: float
    end_t: float
    allowed: frozenset


@dataclass(frozen=True)
class Step:
    index: int
    stage: int
    unmask_count: int
    candidates: frozenset
    t_before: float
    t_after: float


@dataclass(frozen=True)
class UnmaskSchedule:
    M: int
    k: int
    variant: str
    stages: tuple
    steps: tuple

    def to_table(self) -> str:
        lines = ["step\tstage\tsize\tt_from\tt_to\tcandidates"]
        for st in self.steps:
            cands = ",".join(str(p) for p in sorted(st.candidates))
            lines.append(f"{st.index}\t{st.stage}\t{st.unmask_count}\t{st.t_before:.6g}\t{st.t_after:.6g}\t{cands}")
        return "\n".join(lines) + "\n"


def _ceil_frac(num: int, den: int) -> int:
    return -(-num // den)


def stage_sizes(M: int) -> tuple[int, int, int]:
    q = _ceil_frac(M, 4)
    h = _ceil_frac(M, 2)
    return q, h - q, M - h


def stage_grids(M: int) -> tuple[frozenset, frozenset, frozenset]:
    s1 = frozenset(range(0, M, 4))
    s2 = frozenset(range(0, M, 2)) - s1
    s3 = frozenset(range(M)) - s1 - s2
    return s1, s2, s3


def _check_mk(M: int, k: int):
    if M < 1:
        raise ValueError("M must be at least 1")
    if not 1 <= k <= M:
        raise ValueError(f"k must lie in [1, M], got k={k}, M={M}")


def _chunks(n: int, k: int) -> list[int]:
    sizes = [k] * (n // k)
    if n % k:
        sizes.append(n % k)
    return sizes


def build_schedule(M: int, k: int, variant: str = PLAIN) -> UnmaskSchedule:
    _check_mk(M, k)
    if variant == PLAIN:
        stages = (Stage(1.0, 0.0, frozenset(range(M))),)
    elif variant == UTC:
        g1, g2, g3 = stage_grids(M)
        stages = (Stage(1.0, 0.75, g1), Stage(0.75, 0.5, g2), Stage(0.5, 0.0, g3))
    else:
        raise ValueError(f"unknown schedule variant {variant!r}")
    steps = []
    done = 0
    for si, stage in enumerate(stages):
        for size in _chunks(len(stage.allowed), k):
            t_before = 1.0 - done / M
            done += size
            steps.append(Step(len(steps), si, size, stage.allowed, t_before, 1.0 - done / M))
    return UnmaskSchedule(M, k, variant, stages, tuple(steps))


def select_unmask(confidences: Mapping[int, float], step: Step, tie_seed: int) -> set[int]:
    """Top ``step.unmask_count`` candidates by confidence; ties broken by a seeded shuffle."""
    cand = [i for i in confidences if i in step.candidates]
    if len(cand) < step.unmask_count:
        raise ValueError(f"only {len(cand)} candidates available for {step.unmask_count} unmasks")
    cand.sort()
    rng = make_rng(tie_seed, "select_unmask", step.index)
    tiebreak = rng.permutation(len(cand))
    conf = np.array([confidences[i] for i in cand], dtype=np.float64)
    order = np.lexsort((tiebreak, -conf))
    return {cand[j] for j in order[: step.unmask_count]}


def _plain_count(n: int, k: int) -> int:
    out = math.factorial(n)
    for size in _chunks(n, k):
        out //= math.factorial(size)
    return out


def count_orders_plain(M: int, k: int) -> int:
    """Distinct unmasking orders of M tokens revealed k per step (last step may be smaller)."""
    _check_mk(M, k)
    return _plain_count(M, k)


def count_orders_utc(M: int, k: int) -> int:
    _check_mk(M, k)
    out = 1
    for n in stage_sizes(M):
        out *= _plain_count(n, k) if n else 1
    return out


def magnitude(n: int) -> tuple[float, int]:
    """(mantissa, exponent) with n = mantissa * 10**exponent, from the exact integer."""
    if n <= 0:
        raise ValueError("magnitude of a non-positive integer")
    digits = str(n)
    exp = len(digits) - 1
    mant = float(Fraction(int(digits[:17]), 10 ** (min(len(digits), 17) - 1)))
    return mant, exp


def _cumulative(M: int, t: float) -> int:
    # rounding guards ceil() against float noise such as (1 - 0.6) * 100 = 40.000000000000007
    return min(M, max(0, math.ceil(round((1.0 - t) * M, 9))))


def training_index_filter(M: int, t: float, variant: str = UTC, rng_seed: int = 0) -> set[int]:
    """An unmasked-position set at noise level t that some reverse trajectory can reach.

    For the checkpoint variant, earlier stages are filled completely before
    any later-stage position is revealed; the frontier stage gets a seeded
    random subset so the total matches ceil((1 - t) * M).
    """
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"noise level must lie in [0, 1], got {t}")
    n = _cumulative(M, t)
    rng = make_rng(rng_seed, "training_index_filter")
    if variant == PLAIN:
        return {int(i) for i in rng.choice(M, size=n, replace=False)}
    if variant != UTC:
        raise ValueError(f"unknown schedule variant {variant!r}")
    out: set[int] = set()
    for grid in stage_grids(M):
        if len(out) >= n:
            break
        take = min(len(grid), n - len(out))
        if take == 0:
            continue  # empty grid (tiny M)
        pool = sorted(grid)
        if take == len(pool):
            out.update(pool)
        else:
            out.update(int(pool[j]) for j in rng.choice(len(pool), size=take, replace=False))
    return out


def is_utc_reachable(M: int, unmasked) -> bool:
    """True when every stage preceding the frontier is complete."""
    unmasked = set(unmasked)
    if not unmasked <= set(range(M)):
        return False
    grids = stage_grids(M)
    seen_incomplete = False
    for grid in grids:
        hit = unmasked & grid
        if seen_incomplete and hit:
            return False
        if hit != grid:
            seen_incomplete = True
    return True
