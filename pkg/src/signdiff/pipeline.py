"""Training and evaluation loops shared by the CLI and the experiment tests."""
from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from .diffusion import FINETUNE, PRETRAIN, TokenSequence, forward_mask, mask_from_indices
from .metrics import MetricReport, evaluate_pairs
from .objectives import LOG_HEADER, batch_loss
from .predictor import generate
from .rng import derive_seed, make_rng
from .scheduler import PLAIN, UTC, build_schedule, training_index_filter
from .tokenizer import detokenize, part_windows, tokenize

T_MIN = 1e-3


@dataclass
class Example:
    id: str
    text: np.ndarray
    tokens: np.ndarray  # (3, L_s)
    windows: dict  # part -> (L_s, 4 * width)
    motion: object = None

    @property
    def seq(self) -> TokenSequence:
        return TokenSequence(self.text, self.tokens)


def prepare_examples(records, books) -> list[Example]:
    """records: iterable of (id, text tokens, MotionSequence)."""
    out = []
    for rid, text, motion in records:
        out.append(
            Example(
                str(rid),
                np.asarray(text, dtype=np.int64),
                tokenize(motion, books),
                {p: part_windows(motion, p) for p in ("b", "l", "r")},
                motion,
            )
        )
    return out


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 16
    lr: float = 0.05
    alpha: float = 0.5
    M: int = 100
    use_lat: bool = True
    use_phy: bool = True
    optimizer: str = "sgd"
    clip_norm: float = 5.0
    seed: int = 0


@dataclass
class EpochStats:
    epoch: int
    l_tok: float
    l_lat: float
    l_phy: float
    l_total: float


class Optimizer:
    """Gradient descent with a cosine-decayed step size and global-norm clipping.

    ``kind="adam"`` switches to bias-corrected Adam with the same schedule.
    """

    def __init__(self, params: dict, lr: float, total_steps: int, kind: str = "sgd", clip_norm: float | None = 5.0):
        self.params = params
        self.lr = lr
        self.total = max(1, total_steps)
        self.kind = kind
        self.clip = clip_norm
        self.step_count = 0
        if kind == "adam":
            self.m = {k: np.zeros_like(v) for k, v in params.items()}
            self.v = {k: np.zeros_like(v) for k, v in params.items()}
        elif kind != "sgd":
            raise ValueError(f"unknown optimizer {kind!r}")

    def rate(self) -> float:
        return 0.5 * self.lr * (1.0 + math.cos(math.pi * min(self.step_count, self.total) / self.total))

    def step(self, grads: dict, frozen=()):
        norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        if not math.isfinite(norm):
            raise FloatingPointError("non-finite gradient")
        scale = 1.0
        if self.clip and norm > self.clip:
            scale = self.clip / norm
        lr = self.rate()
        self.step_count += 1
        for k, g in grads.items():
            if k in frozen:
                continue
            g = g * scale
            if self.kind == "sgd":
                self.params[k] -= lr * g
            else:
                b1, b2 = 0.9, 0.999
                self.m[k] = b1 * self.m[k] + (1 - b1) * g
                self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
                mh = self.m[k] / (1 - b1**self.step_count)
                vh = self.v[k] / (1 - b2**self.step_count)
                self.params[k] -= lr * mh / (np.sqrt(vh) + 1e-8)
        return norm


def make_batches(examples, batch_size: int, rng) -> list[list[int]]:
    """Shuffled batches of examples with equal text length (equal layouts batch cleanly)."""
    groups = defaultdict(list)
    for i in rng.permutation(len(examples)):
        groups[examples[int(i)].text.shape[0]].append(int(i))
    batches = []
    for key in sorted(groups):
        idx = groups[key]
        batches.extend(idx[j : j + batch_size] for j in range(0, len(idx), batch_size))
    order = rng.permutation(len(batches))
    return [batches[int(o)] for o in order]


def stratified_t(n: int, rng) -> np.ndarray:
    """One noise level per sequence, evenly spaced over [T_MIN, 1) from a single random offset."""
    u = (rng.random() + np.arange(n) / n) % 1.0
    return T_MIN + (1.0 - T_MIN) * u


def masked_state(ex: Example, M: int, t: float, phase: str, variant: str, seed: int, vocab):
    seq = ex.seq.padded(M, vocab.eos_id)
    if phase == PRETRAIN:
        return seq, forward_mask(seq, t, PRETRAIN, seed, vocab)
    if variant == UTC:
        keep = training_index_filter(M, t, UTC, seed)
        masked = [seq.sign_start + j for j in range(M) if j not in keep]
        return seq, mask_from_indices(seq, masked, t, vocab)
    return seq, forward_mask(seq, t, FINETUNE, seed, vocab)


def train_model(model, examples, tc: TrainConfig, phase: str, variant: str = PLAIN, log=None, check_text_unmasked=True):
    """Train in place; returns per-epoch mean losses."""
    voc = model.vocab
    steps_per_epoch = len(make_batches(examples, tc.batch_size, make_rng(0)))
    opt = Optimizer(model.params, tc.lr, tc.epochs * steps_per_epoch, tc.optimizer, tc.clip_norm)
    history = []
    if log is not None:
        log.write(LOG_HEADER + "\n")
    step = 0
    for epoch in range(tc.epochs):
        rng = make_rng(tc.seed, "epoch", epoch, phase)
        sums = np.zeros(4)
        nb = 0
        for batch in make_batches(examples, tc.batch_size, rng):
            truths, states = [], []
            for i, t in zip(batch, stratified_t(len(batch), rng)):
                seq, st = masked_state(examples[i], tc.M, float(t), phase, variant, derive_seed(tc.seed, epoch, step, i), voc)
                if phase == FINETUNE and check_text_unmasked and st.masked[: seq.L_e + 1].any():
                    raise AssertionError("text tokens masked during fine-tuning")
                truths.append(seq)
                states.append(st)
            report, grads = batch_loss(
                model, states, truths, [examples[i].windows for i in batch], phase, tc.alpha, tc.use_lat, tc.use_phy
            )
            if not math.isfinite(report.l_total):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}, step {step}")
            opt.step(grads)
            sums += (report.l_tok, report.l_lat, report.l_phy, report.l_total)
            nb += 1
            if log is not None:
                log.write(report.log_row(epoch, step) + "\n")
            step += 1
        m = sums / max(nb, 1)
        history.append(EpochStats(epoch, *m))
    return history


def eval_loss(model, examples, M: int, phase: str = FINETUNE, variant: str = PLAIN, seed: int = 0, draws: int = 4, alpha=0.5):
    """Mean l_tok on held-out data over a fixed set of noise levels and masks."""
    voc = model.vocab
    vals = []
    for d in range(draws):
        for i, ex in enumerate(examples):
            t = (d + 0.5) / draws
            seq, st = masked_state(ex, M, t, phase, variant, derive_seed(seed, d, i), voc)
            rep, _ = batch_loss(model, [st], [seq], [ex.windows], phase, alpha, False, False, with_grad=False)
            vals.append(rep.l_tok)
    return float(np.mean(vals))


def generate_examples(model, examples, M: int, k: int, variant: str, seed: int = 0):
    out = []
    sched = build_schedule(M, k, variant)
    for i, ex in enumerate(examples):
        seq, _ = generate(model, ex.text, sched, derive_seed(seed, i))
        out.append(seq.sign)
    return out


def evaluate_model(model, examples, books, M: int, k: int = 4, variant: str = PLAIN, seed: int = 0) -> MetricReport:
    gen = generate_examples(model, examples, M, k, variant, seed)
    refs = [ex.tokens for ex in examples]
    gm = [detokenize(g, books) for g in gen]
    rm = [ex.motion for ex in examples]
    return evaluate_pairs(gen, refs, gm, rm, books.part_slices)
