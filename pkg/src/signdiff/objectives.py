"""Token, latent and physical-space losses, and their gradients through the predictor stack."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffusion import PARTS, MaskState, TokenSequence
from .predictor import softmax, state_inputs

PRETRAIN = "pretrain"
FINETUNE = "finetune"
LOG_HEADER = "# epoch\tstep\tt\tl_tok\tl_lat\tl_phy\tl_total  (l_lat/l_phy: mean over masked sign indices)"


@dataclass
class LossReport:
    l_tok: float
    l_lat: float
    l_phy: float
    l_total: float
    t: float
    masked_counts: dict = field(default_factory=dict)

    def log_row(self, epoch: int, step: int) -> str:
        return f"{epoch}\t{step}\t{self.t:.6f}\t{self.l_tok:.6f}\t{self.l_lat:.6f}\t{self.l_phy:.6f}\t{self.l_total:.6f}"


def smooth_l1(pred, target, beta: float = 1.0):
    """Mean smooth-L1 over all elements, and its gradient w.r.t. ``pred``."""
    r = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    if r.size == 0:
        return 0.0, np.zeros_like(r)
    a = np.abs(r)
    quad = a < beta
    val = np.where(quad, 0.5 * r * r / beta, a - 0.5 * beta)
    grad = np.where(quad, r / beta, np.sign(r)) / r.size
    return float(val.mean()), grad


def loss_tok(preds, truth, t: float) -> float:
    """-(1/t) * sum of log-probabilities of the true classes over the masked set.

    preds: (n, V) categoricals for the n masked (index, part) slots; truth: (n,) class ids.
    """
    preds = np.asarray(preds, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.int64)
    if truth.size == 0:
        return 0.0
    if t <= 0:
        raise ValueError("noise level t must be positive when tokens are masked")
    p = preds[np.arange(truth.size), truth]
    with np.errstate(divide="ignore"):
        return float(-np.log(p).sum() / t)


def latent_mlp(params, H, p):
    a = np.tanh(H @ params[f"lat.{p}.w1"].T + params[f"lat.{p}.b1"])
    return a @ params[f"lat.{p}.w2"].T + params[f"lat.{p}.b2"], a


def _latent_mlp_backward(params, H, a, d_out, p, grads):
    grads[f"lat.{p}.w2"] += d_out.T @ a
    grads[f"lat.{p}.b2"] += d_out.sum(0)
    da = (d_out @ params[f"lat.{p}.w2"]) * (1.0 - a * a)
    grads[f"lat.{p}.w1"] += da.T @ H
    grads[f"lat.{p}.b1"] += da.sum(0)
    return da @ params[f"lat.{p}.w1"]


def loss_lat(hidden, params, books, truth_ids) -> float:
    """Sum over parts of smooth-L1 between mapped hidden states and the true code embeddings.

    hidden: (n, d_model) states at masked sign indices; truth_ids: (3, n).
    """
    truth_ids = np.asarray(truth_ids, dtype=np.int64).reshape(3, -1)
    total = 0.0
    for j, p in enumerate(PARTS):
        Hp, _ = latent_mlp(params, hidden, p)
        total += smooth_l1(Hp, books[p].codes[truth_ids[j]].astype(np.float64))[0]
    return total


def loss_phy(hidden, params, books, windows: dict) -> float:
    """Sum over parts of smooth-L1 between frozen-decoder reconstructions and true part windows."""
    total = 0.0
    for p in PARTS:
        w = np.asarray(windows[p], dtype=np.float64)
        if w.shape[0] != hidden.shape[0]:
            raise ValueError(f"part {p}: {w.shape[0]} windows for {hidden.shape[0]} masked indices")
        Hp, _ = latent_mlp(params, hidden, p)
        total += smooth_l1(books[p].decode(Hp), w)[0]
    return total


def loss_combined(l_tok: float, l_lat: float, l_phy: float, phase: str, alpha: float = 0.5) -> float:
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    if phase == PRETRAIN:
        return l_tok + l_lat + l_phy
    if phase == FINETUNE:
        return l_tok + alpha * (l_lat + l_phy)
    raise ValueError(f"unknown phase {phase!r}")


def batch_loss(
    model,
    states: list[MaskState],
    truths: list[TokenSequence],
    windows: list[dict],
    phase: str,
    alpha: float = 0.5,
    use_lat: bool = True,
    use_phy: bool = True,
    with_grad: bool = True,
):
    """Mean over sequences of the per-sequence losses; gradients for every model parameter.

    ``truths`` carry the sign span padded with eos to the state's length;
    ``windows[b][p]`` holds the true (L_true, 4 * width) part windows of
    sequence b, aligned with its first L_true sign positions.
    """
    voc = model.vocab
    P = model.params
    books = model.books
    inputs = [state_inputs(s, voc) for s in states]
    text_idx = np.stack([a for a, _ in inputs])
    sign_tok = np.stack([b for _, b in inputs])
    cache = model.forward(text_idx, sign_tok)
    B, Lt, _ = cache.text_logits.shape
    tp = softmax(cache.text_logits)
    sp = softmax(cache.sign_logits)
    d_text = np.zeros_like(tp)
    d_sign = np.zeros_like(sp)
    d_hidden = np.zeros_like(cache.hidden)
    w_phase = 1.0 if phase == PRETRAIN else alpha
    lat_grads = {k: np.zeros_like(v) for k, v in P.items() if k.startswith("lat.")}
    tot_tok = tot_lat = tot_phy = 0.0
    n_text = n_sign = 0
    for b, (st, tr) in enumerate(zip(states, truths)):
        t = st.t
        m_text = np.nonzero(st.masked[:Lt])[0]
        m_sign = np.nonzero(st.masked[Lt:])[0]
        n_text += m_text.size
        n_sign += m_sign.size
        if m_text.size or m_sign.size:
            if t <= 0:
                raise ValueError("masked tokens at t = 0")
            tcls = np.concatenate([voc.text_class(tr.text), [voc.text_vocab_size]])[m_text]
            scls = np.concatenate(
                [voc.sign_class(tr.sign), np.full((3, 1), voc.sign_vocab_size)], axis=1
            )[:, m_sign]
            lt = loss_tok(tp[b, m_text], tcls, t) if m_text.size else 0.0
            ls = sum(loss_tok(sp[b, j][m_sign], scls[j], t) for j in range(3)) if m_sign.size else 0.0
            tot_tok += lt + ls
            if with_grad:
                g = tp[b, m_text].copy()
                g[np.arange(m_text.size), tcls] -= 1.0
                d_text[b, m_text] = g / (t * B)
                for j in range(3):
                    g = sp[b, j][m_sign].copy()
                    g[np.arange(m_sign.size), scls[j]] -= 1.0
                    d_sign[b, j, m_sign] = g / (t * B)
        if not (use_lat or use_phy):
            continue
        L_true = windows[b]["b"].shape[0]
        idx = m_sign[m_sign < L_true]
        if idx.size == 0:
            continue
        Hm = cache.hidden[b, Lt + idx]
        dHm = np.zeros_like(Hm)
        for j, p in enumerate(PARTS):
            Hp, a = latent_mlp(P, Hm, p)
            d_Hp = np.zeros_like(Hp)
            if use_lat:
                v, g = smooth_l1(Hp, books[p].codes[tr.sign[j, idx]].astype(np.float64))
                tot_lat += v
                d_Hp += g
            if use_phy:
                v, g = smooth_l1(books[p].decode(Hp), windows[b][p][idx])
                tot_phy += v
                # decoder is frozen: gradient flows through it, never into it
                d_Hp += g @ books[p].dec_w.astype(np.float64)
            if with_grad:
                d_Hp *= w_phase / B
                dHm += _latent_mlp_backward(P, Hm, a, d_Hp, p, lat_grads)
        if with_grad:
            d_hidden[b, Lt + idx] += dHm
    l_tok, l_lat, l_phy = tot_tok / B, tot_lat / B, tot_phy / B
    report = LossReport(
        l_tok,
        l_lat,
        l_phy,
        loss_combined(l_tok, l_lat, l_phy, phase, alpha),
        float(np.mean([s.t for s in states])),
        {"text": int(n_text), "sign": int(n_sign)},
    )
    if not with_grad:
        return report, None
    grads = model.backward(cache, d_text, d_sign, d_hidden)
    for k, v in lat_grads.items():
        grads[k] += v
    return report, grads
