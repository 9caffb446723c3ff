"""Mixture-of-parts sign embedding and its ablation baselines.

Given the three part codes of a sign position, each code is projected to the
model width by its own affine map, and a small gate MLP over the concatenated
codes produces softmax weights that mix the projections.

Modes:
  ``dense``  softmax gate over all parts
  ``avg``    plain mean of the three projections, no gate
  ``top1`` / ``top2``  gate truncated to the largest k weights, renormalized
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffusion import PARTS

MODES = ("dense", "avg", "top1", "top2", "top3")


def init_mop_params(d_c: int, d_model: int, rng: np.random.Generator, prefix: str = "mop.") -> dict:
    params = {}
    lim = 1.0 / np.sqrt(d_c)
    for p in PARTS:
        params[f"{prefix}fc_w.{p}"] = rng.uniform(-lim, lim, size=(d_model, d_c))
        params[f"{prefix}fc_b.{p}"] = np.zeros(d_model)
    hidden = 2 * d_c
    lim1 = 1.0 / np.sqrt(3 * d_c)
    params[f"{prefix}gate_w1"] = rng.uniform(-lim1, lim1, size=(hidden, 3 * d_c))
    params[f"{prefix}gate_b1"] = np.zeros(hidden)
    # zero final layer: training starts from uniform gates, i.e. the simple average
    params[f"{prefix}gate_w2"] = np.zeros((3, hidden))
    params[f"{prefix}gate_b2"] = np.zeros(3)
    return params


def _softmax(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class MoPCache:
    codes: np.ndarray
    proj: np.ndarray  # (N, 3, d_model)
    hidden: np.ndarray
    gates: np.ndarray  # raw softmax gates
    weights: np.ndarray  # weights actually applied
    keep: np.ndarray | None
    mode: str


def _top_k(mode: str) -> int | None:
    return int(mode[3:]) if mode.startswith("top") else None


def mop_forward(params: dict, codes: np.ndarray, mode: str = "dense", prefix: str = "mop."):
    """codes: (N, 3, d_c) -> embeddings (N, d_model), applied weights (N, 3), cache."""
    if mode not in MODES:
        raise ValueError(f"unknown embedding mode {mode!r}")
    codes = np.asarray(codes, dtype=np.float64)
    N = codes.shape[0]
    proj = np.stack(
        [codes[:, j] @ params[f"{prefix}fc_w.{p}"].T + params[f"{prefix}fc_b.{p}"] for j, p in enumerate(PARTS)],
        axis=1,
    )
    x = codes.reshape(N, 3 * codes.shape[2])
    hidden = np.tanh(x @ params[f"{prefix}gate_w1"].T + params[f"{prefix}gate_b1"])
    gates = _softmax(hidden @ params[f"{prefix}gate_w2"].T + params[f"{prefix}gate_b2"])
    keep = None
    if mode == "avg":
        weights = np.full((N, 3), 1.0 / 3.0)
    elif mode == "dense":
        weights = gates
    else:
        k = _top_k(mode)
        order = np.argsort(-gates, axis=1, kind="stable")
        keep = np.zeros_like(gates)
        np.put_along_axis(keep, order[:, :k], 1.0, axis=1)
        kept = gates * keep
        weights = kept / kept.sum(axis=1, keepdims=True)
    out = (weights[:, :, None] * proj).sum(axis=1)
    return out, weights, MoPCache(codes, proj, hidden, gates, weights, keep, mode)


def mop_backward(params: dict, dout: np.ndarray, cache: MoPCache, prefix: str = "mop."):
    """Gradients of the embedding w.r.t. the MoP parameters and the input codes.

    Returns (param_grads, d_codes, d_gate_logits).
    """
    grads = {}
    codes = cache.codes
    N = codes.shape[0]
    d_proj = cache.weights[:, :, None] * dout[:, None, :]
    d_codes = np.zeros_like(codes)
    for j, p in enumerate(PARTS):
        grads[f"{prefix}fc_w.{p}"] = d_proj[:, j].T @ codes[:, j]
        grads[f"{prefix}fc_b.{p}"] = d_proj[:, j].sum(0)
        d_codes[:, j] = d_proj[:, j] @ params[f"{prefix}fc_w.{p}"]
    if cache.mode == "avg":
        d_logits = np.zeros((N, 3))
    else:
        d_w = np.einsum("nd,npd->np", dout, cache.proj)
        if cache.mode == "dense":
            d_g = d_w
        else:
            kept = cache.gates * cache.keep
            s = kept.sum(axis=1, keepdims=True)
            d_g = cache.keep * (d_w - (cache.weights * d_w).sum(axis=1, keepdims=True)) / s
        g = cache.gates
        d_logits = g * (d_g - (g * d_g).sum(axis=1, keepdims=True))
    grads[f"{prefix}gate_w2"] = d_logits.T @ cache.hidden
    grads[f"{prefix}gate_b2"] = d_logits.sum(0)
    d_hidden = d_logits @ params[f"{prefix}gate_w2"]
    d_pre = d_hidden * (1.0 - cache.hidden**2)
    x = codes.reshape(N, 3 * codes.shape[2])
    grads[f"{prefix}gate_w1"] = d_pre.T @ x
    grads[f"{prefix}gate_b1"] = d_pre.sum(0)
    d_codes += (d_pre @ params[f"{prefix}gate_w1"]).reshape(codes.shape)
    return grads, d_codes, d_logits


def gather_codes(part_ids, books) -> np.ndarray:
    """(N, 3) part ids -> (N, 3, d_c) code vectors; rejects out-of-range ids."""
    ids = np.asarray(part_ids, dtype=np.int64).reshape(-1, 3)
    out = np.empty((ids.shape[0], 3, books.d_c))
    for j, p in enumerate(PARTS):
        cb = books[p]
        if np.any(ids[:, j] < 0) or np.any(ids[:, j] >= cb.N_c):
            raise ValueError(f"part {p}: id out of range [0, {cb.N_c})")
        out[:, j] = cb.codes[ids[:, j]]
    return out


def mop_embed(part_ids, books, params, prefix: str = "mop."):
    """Gated embedding for a single (i_b, i_l, i_r) triple -> (d_model vector, 3 gates)."""
    out, w, _ = mop_forward(params, gather_codes(part_ids, books), "dense", prefix)
    return out[0], w[0]


def avg_embed(part_ids, books, params, prefix: str = "mop."):
    out, _, _ = mop_forward(params, gather_codes(part_ids, books), "avg", prefix)
    return out[0]


def sparse_embed(part_ids, books, params, top_k: int, prefix: str = "mop."):
    if top_k not in (1, 2, 3):
        raise ValueError("top_k must be 1, 2 or 3")
    out, w, _ = mop_forward(params, gather_codes(part_ids, books), f"top{top_k}", prefix)
    return out[0], w[0]
