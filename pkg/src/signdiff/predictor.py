"""Mask predictors and decoding loops.

``TinyMDLM`` is a small bidirectional network: token/part embeddings plus
learned positions (absolute, or per-segment with a sign-span flag), a stack
of mixing blocks that add either a mean-pooled context or single-head
attention back into every position, and one softmax head per part plus a
text head.  ``ARBaseline`` shares the stack under a causal mask and decodes
left to right.  ``OraclePredictor`` returns point masses on a known answer.

All arrays are float64; gradients are hand-derived and verified against
finite differences in the test suite.
"""
from __future__ import annotations

import json
import struct
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .diffusion import PARTS, MaskState, TokenSequence, VocabSpec, all_masked, reveal_positions
from .mop import gather_codes, init_mop_params, mop_backward, mop_forward
from .rng import derive_seed, make_rng
from .scheduler import UnmaskSchedule, select_unmask

CKPT_MAGIC = b"MDSM"
CKPT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    text_vocab_size: int
    sign_vocab_size: int
    d_c: int
    d_model: int = 64
    n_blocks: int = 2
    max_len: int = 128
    embed_mode: str = "dense"
    mixer: str = "mean"
    positions: str = "absolute"

    def __post_init__(self):
        if self.mixer not in ("mean", "attn"):
            raise ValueError(f"unknown mixer {self.mixer!r}")
        if self.positions not in ("absolute", "segment"):
            raise ValueError(f"unknown position scheme {self.positions!r}")

    @property
    def vocab(self) -> VocabSpec:
        return VocabSpec(self.text_vocab_size, self.sign_vocab_size)


def init_params(cfg: ModelConfig, seed: int) -> dict:
    rng = make_rng(seed, "init_params")
    d = cfg.d_model
    vt = cfg.text_vocab_size + 1
    vs = cfg.sign_vocab_size + 1
    lim = 1.0 / np.sqrt(d)
    P = {
        # rows: text tokens, eos, mask
        "text_emb": rng.normal(0.0, 0.5, size=(cfg.text_vocab_size + 2, d)),
        "sign_eos": rng.normal(0.0, 0.5, size=d),
        "sign_mask": rng.normal(0.0, 0.5, size=d),
        "pos": rng.normal(0.0, 0.5, size=(cfg.max_len, d)),
    }
    if cfg.positions == "segment":
        P["seg_sign"] = rng.normal(0.0, 0.5, size=d)
    P.update(init_mop_params(cfg.d_c, d, rng))
    for b in range(cfg.n_blocks):
        for name in ("V", "W", "U"):
            P[f"blk{b}.{name}"] = rng.uniform(-lim, lim, size=(d, d))
        P[f"blk{b}.c"] = np.zeros(d)
        P[f"blk{b}.b"] = np.zeros(d)
        if cfg.mixer == "attn":
            # Q = K = 0 is a stationary point, so start near (not at) uniform pooling
            P[f"blk{b}.Q"] = rng.uniform(-lim, lim, size=(d, d))
            P[f"blk{b}.K"] = rng.uniform(-lim, lim, size=(d, d))
    P["head_text.w"] = rng.uniform(-lim, lim, size=(vt, d))
    P["head_text.b"] = np.zeros(vt)
    for p in PARTS:
        P[f"head.{p}.w"] = rng.uniform(-lim, lim, size=(vs, d))
        P[f"head.{p}.b"] = np.zeros(vs)
        P[f"lat.{p}.w1"] = rng.uniform(-lim, lim, size=(d, d))
        P[f"lat.{p}.b1"] = np.zeros(d)
        P[f"lat.{p}.w2"] = rng.uniform(-lim, lim, size=(cfg.d_c, d))
        P[f"lat.{p}.b2"] = np.zeros(cfg.d_c)
    return P


def softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class Prediction:
    """Class probabilities for the text region (incl. separator) and the sign region (incl. trailing eos)."""

    text: np.ndarray  # (L_e + 1, n_text_classes)
    sign: np.ndarray  # (3, n_sign, n_sign_classes)


@dataclass
class ForwardCache:
    text_idx: np.ndarray
    sign_tok: np.ndarray
    is_mask: np.ndarray
    is_eos: np.ndarray
    is_code: np.ndarray
    mop: object
    blocks: list
    hidden: np.ndarray
    text_logits: np.ndarray
    sign_logits: np.ndarray
    heads_last_only: bool = False

    @property
    def text_probs(self) -> np.ndarray:
        return softmax(self.text_logits)

    @property
    def sign_probs(self) -> np.ndarray:
        return softmax(self.sign_logits)


def state_inputs(state: MaskState, vocab: VocabSpec):
    """Embedding-table indices for the text region and raw sign tokens incl. the trailing eos column."""
    seq = state.base
    L_e = seq.L_e
    text_idx = np.empty(L_e + 1, dtype=np.int64)
    text_idx[:L_e] = vocab.text_class(seq.text)
    text_idx[L_e] = vocab.text_vocab_size
    text_idx[state.masked[: L_e + 1]] = vocab.text_vocab_size + 1
    trailing = vocab.mask_id if state.masked[-1] else vocab.eos_id
    sign_tok = np.concatenate([seq.sign, np.full((3, 1), trailing, dtype=np.int64)], axis=1)
    return text_idx, sign_tok


class _Stack:
    causal = False

    def __init__(self, cfg: ModelConfig, books, seed: int = 0, params: dict | None = None):
        self.cfg = cfg
        self.books = books
        self.vocab = cfg.vocab
        self.params = params if params is not None else init_params(cfg, seed)

    # -- forward -----------------------------------------------------------

    def forward(self, text_idx, sign_tok, heads_last_only: bool = False) -> ForwardCache:
        """Batched forward.  text_idx: (B, Lt) table rows; sign_tok: (B, 3, n) raw tokens."""
        P, cfg, voc = self.params, self.cfg, self.vocab
        text_idx = np.asarray(text_idx, dtype=np.int64)
        sign_tok = np.asarray(sign_tok, dtype=np.int64)
        B, Lt = text_idx.shape
        n = sign_tok.shape[2]
        L = Lt + n
        if L > cfg.max_len:
            raise ValueError(f"sequence length {L} exceeds model capacity {cfg.max_len}")
        d = cfg.d_model
        is_mask = (sign_tok == voc.mask_id).all(axis=1)
        is_eos = (sign_tok == voc.eos_id).any(axis=1) & ~is_mask
        is_code = ~is_mask & ~is_eos
        x = np.empty((B, L, d))
        x[:, :Lt] = P["text_emb"][text_idx]
        sx = np.empty((B, n, d))
        sx[is_mask] = P["sign_mask"]
        sx[is_eos] = P["sign_eos"]
        ids = sign_tok.transpose(0, 2, 1)[is_code]
        emb, _, mcache = mop_forward(P, gather_codes(ids, self.books), cfg.embed_mode)
        sx[is_code] = emb
        x[:, Lt:] = sx
        h = x + self._positions(Lt, n)
        blocks = []
        counts = np.arange(1, L + 1)[None, :, None]
        for b in range(cfg.n_blocks):
            g = np.tanh(h @ P[f"blk{b}.V"].T + P[f"blk{b}.c"])
            att = None
            if cfg.mixer == "attn":
                q = h @ P[f"blk{b}.Q"].T
                k = h @ P[f"blk{b}.K"].T
                S = q @ k.transpose(0, 2, 1) / np.sqrt(d)
                if self.causal:
                    S = S + np.triu(np.full((L, L), -np.inf), 1)
                A = softmax(S)
                ctx = A @ g
                att = (q, k, A)
            elif self.causal:
                ctx = np.cumsum(g, axis=1) / counts
            else:
                ctx = g.mean(axis=1, keepdims=True)  # (B, 1, d), broadcast on use
            u = np.tanh(h @ P[f"blk{b}.W"].T + ctx @ P[f"blk{b}.U"].T + P[f"blk{b}.b"])
            blocks.append((h, g, ctx, u, att))
            h = h + u
        H = h
        if heads_last_only:
            Hs = H[:, -1:]
            text_logits = np.zeros((B, 0, voc.n_text_classes))
        else:
            Hs = H[:, Lt:]
            text_logits = H[:, :Lt] @ P["head_text.w"].T + P["head_text.b"]
        sign_logits = np.stack([Hs @ P[f"head.{p}.w"].T + P[f"head.{p}.b"] for p in PARTS], axis=1)
        return ForwardCache(text_idx, sign_tok, is_mask, is_eos, is_code, mcache, blocks, H, text_logits, sign_logits, heads_last_only)

    def _positions(self, Lt: int, n: int) -> np.ndarray:
        P = self.params
        if self.cfg.positions == "segment":
            return np.concatenate([P["pos"][:Lt], P["pos"][:n] + P["seg_sign"]], axis=0)
        return P["pos"][: Lt + n]

    # -- backward ----------------------------------------------------------

    def backward(self, cache: ForwardCache, d_text_logits, d_sign_logits, d_hidden=None) -> dict:
        """Exact parameter gradients given upstream gradients on logits and last hidden states."""
        P, cfg = self.params, self.cfg
        grads = {k: np.zeros_like(v) for k, v in P.items()}
        H = cache.hidden
        B, L, d = H.shape
        Lt = cache.text_idx.shape[1]
        dH = np.zeros_like(H) if d_hidden is None else np.array(d_hidden, dtype=np.float64, copy=True)
        if not cache.heads_last_only:
            grads["head_text.w"] += np.einsum("blv,bld->vd", d_text_logits, H[:, :Lt])
            grads["head_text.b"] += d_text_logits.sum(axis=(0, 1))
            dH[:, :Lt] += d_text_logits @ P["head_text.w"]
        Hs_slice = slice(L - 1, L) if cache.heads_last_only else slice(Lt, L)
        for j, p in enumerate(PARTS):
            ds = d_sign_logits[:, j]
            grads[f"head.{p}.w"] += np.einsum("blv,bld->vd", ds, H[:, Hs_slice])
            grads[f"head.{p}.b"] += ds.sum(axis=(0, 1))
            dH[:, Hs_slice] += ds @ P[f"head.{p}.w"]
        counts = np.arange(1, L + 1)[None, :, None]
        for b in reversed(range(cfg.n_blocks)):
            h, g, ctx, u, att = cache.blocks[b]
            da = dH * (1.0 - u * u)
            grads[f"blk{b}.W"] += np.einsum("ble,bld->ed", da, h)
            da_ctx = da if (self.causal or att is not None) else da.sum(axis=1, keepdims=True)
            grads[f"blk{b}.U"] += np.einsum("ble,bld->ed", da_ctx, ctx)
            grads[f"blk{b}.b"] += da.sum(axis=(0, 1))
            dh = dH + da @ P[f"blk{b}.W"]
            dctx = da @ P[f"blk{b}.U"]
            if att is not None:
                q, k, A = att
                dg = A.transpose(0, 2, 1) @ dctx
                dA = dctx @ g.transpose(0, 2, 1)
                dS = A * (dA - (dA * A).sum(axis=-1, keepdims=True)) / np.sqrt(d)
                dq = dS @ k
                dk = dS.transpose(0, 2, 1) @ q
                grads[f"blk{b}.Q"] += np.einsum("ble,bld->ed", dq, h)
                grads[f"blk{b}.K"] += np.einsum("ble,bld->ed", dk, h)
                dh = dh + dq @ P[f"blk{b}.Q"] + dk @ P[f"blk{b}.K"]
            elif self.causal:
                scaled = dctx / counts
                dg = np.flip(np.cumsum(np.flip(scaled, axis=1), axis=1), axis=1)
            else:
                dg = dctx.sum(axis=1, keepdims=True) / L
            dpre = dg * (1.0 - g * g)
            grads[f"blk{b}.V"] += np.einsum("ble,bld->ed", dpre, h)
            grads[f"blk{b}.c"] += dpre.sum(axis=(0, 1))
            dh = dh + dpre @ P[f"blk{b}.V"]
            dH = dh
        dpos = dH.sum(axis=0)
        if cfg.positions == "segment":
            grads["pos"][:Lt] += dpos[:Lt]
            grads["pos"][: L - Lt] += dpos[Lt:]
            grads["seg_sign"] += dpos[Lt:].sum(axis=0)
        else:
            grads["pos"][:L] += dpos
        np.add.at(grads["text_emb"], cache.text_idx.reshape(-1), dH[:, :Lt].reshape(-1, d))
        dsx = dH[:, Lt:]
        grads["sign_mask"] += dsx[cache.is_mask].sum(axis=0)
        grads["sign_eos"] += dsx[cache.is_eos].sum(axis=0)
        mg, _, _ = mop_backward(P, dsx[cache.is_code], cache.mop)
        for k, v in mg.items():
            grads[k] += v
        return grads

    # -- single-state convenience -----------------------------------------

    def predict(self, state: MaskState) -> Prediction:
        text_idx, sign_tok = state_inputs(state, self.vocab)
        c = self.forward(text_idx[None], sign_tok[None])
        return Prediction(c.text_probs[0], c.sign_probs[0])


class TinyMDLM(_Stack):
    causal = False


class ARBaseline(_Stack):
    causal = True


class OraclePredictor:
    """Point masses on a fixed ground-truth sequence (sign span already padded to M)."""

    def __init__(self, truth: TokenSequence, vocab: VocabSpec):
        self.truth = truth
        self.vocab = vocab

    def predict(self, state: MaskState) -> Prediction:
        voc, tr = self.vocab, self.truth
        if tr.L_e != state.base.L_e or tr.L_s != state.base.L_s:
            raise ValueError("oracle truth does not match state layout")
        text = np.zeros((tr.L_e + 1, voc.n_text_classes))
        text[np.arange(tr.L_e), voc.text_class(tr.text)] = 1.0
        text[tr.L_e, -1] = 1.0
        sign = np.zeros((3, tr.L_s + 1, voc.n_sign_classes))
        cls = np.concatenate([voc.sign_class(tr.sign), np.full((3, 1), voc.sign_vocab_size)], axis=1)
        for j in range(3):
            sign[j, np.arange(tr.L_s + 1), cls[j]] = 1.0
        return Prediction(text, sign)


@dataclass
class GenStats:
    calls: int = 0
    wall_time: float = 0.0
    confidences: list = field(default_factory=list)


def generate(model, text, schedule: UnmaskSchedule, rng_seed: int = 0, sample: bool = False):
    """Confidence-ordered parallel decoding of an M-token sign span conditioned on ``text``.

    One predictor call per schedule step.  A position's confidence is the
    product over the three part heads of each head's maximum probability.
    Output is truncated at the first position holding an eos.
    """
    voc = model.vocab
    M = schedule.M
    state = all_masked(text, M, voc)
    start = state.base.sign_start
    stats = GenStats()
    t0 = time.perf_counter()
    rng = make_rng(rng_seed, "generate")
    for step in schedule.steps:
        pred = model.predict(state)
        stats.calls += 1
        masked = np.nonzero(state.sign_masked)[0]
        probs = pred.sign[:, masked, :]
        conf = probs.max(axis=2).prod(axis=0)
        avail = {int(j): float(c) for j, c in zip(masked, conf) if int(j) in step.candidates}
        chosen = select_unmask(avail, step, derive_seed(rng_seed, step.index))
        tokens = {}
        for j in sorted(chosen):
            row = pred.sign[:, j, :]
            if sample:
                cls = [int(rng.choice(row.shape[1], p=r / r.sum())) for r in row]
            else:
                cls = row.argmax(axis=1)
            tokens[start + j] = tuple(int(v) for v in voc.sign_token(np.asarray(cls)))
        state = reveal_positions(state, tokens, max(step.t_after, 0.0))
    stats.wall_time = time.perf_counter() - t0
    return state.base.truncated_at_eos(voc.eos_id), stats


def ar_generate(model: ARBaseline, text, M: int, rng_seed: int = 0, sample: bool = False, stop_at_eos: bool = True):
    """Left-to-right decoding, one predictor call per emitted sign position.

    With ``stop_at_eos=False`` exactly M positions are decoded (fixed-length
    latency runs); the returned sequence is still eos-truncated.
    """
    voc = model.vocab
    text = np.asarray(text, dtype=np.int64)
    text_idx = np.concatenate([voc.text_class(text), [voc.text_vocab_size]])[None]
    sign = np.zeros((1, 3, 0), dtype=np.int64)
    stats = GenStats()
    rng = make_rng(rng_seed, "ar_generate")
    t0 = time.perf_counter()
    for _ in range(M):
        c = model.forward(text_idx, sign, heads_last_only=True)
        stats.calls += 1
        row = softmax(c.sign_logits[0, :, -1, :])
        if sample:
            cls = np.array([rng.choice(row.shape[1], p=r) for r in row])
        else:
            cls = row.argmax(axis=1)
        tok = voc.sign_token(cls).reshape(1, 3, 1)
        sign = np.concatenate([sign, tok], axis=2)
        if stop_at_eos and np.any(tok == voc.eos_id):
            break
    stats.wall_time = time.perf_counter() - t0
    return TokenSequence(text, sign[0]).truncated_at_eos(voc.eos_id), stats


# -- checkpoints -----------------------------------------------------------


def save_checkpoint(path, params: dict, meta: dict):
    """Magic, version, JSON metadata, then a named tensor table of float32 arrays."""
    meta_b = json.dumps(meta, sort_keys=True).encode()
    parts = [CKPT_MAGIC, struct.pack("<HI", CKPT_VERSION, len(meta_b)), meta_b, struct.pack("<I", len(params))]
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f4")
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_checkpoint(path) -> tuple[dict, dict]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a model checkpoint")
    version, mlen = struct.unpack_from("<HI", buf, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 10
    meta = json.loads(buf[pos : pos + mlen])
    pos += mlen
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    params = {}
    for _ in range(count):
        (nl,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos : pos + nl].decode()
        pos += nl
        (ndim,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        params[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 4 * size
    return params, meta


def config_to_meta(cfg: ModelConfig) -> dict:
    return asdict(cfg)
