"""Forward masking and reverse unmasking over text + part-wise sign sequences.

Layout of a flattened sequence (0-based positions)::

    [ text_0 .. text_{Le-1} | eos | sign_0 .. sign_{Ls-1} | eos ]

Each sign position carries a triple of part tokens (body, left, right) that is
masked and revealed as a unit.  Token ids live in per-modality spaces; the two
reserved ids (``mask_id`` and ``eos_id``) sit above both vocabularies.

Predictors speak in *class* indices: a text head has ``text_vocab_size + 1``
classes and a sign head ``sign_vocab_size + 1``, the last class being eos.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .rng import make_rng

PARTS = ("b", "l", "r")
PRETRAIN = "pretrain"
FINETUNE = "finetune"


@dataclass(frozen=True)
class VocabSpec:
    text_vocab_size: int
    sign_vocab_size: int
    mask_id: int | None = None
    eos_id: int | None = None

    def __post_init__(self):
        if self.text_vocab_size < 1:
            raise ValueError("text_vocab_size must be positive")
        if self.sign_vocab_size < 2:
            raise ValueError("sign_vocab_size must be at least 2")
        top = max(self.text_vocab_size, self.sign_vocab_size)
        if self.eos_id is None:
            object.__setattr__(self, "eos_id", top)
        if self.mask_id is None:
            object.__setattr__(self, "mask_id", top + 1)
        if self.mask_id == self.eos_id:
            raise ValueError("mask_id and eos_id must differ")
        for rid in (self.mask_id, self.eos_id):
            if rid < top:
                raise ValueError(f"reserved id {rid} collides with a vocabulary range")

    @property
    def n_text_classes(self) -> int:
        return self.text_vocab_size + 1

    @property
    def n_sign_classes(self) -> int:
        return self.sign_vocab_size + 1

    def text_class(self, token):
        token = np.asarray(token)
        return np.where(token == self.eos_id, self.text_vocab_size, token)

    def sign_class(self, token):
        token = np.asarray(token)
        return np.where(token == self.eos_id, self.sign_vocab_size, token)

    def text_token(self, cls):
        cls = np.asarray(cls)
        return np.where(cls == self.text_vocab_size, self.eos_id, cls)

    def sign_token(self, cls):
        cls = np.asarray(cls)
        return np.where(cls == self.sign_vocab_size, self.eos_id, cls)


@dataclass(frozen=True, eq=False)
class TokenSequence:
    """Text tokens plus three aligned part-wise sign token streams."""

    text: np.ndarray
    sign: np.ndarray  # (3, L_s)

    def __post_init__(self):
        text = np.asarray(self.text, dtype=np.int64).reshape(-1)
        sign = np.asarray(self.sign, dtype=np.int64)
        if sign.size == 0:
            sign = sign.reshape(3, 0)
        if sign.ndim != 2 or sign.shape[0] != 3:
            raise ValueError(f"sign tokens must have shape (3, L_s), got {sign.shape}")
        text.setflags(write=False)
        sign.setflags(write=False)
        object.__setattr__(self, "text", text)
        object.__setattr__(self, "sign", sign)

    @classmethod
    def from_parts(cls, text, body, left, right) -> "TokenSequence":
        if not (len(body) == len(left) == len(right)):
            raise ValueError("part streams must have identical length")
        return cls(np.asarray(text), np.array([body, left, right], dtype=np.int64).reshape(3, len(body)))

    @property
    def L_e(self) -> int:
        return int(self.text.shape[0])

    @property
    def L_s(self) -> int:
        return int(self.sign.shape[1])

    @property
    def length(self) -> int:
        return self.L_e + self.L_s + 2

    @property
    def sign_start(self) -> int:
        return self.L_e + 1

    def sign_positions(self) -> np.ndarray:
        return np.arange(self.sign_start, self.sign_start + self.L_s)

    def is_text_position(self, i: int) -> bool:
        return i <= self.L_e

    def flatten(self, eos_id: int) -> list:
        """Flat layout; sign positions yield (b, l, r) tuples, the two eos markers plain ids."""
        out: list = [int(x) for x in self.text]
        out.append(eos_id)
        out.extend(tuple(int(v) for v in col) for col in self.sign.T)
        out.append(eos_id)
        return out

    def padded(self, M: int, eos_id: int) -> "TokenSequence":
        """Sign span right-padded with eos triples to exactly M positions."""
        if self.L_s > M:
            raise ValueError(f"sign length {self.L_s} exceeds span {M}")
        pad = np.full((3, M - self.L_s), eos_id, dtype=np.int64)
        return TokenSequence(self.text, np.concatenate([self.sign, pad], axis=1))

    def truncated_at_eos(self, eos_id: int) -> "TokenSequence":
        hit = np.nonzero((self.sign == eos_id).any(axis=0))[0]
        if hit.size == 0:
            return self
        return TokenSequence(self.text, self.sign[:, : hit[0]])

    def __eq__(self, other):
        if not isinstance(other, TokenSequence):
            return NotImplemented
        return np.array_equal(self.text, other.text) and np.array_equal(self.sign, other.sign)

    def __hash__(self):
        return hash((self.text.tobytes(), self.sign.tobytes()))


@dataclass(frozen=True, eq=False)
class MaskState:
    """A sequence with one masked flag per flat position and the noise level ``t``.

    Token values at masked positions are stored as ``mask_id``; the two eos
    markers are implicit in the layout.
    """

    base: TokenSequence
    masked: np.ndarray
    t: float
    mask_id: int = field(default=-1)

    def __post_init__(self):
        m = np.asarray(self.masked, dtype=bool).copy()
        if m.shape != (self.base.length,):
            raise ValueError(f"mask flags must have length {self.base.length}, got {m.shape}")
        m.setflags(write=False)
        object.__setattr__(self, "masked", m)

    @property
    def masked_indices(self) -> np.ndarray:
        return np.nonzero(self.masked)[0]

    @property
    def sign_masked(self) -> np.ndarray:
        """Per sign index flag; shared by all three parts."""
        s = self.base.sign_start
        return self.masked[s : s + self.base.L_s]

    @property
    def text_masked(self) -> np.ndarray:
        return self.masked[: self.base.L_e]

    def part_masked(self) -> np.ndarray:
        """(3, L_s) view of the sign flags, identical across rows by construction."""
        return np.broadcast_to(self.sign_masked, (3, self.base.L_s))

    def __eq__(self, other):
        if not isinstance(other, MaskState):
            return NotImplemented
        return self.base == other.base and np.array_equal(self.masked, other.masked) and self.t == other.t


def _hide(seq: TokenSequence, masked: np.ndarray, mask_id: int) -> TokenSequence:
    text = seq.text.copy()
    sign = seq.sign.copy()
    text[masked[: seq.L_e]] = mask_id
    s = seq.sign_start
    sign[:, masked[s : s + seq.L_s]] = mask_id
    return TokenSequence(text, sign)


def maskable_positions(seq: TokenSequence, mode: str) -> np.ndarray:
    if mode == PRETRAIN:
        return np.arange(seq.length)
    if mode == FINETUNE:
        return seq.sign_positions()
    raise ValueError(f"unknown mode {mode!r}")


def forward_mask(seq: TokenSequence, t: float, mode: str, rng_seed: int, vocab: VocabSpec) -> MaskState:
    """Mask every maskable position independently with probability ``t``."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"noise level must lie in [0, 1], got {t}")
    positions = maskable_positions(seq, mode)
    rng = make_rng(rng_seed, "forward_mask")
    masked = np.zeros(seq.length, dtype=bool)
    masked[positions] = rng.random(positions.size) < t
    return MaskState(_hide(seq, masked, vocab.mask_id), masked, float(t), vocab.mask_id)


def mask_from_indices(seq: TokenSequence, masked_positions, t: float, vocab: VocabSpec) -> MaskState:
    masked = np.zeros(seq.length, dtype=bool)
    masked[np.asarray(masked_positions, dtype=np.int64)] = True
    return MaskState(_hide(seq, masked, vocab.mask_id), masked, float(t), vocab.mask_id)


def all_masked(text, M: int, vocab: VocabSpec) -> MaskState:
    """Generation start: text visible, M sign positions masked, t = 1."""
    seq = TokenSequence(np.asarray(text), np.full((3, M), vocab.mask_id, dtype=np.int64))
    masked = np.zeros(seq.length, dtype=bool)
    masked[seq.sign_positions()] = True
    return MaskState(seq, masked, 1.0, vocab.mask_id)


def _check_rows(P: np.ndarray, positions: np.ndarray):
    flat = P.reshape(len(P), -1 if len(P) else 1, P.shape[-1])
    bad = np.any(flat < 0, axis=(1, 2)) | np.any(np.abs(flat.sum(axis=-1) - 1.0) > 1e-6, axis=1)
    if bad.any():
        raise ValueError(f"fill distribution at position {int(positions[np.argmax(bad)])} is not normalized")


def _stack_rows(fill_dist, positions, shape) -> np.ndarray:
    out = np.empty((len(positions),) + shape)
    for n, i in enumerate(positions):
        row = np.asarray(fill_dist[int(i)], dtype=np.float64)
        if row.shape != shape:
            raise ValueError(f"fill distribution at position {int(i)} has shape {row.shape}, expected {shape}")
        out[n] = row
    return out


def _draw(P: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF draw along the last axis, one uniform per row."""
    c = np.cumsum(P, axis=-1)
    cls = (c <= (u * c[..., -1])[..., None]).sum(axis=-1)
    return np.minimum(cls, P.shape[-1] - 1)


def reverse_step(
    state: MaskState,
    s: float,
    fill_dist: Mapping[int, np.ndarray],
    rng_seed: int,
    vocab: VocabSpec,
) -> MaskState:
    """One ancestral step from noise level ``state.t`` down to ``s``.

    Unmasked positions are copied through.  A masked position stays masked
    with probability s/t; otherwise it is filled by sampling ``fill_dist[i]``,
    a (n_text_classes,) row for text positions or a (3, n_sign_classes)
    array for sign positions.
    """
    t = state.t
    if not (0.0 <= s < t <= 1.0):
        raise ValueError(f"need 0 <= s < t <= 1, got s={s}, t={t}")
    idx = state.masked_indices
    for i in idx:
        if int(i) not in fill_dist:
            raise ValueError(f"no fill distribution for masked position {int(i)}")
    text_pos = idx[idx <= state.base.L_e]
    sign_pos = idx[idx > state.base.L_e]
    P_text = _stack_rows(fill_dist, text_pos, (vocab.n_text_classes,))
    P_sign = _stack_rows(fill_dist, sign_pos, (3, vocab.n_sign_classes))
    _check_rows(P_text, text_pos)
    _check_rows(P_sign, sign_pos)
    rng = make_rng(rng_seed, "reverse_step")
    keep_text = rng.random(text_pos.size) < (s / t)
    keep_sign = rng.random(sign_pos.size) < (s / t)
    txt = vocab.text_token(_draw(P_text[~keep_text], rng.random(int((~keep_text).sum()))))
    sgn = vocab.sign_token(_draw(P_sign[~keep_sign], rng.random((int((~keep_sign).sum()), 3))))
    tokens = {int(i): int(v) for i, v in zip(text_pos[~keep_text], txt)}
    tokens.update({int(i): tuple(int(x) for x in row) for i, row in zip(sign_pos[~keep_sign], sgn)})
    return reveal_positions(state, tokens, s)


def reveal_positions(state: MaskState, tokens: Mapping[int, object], s: float) -> MaskState:
    """Write tokens at the given masked positions and move to noise level ``s``.

    Text positions take an int; sign positions a (b, l, r) triple.  The two
    layout eos markers accept only eos and are stored implicitly.
    """
    seq = state.base
    text = seq.text.copy()
    sign = seq.sign.copy()
    masked = state.masked.copy()
    for i, tok in tokens.items():
        if not masked[i]:
            raise ValueError(f"position {i} is already unmasked")
        masked[i] = False
        if i < seq.L_e:
            text[i] = int(tok)
        elif seq.sign_start <= i < seq.sign_start + seq.L_s:
            sign[:, i - seq.sign_start] = np.asarray(tok, dtype=np.int64).reshape(3)
    return MaskState(TokenSequence(text, sign), masked, float(s), state.mask_id)


def oracle_fill_dist(state: MaskState, truth: TokenSequence, vocab: VocabSpec) -> dict[int, np.ndarray]:
    """Point masses on the true token at every masked position."""
    if truth.L_e != state.base.L_e or truth.L_s != state.base.L_s:
        raise ValueError("truth layout does not match state")
    out: dict[int, np.ndarray] = {}
    for i in state.masked_indices:
        i = int(i)
        if i < truth.L_e:
            p = np.zeros(vocab.n_text_classes)
            p[int(vocab.text_class(truth.text[i]))] = 1.0
        elif i == truth.L_e:
            p = np.zeros(vocab.n_text_classes)
            p[-1] = 1.0
        elif i < truth.sign_start + truth.L_s:
            p = np.zeros((3, vocab.n_sign_classes))
            p[np.arange(3), vocab.sign_class(truth.sign[:, i - truth.sign_start])] = 1.0
        else:
            p = np.zeros((3, vocab.n_sign_classes))
            p[:, -1] = 1.0
        out[i] = p
    return out
