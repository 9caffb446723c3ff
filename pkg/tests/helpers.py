"""Shared builders for predictor / objective tests."""
import numpy as np

from conftest import random_books
from signdiff.diffusion import TokenSequence, forward_mask
from signdiff.predictor import ModelConfig, TinyMDLM


def tiny_model(mixer="mean", positions="absolute", embed_mode="dense", seed=0, d_model=12, cls=TinyMDLM, jitter=0.3):
    books = random_books(N_c=8, d_c=4, width=8, seed=seed)
    cfg = ModelConfig(6, 8, 4, d_model=d_model, n_blocks=2, max_len=40, embed_mode=embed_mode, mixer=mixer, positions=positions)
    model = cls(cfg, books, seed)
    if jitter:
        # move every tensor off its special init (zero gates, zero biases) so all paths carry gradient
        rng = np.random.default_rng(seed + 1000)
        for k, v in model.params.items():
            v += rng.normal(scale=jitter, size=v.shape)
    return model


def toy_batch(model, phase, t, n=3, L_e=3, L_true=4, M=6, seed=0):
    """Masked states, padded truths and true part windows for ``n`` random sequences."""
    rng = np.random.default_rng(seed)
    voc = model.vocab
    states, truths, windows = [], [], []
    for b in range(n):
        seq = TokenSequence(rng.integers(0, voc.text_vocab_size, size=L_e), rng.integers(0, voc.sign_vocab_size, size=(3, L_true)))
        pad = seq.padded(M, voc.eos_id)
        st = forward_mask(pad, t, phase, seed * 100 + b, voc)
        states.append(st)
        truths.append(pad)
        windows.append({p: rng.normal(scale=1.5, size=(L_true, 32)) for p in "blr"})
    return states, truths, windows
