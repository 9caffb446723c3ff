import numpy as np
import pytest

from signdiff.diffusion import (
    FINETUNE,
    PRETRAIN,
    TokenSequence,
    VocabSpec,
    all_masked,
    forward_mask,
    mask_from_indices,
    oracle_fill_dist,
    reverse_step,
)


def test_vocab_reserved_ids():
    v = VocabSpec(10, 8)
    assert v.eos_id == 10 and v.mask_id == 11
    with pytest.raises(ValueError):
        VocabSpec(10, 1)
    with pytest.raises(ValueError):
        VocabSpec(10, 8, mask_id=5)
    with pytest.raises(ValueError):
        VocabSpec(10, 8, mask_id=12, eos_id=12)


def test_layout(make_seq, vocab):
    seq = make_seq(L_e=3, L_s=5)
    flat = seq.flatten(vocab.eos_id)
    assert len(flat) == 3 + 5 + 2 == seq.length
    assert flat[3] == vocab.eos_id and flat[-1] == vocab.eos_id
    assert flat[4] == tuple(int(x) for x in seq.sign[:, 0])
    with pytest.raises(ValueError):
        TokenSequence([1, 2], np.zeros((3, 2)).tolist()[:2])


def test_padding_and_truncation(make_seq, vocab):
    seq = make_seq(L_s=4)
    p = seq.padded(7, vocab.eos_id)
    assert p.L_s == 7 and np.all(p.sign[:, 4:] == vocab.eos_id)
    assert p.truncated_at_eos(vocab.eos_id) == seq
    with pytest.raises(ValueError):
        seq.padded(3, vocab.eos_id)


def test_forward_mask_extremes(make_seq, vocab):
    seq = make_seq()
    assert not forward_mask(seq, 0.0, PRETRAIN, 1, vocab).masked.any()
    full = forward_mask(seq, 1.0, FINETUNE, 1, vocab)
    assert full.sign_masked.all() and not full.masked[: seq.sign_start].any()
    assert forward_mask(seq, 1.0, PRETRAIN, 1, vocab).masked.all()
    for bad in (-0.1, 1.5):
        with pytest.raises(ValueError):
            forward_mask(seq, bad, FINETUNE, 0, vocab)


def test_forward_mask_deterministic_and_stores_mask_id(make_seq, vocab):
    seq = make_seq(L_s=30)
    a = forward_mask(seq, 0.5, PRETRAIN, 7, vocab)
    b = forward_mask(seq, 0.5, PRETRAIN, 7, vocab)
    assert a == b
    assert np.all(a.base.sign[:, a.sign_masked] == vocab.mask_id)
    assert np.all(a.base.sign[:, ~a.sign_masked] == seq.sign[:, ~a.sign_masked])
    assert np.all(a.part_masked() == a.sign_masked)


def test_forward_mask_fraction(vocab):
    seq = TokenSequence([1], np.zeros((3, 10_000), dtype=np.int64))
    for seed in range(20):
        frac = forward_mask(seq, 0.5, FINETUNE, seed, vocab).sign_masked.mean()
        assert 0.48 <= frac <= 0.52


def test_marginal_consistency(vocab):
    # mask at t1, then mask survivors at rate (t2 - t1) / (1 - t1): marginal equals direct masking at t2
    n, t1, t2 = 100_000, 0.3, 0.7
    seq = TokenSequence([1], np.zeros((3, n), dtype=np.int64))
    first = forward_mask(seq, t1, FINETUNE, 1, vocab).sign_masked
    extra = forward_mask(seq, (t2 - t1) / (1 - t1), FINETUNE, 2, vocab).sign_masked
    direct = forward_mask(seq, t2, FINETUNE, 3, vocab).sign_masked
    assert abs((first | extra).mean() - direct.mean()) < 0.02


def test_reverse_step_survivor_fraction(vocab):
    n = 10_000
    seq = TokenSequence([], np.zeros((3, n), dtype=np.int64))
    state = mask_from_indices(seq, seq.sign_positions(), 0.8, vocab)
    fill = oracle_fill_dist(state, seq, vocab)
    for seed in range(20):
        out = reverse_step(state, 0.4, fill, seed, vocab)
        assert 0.47 <= out.sign_masked.mean() <= 0.53


def test_reverse_step_contract(make_seq, vocab):
    seq = make_seq()
    st = forward_mask(seq, 0.6, PRETRAIN, 3, vocab)
    fill = oracle_fill_dist(st, seq, vocab)
    with pytest.raises(ValueError):
        reverse_step(st, 0.6, fill, 0, vocab)
    with pytest.raises(ValueError):
        reverse_step(st, 0.7, fill, 0, vocab)
    if st.masked_indices.size:
        bad = dict(fill)
        i = int(st.masked_indices[0])
        bad[i] = bad[i] * 0.5
        with pytest.raises(ValueError):
            reverse_step(st, 0.3, bad, 0, vocab)
        missing = dict(fill)
        del missing[i]
        with pytest.raises(ValueError):
            reverse_step(st, 0.3, missing, 0, vocab)


def test_reverse_keeps_unmasked_tokens(make_seq, vocab):
    seq = make_seq(L_s=40)
    st = forward_mask(seq, 0.5, FINETUNE, 4, vocab)
    # adversarial fill: uniform everywhere, so any copy-through bug would show
    fill = {int(i): np.full((3, vocab.n_sign_classes), 1.0 / vocab.n_sign_classes) for i in st.masked_indices}
    out = reverse_step(st, 0.2, fill, 5, vocab)
    keep = ~st.sign_masked
    assert np.array_equal(out.base.sign[:, keep], st.base.sign[:, keep])
    assert not np.any(out.masked & ~st.masked)
    assert np.all(out.part_masked() == out.sign_masked)


def test_oracle_recovery_one_step(make_seq, vocab):
    for seed in range(10):
        seq = make_seq(seed)
        st = forward_mask(seq, 0.7, PRETRAIN, seed, vocab)
        out = reverse_step(st, 0.0, oracle_fill_dist(st, seq, vocab), seed, vocab)
        assert not out.masked.any()
        assert out.base == seq


@pytest.mark.parametrize("n_steps", [1, 2, 3, 6])
def test_oracle_recovery_stepwise(make_seq, vocab, n_steps):
    seq = make_seq(L_s=6)
    st = forward_mask(seq, 1.0, PRETRAIN, 0, vocab)
    ts = np.linspace(1.0, 0.0, n_steps + 1)
    for j, s in enumerate(ts[1:]):
        st = reverse_step(st, float(s), oracle_fill_dist(st, seq, vocab), j, vocab)
    assert st.base == seq and not st.masked.any()


def test_oracle_empty_and_degenerate(vocab):
    seq = TokenSequence([1, 2], np.zeros((3, 0), dtype=np.int64))
    st = forward_mask(seq, 0.0, PRETRAIN, 0, vocab)
    assert oracle_fill_dist(st, seq, vocab) == {}
    st = forward_mask(seq, 1.0, FINETUNE, 0, vocab)
    assert reverse_step(st, 0.0, oracle_fill_dist(st, seq, vocab), 0, vocab).base == seq


def test_all_masked(vocab):
    st = all_masked([3, 4], 5, vocab)
    assert st.t == 1.0 and st.sign_masked.all() and st.base.L_s == 5
    assert not st.masked[:3].any() and not st.masked[-1]
