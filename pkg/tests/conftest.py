import numpy as np
import pytest

from signdiff.diffusion import TokenSequence, VocabSpec


@pytest.fixture
def vocab():
    return VocabSpec(text_vocab_size=12, sign_vocab_size=8)


def random_seq(rng, vocab, L_e=4, L_s=6):
    text = rng.integers(0, vocab.text_vocab_size, size=L_e)
    sign = rng.integers(0, vocab.sign_vocab_size, size=(3, L_s))
    return TokenSequence(text, sign)


@pytest.fixture
def make_seq(vocab):
    def _make(seed=0, L_e=4, L_s=6):
        return random_seq(np.random.default_rng(seed), vocab, L_e, L_s)

    return _make


def random_books(N_c=8, d_c=4, width=8, seed=0):
    """Codebooks with random codes and maps; enough for layers that only read codes."""
    from signdiff.tokenizer import FRAMES_PER_TOKEN, Codebook, Codebooks, default_part_slices

    rng = np.random.default_rng(seed)
    win = FRAMES_PER_TOKEN * width
    books = {}
    for p in ("b", "l", "r"):
        f32 = lambda a: a.astype(np.float32)
        books[p] = Codebook(
            p,
            f32(rng.normal(size=(N_c, d_c))),
            f32(rng.normal(size=(d_c, win))),
            f32(rng.normal(size=win)),
            f32(rng.normal(size=(win, d_c))),
            f32(rng.normal(size=win)),
            width,
        )
    return Codebooks(books, default_part_slices(3 * width))


@pytest.fixture(scope="session")
def fitted():
    """(motions, codebooks) fitted on a small synthetic set."""
    from signdiff.tokenizer import MotionConfig, fit_codebooks, gen_synthetic_pairs

    pairs = gen_synthetic_pairs(60, 3, MotionConfig(max_signs=4))
    motions = [m for m, _ in pairs]
    return pairs, fit_codebooks(motions, 64, 16, 40, 0)


def pytest_terminal_summary(terminalreporter):
    lines = []
    for outcome in ("passed", "failed"):
        for rep in terminalreporter.stats.get(outcome, []):
            if getattr(rep, "when", None) == "call":
                lines += [v for k, v in rep.user_properties if k == "acceptance"]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
