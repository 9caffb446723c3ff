"""Seeded toy experiments behind the directional acceptance checks.

``utc_convergence``: fine-tune the same initialization with plain and
checkpointed masking and compare the training token loss at the last epoch.

``pretraining_gains``: pretrain on a pool of three synthetic shards (the
fine-tuning shard plus two independent draws from the same generator), then
fine-tune on one shard, against fine-tuning from scratch for the same total
number of epochs; tri-level and token-only pretraining are both run.
"""
from __future__ import annotations

from dataclasses import dataclass

from .pipeline import TrainConfig, eval_loss, evaluate_model, prepare_examples, train_model
from .predictor import ModelConfig, TinyMDLM
from .rng import derive_seed
from .scheduler import PLAIN, UTC
from .tokenizer import MotionConfig, fit_codebooks, gen_synthetic_pairs


@dataclass(frozen=True)
class ToySetup:
    n_train: int = 200
    n_dev: int = 40
    pool_shards: int = 2
    lexicon_size: int = 50
    max_signs: int = 4
    durations: tuple = (8, 12, 16)
    N_c: int = 64
    d_c: int = 16
    codebook_iters: int = 30
    d_model: int = 64
    n_blocks: int = 2
    mixer: str = "attn"
    positions: str = "segment"
    lr: float = 0.003
    batch_size: int = 16
    optimizer: str = "adam"
    k: int = 4


@dataclass
class ToyData:
    train: list
    dev: list
    pool: list  # extra pretraining shards
    books: object
    M: int
    model: ModelConfig


def build_toy(seed: int, setup: ToySetup = ToySetup()) -> ToyData:
    mc = MotionConfig(lexicon_size=setup.lexicon_size, max_signs=setup.max_signs, durations=setup.durations)
    pairs = gen_synthetic_pairs(setup.n_train + setup.n_dev, seed, mc)
    extra = []
    if setup.pool_shards:
        extra = gen_synthetic_pairs(setup.pool_shards * setup.n_train, derive_seed(seed, "pool"), mc)
    motions = [m for m, _ in pairs[: setup.n_train]] + [m for m, _ in extra]
    books = fit_codebooks(motions, setup.N_c, setup.d_c, setup.codebook_iters, seed)
    ex = prepare_examples(((f"s{i}", t, m) for i, (m, t) in enumerate(pairs)), books)
    pool = prepare_examples(((f"p{i}", t, m) for i, (m, t) in enumerate(extra)), books)
    # span just covers the longest sequence plus room for an eos
    M = max(e.tokens.shape[1] for e in ex + pool) + 2
    text_max = max(e.text.shape[0] for e in ex + pool)
    mcfg = ModelConfig(
        setup.lexicon_size, setup.N_c, setup.d_c, setup.d_model, setup.n_blocks, text_max + M + 2,
        mixer=setup.mixer, positions=setup.positions,
    )
    return ToyData(ex[: setup.n_train], ex[setup.n_train :], pool, books, M, mcfg)


def _tc(data: ToyData, setup: ToySetup, seed: int, epochs: int, **kw) -> TrainConfig:
    return TrainConfig(epochs, setup.batch_size, setup.lr, M=data.M, optimizer=setup.optimizer, seed=seed, **kw)


def utc_convergence(seed: int, epochs: int = 50, setup: ToySetup = ToySetup(), data: ToyData | None = None):
    """Per-epoch training l_tok for plain vs. checkpointed fine-tuning from one initialization.

    Returns (curves, models), both keyed by variant.
    """
    data = data or build_toy(seed, setup)
    curves, models = {}, {}
    for variant in (PLAIN, UTC):
        model = TinyMDLM(data.model, data.books, seed)
        hist = train_model(model, data.train, _tc(data, setup, seed, epochs), "finetune", variant)
        curves[variant] = [h.l_tok for h in hist]
        models[variant] = model
    return curves, models


def _dev_scores(model, data: ToyData, setup: ToySetup) -> dict:
    rep = evaluate_model(model, data.dev, data.books, data.M, setup.k, UTC)
    return {
        "dev_l_tok": eval_loss(model, data.dev, data.M, "finetune", UTC),
        "sibleu_body": rep.sibleu_body,
        "sibleu_hands": rep.sibleu_hands,
        "sibleu": 0.5 * (rep.sibleu_body + rep.sibleu_hands),
    }


def pretraining_gains(
    seed: int,
    pretrain_epochs: int = 25,
    finetune_epochs: int = 25,
    setup: ToySetup = ToySetup(),
    data: ToyData | None = None,
    scratch=None,
) -> dict:
    """Dev scores for scratch, tri-level-pretrained and token-only-pretrained fine-tuning.

    Scratch trains for ``pretrain_epochs + finetune_epochs``; the others split
    the same epoch budget between pretraining and fine-tuning.  ``scratch`` may
    pass in a model already fine-tuned that way (``utc_convergence`` builds one).
    """
    data = data or build_toy(seed, setup)
    out = {}
    if scratch is None:
        scratch = TinyMDLM(data.model, data.books, seed)
        train_model(scratch, data.train, _tc(data, setup, seed, pretrain_epochs + finetune_epochs), "finetune", UTC)
    out["scratch"] = _dev_scores(scratch, data, setup)
    for name, full in (("tri", True), ("tok", False)):
        model = TinyMDLM(data.model, data.books, seed)
        tc = _tc(data, setup, seed, pretrain_epochs, use_lat=full, use_phy=full)
        train_model(model, data.train + data.pool, tc, "pretrain")
        train_model(model, data.train, _tc(data, setup, seed, finetune_epochs), "finetune", UTC)
        out[name] = _dev_scores(model, data, setup)
    return out

