"""Command-line entry point.

Every artifact of a run lives under ``<out>/<config hash>/``::

    data/{train,dev,test,pool}.jsonl  data/manifest.json
    codebooks.bin
    pretrain.ckpt  pretrain.log
    finetune.ckpt  finetune.log
    generated/<split>.jsonl  generated/<split>.manifest.json
    report_<split>.txt

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import math
import sys
from fractions import Fraction
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, load_config
from .metrics import bench_latency, evaluate_pairs
from .pipeline import TrainConfig, prepare_examples, train_model
from .predictor import (
    ARBaseline,
    ModelConfig,
    OraclePredictor,
    TinyMDLM,
    config_to_meta,
    generate,
    load_checkpoint,
    save_checkpoint,
)
from .rng import derive_seed
from .scheduler import build_schedule, count_orders_plain, count_orders_utc, magnitude
from .tokenizer import (
    Codebooks,
    MotionConfig,
    MotionSequence,
    default_part_slices,
    detokenize,
    fit_codebooks,
    gen_synthetic_pairs,
)

SPLITS = ("train", "dev", "test")
POOL = "pool"  # pretraining-only shards
EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class DataError(RuntimeError):
    pass


# -- run directory and files ---------------------------------------------------


class Run:
    def __init__(self, cfg: RunConfig, out: str):
        self.cfg = cfg
        self.hash = cfg.hash()
        self.dir = Path(out) / self.hash[:16]

    def path(self, *parts) -> Path:
        return self.dir.joinpath(*parts)

    def ensure(self, *parts) -> Path:
        p = self.path(*parts)
        try:
            p.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise DataError(f"cannot create {p}: {e}") from None
        return p


def _sha(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write(path: Path, text: str):
    try:
        path.write_text(text)
    except OSError as e:
        raise DataError(f"cannot write {path}: {e}") from None


def read_jsonl(path) -> list[dict]:
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from None
    try:
        return [json.loads(l) for l in lines if l.strip()]
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: malformed line: {e}") from None


def motion_config(cfg: RunConfig) -> MotionConfig:
    return MotionConfig(d_s=cfg.d_s, lexicon_size=cfg.lexicon_size, min_signs=cfg.min_signs, max_signs=cfg.max_signs)


def model_config(cfg: RunConfig) -> ModelConfig:
    return ModelConfig(
        cfg.lexicon_size, cfg.N_c, cfg.d_c, cfg.d_model, cfg.n_blocks, cfg.max_len, cfg.embed_mode, cfg.mixer, cfg.positions
    )


def split_sizes(n: int) -> tuple[int, int, int]:
    a = (8 * n) // 10
    b = n // 10
    return a, b, n - a - b


def load_manifest(run: Run) -> dict:
    p = run.path("data", "manifest.json")
    if not p.exists():
        raise DataError(f"no dataset at {p.parent}; run gen-data first")
    return json.loads(p.read_text())


def load_split(run: Run, split: str) -> list[dict]:
    if split not in SPLITS + (POOL,):
        raise ConfigError(f"unknown split {split!r}")
    man = load_manifest(run)
    p = run.path("data", f"{split}.jsonl")
    if _sha(p) != man["files"][split]:
        raise DataError(f"{p} does not match its manifest")
    return read_jsonl(p)


def load_books(run: Run) -> Codebooks:
    p = run.path("codebooks.bin")
    if not p.exists():
        raise DataError(f"no codebooks at {p}; run fit-codebooks first")
    return Codebooks.load(p, run.cfg.d_s)


def records_to_examples(rows, books):
    slices = default_part_slices(books.part_slices["r"].stop)
    return prepare_examples(((r["id"], r["text_tokens"], MotionSequence(r["frames"], dict(slices))) for r in rows), books)


def load_model(run: Run, path: Path, books) -> TinyMDLM:
    if not path.exists():
        raise DataError(f"missing checkpoint {path}")
    params, meta = load_checkpoint(path)
    mcfg = model_config(run.cfg)
    if meta.get("model") != config_to_meta(mcfg):
        raise ConfigError(f"checkpoint {path} was trained with a different model configuration")
    ref = TinyMDLM(mcfg, books, 0).params
    for k, v in ref.items():
        if k not in params or params[k].shape != v.shape:
            raise ConfigError(f"checkpoint tensor {k} does not match the configured shape")
    return TinyMDLM(mcfg, books, params=params)


def _check_capacity(cfg: RunConfig, examples):
    longest = max((ex.text.shape[0] for ex in examples), default=0)
    if longest + cfg.M + 2 > cfg.max_len:
        raise ConfigError(f"max_len {cfg.max_len} < text {longest} + M {cfg.M} + 2")
    too_long = [ex.id for ex in examples if ex.tokens.shape[1] > cfg.M]
    if too_long:
        raise ConfigError(f"M={cfg.M} is shorter than the sign span of {too_long[0]}")


# -- commands ------------------------------------------------------------------


def cmd_gen_data(run: Run, args) -> int:
    cfg = run.cfg
    mc = motion_config(cfg)
    pairs = gen_synthetic_pairs(cfg.n, cfg.seed, mc)
    sizes = split_sizes(cfg.n)
    pool = gen_synthetic_pairs(cfg.pool_shards * sizes[0], derive_seed(cfg.seed, "pool"), mc) if cfg.pool_shards else []
    d = run.ensure("data")
    groups, start = {}, 0
    for split, size in zip(SPLITS, sizes):
        groups[split] = [(f"{split}-{i:05d}", pairs[i]) for i in range(start, start + size)]
        start += size
    groups[POOL] = [(f"{POOL}-{i:05d}", pr) for i, pr in enumerate(pool)]
    files = {}
    for split, rows in groups.items():
        p = d / f"{split}.jsonl"
        lines = (json.dumps({"id": rid, "text_tokens": text, "frames": motion.frames.tolist()}) for rid, (motion, text) in rows)
        _write(p, "".join(l + "\n" for l in lines))
        files[split] = _sha(p)
    dataset_hash = hashlib.sha256("".join(files[s] for s in sorted(files)).encode()).hexdigest()
    manifest = {
        "seed": cfg.seed,
        "config_hash": run.hash,
        "dataset_hash": dataset_hash,
        "files": files,
        "sizes": {s: len(r) for s, r in groups.items()},
    }
    _write(d / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"wrote {cfg.n} pairs to {d} (train/dev/test = {sizes[0]}/{sizes[1]}/{sizes[2]}; pretraining pool {len(pool)})")
    return EXIT_OK


def cmd_fit_codebooks(run: Run, args) -> int:
    cfg = run.cfg
    rows = load_split(run, "train") + load_split(run, POOL)
    motions = [MotionSequence(r["frames"], default_part_slices(cfg.d_s)) for r in rows]
    try:
        books = fit_codebooks(motions, cfg.N_c, cfg.d_c, cfg.codebook_iters, cfg.seed)
    except ValueError as e:
        raise DataError(str(e)) from None
    books.save(run.path("codebooks.bin"))
    print(f"wrote {run.path('codebooks.bin')} (N_c={cfg.N_c}, d_c={cfg.d_c})")
    return EXIT_OK


def _train(run: Run, phase: str, init, epochs: int) -> int:
    cfg = run.cfg
    books = load_books(run)
    rows = load_split(run, "train")
    if phase == "pretrain":
        rows = rows + load_split(run, POOL)
    examples = records_to_examples(rows, books)
    _check_capacity(cfg, examples)
    mcfg = model_config(cfg)
    model = load_model(run, init, books) if init is not None else TinyMDLM(mcfg, books, derive_seed(cfg.seed, "init"))
    tc = TrainConfig(epochs, cfg.batch_size, cfg.lr, cfg.alpha, cfg.M, cfg.use_lat, cfg.use_phy, cfg.optimizer, seed=cfg.seed)
    log_path = run.path(f"{phase}.log")
    with open(log_path, "w") as log:
        hist = train_model(model, examples, tc, phase, cfg.variant, log=log)
    meta = {"model": config_to_meta(mcfg), "phase": phase, "config_hash": run.hash, "epochs": epochs}
    save_checkpoint(run.path(f"{phase}.ckpt"), model.params, meta)
    if hist:
        print(f"{phase}: epochs={epochs} l_tok {hist[0].l_tok:.4f} -> {hist[-1].l_tok:.4f}  l_total {hist[-1].l_total:.4f}")
    print(f"wrote {run.path(f'{phase}.ckpt')} and {log_path}")
    return EXIT_OK


def cmd_pretrain(run: Run, args) -> int:
    return _train(run, "pretrain", None, args.epochs or run.cfg.pretrain_epochs)


def cmd_finetune(run: Run, args) -> int:
    init = None
    if args.init == "pretrain":
        init = run.path("pretrain.ckpt")
    elif args.init != "none":
        init = Path(args.init)
    return _train(run, "finetune", init, args.epochs or run.cfg.epochs)


def _input_rows(run: Run, args) -> tuple[list[dict], dict]:
    if args.input:
        rows = read_jsonl(args.input)
        return rows, {"source": str(args.input), "dataset_hash": None}
    rows = load_split(run, args.split)
    return rows, {"source": args.split, "dataset_hash": load_manifest(run)["dataset_hash"]}


def cmd_generate(run: Run, args) -> int:
    cfg = run.cfg
    books = load_books(run)
    rows, origin = _input_rows(run, args)
    mcfg = model_config(cfg)
    voc = mcfg.vocab
    for r in rows:
        t = np.asarray(r.get("text_tokens", []), dtype=np.int64)
        if t.size and (t.min() < 0 or t.max() >= voc.text_vocab_size):
            raise DataError(f"{r.get('id')}: text token outside [0, {voc.text_vocab_size})")
    if args.oracle:
        if any("frames" not in r for r in rows):
            raise DataError("oracle mode needs reference frames for every input")
        model = None
        examples = records_to_examples(rows, books)
    else:
        model = load_model(run, Path(args.checkpoint) if args.checkpoint else run.path("finetune.ckpt"), books)
    sched = build_schedule(cfg.M, cfg.k, cfg.variant)
    out = []
    for i, r in enumerate(rows):
        text = np.asarray(r["text_tokens"], dtype=np.int64)
        predictor = model
        if args.oracle:
            ex = examples[i]
            if ex.tokens.shape[1] > cfg.M:
                raise ConfigError(f"M={cfg.M} is shorter than the sign span of {ex.id}")
            predictor = OraclePredictor(ex.seq.padded(cfg.M, voc.eos_id), voc)
        seq, stats = generate(predictor, text, sched, derive_seed(cfg.seed, "generate", i))
        motion = detokenize(seq.sign, books)
        out.append(json.dumps({"id": r["id"], "tokens": seq.sign.tolist(), "frames": motion.frames.tolist(), "calls": stats.calls}))
    d = run.ensure("generated")
    name = Path(args.input).stem if args.input else args.split
    p = d / f"{name}.jsonl"
    _write(p, "".join(o + "\n" for o in out))
    man = dict(origin, ids=[r["id"] for r in rows], oracle=bool(args.oracle), config_hash=run.hash, file=_sha(p))
    _write(d / f"{name}.manifest.json", json.dumps(man, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(out)} generations to {p}")
    return EXIT_OK


def cmd_evaluate(run: Run, args) -> int:
    books = load_books(run)
    refs = load_split(run, args.split)
    gp = Path(args.generated) if args.generated else run.path("generated", f"{args.split}.jsonl")
    mp = gp.with_suffix(".manifest.json")
    if not mp.exists():
        raise DataError(f"no manifest next to {gp}")
    gman = json.loads(mp.read_text())
    if gman.get("dataset_hash") != load_manifest(run)["dataset_hash"]:
        raise DataError("generated outputs do not trace back to this dataset")
    if _sha(gp) != gman.get("file"):
        raise DataError(f"{gp} does not match its manifest")
    gens = read_jsonl(gp)
    if [g["id"] for g in gens] != [r["id"] for r in refs]:
        raise DataError("generated and reference ids differ (or are out of order)")
    examples = records_to_examples(refs, books)
    gen_tokens = [np.asarray(g["tokens"], dtype=np.int64).reshape(3, -1) for g in gens]
    gen_motions = [np.asarray(g["frames"], dtype=np.float64).reshape(-1, run.cfg.d_s) for g in gens]
    report = evaluate_pairs(gen_tokens, [e.tokens for e in examples], gen_motions, [e.motion for e in examples], books.part_slices)
    vals = [report.sibleu_body, report.sibleu_hands, report.dtw_body, report.dtw_hands]
    if not all(math.isfinite(v) for v in vals):
        raise FloatingPointError("non-finite metric")
    text = report.table()
    _write(run.path(f"report_{args.split}.txt"), text + "\n" + report.line(run.hash[:16]) + "\n")
    print(text)
    return EXIT_OK


def cmd_bench(run: Run, args) -> int:
    cfg = run.cfg
    books = load_books(run)
    mcfg = model_config(cfg)
    ck = run.path("finetune.ckpt")
    mdlm = load_model(run, ck, books) if ck.exists() else TinyMDLM(mcfg, books, derive_seed(cfg.seed, "init"))
    ar = ARBaseline(mcfg, books, derive_seed(cfg.seed, "ar"))
    rows = load_split(run, "test")[: args.n] if not args.random_texts else []
    rng = np.random.default_rng(derive_seed(cfg.seed, "bench"))
    texts = [np.asarray(r["text_tokens"], dtype=np.int64) for r in rows]
    while len(texts) < args.n:
        texts.append(rng.integers(0, cfg.lexicon_size, size=cfg.max_signs))
    report = bench_latency(mdlm, ar, texts, cfg.M, cfg.k, seed=cfg.seed)
    for name, st in report.latency.items():
        print(f"{name:<11} calls/sample={st['calls']:.1f}  mean={st['mean_s'] * 1e3:.3f} ms  std={st['std_s'] * 1e3:.3f} ms  n={st['n']}")
    return EXIT_OK


def cmd_order_count(run: Run, args) -> int:
    M = args.M if args.M is not None else run.cfg.M
    k = args.k if args.k is not None else run.cfg.k
    try:
        plain = count_orders_plain(M, k)
        utc = count_orders_utc(M, k)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    ratio = Fraction(plain, utc)
    print(f"M={M} k={k}")
    print(f"plain = {plain}")
    print(f"utc   = {utc}")
    print(f"ratio = {ratio}")
    for name, v in (("plain", plain), ("utc", utc), ("ratio", ratio.numerator // ratio.denominator)):
        m, e = magnitude(v)
        print(f"{name} ~ {m:.4f}e{e}")
    return EXIT_OK


# -- argument parsing ----------------------------------------------------------


COMMANDS = {
    "gen-data": cmd_gen_data,
    "fit-codebooks": cmd_fit_codebooks,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "generate": cmd_generate,
    "evaluate": cmd_evaluate,
    "bench": cmd_bench,
    "order-count": cmd_order_count,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="signdiff",
        description="Masked-diffusion text-to-sign generation on synthetic motion data.",
        epilog="config keys (key = value; 'include other.cfg' pulls in another file):\n" + RunConfig.help_text(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    ap.add_argument("--config", help="config file (flat key = value)")
    ap.add_argument("--seed", type=int, help="override the config seed")
    ap.add_argument("--out", default="runs", help="root of run directories (default: runs)")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", help="write train/dev/test splits, the pretraining pool and a manifest")
    sub.add_parser("fit-codebooks", help="fit per-part codebooks on the train split and pool")
    p = sub.add_parser("pretrain", help="train with text and sign tokens masked")
    p.add_argument("--epochs", type=int)
    p = sub.add_parser("finetune", help="train text-conditioned sign generation")
    p.add_argument("--init", default="none", help="'none', 'pretrain' (this run's checkpoint) or a checkpoint path")
    p.add_argument("--epochs", type=int)
    p = sub.add_parser("generate", help="decode sign tokens and motion for input texts")
    p.add_argument("--split", default="test")
    p.add_argument("--input", help="jsonl of {id, text_tokens} instead of a split")
    p.add_argument("--checkpoint", help="default: this run's finetune.ckpt")
    p.add_argument("--oracle", action="store_true", help="predict ground-truth tokens (needs frames in the input)")
    p = sub.add_parser("evaluate", help="SiBLEU and DTW-JPE of generated outputs against a split")
    p.add_argument("--split", default="test")
    p.add_argument("--generated", help="default: generated/<split>.jsonl")
    p = sub.add_parser("bench", help="latency and predictor calls: parallel decoding vs. autoregressive")
    p.add_argument("--n", type=int, default=50)
    p.add_argument("--random-texts", action="store_true", help="do not read the test split")
    p = sub.add_parser("order-count", help="exact counts of unmasking orders")
    p.add_argument("M", type=int, nargs="?")
    p.add_argument("k", type=int, nargs="?")
    return ap


def _overrides(args) -> dict:
    out = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    if args.seed is not None:
        out["seed"] = args.seed
    return out


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, _overrides(args))
        return COMMANDS[args.command](Run(cfg, args.out), args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
