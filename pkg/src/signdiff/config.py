"""Run configuration: flat ``key = value`` files with an ``include`` directive.

Example::

    include base.cfg
    seed = 3
    variant = utc
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields, replace
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    # dataset
    n: int = 240
    lexicon_size: int = 50
    d_s: int = 24
    min_signs: int = 2
    max_signs: int = 4
    pool_shards: int = 2  # extra train-sized shards used only for pretraining
    # tokenizer
    N_c: int = 64
    d_c: int = 16
    codebook_iters: int = 50
    # model
    d_model: int = 64
    n_blocks: int = 2
    max_len: int = 128
    embed_mode: str = "dense"
    mixer: str = "attn"
    positions: str = "segment"
    # schedule
    M: int = 100
    k: int = 4
    variant: str = "utc"
    # training
    epochs: int = 50
    pretrain_epochs: int = 50
    batch_size: int = 16
    lr: float = 0.003
    optimizer: str = "adam"
    alpha: float = 0.5
    use_lat: bool = True
    use_phy: bool = True

    def validate(self) -> "RunConfig":
        for f in fields(self):
            v = getattr(self, f.name)
            if f.type in ("int", "float") and f.name not in ("seed", "alpha", "pool_shards") and v <= 0:
                raise ConfigError(f"{f.name} must be positive, got {v}")
        if self.variant not in ("plain", "utc"):
            raise ConfigError(f"variant must be plain or utc, got {self.variant!r}")
        if self.pool_shards < 0:
            raise ConfigError("pool_shards must be non-negative")
        if self.alpha < 0:
            raise ConfigError("alpha must be non-negative")
        if self.min_signs > self.max_signs:
            raise ConfigError("min_signs exceeds max_signs")
        if not 1 <= self.k <= self.M:
            raise ConfigError("k must lie in [1, M]")
        if self.embed_mode not in ("dense", "avg", "top1", "top2"):
            raise ConfigError(f"unknown embed_mode {self.embed_mode!r}")
        if self.mixer not in ("mean", "attn") or self.positions not in ("absolute", "segment"):
            raise ConfigError("mixer must be mean|attn and positions absolute|segment")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        return self

    def canonical(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)!r}\n" for f in fields(self))

    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()

    def with_overrides(self, pairs: dict) -> "RunConfig":
        return replace(self, **{k: _coerce(self, k, v) for k, v in pairs.items()})

    @staticmethod
    def help_text() -> str:
        return "\n".join(f"  {f.name} = {f.default!r}" for f in fields(RunConfig))


def _coerce(cfg: RunConfig, key: str, raw):
    types = {f.name: f.type for f in fields(cfg)}
    if key not in types:
        raise ConfigError(f"unknown config key {key!r}")
    if not isinstance(raw, str):
        return raw
    t = types[key]
    try:
        if t == "bool":
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if t == "int":
            return int(raw)
        if t == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


def parse_config_file(path, _seen=None) -> dict:
    path = Path(path)
    _seen = set() if _seen is None else _seen
    if path.resolve() in _seen:
        raise ConfigError(f"include cycle at {path}")
    _seen.add(path.resolve())
    try:
        lines = path.read_text().splitlines()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    out: dict = {}
    for no, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("include "):
            out.update(parse_config_file(path.parent / line[len("include ") :].strip(), _seen))
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{no}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k] = v
    return out


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        cfg = cfg.with_overrides(parse_config_file(path))
    if overrides:
        cfg = cfg.with_overrides(overrides)
    return cfg.validate()
