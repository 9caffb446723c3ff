"""Toy part-wise motion tokenizer and a synthetic motion/text generator.

Each body part (b, l, r) gets its own codebook.  A 4-frame window of the
part's columns is flattened, projected to ``d_c`` dimensions by a PCA
encoder, and quantized against k-means centroids.  A linear decoder maps a
code back to a 4-frame window.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .diffusion import PARTS
from .rng import make_rng

FRAMES_PER_TOKEN = 4
MAGIC = b"MDSC"
VERSION = 1
_HEADER = struct.Struct("<4sHcxIIII")


def default_part_slices(d_s: int = 24) -> dict[str, slice]:
    if d_s % 3:
        raise ValueError("d_s must split evenly into three parts")
    w = d_s // 3
    return {"b": slice(0, w), "l": slice(w, 2 * w), "r": slice(2 * w, 3 * w)}


@dataclass
class MotionSequence:
    frames: np.ndarray  # (T, d_s)
    part_slices: dict = field(default_factory=default_part_slices)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2:
            raise ValueError("frames must be a T x d_s matrix")
        cols = np.zeros(self.frames.shape[1], dtype=int)
        for sl in self.part_slices.values():
            cols[sl] += 1
        if self.frames.shape[1] and not np.all(cols == 1):
            raise ValueError("part slices must be disjoint and cover every column")

    @property
    def T(self) -> int:
        return int(self.frames.shape[0])

    def part(self, p: str) -> np.ndarray:
        return self.frames[:, self.part_slices[p]]


# --- synthetic data -------------------------------------------------------


@dataclass(frozen=True)
class MotionConfig:
    d_s: int = 24
    lexicon_size: int = 60
    min_signs: int = 2
    max_signs: int = 8
    durations: tuple = (8, 12, 16, 20, 24)
    single_handed_frac: float = 0.35
    lexicon_seed: int = 7
    max_frames: int = 400


@dataclass(frozen=True)
class SignTemplate:
    sign_id: int
    frames: np.ndarray
    active: tuple  # which parts move


def build_lexicon(config: MotionConfig) -> list[SignTemplate]:
    """Fixed lexicon of smooth per-part trajectories, each a sum of up to three sinusoids."""
    rng = make_rng(config.lexicon_seed, "lexicon")
    slices = default_part_slices(config.d_s)
    out = []
    for sid in range(config.lexicon_size):
        dur = int(rng.choice(config.durations))
        tau = np.arange(dur) / dur
        frames = np.zeros((dur, config.d_s))
        active = ["b", "l", "r"]
        if rng.random() < config.single_handed_frac:
            active.remove(str(rng.choice(["l", "r"])))
        for p in active:
            scale = 0.5 if p == "b" else 1.0
            for c in range(slices[p].start, slices[p].stop):
                n_waves = int(rng.integers(1, 4))
                col = np.full(dur, scale * rng.uniform(-0.5, 0.5))
                for _ in range(n_waves):
                    amp = scale * rng.uniform(0.2, 1.0)
                    freq = rng.choice([0.5, 1.0, 1.5, 2.0])
                    phase = rng.uniform(0, 2 * np.pi)
                    col = col + amp * np.sin(2 * np.pi * freq * tau + phase)
                frames[:, c] = col
        out.append(SignTemplate(sid, frames, tuple(active)))
    return out


def gen_synthetic_pairs(n: int, rng_seed: int, config: MotionConfig = MotionConfig()):
    """``n`` (motion, text) pairs; each text is the template id sequence of its motion."""
    if n < 1:
        raise ValueError("n must be at least 1")
    lexicon = build_lexicon(config)
    rng = make_rng(rng_seed, "pairs")
    slices = default_part_slices(config.d_s)
    pairs = []
    for _ in range(n):
        while True:
            n_signs = int(rng.integers(config.min_signs, config.max_signs + 1))
            ids = [int(i) for i in rng.integers(0, len(lexicon), size=n_signs)]
            T = sum(lexicon[i].frames.shape[0] for i in ids)
            if T <= config.max_frames:
                break
        frames = np.concatenate([lexicon[i].frames for i in ids], axis=0)
        pairs.append((MotionSequence(frames, dict(slices)), ids))
    return pairs


# --- codebooks ------------------------------------------------------------


@dataclass
class Codebook:
    part: str
    codes: np.ndarray  # (N_c, d_c)
    enc_w: np.ndarray  # (d_c, win)
    enc_mean: np.ndarray  # (win,)
    dec_w: np.ndarray  # (win, d_c)
    dec_b: np.ndarray  # (win,)
    width: int
    error_history: list = field(default_factory=list)

    @property
    def N_c(self) -> int:
        return int(self.codes.shape[0])

    @property
    def d_c(self) -> int:
        return int(self.codes.shape[1])

    def encode(self, windows: np.ndarray) -> np.ndarray:
        return (np.asarray(windows, dtype=np.float64) - self.enc_mean) @ self.enc_w.T

    def decode(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z, dtype=np.float64) @ self.dec_w.T + self.dec_b

    def nearest(self, z: np.ndarray) -> np.ndarray:
        codes = self.codes.astype(np.float64)
        d = (z * z).sum(1)[:, None] - 2 * z @ codes.T + (codes * codes).sum(1)[None, :]
        return np.argmin(d, axis=1)

    def to_bytes(self) -> bytes:
        win = self.enc_mean.shape[0]
        head = _HEADER.pack(MAGIC, VERSION, self.part.encode(), self.N_c, self.d_c, FRAMES_PER_TOKEN, self.width)
        assert win == FRAMES_PER_TOKEN * self.width
        body = b"".join(
            np.ascontiguousarray(a, dtype="<f4").tobytes()
            for a in (self.codes, self.enc_w, self.enc_mean, self.dec_w, self.dec_b)
        )
        return head + body

    @classmethod
    def from_bytes(cls, buf: bytes, offset: int = 0) -> tuple["Codebook", int]:
        magic, version, part, n_c, d_c, frames, width = _HEADER.unpack_from(buf, offset)
        if magic != MAGIC:
            raise ValueError("not a codebook record")
        if version != VERSION or frames != FRAMES_PER_TOKEN:
            raise ValueError(f"unsupported codebook version {version}")
        win = frames * width
        pos = offset + _HEADER.size
        arrays = []
        for shape in ((n_c, d_c), (d_c, win), (win,), (win, d_c), (win,)):
            count = int(np.prod(shape))
            arrays.append(np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(shape).copy())
            pos += 4 * count
        return cls(part.decode(), *arrays, width=width), pos


@dataclass
class Codebooks:
    books: dict  # part -> Codebook
    part_slices: dict

    def __getitem__(self, p: str) -> Codebook:
        return self.books[p]

    @property
    def N_c(self) -> int:
        return self.books["b"].N_c

    @property
    def d_c(self) -> int:
        return self.books["b"].d_c

    def save(self, path):
        with open(path, "wb") as fh:
            for p in PARTS:
                fh.write(self.books[p].to_bytes())

    @classmethod
    def load(cls, path, d_s: int | None = None) -> "Codebooks":
        with open(path, "rb") as fh:
            buf = fh.read()
        books, pos = {}, 0
        while pos < len(buf):
            cb, pos = Codebook.from_bytes(buf, pos)
            books[cb.part] = cb
        if set(books) != set(PARTS):
            raise ValueError("codebook file must hold exactly the parts b, l, r")
        d_s = d_s or sum(books[p].width for p in PARTS)
        return cls(books, default_part_slices(d_s))


def part_windows(motion: MotionSequence, p: str) -> np.ndarray:
    x = motion.part(p)
    if x.shape[0] % FRAMES_PER_TOKEN:
        raise ValueError(f"motion length {x.shape[0]} is not divisible by {FRAMES_PER_TOKEN}")
    return x.reshape(x.shape[0] // FRAMES_PER_TOKEN, FRAMES_PER_TOKEN * x.shape[1])


def kmeans(x: np.ndarray, k: int, iters: int, rng: np.random.Generator):
    """Lloyd's algorithm with k-means++ seeding. Returns (centroids, labels, error history)."""
    n = x.shape[0]
    centroids = np.empty((k, x.shape[1]))
    centroids[0] = x[rng.integers(n)]
    d2 = ((x - centroids[0]) ** 2).sum(1)
    for j in range(1, k):
        total = d2.sum()
        idx = rng.choice(n, p=d2 / total) if total > 0 else rng.integers(n)
        centroids[j] = x[idx]
        d2 = np.minimum(d2, ((x - centroids[j]) ** 2).sum(1))
    history = []
    labels = np.zeros(n, dtype=np.int64)
    for _ in range(max(1, iters)):
        dist = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(-1)
        labels = dist.argmin(1)
        err = dist[np.arange(n), labels].mean()
        history.append(float(err))
        new = centroids.copy()
        counts = np.bincount(labels, minlength=k)
        for j in range(k):
            if counts[j]:
                new[j] = x[labels == j].mean(0)
        empty = np.nonzero(counts == 0)[0]
        if empty.size:
            # re-seed empty clusters at the points currently worst served
            far = np.argsort(-dist[np.arange(n), labels])
            new[empty] = x[far[: empty.size]]
        if np.allclose(new, centroids, rtol=0, atol=1e-12):
            centroids = new
            break
        centroids = new
    dist = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(-1)
    labels = dist.argmin(1)
    history.append(float(dist[np.arange(n), labels].mean()))
    # final centroids are exact member means so encode(decode(code)) recovers the code
    for j in range(k):
        if np.any(labels == j):
            centroids[j] = x[labels == j].mean(0)
    return centroids, labels, history


def fit_codebook(windows: np.ndarray, p: str, width: int, N_c: int, d_c: int, iters: int, rng) -> Codebook:
    distinct = np.unique(np.round(windows, 12), axis=0).shape[0]
    if N_c > distinct:
        raise ValueError(f"part {p}: N_c={N_c} exceeds {distinct} distinct windows")
    mean = windows.mean(0)
    centered = windows - mean
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    enc = np.zeros((d_c, windows.shape[1]))
    r = min(d_c, vt.shape[0])
    enc[:r] = vt[:r]
    z = centered @ enc.T
    codes, labels, history = kmeans(z, N_c, iters, rng)
    targets = np.stack([windows[labels == j].mean(0) if np.any(labels == j) else mean + codes[j] @ enc for j in range(N_c)])
    design = np.hstack([codes, np.ones((N_c, 1))])
    sol, *_ = np.linalg.lstsq(design, targets, rcond=None)
    f32 = lambda a: np.ascontiguousarray(a, dtype=np.float32)
    return Codebook(p, f32(codes), f32(enc), f32(mean), f32(sol[:-1].T), f32(sol[-1]), width, history)


def fit_codebooks(dataset, N_c: int = 64, d_c: int = 16, iters: int = 50, rng_seed: int = 0) -> Codebooks:
    """Fit one codebook per part over all 4-frame windows in ``dataset`` (a list of MotionSequence)."""
    if not dataset:
        raise ValueError("dataset is empty")
    slices = dataset[0].part_slices
    books = {}
    for p in PARTS:
        windows = np.concatenate([part_windows(m, p) for m in dataset], axis=0)
        width = slices[p].stop - slices[p].start
        books[p] = fit_codebook(windows, p, width, N_c, d_c, iters, make_rng(rng_seed, "codebook", p))
    return Codebooks(books, dict(slices))


def quantization_error(dataset, books: Codebooks) -> float:
    """Mean squared window error after encode -> nearest code -> decode."""
    errs = []
    for m in dataset:
        for p in PARTS:
            w = part_windows(m, p)
            cb = books[p]
            rec = cb.decode(cb.codes[cb.nearest(cb.encode(w))].astype(np.float64))
            errs.append(((rec - w) ** 2).mean(1))
    return float(np.concatenate(errs).mean())


def tokenize(motion: MotionSequence, books: Codebooks) -> np.ndarray:
    """(3, T/4) token ids, one row per part."""
    rows = []
    for p in PARTS:
        cb = books[p]
        rows.append(cb.nearest(cb.encode(part_windows(motion, p))))
    return np.array(rows, dtype=np.int64).reshape(3, -1)


def detokenize(tokens, books: Codebooks) -> MotionSequence:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.size == 0:
        tokens = tokens.reshape(3, 0)
    if tokens.ndim != 2 or tokens.shape[0] != 3:
        raise ValueError("expected three equal-length token streams")
    L = tokens.shape[1]
    d_s = max(sl.stop for sl in books.part_slices.values())
    frames = np.zeros((FRAMES_PER_TOKEN * L, d_s))
    for row, p in zip(tokens, PARTS):
        cb = books[p]
        if np.any(row < 0) or np.any(row >= cb.N_c):
            raise ValueError(f"part {p}: token id out of range [0, {cb.N_c})")
        win = cb.decode(cb.codes[row].astype(np.float64))
        frames[:, books.part_slices[p]] = win.reshape(FRAMES_PER_TOKEN * L, cb.width)
    return MotionSequence(frames, dict(books.part_slices))


def decoded_windows(tokens, books: Codebooks) -> dict[str, np.ndarray]:
    """Per-part (L, 4 * width) decoded windows; used as physical-space targets."""
    tokens = np.asarray(tokens, dtype=np.int64).reshape(3, -1)
    return {p: books[p].decode(books[p].codes[row].astype(np.float64)) for row, p in zip(tokens, PARTS)}
