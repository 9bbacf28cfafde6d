"""Synthetic paired-modality phoneme corpora and their on-disk format.

One latent phoneme timeline drives every view of a sample: a clean
"audio-like" teacher view and three noisy "visual-like" student streams
(lips, hand shape, hand position).  Each frame of a view is the prototype of
the frame's class plus isotropic Gaussian noise; class 0 (blank) is the
silence prototype.

File format (one JSON object per line)::

    {"id": "test-00003", "vocab": "<hash>", "frames": 17,
     "x_t": [[...], ...], "x_s": [[[...]], [[...]], [[...]]],
     "frame_labels": [...], "y": [...]}

Floats are written with ``repr`` precision, so values round-trip exactly.
"""

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .ctc import BLANK, collapse
from .exceptions import ConfigError, DatasetParseError, IncompatibleVocabError

DEFAULT_SYMBOLS = ("a", "e", "i", "o", "u", "p", "t", "k", "m", "s", "l", "r",
                   "b", "d", "g", "n", "f", "v", "z", "w")

SPLIT_OFFSETS = {"teacher": 0, "train": 1, "val": 2, "test": 3}


class PhonemeVocab:
    """Ordered phoneme symbols; id 0 is reserved for blank, phoneme ``k`` has id ``k + 1``."""

    def __init__(self, symbols):
        symbols = tuple(str(s) for s in symbols)
        if len(set(symbols)) != len(symbols):
            raise ConfigError("phoneme symbols must be unique")
        if len(symbols) < 2:
            raise ConfigError("a vocabulary needs at least two phonemes")
        if "<blank>" in symbols:
            raise ConfigError("'<blank>' is reserved")
        self.symbols = symbols

    @classmethod
    def default(cls, size=10):
        if size > len(DEFAULT_SYMBOLS):
            raise ConfigError(f"default vocabulary holds at most {len(DEFAULT_SYMBOLS)} phonemes")
        return cls(DEFAULT_SYMBOLS[:size])

    @property
    def n_classes(self):
        return len(self.symbols) + 1

    def __len__(self):
        return len(self.symbols)

    def __eq__(self, other):
        return isinstance(other, PhonemeVocab) and other.symbols == self.symbols

    def __repr__(self):
        return f"PhonemeVocab({list(self.symbols)})"

    def id(self, symbol):
        return self.symbols.index(symbol) + 1

    def symbol(self, idx):
        return "<blank>" if idx == BLANK else self.symbols[idx - 1]

    def hash(self):
        return hashlib.sha256("\n".join(self.symbols).encode()).hexdigest()[:16]


@dataclass
class GenConfig:
    """Knobs of the synthetic generator.

    ``*_separation`` scales the prototype table of a view: prototypes are
    standard normal draws times the separation, so the ratio
    ``noise / separation`` sets how hard a view is.
    """

    vocab_size: int = 10
    sentence_len: tuple = (3, 8)
    frames_per_phoneme: tuple = (2, 5)
    gap_frames: tuple = (0, 2)
    teacher_dim: int = 16
    teacher_noise: float = 0.1
    teacher_separation: float = 1.0
    student_dims: tuple = (8, 8, 4)
    student_noise: float = 0.5
    student_separation: float = 0.35
    prototype_seed: int = 0
    n_teacher: int = 2000
    n_train: int = 150
    n_val: int = 19
    n_test: int = 19

    def __post_init__(self):
        for key in ("sentence_len", "frames_per_phoneme", "gap_frames"):
            lo, hi = getattr(self, key)
            setattr(self, key, (int(lo), int(hi)))
            if lo > hi or lo < 0:
                raise ConfigError(f"{key} must be a nonempty range, got {(lo, hi)}")
        if self.sentence_len[0] < 1 or self.frames_per_phoneme[0] < 1:
            raise ConfigError("sentences and phonemes need at least one frame/phoneme")
        self.student_dims = tuple(int(d) for d in self.student_dims)
        if self.teacher_noise < 0 or self.student_noise < 0:
            raise ConfigError("noise levels must be >= 0")
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must be >= 2")

    def vocab(self):
        return PhonemeVocab.default(self.vocab_size)

    def frame_bounds(self):
        (lmin, lmax), (fmin, fmax), (gmin, gmax) = (
            self.sentence_len, self.frames_per_phoneme, self.gap_frames)
        return lmin * fmin + (lmin - 1) * gmin, lmax * fmax + (lmax - 1) * gmax


@dataclass(eq=False)
class Sample:
    """One paired item; every view shares the frame axis."""

    x_t: np.ndarray
    x_s: tuple
    frame_labels: np.ndarray
    y: tuple
    id: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def n_frames(self):
        return len(self.frame_labels)

    def equals(self, other):
        return (self.id == other.id and self.y == other.y
                and np.array_equal(self.frame_labels, other.frame_labels)
                and np.array_equal(self.x_t, other.x_t)
                and len(self.x_s) == len(other.x_s)
                and all(np.array_equal(a, b) for a, b in zip(self.x_s, other.x_s)))


class Prototypes:
    """Per-class emission centres for the teacher view and each student stream."""

    def __init__(self, cfg: GenConfig):
        n = cfg.vocab_size + 1
        rng = np.random.default_rng([cfg.prototype_seed, 7919])
        self.teacher = cfg.teacher_separation * rng.standard_normal((n, cfg.teacher_dim))
        self.streams = tuple(cfg.student_separation * rng.standard_normal((n, d))
                             for d in cfg.student_dims)


def _timeline(rng, cfg):
    L = int(rng.integers(cfg.sentence_len[0], cfg.sentence_len[1] + 1))
    V = cfg.vocab_size
    phones = [int(rng.integers(1, V + 1))]
    while len(phones) < L:
        # consecutive repeats would merge under collapse without a forced gap
        nxt = int(rng.integers(1, V))
        phones.append(nxt if nxt < phones[-1] else nxt + 1)
    labels = []
    for k, ph in enumerate(phones):
        if k > 0:
            labels.extend([BLANK] * int(rng.integers(cfg.gap_frames[0], cfg.gap_frames[1] + 1)))
        labels.extend([ph] * int(rng.integers(cfg.frames_per_phoneme[0],
                                              cfg.frames_per_phoneme[1] + 1)))
    return np.asarray(labels, dtype=np.int64), tuple(phones)


def generate_sample(cfg, protos, seed, split, i):
    rng = np.random.default_rng([seed, SPLIT_OFFSETS[split], i])
    labels, y = _timeline(rng, cfg)
    F = len(labels)
    x_t = protos.teacher[labels] + cfg.teacher_noise * rng.standard_normal((F, cfg.teacher_dim))
    x_s = tuple(p[labels] + cfg.student_noise * rng.standard_normal((F, p.shape[1]))
                for p in protos.streams)
    return Sample(x_t=x_t, x_s=x_s, frame_labels=labels, y=y, id=f"{split}-{i:05d}")


def generate_dataset(cfg: GenConfig, seed, split="train", n=None):
    """Draw ``n`` samples (default: the split's configured size) for one split.

    Each sample is seeded by ``(seed, split, index)``, so splits are disjoint
    draws and any sample can be regenerated on its own.
    """
    if split not in SPLIT_OFFSETS:
        raise ConfigError(f"unknown split '{split}'")
    if cfg.vocab_size > len(DEFAULT_SYMBOLS):
        raise ConfigError(f"vocab_size {cfg.vocab_size} exceeds the prototype table "
                          f"({len(DEFAULT_SYMBOLS)} phonemes)")
    if n is None:
        n = {"teacher": cfg.n_teacher, "train": cfg.n_train,
             "val": cfg.n_val, "test": cfg.n_test}[split]
    protos = Prototypes(cfg)
    return [generate_sample(cfg, protos, seed, split, i) for i in range(n)]


def generate_splits(cfg: GenConfig, seed):
    return {split: generate_dataset(cfg, seed, split) for split in SPLIT_OFFSETS}


def split_corpus(samples, ratios=(0.8, 0.1, 0.1)):
    """Cut a corpus into non-overlapping train/val/test parts, in order."""
    n = len(samples)
    n_train = int(round(ratios[0] * n))
    n_val = int(round(ratios[1] * n))
    return samples[:n_train], samples[n_train:n_train + n_val], samples[n_train + n_val:]


def nearest_prototype_accuracy(samples, protos, view="teacher"):
    """Frame accuracy of a 1-nearest-prototype classifier on one view."""
    correct = total = 0
    for s in samples:
        if view == "teacher":
            x, table = s.x_t, protos.teacher
        else:
            x, table = np.concatenate(s.x_s, axis=1), np.concatenate(protos.streams, axis=1)
        d = ((x[:, None, :] - table[None, :, :]) ** 2).sum(axis=-1)
        correct += int((d.argmin(axis=1) == s.frame_labels).sum())
        total += s.n_frames
    return correct / total


# ------------------------------------------------------------ serialisation


def _record(sample, vocab_hash):
    return {
        "id": sample.id,
        "vocab": vocab_hash,
        "frames": sample.n_frames,
        "x_t": sample.x_t.tolist(),
        "x_s": [s.tolist() for s in sample.x_s],
        "frame_labels": [int(v) for v in sample.frame_labels],
        "y": [int(v) for v in sample.y],
    }


def save_dataset(samples, path, vocab: PhonemeVocab):
    h = vocab.hash()
    with open(path, "w") as fh:
        for s in samples:
            fh.write(json.dumps(_record(s, h), separators=(",", ":")))
            fh.write("\n")


def _parse_line(line, lineno, vocab_hash):
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DatasetParseError(lineno, f"malformed JSON ({exc.msg})") from None
    missing = {"id", "vocab", "frames", "x_t", "x_s", "frame_labels", "y"} - set(rec)
    if missing:
        raise DatasetParseError(lineno, f"missing fields {sorted(missing)}")
    if vocab_hash is not None and rec["vocab"] != vocab_hash:
        raise IncompatibleVocabError(
            f"line {lineno}: written under vocabulary {rec['vocab']}, expected {vocab_hash}")
    try:
        x_t = np.asarray(rec["x_t"], dtype=np.float64)
        x_s = tuple(np.asarray(s, dtype=np.float64) for s in rec["x_s"])
        labels = np.asarray(rec["frame_labels"], dtype=np.int64)
    except (TypeError, ValueError) as exc:
        raise DatasetParseError(lineno, f"bad array ({exc})") from None
    F = rec["frames"]
    if labels.shape != (F,) or x_t.ndim != 2 or x_t.shape[0] != F or \
            any(s.ndim != 2 or s.shape[0] != F for s in x_s):
        raise DatasetParseError(lineno, f"views disagree with frame count {F}")
    return Sample(x_t=x_t, x_s=x_s, frame_labels=labels, y=tuple(int(v) for v in rec["y"]),
                  id=rec["id"])


def load_dataset(path, vocab: PhonemeVocab = None):
    """Read a dataset file; with ``vocab`` given, every line must carry its hash."""
    h = vocab.hash() if vocab is not None else None
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.strip():
                out.append(_parse_line(line, lineno, h))
    return out


def check_sample(sample, n_classes):
    """Structural invariants: aligned views, closed label space, collapse(labels) == y."""
    F = sample.n_frames
    assert sample.x_t.shape[0] == F and all(s.shape[0] == F for s in sample.x_s)
    assert np.all((sample.frame_labels >= 0) & (sample.frame_labels < n_classes))
    assert collapse(sample.frame_labels) == tuple(sample.y)
