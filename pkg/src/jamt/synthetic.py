"""Seeded synthetic speech-translation data.

Each source word (and each end-of-sentence mark) owns a fixed random feature
prototype; an utterance is the concatenation of its tokens' prototype blocks
plus optional Gaussian noise.  Translation maps words through a fixed
bijection and reverses the word order of questions, so the end mark carries
information the MT needs.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .text import strip_punctuation

SPLITS = ("test", "st", "asr", "mt", "text", "dev")
SPEECH_SPLITS = frozenset({"test", "st", "asr", "dev"})
MARKS = (".", "?")

_SRC_LETTERS = "abcdefghijklmnopqrstuvwxyz"
_TGT_LETTERS = "abcdefghiklmnoprstuwzäöüß"


@dataclass
class SyntheticSpec:
    src_vocab: int = 40
    tgt_vocab: int = 40
    frames_per_token: int = 4
    feature_dim: int = 16
    noise: float = 0.0
    punct_rule: bool = True
    seed: int = 0
    min_len: int = 2
    max_len: int = 6
    duration_jitter: int = 0
    src_words: list = field(init=False, repr=False)
    tgt_words: list = field(init=False, repr=False)
    bijection: np.ndarray = field(init=False, repr=False)
    prototypes: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.src_vocab != self.tgt_vocab:
            raise ValueError("the word bijection needs src_vocab == tgt_vocab")
        if self.src_vocab < 2 or self.noise < 0 or self.frames_per_token < 1:
            raise ValueError("invalid synthetic spec")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError("need 1 <= min_len <= max_len")
        rng = np.random.default_rng([self.seed, 1])
        self.src_words = _distinct_words(rng, self.src_vocab, _SRC_LETTERS)
        self.tgt_words = _distinct_words(rng, self.tgt_vocab, _TGT_LETTERS)
        self.bijection = rng.permutation(self.tgt_vocab)
        # rows: source words, then "." and "?"
        self.prototypes = rng.normal(size=(self.src_vocab + len(MARKS), self.feature_dim))

    @property
    def src_index(self):
        return {w: i for i, w in enumerate(self.src_words)}

    def n_sentences(self):
        V = self.src_vocab
        return sum(V ** L for L in range(self.min_len, self.max_len + 1))


def _distinct_words(rng, n, letters):
    out, seen = [], set()
    while len(out) < n:
        k = int(rng.integers(3, 6))
        w = "".join(letters[i] for i in rng.integers(0, len(letters), size=k))
        if w not in seen:
            seen.add(w)
            out.append(w)
    return out


@dataclass
class Triplet:
    id: str
    features: np.ndarray | None
    src: str
    tgt: str
    corrupted: bool = False

    @property
    def src_norm(self):
        return strip_punctuation(self.src)


def translate(spec: SyntheticSpec, src: str) -> str:
    """The task's ground-truth translation of a punctuated source sentence."""
    words = src.split()
    mark = words[-1] if words and words[-1] in MARKS else None
    body = words[:-1] if mark else words
    idx = spec.src_index
    out = [spec.tgt_words[spec.bijection[idx[w]]] for w in body]
    if spec.punct_rule and mark == "?":
        out.reverse()
    return " ".join(out + ([mark] if mark else []))


def translate_normalized(spec: SyntheticSpec, src_norm: str) -> str:
    """Best fixed guess without the end mark: keep the order, end with '.'."""
    return translate(spec, src_norm + " .")


def render_features(spec: SyntheticSpec, tokens, rng=None):
    rows = []
    idx = spec.src_index
    for tok in tokens:
        k = idx[tok] if tok in idx else spec.src_vocab + MARKS.index(tok)
        n = spec.frames_per_token
        if spec.duration_jitter and rng is not None:
            n += int(rng.integers(0, spec.duration_jitter + 1))
        rows.append(np.repeat(spec.prototypes[k][None], n, axis=0))
    feats = np.concatenate(rows, axis=0)
    if spec.noise > 0 and rng is not None:
        feats = feats + spec.noise * rng.normal(size=feats.shape)
    return feats.astype(np.float32)


def generate_triplet(spec: SyntheticSpec, length: int, index=0, with_features=True, uid=None):
    if length < 1:
        raise ValueError("sentence length must be >= 1")
    if length > spec.max_len:
        raise ValueError(f"length {length} exceeds configured max {spec.max_len}")
    key = index if isinstance(index, (tuple, list)) else (index,)
    rng = np.random.default_rng([spec.seed, 2, *key])
    words = [spec.src_words[i] for i in rng.integers(0, spec.src_vocab, size=length)]
    mark = MARKS[int(rng.integers(0, 2))]
    src = " ".join(words + [mark])
    feats = None
    if with_features:
        feats = render_features(spec, words + [mark], np.random.default_rng([spec.seed, 3, *key]))
    return Triplet(uid or f"utt{key}", feats, src, translate(spec, src))


def generate_corpora(spec: SyntheticSpec, sizes: dict, corrupt_rate=0.0):
    """Disjoint splits keyed by name (test, st, asr, mt, text, dev).

    Splits are filled in the fixed order of ``SPLITS`` so that e.g. the test
    set does not depend on how large the training splits are.  A fraction
    ``corrupt_rate`` of the ``st`` transcripts is replaced by the next
    utterance's transcript; translations stay aligned with the audio.
    """
    for name, n in sizes.items():
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}")
        if n < 1:
            raise ValueError(f"split {name!r} must be non-empty")
    if sum(sizes.values()) > spec.n_sentences() // 2:
        raise ValueError("vocabulary too small for the requested number of distinct sentences")
    used = set()
    out = {}
    for code, name in enumerate(SPLITS):
        if name not in sizes:
            continue
        items = []
        j = 0
        while len(items) < sizes[name]:
            if j > 50 * sizes[name] + 1000:
                raise ValueError("could not draw enough distinct sentences")
            rng = np.random.default_rng([spec.seed, 4, code, j])
            L = int(rng.integers(spec.min_len, spec.max_len + 1))
            tr = generate_triplet(spec, L, (code, j), name in SPEECH_SPLITS,
                                  uid=f"{name}-{len(items):06d}")
            j += 1
            key = tr.src_norm
            if key in used:
                continue
            used.add(key)
            items.append(tr)
        out[name] = items
    if corrupt_rate > 0 and "st" in out:
        corrupt_transcripts(out["st"], corrupt_rate, spec.seed)
    return out


def corrupt_transcripts(items, rate, seed=0):
    """Shift the transcripts of ``round(rate * n)`` seeded-chosen items by one."""
    n = len(items)
    k = int(round(rate * n))
    chosen = np.random.default_rng([seed, 5]).permutation(n)[:k]
    originals = [t.src for t in items]
    for i in sorted(chosen):
        items[i].src = originals[(i + 1) % n]
        items[i].corrupted = True
    return sorted(int(i) for i in chosen)


# ------------------------------------------------------------------ disk I/O

def write_features(path, feats):
    feats = np.ascontiguousarray(feats, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", *feats.shape))
        fh.write(feats.tobytes())


def read_features(path):
    raw = Path(path).read_bytes()
    rows, cols = struct.unpack("<II", raw[:8])
    data = np.frombuffer(raw, dtype="<f4", offset=8)
    if data.size != rows * cols:
        raise ValueError(f"{path}: payload holds {data.size} floats, header says {rows}x{cols}")
    return data.reshape(rows, cols).astype(np.float32)


def write_corpus(directory, items):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / "ids.txt").write_text("".join(t.id + "\n" for t in items), encoding="utf-8")
    (d / "src.txt").write_text("".join(t.src + "\n" for t in items), encoding="utf-8")
    (d / "tgt.txt").write_text("".join(t.tgt + "\n" for t in items), encoding="utf-8")
    if items and items[0].features is not None:
        (d / "feats").mkdir(exist_ok=True)
        for t in items:
            write_features(d / "feats" / f"{t.id}.f32", t.features)


def read_corpus(directory):
    d = Path(directory)
    ids = (d / "ids.txt").read_text(encoding="utf-8").splitlines()
    src = (d / "src.txt").read_text(encoding="utf-8").splitlines()
    tgt_path = d / "tgt.txt"
    tgt = tgt_path.read_text(encoding="utf-8").splitlines() if tgt_path.exists() else [""] * len(ids)
    if not len(ids) == len(src) == len(tgt):
        raise ValueError(f"{d}: ids/src/tgt are not line-aligned")
    feat_dir = d / "feats"
    items = []
    for i, s, t in zip(ids, src, tgt):
        f = read_features(feat_dir / f"{i}.f32") if feat_dir.exists() else None
        items.append(Triplet(i, f, s, t))
    return items
