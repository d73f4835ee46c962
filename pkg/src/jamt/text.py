"""Text normalisation and byte-pair-encoding tokenizers.

Word boundaries are tracked as a flag on each symbol: the last symbol of a word
is written with a ``</w>`` suffix.  A merge is a pair of plain symbol strings
and applies whether or not the right-hand symbol closes the word, so learning
and applying merges never has to reason about the marker.
"""
from __future__ import annotations

import re
import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIALS = ("<pad>", "<s>", "</s>", "<unk>")
EOW = "</w>"
PUNCTUATION = frozenset('.,?!;:"\'()-')

DEFAULT_UMLAUTS = {"ä": "<ae>", "ö": "<oe>", "ü": "<ue>", "ß": "<ss>"}

_WS = re.compile(r"\s+")


@dataclass(frozen=True)
class NormalizationRules:
    umlaut_map: dict = field(default_factory=dict)
    ascii_only: bool = True
    lowercase: bool = False
    strip_punct: bool = False

    def __post_init__(self):
        for k, v in self.umlaut_map.items():
            if any(ord(c) > 127 for c in v):
                raise ValueError(f"placeholder for {k!r} is not ASCII: {v!r}")

    def __hash__(self):
        return hash((tuple(sorted(self.umlaut_map.items())), self.ascii_only,
                     self.lowercase, self.strip_punct))


# The three tokenizer flavours: normalised source, punctuated source, target.
SOURCE_NORM = NormalizationRules(ascii_only=True, lowercase=True, strip_punct=True)
SOURCE_PUNC = NormalizationRules(ascii_only=True)
TARGET = NormalizationRules(umlaut_map=dict(DEFAULT_UMLAUTS), ascii_only=True)
RULES = {"src-norm": SOURCE_NORM, "src-punc": SOURCE_PUNC, "tgt": TARGET}


def _collapse(s):
    return _WS.sub(" ", s).strip()


def strip_punctuation(s: str) -> str:
    """Lowercase and drop the fixed punctuation set."""
    return _collapse("".join(c for c in s if c not in PUNCTUATION).lower())


def normalize_text(s: str, rules: NormalizationRules = SOURCE_PUNC) -> str:
    s = unicodedata.normalize("NFC", s)
    if rules.umlaut_map:
        s = "".join(rules.umlaut_map.get(c, c) for c in s)
    if rules.ascii_only:
        s = s.encode("ascii", "ignore").decode("ascii")
    if rules.lowercase:
        s = s.lower()
    if rules.strip_punct:
        s = strip_punctuation(s)
    return _collapse(s)


def restore_umlauts(s: str, umlaut_map=None) -> str:
    """Invert the umlaut placeholders (detokenised output for scoring and display)."""
    for k, v in (umlaut_map or DEFAULT_UMLAUTS).items():
        s = s.replace(v, k)
    return s


def dedup_corpus(lines):
    seen = set()
    out = []
    for line in lines:
        if line not in seen:
            seen.add(line)
            out.append(line)
    return out


def drop_long_word_lines(lines, max_word_len=None):
    """Remove lines containing a word longer than ``max_word_len`` (None: keep all)."""
    if max_word_len is None:
        return list(lines)
    return [ln for ln in lines if all(len(w) <= max_word_len for w in ln.split())]


def _word_symbols(word):
    syms = [[c, False] for c in word]
    syms[-1][1] = True
    return syms


def _apply_merge(syms, a, b):
    out = []
    i = 0
    while i < len(syms):
        if i + 1 < len(syms) and syms[i][0] == a and not syms[i][1] and syms[i + 1][0] == b:
            out.append([a + b, syms[i + 1][1]])
            i += 2
        else:
            out.append(syms[i])
            i += 1
    return out


class BpeModel:
    """Ordered merges plus a dense token vocabulary (specials first)."""

    def __init__(self, merges, alphabet):
        self.merges = [tuple(m) for m in merges]
        self.alphabet = sorted(set(alphabet))
        self.ranks = {m: i for i, m in enumerate(self.merges)}
        tokens = list(SPECIALS)
        seen = set(tokens)
        for sym in self.alphabet + [a + b for a, b in self.merges]:
            for tok in (sym, sym + EOW):
                if tok not in seen:
                    seen.add(tok)
                    tokens.append(tok)
        self.tokens = tokens
        self.vocab = {t: i for i, t in enumerate(tokens)}
        self._cache = {}

    def __len__(self):
        return len(self.tokens)

    def __eq__(self, other):
        return (isinstance(other, BpeModel) and self.merges == other.merges
                and self.tokens == other.tokens)

    @property
    def specials(self):
        return dict(zip(("pad", "bos", "eos", "unk"), (PAD, BOS, EOS, UNK)))

    def segment_word(self, word):
        hit = self._cache.get(word)
        if hit is not None:
            return hit
        syms = _word_symbols(word)
        while len(syms) > 1:
            best = None
            for i in range(len(syms) - 1):
                r = self.ranks.get((syms[i][0], syms[i + 1][0]))
                if r is not None and (best is None or r < best):
                    best = r
            if best is None:
                break
            syms = _apply_merge(syms, *self.merges[best])
        toks = [s + EOW if final else s for s, final in syms]
        self._cache[word] = toks
        return toks

    def encode(self, s: str):
        ids = []
        for word in s.split():
            for tok in self.segment_word(word):
                ids.append(self.vocab.get(tok, UNK))
        return ids

    def decode(self, ids) -> str:
        parts = []
        for i in ids:
            i = int(i)
            if i in (PAD, BOS, EOS):
                continue
            tok = self.tokens[i] if 0 <= i < len(self.tokens) else SPECIALS[UNK]
            if tok.endswith(EOW):
                parts.append(tok[: -len(EOW)] + " ")
            else:
                parts.append(tok)
        return "".join(parts).strip()

    # ---- persistence: "BPE v1", merge count, merges, "VOCAB", token<TAB>id
    def save(self, path):
        lines = ["BPE v1", str(len(self.merges))]
        lines += [f"{a} {b}" for a, b in self.merges]
        lines.append("VOCAB")
        lines += [f"{t}\t{i}" for i, t in enumerate(self.tokens)]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path):
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines[0] != "BPE v1":
            raise ValueError(f"{path}: not a BPE v1 model")
        n = int(lines[1])
        merges = [tuple(ln.split(" ")) for ln in lines[2:2 + n]]
        if lines[2 + n] != "VOCAB":
            raise ValueError(f"{path}: missing VOCAB section")
        vocab = {}
        for ln in lines[3 + n:]:
            if ln:
                tok, idx = ln.rsplit("\t", 1)
                vocab[tok] = int(idx)
        alphabet = [t for t in vocab if t not in SPECIALS and not t.endswith(EOW)
                    and len(t) == 1]
        alphabet += [t[: -len(EOW)] for t in vocab if t.endswith(EOW) and len(t) == len(EOW) + 1]
        model = cls(merges, alphabet)
        if model.vocab != vocab:
            raise ValueError(f"{path}: vocabulary does not match the merge list")
        return model


def train_bpe(corpus, merges: int) -> BpeModel:
    """Learn ``merges`` merges; ties go to the lexicographically smallest pair."""
    if merges < 0:
        raise ValueError("merges must be >= 0")
    words = Counter(w for line in corpus for w in line.split())
    if not words:
        raise ValueError("empty corpus")
    alphabet = sorted({c for w in words for c in w})
    state = {w: _word_symbols(w) for w in words}
    learned = []
    for _ in range(merges):
        pairs = Counter()
        for w, syms in state.items():
            f = words[w]
            for i in range(len(syms) - 1):
                pairs[(syms[i][0], syms[i + 1][0])] += f
        if not pairs:
            break
        top = max(pairs.values())
        best = min(p for p, c in pairs.items() if c == top)
        learned.append(best)
        for w, syms in state.items():
            if len(syms) > 1:
                state[w] = _apply_merge(syms, *best)
    return BpeModel(learned, alphabet)
