"""Word error rate and corpus BLEU."""
from __future__ import annotations

import math
import os
from collections import Counter
from dataclasses import dataclass, field

if os.environ.get("JAMT_PURE_PYTHON"):
    from ._editdist_py import align_counts
    BACKEND = "python"
else:
    try:
        from ._editdist import align_counts
        BACKEND = "compiled"
    except ImportError:
        from ._editdist_py import align_counts
        BACKEND = "python"


@dataclass(frozen=True)
class EditAlignment:
    substitutions: int
    insertions: int
    deletions: int
    matches: int

    @property
    def errors(self):
        return self.substitutions + self.insertions + self.deletions


def _as_words(x):
    return x.split() if isinstance(x, str) else list(x)


def _intern(ref, hyp):
    ids = {}
    r = [ids.setdefault(w, len(ids)) for w in ref]
    h = [ids.setdefault(w, len(ids)) for w in hyp]
    return r, h


def edit_alignment(ref, hyp) -> EditAlignment:
    r, h = _intern(_as_words(ref), _as_words(hyp))
    return EditAlignment(*align_counts(r, h))


def wer(ref, hyp):
    """(edit distance / |ref|, alignment counts); strings are split on whitespace."""
    ref = _as_words(ref)
    if not ref:
        raise ValueError("empty reference")
    al = edit_alignment(ref, hyp)
    return al.errors / len(ref), al


def corpus_wer(refs, hyps):
    """Total edits over total reference words."""
    if len(refs) != len(hyps):
        raise ValueError("reference and hypothesis counts differ")
    errs = words = 0
    for r, h in zip(refs, hyps):
        r = _as_words(r)
        if not r:
            raise ValueError("empty reference")
        errs += edit_alignment(r, h).errors
        words += len(r)
    return errs / words


def per_sentence_wer_report(corpus):
    """[(id, wer)] for an iterable of (id, ref, hyp), in input order."""
    return [(uid, wer(ref, hyp)[0]) for uid, ref, hyp in corpus]


@dataclass
class BleuStats:
    matches: list = field(default_factory=lambda: [0] * 4)
    totals: list = field(default_factory=lambda: [0] * 4)
    hyp_len: int = 0
    ref_len: int = 0

    def __add__(self, other):
        return BleuStats([a + b for a, b in zip(self.matches, other.matches)],
                         [a + b for a, b in zip(self.totals, other.totals)],
                         self.hyp_len + other.hyp_len, self.ref_len + other.ref_len)

    def score(self):
        if self.hyp_len == 0 or any(m == 0 for m in self.matches):
            return 0.0
        log_p = sum(math.log(m / t) for m, t in zip(self.matches, self.totals)) / 4
        bp = 1.0 if self.hyp_len > self.ref_len else math.exp(1 - self.ref_len / self.hyp_len)
        return 100.0 * bp * math.exp(log_p)


def _ngrams(words, n):
    return Counter(tuple(words[i:i + n]) for i in range(len(words) - n + 1))


def sentence_stats(ref, hyp, max_n=4) -> BleuStats:
    r, h = _as_words(ref), _as_words(hyp)
    st = BleuStats(hyp_len=len(h), ref_len=len(r))
    for n in range(1, max_n + 1):
        hc = _ngrams(h, n)
        rc = _ngrams(r, n)
        st.matches[n - 1] = sum(min(c, rc[g]) for g, c in hc.items())
        st.totals[n - 1] = max(len(h) - n + 1, 0)
    return st


def corpus_bleu(refs, hyps):
    """Corpus BLEU in percent: 4-gram, no smoothing, whitespace tokens."""
    if len(refs) != len(hyps):
        raise ValueError("reference and hypothesis counts differ")
    if not refs:
        raise ValueError("empty corpus")
    total = BleuStats()
    for r, h in zip(refs, hyps):
        total = total + sentence_stats(r, h)
    return total.score()
