"""ASR, MT and LM transformers and the joint ASR->MT model.

The ASR decoder's final normalised state at each output position is the
*context vector* of the token predicted there.  The MT encoder accepts either
token ids (embedded) or a sequence of such vectors (positional encoding only).
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor as T
from .nn import Conv1dSubsampler, Decoder, Embedding, Encoder, Module, positional_encoding
from .tensor import Tensor, no_grad
from .text import BOS, EOS, PAD


@dataclass
class TransformerConfig:
    d_model: int = 64
    n_heads: int = 4
    ff_dim: int = 256
    enc_layers: int = 2
    dec_layers: int = 2
    src_vocab: int = 0
    tgt_vocab: int = 0
    feature_dim: int = 16
    dropout: float = 0.0
    max_len: int = 32

    def __post_init__(self):
        for f in ("d_model", "n_heads", "ff_dim", "enc_layers", "dec_layers", "max_len"):
            if getattr(self, f) < 1:
                raise ValueError(f"{f} must be >= 1")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


# Full-size settings from the reference systems; kept for documentation and
# for anyone with the hardware to use them.
PAPER_ASR = dict(d_model=1024, n_heads=16, ff_dim=4096, enc_layers=12, dec_layers=6,
                 feature_dim=83, max_len=512)
PAPER_MT = dict(d_model=1024, n_heads=16, ff_dim=4096, enc_layers=6, dec_layers=6, max_len=512)
PAPER_LM = dict(d_model=1024, n_heads=8, ff_dim=4096, enc_layers=1, dec_layers=6, max_len=512)


def _check_vocab(n, what):
    if n < 4:
        raise ValueError(f"{what} vocabulary must hold at least the 4 special tokens")


class AsrModel(Module):
    def __init__(self, cfg: TransformerConfig, seed=0):
        _check_vocab(cfg.src_vocab, "source")
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.frontend = Conv1dSubsampler(cfg.feature_dim, cfg.d_model, rng)
        self.encoder = Encoder(cfg.d_model, cfg.n_heads, cfg.ff_dim, cfg.enc_layers,
                               cfg.dropout, rng)
        self.decoder = Decoder(cfg.src_vocab, cfg.d_model, cfg.n_heads, cfg.ff_dim,
                               cfg.dec_layers, cfg.dropout, rng)

    @property
    def vocab_size(self):
        return self.cfg.src_vocab

    def encode(self, feats, lengths, rng=None):
        """Batched features [B, T, F] -> (encoder states [B, T', d], T' lengths)."""
        x = feats if isinstance(feats, Tensor) else Tensor(np.asarray(feats, dtype=self.dtype))
        if x.shape[-1] != self.cfg.feature_dim:
            raise ValueError(f"expected feature dim {self.cfg.feature_dim}, got {x.shape[-1]}")
        h, lens = self.frontend(x, lengths)
        h = h + positional_encoding(h.shape[1], self.cfg.d_model, h.dtype)
        h = T.dropout(h, self.cfg.dropout, rng, self.training)
        return self.encoder(h, lens, rng), lens


class MtModel(Module):
    def __init__(self, cfg: TransformerConfig, seed=0):
        _check_vocab(cfg.src_vocab, "source")
        _check_vocab(cfg.tgt_vocab, "target")
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.embed = Embedding(cfg.src_vocab, cfg.d_model, rng)
        self.encoder = Encoder(cfg.d_model, cfg.n_heads, cfg.ff_dim, cfg.enc_layers,
                               cfg.dropout, rng)
        self.decoder = Decoder(cfg.tgt_vocab, cfg.d_model, cfg.n_heads, cfg.ff_dim,
                               cfg.dec_layers, cfg.dropout, rng)

    @property
    def vocab_size(self):
        return self.cfg.tgt_vocab

    def encode_tokens(self, ids, lengths, rng=None):
        ids = np.asarray(ids)
        d = self.cfg.d_model
        x = self.embed(ids) * math.sqrt(d) + positional_encoding(ids.shape[1], d, self.dtype)
        x = T.dropout(x, self.cfg.dropout, rng, self.training)
        return self.encoder(x, lengths, rng)

    def encode_vectors(self, vectors, lengths, rng=None):
        x = vectors if isinstance(vectors, Tensor) else Tensor(np.asarray(vectors, dtype=self.dtype))
        d = self.cfg.d_model
        if x.shape[-1] != d:
            raise ValueError(f"context vectors have width {x.shape[-1]}, MT expects {d}")
        x = x + positional_encoding(x.shape[1], d, x.dtype)
        x = T.dropout(x, self.cfg.dropout, rng, self.training)
        return self.encoder(x, lengths, rng)


class LanguageModel(Module):
    """Decoder-only transformer over one vocabulary."""

    def __init__(self, cfg: TransformerConfig, seed=0):
        _check_vocab(cfg.src_vocab, "LM")
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.decoder = Decoder(cfg.src_vocab, cfg.d_model, cfg.n_heads, cfg.ff_dim,
                               cfg.dec_layers, cfg.dropout, rng, cross=False)

    @property
    def vocab_size(self):
        return self.cfg.src_vocab


class JointModel(Module):
    """ASR and MT modules tied by the context-vector path."""

    def __init__(self, asr: AsrModel, mt: MtModel):
        if asr.cfg.d_model != mt.cfg.d_model:
            raise ValueError("ASR and MT must share d_model")
        if asr.cfg.src_vocab != mt.cfg.src_vocab:
            raise ValueError("ASR output and MT input vocabularies differ")
        self.asr = asr
        self.mt = mt

    @classmethod
    def build(cls, cfg: TransformerConfig, seed=0):
        return cls(AsrModel(cfg, seed), MtModel(cfg, seed + 1))


# ------------------------------------------------------------ inference API

def _memory(enc):
    if enc is None:
        return None
    enc = enc.data if isinstance(enc, Tensor) else np.asarray(enc)
    return Tensor(enc[None] if enc.ndim == 2 else enc)


def _check_prefixes(prefixes, max_len):
    if prefixes.ndim != 2 or prefixes.shape[1] < 1:
        raise ValueError("prefixes must be a non-empty [B, t] array")
    if prefixes.shape[1] > max_len:
        raise ValueError(f"prefix length {prefixes.shape[1]} exceeds max_len {max_len}")
    if np.any(prefixes[:, 0] != BOS):
        raise ValueError("prefixes must start with <s>")


def _teacher_forced(model, prefixes, enc):
    """Log-probs and context vectors for every position of padded prefixes.

    Inputs are always padded to ``max_len`` so that a row's result does not
    depend on how many later tokens were supplied.
    """
    max_len = model.cfg.max_len
    _check_prefixes(prefixes, max_len)
    B, t = prefixes.shape
    ids = np.full((B, max_len), PAD, dtype=np.int64)
    ids[:, :t] = prefixes
    with no_grad():
        h, logits = model.decoder(ids, _memory(enc))
        logp = T.log_softmax(logits, axis=-1)
    return logp.data, h.data


def decode_step_batch(model, prefixes, enc=None):
    """Next-token log-probs [B, V] and context vectors [B, d] for B prefixes."""
    prefixes = np.atleast_2d(np.asarray(prefixes, dtype=np.int64))
    logp, h = _teacher_forced(model, prefixes, enc)
    t = prefixes.shape[1] - 1
    return logp[:, t], h[:, t]


def decode_step(model, prefix, enc=None):
    """Next-token log-probs [V] and the context vector [d] after ``prefix``."""
    logp, ctx = decode_step_batch(model, [list(prefix)], enc)
    return logp[0], ctx[0]


def forced_decode(model, target, enc=None):
    """Teacher-force ``target`` (<s> ... </s>).

    Returns log-probs [L, V] whose row t scores target[t+1], and the L context
    vectors aligned with target[1:].
    """
    target = np.asarray(target, dtype=np.int64)
    if target.ndim != 1 or target.size < 2 or target[0] != BOS or target[-1] != EOS:
        raise ValueError("target must be <s> ... </s>")
    L = target.size - 1
    logp, h = _teacher_forced(model, target[None, :-1], enc)
    return logp[0, :L], h[0, :L]


def sequence_log_prob(logp_rows, target):
    """Sum of the target token log-probs under teacher forcing."""
    target = np.asarray(target)
    return float(np.sum(logp_rows[np.arange(len(target) - 1), target[1:]], dtype=np.float64))


def encode_features(model: AsrModel, feats):
    feats = np.asarray(feats)
    if feats.ndim != 2:
        raise ValueError("features must be a [T, F] matrix")
    if feats.shape[0] < 4:
        raise ValueError("need at least 4 frames")
    if feats.shape[1] != model.cfg.feature_dim:
        raise ValueError(f"expected feature dim {model.cfg.feature_dim}, got {feats.shape[1]}")
    with no_grad():
        h, _ = model.encode(feats[None].astype(model.dtype), [feats.shape[0]])
    return h.data[0]


def mt_encode(model: MtModel, source):
    """Encode token ids (discrete port) or context vectors (continuous port)."""
    src = np.asarray(source)
    if src.size == 0:
        raise ValueError("empty MT input")
    with no_grad():
        if src.ndim == 1 and src.dtype.kind in "iu":
            h = model.encode_tokens(src[None], [src.size])
        elif src.ndim == 2:
            h = model.encode_vectors(src[None].astype(model.dtype, copy=False), [src.shape[0]])
        else:
            raise ValueError("MT input must be token ids or a [L, d] matrix")
    return h.data[0]


def lm_log_probs(lm: LanguageModel, prefix):
    logp, _ = decode_step(lm, prefix, None)
    return logp
