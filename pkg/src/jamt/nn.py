"""Transformer layers on top of :mod:`jamt.tensor`."""
from __future__ import annotations

import math
from functools import lru_cache

import numpy as np

from . import tensor as T
from .tensor import Tensor

NEG_INF = -1e9


class Module:
    """Parameter container; parameters and submodules are plain attributes."""

    training = True

    def named_parameters(self, prefix=""):
        out = []
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                out.append((name, val))
            elif isinstance(val, Module):
                out.extend(val.named_parameters(name + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.extend(item.named_parameters(f"{name}.{i}."))
        return out

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def modules(self):
        yield self
        for val in vars(self).values():
            if isinstance(val, Module):
                yield from val.modules()
            elif isinstance(val, (list, tuple)):
                for item in val:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, flag=True):
        for m in self.modules():
            m.training = flag
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self):
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state, strict=True):
        params = dict(self.named_parameters())
        if strict:
            missing = set(params) - set(state)
            unexpected = set(state) - set(params)
            if missing or unexpected:
                raise KeyError(f"state mismatch: missing={sorted(missing)} "
                               f"unexpected={sorted(unexpected)}")
        for name, arr in state.items():
            if name not in params:
                continue
            p = params[name]
            arr = np.asarray(arr)
            if arr.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.data.shape}")
            p.data = arr.astype(p.data.dtype, copy=True)

    def astype(self, dtype):
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    @property
    def dtype(self):
        return self.parameters()[0].data.dtype


def _uniform(rng, shape, bound, dtype=np.float32):
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Linear(Module):
    def __init__(self, d_in, d_out, rng, bias=True):
        bound = 1.0 / math.sqrt(d_in)
        self.weight = T.parameter(_uniform(rng, (d_in, d_out), bound))
        self.bias = T.parameter(_uniform(rng, (d_out,), bound)) if bias else None

    def __call__(self, x):
        return T.linear(x, self.weight, self.bias)


class Embedding(Module):
    def __init__(self, n, d, rng):
        self.weight = T.parameter(_uniform(rng, (n, d), math.sqrt(3.0 / d)))

    def __call__(self, ids):
        return T.embedding(self.weight, ids)


class LayerNorm(Module):
    def __init__(self, d, eps=1e-5):
        self.gain = T.parameter(np.ones(d, dtype=np.float32))
        self.bias = T.parameter(np.zeros(d, dtype=np.float32))
        self.eps = eps

    def __call__(self, x):
        return T.layer_norm(x, self.gain, self.bias, self.eps)


@lru_cache(maxsize=64)
def _sinusoid(length, d, dtype_str):
    pos = np.arange(length)[:, None]
    i = np.arange(0, d, 2)[None, :]
    angle = pos / np.power(10000.0, i / d)
    pe = np.zeros((length, d))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d // 2])
    out = pe.astype(dtype_str)
    out.flags.writeable = False
    return out


def positional_encoding(length, d, dtype=np.float32):
    return _sinusoid(length, d, np.dtype(dtype).str)


def causal_mask(length, dtype=np.float32):
    m = np.triu(np.full((length, length), NEG_INF, dtype=dtype), k=1)
    return m[None, None]


def padding_mask(lengths, max_len, dtype=np.float32):
    """Additive key mask of shape [B, 1, 1, max_len]."""
    lengths = np.asarray(lengths)
    pad = np.arange(max_len)[None, :] >= lengths[:, None]
    return np.where(pad, NEG_INF, 0.0).astype(dtype)[:, None, None, :]


class MultiHeadAttention(Module):
    def __init__(self, d, n_heads, rng):
        if d % n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        self.h = n_heads
        self.dk = d // n_heads
        self.q = Linear(d, d, rng)
        # no key bias: it shifts every score in a row equally, so softmax ignores it
        self.k = Linear(d, d, rng, bias=False)
        self.v = Linear(d, d, rng)
        self.o = Linear(d, d, rng)
        self.disabled = False  # diagnostic: zero the attention weights

    def _split(self, x):
        B, L, _ = x.shape
        return T.transpose(T.reshape(x, (B, L, self.h, self.dk)), (0, 2, 1, 3))

    def __call__(self, xq, xkv, mask=None):
        B, Lq, d = xq.shape
        q = self._split(self.q(xq))
        k = self._split(self.k(xkv))
        v = self._split(self.v(xkv))
        if mask is not None:
            mask = mask.astype(q.dtype, copy=False)
        ctx = T.attention(q, k, v, mask, 1.0 / math.sqrt(self.dk), self.disabled)
        ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (B, Lq, d))
        return self.o(ctx)


class FeedForward(Module):
    def __init__(self, d, ff, rng):
        self.w1 = Linear(d, ff, rng)
        self.w2 = Linear(ff, d, rng)

    def __call__(self, x):
        return self.w2(T.gelu(self.w1(x)))


class EncoderLayer(Module):
    def __init__(self, d, n_heads, ff, dropout, rng):
        self.ln1 = LayerNorm(d)
        self.attn = MultiHeadAttention(d, n_heads, rng)
        self.ln2 = LayerNorm(d)
        self.ff = FeedForward(d, ff, rng)
        self.p = dropout

    def __call__(self, x, mask, rng):
        h = self.ln1(x)
        x = x + T.dropout(self.attn(h, h, mask), self.p, rng, self.training)
        x = x + T.dropout(self.ff(self.ln2(x)), self.p, rng, self.training)
        return x


class DecoderLayer(Module):
    def __init__(self, d, n_heads, ff, dropout, rng, cross=True):
        self.ln1 = LayerNorm(d)
        self.self_attn = MultiHeadAttention(d, n_heads, rng)
        if cross:
            self.ln2 = LayerNorm(d)
            self.cross_attn = MultiHeadAttention(d, n_heads, rng)
        else:
            self.cross_attn = None
        self.ln3 = LayerNorm(d)
        self.ff = FeedForward(d, ff, rng)
        self.p = dropout

    def __call__(self, x, self_mask, memory, memory_mask, rng):
        h = self.ln1(x)
        x = x + T.dropout(self.self_attn(h, h, self_mask), self.p, rng, self.training)
        if self.cross_attn is not None:
            x = x + T.dropout(self.cross_attn(self.ln2(x), memory, memory_mask),
                              self.p, rng, self.training)
        x = x + T.dropout(self.ff(self.ln3(x)), self.p, rng, self.training)
        return x


class Encoder(Module):
    """Pre-norm self-attention stack over already-embedded inputs."""

    def __init__(self, d, n_heads, ff, n_layers, dropout, rng):
        self.layers = [EncoderLayer(d, n_heads, ff, dropout, rng) for _ in range(n_layers)]
        self.norm = LayerNorm(d)

    def __call__(self, x, lengths, rng=None):
        mask = padding_mask(lengths, x.shape[1], x.dtype)
        for layer in self.layers:
            x = layer(x, mask, rng)
        return self.norm(x)


class Decoder(Module):
    """Token decoder; returns the final normalised states and the logits."""

    def __init__(self, vocab, d, n_heads, ff, n_layers, dropout, rng, cross=True):
        self.d = d
        self.embed = Embedding(vocab, d, rng)
        self.layers = [DecoderLayer(d, n_heads, ff, dropout, rng, cross) for _ in range(n_layers)]
        self.norm = LayerNorm(d)
        self.out = Linear(d, vocab, rng)
        self.p = dropout

    def states(self, ids, memory=None, memory_mask=None, rng=None):
        ids = np.asarray(ids)
        L = ids.shape[1]
        dtype = self.embed.weight.data.dtype
        x = self.embed(ids) * math.sqrt(self.d) + positional_encoding(L, self.d, dtype)
        x = T.dropout(x, self.p, rng, self.training)
        mask = causal_mask(L, dtype)
        for layer in self.layers:
            x = layer(x, mask, memory, memory_mask, rng)
        return self.norm(x)

    def __call__(self, ids, memory=None, memory_mask=None, rng=None):
        h = self.states(ids, memory, memory_mask, rng)
        return h, self.out(h)


class Conv1dSubsampler(Module):
    """Two stride-2 convolutions (kernel 3, padding 1): T frames -> ceil(T/4)."""

    def __init__(self, d_in, d, rng):
        self.conv1 = Linear(3 * d_in, d, rng)
        self.conv2 = Linear(3 * d, d, rng)

    @staticmethod
    def out_lengths(lengths):
        lengths = np.asarray(lengths)
        return (lengths + 1) // 2

    @staticmethod
    def _windows(x):
        B, L, C = x.shape
        zeros = np.zeros((B, 1, C), dtype=x.dtype)
        xp = T.concat([zeros, x, zeros], axis=1)
        n = (L + 1) // 2
        taps = [T.getitem(xp, (slice(None), slice(j, j + 2 * n - 1, 2), slice(None)))
                for j in range(3)]
        return T.concat(taps, axis=-1)

    def __call__(self, x, lengths):
        l1 = self.out_lengths(lengths)
        h = T.gelu(self.conv1(self._windows(x)))
        valid = (np.arange(h.shape[1])[None, :] < l1[:, None]).astype(h.dtype)[..., None]
        h = h * valid
        l2 = self.out_lengths(l1)
        h = T.gelu(self.conv2(self._windows(h)))
        return h, l2
