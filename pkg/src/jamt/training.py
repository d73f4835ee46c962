"""Training regimes, optimiser, checkpoints and corpus pruning."""
from __future__ import annotations

import copy
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .models import AsrModel, JointModel, LanguageModel, MtModel, TransformerConfig
from .nn import padding_mask
from .tensor import Tensor, TrainingDivergence, no_grad
from .text import BOS, EOS, PAD

log = logging.getLogger(__name__)


# ------------------------------------------------------------------ schedule

def lr_at(step, d_model, warmup, scale=1.0):
    """Noam schedule: linear warm-up for ``warmup`` steps, then 1/sqrt(step) decay."""
    if step < 1:
        raise ValueError("step must be >= 1")
    return scale * d_model ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


class Adam:
    def __init__(self, params, betas=(0.9, 0.98), eps=1e-9, clip_norm=None):
        self.params = list(params)
        self.b1, self.b2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def grad_norm(self):
        return math.sqrt(sum(float(np.vdot(p.grad, p.grad)) for p in self.params
                             if p.grad is not None))

    def step(self, lr):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.t += 1
        scale = 1.0
        if self.clip_norm:
            norm = self.grad_norm()
            if not math.isfinite(norm):
                raise TrainingDivergence("gradient norm is not finite")
            if norm > self.clip_norm:
                scale = self.clip_norm / norm
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None:
                continue
            if scale != 1.0:
                g = g * scale
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * (g * g)
            p.data -= (lr / c1) * m / (np.sqrt(v / c2) + self.eps)


# -------------------------------------------------------------------- batches

@dataclass
class TrainBatch:
    """Padded arrays for one update.

    ``src_out`` (source ids + </s>) is both the ASR target and the MT discrete
    input; ``src_lens`` counts its unpadded positions, which is also the
    number of context vectors per sentence.
    """

    kind: str
    src_in: np.ndarray
    src_out: np.ndarray
    src_mask: np.ndarray
    src_lens: np.ndarray
    feats: np.ndarray | None = None
    feat_lens: np.ndarray | None = None
    tgt_in: np.ndarray | None = None
    tgt_out: np.ndarray | None = None
    tgt_mask: np.ndarray | None = None

    KINDS = ("asr-pair", "mt-pair", "st-triplet", "text-only-pair")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown batch kind {self.kind!r}")
        if self.kind in ("asr-pair", "st-triplet") and self.feats is None:
            raise ValueError(f"{self.kind} batch needs features")
        if self.kind != "asr-pair" and self.tgt_out is None:
            raise ValueError(f"{self.kind} batch needs target tokens")
        if not np.array_equal(self.src_mask.sum(axis=1), self.src_lens):
            raise ValueError("source mask disagrees with lengths")

    def __len__(self):
        return self.src_in.shape[0]


def _pad_tokens(seqs):
    L = max(len(s) for s in seqs) + 1
    B = len(seqs)
    tin = np.full((B, L), PAD, dtype=np.int64)
    tout = np.full((B, L), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        tin[i, 0] = BOS
        tin[i, 1:len(s) + 1] = s
        tout[i, :len(s)] = s
        tout[i, len(s)] = EOS
    lens = np.array([len(s) + 1 for s in seqs])
    mask = np.arange(L)[None, :] < lens[:, None]
    return tin, tout, mask, lens


def make_batch(kind, src, tgt=None, feats=None):
    src_in, src_out, src_mask, src_lens = _pad_tokens(src)
    b = dict(kind=kind, src_in=src_in, src_out=src_out, src_mask=src_mask, src_lens=src_lens)
    if feats is not None:
        lens = np.array([f.shape[0] for f in feats])
        arr = np.zeros((len(feats), lens.max(), feats[0].shape[1]), dtype=np.float32)
        for i, f in enumerate(feats):
            arr[i, :len(f)] = f
        b.update(feats=arr, feat_lens=lens)
    if tgt is not None:
        tin, tout, tmask, _ = _pad_tokens(tgt)
        b.update(tgt_in=tin, tgt_out=tout, tgt_mask=tmask)
    return TrainBatch(**b)


@dataclass
class EncodedCorpus:
    """Token-id view of a corpus split for one source/target tokenizer pair."""

    ids: list
    src: list
    tgt: list | None = None
    feats: list | None = None

    def __len__(self):
        return len(self.src)

    def batch(self, kind, idx):
        return make_batch(kind, [self.src[i] for i in idx],
                          [self.tgt[i] for i in idx] if self.tgt is not None else None,
                          [self.feats[i] for i in idx] if self.feats is not None else None)

    def subset(self, idx):
        pick = lambda xs: None if xs is None else [xs[i] for i in idx]  # noqa: E731
        return EncodedCorpus(pick(self.ids), pick(self.src), pick(self.tgt), pick(self.feats))


def encode_corpus(items, src_bpe, tgt_bpe=None, variant="punc", with_features=True):
    from .text import SOURCE_NORM, SOURCE_PUNC, TARGET, normalize_text

    src_rules = SOURCE_NORM if variant == "norm" else SOURCE_PUNC
    src = [src_bpe.encode(normalize_text(t.src, src_rules)) for t in items]
    tgt = None
    if tgt_bpe is not None:
        tgt = [tgt_bpe.encode(normalize_text(t.tgt, TARGET)) for t in items]
    feats = None
    if with_features and items and items[0].features is not None:
        feats = [t.features for t in items]
    return EncodedCorpus([t.id for t in items], src, tgt, feats)


class BatchSampler:
    """Seeded shuffled minibatches, reshuffled every epoch."""

    def __init__(self, n, batch_size, seed):
        if n < 1:
            raise ValueError("cannot sample from an empty corpus")
        self.n = n
        self.batch_size = min(batch_size, n)
        self.rng = np.random.default_rng(seed)
        self._order = np.empty(0, dtype=np.int64)

    def next(self):
        if self._order.size < self.batch_size:
            self._order = np.concatenate([self._order, self.rng.permutation(self.n)])
        idx, self._order = self._order[:self.batch_size], self._order[self.batch_size:]
        return np.sort(idx)


# --------------------------------------------------------------------- losses

def asr_forward(asr: AsrModel, b: TrainBatch, rng=None):
    H, hl = asr.encode(b.feats, b.feat_lens, rng)
    return asr.decoder(b.src_in, H, padding_mask(hl, H.shape[1], H.dtype), rng)


def asr_loss(asr, b, smoothing=0.1, rng=None):
    _, logits = asr_forward(asr, b, rng)
    return T.cross_entropy(logits, b.src_out, smoothing, b.src_mask)


def _mt_decode_loss(mt, memory, b, smoothing, rng):
    mask = padding_mask(b.src_lens, memory.shape[1], memory.dtype)
    _, logits = mt.decoder(b.tgt_in, memory, mask, rng)
    return T.cross_entropy(logits, b.tgt_out, smoothing, b.tgt_mask)


def mt_loss(mt: MtModel, b, smoothing=0.1, rng=None):
    return _mt_decode_loss(mt, mt.encode_tokens(b.src_out, b.src_lens, rng), b, smoothing, rng)


def lm_loss(lm: LanguageModel, b, smoothing=0.1, rng=None):
    _, logits = lm.decoder(b.src_in, None, None, rng)
    return T.cross_entropy(logits, b.src_out, smoothing, b.src_mask)


def joint_losses(joint: JointModel, b, lam=0.5, smoothing=0.1, rng=None):
    """(L_asr, L_mt, lam * L_asr + (1 - lam) * L_mt) with MT fed context vectors."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    ctx, logits = asr_forward(joint.asr, b, rng)
    l_asr = T.cross_entropy(logits, b.src_out, smoothing, b.src_mask)
    memory = joint.mt.encode_vectors(ctx, b.src_lens, rng)
    l_mt = _mt_decode_loss(joint.mt, memory, b, smoothing, rng)
    return l_asr, l_mt, l_asr * lam + l_mt * (1.0 - lam)


def adaptation_loss(joint: JointModel, b, smoothing=0.1, rng=None):
    """MT loss on context vectors computed against all-zero encoder states."""
    B, L = b.src_in.shape
    zeros = Tensor(np.zeros((B, L, joint.asr.cfg.d_model), dtype=joint.asr.dtype))
    mask = padding_mask(b.src_lens, L, zeros.dtype)
    ctx, _ = joint.asr.decoder(b.src_in, zeros, mask, rng)
    memory = joint.mt.encode_vectors(ctx, b.src_lens, rng)
    return _mt_decode_loss(joint.mt, memory, b, smoothing, rng)


# -------------------------------------------------------------------- trainer

@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 32
    lr_scale: float = 1.0
    warmup: int = 400
    smoothing: float = 0.1
    lam: float = 0.5
    ratio: int = 1
    clip_norm: float = 5.0
    ckpt_interval: int = 200
    avg_best: int = 8
    patience: int = 5
    seed: int = 0


class Trainer:
    """One optimiser over a model's parameters plus the step counter."""

    def __init__(self, model, cfg: TrainConfig):
        self.model = model
        self.cfg = cfg
        self.params = model.parameters()
        self.opt = Adam(self.params, clip_norm=cfg.clip_norm)
        self.d_model = _d_model(model)
        self.step = 0
        self.rng = np.random.default_rng([cfg.seed, 11])

    def lr(self):
        return lr_at(self.step + 1, self.d_model, self.cfg.warmup, self.cfg.lr_scale)

    def update(self, loss):
        value = float(loss.data)
        if not math.isfinite(value):
            raise TrainingDivergence(f"loss became {value} at step {self.step + 1}")
        for p in self.params:
            p.grad = None
        T.backward(loss, self.params)
        self.opt.step(self.lr())
        self.step += 1
        return value


def _d_model(model):
    if isinstance(model, JointModel):
        return model.asr.cfg.d_model
    return model.cfg.d_model


def multitask_step(trainer: Trainer, joint: JointModel, b: TrainBatch, lam=None):
    if b.kind != "st-triplet":
        raise ValueError("multitask_step needs an st-triplet batch")
    lam = trainer.cfg.lam if lam is None else lam
    joint.train()
    l_asr, l_mt, total = joint_losses(joint, b, lam, trainer.cfg.smoothing, trainer.rng)
    trainer.update(total)
    return float(l_asr.data), float(l_mt.data), float(total.data)


def adaptation_step(trainer: Trainer, joint: JointModel, b: TrainBatch):
    if b.kind != "text-only-pair" or b.feats is not None:
        raise ValueError("adaptation_step needs a text-only batch without features")
    joint.train()
    return trainer.update(adaptation_loss(joint, b, trainer.cfg.smoothing, trainer.rng))


def alternate_schedule(n_steps, ratio):
    """Kinds of the first ``n_steps`` updates: one ST step, then ``ratio`` text steps."""
    if ratio < 0:
        raise ValueError("ratio must be >= 0")
    cycle = ["ST"] + ["TX"] * int(ratio)
    return [cycle[i % len(cycle)] for i in range(n_steps)]


def alternate_train(trainer, joint, st: EncodedCorpus | None, text: EncodedCorpus | None,
                    ratio=1, steps=None, on_step=None):
    """Interleave multitask updates on ``st`` with adaptation updates on ``text``."""
    st_empty = st is None or len(st) == 0
    tx_empty = text is None or len(text) == 0
    if st_empty and tx_empty:
        raise ValueError("both training streams are empty")
    steps = trainer.cfg.steps if steps is None else steps
    if st_empty:
        plan = ["TX"] * steps
    elif tx_empty or ratio == 0:
        plan = ["ST"] * steps
    else:
        plan = alternate_schedule(steps, ratio)
    bs = trainer.cfg.batch_size
    st_sampler = None if st_empty else BatchSampler(len(st), bs, [trainer.cfg.seed, 21])
    tx_sampler = None if tx_empty else BatchSampler(len(text), bs, [trainer.cfg.seed, 22])
    history = []
    for kind in plan:
        if kind == "ST":
            losses = multitask_step(trainer, joint, st.batch("st-triplet", st_sampler.next()))
            history.append(("ST", losses[2]))
        else:
            loss = adaptation_step(trainer, joint, text.batch("text-only-pair", tx_sampler.next()))
            history.append(("TX", loss))
        if on_step is not None:
            on_step(trainer.step)
    return history


# ---------------------------------------------------------------- checkpoints

@dataclass
class Snapshot:
    step: int
    score: float
    params: dict = field(repr=False)


@dataclass
class CheckpointSet:
    snapshots: list = field(default_factory=list)

    def add(self, step, score, state):
        if not math.isfinite(score):
            raise ValueError("checkpoint score must be finite")
        snap = Snapshot(step, float(score), {k: np.array(v, copy=True) for k, v in state.items()})
        if self.snapshots:
            _check_compatible([self.snapshots[0].params, snap.params])
        self.snapshots.append(snap)
        return snap

    def __len__(self):
        return len(self.snapshots)

    @property
    def scores(self):
        return [s.score for s in self.snapshots]


def _check_compatible(states):
    ref = states[0]
    for s in states[1:]:
        if list(s) != list(ref):
            raise ValueError("checkpoints hold different tensor names")
        for k in ref:
            if np.shape(s[k]) != np.shape(ref[k]):
                raise ValueError(f"shape mismatch for {k}: {np.shape(s[k])} vs {np.shape(ref[k])}")


def select_best(snaps: CheckpointSet, k):
    """The k lowest-score snapshots; ties go to the earlier step."""
    items = snaps.snapshots if isinstance(snaps, CheckpointSet) else list(snaps)
    if k < 1 or len(items) < k:
        raise ValueError(f"need at least {k} snapshots, have {len(items)}")
    return sorted(items, key=lambda s: (s.score, s.step))[:k]


def average_checkpoints(states):
    """Elementwise mean of parameter dicts (accumulated in float64)."""
    states = [s.params if isinstance(s, Snapshot) else s for s in states]
    if not states:
        raise ValueError("nothing to average")
    _check_compatible(states)
    out = {}
    for k, ref in states[0].items():
        acc = np.zeros(np.shape(ref), dtype=np.float64)
        for s in states:
            acc += s[k]
        out[k] = (acc / len(states)).astype(np.asarray(ref).dtype)
    return out


def early_stop(history, patience=5):
    """True iff the best (lowest) score is not among the last ``patience`` entries."""
    if patience < 1:
        raise ValueError("patience must be >= 1")
    if not history:
        raise ValueError("empty history")
    best = int(np.argmin(history))
    return len(history) - 1 - best >= patience


MAGIC = b"JAMT"
VERSION = 1


def save_checkpoint(path, tensors: dict):
    """Write named float32 tensors in the JAMT v1 binary layout."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HI", VERSION, len(tensors)))
        for name, arr in tensors.items():
            raw = name.encode("utf-8")
            arr = np.asarray(arr, dtype="<f4")  # ascontiguousarray would promote 0-d to 1-d
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path):
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not a JAMT checkpoint")
    version, count = struct.unpack_from("<HI", raw, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 10
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos:pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<B", raw, pos)
        pos += 1
        dims = struct.unpack_from(f"<{rank}I", raw, pos)
        pos += 4 * rank
        size = int(np.prod(dims)) if rank else 1
        out[name] = np.frombuffer(raw, dtype="<f4", count=size, offset=pos).reshape(dims).copy()
        pos += 4 * size
    if pos != len(raw):
        raise ValueError(f"{path}: {len(raw) - pos} trailing bytes")
    return out


_KINDS = {"asr": 0, "mt": 1, "lm": 2, "joint": 3}
_INT_FIELDS = ("d_model", "n_heads", "ff_dim", "enc_layers", "dec_layers",
               "src_vocab", "tgt_vocab", "feature_dim", "max_len")


def model_kind(model):
    for name, cls in (("joint", JointModel), ("asr", AsrModel), ("mt", MtModel),
                      ("lm", LanguageModel)):
        if isinstance(model, cls):
            return name
    raise TypeError(f"not a model: {type(model).__name__}")


def model_tensors(model):
    """Parameters plus ``@``-prefixed scalar entries describing the architecture."""
    cfg = model.asr.cfg if isinstance(model, JointModel) else model.cfg
    meta = {"@kind": _KINDS[model_kind(model)]}
    meta.update({f"@{k}": getattr(cfg, k) for k in _INT_FIELDS})
    meta["@dropout"] = cfg.dropout
    out = {k: np.asarray(v, dtype=np.float32) for k, v in meta.items()}
    out.update(model.state_dict())
    return out


def save_model(path, model):
    save_checkpoint(path, model_tensors(model))


def model_from_tensors(tensors):
    meta = {k[1:]: float(v) for k, v in tensors.items() if k.startswith("@")}
    if "kind" not in meta:
        raise ValueError("checkpoint carries no model description")
    kind = {v: k for k, v in _KINDS.items()}[int(meta.pop("kind"))]
    cfg = TransformerConfig(**{k: int(meta[k]) for k in _INT_FIELDS},
                            dropout=round(meta.get("dropout", 0.0), 6))
    model = {"asr": AsrModel, "mt": MtModel, "lm": LanguageModel,
             "joint": JointModel.build}[kind](cfg)
    model.load_state_dict({k: v for k, v in tensors.items() if not k.startswith("@")})
    return model


def load_model(path):
    return model_from_tensors(load_checkpoint(path))


# ---------------------------------------------------------------- evaluation

def evaluate_loss(loss_fn, corpus: EncodedCorpus, kind, batch_size=64):
    """Token-weighted mean of ``loss_fn(batch)`` over a corpus, without dropout."""
    total = weight = 0.0
    with no_grad():
        for start in range(0, len(corpus), batch_size):
            idx = np.arange(start, min(start + batch_size, len(corpus)))
            b = corpus.batch(kind, idx)
            n = float(b.tgt_mask.sum() if b.tgt_mask is not None and kind != "asr-pair"
                      else b.src_mask.sum())
            total += float(loss_fn(b).data) * n
            weight += n
    return total / weight


def fit(trainer: Trainer, step_fn, val_fn=None, steps=None, ckpts: CheckpointSet | None = None,
        average=True):
    """Run ``step_fn(trainer)`` for ``steps`` updates with periodic validation.

    Every ``ckpt_interval`` updates the validation score is recorded with a
    parameter snapshot; training stops early once the score has not improved
    for ``patience`` evaluations.  With ``average`` the model ends up holding
    the mean of the ``avg_best`` best snapshots.
    """
    cfg = trainer.cfg
    steps = cfg.steps if steps is None else steps
    ckpts = CheckpointSet() if ckpts is None else ckpts
    history = []
    for _ in range(steps):
        step_fn(trainer)
        if val_fn is not None and cfg.ckpt_interval and trainer.step % cfg.ckpt_interval == 0:
            trainer.model.eval()
            score = float(val_fn())
            trainer.model.train()
            history.append(score)
            ckpts.add(trainer.step, score, trainer.model.state_dict())
            log.info("step %d  val %.4f  lr %.2e", trainer.step, score, trainer.lr())
            if early_stop(history, cfg.patience):
                log.info("early stop at step %d", trainer.step)
                break
    if average and len(ckpts):
        best = select_best(ckpts, min(cfg.avg_best, len(ckpts)))
        trainer.model.load_state_dict(average_checkpoints(best))
    trainer.model.eval()
    return ckpts


def clone(model):
    return copy.deepcopy(model)


# -------------------------------------------------------------------- pruning

@dataclass
class PruneReport:
    kept: list
    dropped: list  # (id, wer)
    wers: list     # (id, wer), corpus order


def prune_corpus(recognize, corpus, threshold=0.5):
    """Drop utterances whose recognised text has WER strictly above ``threshold``.

    ``recognize`` maps a feature matrix to a word string; ``corpus`` is a list
    of (id, features, transcript) tuples or Triplet-like objects.
    """
    from .metrics import wer

    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must lie in [0, 1]")
    if not corpus:
        raise ValueError("empty corpus")
    kept, dropped, wers = [], [], []
    for item in corpus:
        uid, feats, ref = (item if isinstance(item, tuple) else (item.id, item.features, item.src))
        rate, _ = wer(ref.split(), recognize(feats).split())
        wers.append((uid, rate))
        if rate > threshold:
            dropped.append((uid, rate))
        else:
            kept.append(item)
    return PruneReport(kept, dropped, wers)
