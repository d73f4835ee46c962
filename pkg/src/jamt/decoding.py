"""Beam search, ensembling, shallow fusion and the coupled ASR->MT search.

A *scorer* is bound to one input and maps a batch of equal-length prefixes
``[B, t]`` to next-token scores ``[B, V]`` plus the context vectors ``[B, d]``
of the position being predicted (or None when it has none).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .models import (AsrModel, JointModel, MtModel, decode_step_batch, encode_features,
                     forced_decode, mt_encode)
from .text import BOS, EOS, PAD


@dataclass
class DecodeConfig:
    beam_size: int = 4
    length_ratio: float = 1.2
    insertion_penalty: float = 0.0
    eos_factor: float = 1.0
    lm_weight: float = 0.0
    n_best: int = 1

    def __post_init__(self):
        if self.n_best < 1 or self.beam_size < self.n_best:
            raise ValueError("need beam_size >= n_best >= 1")
        if self.length_ratio <= 0:
            raise ValueError("length_ratio must be positive")

    def max_length(self, input_len):
        return int(math.ceil(self.length_ratio * input_len - 1e-9))


@dataclass
class BeamHypothesis:
    tokens: np.ndarray          # <s> ... (</s> when finished)
    log_prob: float
    score: float                # log_prob + insertion_penalty * generated tokens
    context: np.ndarray | None = field(default=None, repr=False)  # [len(tokens) - 1, d]
    finished: bool = True

    @property
    def body(self):
        """Generated tokens without <s> and </s>."""
        end = len(self.tokens) - 1 if self.finished else len(self.tokens)
        return [int(t) for t in self.tokens[1:end]]


# ------------------------------------------------------------------- scorers

class ModelScorer:
    """A decoder bound to fixed encoder states (None for a language model)."""

    def __init__(self, model, enc=None):
        self.model = model
        self.enc = enc
        self.vocab_size = model.decoder.out.weight.shape[1]
        self.max_len = model.cfg.max_len

    def __call__(self, prefixes):
        logp, ctx = decode_step_batch(self.model, prefixes, self.enc)
        return logp.astype(np.float64), ctx


def fuse_lm(model_log_probs, lm_log_probs, lm_weight):
    """Shallow fusion: model + weight * LM, elementwise."""
    a = np.asarray(model_log_probs, dtype=np.float64)
    b = np.asarray(lm_log_probs, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"score shapes differ: {a.shape} vs {b.shape}")
    if lm_weight == 0:
        return a
    return a + lm_weight * b


def ensemble_log_probs(member_scores, weights):
    """Weighted sum of member log-softmax outputs (not renormalised).

    Computed relative to the heaviest member, ``ref + sum_i w_i (m_i - ref)``,
    which equals ``sum_i w_i m_i`` for normalised weights and makes the
    degenerate cases exact: a one-hot weight vector returns that member's
    scores bit for bit, and identical members return the shared scores.
    """
    weights = _normalise(weights)
    scores = [np.asarray(m, dtype=np.float64) for m in member_scores]
    if len(scores) != len(weights):
        raise ValueError("one weight per member required")
    if any(s.shape != scores[0].shape for s in scores):
        raise ValueError("ensemble members disagree on vocabulary size")
    ref = int(np.argmax(weights))
    out = scores[ref].copy()
    for i, (s, w) in enumerate(zip(scores, weights)):
        if i != ref and w != 0:
            out += w * (s - scores[ref])
    return out


def _normalise(weights):
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or w.size == 0 or np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("ensemble weights must be non-negative and finite")
    total = w.sum()
    if total <= 0:
        raise ValueError("ensemble weights sum to zero")
    return w / total


class EnsembleScorer:
    """Weighted log-softmax average; context vectors come from ``context_from``."""

    def __init__(self, members, weights, context_from=0):
        if not members:
            raise ValueError("empty ensemble")
        sizes = {m.vocab_size for m in members}
        if len(sizes) != 1:
            raise ValueError(f"ensemble members disagree on vocabulary size: {sorted(sizes)}")
        self.members = list(members)
        self.weights = _normalise(weights)
        if len(self.weights) != len(self.members):
            raise ValueError("one weight per member required")
        self.context_from = context_from
        self.vocab_size = members[0].vocab_size
        self.max_len = min(m.max_len for m in members)

    def __call__(self, prefixes):
        outs = [m(prefixes) for m in self.members]
        scores = ensemble_log_probs([o[0] for o in outs], self.weights)
        return scores, outs[self.context_from][1]


class FusedScorer:
    def __init__(self, base, lm, lm_weight):
        if base.vocab_size != lm.vocab_size:
            raise ValueError("LM and model vocabularies differ")
        self.base, self.lm, self.lm_weight = base, lm, lm_weight
        self.vocab_size = base.vocab_size
        self.max_len = min(base.max_len, lm.max_len)

    def __call__(self, prefixes):
        logp, ctx = self.base(prefixes)
        if self.lm_weight == 0:
            return logp, ctx
        return fuse_lm(logp, self.lm(prefixes)[0], self.lm_weight), ctx


# --------------------------------------------------------------- beam search

def eos_admissible(logp_row, eos_factor, banned=(PAD, BOS), eos=EOS):
    """EOS may end a hypothesis iff logP(eos) >= factor * max_{v != eos} logP(v).

    A factor <= 0 switches the test off.
    """
    if eos_factor <= 0:
        return True
    others = np.delete(logp_row, sorted({eos, *banned}))
    if others.size == 0:
        return True
    return bool(logp_row[eos] >= eos_factor * others.max())


def beam_search(scorer, input_len, cfg: DecodeConfig, banned=(PAD, BOS), eos=EOS, bos=BOS):
    """Length-synchronous beam search.

    At most ``ceil(length_ratio * input_len)`` tokens are generated before
    </s>.  Each step scores all live beams in one call, ranks every
    (beam, token) extension by ``log_prob + insertion_penalty * length`` and
    keeps the best ``beam_size``; extensions ending in </s> leave the beam
    and are set aside as finished.  Returns up to ``n_best`` finished
    hypotheses, best first, or the best unfinished one (``finished=False``)
    if nothing finished.
    """
    if input_len < 1:
        raise ValueError("empty input")
    max_out = cfg.max_length(input_len)
    if max_out + 1 >= scorer.max_len:
        max_out = scorer.max_len - 2
    V = scorer.vocab_size
    alpha = cfg.insertion_penalty
    banned = np.asarray(sorted(set(banned)), dtype=np.int64)

    prefixes = np.array([[bos]], dtype=np.int64)
    logps = np.zeros(1)
    contexts = [[]]
    finished = []
    last_alive = None
    for t in range(max_out + 1):
        scores, ctx = scorer(prefixes)
        scores = np.asarray(scores, dtype=np.float64)
        cand = logps[:, None] + scores
        allowed = np.ones_like(cand, dtype=bool)
        allowed[:, banned] = False
        if t == max_out:
            allowed[:, :] = False
        for b in range(len(prefixes)):
            allowed[b, eos] = eos_admissible(scores[b], cfg.eos_factor, banned, eos)
        rank = np.where(allowed, cand + alpha * (t + 1), -np.inf)
        flat = rank.ravel()
        k = min(cfg.beam_size, int(np.isfinite(flat).sum()))
        if k == 0:
            break
        # stable: equal scores keep (beam, token) order
        order = np.argsort(-flat, kind="stable")[:k]
        keep_b, keep_v, keep_lp, keep_ctx = [], [], [], []
        for j in order:
            b, v = divmod(int(j), V)
            new_ctx = contexts[b] + [ctx[b]] if ctx is not None else None
            if v == eos:
                toks = np.append(prefixes[b], eos)
                finished.append(BeamHypothesis(toks, float(cand[b, v]), float(flat[j]),
                                               _stack(new_ctx), True))
            else:
                keep_b.append(b)
                keep_v.append(v)
                keep_lp.append(cand[b, v])
                keep_ctx.append(new_ctx)
        if not keep_b:
            break
        prefixes = np.concatenate([prefixes[keep_b], np.array(keep_v)[:, None]], axis=1)
        logps = np.array(keep_lp)
        contexts = keep_ctx
        last_alive = (prefixes, logps, contexts, t + 1)

    if finished:
        finished.sort(key=lambda h: -h.score)  # stable: ties keep discovery order
        return finished[:cfg.n_best]
    if last_alive is None:
        raise RuntimeError("beam search produced no hypothesis")
    prefixes, logps, contexts, n = last_alive
    best = int(np.argmax(logps))
    return [BeamHypothesis(prefixes[best], float(logps[best]), float(logps[best] + alpha * n),
                           _stack(contexts[best]), False)]


def _stack(ctx_list):
    if ctx_list is None or len(ctx_list) == 0:
        return None
    return np.stack(ctx_list)


def greedy_search(scorer, input_len, length_ratio=1.2):
    cfg = DecodeConfig(beam_size=1, length_ratio=length_ratio, eos_factor=0.0)
    return beam_search(scorer, input_len, cfg)[0]


# --------------------------------------------------------- rescoring/coupling

def forced_rescore(asr: AsrModel, tokens, enc):
    """Teacher-force a complete hypothesis through ``asr``: its log-prob and contexts."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.size > asr.cfg.max_len:
        raise ValueError(f"hypothesis of {tokens.size} tokens exceeds max_len {asr.cfg.max_len}")
    logp, ctx = forced_decode(asr, tokens, enc)
    lp = float(np.sum(logp[np.arange(len(tokens) - 1), tokens[1:]].astype(np.float64)))
    return BeamHypothesis(tokens.copy(), lp, lp, ctx, True)


@dataclass
class CoupledResult:
    z: BeamHypothesis
    y: BeamHypothesis
    total: float
    explored: list  # (z index, y tokens tuple, total) for every pair scored


def coupled_translate(asr_nbest, mt_scorer_for, cfg: DecodeConfig):
    """argmax over z in the n-best and y of score(y|z) + score(z|x).

    ``mt_scorer_for(z)`` returns ``(scorer, input_len)`` for one source
    hypothesis; every finished MT hypothesis returned for every z is a
    candidate (the full n-best x MT-beam product).  Ties keep the first pair
    in n-best order.
    """
    if not asr_nbest:
        raise ValueError("empty n-best list")
    best = None
    explored = []
    mt_cfg = DecodeConfig(cfg.beam_size, cfg.length_ratio, cfg.insertion_penalty,
                          cfg.eos_factor, cfg.lm_weight, n_best=cfg.beam_size)
    for i, z in enumerate(asr_nbest):
        scorer, n = mt_scorer_for(z)
        for y in beam_search(scorer, n, mt_cfg):
            total = z.score + y.score
            explored.append((i, tuple(int(t) for t in y.tokens), total))
            if best is None or total > best.total:
                best = CoupledResult(z, y, total, explored)
    return best


def source_tokens(z: BeamHypothesis):
    """MT discrete-port input for a source hypothesis: its tokens after <s>."""
    toks = [int(t) for t in z.tokens[1:]]
    if not z.finished:
        toks.append(EOS)
    return np.asarray(toks, dtype=np.int64)


# ----------------------------------------------------------------- cascades

ASR_SIDES = ("ext", "joint", "ext+joint")
MT_SIDES = ("ext", "joint", "joint+ext")
MODES = tuple(f"{a}-{m}" for a in ASR_SIDES for m in MT_SIDES)


@dataclass
class CascadeModels:
    ext_asr: AsrModel | None = None
    ext_mt: MtModel | None = None
    joint: JointModel | None = None
    lm: object = None


@dataclass
class CascadeOutput:
    asr_tokens: list
    mt_tokens: list
    asr_log_prob: float
    mt_log_prob: float


def parse_mode(mode):
    if mode not in MODES:
        raise ValueError(f"unknown cascade mode {mode!r}; expected one of {', '.join(MODES)}")
    asr_side, mt_side = mode.split("-", 1)
    return asr_side, mt_side


def check_models(mode, models: CascadeModels):
    asr_side, mt_side = parse_mode(mode)
    need = set()
    if "ext" in asr_side.split("+"):
        need.add("ext_asr")
    if "ext" in mt_side.split("+"):
        need.add("ext_mt")
    if "joint" in asr_side or "joint" in mt_side:
        need.add("joint")
    missing = sorted(n for n in need if getattr(models, n) is None)
    if missing:
        raise ValueError(f"mode {mode} needs models: {', '.join(missing)}")


def cascade_decode(mode, models: CascadeModels, feats, asr_cfg: DecodeConfig,
                   mt_cfg: DecodeConfig, asr_weights=(0.5, 0.5), mt_weights=(0.5, 0.5)):
    """Translate one utterance with one Table-2-style cascade configuration.

    ``asr_weights`` order the (joint, ext) ASR members of an ``ext+joint``
    ASR side and ``mt_weights`` the (joint, ext) members of ``joint+ext``.
    Joint-MT inputs are the context vectors of the source hypothesis under
    the joint ASR: its own beam contexts, or a forced pass when another
    recogniser produced the hypothesis.
    """
    asr_side, mt_side = parse_mode(mode)
    check_models(mode, models)
    feats = np.asarray(feats, dtype=np.float32)

    enc_ext = encode_features(models.ext_asr, feats) if models.ext_asr is not None and "ext" in asr_side.split("+") else None
    enc_joint = encode_features(models.joint.asr, feats) if models.joint is not None and (
        "joint" in asr_side or "joint" in mt_side) else None

    if asr_side == "ext":
        scorer = ModelScorer(models.ext_asr, enc_ext)
        n_in = enc_ext.shape[0]
    elif asr_side == "joint":
        scorer = ModelScorer(models.joint.asr, enc_joint)
        n_in = enc_joint.shape[0]
    else:
        scorer = EnsembleScorer([ModelScorer(models.joint.asr, enc_joint),
                                 ModelScorer(models.ext_asr, enc_ext)], asr_weights, context_from=0)
        n_in = enc_joint.shape[0]
    if asr_cfg.lm_weight and models.lm is not None:
        scorer = FusedScorer(scorer, ModelScorer(models.lm), asr_cfg.lm_weight)
    nbest = beam_search(scorer, n_in, asr_cfg)

    def joint_context(z):
        if asr_side == "ext" or z.context is None:
            toks = source_tokens(z)
            return forced_rescore(models.joint.asr, np.concatenate([[BOS], toks]), enc_joint).context
        return z.context

    def mt_scorer_for(z):
        src = source_tokens(z)
        members = []
        if mt_side in ("joint", "joint+ext"):
            members.append(ModelScorer(models.joint.mt, mt_encode(models.joint.mt, joint_context(z))))
        if mt_side in ("ext", "joint+ext"):
            members.append(ModelScorer(models.ext_mt, mt_encode(models.ext_mt, src)))
        if len(members) == 1:
            return members[0], len(src)
        return EnsembleScorer(members, mt_weights), len(src)

    res = coupled_translate(nbest, mt_scorer_for, mt_cfg)
    return CascadeOutput(res.z.body, res.y.body, res.z.log_prob, res.y.log_prob)


def joint_ensemble_decode(joints, feats, asr_cfg: DecodeConfig, mt_cfg: DecodeConfig, weights):
    """Decode with several joint models ensembled on both the ASR and the MT side.

    Every member's MT reads the context vectors its own ASR decoder assigns to
    the shared source hypothesis: the heaviest member's come from the beam,
    the others' from a forced pass.  One-hot weights reproduce that member's
    ``joint-joint`` decode exactly.
    """
    joints = list(joints)
    w = _normalise(weights)
    if len(w) != len(joints):
        raise ValueError("one weight per joint model required")
    ref = int(np.argmax(w))
    feats = np.asarray(feats, dtype=np.float32)
    encs = [encode_features(j.asr, feats) for j in joints]
    members = [ModelScorer(j.asr, e) for j, e in zip(joints, encs)]
    scorer = EnsembleScorer(members, w, context_from=ref)
    nbest = beam_search(scorer, encs[ref].shape[0], asr_cfg)

    def mt_scorer_for(z):
        full = np.concatenate([[BOS], source_tokens(z)])
        scorers = []
        for i, (j, e) in enumerate(zip(joints, encs)):
            ctx = z.context if i == ref and z.context is not None else forced_rescore(j.asr, full, e).context
            scorers.append(ModelScorer(j.mt, mt_encode(j.mt, ctx)))
        return EnsembleScorer(scorers, w), len(full) - 1

    res = coupled_translate(nbest, mt_scorer_for, mt_cfg)
    return CascadeOutput(res.z.body, res.y.body, res.z.log_prob, res.y.log_prob)
