"""End-to-end recipes on the synthetic task: tokenizers, training regimes, scoring."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .decoding import (CascadeModels, DecodeConfig, ModelScorer, beam_search, cascade_decode,
                       joint_ensemble_decode)
from .metrics import corpus_bleu, corpus_wer
from .models import AsrModel, JointModel, LanguageModel, MtModel, TransformerConfig, encode_features
from .synthetic import SyntheticSpec, generate_corpora
from .text import (SOURCE_NORM, SOURCE_PUNC, TARGET, BpeModel, normalize_text, restore_umlauts,
                   train_bpe)
from .training import (BatchSampler, EncodedCorpus, Trainer, TrainConfig, adaptation_step,
                       asr_loss, encode_corpus, evaluate_loss, fit, joint_losses, lm_loss,
                       make_batch, mt_loss, multitask_step)

log = logging.getLogger(__name__)


@dataclass
class Tokenizers:
    src: BpeModel
    tgt: BpeModel
    variant: str = "punc"

    @property
    def src_rules(self):
        return SOURCE_NORM if self.variant == "norm" else SOURCE_PUNC


def build_tokenizers(items, variant="punc", merges=256):
    rules = SOURCE_NORM if variant == "norm" else SOURCE_PUNC
    src = train_bpe([normalize_text(t.src, rules) for t in items], merges)
    tgt = train_bpe([normalize_text(t.tgt, TARGET) for t in items], merges)
    return Tokenizers(src, tgt, variant)


def model_config(tok: Tokenizers, spec: SyntheticSpec, **kw):
    return TransformerConfig(src_vocab=len(tok.src), tgt_vocab=len(tok.tgt),
                             feature_dim=spec.feature_dim, **kw)


@dataclass
class Task:
    """A generated synthetic task with its tokenizers and encoded splits."""

    spec: SyntheticSpec
    corpora: dict
    tok: Tokenizers
    enc: dict = field(default_factory=dict)

    def encoded(self, split):
        if split not in self.enc:
            self.enc[split] = encode_corpus(self.corpora[split], self.tok.src, self.tok.tgt,
                                            self.tok.variant)
        return self.enc[split]


def make_task(sizes, seed=0, variant="punc", merges=256, corrupt_rate=0.0, **spec_kw):
    spec = SyntheticSpec(seed=seed, **spec_kw)
    corpora = generate_corpora(spec, sizes, corrupt_rate)
    every = [t for split in corpora.values() for t in split]
    return Task(spec, corpora, build_tokenizers(every, variant, merges))


# ------------------------------------------------------------------ training

def train_asr(asr: AsrModel, data: EncodedCorpus, dev: EncodedCorpus | None, tcfg: TrainConfig):
    sampler = BatchSampler(len(data), tcfg.batch_size, [tcfg.seed, 31])
    tr = Trainer(asr, tcfg)

    def step(t):
        asr.train()
        t.update(asr_loss(asr, data.batch("asr-pair", sampler.next()), tcfg.smoothing, t.rng))

    val = None if dev is None else (lambda: evaluate_loss(lambda b: asr_loss(asr, b, 0.0), dev, "asr-pair"))
    fit(tr, step, val)
    return asr


def train_mt(mt: MtModel, data: EncodedCorpus, dev: EncodedCorpus | None, tcfg: TrainConfig):
    sampler = BatchSampler(len(data), tcfg.batch_size, [tcfg.seed, 32])
    tr = Trainer(mt, tcfg)

    def step(t):
        mt.train()
        t.update(mt_loss(mt, data.batch("mt-pair", sampler.next()), tcfg.smoothing, t.rng))

    val = None if dev is None else (lambda: evaluate_loss(lambda b: mt_loss(mt, b, 0.0), dev, "mt-pair"))
    fit(tr, step, val)
    return mt


def train_lm(lm: LanguageModel, data: EncodedCorpus, tcfg: TrainConfig):
    """Train a source-side LM on the source token sequences of ``data``."""
    sampler = BatchSampler(len(data), tcfg.batch_size, [tcfg.seed, 33])
    tr = Trainer(lm, tcfg)

    def step(t):
        lm.train()
        idx = sampler.next()
        b = make_batch("asr-pair", [data.src[i] for i in idx], feats=[np.zeros((4, 1))] * len(idx))
        t.update(lm_loss(lm, b, tcfg.smoothing, t.rng))

    fit(tr, step, None)
    return lm


def joint_val_loss(joint, dev: EncodedCorpus, lam=0.5):
    return evaluate_loss(lambda b: joint_losses(joint, b, lam, 0.0)[2], dev, "st-triplet")


def train_joint(joint: JointModel, st: EncodedCorpus, dev: EncodedCorpus | None, tcfg: TrainConfig,
                text: EncodedCorpus | None = None, ratio=0):
    """Multitask fine-tuning on ``st``; with ``text`` and ratio > 0, alternate with adaptation."""
    tr = Trainer(joint, tcfg)
    st_sampler = BatchSampler(len(st), tcfg.batch_size, [tcfg.seed, 21])
    tx_sampler = None
    if text is not None and ratio > 0:
        tx_sampler = BatchSampler(len(text), tcfg.batch_size, [tcfg.seed, 22])
    cycle = ["ST"] + ["TX"] * (ratio if tx_sampler is not None else 0)

    def step(t):
        kind = cycle[t.step % len(cycle)]
        if kind == "ST":
            multitask_step(t, joint, st.batch("st-triplet", st_sampler.next()))
        else:
            adaptation_step(t, joint, text.batch("text-only-pair", tx_sampler.next()))

    val = None if dev is None else (lambda: joint_val_loss(joint, dev, tcfg.lam))
    fit(tr, step, val)
    return joint


# ----------------------------------------------------------------- scoring

def asr_reference(tok: Tokenizers, src):
    return normalize_text(src, tok.src_rules)


def mt_reference(tgt):
    """Scoring form of a target sentence: NFC, whitespace-collapsed, umlauts kept."""
    return restore_umlauts(normalize_text(tgt, TARGET))


def recognize(asr: AsrModel, tok: Tokenizers, feats, cfg: DecodeConfig | None = None):
    cfg = cfg or DecodeConfig(beam_size=1, eos_factor=0.0)
    enc = encode_features(asr, feats)
    hyp = beam_search(ModelScorer(asr, enc), enc.shape[0], cfg)[0]
    return tok.src.decode(hyp.body)


@dataclass
class EvalResult:
    bleu: float
    wer: float
    asr_hyps: list
    translations: list
    asr_log_probs: list
    mt_log_probs: list


def evaluate_cascade(mode, models: CascadeModels, tok: Tokenizers, items,
                     asr_cfg: DecodeConfig | None = None, mt_cfg: DecodeConfig | None = None,
                     asr_weights=(0.5, 0.5), mt_weights=(0.5, 0.5)):
    def run(feats, a, m):
        return cascade_decode(mode, models, feats, a, m, asr_weights, mt_weights)
    return _evaluate(run, tok, items, asr_cfg, mt_cfg)


def evaluate_joint_ensemble(joints, weights, tok: Tokenizers, items,
                            asr_cfg: DecodeConfig | None = None, mt_cfg: DecodeConfig | None = None):
    def run(feats, a, m):
        return joint_ensemble_decode(joints, feats, a, m, weights)
    return _evaluate(run, tok, items, asr_cfg, mt_cfg)


def _evaluate(run, tok, items, asr_cfg, mt_cfg):
    asr_cfg = asr_cfg or DecodeConfig(beam_size=4)
    mt_cfg = mt_cfg or DecodeConfig(beam_size=4)
    asr_hyps, trans, alp, mlp = [], [], [], []
    for t in items:
        out = run(t.features, asr_cfg, mt_cfg)
        asr_hyps.append(tok.src.decode(out.asr_tokens))
        trans.append(restore_umlauts(tok.tgt.decode(out.mt_tokens)))
        alp.append(out.asr_log_prob)
        mlp.append(out.mt_log_prob)
    bleu = corpus_bleu([mt_reference(t.tgt) for t in items], trans)
    w = corpus_wer([asr_reference(tok, t.src) for t in items], asr_hyps)
    return EvalResult(bleu, w, asr_hyps, trans, alp, mlp)


def evaluate_joint(joint, tok, items, **kw):
    return evaluate_cascade("joint-joint", CascadeModels(joint=joint), tok, items, **kw)
