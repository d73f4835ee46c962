"""Command-line front end: ``jamt <subcommand> ...``.

Exit status: 0 success, 1 configuration/usage error, 2 I/O error,
3 numerical divergence during training.
"""
from __future__ import annotations

import argparse
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path


from . import experiment as X
from .config import ConfigError, RunConfig, load_config, write_manifest
from .decoding import MODES, CascadeModels, DecodeConfig, cascade_decode, check_models
from .metrics import corpus_bleu, corpus_wer
from .models import AsrModel, JointModel, LanguageModel, MtModel, TransformerConfig
from .synthetic import SyntheticSpec, generate_corpora, read_corpus, write_corpus
from .tensor import TrainingDivergence
from .text import RULES, BpeModel, dedup_corpus, drop_long_word_lines, normalize_text, restore_umlauts, train_bpe
from .training import (TrainConfig, average_checkpoints, encode_corpus, load_checkpoint,
                       load_model, model_kind, prune_corpus, save_checkpoint, save_model)

log = logging.getLogger("jamt")

EXIT_CONFIG, EXIT_IO, EXIT_DIVERGED = 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- helpers

def synthetic_spec(cfg: RunConfig):
    return SyntheticSpec(src_vocab=cfg.vocab, tgt_vocab=cfg.vocab,
                         frames_per_token=cfg.frames_per_token, feature_dim=cfg.feature_dim,
                         noise=cfg.noise, punct_rule=cfg.punct_rule, seed=cfg.seed,
                         min_len=cfg.min_words, max_len=cfg.max_words,
                         duration_jitter=cfg.duration_jitter)


def train_config(cfg: RunConfig):
    return TrainConfig(steps=cfg.steps, batch_size=cfg.batch_size, lr_scale=cfg.lr_scale,
                       warmup=cfg.warmup, smoothing=cfg.smoothing, lam=cfg.lam, ratio=cfg.ratio,
                       clip_norm=cfg.clip_norm, ckpt_interval=cfg.ckpt_interval,
                       avg_best=cfg.avg_best, patience=cfg.patience, seed=cfg.seed)


def model_config(cfg: RunConfig, src_vocab, tgt_vocab):
    return TransformerConfig(d_model=cfg.d_model, n_heads=cfg.n_heads, ff_dim=cfg.ff_dim,
                             enc_layers=cfg.enc_layers, dec_layers=cfg.dec_layers,
                             src_vocab=src_vocab, tgt_vocab=tgt_vocab,
                             feature_dim=cfg.feature_dim, dropout=cfg.dropout,
                             max_len=cfg.max_len)


def decode_configs(cfg: RunConfig):
    asr = DecodeConfig(max(cfg.beam_size, cfg.n_best), cfg.length_ratio, cfg.insertion_penalty,
                       cfg.eos_factor, cfg.lm_weight, cfg.n_best)
    mt = DecodeConfig(cfg.mt_beam_size, cfg.mt_length_ratio, cfg.mt_insertion_penalty,
                      cfg.mt_eos_factor, 0.0, 1)
    return asr, mt


def _config_from_args(args, extra=None):
    overrides = dict(kv.split("=", 1) for kv in (args.set or []) if "=" in kv)
    bad = [kv for kv in (args.set or []) if "=" not in kv]
    if bad:
        raise ConfigError(f"--set expects key=value, got {bad[0]!r}")
    overrides.update({k: v for k, v in (extra or {}).items() if v is not None})
    return load_config(args.config, overrides)


def _weights(text):
    if text is None:
        return None
    try:
        w = tuple(float(x) for x in text.split(","))
    except ValueError:
        raise ConfigError(f"weights must be comma-separated numbers, got {text!r}") from None
    if len(w) != 2:
        raise ConfigError("exactly two weights (joint,ext) are expected")
    return w


def _load(path, kind):
    model = load_model(path)
    got = model_kind(model)
    if got != kind:
        raise ConfigError(f"{path} holds a {got} model, expected {kind}")
    return model


# ------------------------------------------------------------- subcommands

def cmd_gen_data(args):
    cfg = _config_from_args(args)
    spec = synthetic_spec(cfg)
    sizes = {"test": cfg.n_test, "st": cfg.n_st, "asr": cfg.n_asr, "mt": cfg.n_mt,
             "text": cfg.n_text, "dev": cfg.n_dev}
    corpora = generate_corpora(spec, sizes, cfg.corrupt_rate)
    out = Path(args.out)
    for name, items in corpora.items():
        write_corpus(out / name, items)
    write_manifest(out / "manifest.txt", "gen-data", cfg)
    print(f"wrote {', '.join(f'{k}={len(v)}' for k, v in corpora.items())} to {out}")


def cmd_tok_train(args):
    cfg = _config_from_args(args, {"merges": args.merges})
    rules = RULES[args.kind]
    column = "tgt.txt" if args.kind == "tgt" else "src.txt"
    lines = []
    for d in args.corpus:
        p = Path(d)
        p = p / column if p.is_dir() else p
        lines += p.read_text(encoding="utf-8").splitlines()
    lines = [normalize_text(ln, rules) for ln in lines]
    lines = drop_long_word_lines(dedup_corpus(lines), cfg.max_word_len or None)
    model = train_bpe(lines, cfg.merges)
    model.save(args.output)
    write_manifest(str(args.output) + ".manifest", "tok-train", cfg, args.corpus)
    print(f"{args.kind}: {len(model.merges)} merges, {len(model)} tokens -> {args.output}")


def _tokenizers(args, cfg):
    src = BpeModel.load(args.src_bpe)
    tgt = BpeModel.load(args.tgt_bpe) if getattr(args, "tgt_bpe", None) else None
    return X.Tokenizers(src, tgt, cfg.variant)


def cmd_train(args):
    cfg = _config_from_args(args)
    tok = _tokenizers(args, cfg)
    tcfg = train_config(cfg)
    root = Path(args.data)
    split = args.split or {"asr": "asr", "mt": "mt", "lm": "mt", "joint": "st", "adapt": "st"}[args.mode]
    items = read_corpus(root / split)
    dev_dir = root / "dev"
    need_tgt = args.mode != "asr" and args.mode != "lm"
    if need_tgt and tok.tgt is None:
        raise ConfigError(f"--tgt-bpe is required for --mode {args.mode}")
    tgt_bpe = tok.tgt if tok.tgt is not None else tok.src

    def enc(its, feats=True):
        return encode_corpus(its, tok.src, tgt_bpe, cfg.variant, with_features=feats)

    data = enc(items, args.mode in ("asr", "joint", "adapt"))
    dev = enc(read_corpus(dev_dir), True) if dev_dir.exists() else None
    mcfg = model_config(cfg, len(tok.src), len(tgt_bpe))
    inputs = [root / split, args.src_bpe] + ([args.tgt_bpe] if args.tgt_bpe else [])

    if args.mode == "asr":
        model = _load(args.init, "asr") if args.init else AsrModel(mcfg, cfg.seed)
        X.train_asr(model, data, dev, tcfg)
    elif args.mode == "mt":
        model = _load(args.init, "mt") if args.init else MtModel(mcfg, cfg.seed)
        X.train_mt(model, data, dev, tcfg)
    elif args.mode == "lm":
        lm_cfg = model_config(cfg, len(tok.src), len(tok.src))
        model = LanguageModel(lm_cfg, cfg.seed)
        X.train_lm(model, data, tcfg)
    else:
        if args.init:
            model = _load(args.init, "joint")
        else:
            model = JointModel.build(mcfg, cfg.seed)
            if args.init_asr:
                model.asr.load_state_dict(_load(args.init_asr, "asr").state_dict())
                inputs.append(args.init_asr)
            if args.init_mt:
                model.mt.load_state_dict(_load(args.init_mt, "mt").state_dict())
                inputs.append(args.init_mt)
        text = None
        if args.mode == "adapt":
            text = enc(read_corpus(root / args.text_split), False)
            inputs.append(root / args.text_split)
        X.train_joint(model, data, dev, tcfg, text=text, ratio=cfg.ratio if text is not None else 0)
    save_model(args.output, model)
    write_manifest(str(args.output) + ".manifest", f"train --mode {args.mode}", cfg, inputs)
    print(f"saved {args.mode} model to {args.output}")


def cmd_avg_ckpt(args):
    states = [load_checkpoint(p) for p in args.checkpoints]
    save_checkpoint(args.output, average_checkpoints(states))
    print(f"averaged {len(states)} checkpoints -> {args.output}")


MODE_ALIASES = {"ens": "ext+joint-joint+ext"}


def cmd_decode(args):
    cfg = _config_from_args(args, {"n_best": args.nbest, "lm_weight": args.lm_weight})
    mode = MODE_ALIASES.get(args.mode, args.mode)
    tok = _tokenizers(args, cfg)
    if tok.tgt is None:
        raise ConfigError("--tgt-bpe is required for decoding")
    models = CascadeModels(
        ext_asr=_load(args.ext_asr, "asr") if args.ext_asr else None,
        ext_mt=_load(args.ext_mt, "mt") if args.ext_mt else None,
        joint=_load(args.joint, "joint") if args.joint else None,
        lm=_load(args.lm, "lm") if args.lm else None)
    check_models(mode, models)
    mt_w = _weights(args.weights) or (0.5, 0.5)
    asr_w = _weights(args.asr_weights) or mt_w
    asr_cfg, mt_cfg = decode_configs(cfg)
    items = read_corpus(args.data)

    def one(t):
        out = cascade_decode(mode, models, t.features, asr_cfg, mt_cfg, asr_w, mt_w)
        return (f"{t.id}\t{tok.src.decode(out.asr_tokens)}\t"
                f"{restore_umlauts(tok.tgt.decode(out.mt_tokens))}\t"
                f"{out.asr_log_prob:.6f}\t{out.mt_log_prob:.6f}\n")

    if args.threads > 1:
        with ThreadPoolExecutor(args.threads) as pool:
            lines = list(pool.map(one, items))
    else:
        lines = [one(t) for t in items]
    Path(args.output).write_text("".join(lines), encoding="utf-8")
    inputs = [args.data, args.src_bpe, args.tgt_bpe] + [p for p in (args.ext_asr, args.ext_mt,
                                                                    args.joint, args.lm) if p]
    write_manifest(str(args.output) + ".manifest", f"decode --mode {args.mode}", cfg, inputs)
    print(f"decoded {len(lines)} utterances -> {args.output}")


def cmd_prune(args):
    cfg = _config_from_args(args, {"prune_threshold": args.threshold})
    tok = _tokenizers(args, cfg)
    asr = _load(args.asr, "asr")
    items = read_corpus(args.data)
    asr_cfg = DecodeConfig(beam_size=1, length_ratio=cfg.length_ratio, eos_factor=0.0)
    rows = [(t.id, t.features, normalize_text(t.src, tok.src_rules)) for t in items]
    report = prune_corpus(lambda f: X.recognize(asr, tok, f, asr_cfg), rows, cfg.prune_threshold)
    kept_ids = {r[0] for r in report.kept}
    report.kept = [t for t in items if t.id in kept_ids]
    write_corpus(args.output, report.kept)
    dropped = {uid for uid, _ in report.dropped}
    lines = [f"{uid}\t{w:.4f}\t{'dropped' if uid in dropped else 'kept'}\n" for uid, w in report.wers]
    Path(args.output, "prune_report.tsv").write_text("".join(lines), encoding="utf-8")
    print(f"kept {len(report.kept)}, dropped {len(report.dropped)} (threshold {cfg.prune_threshold})")


def cmd_score(args):
    refs = Path(args.ref).read_text(encoding="utf-8").splitlines()
    hyps = Path(args.hyp).read_text(encoding="utf-8").splitlines()
    if len(refs) != len(hyps):
        raise ConfigError(f"{args.ref} has {len(refs)} lines, {args.hyp} has {len(hyps)}")
    if args.metric == "wer":
        print(f"WER {corpus_wer(refs, hyps):.4f}")
    else:
        print(f"BLEU {corpus_bleu(refs, hyps):.2f}")


# ------------------------------------------------------------------ parser

def build_parser():
    p = _Parser(prog="jamt", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(sp):
        sp.add_argument("--config", help="key=value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
        return sp

    sp = with_config(sub.add_parser("gen-data", help="write the synthetic corpora"))
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_gen_data)

    sp = with_config(sub.add_parser("tok-train", help="train a BPE tokenizer"))
    sp.add_argument("--kind", required=True, choices=sorted(RULES))
    sp.add_argument("--merges", type=int)
    sp.add_argument("-o", "--output", required=True)
    sp.add_argument("corpus", nargs="+", help="corpus directories or text files")
    sp.set_defaults(func=cmd_tok_train)

    sp = with_config(sub.add_parser("train", help="train a model"))
    sp.add_argument("--mode", required=True, choices=["asr", "mt", "lm", "joint", "adapt"])
    sp.add_argument("--data", required=True, help="root written by gen-data")
    sp.add_argument("--split", help="training split (default depends on mode)")
    sp.add_argument("--text-split", default="text", help="text-only split for --mode adapt")
    sp.add_argument("--src-bpe", required=True)
    sp.add_argument("--tgt-bpe")
    sp.add_argument("--init", help="checkpoint of the same kind to continue from")
    sp.add_argument("--init-asr", help="ASR checkpoint initialising the joint model")
    sp.add_argument("--init-mt", help="MT checkpoint initialising the joint model")
    sp.add_argument("-o", "--output", required=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("avg-ckpt", help="average checkpoints elementwise")
    sp.add_argument("checkpoints", nargs="+")
    sp.add_argument("-o", "--output", required=True)
    sp.set_defaults(func=cmd_avg_ckpt)

    sp = with_config(sub.add_parser("decode", help="run a cascade over a corpus"))
    sp.add_argument("--mode", required=True,
                    choices=["ext-ext", "ext-joint", "joint-ext", "joint-joint", "ens",
                             *[m for m in MODES if m not in
                               ("ext-ext", "ext-joint", "joint-ext", "joint-joint")]])
    sp.add_argument("--data", required=True, help="corpus directory with feats/")
    sp.add_argument("--src-bpe", required=True)
    sp.add_argument("--tgt-bpe", required=True)
    sp.add_argument("--joint")
    sp.add_argument("--ext-asr")
    sp.add_argument("--ext-mt")
    sp.add_argument("--lm")
    sp.add_argument("--nbest", type=int)
    sp.add_argument("--lm-weight", type=float)
    sp.add_argument("--weights", help="MT ensemble weights joint,ext")
    sp.add_argument("--asr-weights", help="ASR ensemble weights joint,ext (default: --weights)")
    sp.add_argument("--threads", type=int, default=1)
    sp.add_argument("-o", "--output", required=True)
    sp.set_defaults(func=cmd_decode)

    sp = with_config(sub.add_parser("prune", help="drop utterances the ASR cannot match"))
    sp.add_argument("--asr", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--src-bpe", required=True)
    sp.add_argument("--threshold", type=float)
    sp.add_argument("-o", "--output", required=True)
    sp.set_defaults(func=cmd_prune)

    sp = sub.add_parser("score", help="corpus WER or BLEU of line-aligned files")
    sp.add_argument("--metric", required=True, choices=["wer", "bleu"])
    sp.add_argument("ref")
    sp.add_argument("hyp")
    sp.set_defaults(func=cmd_score)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        args.func(args)
    except TrainingDivergence as e:
        print(f"error: training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    return 0


if __name__ == "__main__":
    sys.exit(main())
