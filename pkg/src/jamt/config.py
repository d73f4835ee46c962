"""Flat ``key=value`` run configuration and run manifests."""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # synthetic data
    seed: int = 0
    vocab: int = 40
    frames_per_token: int = 4
    feature_dim: int = 16
    noise: float = 0.0
    punct_rule: bool = True
    min_words: int = 2
    max_words: int = 6
    duration_jitter: int = 0
    corrupt_rate: float = 0.0
    n_test: int = 200
    n_st: int = 1000
    n_asr: int = 2000
    n_mt: int = 4000
    n_text: int = 3000
    n_dev: int = 200
    # tokenizers
    merges: int = 256
    variant: str = "punc"
    max_word_len: int = 0          # 0: keep every line
    # model
    d_model: int = 64
    n_heads: int = 4
    ff_dim: int = 256
    enc_layers: int = 2
    dec_layers: int = 2
    dropout: float = 0.0
    max_len: int = 32
    # training
    steps: int = 1000
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
    # decoding
    beam_size: int = 4
    length_ratio: float = 1.2
    insertion_penalty: float = 0.0
    eos_factor: float = 1.0
    lm_weight: float = 0.0
    n_best: int = 1
    mt_beam_size: int = 4
    mt_length_ratio: float = 1.2
    mt_insertion_penalty: float = 0.0
    mt_eos_factor: float = 1.0
    # pruning
    prune_threshold: float = 0.5

    def __post_init__(self):
        if self.variant not in ("punc", "norm"):
            raise ConfigError(f"variant must be 'punc' or 'norm', got {self.variant!r}")
        for name in ("n_test", "n_st", "n_asr", "n_mt", "n_text", "n_dev", "steps", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError("lam must lie in [0, 1]")

    def to_text(self):
        return "".join(f"{k}={_fmt(v)}\n" for k, v in asdict(self).items())

    def updated(self, values: dict):
        return build_config(values, base=self)


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _convert(name, raw, typ):
    try:
        if typ is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return typ(raw.strip())
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None


_TYPES = {"int": int, "float": float, "bool": bool, "str": str}


def build_config(values: dict, base: RunConfig | None = None) -> RunConfig:
    """Apply string (or typed) values over ``base``; unknown keys are errors."""
    base = base or RunConfig()
    known = {f.name: _TYPES[f.type] if isinstance(f.type, str) else f.type for f in fields(RunConfig)}
    current = asdict(base)
    for k, v in values.items():
        if k not in known:
            raise ConfigError(f"unknown config key {k!r}")
        current[k] = _convert(k, v, known[k]) if isinstance(v, str) else known[k](v)
    return RunConfig(**current)


def parse_lines(lines, origin="<config>"):
    out = {}
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{n}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def load_config(path=None, overrides=None) -> RunConfig:
    """Defaults < file < overrides (``key=value`` strings or a dict)."""
    cfg = RunConfig()
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
        cfg = build_config(parse_lines(text.splitlines(), str(path)), cfg)
    if overrides:
        if not isinstance(overrides, dict):
            overrides = parse_lines(overrides, "<command line>")
        cfg = build_config(overrides, cfg)
    return cfg


def blob_hash(data: bytes) -> str:
    """Content hash in git's blob form: sha1("blob <len>\\0" + data)."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def input_hashes(paths):
    """(path, hash) per input; a directory hashes the sorted listing of its file hashes."""
    out = []
    for p in paths:
        p = Path(p)
        if p.is_dir():
            files = sorted(q for q in p.rglob("*") if q.is_file())
            listing = "".join(f"{blob_hash(f.read_bytes())} {f.relative_to(p)}\n" for f in files)
            out.append((str(p), blob_hash(listing.encode())))
        else:
            out.append((str(p), blob_hash(p.read_bytes())))
    return out


def write_manifest(path, command, cfg: RunConfig, inputs=()):
    hashes = input_hashes(inputs)
    combined = blob_hash("".join(f"{h} {n}\n" for n, h in hashes).encode())
    lines = [f"# command: {command}", f"# seed: {cfg.seed}", f"# inputs: {combined}"]
    lines += [f"# input {h} {n}" for n, h in hashes]
    Path(path).write_text("\n".join(lines) + "\n" + cfg.to_text(), encoding="utf-8")
    return combined
