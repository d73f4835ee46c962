import struct

import numpy as np
import pytest

from jamt.metrics import corpus_bleu
from jamt.synthetic import (SyntheticSpec, corrupt_transcripts, generate_corpora, generate_triplet,
                            read_corpus, read_features, render_features, translate,
                            translate_normalized, write_corpus, write_features)

SIZES = {"test": 30, "st": 40, "asr": 20, "mt": 20, "text": 20, "dev": 10}


@pytest.fixture(scope="module")
def spec():
    return SyntheticSpec(src_vocab=12, tgt_vocab=12, feature_dim=6, seed=3)


def test_spec_fixed_by_seed(spec):
    again = SyntheticSpec(src_vocab=12, tgt_vocab=12, feature_dim=6, seed=3)
    assert np.array_equal(spec.prototypes, again.prototypes)
    assert sorted(spec.bijection.tolist()) == list(range(12))
    assert len(set(spec.src_words)) == 12


@pytest.mark.parametrize("kw", [dict(tgt_vocab=11), dict(noise=-1.0), dict(min_len=0),
                                dict(min_len=5, max_len=3)])
def test_spec_validation(kw):
    with pytest.raises(ValueError):
        SyntheticSpec(**{"src_vocab": 12, "tgt_vocab": 12, **kw})


def test_question_reverses(spec):
    a, b = spec.src_words[:2]
    ta, tb = (spec.tgt_words[spec.bijection[i]] for i in range(2))
    assert translate(spec, f"{a} {b} ?") == f"{tb} {ta} ?"
    assert translate(spec, f"{a} {b} .") == f"{ta} {tb} ."


def test_rule_flag_off_keeps_order():
    s = SyntheticSpec(src_vocab=5, tgt_vocab=5, punct_rule=False)
    a, b = s.src_words[:2]
    assert translate(s, f"{a} {b} ?").split()[:2] == translate(s, f"{a} {b} .").split()[:2]


def test_feature_shape_and_determinism(spec):
    t = generate_triplet(spec, 4, 7)
    assert t.features.shape == (spec.frames_per_token * 5, 6)
    assert t.features.dtype == np.float32
    u = generate_triplet(spec, 4, 7)
    assert t.src == u.src and np.array_equal(t.features, u.features)


def test_same_source_same_features_without_noise(spec):
    toks = spec.src_words[:3] + ["?"]
    a = render_features(spec, toks, np.random.default_rng(0))
    b = render_features(spec, toks, np.random.default_rng(1))
    assert np.array_equal(a, b)


def test_noise_and_jitter():
    s = SyntheticSpec(src_vocab=5, tgt_vocab=5, noise=0.5, duration_jitter=2, feature_dim=4)
    toks = s.src_words[:2] + ["."]
    a = render_features(s, toks, np.random.default_rng(0))
    assert 12 <= a.shape[0] <= 18
    b = render_features(s, toks, np.random.default_rng(1))
    assert a.shape != b.shape or not np.array_equal(a, b)


def test_triplet_length_checks(spec):
    with pytest.raises(ValueError):
        generate_triplet(spec, 0)
    with pytest.raises(ValueError):
        generate_triplet(spec, spec.max_len + 1)


def test_marks_roughly_balanced(spec):
    marks = [generate_triplet(spec, 3, i, with_features=False).src[-1] for i in range(400)]
    assert 150 < marks.count("?") < 250


def test_corpora_sizes_and_disjointness(spec):
    c = generate_corpora(spec, SIZES)
    assert {k: len(v) for k, v in c.items()} == SIZES
    seen = {}
    for name, items in c.items():
        for t in items:
            assert t.src_norm not in seen, (name, seen.get(t.src_norm))
            seen[t.src_norm] = name
    assert c["mt"][0].features is None and c["st"][0].features is not None
    assert c["text"][0].features is None


def test_test_split_independent_of_training_sizes(spec):
    a = generate_corpora(spec, {"test": 10, "st": 5})
    b = generate_corpora(spec, {"test": 10, "st": 50})
    assert [t.src for t in a["test"]] == [t.src for t in b["test"]]


def test_corpora_errors(spec):
    with pytest.raises(ValueError):
        generate_corpora(spec, {"train": 3})
    with pytest.raises(ValueError):
        generate_corpora(spec, {"st": 0})
    tiny = SyntheticSpec(src_vocab=2, tgt_vocab=2, min_len=1, max_len=2)
    with pytest.raises(ValueError):
        generate_corpora(tiny, {"st": 10})


def test_corruption_rate_exact(spec):
    c = generate_corpora(spec, {"st": 40}, corrupt_rate=0.3)
    bad = [t for t in c["st"] if t.corrupted]
    assert len(bad) == 12
    for t in bad:
        assert translate(spec, t.src) != t.tgt
    for t in c["st"]:
        if not t.corrupted:
            assert translate(spec, t.src) == t.tgt


def test_corruption_deterministic(spec):
    a = generate_corpora(spec, {"st": 20})["st"]
    b = generate_corpora(spec, {"st": 20})["st"]
    assert corrupt_transcripts(a, 0.5, 1) == corrupt_transcripts(b, 0.5, 1)
    assert [t.src for t in a] == [t.src for t in b]


def test_oracle_translation_scores_100(spec):
    test = generate_corpora(spec, {"test": 60})["test"]
    assert corpus_bleu([t.tgt for t in test], [translate(spec, t.src) for t in test]) == 100.0


def test_norm_oracle_below_100(spec):
    test = generate_corpora(spec, {"test": 60})["test"]
    hyps = [translate_normalized(spec, t.src_norm) for t in test]
    assert corpus_bleu([t.tgt for t in test], hyps) < 100.0


def test_feature_file_layout(tmp_path):
    f = np.arange(6, dtype=np.float32).reshape(3, 2)
    write_features(tmp_path / "x.f32", f)
    raw = (tmp_path / "x.f32").read_bytes()
    assert raw[:8] == struct.pack("<II", 3, 2) and len(raw) == 8 + 24
    assert np.array_equal(read_features(tmp_path / "x.f32"), f)
    (tmp_path / "bad.f32").write_bytes(raw[:-4])
    with pytest.raises(ValueError):
        read_features(tmp_path / "bad.f32")


def test_corpus_round_trip(tmp_path, spec):
    items = generate_corpora(spec, {"st": 5})["st"]
    write_corpus(tmp_path / "st", items)
    back = read_corpus(tmp_path / "st")
    assert [(t.id, t.src, t.tgt) for t in back] == [(t.id, t.src, t.tgt) for t in items]
    for a, b in zip(items, back):
        assert np.array_equal(a.features, b.features)
    (tmp_path / "st" / "tgt.txt").write_text("only one\n")
    with pytest.raises(ValueError):
        read_corpus(tmp_path / "st")
