import struct

import numpy as np
import pytest

from gradsuite import tiny_batch, tiny_joint
from jamt import tensor as T
from jamt.models import AsrModel, JointModel, LanguageModel, MtModel, TransformerConfig
from jamt.training import (Adam, BatchSampler, CheckpointSet, EncodedCorpus, Trainer, TrainConfig,
                           adaptation_loss, adaptation_step, alternate_schedule, alternate_train,
                           average_checkpoints, early_stop, evaluate_loss, joint_losses,
                           load_checkpoint, load_model, lr_at, make_batch, multitask_step,
                           prune_corpus, save_checkpoint, save_model, select_best)


def float_joint(seed=0):
    return tiny_joint(seed, np.float32)


def text_batch(rng):
    src = [list(rng.integers(4, 9, size=n)) for n in (3, 2)]
    tgt = [list(rng.integers(4, 7, size=n)) for n in (2, 3)]
    return make_batch("text-only-pair", src, tgt)


def grads_of(model, loss):
    params = model.parameters()
    T.backward(loss, params)
    return {n: p.grad.copy() for n, p in model.named_parameters()}


# ------------------------------------------------------------- schedule

def test_noam_peak_value():
    # d^-0.5 * W^-0.5 = 1/8 * 1/20
    assert lr_at(400, 64, 400) == pytest.approx(0.00625, rel=1e-12)


def test_noam_shape():
    lrs = [lr_at(s, 64, 400) for s in range(1, 2000)]
    assert all(a < b for a, b in zip(lrs[:399], lrs[1:400]))
    assert all(a > b for a, b in zip(lrs[399:], lrs[400:]))
    assert lr_at(1600, 64, 400) == pytest.approx(lr_at(400, 64, 400) / 2, rel=1e-12)
    assert lr_at(10, 64, 400, scale=3.0) == pytest.approx(3 * lr_at(10, 64, 400))


def test_noam_step_zero():
    with pytest.raises(ValueError):
        lr_at(0, 64, 400)


def test_adam_minimises_quadratic():
    x = T.parameter(np.array([3.0, -2.0]))
    opt = Adam([x], clip_norm=5.0)
    for _ in range(300):
        x.grad = None
        T.backward(T.sum(x * x), [x])
        opt.step(0.05)
    assert np.all(np.abs(x.data) < 1e-2)


def test_adam_clips_and_rejects_bad_lr():
    x = T.parameter(np.array([0.0]))
    x.grad = np.array([1e6])
    opt = Adam([x], clip_norm=5.0)
    opt.step(0.1)
    # first Adam step moves every coordinate by ~lr regardless of magnitude
    assert x.data[0] == pytest.approx(-0.1, rel=1e-6)
    with pytest.raises(ValueError):
        opt.step(0.0)
    x.grad = np.array([np.inf])
    with pytest.raises(T.TrainingDivergence):
        opt.step(0.1)


# --------------------------------------------------------------- batches

def test_batch_layout():
    b = make_batch("mt-pair", [[5, 6], [7]], [[4], [4, 5, 6]])
    assert b.src_in.tolist() == [[1, 5, 6], [1, 7, 0]]
    assert b.src_out.tolist() == [[5, 6, 2], [7, 2, 0]]
    assert b.src_lens.tolist() == [3, 2]
    assert b.tgt_out.tolist() == [[4, 2, 0, 0], [4, 5, 6, 2]]


def test_batch_kind_checks():
    with pytest.raises(ValueError):
        make_batch("st-triplet", [[5]], [[4]])
    with pytest.raises(ValueError):
        make_batch("mt-pair", [[5]])
    with pytest.raises(ValueError):
        make_batch("speech", [[5]], [[4]])


def test_sampler_sizes_and_seeding():
    a, b = BatchSampler(10, 4, 0), BatchSampler(10, 4, 0)
    for _ in range(6):
        x, y = a.next(), b.next()
        assert len(x) == 4 and len(set(x.tolist())) == 4
        assert np.array_equal(x, y)
    assert len(BatchSampler(3, 8, 0).next()) == 3
    with pytest.raises(ValueError):
        BatchSampler(0, 4, 0)


def test_sampler_epoch_is_permutation():
    s = BatchSampler(12, 4, 3)
    epoch = np.concatenate([s.next() for _ in range(3)])
    assert sorted(epoch.tolist()) == list(range(12))


# ------------------------------------------------------------- multitask

def test_lambda_one_leaves_mt_untouched():
    joint = tiny_joint(0)
    b = tiny_batch(np.random.default_rng(0))
    g = grads_of(joint, joint_losses(joint, b, 1.0, 0.1)[2])
    for name, v in g.items():
        if name.startswith("mt."):
            assert not np.any(v), name
    assert np.any(g["asr.decoder.out.weight"])


def test_lambda_zero_still_trains_asr_through_context():
    joint = tiny_joint(0)
    b = tiny_batch(np.random.default_rng(0))
    g = grads_of(joint, joint_losses(joint, b, 0.0, 0.1)[2])
    # output projection is not on the context path
    assert not np.any(g["asr.decoder.out.weight"])
    assert np.any(g["asr.frontend.conv1.weight"])
    assert np.any(g["mt.decoder.out.weight"])


def test_joint_loss_mixes_components():
    joint = tiny_joint(1)
    b = tiny_batch(np.random.default_rng(1))
    la, lm, tot = joint_losses(joint, b, 0.3, 0.1)
    assert float(tot.data) == pytest.approx(0.3 * float(la.data) + 0.7 * float(lm.data), rel=1e-12)
    with pytest.raises(ValueError):
        joint_losses(joint, b, 1.5)


def test_multitask_overfits_one_batch():
    joint = float_joint(2)
    b = tiny_batch(np.random.default_rng(2))
    tr = Trainer(joint, TrainConfig(warmup=50, lr_scale=2.0, smoothing=0.0))
    for _ in range(200):
        multitask_step(tr, joint, b)
    joint.eval()
    assert float(joint_losses(joint, b, 0.5, 0.0)[2].data) < 0.1


def test_multitask_needs_triplets():
    joint = float_joint()
    tr = Trainer(joint, TrainConfig())
    with pytest.raises(ValueError):
        multitask_step(tr, joint, text_batch(np.random.default_rng(0)))


# ------------------------------------------------------------ adaptation

def test_adaptation_gradients_skip_encoder():
    joint = tiny_joint(3)
    g = grads_of(joint, adaptation_loss(joint, text_batch(np.random.default_rng(3)), 0.1))
    enc = [n for n in g if n.startswith("asr.frontend") or n.startswith("asr.encoder")]
    assert enc
    for n in enc:
        assert not np.any(g[n]), n
    assert np.linalg.norm(g["asr.decoder.embed.weight"]) > 0
    assert np.linalg.norm(g["mt.decoder.out.weight"]) > 0


def test_adaptation_step_freezes_encoder_and_lowers_loss():
    joint = float_joint(4)
    b = text_batch(np.random.default_rng(4))
    before = {n: p.data.copy() for n, p in joint.named_parameters()}
    tr = Trainer(joint, TrainConfig(warmup=20, smoothing=0.0))
    joint.eval()
    start = float(adaptation_loss(joint, b, 0.0).data)
    for _ in range(30):
        adaptation_step(tr, joint, b)
    joint.eval()
    assert float(adaptation_loss(joint, b, 0.0).data) < start
    for n, p in joint.named_parameters():
        if n.startswith("asr.frontend") or n.startswith("asr.encoder"):
            assert np.array_equal(p.data, before[n]), n
    assert not np.array_equal(joint.asr.decoder.embed.weight.data,
                              before["asr.decoder.embed.weight"])


def test_adaptation_rejects_features():
    joint = float_joint()
    tr = Trainer(joint, TrainConfig())
    with pytest.raises(ValueError):
        adaptation_step(tr, joint, tiny_batch(np.random.default_rng(0)))


@pytest.mark.parametrize("n,r,expected", [
    (6, 1, ["ST", "TX"] * 3),
    (7, 2, ["ST", "TX", "TX"] * 2 + ["ST"]),
    (3, 0, ["ST"] * 3),
])
def test_alternate_schedule(n, r, expected):
    assert alternate_schedule(n, r) == expected


def test_alternate_schedule_negative_ratio():
    with pytest.raises(ValueError):
        alternate_schedule(4, -1)


def _corpora(rng, n=6):
    src = [list(rng.integers(4, 9, size=rng.integers(1, 4))) for _ in range(n)]
    tgt = [list(rng.integers(4, 7, size=rng.integers(1, 4))) for _ in range(n)]
    feats = [rng.normal(size=(int(rng.integers(6, 14)), 3)).astype(np.float32) for _ in range(n)]
    st = EncodedCorpus(list(range(n)), src, tgt, feats)
    text = EncodedCorpus(list(range(n)), src, tgt, None)
    return st, text


def test_ratio_zero_is_plain_multitask():
    st, text = _corpora(np.random.default_rng(5))
    cfg = TrainConfig(batch_size=3, warmup=10)
    a, b = float_joint(5), float_joint(5)
    alternate_train(Trainer(a, cfg), a, st, text, ratio=0, steps=6)
    alternate_train(Trainer(b, cfg), b, st, None, ratio=1, steps=6)
    for (n, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
        assert np.array_equal(p.data, q.data), n


def test_alternate_train_history_and_empty_streams():
    st, text = _corpora(np.random.default_rng(6))
    j = float_joint(6)
    hist = alternate_train(Trainer(j, TrainConfig(batch_size=3)), j, st, text, ratio=2, steps=5)
    assert [k for k, _ in hist] == ["ST", "TX", "TX", "ST", "TX"]
    with pytest.raises(ValueError):
        alternate_train(Trainer(j, TrainConfig()), j, None, EncodedCorpus([], [], [], None))


def test_training_reproducible():
    st, text = _corpora(np.random.default_rng(7))
    cfg = TrainConfig(batch_size=3, warmup=10, seed=9)
    runs = []
    for _ in range(2):
        j = float_joint(7)
        j.train()
        alternate_train(Trainer(j, cfg), j, st, text, ratio=1, steps=4)
        runs.append(j.state_dict())
    for k in runs[0]:
        assert np.array_equal(runs[0][k], runs[1][k]), k


# ------------------------------------------------------------ checkpoints

def test_average_of_identical_is_identity():
    s = {"w": np.random.default_rng(0).normal(size=(3, 4)).astype(np.float32)}
    out = average_checkpoints([s, dict(s), dict(s)])
    assert np.array_equal(out["w"], s["w"]) and out["w"].dtype == np.float32


def test_average_is_mean():
    out = average_checkpoints([{"w": np.array([1.0, 2.0])}, {"w": np.array([3.0, 6.0])}])
    assert out["w"].tolist() == [2.0, 4.0]


def test_average_rejects_mismatch():
    with pytest.raises(ValueError):
        average_checkpoints([{"w": np.zeros(2)}, {"w": np.zeros(3)}])
    with pytest.raises(ValueError):
        average_checkpoints([{"w": np.zeros(2)}, {"v": np.zeros(2)}])
    with pytest.raises(ValueError):
        average_checkpoints([])


def test_select_best():
    cs = CheckpointSet()
    for step, score in [(100, 3.0), (200, 1.0), (300, 2.0), (400, 1.0)]:
        cs.add(step, score, {"w": np.zeros(1)})
    assert [s.step for s in select_best(cs, 3)] == [200, 400, 300]
    with pytest.raises(ValueError):
        select_best(cs, 5)
    with pytest.raises(ValueError):
        cs.add(500, float("nan"), {"w": np.zeros(1)})


@pytest.mark.parametrize("hist,patience,stop", [
    ([3, 2, 1], 1, False),
    ([1, 2, 3], 2, True),
    ([1, 2, 3], 3, False),
    ([2, 1, 1, 1], 2, True),
])
def test_early_stop(hist, patience, stop):
    assert early_stop(hist, patience) is stop


def test_early_stop_errors():
    with pytest.raises(ValueError):
        early_stop([], 2)
    with pytest.raises(ValueError):
        early_stop([1.0], 0)


def test_checkpoint_bytes(tmp_path):
    p = tmp_path / "c.bin"
    save_checkpoint(p, {"a": np.array([1.0, 2.0])})
    expected = (b"JAMT" + struct.pack("<HI", 1, 1) + struct.pack("<H", 1) + b"a"
                + struct.pack("<BI", 1, 2) + np.array([1.0, 2.0], "<f4").tobytes())
    assert p.read_bytes() == expected
    assert load_checkpoint(p)["a"].tolist() == [1.0, 2.0]


def test_checkpoint_rejects_corruption(tmp_path):
    p = tmp_path / "c.bin"
    save_checkpoint(p, {"a": np.ones((2, 2))})
    raw = p.read_bytes()
    p.write_bytes(raw + b"\0")
    with pytest.raises(ValueError):
        load_checkpoint(p)
    p.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ValueError):
        load_checkpoint(p)
    p.write_bytes(raw[:4] + struct.pack("<H", 9) + raw[6:])
    with pytest.raises(ValueError):
        load_checkpoint(p)


def test_checkpoint_scalar_and_empty(tmp_path):
    p = tmp_path / "c.bin"
    save_checkpoint(p, {"s": np.float32(2.5), "e": np.zeros((0, 3))})
    out = load_checkpoint(p)
    assert out["s"].shape == () and float(out["s"]) == 2.5
    assert out["e"].shape == (0, 3)


@pytest.mark.parametrize("cls", [AsrModel, MtModel, LanguageModel, JointModel.build])
def test_model_round_trip_bit_exact(tmp_path, cls):
    cfg = TransformerConfig(d_model=8, n_heads=2, ff_dim=16, enc_layers=1, dec_layers=1,
                            src_vocab=9, tgt_vocab=7, feature_dim=3, max_len=8, dropout=0.1)
    m = cls(cfg, 3)
    save_model(tmp_path / "m.bin", m)
    back = load_model(tmp_path / "m.bin")
    assert type(back) is type(m)
    a, b = m.state_dict(), back.state_dict()
    assert list(a) == list(b)
    for k in a:
        assert a[k].tobytes() == b[k].tobytes(), k
    save_model(tmp_path / "n.bin", back)
    assert (tmp_path / "m.bin").read_bytes() == (tmp_path / "n.bin").read_bytes()


def test_evaluate_loss_token_weighted():
    joint = float_joint(8)
    st, _ = _corpora(np.random.default_rng(8), n=5)

    def fn(b):
        return joint_losses(joint, b, 0.5, 0.0)[1]

    joint.eval()
    whole = evaluate_loss(fn, st, "st-triplet", batch_size=5)
    split = evaluate_loss(fn, st, "st-triplet", batch_size=2)
    assert whole == pytest.approx(split, rel=1e-5)


# ---------------------------------------------------------------- pruning

def test_prune_drops_above_threshold():
    corpus = [("a", "a b c d", "a b c d"), ("b", "a x y d", "a b c d"), ("c", "x x x d", "a b c d")]
    rep = prune_corpus(lambda hyp: hyp, corpus, 0.5)
    assert [c[0] for c in rep.kept] == ["a", "b"]
    assert rep.dropped == [("c", 0.75)]
    assert [w for _, w in rep.wers] == [0.0, 0.5, 0.75]


def test_prune_threshold_extremes_and_errors():
    corpus = [("a", "a b", "a b"), ("b", "x b", "a b")]
    assert len(prune_corpus(lambda h: h, corpus, 0.0).kept) == 1
    assert len(prune_corpus(lambda h: h, corpus, 1.0).kept) == 2
    with pytest.raises(ValueError):
        prune_corpus(lambda h: h, corpus, 1.5)
    with pytest.raises(ValueError):
        prune_corpus(lambda h: h, [], 0.5)
