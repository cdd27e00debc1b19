import math
import struct

import numpy as np
import pytest

from insnet import diffmath as dm
from insnet.bench import story_model_config
from insnet.datagen import gen_random_sequences, gen_toy_stories, story_vocab
from insnet.decoding import DecodeControls
from insnet.metrics import MetricError, attribute_accuracy, contains_in_order, corpus_bleu, incorporation_rate
from insnet.model import ConfigError, InsNetConfig
from insnet.training import (
    AdamState,
    IntegrityError,
    TrainConfig,
    TrainingError,
    adam_step,
    evaluate,
    evaluate_nll,
    load_checkpoint,
    lr_at,
    read_metrics,
    restore,
    save_checkpoint,
    train,
)

# measured on the seeded reference run (InsNet, toy stories, 200 iterations): 6.95 -> about 5.0
SMOKE_MIN_REDUCTION = 0.20


def test_schedule_endpoints():
    cfg = TrainConfig(lr=1e-3, warmup_iters=10, total_iters=50)
    assert lr_at(0, cfg) == 0.0
    assert lr_at(5, cfg) == pytest.approx(5e-4)
    assert lr_at(10, cfg) == 1e-3
    assert lr_at(30, cfg) == pytest.approx(5e-4)
    assert lr_at(50, cfg) == 0.0
    assert lr_at(60, cfg) == 0.0


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigError):
        TrainConfig(warmup_iters=10, total_iters=5)
    with pytest.raises(ConfigError):
        TrainConfig(order_strategy="random")


def reference_adam(values, grads_seq, lr, b1, b2, eps, wd, clip):
    """Independent loop over scalars: clip, decoupled decay, Adam."""
    x = [float(v) for v in values]
    m = [0.0] * len(x)
    v = [0.0] * len(x)
    for t, grads in enumerate(grads_seq, 1):
        norm = math.sqrt(sum(g * g for g in grads))
        f = clip / norm if clip and norm > clip else 1.0
        for i, g in enumerate(grads):
            g *= f
            m[i] = b1 * m[i] + (1 - b1) * g
            v[i] = b2 * v[i] + (1 - b2) * g * g
            mh = m[i] / (1 - b1**t)
            vh = v[i] / (1 - b2**t)
            if wd:
                x[i] -= lr * wd * x[i]
            x[i] -= lr * mh / (math.sqrt(vh) + eps)
    return x


def test_adam_single_scalar_first_step():
    with dm.precision("float64"):
        p = {"w": dm.param(np.array([[0.5]]))}
        adam_step(p, {"w": np.array([[0.3]])}, AdamState(), 0.01)
        # bias-corrected first step moves by lr * sign(g), up to eps
        assert abs(p["w"].value[0, 0] - (0.5 - 0.01 * 0.3 / (0.3 + 1e-8))) < 1e-12
        assert abs(p["w"].value[0, 0] - reference_adam([0.5], [[0.3]], 0.01, 0.9, 0.999, 1e-8, 0.0, None)[0]) < 1e-12


def test_adam_matches_reference_with_clip_and_decay(rng):
    with dm.precision("float64"):
        init = rng.normal(size=(2, 3))
        p = {"w": dm.param(init.copy())}
        moments = AdamState()
        seq = [rng.normal(size=(2, 3)) * s for s in (0.1, 3.0, 0.5, 2.0)]
        for g in seq:
            norm = adam_step(p, {"w": g}, moments, 0.05, (0.9, 0.999), 1e-8, 0.1, 1.0)
            assert norm == pytest.approx(np.linalg.norm(g))
        ref = reference_adam(init.ravel(), [g.ravel() for g in seq], 0.05, 0.9, 0.999, 1e-8, 0.1, 1.0)
        assert np.max(np.abs(p["w"].value.ravel() - ref)) < 1e-12
        assert moments.t == 4


def test_adam_zero_grad_no_decay_is_identity(rng):
    init = rng.normal(size=(3, 3))
    p = {"w": dm.param(init.copy()), "b": dm.param(np.ones(3))}
    adam_step(p, {"w": np.zeros((3, 3)), "b": np.zeros(3)}, AdamState(), 0.1)
    np.testing.assert_array_equal(p["w"].value, init.astype(p["w"].dtype))


def test_adam_decay_skips_vectors():
    with dm.precision("float64"):
        p = {"w": dm.param(np.ones((2, 2))), "b": dm.param(np.ones(2))}
        adam_step(p, {"w": np.zeros((2, 2)), "b": np.zeros(2)}, AdamState(), 0.1, weight_decay=0.5)
        np.testing.assert_allclose(p["w"].value, 0.95)
        np.testing.assert_array_equal(p["b"].value, 1.0)


def test_adam_rejects_non_finite():
    p = {"w": dm.param(np.ones(2))}
    with pytest.raises(TrainingError, match="w"):
        adam_step(p, {"w": np.array([1.0, np.nan])}, AdamState(), 0.1)


# ---------------------------------------------------------------- BLEU and friends


def test_bleu_fixtures():
    assert corpus_bleu(["the cat sat on the mat"], ["the cat sat on the mat"], 1) == pytest.approx(100.0)
    assert corpus_bleu(["the cat sat on the mat"], ["the cat sat on the mat"], 4) == pytest.approx(100.0)
    assert corpus_bleu(["a a a a"], ["a b c d"], 2) == 0.0
    # clipped unigram precision 2/7, hypothesis longer than the reference
    assert corpus_bleu(["the the the the the the the"], ["the cat is on the mat"], 1) == pytest.approx(100 * 2 / 7)
    # p1 = 1, p2 = 2/3, brevity penalty exp(1 - 5/4)
    assert corpus_bleu(["the cat the mat"], ["the cat on the mat"], 2) == pytest.approx(100 * math.exp(-0.25) * math.sqrt(2 / 3))
    # corpus pooling: p1 = 4/5, p2 = 1/3, equal lengths
    assert corpus_bleu(["a b", "c d e"], ["a b", "c x e"], 2) == pytest.approx(100 * math.sqrt(0.8 / 3))


def test_bleu_closest_reference_length():
    # closest reference has 4 tokens; hypothesis matches it exactly
    assert corpus_bleu(["a b c d"], [["a b c d e f g", "a b c d"]], 4) == pytest.approx(100.0)


def test_bleu_errors():
    with pytest.raises(MetricError):
        corpus_bleu(["a"], [])
    with pytest.raises(MetricError):
        corpus_bleu(["a"], [[]])


def test_incorporation():
    assert contains_in_order([1, 5, 2, 7], [5, 7])
    assert not contains_in_order([7, 5], [5, 7])
    assert incorporation_rate([[1, 5, 7], [7, 5]], [[5, 7], [5, 7]]) == 50.0
    # a decode seeded with its keywords counts once
    assert incorporation_rate([[9, 5, 9]], [[5]]) == 100.0
    with pytest.raises(MetricError):
        incorporation_rate([], [])


def test_attribute_accuracy():
    acc = attribute_accuracy(["a red cube .", "a blue cube .", "nothing"], [("red", "cube"), ("red", "cube"), ("red", "cube")])
    assert acc["color_acc"] == pytest.approx(100 / 3)
    assert acc["shape_acc"] == pytest.approx(200 / 3)
    assert acc["joint_acc"] == pytest.approx(100 / 3)


# ---------------------------------------------------------------- checkpoints and runs


def small_story_config(**kw):
    base = dict(vocab_size=len(story_vocab()), d_model=16, n_layers=1, n_heads=2, d_ff=32, max_len=64, dropout_p=0.1)
    base.update(kw)
    return InsNetConfig(**base)


def quick_cfg(**kw):
    base = dict(lr=1e-3, warmup_iters=1, total_iters=15, batch_size=4, eval_interval=5, seed=3)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def stories():
    return gen_toy_stories(40, seed=5), gen_toy_stories(8, seed=6)


def test_save_load_save_byte_identical(stories, tmp_path):
    res = train("insnet", stories[0], small_story_config(), quick_cfg(total_iters=3), out_dir=tmp_path)
    first = res.checkpoint.read_bytes()
    model, tcfg, moments, rng, it = restore(load_checkpoint(res.checkpoint))
    save_checkpoint(tmp_path / "again.insn", model, tcfg, it, rng, moments)
    assert (tmp_path / "again.insn").read_bytes() == first
    assert first[:5] == b"INSN\x01"


def _first_extent_offset(data: bytes) -> tuple[int, str]:
    pos = data.find(b"\n\n", 5) + 2
    (nlen,) = struct.unpack_from("<I", data, pos)
    name = data[pos + 4 : pos + 4 + nlen].decode()
    return pos + 4 + nlen + 3 + 4, name


def test_tampered_extent_raises_integrity_error(stories, tmp_path):
    res = train("l2r", stories[0], small_story_config(), quick_cfg(total_iters=2), out_dir=tmp_path)
    data = bytearray(res.checkpoint.read_bytes())
    off, name = _first_extent_offset(bytes(data))
    (extent,) = struct.unpack_from("<Q", data, off)
    struct.pack_into("<Q", data, off, extent + 1)
    bad = tmp_path / "bad.insn"
    bad.write_bytes(bytes(data))
    with pytest.raises(IntegrityError) as info:
        load_checkpoint(bad)
    assert info.value.field == f"{name}.extents"


@pytest.mark.parametrize(
    "mutate,field",
    [
        (lambda d: b"XXXX" + d[4:], "magic"),
        (lambda d: d[:4] + b"\x02" + d[5:], "version"),
        (lambda d: d[:-3], None),
        (lambda d: d + b"\x00", "trailing"),
    ],
)
def test_corrupt_checkpoints(stories, tmp_path, mutate, field):
    res = train("insnet", stories[0], small_story_config(), quick_cfg(total_iters=1), out_dir=tmp_path)
    bad = tmp_path / "bad.insn"
    bad.write_bytes(mutate(res.checkpoint.read_bytes()))
    with pytest.raises(IntegrityError) as info:
        load_checkpoint(bad)
    if field is not None:
        assert info.value.field == field
    else:
        assert info.value.field.endswith(".values")


@pytest.mark.parametrize("kind", ["insnet", "l2r", "it_vanilla"])
def test_resume_matches_unbroken_run(kind, tmp_path):
    if kind == "it_vanilla":
        data = gen_random_sequences(30, 6, 20, seed=1)
        mc = InsNetConfig(vocab_size=30, d_model=16, n_layers=1, n_heads=2, d_ff=32, max_len=10, dropout_p=0.1)
    else:
        data = gen_toy_stories(30, seed=2)
        mc = small_story_config()
    cfg = quick_cfg()
    full = train(kind, data, mc, cfg)
    part = train(kind, data, mc, cfg, out_dir=tmp_path, stop_after=5)
    resumed = train(kind, data, mc, cfg, resume=load_checkpoint(part.checkpoint))
    expected = full.log.values("train", "loss")[5:]
    got = resumed.log.values("train", "loss")
    assert len(got) == 10
    assert got == expected
    for name, p in full.model.params.items():
        assert np.array_equal(p.value, resumed.model.params[name].value)


def test_identical_seeds_identical_metrics(stories, tmp_path):
    a = train("insnet", stories[0], small_story_config(), quick_cfg(total_iters=6), dev_data=stories[1], out_dir=tmp_path / "a")
    train("insnet", stories[0], small_story_config(), quick_cfg(total_iters=6), dev_data=stories[1], out_dir=tmp_path / "b")
    ra = [{k: v for k, v in r.items() if k != "wallclock_s"} for r in read_metrics(tmp_path / "a" / "metrics.csv")]
    rb = [{k: v for k, v in r.items() if k != "wallclock_s"} for r in read_metrics(tmp_path / "b" / "metrics.csv")]
    assert ra == rb
    assert {r["metric"] for r in ra} == {"loss", "lr", "grad_norm", "nll"}
    assert a.log.values("dev", "nll")


def test_keyword_strategy_without_keywords_is_config_error():
    data = gen_random_sequences(30, 5, 4, seed=0)
    mc = InsNetConfig(vocab_size=30, d_model=16, n_layers=1, n_heads=2, d_ff=32, max_len=10)
    for kind in ("insnet", "l2r"):
        with pytest.raises(ConfigError):
            train(kind, data, mc, quick_cfg(total_iters=1, order_strategy="keyword_first_uniform"))
    with pytest.raises(ConfigError):
        train("insnet", [], mc, quick_cfg())
    with pytest.raises(ConfigError):
        train("gpt", data, mc, quick_cfg())


def test_evaluate_reports_requested_metrics(stories):
    res = train("insnet", stories[0], small_story_config(dropout_p=0.0), quick_cfg(total_iters=2))
    table = evaluate(res.model, stories[1][:3], ["nll", "bleu", "incorporation"], story_vocab(), seed=1)
    assert set(table) == {"nll", "bleu1", "bleu2", "bleu3", "bleu4", "incorporation"}
    assert table["incorporation"] == 100.0
    assert table["nll"] == pytest.approx(evaluate_nll(res.model, stories[1][:3], "l2r", 1))
    with pytest.raises(ConfigError):
        evaluate(res.model, stories[1][:3], ["perplexity"])
    with pytest.raises(MetricError):
        evaluate(res.model, [], ["nll"])


def test_evaluate_bleu_scores_word_references(stories, monkeypatch):
    # regression: word-list references were once read as sets of one-word references
    import insnet.training as training

    dev = stories[1][:3]
    monkeypatch.setattr(training, "generate", lambda *a, **k: [[t for t in ex.ids if t > 4] for ex in dev])
    model = train("insnet", stories[0], small_story_config(), quick_cfg(total_iters=2)).model
    table = evaluate(model, dev, ["bleu"], story_vocab(), controls=DecodeControls())
    assert table["bleu4"] == pytest.approx(100.0)


def test_two_hundred_iterations_reduce_story_nll():
    data = gen_toy_stories(2000, seed=0)
    cfg = TrainConfig(lr=1e-3, warmup_iters=20, total_iters=200, batch_size=16, seed=0, order_strategy="uniform")
    res = train("insnet", data, story_model_config(), cfg)
    losses = res.log.values("train", "loss")
    assert all(math.isfinite(x) for x in losses)
    first, last = losses[0], float(np.mean(losses[-10:]))
    assert last <= (1 - SMOKE_MIN_REDUCTION) * first, (first, last)
