import bisect
import itertools
import math

import numpy as np
import pytest
from conftest import tiny

from insnet.baselines import ITVanilla, L2RModel
from insnet.datagen import BOS, EOS, SEP
from insnet.model import ConfigError
from insnet.position import InsertionOrder, sample_order


def test_it_zero_head_step_loss():
    model = ITVanilla(tiny(vocab_size=10), seed=0)
    model.zero_heads()
    assert abs(float(model.it_step_loss([BOS, EOS], 0, 7).value) - (math.log(2) + math.log(10))) < 1e-12
    assert abs(float(model.it_step_loss([BOS, 7, EOS], 1, 8).value) - (math.log(3) + math.log(10))) < 1e-12
    assert abs(float(model.it_step_loss([BOS, 7, 8, EOS], 0, None).value) - math.log(4)) < 1e-12


def test_it_zero_head_sequence_matches_insnet_value():
    model = ITVanilla(tiny(vocab_size=10), seed=0)
    model.zero_heads()
    loss = model.it_sequence_loss([BOS, 6, 7, EOS], sample_order("l2r", 4))
    assert abs(float(loss.value) - (math.log(2) + math.log(3) + math.log(4) + 2 * math.log(10))) < 1e-9


def test_it_slot_range_checked():
    model = ITVanilla(tiny(), seed=0)
    with pytest.raises(IndexError):
        model.it_step_loss([BOS, 7, EOS], 2, 8)
    with pytest.raises(ConfigError):
        model.it_step_loss([BOS], 0, 8)
    with pytest.raises(ConfigError):
        ITVanilla(tiny(n_condition_slots=1, cond_input_dim=3))


def test_it_enumeration_of_all_orders():
    """Hand-replayed contexts for every order of three content tokens."""
    model = ITVanilla(tiny(), seed=2)
    seq = [BOS, 7, 9, 11, EOS]
    losses = []
    for rest in itertools.permutations([1, 2, 3]):
        order = InsertionOrder((0, 4) + rest)
        present = [0, 4]
        manual = 0.0
        for pos in rest:
            slot = bisect.bisect_left(present, pos) - 1
            manual += float(model.it_step_loss([seq[q] for q in present], slot, seq[pos]).value)
            bisect.insort(present, pos)
        manual += float(model.it_step_loss(seq, 0, None).value)
        batched = float(model.it_sequence_loss(seq, order).value)
        assert abs(batched - manual) < 1e-8
        losses.append(batched)
    assert len(losses) == 6
    assert np.ptp(losses) > 1e-6  # the likelihood depends on the order


def test_it_chunked_loss_equals_sequence_losses(rng):
    model = ITVanilla(tiny(), seed=2)
    seqs = [np.concatenate([[BOS], rng.integers(5, 12, n), [EOS]]) for n in (1, 4, 7)]
    orders = [sample_order("uniform", len(s), rng=rng) for s in seqs]
    chunked = sum(float(model.chunk_loss(c).value) for c in model.context_chunks(seqs, orders, max_tokens=20))
    direct = sum(float(model.it_sequence_loss(s, o).value) for s, o in zip(seqs, orders))
    assert abs(chunked - direct) < 1e-9


def test_it_reencoding_changes_existing_positions():
    model = ITVanilla(tiny(), seed=5)
    before = model.encode_contexts(np.array([[BOS, 7, EOS]]), np.array([3])).value[0]
    after = model.encode_contexts(np.array([[BOS, 7, 9, EOS]]), np.array([4])).value[0]
    # BOS and the token 7 keep their positions yet their encodings move
    assert np.max(np.abs(before[0] - after[0])) > 1e-6
    assert np.max(np.abs(before[1] - after[1])) > 1e-6


def test_it_distributions_normalize(rng):
    model = ITVanilla(tiny(), seed=3)
    for k in (2, 5, 9):
        pos, tok = model.step_distributions([BOS] + list(rng.integers(5, 12, k - 2)) + [EOS])
        assert pos.size == k
        assert abs(np.exp(pos).sum() - 1) < 1e-6
        assert np.all(np.abs(np.exp(tok).sum(-1) - 1) < 1e-6)


def test_it_step_distributions_agree_with_step_loss():
    model = ITVanilla(tiny(), seed=4)
    ctx = [BOS, 6, 8, EOS]
    pos, tok = model.step_distributions(ctx)
    assert abs(-pos[2] - tok[1, 10] - float(model.it_step_loss(ctx, 1, 10).value)) < 1e-9
    assert abs(-pos[0] - float(model.it_step_loss(ctx, 0, None).value)) < 1e-9


def test_l2r_zero_head_nll():
    model = L2RModel(tiny(vocab_size=10), seed=0)
    model.zero_heads()
    seq = [BOS, 5, 6, 7, EOS]
    assert abs(float(model.l2r_loss(seq).value) - 4 * math.log(10)) < 1e-12
    # keyword prefixes add conditioning but no scored positions
    assert abs(float(model.l2r_loss(seq, keywords=[6]).value) - 4 * math.log(10)) < 1e-12


def test_l2r_causal_suffix_invariance(rng):
    model = L2RModel(tiny(), seed=1)
    ids = np.array([[BOS, 5, 6, 7, 8, 9, 10, EOS]])
    base = model.forward(ids).value
    perm = ids.copy()
    perm[0, 4:] = perm[0, 4:][::-1]
    moved = model.forward(perm).value
    assert np.max(np.abs(base[0, :4] - moved[0, :4])) < 1e-12
    assert np.max(np.abs(base[0, 4:] - moved[0, 4:])) > 1e-6


def test_l2r_layout():
    row, start = L2RModel.layout(np.array([BOS, 7, EOS]), 2, [9, 10])
    assert row.tolist() == [0, 0, 9, 10, SEP, BOS, 7, EOS]
    assert start == 5


def test_l2r_cache_matches_forward(rng):
    model = L2RModel(tiny(n_condition_slots=2, cond_input_dim=5), seed=1)
    cond = rng.normal(size=5)
    seq = [BOS, 6, 7, 8]
    kw = [7]
    row, start = model.layout(np.array(seq), 2, kw)
    full = model.forward(row[None], cond[None]).value[0]
    cache = model.start_cache(cond, kw)
    for i, tok in enumerate(seq):
        got = cache.push(tok)
        assert np.max(np.abs(got - full[start + i])) < 1e-10


def test_l2r_decode_truncates_with_flag(rng):
    model = L2RModel(tiny(), seed=0)
    model.params["head.b_tok"].value[EOS] = -1e9  # never stop
    ids, truncated = model.l2r_decode(max_len=6, rng=rng)
    assert truncated and len(ids) == 7 and ids[0] == BOS and ids[-1] == EOS
    assert all(t >= 5 for t in ids[1:-1])
    model.params["head.b_tok"].value[EOS] = 1e9
    ids, truncated = model.l2r_decode(max_len=6, greedy=True)
    assert ids == [BOS, EOS] and not truncated


def test_l2r_decode_validates_arguments(rng):
    model = L2RModel(tiny(), seed=0)
    with pytest.raises(ValueError):
        model.l2r_decode(prefix=(7,), rng=rng)
    with pytest.raises(ValueError):
        model.l2r_decode(rng=rng, temperature=0.0)
