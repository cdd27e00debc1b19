"""Property suite behind ``insnet verify``: each check returns (name, passed, detail)."""

from __future__ import annotations

import itertools
import math
from typing import Callable

import numpy as np

from . import diffmath as dm
from .baselines import reference_next_token_logits, reference_relative_decoder
from .datagen import BOS, EOS
from .decoding import DecodeControls, decode_step, init_state
from .model import InsNet, InsNetConfig
from .position import InsertionOrder, compress_offsets, oracle_offsets, sample_order

Check = tuple[str, bool, str]
# central differences at h=1e-5 on an O(10) loss resolve gradients to ~3e-10
FD_FLOOR = 1e-5


def tiny_config(**kw) -> InsNetConfig:
    base = dict(vocab_size=12, d_model=16, n_layers=2, n_heads=2, d_ff=32, dropout_p=0.0, max_len=24, precision="float64")
    base.update(kw)
    return InsNetConfig(**base)


def random_sequence(rng, n: int, vocab: int) -> np.ndarray:
    return np.concatenate([[BOS], rng.integers(5, vocab, n - 2), [EOS]]).astype(np.int64)


def check_offsets_exhaustive(n: int = 7) -> Check:
    bad = 0
    count = 0
    for rest in itertools.permutations(range(1, n - 1)):
        order = InsertionOrder((0, n - 1) + rest)
        count += 1
        bad += compress_offsets(order) != oracle_offsets(order)
    return ("offsets: exhaustive generation-form orders", bad == 0, f"{count} orders at n={n}, {bad} mismatches")


def check_offsets_random(count: int = 10_000, max_n: int = 64, seed: int = 0) -> Check:
    rng = np.random.default_rng(seed)
    bad = 0
    for _ in range(count):
        n = int(rng.integers(2, max_n + 1))
        order = InsertionOrder(tuple(int(x) for x in rng.permutation(n)))
        bad += compress_offsets(order) != oracle_offsets(order)
    return ("offsets: random orders", bad == 0, f"{count} orders with n <= {max_n}, {bad} mismatches")


def check_identity_offsets(n: int = 32) -> Check:
    e = compress_offsets(InsertionOrder(tuple(range(n)))).entries
    i, j = np.tril_indices(n)
    ok = bool(np.all(e[i, j] == j - i))
    return ("offsets: identity order gives j - i", ok, f"n={n}")


def check_l2r_degeneration(contexts: int = 50, seed: int = 0) -> Check:
    cfg = tiny_config()
    rng = np.random.default_rng(seed)
    model = InsNet(cfg, rng=rng)
    agree = 0
    worst = 0.0
    for _ in range(contexts):
        k = int(rng.integers(0, 12))
        ctx = [BOS] + [int(x) for x in rng.integers(5, cfg.vocab_size, k)]
        n = k + 2
        order = sample_order("l2r", n)
        ids = np.asarray([BOS, EOS] + ctx[1:])
        E = model.encode(ids, compress_offsets(order).entries).value[0]
        slots, _ = model.shallow_aggregate(E, order, n)
        p = model.params
        logits = slots.value[k] @ p["head.W_tok"].value + p["head.b_tok"].value
        ref = reference_next_token_logits(p, cfg, ctx)
        worst = max(worst, float(np.abs(logits - ref).max()))
        agree += int(np.argmax(logits)) == int(np.argmax(ref))
    ident = np.asarray([1] + [int(x) for x in rng.integers(5, cfg.vocab_size, 8)] + [2])
    n = ident.size
    E = model.encode(ident, compress_offsets(InsertionOrder(tuple(range(n)))).entries).value[0]
    R = reference_relative_decoder(model.params, cfg, ident, lambda i, j: j - i)
    diff = float(np.abs(E - R).max())
    ok = agree == contexts and diff < 1e-9
    return ("model: left-to-right degeneration", ok, f"argmax agreement {agree}/{contexts}, max logit diff {worst:.2e}, identity encode diff {diff:.2e}")


def check_one_pass(pairs: int = 50, max_n: int = 16, seed: int = 0) -> Check:
    cfg = tiny_config()
    rng = np.random.default_rng(seed)
    model = InsNet(cfg, rng=rng)
    worst = 0.0
    for _ in range(pairs):
        n = int(rng.integers(3, max_n + 1))
        seq = random_sequence(rng, n, cfg.vocab_size)
        order = sample_order("uniform", n, rng=rng)
        one, _ = model.sequence_loss(seq, order)
        ref, _ = model.sequence_loss_reencode(seq, order)
        worst = max(worst, abs(float(one.value) - ref) / abs(ref))
    return ("model: one-pass equals re-encode", worst < 1e-6, f"{pairs} pairs, max rel diff {worst:.2e}")


def check_zero_head(n: int = 6, vocab: int = 10) -> Check:
    cfg = tiny_config(vocab_size=vocab)
    model = InsNet(cfg, seed=0)
    model.zero_heads()
    rng = np.random.default_rng(1)
    seq = random_sequence(rng, n, vocab)
    loss, _ = model.sequence_loss(seq, sample_order("uniform", n, rng=rng))
    closed = sum(math.log(t) for t in range(2, n)) + math.log(n) + (n - 2) * math.log(vocab)
    diff = abs(float(loss.value) - closed)
    return ("model: zero-head closed form", diff < 1e-6, f"n={n}: {float(loss.value):.6f} vs {closed:.6f}")


def finite_difference_check(
    loss_fn: Callable[[], dm.DiffArray],
    params: dict[str, dm.DiffArray],
    samples: int = 20,
    h: float = 1e-5,
    seed: int = 0,
    floor: float = FD_FLOOR,
) -> dict[str, tuple[float, float]]:
    """(max relative error, max absolute error) per array, tape vs central differences.

    Relative error is ``|a - n| / max(|a|, |n|, floor)``. The floor sits above
    the roundoff resolution of a central difference, about eps * |loss| / h.
    """
    for p in params.values():
        p.grad = None
    with dm.Tape() as tape:
        loss = loss_fn()
        tape.backward(loss)
    rng = np.random.default_rng(seed)
    errors = {}
    for name, p in params.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.value)
        flat = p.value.reshape(-1)
        idx = rng.choice(flat.size, size=min(samples, flat.size), replace=False)
        worst = worst_abs = 0.0
        for i in idx:
            old = flat[i]
            flat[i] = old + h
            up = float(loss_fn().value)
            flat[i] = old - h
            down = float(loss_fn().value)
            flat[i] = old
            num = (up - down) / (2 * h)
            a = float(analytic.reshape(-1)[i])
            worst = max(worst, abs(a - num) / max(abs(a), abs(num), floor))
            worst_abs = max(worst_abs, abs(a - num))
        errors[name] = (worst, worst_abs)
    return errors


def check_gradients(samples: int = 20, seed: int = 0) -> Check:
    cfg = tiny_config(vocab_size=10, d_model=8, d_ff=16)
    rng = np.random.default_rng(seed)
    model = InsNet(cfg, rng=rng)
    for p in model.params.values():  # move off the symmetric zero/one init
        p.value += rng.normal(0, 0.05, p.value.shape)
    seq = random_sequence(rng, 6, cfg.vocab_size)
    order = sample_order("uniform", 6, rng=rng)
    with dm.precision("float64"):
        errs = finite_difference_check(lambda: model.sequence_loss(seq, order)[0], model.params, samples, seed=seed)
    worst = max(errs, key=lambda k: errs[k][0])
    rel, _ = errs[worst]
    abs_err = max(e[1] for e in errs.values())
    return (
        "diffmath: finite-difference gradients",
        rel < 1e-4,
        f"{len(errs)} arrays, worst {worst} rel err {rel:.2e}, max abs err {abs_err:.1e}",
    )


def check_decode_cache(decodes: int = 20, max_len: int = 20, seed: int = 0) -> Check:
    cfg = tiny_config(max_len=max_len)
    rng = np.random.default_rng(seed)
    model = InsNet(cfg, rng=rng)
    worst = 0.0
    steps = 0
    for _ in range(decodes):
        state = init_state(model, None, [BOS, int(rng.integers(5, cfg.vocab_size)), EOS], rng)
        controls = DecodeControls(termination="forced_min_loglik", theta_term=0.0, max_steps=max_len)
        while not state.finished:
            decode_step(state, controls)
            order = state.order()
            E = model.encode(np.asarray(state.step_tokens), compress_offsets(order).entries).value[0]
            worst = max(worst, float(np.abs(E - state.representations()).max()))
            steps += 1
    return ("decoding: incremental cache equals re-encode", worst < 1e-9, f"{decodes} decodes, {steps} steps, max diff {worst:.2e}")


def run_all(quick: bool = False) -> list[Check]:
    checks = [
        check_offsets_exhaustive(),
        check_offsets_random(1000 if quick else 10_000),
        check_identity_offsets(),
        check_l2r_degeneration(10 if quick else 50),
        check_one_pass(10 if quick else 50),
        check_zero_head(),
        check_gradients(5 if quick else 20),
        check_decode_cache(5 if quick else 20),
    ]
    return checks
