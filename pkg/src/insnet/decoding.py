"""Insertion decoding with incremental per-layer caches.

Every committed step owns one cached row per layer; a new insertion only
appends rows, since committed representations never change under the
lower-triangular mask with insertion-stable offsets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .datagen import BOS, EOS, SPECIALS, Vocab
from .model import InsNet, prepare_batch
from .position import InsertionOrder, sample_order


class DecodeError(ValueError):
    pass


_GELU_C = math.sqrt(2.0 / math.pi)


def _gelu(x):
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * (x * x * x))))


def _ln(x, g, b, eps=1e-5):
    xc = x - x.mean(axis=-1, keepdims=True)
    return xc / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps) * g + b


def _log_softmax(z):
    z = z - np.max(z)
    return z - np.log(np.sum(np.exp(z)))


@dataclass
class DecodeControls:
    position_temperature: float = 1.0
    token_temperature: float = 1.0
    max_steps: int = 64
    termination: str = "free"  # or "forced_min_loglik"
    theta_term: float | None = None
    greedy: bool = False

    def __post_init__(self):
        if self.position_temperature <= 0 or self.token_temperature <= 0:
            raise DecodeError("temperatures must be > 0")
        if self.max_steps < 1:
            raise DecodeError("max_steps must be >= 1")
        if self.termination not in ("free", "forced_min_loglik"):
            raise DecodeError(f"unknown termination mode {self.termination!r}")
        if self.termination == "forced_min_loglik" and self.theta_term is None:
            raise DecodeError("forced_min_loglik needs theta_term")


@dataclass
class OpCounter:
    attention_rows: int = 0  # one per (layer, new step)
    attention_entries: int = 0  # scores computed, summed over heads' shared row


@dataclass
class DecodeState:
    model: InsNet
    step_tokens: list[int]  # token id per insertion step (PAD for condition steps)
    natural: list[int]  # step indices in natural order, conditions first
    keys: list[list[np.ndarray]]  # per layer, per step
    values: list[list[np.ndarray]]
    rows: list[np.ndarray]  # final-layer representation per step
    offset_rows: list[np.ndarray]
    rng: np.random.Generator | None
    trace: list[str] = field(default_factory=list)
    ops: OpCounter = field(default_factory=OpCounter)
    n_initial: int = 0
    finished: bool = False
    forced_stop: bool = False

    @property
    def t(self) -> int:
        return len(self.step_tokens)

    def tokens(self) -> list[int]:
        """Natural-order ids without conditions (BOS .. EOS)."""
        m = self.model.config.n_condition_slots
        return [self.step_tokens[s] for s in self.natural[m:]]

    def order(self) -> InsertionOrder:
        """The realized insertion order (final natural position per step)."""
        pos = np.empty(self.t, dtype=np.int64)
        pos[np.asarray(self.natural)] = np.arange(self.t)
        return InsertionOrder(tuple(int(p) for p in pos), self.model.config.n_condition_slots)

    def representations(self) -> np.ndarray:
        return np.stack(self.rows)


class _Weights:
    """Plain-numpy view of the parameters with per-layer projected position tables."""

    def __init__(self, model: InsNet):
        c = model.config
        self.p = {k: v.value for k, v in model.params.items()}
        table = model.rel_table.table.astype(c.dtype)
        self.center = c.max_abs_offset
        self.pos_keys = [table @ self.p[f"layer{l}.W_kR"] for l in range(c.n_layers)]


def _weights(model: InsNet) -> _Weights:
    # parameters change in training; key the cache on the array identities
    key = tuple(id(p.value) for p in model.params.values())
    cached = getattr(model, "_decode_weights", None)
    if cached is None or cached[0] != key:
        cached = (key, _Weights(model))
        model._decode_weights = cached
    return cached[1]


def _append_step(state: DecodeState, x: np.ndarray, token: int, natural_index: int) -> None:
    """Commit one step: compute its offsets and one new row per layer."""
    model = state.model
    c = model.config
    w = _weights(model)
    state.natural.insert(natural_index, state.t)
    pos = np.empty(state.t + 1, dtype=np.int64)
    pos[np.asarray(state.natural)] = np.arange(state.t + 1)
    offsets = pos - pos[-1]
    state.offset_rows.append(offsets)
    state.step_tokens.append(token)
    H, dh = c.n_heads, c.d_head
    scale = 1.0 / math.sqrt(dh)
    for l in range(c.n_layers):
        p = w.p
        pre = f"layer{l}"
        q = (x @ p[f"{pre}.W_q"]).reshape(H, dh)
        state.keys[l].append(x @ p[f"{pre}.W_kE"])
        state.values[l].append(x @ p[f"{pre}.W_v"])
        K = np.stack(state.keys[l]).reshape(-1, H, dh)
        V = np.stack(state.values[l]).reshape(-1, H, dh)
        P = w.pos_keys[l][offsets + w.center].reshape(-1, H, dh)
        a = np.einsum("hd,jhd->hj", q + p[f"{pre}.u"], K) + np.einsum("hd,jhd->hj", q + p[f"{pre}.v"], P)
        a = a * scale
        a = np.exp(a - a.max(axis=1, keepdims=True))
        a /= a.sum(axis=1, keepdims=True)
        reduced = np.einsum("hj,jhd->hd", a, V).reshape(-1)
        state.ops.attention_rows += 1
        state.ops.attention_entries += offsets.size
        h = _ln(reduced + x, p[f"{pre}.ln1_g"], p[f"{pre}.ln1_b"])
        f = _gelu(h @ p[f"{pre}.W1"] + p[f"{pre}.b1"]) @ p[f"{pre}.W2"] + p[f"{pre}.b2"]
        x = _ln(h + f, p[f"{pre}.ln2_g"], p[f"{pre}.ln2_b"])
    state.rows.append(x)


def init_state(model: InsNet, condition=None, initial_tokens: Sequence[int] = (BOS, EOS), rng=None) -> DecodeState:
    """Commit conditions, BOS, EOS and then the interior initial tokens left to right."""
    init = [int(t) for t in initial_tokens]
    if len(init) < 2 or init[0] != BOS or init[-1] != EOS:
        raise DecodeError("initial tokens must start with BOS and end with EOS")
    if any(t in (BOS, EOS) for t in init[1:-1]):
        raise DecodeError("BOS/EOS may only appear at the ends of the initial tokens")
    c = model.config
    L = c.n_layers
    state = DecodeState(model, [], [], [[] for _ in range(L)], [[] for _ in range(L)], [], [], rng)
    w = _weights(model)
    emb = w.p["emb"]
    m = c.n_condition_slots
    if m:
        if condition is None:
            raise DecodeError(f"model expects {m} condition slots")
        g = np.asarray(condition, dtype=c.dtype).reshape(-1)
        cond = np.tanh(g @ w.p["cond.W"] + w.p["cond.b"]).reshape(m, c.d_model)
        for i in range(m):
            _append_step(state, cond[i], 0, i)
    _append_step(state, emb[BOS], BOS, m)
    _append_step(state, emb[EOS], EOS, m + 1)
    for k in init[1:-1]:
        _append_step(state, emb[k], k, len(state.natural) - 1)
    state.n_initial = len(init)
    return state


@dataclass
class StepScores:
    position_logprobs: np.ndarray  # index 0 = terminate
    slots: np.ndarray  # (S, d)


def _slot_scores(state: DecodeState) -> StepScores:
    w = _weights(state.model)
    p = w.p
    m = state.model.config.n_condition_slots
    content = state.natural[m:]
    E = state.rows
    e_new = E[-1]
    left = np.stack([E[s] for s in content[:-1]])
    right = np.stack([E[s] for s in content[1:]])
    cat = np.concatenate([left, right, np.broadcast_to(e_new, left.shape)], axis=1)
    slots = cat @ p["slot.W"] + p["slot.b"]
    logits = np.concatenate([e_new @ p["head.W_term"], (slots @ p["head.W_pos"])[:, 0]])
    return StepScores(_log_softmax(logits.astype(np.float64)), slots)


def _choose(logp: np.ndarray, temperature: float, greedy: bool, rng) -> int:
    if greedy:
        return int(np.argmax(logp))  # first maximum: lowest index wins ties
    z = logp / temperature
    z = np.exp(z - z[np.isfinite(z)].max())
    z /= z.sum()
    if rng is None:
        raise DecodeError("sampling needs an rng")
    return int(rng.choice(z.size, p=z))


def _render(state: DecodeState, vocab: Vocab | None) -> str:
    ids = [t for t in state.tokens() if t not in (BOS, EOS)]
    if vocab is None:
        return " ".join(str(t) for t in ids)
    return " ".join(vocab.itos[t] for t in ids)


def decode_step(state: DecodeState, controls: DecodeControls, vocab: Vocab | None = None):
    """One insertion (or termination). Returns ``("inserted", slot, token)`` or ``("terminated",)``."""
    if state.finished:
        raise DecodeError("decode state already terminated")
    c = state.model.config
    step = len(state.trace) + 1
    limit = state.t >= c.max_len or step > controls.max_steps
    if limit:
        state.finished = state.forced_stop = True
        state.trace.append(f"{step}\t0\tTERM:max_steps\t{_render(state, vocab)}")
        return ("terminated",)
    scores = _slot_scores(state)
    logp = scores.position_logprobs
    if controls.termination == "forced_min_loglik" and logp[0] < controls.theta_term:
        logp = logp.copy()
        logp[0] = -np.inf
        logp = logp - np.log(np.exp(logp[1:]).sum())
    slot = _choose(logp, controls.position_temperature, controls.greedy, state.rng)
    if slot == 0:
        state.finished = True
        state.trace.append(f"{step}\t0\tTERM\t{_render(state, vocab)}")
        return ("terminated",)
    p = _weights(state.model).p
    tok_logits = (scores.slots[slot - 1] @ p["head.W_tok"] + p["head.b_tok"]).astype(np.float64)
    tok_logits[: len(SPECIALS)] = -np.inf  # reserved ids are never inserted
    token = _choose(_log_softmax(tok_logits), controls.token_temperature, controls.greedy, state.rng)
    m = c.n_condition_slots
    _append_step(state, p["emb"][token], token, m + slot)
    label = vocab.itos[token] if vocab is not None else str(token)
    state.trace.append(f"{step}\t{slot}\t{label}\t{_render(state, vocab)}")
    return ("inserted", slot, token)


@dataclass
class DecodeResult:
    tokens: list[int]  # natural order without sentinels
    trace: list[str]
    forced_stop: bool
    state: DecodeState


def decode(
    model: InsNet,
    condition=None,
    keywords: Sequence[int] = (),
    controls: DecodeControls | None = None,
    rng: np.random.Generator | None = None,
    vocab: Vocab | None = None,
) -> DecodeResult:
    controls = controls or DecodeControls()
    state = init_state(model, condition, [BOS, *keywords, EOS], rng)
    while not state.finished:
        decode_step(state, controls, vocab)
    ids = [t for t in state.tokens() if t not in (BOS, EOS)]
    return DecodeResult(ids, list(state.trace), state.forced_stop, state)


def write_trace(path, trace: Sequence[str]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("".join(line + "\n" for line in trace))


def calibrate_termination(model: InsNet, dev, batch_size: int = 32) -> float:
    """Mean final-step log-probability of the termination slot under l2r orders."""
    if not dev:
        raise DecodeError("calibration needs a non-empty dev set")
    m = model.config.n_condition_slots
    finals = []
    for a in range(0, len(dev), batch_size):
        chunk = dev[a : a + batch_size]
        orders = [sample_order("l2r", len(ex.ids) + m, n_conditions=m) for ex in chunk]
        cond = np.stack([ex.image for ex in chunk]) if m else None
        batch = prepare_batch([ex.ids for ex in chunk], orders, cond)
        _, per_step = model.batch_loss(batch)
        last = batch.row_mask.sum(axis=1) - 1
        finals.extend(-per_step[np.arange(len(chunk)), last])
    # summed in sorted order so the estimate does not depend on dev-set order
    return float(math.fsum(sorted(finals)) / len(finals))
