"""InsNet: insertion-based sequence model with insertion-stable relative offsets.

Tokens are encoded in insertion order under a lower-triangular mask, so the
representation of a committed token never changes as the sequence grows and
the whole insertion trajectory is scored in a single forward pass.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np

from . import diffmath as dm
from .diffmath import DiffArray
from .position import (
    InsertionOrder,
    RelEmbeddingTable,
    attention_mask,
    compress_offsets,
    plan_slots,
    slot_neighbors,
)

N_SPECIAL = 5  # PAD, BOS, EOS, UNK, SEP; never emitted as content


class ConfigError(ValueError):
    pass


@dataclass
class InsNetConfig:
    vocab_size: int = 1000
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    dropout_p: float = 0.1
    max_len: int = 128
    n_condition_slots: int = 0
    cond_input_dim: int = 0
    precision: str = "float32"

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.d_model % 2:
            raise ConfigError("d_model must be even for sinusoidal embeddings")
        if self.max_len < 3 + self.n_condition_slots:
            raise ConfigError("max_len must be at least 3 + n_condition_slots")
        if self.n_condition_slots and not self.cond_input_dim:
            raise ConfigError("condition slots need cond_input_dim > 0")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def max_abs_offset(self) -> int:
        return 2 * (self.max_len + self.n_condition_slots)

    @property
    def dtype(self):
        return dm._dtype_name(self.precision)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "InsNetConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


# ---------------------------------------------------------------- shared building blocks


def init_params(shapes: dict[str, tuple], rng: np.random.Generator, dtype) -> dict[str, DiffArray]:
    """normal(0, 0.02) for weights; zeros for biases/u/v; ones for norm gains."""
    params = {}
    for name, shape in shapes.items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf.startswith("b") or leaf in ("u", "v") or leaf.startswith("ln") and leaf.endswith("_b"):
            value = np.zeros(shape)
        elif leaf.startswith("ln") and leaf.endswith("_g"):
            value = np.ones(shape)
        else:
            value = rng.normal(0.0, 0.02, size=shape)
        params[name] = dm.param(value.astype(dtype), name=name, dtype=dtype)
    return params


def feed_forward_shapes(prefix: str, d: int, d_ff: int) -> dict[str, tuple]:
    return {
        f"{prefix}.W1": (d, d_ff),
        f"{prefix}.b1": (d_ff,),
        f"{prefix}.W2": (d_ff, d),
        f"{prefix}.b2": (d,),
        f"{prefix}.ln1_g": (d,),
        f"{prefix}.ln1_b": (d,),
        f"{prefix}.ln2_g": (d,),
        f"{prefix}.ln2_b": (d,),
    }


def split_heads(x: DiffArray, n_heads: int) -> DiffArray:
    """(B, n, d) -> (B, H, n, d_head)."""
    b, n, d = x.shape
    return dm.transpose(dm.reshape(x, (b, n, n_heads, d // n_heads)), (0, 2, 1, 3))


def merge_heads(x: DiffArray) -> DiffArray:
    b, h, n, dh = x.shape
    return dm.reshape(dm.transpose(x, (0, 2, 1, 3)), (b, n, h * dh))


def post_attention(p: dict, prefix: str, x: DiffArray, reduced: DiffArray, dropout_p: float, training: bool, rng) -> DiffArray:
    """Residual + norm, then position-wise feed-forward with residual + norm."""
    h = dm.layer_norm(dm.dropout(reduced, dropout_p, rng, training) + x, p[f"{prefix}.ln1_g"], p[f"{prefix}.ln1_b"])
    f = dm.gelu(h @ p[f"{prefix}.W1"] + p[f"{prefix}.b1"]) @ p[f"{prefix}.W2"] + p[f"{prefix}.b2"]
    return dm.layer_norm(h + dm.dropout(f, dropout_p, rng, training), p[f"{prefix}.ln2_g"], p[f"{prefix}.ln2_b"])


# ---------------------------------------------------------------- batches


@dataclass
class InsNetBatch:
    ids: np.ndarray  # (B, n) token ids in insertion order (condition steps hold PAD)
    offsets: np.ndarray  # (B, n, n)
    lengths: np.ndarray  # (B,)
    left: np.ndarray  # (B, T, S)
    right: np.ndarray
    slot_mask: np.ndarray  # (B, T, S)
    row_mask: np.ndarray  # (B, T) real prediction rows
    latest: np.ndarray  # (B, T) step index of e_new
    target: np.ndarray  # (B, T) position target (0 = terminate)
    target_left: np.ndarray
    target_right: np.ndarray
    token_target: np.ndarray  # (B, T) token id at the inserted step
    token_mask: np.ndarray  # (B, T) rows that carry a token loss
    condition: np.ndarray | None = None

    @property
    def n_events(self) -> int:
        return int(self.row_mask.sum())


def prepare_batch(
    sequences: Sequence[np.ndarray],
    orders: Sequence[InsertionOrder],
    conditions: np.ndarray | None = None,
) -> InsNetBatch:
    """Pack natural-order sequences and their orders into padded arrays.

    With condition slots, ``sequences`` hold only the BOS..EOS tokens; the order
    covers ``n_conditions + len(seq)`` positions.
    """
    B = len(sequences)
    m = orders[0].n_conditions
    ns = [len(s) + m for s in sequences]
    n = max(ns)
    plans = []
    for seq, order in zip(sequences, orders):
        if order.n != len(seq) + m or order.n_conditions != m:
            raise ConfigError(f"order of length {order.n} does not match sequence of length {len(seq)} + {m} conditions")
        plans.append(plan_slots(order))
    T = max(p.target.size for p in plans)
    S = max(p.left.shape[1] for p in plans)

    ids = np.zeros((B, n), dtype=np.int64)
    offsets = np.zeros((B, n, n), dtype=np.int64)
    left = np.zeros((B, T, S), dtype=np.int64)
    right = np.zeros((B, T, S), dtype=np.int64)
    slot_mask = np.zeros((B, T, S), dtype=bool)
    row_mask = np.zeros((B, T), dtype=bool)
    latest = np.zeros((B, T), dtype=np.int64)
    target = np.zeros((B, T), dtype=np.int64)
    tl = np.zeros((B, T), dtype=np.int64)
    tr = np.zeros((B, T), dtype=np.int64)
    tok = np.zeros((B, T), dtype=np.int64)
    tok_mask = np.zeros((B, T), dtype=bool)
    for b, (seq, order, plan) in enumerate(zip(sequences, orders, plans)):
        nb = order.n
        natural = np.concatenate([np.zeros(m, dtype=np.int64), np.asarray(seq, dtype=np.int64)])
        perm = order.as_array()
        ids[b, :nb] = natural[perm]
        offsets[b, :nb, :nb] = compress_offsets(order).entries
        tb, sb = plan.left.shape
        left[b, :tb, :sb] = plan.left
        right[b, :tb, :sb] = plan.right
        slot_mask[b, :tb, :sb] = plan.slot_mask
        row_mask[b, :tb] = True
        latest[b, :tb] = np.arange(plan.first, nb + 1) - 1
        target[b, :tb] = plan.target
        tl[b, :tb] = plan.target_left
        tr[b, :tb] = plan.target_right
        real = plan.target_step >= 0
        tok[b, :tb][real] = ids[b, plan.target_step[real]]
        tok_mask[b, :tb] = real
    return InsNetBatch(ids, offsets, np.asarray(ns), left, right, slot_mask, row_mask, latest, target, tl, tr, tok, tok_mask, conditions)


def _rows(E: DiffArray, idx: np.ndarray) -> DiffArray:
    """Gather ``E[b, idx[b, ...]]`` for a (B, n, d) array."""
    B, n, d = E.shape
    flat = (np.arange(B)[:, None] * n + idx.reshape(B, -1)).reshape(idx.shape)
    return dm.gather_rows(dm.reshape(E, (B * n, d)), flat)


@dataclass
class StepDistributions:
    position_logprobs: np.ndarray  # index 0 is termination
    token_logprobs: np.ndarray  # (n_slots, vocab)


class InsNet:
    kind = "insnet"

    def __init__(self, config: InsNetConfig, seed: int = 0, rng: np.random.Generator | None = None):
        self.config = config
        rng = rng if rng is not None else np.random.default_rng(seed)
        self.params = init_params(self.param_shapes(), rng, config.dtype)
        self.rel_table = RelEmbeddingTable(config.d_model, config.max_abs_offset)

    def param_shapes(self) -> dict[str, tuple]:
        c = self.config
        d = c.d_model
        shapes: dict[str, tuple] = {"emb": (c.vocab_size, d)}
        if c.n_condition_slots:
            shapes["cond.W"] = (c.cond_input_dim, c.n_condition_slots * d)
            shapes["cond.b"] = (c.n_condition_slots * d,)
        for l in range(c.n_layers):
            pre = f"layer{l}"
            shapes.update({
                f"{pre}.W_q": (d, d),
                f"{pre}.W_kE": (d, d),
                f"{pre}.W_v": (d, d),
                f"{pre}.W_kR": (d, d),
                f"{pre}.u": (c.n_heads, c.d_head),
                f"{pre}.v": (c.n_heads, c.d_head),
            })
            shapes.update(feed_forward_shapes(pre, d, c.d_ff))
        shapes.update({
            "slot.W": (3 * d, d),
            "slot.b": (d,),
            "head.W_pos": (d, 1),
            "head.W_term": (d, 1),
            "head.W_tok": (d, c.vocab_size),
            "head.b_tok": (c.vocab_size,),
        })
        return shapes

    # ------------------------------------------------------------ encoding

    def embed(self, ids: np.ndarray, condition=None) -> DiffArray:
        """Token embeddings in insertion order; condition slots take encoded vectors."""
        x = dm.embedding_lookup(self.params["emb"], ids)
        m = self.config.n_condition_slots
        if m:
            from .datagen import encode_condition

            if condition is None:
                raise ConfigError(f"model expects {m} condition slots but no condition was given")
            cond = encode_condition(condition, self.params["cond.W"], self.params["cond.b"], m)
            x = dm.concat([cond, x[:, m:]], axis=1)
        return x

    def encode(self, ids, offsets, condition=None, training: bool = False, rng=None) -> DiffArray:
        """Per-step representations (B, n, d) for tokens given in insertion order."""
        c = self.config
        p = self.params
        ids = np.asarray(ids, dtype=np.int64)
        offsets = np.asarray(offsets, dtype=np.int64)
        if ids.ndim == 1:
            ids, offsets = ids[None], offsets[None]
            if condition is not None:
                condition = np.asarray(condition)[None]
        B, n = ids.shape
        if offsets.shape != (B, n, n):
            raise ConfigError(f"offsets shape {offsets.shape} does not match ids {ids.shape}")
        r = n - 1
        if r > c.max_abs_offset:
            raise ConfigError(f"sequence of {n} steps exceeds the relative table (max offset {c.max_abs_offset})")
        mask = attention_mask(n)
        offsets = np.where(mask, offsets, 0)
        if np.abs(offsets).max(initial=0) > r:
            raise ConfigError("offset outside the range allowed by the context length")
        idx = (offsets + r)[:, None]  # (B, 1, n, n)
        center = c.max_abs_offset
        rel = dm.constant(self.rel_table.table[center - r : center + r + 1].astype(c.dtype))
        H, dh = c.n_heads, c.d_head
        scale = 1.0 / math.sqrt(dh)

        x = self.embed(ids, condition)
        for l in range(c.n_layers):
            pre = f"layer{l}"
            q = split_heads(x @ p[f"{pre}.W_q"], H)
            k = split_heads(x @ p[f"{pre}.W_kE"], H)
            v = split_heads(x @ p[f"{pre}.W_v"], H)
            pos = dm.transpose(dm.reshape(rel @ p[f"{pre}.W_kR"], (2 * r + 1, H, dh)), (1, 2, 0))  # (H, dh, 2r+1)
            # content-key terms (A_CC + A_PC) and position-key terms (A_CP + A_PP)
            qu = q + dm.reshape(p[f"{pre}.u"], (H, 1, dh))
            qv = q + dm.reshape(p[f"{pre}.v"], (H, 1, dh))
            a_content = qu @ dm.transpose(k, (0, 1, 3, 2))
            a_position = dm.take_along_last(qv @ pos, idx)
            attn = dm.masked_softmax(dm.scale(a_content + a_position, scale), mask)
            attn = dm.dropout(attn, c.dropout_p, rng, training)
            reduced = merge_heads(attn @ v)
            x = post_attention(p, pre, x, reduced, c.dropout_p, training, rng)
        return x

    # ------------------------------------------------------------ aggregation and heads

    def shallow_aggregate(self, E, order: InsertionOrder, t: int) -> tuple[DiffArray, DiffArray]:
        """Slot representations of the prefix of ``t`` steps plus ``e_new``.

        ``E`` holds representations for at least the first ``t`` steps of one
        sequence, shape (n, d).
        """
        m = order.n_conditions
        if t < m + 2:
            raise ConfigError(f"slot aggregation needs BOS and EOS present (t={t})")
        E = E if isinstance(E, DiffArray) else dm.constant(E)
        left, right = slot_neighbors(order, t)
        e_new = E[t - 1]
        n_slots = left.size
        e_rep = dm.reshape(e_new, (1, -1)) * dm.constant(np.ones((n_slots, 1), dtype=E.dtype))
        cat = dm.concat_last_dim([dm.gather_rows(E, left), dm.gather_rows(E, right), e_rep])
        slots = cat @ self.params["slot.W"] + self.params["slot.b"]
        return slots, e_new

    def step_distributions(self, slots, e_new) -> StepDistributions:
        p = self.params
        slots = slots if isinstance(slots, DiffArray) else dm.constant(slots)
        e_new = e_new if isinstance(e_new, DiffArray) else dm.constant(e_new)
        w_slots = (slots @ p["head.W_pos"]).value[:, 0]
        w_term = (dm.reshape(e_new, (1, -1)) @ p["head.W_term"]).value[0]
        pos = dm.log_softmax_np(np.concatenate([w_term, w_slots]))
        tok = dm.log_softmax_np((slots @ p["head.W_tok"] + p["head.b_tok"]).value)
        return StepDistributions(pos, tok)

    def batch_loss(self, batch: InsNetBatch, training: bool = False, rng=None) -> tuple[DiffArray, np.ndarray]:
        """Summed insertion NLL of a batch and its (B, T) per-step breakdown."""
        p = self.params
        d = self.config.d_model
        E = self.encode(batch.ids, batch.offsets, batch.condition, training, rng)
        B, T, S = batch.left.shape
        W = p["slot.W"]
        W_l, W_r, W_e = W[:d], W[d : 2 * d], W[2 * d :]
        # slot_linear is affine, so its position logit splits per neighbour
        w_pos = p["head.W_pos"]
        a_l = dm.reshape(E @ (W_l @ w_pos), (B, -1))
        a_r = dm.reshape(E @ (W_r @ w_pos), (B, -1))
        a_e = dm.reshape(E @ (W_e @ w_pos), (B, -1))
        a_t = dm.reshape(E @ p["head.W_term"], (B, -1))
        bias = dm.reshape(p["slot.b"], (1, d)) @ w_pos  # (1, 1)
        slot_logits = (
            dm.reshape(dm.take_along_last(a_l, batch.left.reshape(B, -1)), (B, T, S))
            + dm.reshape(dm.take_along_last(a_r, batch.right.reshape(B, -1)), (B, T, S))
            + dm.reshape(dm.take_along_last(a_e, batch.latest), (B, T, 1))
            + dm.reshape(bias, (1, 1, 1))
        )
        term_logits = dm.reshape(dm.take_along_last(a_t, batch.latest), (B, T, 1))
        logits = dm.concat([term_logits, slot_logits], axis=-1)
        pos_mask = np.concatenate([np.ones((B, T, 1), dtype=bool), batch.slot_mask], axis=-1)
        pos_nll = dm.cross_entropy_from_logits(logits, batch.target, pos_mask)

        cat = dm.concat_last_dim([_rows(E, batch.target_left), _rows(E, batch.target_right), _rows(E, batch.latest)])
        slot_rep = cat @ W + p["slot.b"]
        tok_logits = slot_rep @ p["head.W_tok"] + p["head.b_tok"]
        tok_nll = dm.cross_entropy_from_logits(tok_logits, batch.token_target)

        wpos = batch.row_mask.astype(E.dtype)
        wtok = batch.token_mask.astype(E.dtype)
        per_step = pos_nll * wpos + tok_nll * wtok
        return dm.sum(per_step), per_step.value

    def sequence_loss(self, token_ids, order: InsertionOrder, condition=None) -> tuple[DiffArray, np.ndarray]:
        """NLL of generating ``token_ids`` (natural order, BOS..EOS) along ``order``."""
        token_ids = np.asarray(token_ids, dtype=np.int64)
        cond = None if condition is None else np.asarray(condition)[None]
        batch = prepare_batch([token_ids], [order], cond)
        loss, per_step = self.batch_loss(batch)
        return loss, per_step[0, batch.row_mask[0]]

    def sequence_loss_reencode(self, token_ids, order: InsertionOrder, condition=None) -> tuple[float, np.ndarray]:
        """Same NLL computed by re-encoding every prefix from scratch."""
        token_ids = np.asarray(token_ids, dtype=np.int64)
        m = order.n_conditions
        natural = np.concatenate([np.zeros(m, dtype=np.int64), token_ids])
        perm = order.as_array()
        steps = []
        for t in range(m + 2, order.n + 1):
            sub = order.prefix(t)
            ids = natural[perm[:t]]
            E = self.encode(ids, compress_offsets(sub).entries, condition).value[0]
            slots, e_new = self.shallow_aggregate(E, sub, t)
            dist = self.step_distributions(slots, e_new)
            if t == order.n:
                steps.append(-dist.position_logprobs[0])
                continue
            pos = perm[t]
            slot = sum(1 for q in perm[:t] if m <= q < pos)
            steps.append(-dist.position_logprobs[slot] - dist.token_logprobs[slot - 1, natural[pos]])
        steps = np.asarray(steps)
        return float(steps.sum()), steps

    # ------------------------------------------------------------ utilities

    def zero_grad(self) -> None:
        for prm in self.params.values():
            prm.grad = None

    def zero_heads(self) -> None:
        """Zero every output head (slot projection, position, termination, token)."""
        for name in ("slot.W", "slot.b", "head.W_pos", "head.W_term", "head.W_tok", "head.b_tok"):
            self.params[name].value[...] = 0.0
