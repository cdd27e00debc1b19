"""Comparison models: a re-encoding insertion transformer and a left-to-right
decoder, plus a plain-numpy relative-position causal decoder used as an oracle
for the left-to-right special case of InsNet."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from . import diffmath as dm
from .datagen import BOS, EOS, SEP, SPECIALS, encode_condition
from .diffmath import DiffArray
from .model import (
    ConfigError,
    InsNetConfig,
    feed_forward_shapes,
    init_params,
    merge_heads,
    post_attention,
    split_heads,
)
from .position import InsertionOrder, _sinusoid


def _attention_shapes(prefix: str, d: int) -> dict[str, tuple]:
    return {f"{prefix}.W_q": (d, d), f"{prefix}.W_k": (d, d), f"{prefix}.W_v": (d, d)}


def _absolute_attention(p, pre, x, mask, c: InsNetConfig, training, rng) -> DiffArray:
    H = c.n_heads
    q = split_heads(x @ p[f"{pre}.W_q"], H)
    k = split_heads(x @ p[f"{pre}.W_k"], H)
    v = split_heads(x @ p[f"{pre}.W_v"], H)
    scores = dm.scale(q @ dm.transpose(k, (0, 1, 3, 2)), 1.0 / math.sqrt(c.d_head))
    attn = dm.dropout(dm.masked_softmax(scores, mask), c.dropout_p, rng, training)
    return post_attention(p, pre, x, merge_heads(attn @ v), c.dropout_p, training, rng)


class ITVanilla:
    """Insertion transformer with absolute positions; every context is re-encoded."""

    kind = "it_vanilla"

    def __init__(self, config: InsNetConfig, seed: int = 0, rng=None):
        if config.n_condition_slots:
            raise ConfigError("IT-vanilla baseline does not take condition slots")
        self.config = config
        rng = rng if rng is not None else np.random.default_rng(seed)
        d = config.d_model
        shapes: dict[str, tuple] = {"emb": (config.vocab_size, d)}
        for l in range(config.n_layers):
            shapes.update(_attention_shapes(f"layer{l}", d))
            shapes.update(feed_forward_shapes(f"layer{l}", d, config.d_ff))
        shapes.update({
            "slot.W": (2 * d, d),
            "slot.b": (d,),
            "head.W_pos": (d, 1),
            "head.W_term": (d, 1),
            "head.W_tok": (d, config.vocab_size),
            "head.b_tok": (config.vocab_size,),
        })
        self.params = init_params(shapes, rng, config.dtype)
        self.pos_table = _sinusoid(np.arange(config.max_len + 2, dtype=np.float64), d).astype(config.dtype)

    def encode_contexts(self, contexts: np.ndarray, lengths: np.ndarray, training=False, rng=None) -> DiffArray:
        """Bi-directional encoding of padded natural-order contexts (C, n)."""
        c = self.config
        C, n = contexts.shape
        if n > self.pos_table.shape[0]:
            raise ConfigError(f"context of {n} tokens exceeds max_len={c.max_len}")
        key_ok = np.arange(n)[None, :] < lengths[:, None]
        mask = key_ok[:, None, None, :]
        x = dm.embedding_lookup(self.params["emb"], contexts) + dm.constant(self.pos_table[:n])
        for l in range(c.n_layers):
            x = _absolute_attention(self.params, f"layer{l}", x, mask, c, training, rng)
        return x

    def _contexts(self, seq: np.ndarray, order: InsertionOrder):
        """All contexts along ``order`` plus their position/token targets."""
        perm = order.as_array()
        n = perm.size
        ctx = np.zeros((n - 1, n), dtype=np.int64)
        lengths = np.arange(2, n + 1)
        target = np.zeros(n - 1, dtype=np.int64)
        token = np.zeros(n - 1, dtype=np.int64)
        for r, t in enumerate(range(2, n + 1)):
            present = np.sort(perm[:t])
            ctx[r, :t] = seq[present]
            if t < n:
                target[r] = int(np.searchsorted(present, perm[t]))
                token[r] = seq[perm[t]]
        return ctx, lengths, target, token

    def _heads(self, E: DiffArray, lengths: np.ndarray, target: np.ndarray, token: np.ndarray):
        """Per-context NLL (position + token) from encodings (C, n, d)."""
        p = self.params
        d = self.config.d_model
        C, n, _ = E.shape
        W = p["slot.W"]
        w_pos = p["head.W_pos"]
        a_l = dm.reshape(E @ (W[:d] @ w_pos), (C, n))
        a_r = dm.reshape(E @ (W[d:] @ w_pos), (C, n))
        bias = dm.reshape(dm.reshape(p["slot.b"], (1, d)) @ w_pos, (1, 1))
        slot_logits = a_l[:, : n - 1] + a_r[:, 1:] + bias  # slot s sits between s and s+1
        valid = np.arange(n)[None, :] < lengths[:, None]
        pool = dm.constant((valid / lengths[:, None]).astype(E.dtype)[:, None, :])
        pooled = dm.reshape(pool @ E, (C, d))
        term = pooled @ p["head.W_term"]
        logits = dm.concat([term, slot_logits], axis=-1)
        mask = np.concatenate([np.ones((C, 1), dtype=bool), np.arange(n - 1)[None, :] < (lengths - 1)[:, None]], axis=1)
        pos_nll = dm.cross_entropy_from_logits(logits, target, mask)

        is_insert = target > 0
        li = np.where(is_insert, target - 1, 0)
        flat = dm.reshape(E, (C * n, d))
        base = np.arange(C) * n
        cat = dm.concat_last_dim([dm.gather_rows(flat, base + li), dm.gather_rows(flat, base + li + 1)])
        tok_logits = (cat @ W + p["slot.b"]) @ p["head.W_tok"] + p["head.b_tok"]
        tok_nll = dm.cross_entropy_from_logits(tok_logits, token)
        return pos_nll + tok_nll * dm.constant(is_insert.astype(E.dtype))

    def context_chunks(self, sequences, orders, max_tokens: int = 8192):
        """Contexts of several sequences, packed into chunks of bounded padded size.

        Yields ``(contexts, lengths, target, token)`` tuples; the sum of chunk
        losses is the summed sequence loss.
        """
        parts = [self._contexts(np.asarray(s, dtype=np.int64), o) for s, o in zip(sequences, orders)]
        lengths = np.concatenate([p[1] for p in parts])
        width = max(p[0].shape[1] for p in parts)
        ctx = np.zeros((lengths.size, width), dtype=np.int64)
        row = 0
        for c, *_ in parts:
            ctx[row : row + c.shape[0], : c.shape[1]] = c
            row += c.shape[0]
        target = np.concatenate([p[2] for p in parts])
        token = np.concatenate([p[3] for p in parts])
        per_chunk = max(1, max_tokens // width)
        for a in range(0, lengths.size, per_chunk):
            sl = slice(a, a + per_chunk)
            w = int(lengths[sl].max())
            yield ctx[sl, :w], lengths[sl], target[sl], token[sl]

    def chunk_loss(self, chunk, training=False, rng=None) -> DiffArray:
        ctx, lengths, target, token = chunk
        E = self.encode_contexts(ctx, lengths, training, rng)
        return dm.sum(self._heads(E, lengths, target, token))

    def it_step_loss(self, context: Sequence[int], slot: int, token: int | None) -> DiffArray:
        """NLL of inserting ``token`` between context positions ``slot`` and ``slot + 1``.

        ``token=None`` scores termination instead.
        """
        ctx = np.asarray(context, dtype=np.int64)
        k = ctx.size
        if k < 2:
            raise ConfigError("context must hold at least BOS and EOS")
        if token is not None and not 0 <= slot < k - 1:
            raise IndexError(f"slot {slot} out of range for a context of {k} tokens")
        E = self.encode_contexts(ctx[None], np.asarray([k]))
        target = np.asarray([0 if token is None else slot + 1])
        tok = np.asarray([0 if token is None else token])
        return dm.sum(self._heads(E, np.asarray([k]), target, tok))

    def it_sequence_loss(self, sequence, order: InsertionOrder, training=False, rng=None) -> DiffArray:
        seq = np.asarray(sequence, dtype=np.int64)
        if order.n != seq.size:
            raise ConfigError(f"order of length {order.n} does not match sequence of length {seq.size}")
        ctx, lengths, target, token = self._contexts(seq, order)
        E = self.encode_contexts(ctx, lengths, training, rng)
        return dm.sum(self._heads(E, lengths, target, token))

    def step_distributions(self, context: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
        """Position log-probs (index 0 = terminate) and per-slot token log-probs."""
        p = self.params
        ctx = np.asarray(context, dtype=np.int64)
        E = self.encode_contexts(ctx[None], np.asarray([ctx.size])).value[0]
        W, b = p["slot.W"].value, p["slot.b"].value
        slots = np.concatenate([E[:-1], E[1:]], axis=1) @ W + b
        term = E.mean(axis=0) @ p["head.W_term"].value
        pos = dm.log_softmax_np(np.concatenate([term, (slots @ p["head.W_pos"].value)[:, 0]]))
        tok = dm.log_softmax_np(slots @ p["head.W_tok"].value + p["head.b_tok"].value)
        return pos, tok

    def zero_heads(self) -> None:
        for name in ("slot.W", "slot.b", "head.W_pos", "head.W_term", "head.W_tok", "head.b_tok"):
            self.params[name].value[...] = 0.0


class L2RModel:
    """Causal decoder with learned absolute positions.

    Input layout: ``[conditions] [keywords SEP] BOS x1 .. xk EOS``; the loss
    covers the tokens after BOS.
    """

    kind = "l2r"

    def __init__(self, config: InsNetConfig, seed: int = 0, rng=None, max_prefix: int = 16):
        self.config = config
        rng = rng if rng is not None else np.random.default_rng(seed)
        d = config.d_model
        self.max_positions = config.max_len + config.n_condition_slots + max_prefix
        shapes: dict[str, tuple] = {"emb": (config.vocab_size, d), "pos": (self.max_positions, d)}
        if config.n_condition_slots:
            shapes["cond.W"] = (config.cond_input_dim, config.n_condition_slots * d)
            shapes["cond.b"] = (config.n_condition_slots * d,)
        for l in range(config.n_layers):
            shapes.update(_attention_shapes(f"layer{l}", d))
            shapes.update(feed_forward_shapes(f"layer{l}", d, config.d_ff))
        shapes.update({"head.W_tok": (d, config.vocab_size), "head.b_tok": (config.vocab_size,)})
        self.params = init_params(shapes, rng, config.dtype)

    def forward(self, ids: np.ndarray, condition=None, training=False, rng=None) -> DiffArray:
        """Logits (B, n, V); with conditions the first M positions are condition slots."""
        c = self.config
        p = self.params
        ids = np.asarray(ids, dtype=np.int64)
        B, n = ids.shape
        if n > self.max_positions:
            raise ConfigError(f"sequence of {n} positions exceeds {self.max_positions}")
        x = dm.embedding_lookup(p["emb"], ids)
        m = c.n_condition_slots
        if m:
            if condition is None:
                raise ConfigError("model expects a condition")
            cond = encode_condition(condition, p["cond.W"], p["cond.b"], m)
            x = dm.concat([cond, x[:, m:]], axis=1)
        x = x + p["pos"][:n]
        mask = np.tri(n, dtype=bool)
        for l in range(c.n_layers):
            x = _absolute_attention(p, f"layer{l}", x, mask, c, training, rng)
        return x @ p["head.W_tok"] + p["head.b_tok"]

    @staticmethod
    def layout(sequence: np.ndarray, n_conditions: int = 0, keywords: Sequence[int] = ()) -> tuple[np.ndarray, int]:
        """Model input and the index of BOS within it."""
        prefix = [0] * n_conditions
        if keywords:
            prefix += list(keywords) + [SEP]
        return np.concatenate([np.asarray(prefix, dtype=np.int64), np.asarray(sequence, dtype=np.int64)]), len(prefix)

    def batch_loss(self, sequences, conditions=None, keywords=None, training=False, rng=None):
        """Summed causal NLL and per-sequence NLLs."""
        m = self.config.n_condition_slots
        rows, starts = [], []
        for i, seq in enumerate(sequences):
            kw = keywords[i] if keywords is not None else ()
            row, start = self.layout(seq, m, kw)
            rows.append(row)
            starts.append(start)
        n = max(len(r) for r in rows)
        B = len(rows)
        ids = np.zeros((B, n), dtype=np.int64)
        target = np.zeros((B, n), dtype=np.int64)
        weight = np.zeros((B, n))
        for b, (row, start) in enumerate(zip(rows, starts)):
            ids[b, : len(row)] = row
            target[b, : len(row) - 1] = row[1:]
            weight[b, start : len(row) - 1] = 1.0
        logits = self.forward(ids, conditions, training, rng)
        nll = dm.cross_entropy_from_logits(logits, target) * dm.constant(weight.astype(logits.dtype))
        per_seq = nll.value.sum(axis=1)
        return dm.sum(nll), per_seq

    def l2r_loss(self, sequence, condition=None, keywords: Sequence[int] = ()) -> DiffArray:
        cond = None if condition is None else np.asarray(condition)[None]
        kw = [list(keywords)] if keywords else None
        loss, _ = self.batch_loss([np.asarray(sequence)], cond, kw)
        return loss

    def start_cache(self, condition=None, keywords: Sequence[int] = ()) -> "L2RCache":
        return L2RCache(self, condition, keywords)

    def l2r_decode(
        self,
        prefix: Sequence[int] = (BOS,),
        max_len: int = 64,
        rng: np.random.Generator | None = None,
        temperature: float = 1.0,
        greedy: bool = False,
        condition=None,
        keywords: Sequence[int] = (),
    ) -> tuple[list[int], bool]:
        """Sample a continuation of ``prefix`` (which starts with BOS) until EOS.

        Returns the natural-order ids (BOS .. EOS) and a truncation flag.
        """
        if temperature <= 0:
            raise ValueError("temperature must be > 0")
        if not prefix or prefix[0] != BOS:
            raise ValueError("prefix must start with BOS")
        seq = [int(t) for t in prefix]
        cache = self.start_cache(condition, keywords)
        for tok in seq[:-1]:
            cache.push(tok)
        banned = [i for i in range(len(SPECIALS)) if i != EOS]
        while len(seq) < max_len:
            if len(seq) + cache.offset > self.max_positions:
                break
            logits = cache.push(seq[-1]).astype(np.float64)
            logits[banned] = -np.inf
            if greedy:
                nxt = int(np.argmax(logits))
            else:
                z = logits / temperature
                pr = np.exp(z - z.max())
                pr /= pr.sum()
                nxt = int(rng.choice(pr.size, p=pr))
            seq.append(nxt)
            if nxt == EOS:
                return seq, False
        seq.append(EOS)
        return seq, True

    def zero_heads(self) -> None:
        self.params["head.W_tok"].value[...] = 0.0
        self.params["head.b_tok"].value[...] = 0.0


class L2RCache:
    """Per-layer key/value cache for left-to-right decoding in plain numpy."""

    def __init__(self, model: L2RModel, condition=None, keywords: Sequence[int] = ()):
        c = model.config
        self.model = model
        self.p = {k: v.value for k, v in model.params.items()}
        self.keys: list[list[np.ndarray]] = [[] for _ in range(c.n_layers)]
        self.values: list[list[np.ndarray]] = [[] for _ in range(c.n_layers)]
        self.n = 0
        m = c.n_condition_slots
        if m:
            if condition is None:
                raise ConfigError("model expects a condition")
            g = np.asarray(condition, dtype=c.dtype).reshape(-1)
            for vec in np.tanh(g @ self.p["cond.W"] + self.p["cond.b"]).reshape(m, c.d_model):
                self._row(vec)
        for k in list(keywords) + ([SEP] if keywords else []):
            self._row(self.p["emb"][k])
        self.offset = self.n

    def _row(self, x: np.ndarray) -> np.ndarray:
        c = self.model.config
        p = self.p
        H, dh = c.n_heads, c.d_head
        x = x + p["pos"][self.n]
        for l in range(c.n_layers):
            pre = f"layer{l}"
            q = (x @ p[f"{pre}.W_q"]).reshape(H, dh)
            self.keys[l].append(x @ p[f"{pre}.W_k"])
            self.values[l].append(x @ p[f"{pre}.W_v"])
            K = np.stack(self.keys[l]).reshape(-1, H, dh)
            V = np.stack(self.values[l]).reshape(-1, H, dh)
            a = np.einsum("hd,jhd->hj", q, K) / math.sqrt(dh)
            a = np.exp(a - a.max(axis=1, keepdims=True))
            a /= a.sum(axis=1, keepdims=True)
            h = _np_layer_norm(np.einsum("hj,jhd->hd", a, V).reshape(-1) + x, p[f"{pre}.ln1_g"], p[f"{pre}.ln1_b"])
            f = _np_gelu(h @ p[f"{pre}.W1"] + p[f"{pre}.b1"]) @ p[f"{pre}.W2"] + p[f"{pre}.b2"]
            x = _np_layer_norm(h + f, p[f"{pre}.ln2_g"], p[f"{pre}.ln2_b"])
        self.n += 1
        return x

    def push(self, token: int) -> np.ndarray:
        """Append ``token``; returns next-token logits."""
        h = self._row(self.p["emb"][token])
        return h @ self.p["head.W_tok"] + self.p["head.b_tok"]


# ---------------------------------------------------------------- numpy oracle


def _np_layer_norm(x, g, b, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def _np_sinusoid(offset: int, d: int) -> np.ndarray:
    out = np.empty(d)
    for k in range(0, d, 2):
        angle = offset / 10000.0 ** (k / d)
        out[k] = math.sin(angle)
        out[k + 1] = math.cos(angle)
    return out


def _np_gelu(x):
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * (x * x * x))))


def reference_relative_decoder(params: dict, config: InsNetConfig, ids: Sequence[int], rel) -> np.ndarray:
    """Causal relative-position decoder written directly with loops over rows.

    ``rel(i, j)`` gives the signed distance from row ``i`` to column ``j <= i``.
    Shares parameter names with :class:`insnet.model.InsNet`.
    """
    P = {k: (v.value if isinstance(v, DiffArray) else v).astype(np.float64) for k, v in params.items()}
    ids = list(ids)
    n = len(ids)
    H, dh = config.n_heads, config.d_head
    x = P["emb"][ids]
    for l in range(config.n_layers):
        pre = f"layer{l}"
        q = x @ P[f"{pre}.W_q"]
        k = x @ P[f"{pre}.W_kE"]
        v = x @ P[f"{pre}.W_v"]
        u, vb = P[f"{pre}.u"].reshape(-1), P[f"{pre}.v"].reshape(-1)
        out = np.zeros_like(x)
        for i in range(n):
            r = np.stack([_np_sinusoid(rel(i, j), config.d_model) for j in range(i + 1)])
            pk = r @ P[f"{pre}.W_kR"]
            for h in range(H):
                sl = slice(h * dh, (h + 1) * dh)
                score = (q[i, sl] @ k[: i + 1, sl].T + q[i, sl] @ pk[:, sl].T + u[sl] @ k[: i + 1, sl].T + vb[sl] @ pk[:, sl].T) / math.sqrt(dh)
                w = np.exp(score - score.max())
                w /= w.sum()
                out[i, sl] = w @ v[: i + 1, sl]
        h1 = _np_layer_norm(out + x, P[f"{pre}.ln1_g"], P[f"{pre}.ln1_b"])
        f = _np_gelu(h1 @ P[f"{pre}.W1"] + P[f"{pre}.b1"]) @ P[f"{pre}.W2"] + P[f"{pre}.b2"]
        x = _np_layer_norm(h1 + f, P[f"{pre}.ln2_g"], P[f"{pre}.ln2_b"])
    return x


def reference_next_token_logits(params: dict, config: InsNetConfig, context: Sequence[int]) -> np.ndarray:
    """Token logits for appending after the last content token of ``BOS x1..xk``.

    The tokens are processed as ``BOS EOS x1 .. xk`` (EOS committed second).
    Row ``i`` sees BOS at 0, ``x_s`` at ``s`` and EOS just past the newest token.
    """
    ctx = list(context)
    steps = [ctx[0], EOS] + ctx[1:]

    def natural(i, s):
        if s == 0:
            return 0
        return max(i, 1) if s == 1 else s - 1

    def rel(i, j):
        return natural(i, j) - natural(i, i)

    Hs = reference_relative_decoder(params, config, steps, rel)
    P = {k: (v.value if isinstance(v, DiffArray) else v).astype(np.float64) for k, v in params.items()}
    e_new = Hs[-1]
    left = Hs[0] if len(ctx) == 1 else e_new
    slot = np.concatenate([left, Hs[1], e_new]) @ P["slot.W"] + P["slot.b"]
    return slot @ P["head.W_tok"] + P["head.b_tok"]
