"""Insertion orders, offset matrices and relative position embeddings.

An insertion order is a permutation of final absolute positions: ``perm[k]``
is the natural-order position of the token committed at step ``k``.  The
offset matrix has one row per insertion step; row ``i`` holds the signed
distance, measured in the context visible at step ``i``, from the token of
step ``i`` to each earlier token.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

STRATEGIES = ("l2r", "uniform", "keyword_first_l2r", "keyword_first_uniform")


class OrderError(ValueError):
    pass


@dataclass(frozen=True)
class InsertionOrder:
    perm: tuple[int, ...]
    n_conditions: int = 0

    def __post_init__(self):
        perm = tuple(int(p) for p in self.perm)
        object.__setattr__(self, "perm", perm)
        n = len(perm)
        if n == 0:
            raise OrderError("insertion order must be non-empty")
        if sorted(perm) != list(range(n)):
            raise OrderError(f"insertion order is not a bijection on 0..{n - 1}: {perm}")
        if not 0 <= self.n_conditions <= n:
            raise OrderError(f"n_conditions={self.n_conditions} out of range for n={n}")

    @property
    def n(self) -> int:
        return len(self.perm)

    def __len__(self) -> int:
        return len(self.perm)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.perm, dtype=np.int64)

    def is_generation_form(self) -> bool:
        """Conditions first (natural order), then BOS, then EOS."""
        m = self.n_conditions
        if self.n < m + 2:
            return False
        head = self.perm[: m + 2]
        return head == tuple(range(m)) + (m, self.n - 1)

    def prefix(self, t: int) -> "InsertionOrder":
        """The first ``t`` steps relabelled as a bijection on 0..t-1."""
        if not 1 <= t <= self.n:
            raise OrderError(f"prefix length {t} out of range 1..{self.n}")
        ranks = np.argsort(np.argsort(self.perm[:t], kind="stable"), kind="stable")
        return InsertionOrder(tuple(int(r) for r in ranks), min(self.n_conditions, t))

    def serialize(self) -> str:
        return ",".join(str(p) for p in self.perm)

    @classmethod
    def parse(cls, text: str, n_conditions: int = 0) -> "InsertionOrder":
        return cls(tuple(int(x) for x in text.split(",") if x.strip()), n_conditions)


def _as_order(order) -> InsertionOrder:
    if isinstance(order, InsertionOrder):
        return order
    return InsertionOrder(tuple(order))


@dataclass(frozen=True, eq=False)
class OffsetMatrix:
    entries: np.ndarray
    valid: np.ndarray

    @property
    def n(self) -> int:
        return self.entries.shape[0]

    def row(self, i: int) -> list[int]:
        return [int(v) for v in self.entries[i, : i + 1]]

    def rows(self) -> list[list[int]]:
        return [self.row(i) for i in range(self.n)]

    def __eq__(self, other) -> bool:
        if not isinstance(other, OffsetMatrix):
            return NotImplemented
        return (
            self.entries.shape == other.entries.shape
            and bool(np.array_equal(self.valid, other.valid))
            and bool(np.array_equal(np.where(self.valid, self.entries, 0), np.where(other.valid, other.entries, 0)))
        )


def compress_offsets(order) -> OffsetMatrix:
    """Offset matrix of an insertion order by offset compression.

    1. repeat ``perm`` as every row;
    2. flag the strictly upper triangle invalid (later insertions);
    3. replace every valid entry by its rank among the valid entries of its row;
    4. subtract the diagonal entry of each row.
    """
    order = _as_order(order)
    perm = order.as_array()
    n = perm.size
    tiled = np.broadcast_to(perm, (n, n))
    valid = np.tri(n, dtype=bool)
    # invalid entries sort after every valid one; n exceeds any position
    keyed = np.where(valid, tiled, n)
    sorter = np.argsort(keyed, axis=1, kind="stable")
    rank = np.empty_like(sorter)
    np.put_along_axis(rank, sorter, np.broadcast_to(np.arange(n), (n, n)), axis=1)
    entries = rank - np.diagonal(rank)[:, None]
    entries = np.where(valid, entries, 0)
    return OffsetMatrix(entries.astype(np.int64), valid)


def oracle_offsets(order) -> OffsetMatrix:
    """Offset matrix by replaying insertions into an explicit list."""
    order = _as_order(order)
    n = order.n
    entries = np.zeros((n, n), dtype=np.int64)
    context: list[int] = []  # final positions of inserted tokens, in natural order
    for i, pos in enumerate(order.perm):
        bisect.insort(context, pos)
        here = context.index(pos)
        for j in range(i + 1):
            entries[i, j] = context.index(order.perm[j]) - here
    return OffsetMatrix(entries, np.tri(n, dtype=bool))


@dataclass(frozen=True)
class UnshuffleMap:
    t: int
    mapping: tuple[int, ...]

    def apply(self, items: Sequence):
        return [items[k] for k in self.mapping]


def unshuffle_map(order, t: int) -> UnshuffleMap:
    """For each natural-order rank among the first ``t`` steps, the step holding it."""
    order = _as_order(order)
    if not 1 <= t <= order.n:
        raise OrderError(f"prefix length t={t} out of range 1..{order.n}")
    mapping = np.argsort(order.perm[:t], kind="stable")
    return UnshuffleMap(t, tuple(int(k) for k in mapping))


def slot_neighbors(order: InsertionOrder, t: int) -> tuple[np.ndarray, np.ndarray]:
    """Insertion-step indices of the left and right neighbour of every interior slot.

    Condition steps are excluded: slots live between BOS and EOS only.
    """
    m = order.n_conditions
    u = unshuffle_map(order, t).mapping
    content = np.asarray([k for k in u if order.perm[k] >= m], dtype=np.int64)
    return content[:-1], content[1:]


def target_slot(order: InsertionOrder, t: int) -> int:
    """1-based slot index receiving the token of step ``t`` given the prefix of ``t`` steps."""
    m = order.n_conditions
    pos = order.perm[t]
    return sum(1 for p in order.perm[:t] if m <= p < pos)


@dataclass(frozen=True)
class SlotPlan:
    """Per-prediction-step slot geometry of one ordered sequence.

    Prediction ``r`` uses the prefix of ``t = first + r`` steps.  The last
    prediction (``t == n``) is the termination step.
    """

    first: int
    left: np.ndarray  # (T, S) step index of left neighbour, padded with 0
    right: np.ndarray  # (T, S)
    slot_mask: np.ndarray  # (T, S) True for real slots
    target: np.ndarray  # (T,) 0 for termination, else 1-based slot
    target_left: np.ndarray  # (T,) step index of the target slot's left neighbour
    target_right: np.ndarray  # (T,)
    target_step: np.ndarray  # (T,) step index whose token is predicted (-1 at termination)


def plan_slots(order: InsertionOrder) -> SlotPlan:
    """Vectorized slot neighbours for every prediction step of ``order``."""
    perm = order.as_array()
    n = perm.size
    m = order.n_conditions
    first = m + 2
    if n < first:
        raise OrderError("order shorter than conditions + BOS + EOS")
    ts = np.arange(first, n + 1)
    T = ts.size
    s_max = n - m - 1
    # row r: positions of the first t content steps, later steps pushed to the end
    big = n + 1
    key = np.where((np.arange(n)[None, :] < ts[:, None]) & (perm[None, :] >= m), perm[None, :], big)
    srt = np.argsort(key, axis=1, kind="stable")[:, : n - m]
    n_slots = ts - m - 1
    cols = np.arange(s_max)
    slot_mask = cols[None, :] < n_slots[:, None]
    left = np.where(slot_mask, srt[:, :s_max], 0)
    right = np.where(slot_mask, srt[:, 1 : s_max + 1], 0)

    target = np.zeros(T, dtype=np.int64)
    tleft = np.zeros(T, dtype=np.int64)
    tright = np.zeros(T, dtype=np.int64)
    tstep = np.full(T, -1, dtype=np.int64)
    if T > 1:
        steps = ts[:-1]
        pos = perm[steps]
        prior = (np.arange(n)[None, :] < steps[:, None]) & (perm[None, :] >= m) & (perm[None, :] < pos[:, None])
        tgt = prior.sum(axis=1)
        target[:-1] = tgt
        rr = np.arange(T - 1)
        tleft[:-1] = left[rr, tgt - 1]
        tright[:-1] = right[rr, tgt - 1]
        tstep[:-1] = steps
    return SlotPlan(first, left, right, slot_mask, target, tleft, tright, tstep)


# ---------------------------------------------------------------- embeddings and masks


def relative_embedding(offset: int, d_model: int, max_abs_offset: int | None = None) -> np.ndarray:
    """Fixed sinusoid of a signed offset: ``sin`` at even, ``cos`` at odd indices."""
    if max_abs_offset is not None and abs(offset) > max_abs_offset:
        raise OrderError(f"offset {offset} exceeds max_abs_offset={max_abs_offset}")
    return _sinusoid(np.asarray([offset], dtype=np.float64), d_model)[0]


def _sinusoid(offsets: np.ndarray, d_model: int) -> np.ndarray:
    k = np.arange(0, d_model, 2, dtype=np.float64)
    freq = 1.0 / (10000.0 ** (k / d_model))
    angles = offsets[:, None] * freq[None, :]
    out = np.zeros((offsets.size, d_model), dtype=np.float64)
    out[:, 0::2] = np.sin(angles)
    out[:, 1::2] = np.cos(angles[:, : d_model // 2])
    return out


@dataclass
class RelEmbeddingTable:
    d_model: int
    max_abs_offset: int
    table: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        span = np.arange(-self.max_abs_offset, self.max_abs_offset + 1, dtype=np.float64)
        self.table = _sinusoid(span, self.d_model)

    def index(self, offsets) -> np.ndarray:
        """Row indices into :attr:`table` for an array of signed offsets."""
        offsets = np.asarray(offsets, dtype=np.int64)
        if offsets.size and np.abs(offsets).max() > self.max_abs_offset:
            raise OrderError(f"offset {int(np.abs(offsets).max())} exceeds max_abs_offset={self.max_abs_offset}")
        return offsets + self.max_abs_offset

    def lookup(self, offset: int) -> np.ndarray:
        return self.table[self.index(offset)]


def attention_mask(t_total: int) -> np.ndarray:
    """Step ``i`` attends to steps ``0..i``."""
    if t_total < 1:
        raise OrderError("attention mask needs at least one step")
    return np.tri(t_total, dtype=bool)


# ---------------------------------------------------------------- order sampling


def sample_order(
    strategy: str,
    n: int,
    keyword_positions: Iterable[int] | None = None,
    rng: np.random.Generator | None = None,
    n_conditions: int = 0,
) -> InsertionOrder:
    """Sample a generation-form insertion order over ``n`` natural positions.

    Positions ``0..n_conditions-1`` are condition slots, ``n_conditions`` is
    BOS and ``n - 1`` is EOS.
    """
    if strategy not in STRATEGIES:
        raise OrderError(f"unknown order strategy {strategy!r}; expected one of {STRATEGIES}")
    m = n_conditions
    bos, eos = m, n - 1
    if n < m + 2:
        raise OrderError(f"n={n} too small for {m} conditions plus BOS/EOS")
    head = list(range(m)) + [bos, eos]
    keywords: list[int] = []
    if strategy.startswith("keyword_first"):
        if keyword_positions is None:
            raise OrderError(f"strategy {strategy} needs keyword positions")
        keywords = [int(k) for k in keyword_positions]
        if len(set(keywords)) != len(keywords):
            raise OrderError(f"duplicated keyword positions: {keywords}")
        for k in keywords:
            if not bos < k < eos:
                raise OrderError(f"keyword position {k} outside interior range {bos + 1}..{eos - 1}")
        keywords.sort()
    taken = set(keywords)
    rest = [p for p in range(bos + 1, eos) if p not in taken]
    if strategy in ("uniform", "keyword_first_uniform") and rest:
        if rng is None:
            raise OrderError(f"strategy {strategy} needs an rng")
        rest = [rest[i] for i in rng.permutation(len(rest))]
    return InsertionOrder(tuple(head + keywords + rest), m)
