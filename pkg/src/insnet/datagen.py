"""Synthetic datasets: random sequences, keyword-annotated toy stories and a
single-object compositional captioning task with a built-in rasterizer."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import diffmath as dm

PAD, BOS, EOS, UNK, SEP = 0, 1, 2, 3, 4
SPECIALS = ("<pad>", "<bos>", "<eos>", "<unk>", "<sep>")

COLORS = ("gray", "red", "blue", "green", "brown", "purple", "cyan", "yellow")
SHAPES = ("cube", "sphere", "cylinder")
SPLIT_A_CUBE = ("gray", "blue", "brown", "yellow")
SPLIT_A_CYLINDER = ("red", "green", "purple", "cyan")
SPLIT_COUNTS = {"A_train": 2000, "A_dev": 500, "B_test": 500}

RGB = {
    "gray": (0.55, 0.55, 0.55),
    "red": (0.9, 0.1, 0.1),
    "blue": (0.1, 0.2, 0.9),
    "green": (0.1, 0.8, 0.2),
    "brown": (0.55, 0.35, 0.1),
    "purple": (0.6, 0.15, 0.75),
    "cyan": (0.1, 0.85, 0.85),
    "yellow": (0.95, 0.9, 0.1),
}
GRID = 24
IMAGE_DIM = GRID * GRID * 3


class Vocab:
    """Closed whitespace vocabulary; ids 0..4 are reserved."""

    def __init__(self, words: Iterable[str]):
        self.itos: list[str] = list(SPECIALS)
        for w in words:
            if w not in self.itos:
                self.itos.append(w)
        self.stoi = {w: i for i, w in enumerate(self.itos)}

    def __len__(self) -> int:
        return len(self.itos)

    def encode(self, tokens: Sequence[str] | str, sentinels: bool = True) -> np.ndarray:
        if isinstance(tokens, str):
            tokens = tokens.split()
        ids = [self.stoi.get(t, UNK) for t in tokens]
        if sentinels:
            ids = [BOS] + ids + [EOS]
        return np.asarray(ids, dtype=np.int64)

    def decode(self, ids: Iterable[int], strip: bool = True) -> list[str]:
        out = []
        for i in ids:
            i = int(i)
            if strip and i in (PAD, BOS, EOS):
                continue
            out.append(self.itos[i] if 0 <= i < len(self.itos) else SPECIALS[UNK])
        return out

    @classmethod
    def numeric(cls, vocab_size: int) -> "Vocab":
        return cls(str(i) for i in range(len(SPECIALS), vocab_size))


@dataclass
class SceneSpec:
    shape: str
    color: str
    jitter_seed: int

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}")
        if self.color not in COLORS:
            raise ValueError(f"unknown color {self.color!r}")


@dataclass
class Example:
    ids: np.ndarray  # natural order, BOS..EOS
    keywords: tuple[int, ...] = ()
    scene: SceneSpec | None = None
    image: np.ndarray | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.ids)

    def keyword_ids(self) -> list[int]:
        return [int(self.ids[k]) for k in self.keywords]


# ---------------------------------------------------------------- random sequences


def gen_random_sequences(vocab_size: int, length: int, count: int, seed: int) -> list[Example]:
    """``count`` i.i.d. uniform sequences of ``length`` content tokens."""
    if length < 1:
        raise ValueError("length must be >= 1")
    if vocab_size <= len(SPECIALS):
        raise ValueError(f"vocab_size must exceed the {len(SPECIALS)} reserved ids")
    rng = np.random.default_rng(seed)
    body = rng.integers(len(SPECIALS), vocab_size, size=(count, length))
    return [Example(np.concatenate([[BOS], row, [EOS]]).astype(np.int64)) for row in body]


# ---------------------------------------------------------------- toy stories

NAMES = {"tom": "he", "sam": "he", "max": "he", "ben": "he", "anna": "she", "lucy": "she", "mia": "she", "kate": "she"}
VERBS = ("found", "bought", "lost", "painted", "carried", "cleaned", "opened", "dropped", "fixed", "hid")
NOUNS = ("ball", "book", "cake", "box", "kite", "hat", "lamp", "key", "map", "cup")
ADJS = ("red", "old", "small", "heavy", "shiny", "broken", "new", "soft")
PLACES = ("park", "school", "kitchen", "garden", "shop", "beach")
EMOTIONS = ("happy", "sad", "proud", "tired", "angry", "excited")
FUNCTION_WORDS = ("the", "a", "then", "at", "was", "very", "felt", "about", "it", ".", "he", "she")


def story_vocab() -> Vocab:
    words = list(FUNCTION_WORDS) + list(NAMES) + list(VERBS) + list(NOUNS) + list(ADJS) + list(PLACES) + list(EMOTIONS)
    return Vocab(words)


def _pick(rng, options) -> tuple[str, float]:
    return options[int(rng.integers(len(options)))], -math.log(len(options))


def _clause(rng, name: str, pron: str, first: bool) -> tuple[list[str], list[int], float]:
    """One clause, the indices of its content words and its log-probability."""
    lp = 0.0
    if first:
        kind, l = _pick(rng, ("A", "B"))
    else:
        kind, l = _pick(rng, ("C", "D", "E", "F"))
    lp += l
    words: list[str] = []
    content: list[int] = []

    def put(w, is_content=False):
        if is_content:
            content.append(len(words))
        words.append(w)

    def choose(options):
        nonlocal lp
        w, l = _pick(rng, options)
        lp += l
        return w

    if kind == "A":
        put(name, True); put(choose(VERBS), True); put("the"); put(choose(NOUNS), True); put(".")
    elif kind == "B":
        put(name, True); put(choose(VERBS), True); put("a"); put(choose(ADJS), True); put(choose(NOUNS), True); put(".")
    elif kind == "C":
        put("then"); put(pron); put(choose(VERBS), True); put("the"); put(choose(NOUNS), True); put(".")
    elif kind == "D":
        put(pron); put(choose(VERBS), True); put("the"); put(choose(NOUNS), True)
        put("at"); put("the"); put(choose(PLACES), True); put(".")
    elif kind == "E":
        put("the"); put(choose(NOUNS), True); put("was"); put("very"); put(choose(ADJS), True); put(".")
    else:
        put(pron); put("felt"); put(choose(EMOTIONS), True); put("about"); put("it"); put(".")
    return words, content, lp


@dataclass
class StoryStats:
    derivation_nll_per_token: float
    unigram_nll_per_token: float


def _in_order_positions(tokens: Sequence[str], keywords: Sequence[str], offset: int = 1) -> tuple[int, ...] | None:
    """Leftmost in-order match of ``keywords`` inside ``tokens``."""
    out, start = [], 0
    for kw in keywords:
        try:
            j = list(tokens).index(kw, start)
        except ValueError:
            return None
        out.append(j + offset)
        start = j + 1
    return tuple(out)


def gen_toy_stories(count: int, seed: int, with_stats: bool = False):
    """Templated stories of 20..60 tokens, one keyword per clause.

    Keyword positions are the leftmost in-order match of the keyword words, the
    same rule used when reading a story file.
    """
    vocab = story_vocab()
    rng = np.random.default_rng(seed)
    examples: list[Example] = []
    total_lp = 0.0
    total_tokens = 0
    for _ in range(count):
        name, l_name = _pick(rng, tuple(NAMES))
        pron = NAMES[name]
        n_clauses = int(rng.integers(4, 8))
        lp = l_name - math.log(4)
        tokens: list[str] = []
        keywords: list[str] = []
        for c in range(n_clauses):
            words, content, l = _clause(rng, name, pron, first=c == 0)
            lp += l
            kw = words[content[int(rng.integers(len(content)))]]
            keywords.append(kw)
            tokens.extend(words)
        positions = _in_order_positions(tokens, keywords)
        examples.append(Example(vocab.encode(tokens), positions))
        total_lp += lp
        total_tokens += len(tokens) + 1  # + EOS
    if not with_stats:
        return examples
    counts = np.zeros(len(vocab))
    for ex in examples:
        np.add.at(counts, ex.ids[1:], 1)
    probs = counts / counts.sum()
    uni = -sum(np.log(probs[ex.ids[1:]]).sum() for ex in examples) / total_tokens
    return examples, StoryStats(-total_lp / total_tokens, float(uni))


# ---------------------------------------------------------------- scenes and captions


def render_scene(spec: SceneSpec, noise: float = 0.05) -> np.ndarray:
    """24x24x3 intensity grid with the object's glyph drawn in its color."""
    rng = np.random.default_rng(spec.jitter_seed)
    dy, dx = rng.integers(-3, 4, size=2)
    cy, cx = 11.5 + dy, 11.5 + dx
    yy, xx = np.mgrid[0:GRID, 0:GRID]
    if spec.shape == "cube":
        glyph = (np.abs(yy - cy) <= 4) & (np.abs(xx - cx) <= 4)
    elif spec.shape == "sphere":
        glyph = (yy - cy) ** 2 + (xx - cx) ** 2 <= 4.8**2
    else:
        glyph = (np.abs(yy - cy) <= 6.5) & (np.abs(xx - cx) <= 2)
    grid = np.zeros((GRID, GRID, 3))
    grid[glyph] = RGB[spec.color]
    if noise > 0:
        grid = grid + rng.normal(0.0, noise, size=grid.shape)
    return grid


def encode_condition(grid, W, b, n_slots: int) -> dm.DiffArray:
    """Affine map + tanh from flattened grids (B, 1728) to (B, n_slots, d)."""
    g = np.asarray(grid)
    g = g.reshape(g.shape[0], -1)
    x = dm.constant(g.astype(W.dtype, copy=False))
    h = dm.tanh(x @ W + b)
    return dm.reshape(h, (g.shape[0], n_slots, -1))


CAPTION_TEMPLATES = (
    "there is a {color} {shape} in the picture .",
    "we have a {color} object in the shape of a {shape} .",
    "a {shape} is placed on the table and it is {color} .",
)


def caption_vocab() -> Vocab:
    words = set()
    for t in CAPTION_TEMPLATES:
        words.update(w for w in t.split() if not w.startswith("{"))
    return Vocab(sorted(words) + list(COLORS) + list(SHAPES))


def allowed_colors(shape: str, split: str) -> tuple[str, ...]:
    if shape == "sphere":
        return COLORS
    swap = split.startswith("B")
    if shape == "cube":
        return SPLIT_A_CYLINDER if swap else SPLIT_A_CUBE
    return SPLIT_A_CUBE if swap else SPLIT_A_CYLINDER


_SPLIT_SALT = {"A_train": 11, "A_dev": 23, "B_test": 37}


def gen_cogent_caption(split: str, count: int | None = None, seed: int = 0, noise: float = 0.05) -> list[Example]:
    if split not in SPLIT_COUNTS:
        raise ValueError(f"unknown split {split!r}; expected one of {tuple(SPLIT_COUNTS)}")
    count = SPLIT_COUNTS[split] if count is None else count
    vocab = caption_vocab()
    rng = np.random.default_rng([seed, _SPLIT_SALT[split]])
    out = []
    for _ in range(count):
        shape = SHAPES[int(rng.integers(3))]
        colors = allowed_colors(shape, split)
        color = colors[int(rng.integers(len(colors)))]
        spec = SceneSpec(shape, color, int(rng.integers(2**31)))
        template = CAPTION_TEMPLATES[int(rng.integers(len(CAPTION_TEMPLATES)))]
        caption = template.format(color=color, shape=shape)
        out.append(caption_example(spec, caption, vocab, noise))
    return out


def caption_example(spec: SceneSpec, caption: str, vocab: Vocab | None = None, noise: float = 0.05) -> Example:
    vocab = vocab or caption_vocab()
    image = render_scene(spec, noise).reshape(-1)
    return Example(vocab.encode(caption), (), spec, image)


def extract_attributes(caption) -> tuple[str | None, str | None]:
    tokens = caption.split() if isinstance(caption, str) else list(caption)
    color = next((t for t in tokens if t in COLORS), None)
    shape = next((t for t in tokens if t in SHAPES), None)
    return color, shape


# ---------------------------------------------------------------- dataset files


def write_dataset(path, task: str, examples: Sequence[Example], vocab: Vocab) -> None:
    lines = []
    for ex in examples:
        text = " ".join(vocab.decode(ex.ids))
        if task == "stories":
            kws = " ".join(vocab.itos[i] for i in ex.keyword_ids())
            lines.append(f"{kws}\t{text}")
        elif task == "captions":
            s = ex.scene
            lines.append(f"{s.shape} {s.color} {s.jitter_seed}\t{text}")
        elif task == "random":
            lines.append(" ".join(str(int(i)) for i in ex.ids[1:-1]))
        else:
            raise ValueError(f"unknown task {task!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_dataset(path, task: str, vocab: Vocab | None = None, noise: float = 0.05) -> list[Example]:
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        if task == "random":
            body = [int(x) for x in line.split()]
            out.append(Example(np.asarray([BOS] + body + [EOS], dtype=np.int64)))
            continue
        head, _, text = line.partition("\t")
        tokens = text.split()
        if task == "stories":
            vocab = vocab or story_vocab()
            positions = _in_order_positions(tokens, head.split())
            if positions is None:
                raise ValueError(f"{path}:{lineno}: keywords do not occur in order in the text")
            out.append(Example(vocab.encode(tokens), positions))
        elif task == "captions":
            shape, color, jitter = head.split()
            out.append(caption_example(SceneSpec(shape, color, int(jitter)), text, vocab, noise))
        else:
            raise ValueError(f"unknown task {task!r}")
    return out
