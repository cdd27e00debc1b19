"""Optimization loop, learning-rate schedule, checkpoints, metrics log and evaluation."""

from __future__ import annotations

import csv
import json
import math
import struct
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import diffmath as dm
from .baselines import ITVanilla, L2RModel
from .datagen import BOS, EOS, Example
from .model import ConfigError, InsNet, InsNetConfig, prepare_batch
from .position import STRATEGIES, sample_order

MODEL_KINDS = ("insnet", "it_vanilla", "l2r")
MAGIC = b"INSN"
FORMAT_VERSION = 1
_DTYPE_TAGS = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
METRICS_HEADER = ("iter", "split", "metric", "value", "wallclock_s")


class TrainingError(RuntimeError):
    pass


class IntegrityError(ValueError):
    """Malformed checkpoint; ``field`` names the first bad field."""

    def __init__(self, field_name: str, detail: str):
        super().__init__(f"checkpoint field {field_name!r}: {detail}")
        self.field = field_name


@dataclass
class TrainConfig:
    lr: float = 2e-4
    warmup_iters: int = 100
    total_iters: int = 3000
    batch_size: int = 32
    weight_decay: float = 0.01
    grad_clip_norm: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    order_strategy: str = "uniform"
    eval_interval: int = 100
    it_chunk_tokens: int = 8192

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0 <= self.warmup_iters <= self.total_iters:
            raise ConfigError("need 0 <= warmup_iters <= total_iters")
        if self.order_strategy not in STRATEGIES:
            raise ConfigError(f"unknown order strategy {self.order_strategy!r}")


def lr_at(it: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``cfg.lr`` then linear decay to 0 at ``total_iters``."""
    warm = it / cfg.warmup_iters if cfg.warmup_iters else 1.0
    if cfg.total_iters == cfg.warmup_iters:
        decay = 1.0
    else:
        decay = 1.0 - (it - cfg.warmup_iters) / (cfg.total_iters - cfg.warmup_iters)
    return cfg.lr * max(0.0, min(warm, decay))


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: dict[str, dm.DiffArray],
    grads: dict[str, np.ndarray],
    moments: AdamState,
    lr_t: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
    clip: float | None = None,
) -> float:
    """Clip by global norm, apply decoupled weight decay, then one Adam update.

    Weight decay only touches matrices (ndim >= 2). Returns the pre-clip norm.
    """
    bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise TrainingError(f"non-finite gradient in {bad[:5]}{' ...' if len(bad) > 5 else ''}")
    norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    factor = clip / norm if clip and norm > clip else 1.0
    b1, b2 = betas
    moments.t += 1
    c1 = 1.0 - b1**moments.t
    c2 = 1.0 - b2**moments.t
    for name in sorted(grads):
        p = params[name]
        g = grads[name] * factor
        m = moments.m.get(name)
        v = moments.v.get(name)
        if m is None:
            m = np.zeros_like(p.value)
            v = np.zeros_like(p.value)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        moments.m[name], moments.v[name] = m.astype(p.dtype), v.astype(p.dtype)
        value = p.value
        if weight_decay and value.ndim >= 2:
            value = value - lr_t * weight_decay * value
        p.value = (value - lr_t * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
    return norm


# ---------------------------------------------------------------- models and losses


def build_model(kind: str, config: InsNetConfig, rng: np.random.Generator):
    if kind == "insnet":
        return InsNet(config, rng=rng)
    if kind == "it_vanilla":
        return ITVanilla(config, rng=rng)
    if kind == "l2r":
        return L2RModel(config, rng=rng)
    raise ConfigError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}")


def _conditions(examples: Sequence[Example], config: InsNetConfig):
    if not config.n_condition_slots:
        return None
    if any(ex.image is None for ex in examples):
        raise ConfigError("model has condition slots but an example carries no image")
    return np.stack([ex.image for ex in examples])


def sample_orders(examples: Sequence[Example], strategy: str, rng, n_conditions: int = 0):
    orders = []
    for ex in examples:
        kws = None
        if strategy.startswith("keyword_first"):
            if not ex.keywords:
                raise ConfigError(f"strategy {strategy} needs keyword annotations in the dataset")
            kws = [k + n_conditions for k in ex.keywords]
        orders.append(sample_order(strategy, len(ex.ids) + n_conditions, kws, rng, n_conditions))
    return orders


def n_events(examples: Sequence[Example]) -> int:
    """Predictions per batch: every insertion plus termination, i.e. len - 1 per sequence."""
    return sum(len(ex.ids) - 1 for ex in examples)


def batch_objective(
    model,
    examples: Sequence[Example],
    strategy: str,
    rng,
    training: bool,
    grad: bool,
    it_chunk_tokens: int = 8192,
) -> float:
    """Summed NLL of ``examples``; with ``grad`` also leaves d(mean NLL)/dθ in ``.grad``.

    All randomness (orders, dropout) is drawn from ``rng``.
    """
    cfg = model.config
    events = n_events(examples)
    cond = _conditions(examples, cfg)
    seqs = [ex.ids for ex in examples]

    def run(loss_fn):
        if not grad:
            return float(loss_fn().value)
        with dm.Tape() as tape:
            loss = loss_fn()
            tape.backward(dm.scale(loss, 1.0 / events))
        return float(loss.value)

    if model.kind == "insnet":
        orders = sample_orders(examples, strategy, rng, cfg.n_condition_slots)
        batch = prepare_batch(seqs, orders, cond)
        return run(lambda: model.batch_loss(batch, training, rng)[0])
    if model.kind == "l2r":
        kws = [ex.keyword_ids() for ex in examples] if strategy.startswith("keyword_first") else None
        if kws is not None and any(not k for k in kws):
            raise ConfigError(f"strategy {strategy} needs keyword annotations in the dataset")
        return run(lambda: model.batch_loss(seqs, cond, kws, training, rng)[0])
    if model.kind == "it_vanilla":
        orders = sample_orders(examples, strategy, rng)
        total = 0.0
        for chunk in model.context_chunks(seqs, orders, it_chunk_tokens):
            total += run(lambda c=chunk: model.chunk_loss(c, training, rng))
        return total
    raise ConfigError(f"unknown model kind {model.kind!r}")


def evaluate_nll(model, examples: Sequence[Example], strategy: str = "l2r", seed: int = 0, batch_size: int = 32) -> float:
    """Mean NLL per prediction under orders drawn from a fixed seed (no dropout)."""
    if not examples:
        raise ConfigError("empty evaluation set")
    rng = np.random.default_rng(seed)
    total = 0.0
    for a in range(0, len(examples), batch_size):
        total += batch_objective(model, examples[a : a + batch_size], strategy, rng, training=False, grad=False)
    return total / n_events(examples)


def generate(model, examples: Sequence[Example], keywords: bool, controls=None, rng=None, greedy: bool = False) -> list[list[int]]:
    """Decoded ids (no sentinels) per example, optionally seeded with its keywords."""
    from .decoding import DecodeControls, decode

    out = []
    m = model.config.n_condition_slots
    for ex in examples:
        kws = ex.keyword_ids() if keywords else []
        cond = ex.image if m else None
        if model.kind == "insnet":
            ctl = controls or DecodeControls(greedy=greedy, max_steps=model.config.max_len)
            out.append(decode(model, cond, kws, ctl, rng).tokens)
        elif model.kind == "l2r":
            temp = controls.token_temperature if controls is not None else 1.0
            ids, _ = model.l2r_decode((BOS,), model.config.max_len, rng, temp, greedy or bool(controls and controls.greedy), cond, kws)
            out.append([t for t in ids if t not in (BOS, EOS)])
        else:
            raise ConfigError(f"decoding is not implemented for {model.kind}")
    return out


def evaluate(model, dataset: Sequence[Example], metrics: Sequence[str] = ("nll",), vocab=None, controls=None, seed: int = 0, strategy: str = "l2r") -> dict[str, float]:
    """Metric table: ``nll``, ``bleu`` (1..4), ``incorporation`` and ``attributes``.

    Decoding metrics seed insertion models with the example keywords (or the
    L2R model with a keyword prefix). ``bleu`` without explicit controls uses
    forced expansion calibrated on ``dataset``.
    """
    from .decoding import DecodeControls, calibrate_termination
    from .metrics import MetricError, attribute_accuracy, corpus_bleu, incorporation_rate

    if not dataset:
        raise MetricError("empty evaluation set")
    rng = np.random.default_rng(seed)
    table: dict[str, float] = {}
    for metric in metrics:
        if metric == "nll":
            table["nll"] = evaluate_nll(model, dataset, strategy, seed)
        elif metric in ("bleu", "incorporation"):
            ctl = controls
            if ctl is None and model.kind == "insnet":
                theta = calibrate_termination(model, dataset)
                ctl = DecodeControls(termination="forced_min_loglik", theta_term=theta, max_steps=model.config.max_len)
            outs = generate(model, dataset, True, ctl, rng)
            kws = [ex.keyword_ids() for ex in dataset]
            if metric == "incorporation":
                table["incorporation"] = incorporation_rate(outs, kws)
            else:
                if vocab is None:
                    raise MetricError("bleu needs a vocabulary")
                hyps = [vocab.decode(o) for o in outs]
                refs = [" ".join(vocab.decode(ex.ids)) for ex in dataset]
                for n in range(1, 5):
                    table[f"bleu{n}"] = corpus_bleu(hyps, refs, n)
        elif metric == "attributes":
            if vocab is None:
                raise MetricError("attribute accuracy needs a vocabulary")
            caps = [vocab.decode(o) for o in generate(model, dataset, False, None, rng, greedy=True)]
            table.update(attribute_accuracy(caps, [(ex.scene.color, ex.scene.shape) for ex in dataset]))
        else:
            raise ConfigError(f"unknown metric {metric!r}")
    return table


# ---------------------------------------------------------------- metrics log


@dataclass
class MetricsLog:
    rows: list[tuple] = field(default_factory=list)
    start: float = field(default_factory=time.monotonic)

    def add(self, it: int, split: str, metric: str, value: float) -> None:
        self.rows.append((it, split, metric, float(value), time.monotonic() - self.start))

    def write(self, path) -> None:
        write_metrics(path, self.rows)

    def values(self, split: str, metric: str) -> list[float]:
        return [r[3] for r in self.rows if r[1] == split and r[2] == metric]


def write_metrics(path, rows: Sequence[tuple]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for it, split, metric, value, wall in rows:
            w.writerow([it, split, metric, repr(float(value)), f"{wall:.6f}"])


def read_metrics(path) -> list[dict]:
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------- training loop


@dataclass
class TrainResult:
    model: object
    log: MetricsLog
    iteration: int
    moments: AdamState
    rng: np.random.Generator
    config: TrainConfig
    checkpoint: Path | None = None


def train(
    kind: str,
    train_data: Sequence[Example],
    model_config: InsNetConfig,
    train_config: TrainConfig,
    dev_data: Sequence[Example] | None = None,
    out_dir=None,
    resume: "Checkpoint | None" = None,
    stop_after: int | None = None,
    progress: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Train ``kind`` on ``train_data``; one seeded generator drives init, batches, orders and dropout.

    ``stop_after`` ends the run early (after that iteration) without changing
    the schedule, so a resumed run continues exactly where it left off.
    """
    if not train_data:
        raise ConfigError("training set is empty")
    cfg = train_config
    if resume is not None:
        model, cfg, moments, rng, start = restore(resume)
        kind = model.kind
    else:
        rng = np.random.default_rng(cfg.seed)
        model = build_model(kind, model_config, rng)
        moments, start = AdamState(), 0
    with dm.precision(model.config.precision):
        log = MetricsLog()
        end = cfg.total_iters if stop_after is None else min(stop_after, cfg.total_iters)
        N = len(train_data)
        it = start
        for it in range(start + 1, end + 1):
            idx = rng.choice(N, size=min(cfg.batch_size, N), replace=False)
            batch = [train_data[i] for i in idx]
            for p in model.params.values():
                p.grad = None
            total = batch_objective(model, batch, cfg.order_strategy, rng, True, True, cfg.it_chunk_tokens)
            loss = total / n_events(batch)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss {loss} at iteration {it}")
            grads = {k: p.grad for k, p in model.params.items() if p.grad is not None}
            lr = lr_at(it, cfg)
            norm = adam_step(model.params, grads, moments, lr, (cfg.beta1, cfg.beta2), cfg.eps, cfg.weight_decay, cfg.grad_clip_norm)
            log.add(it, "train", "loss", loss)
            log.add(it, "train", "lr", lr)
            log.add(it, "train", "grad_norm", norm)
            if dev_data and (it % cfg.eval_interval == 0 or it == end):
                log.add(it, "dev", "nll", evaluate_nll(model, dev_data, _eval_strategy(cfg.order_strategy), cfg.seed))
            if progress is not None:
                progress(it, loss)
    result = TrainResult(model, log, it, moments, rng, cfg)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        log.write(out / "metrics.csv")
        result.checkpoint = out / "checkpoint.insn"
        save_checkpoint(result.checkpoint, model, cfg, it, rng, moments)
    return result


def _eval_strategy(strategy: str) -> str:
    return "keyword_first_l2r" if strategy.startswith("keyword_first") else strategy


# ---------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    version: int
    header: dict[str, str]
    arrays: dict[str, np.ndarray]

    @property
    def kind(self) -> str:
        return self.header["kind"]

    @property
    def iteration(self) -> int:
        return int(self.header["iteration"])


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_fields(cls, prefix: str, header: dict[str, str]):
    kwargs = {}
    for f in fields(cls):
        key = f"{prefix}.{f.name}"
        if key not in header:
            raise IntegrityError(key, "missing from header")
        raw = header[key]
        default = f.default
        try:
            kwargs[f.name] = type(default)(raw) if not isinstance(default, str) else raw
        except ValueError as exc:
            raise IntegrityError(key, f"bad value {raw!r}") from exc
    return cls(**kwargs)


def _model_shapes(kind: str, config: InsNetConfig) -> dict[str, tuple]:
    model = build_model(kind, config, np.random.default_rng(0))
    return {k: p.shape for k, p in model.params.items()}


def save_checkpoint(path, model, train_config: TrainConfig, iteration: int, rng: np.random.Generator, moments: AdamState) -> None:
    header = {"kind": model.kind, "iteration": str(iteration), "adam.t": str(moments.t)}
    header.update({f"model.{k}": _fmt(v) for k, v in model.config.to_dict().items()})
    header.update({f"train.{k}": _fmt(v) for k, v in asdict(train_config).items()})
    header["rng"] = json.dumps(rng.bit_generator.state, sort_keys=True)
    arrays = {k: p.value for k, p in model.params.items()}
    for k in moments.m:
        arrays[f"adam.m/{k}"] = moments.m[k]
        arrays[f"adam.v/{k}"] = moments.v[k]
    header["arrays"] = str(len(arrays))
    out = bytearray(MAGIC)
    out.append(FORMAT_VERSION)
    text = "".join(f"{k}={v}\n" for k, v in sorted(header.items())) + "\n"
    out += text.encode("utf-8")
    for name in sorted(arrays):
        a = np.asarray(arrays[name])
        tag = {np.dtype("float32"): "f32", np.dtype("float64"): "f64"}.get(a.dtype)
        if tag is None:
            raise TrainingError(f"cannot serialize dtype {a.dtype} of {name}")
        raw = name.encode("utf-8")
        out += struct.pack("<I", len(raw)) + raw + tag.encode("ascii")
        out += struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape)
        out += np.ascontiguousarray(a, dtype=_DTYPE_TAGS[tag]).tobytes()
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path) -> Checkpoint:
    """Parse and fully validate a checkpoint before returning anything."""
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise IntegrityError("magic", f"expected {MAGIC!r}, found {data[:4]!r}")
    if len(data) < 5 or data[4] != FORMAT_VERSION:
        raise IntegrityError("version", f"unsupported version {data[4] if len(data) > 4 else None}")
    end = data.find(b"\n\n", 5)
    if end < 0:
        raise IntegrityError("header", "not terminated by a blank line")
    header: dict[str, str] = {}
    try:
        text = data[5:end].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise IntegrityError("header", "not valid UTF-8") from exc
    for line in text.split("\n"):
        key, sep, value = line.partition("=")
        if not sep:
            raise IntegrityError("header", f"line without '=': {line!r}")
        header[key] = value
    for key in ("kind", "iteration", "arrays", "rng", "adam.t"):
        if key not in header:
            raise IntegrityError(key, "missing from header")
    if header["kind"] not in MODEL_KINDS:
        raise IntegrityError("kind", f"unknown model kind {header['kind']!r}")
    try:
        config = _parse_fields(InsNetConfig, "model", header)
    except ConfigError as exc:
        raise IntegrityError("model", str(exc)) from exc
    shapes = _model_shapes(header["kind"], config)
    expected = dict(shapes)
    pos = end + 2
    arrays: dict[str, np.ndarray] = {}
    def need(at, n, what):
        if at + n > len(data):
            raise IntegrityError(what, "truncated")

    for i in range(int(header["arrays"])):

        need(pos, 4, f"array[{i}].name_length")
        (nlen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        need(pos, nlen, f"array[{i}].name")
        try:
            name = data[pos : pos + nlen].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise IntegrityError(f"array[{i}].name", "not valid UTF-8") from exc
        pos += nlen
        base = name.split("/", 1)[1] if name.startswith(("adam.m/", "adam.v/")) else name
        if base not in shapes:
            raise IntegrityError(f"array[{i}].name", f"unexpected array {name!r}")
        need(pos, 3, f"{name}.dtype")
        tag = data[pos : pos + 3].decode("ascii", "replace")
        if tag not in _DTYPE_TAGS:
            raise IntegrityError(f"{name}.dtype", f"unknown tag {tag!r}")
        pos += 3
        need(pos, 4, f"{name}.rank")
        (rank,) = struct.unpack_from("<I", data, pos)
        pos += 4
        if rank != len(shapes[base]):
            raise IntegrityError(f"{name}.rank", f"expected {len(shapes[base])}, found {rank}")
        need(pos, 8 * rank, f"{name}.extents")
        extents = struct.unpack_from(f"<{rank}Q", data, pos)
        pos += 8 * rank
        if tuple(extents) != tuple(shapes[base]):
            raise IntegrityError(f"{name}.extents", f"expected {shapes[base]}, found {extents}")
        dt = _DTYPE_TAGS[tag]
        nbytes = int(np.prod(extents, dtype=np.int64)) * dt.itemsize
        need(pos, nbytes, f"{name}.values")
        arrays[name] = np.frombuffer(data, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(extents).astype(dt.newbyteorder("="))
        pos += nbytes
        expected.pop(name, None)
    if expected:
        raise IntegrityError(sorted(expected)[0], "missing parameter array")
    if pos != len(data):
        raise IntegrityError("trailing", f"{len(data) - pos} unexpected bytes after the last array")
    return Checkpoint(data[4], header, arrays)


def restore(ckpt: Checkpoint):
    """(model, train_config, moments, rng, iteration) from a loaded checkpoint."""
    h = ckpt.header
    config = _parse_fields(InsNetConfig, "model", h)
    tcfg = _parse_fields(TrainConfig, "train", h)
    model = build_model(ckpt.kind, config, np.random.default_rng(0))
    for name, p in model.params.items():
        p.value = ckpt.arrays[name].astype(config.dtype)
    moments = AdamState(t=int(h["adam.t"]))
    for name, a in ckpt.arrays.items():
        if name.startswith("adam.m/"):
            moments.m[name[7:]] = a.copy()
        elif name.startswith("adam.v/"):
            moments.v[name[7:]] = a.copy()
    rng = np.random.default_rng()
    try:
        rng.bit_generator.state = json.loads(h["rng"])
    except (ValueError, TypeError, KeyError) as exc:
        raise IntegrityError("rng", str(exc)) from exc
    return model, tcfg, moments, rng, ckpt.iteration


def load_model(path):
    """Model only, for evaluation and decoding."""
    return restore(load_checkpoint(path))[0]
