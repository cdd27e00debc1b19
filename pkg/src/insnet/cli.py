"""``insnet`` command line: gen-data, train, eval, decode, bench, verify."""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from .bench import caption_model_config, report, run_bench, story_model_config
from .config import BenchConfig, DataConfig, RunConfig
from .datagen import (
    SceneSpec,
    Vocab,
    caption_vocab,
    extract_attributes,
    gen_cogent_caption,
    gen_random_sequences,
    gen_toy_stories,
    read_dataset,
    render_scene,
    story_vocab,
    write_dataset,
)
from .decoding import DecodeControls, DecodeError, decode, write_trace
from .metrics import MetricError, incorporation_rate
from .model import ConfigError, InsNetConfig
from .position import OrderError
from .training import MODEL_KINDS, IntegrityError, TrainConfig, build_model, evaluate, load_checkpoint, restore, train, write_metrics

TASKS = ("stories", "captions", "random")


def _vocab(task: str, vocab_size: int = 256) -> Vocab:
    if task == "stories":
        return story_vocab()
    if task == "captions":
        return caption_vocab()
    return Vocab.numeric(vocab_size)


def _model_config(task: str, rc: RunConfig, data: DataConfig) -> InsNetConfig:
    if task == "stories":
        base = story_model_config()
    elif task == "captions":
        base = caption_model_config()
    else:
        base = InsNetConfig(vocab_size=data.vocab_size, max_len=data.length + 2)
    return rc.section("model", base)


def _generate(task: str, data: DataConfig, split: str):
    """(train or dev) examples for ``task`` from generator parameters."""
    dev = split == "dev"
    seed = data.seed + (1000 if dev else 0)
    count = data.dev_count if dev else data.train_count
    if task == "stories":
        return gen_toy_stories(count, seed)
    if task == "captions":
        return gen_cogent_caption("A_dev" if dev else "A_train", count, data.seed, data.noise)
    return gen_random_sequences(data.vocab_size, data.length, count, seed)


def _load_data(task: str, path, data: DataConfig, split: str):
    if path:
        return read_dataset(path, task, _vocab(task, data.vocab_size), data.noise)
    return _generate(task, data, split)


def _out_dir(args, command: str) -> Path:
    out = Path(args.out) if args.out else Path("runs") / f"{command}-{time.strftime('%Y%m%d-%H%M%S')}"
    out.mkdir(parents=True, exist_ok=True)
    return out


def _run_config(args, command: str) -> RunConfig:
    rc = RunConfig.load(command, args.config, args.set or [], args.out)
    if getattr(args, "seed", None) is not None:
        rc.set("train.seed", str(args.seed))
        rc.set("data.seed", str(args.seed))
        rc.set("bench.seed", str(args.seed))
    return rc


# ---------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    rc = _run_config(args, "gen-data")
    data = rc.section("data", DataConfig(task=args.task))
    out = _out_dir(args, "gen-data")
    vocab = _vocab(data.task, data.vocab_size)
    if data.task == "captions":
        splits = {s: gen_cogent_caption(s, None if args.count is None else args.count, data.seed, data.noise) for s in ("A_train", "A_dev", "B_test")}
    else:
        splits = {"train": _generate(data.task, data, "train"), "dev": _generate(data.task, data, "dev")}
    for name, examples in splits.items():
        if args.count is not None and data.task != "captions":
            examples = examples[: args.count]
        write_dataset(out / f"{data.task}.{name}.txt", data.task, examples, vocab)
        print(f"wrote {len(examples)} examples to {out / f'{data.task}.{name}.txt'}")
    (out / "config.resolved").write_text(rc.resolved(data=data), encoding="utf-8")
    return 0


def cmd_train(args) -> int:
    rc = _run_config(args, "train")
    data = rc.section("data", DataConfig(task=args.task))
    mc = _model_config(data.task, rc, data)
    tc = rc.section("train", TrainConfig(total_iters=300, warmup_iters=30, batch_size=16, lr=1e-3, eval_interval=100))
    out = _out_dir(args, "train")
    train_data = _load_data(data.task, args.data, data, "train")
    dev = _load_data(data.task, args.dev, data, "dev")
    (out / "config.resolved").write_text(rc.resolved(model=mc, train=tc, data=data) + f"kind={args.kind}\n", encoding="utf-8")

    def progress(it, loss):
        if it % max(1, tc.eval_interval) == 0:
            print(f"iter {it}: loss {loss:.4f}", flush=True)

    res = train(args.kind, train_data, mc, tc, dev_data=dev, out_dir=out, progress=progress)
    print(f"checkpoint: {res.checkpoint}")
    print(f"metrics: {out / 'metrics.csv'}")
    return 0


def _scene_for(args, keywords: list[str]) -> SceneSpec:
    if args.scene:
        shape, color, jitter = args.scene.split()
        return SceneSpec(shape, color, int(jitter))
    color, shape = extract_attributes(keywords)
    return SceneSpec(shape or "sphere", color or "gray", args.seed or 0)


def _load_or_init(args, task: str, rc: RunConfig, data: DataConfig):
    if args.checkpoint:
        model = restore(load_checkpoint(args.checkpoint))[0]
    else:
        print("no --checkpoint given: using a freshly initialized model")
        model = build_model("insnet", _model_config(task, rc, data), np.random.default_rng(data.seed))
    return model


def cmd_eval(args) -> int:
    rc = _run_config(args, "eval")
    data = rc.section("data", DataConfig(task=args.task))
    ckpt = load_checkpoint(args.checkpoint)
    model = restore(ckpt)[0]
    out = _out_dir(args, "eval")
    examples = _load_data(data.task, args.data, data, "dev")
    vocab = _vocab(data.task, data.vocab_size)
    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    controls = None
    if any(key.startswith("decode.") for key in rc.values):
        controls = rc.section("decode", DecodeControls(max_steps=model.config.max_len))
    table = evaluate(model, examples, metrics, vocab, controls, data.seed, args.order)
    rows = list(table.items())
    write_metrics(out / "metrics.csv", [(ckpt.iteration, "eval", k, v, 0.0) for k, v in rows])
    for k, v in rows:
        print(f"{k}\t{v:.4f}")
    return 0


def cmd_decode(args) -> int:
    rc = _run_config(args, "decode")
    data = rc.section("data", DataConfig(task=args.task))
    vocab = _vocab(data.task, data.vocab_size)
    model = _load_or_init(args, data.task, rc, data)
    if model.kind != "insnet":
        raise ConfigError("decode needs an insnet checkpoint")
    words = args.keywords.split() if args.keywords else []
    unknown = [w for w in words if w not in vocab.stoi]
    if unknown:
        raise ConfigError(f"keywords not in the {data.task} vocabulary: {unknown}")
    kw_ids = [vocab.stoi[w] for w in words]
    controls = rc.section("decode", DecodeControls(max_steps=model.config.max_len))
    out = _out_dir(args, "decode")
    rng = np.random.default_rng(data.seed)
    cond = None
    if model.config.n_condition_slots:
        cond = render_scene(_scene_for(args, words), data.noise).reshape(-1)
    outs = []
    for i in range(args.n):
        res = decode(model, cond, kw_ids, controls, rng, vocab)
        outs.append(res.tokens)
        write_trace(out / f"trace_{i:03d}.tsv", res.trace)
        print(" ".join(vocab.decode(res.tokens)))
    rate = incorporation_rate(outs, [kw_ids] * len(outs))
    summary = f"decodes={len(outs)}\nkeywords={' '.join(words)}\nincorporation_pct={rate:.2f}\n"
    (out / "summary.txt").write_text(summary, encoding="utf-8")
    (out / "config.resolved").write_text(rc.resolved(data=data, decode=controls), encoding="utf-8")
    print(f"incorporation: {rate:.2f}% over {len(outs)} decodes; traces in {out}")
    return 0


def cmd_bench(args) -> int:
    rc = _run_config(args, "bench")
    bc = rc.section("bench", BenchConfig())
    mc = rc.section("model", InsNetConfig(vocab_size=bc.vocab_size))
    lengths = [int(x) for x in args.lengths.split(",")]
    kinds = args.kinds.split(",")
    out = _out_dir(args, "bench")
    (out / "config.resolved").write_text(rc.resolved(bench=bc, model=mc) + f"lengths={args.lengths}\nkinds={args.kinds}\n", encoding="utf-8")
    rep = run_bench(lengths, kinds, bc, mc, log=print)
    paths = report(out, bench=rep)
    for k, e in rep.exponents.items():
        print(f"{k}: log-log exponent {e:.3f}")
    print(f"wrote {', '.join(str(p) for p in paths.values())}")
    return 0


def cmd_verify(args) -> int:
    from .verify import run_all

    checks = run_all(quick=args.quick)
    for name, ok, detail in checks:
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    failed = sum(not ok for _, ok, _ in checks)
    print(f"{len(checks) - failed}/{len(checks)} properties passed")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="insnet", description="Insertion-based sequence modelling toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
        p.add_argument("--out", help="output directory")
        if seed:
            p.add_argument("--seed", type=int)

    p = sub.add_parser("gen-data", help="write synthetic datasets")
    common(p)
    p.add_argument("--task", choices=TASKS, default="stories")
    p.add_argument("--count", type=int)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    common(p)
    p.add_argument("--kind", choices=MODEL_KINDS, default="insnet")
    p.add_argument("--task", choices=TASKS, default="stories")
    p.add_argument("--data", help="training dataset file (default: generated)")
    p.add_argument("--dev", help="dev dataset file (default: generated)")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--task", choices=TASKS, default="stories")
    p.add_argument("--data", help="evaluation dataset file (default: generated dev split)")
    p.add_argument("--metrics", default="nll")
    p.add_argument("--order", default="l2r", help="order strategy for NLL")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("decode", help="keyword-constrained insertion decoding")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--task", choices=TASKS, default="stories")
    p.add_argument("--keywords", default="")
    p.add_argument("--scene", help="'shape color jitter' for caption models")
    p.add_argument("--n", type=int, default=1, help="number of decodes")
    p.set_defaults(fn=cmd_decode)

    p = sub.add_parser("bench", help="epoch-time scaling benchmark")
    common(p)
    p.add_argument("--lengths", default="20,40,80,160")
    p.add_argument("--kinds", default=",".join(MODEL_KINDS))
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("verify", help="run the property suite")
    p.add_argument("--quick", action="store_true", help="smaller sample counts")
    p.set_defaults(fn=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, DecodeError, OrderError, MetricError) as exc:
        parser.print_usage(sys.stderr)
        print(f"insnet {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (IntegrityError, OSError) as exc:
        print(f"insnet {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
