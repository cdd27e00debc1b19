"""End-to-end acceptance criteria; each test prints one PASS/FAIL line."""

import math
import time

import pytest

from insnet import cli
from insnet.bench import compositional, lexical_control, lm_comparison, run_bench, summary_markdown
from insnet.config import BenchConfig
from insnet.model import InsNetConfig
from insnet.training import read_metrics
from insnet.verify import (
    check_decode_cache,
    check_gradients,
    check_identity_offsets,
    check_l2r_degeneration,
    check_offsets_exhaustive,
    check_offsets_random,
    check_one_pass,
    check_zero_head,
)

COMPOSITIONAL_SEEDS = (0, 1, 2)
BENCH_LENGTHS = (20, 40, 80, 160)


@pytest.fixture
def verdict(capsys):
    def emit(n: int, ok: bool, detail: str):
        with capsys.disabled():
            print(f"\n[criterion {n}] {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, detail

    return emit


def test_c01_offset_compression(verdict):
    t0 = time.perf_counter()
    checks = [check_offsets_exhaustive(7), check_offsets_random(10_000, 64)]
    dt = time.perf_counter() - t0
    ok = all(c[1] for c in checks) and dt < 10
    verdict(1, ok, "; ".join(c[2] for c in checks) + f"; {dt:.1f}s")


def test_c02_left_to_right_degeneration(verdict):
    ident = check_identity_offsets(32)
    greedy = check_l2r_degeneration(50)
    nll = lm_comparison(seed=0)
    ratio = nll["InsNet-l2r"] / nll["L2R"]
    ok = ident[1] and greedy[1] and abs(ratio - 1) <= 0.10
    verdict(
        2,
        ok,
        f"{ident[2]}; {greedy[2]}; dev NLL InsNet-l2r {nll['InsNet-l2r']:.4f} vs L2R {nll['L2R']:.4f} (ratio {ratio:.3f})",
    )


def test_c03_one_pass_equals_reencode(verdict):
    t0 = time.perf_counter()
    _, ok, detail = check_one_pass(50, 16)
    dt = time.perf_counter() - t0
    verdict(3, ok and dt < 60, f"{detail}; {dt:.1f}s")


def test_c04_gradients(verdict):
    t0 = time.perf_counter()
    _, ok, detail = check_gradients(20)
    dt = time.perf_counter() - t0
    verdict(4, ok and dt < 300, f"{detail}; {dt:.1f}s")


def test_c05_decode_cache(verdict):
    _, ok, detail = check_decode_cache(20, 20)
    verdict(5, ok, detail)


def test_c06_lexical_control(verdict):
    table = lexical_control(seed=0, n_decodes=500)
    ins, l2r = table["InsNet"], table["L2R-PNW"]
    ok = ins["incorporation"] == 100.0
    verdict(
        6,
        ok,
        f"InsNet incorporation {ins['incorporation']:.2f}% over 500 decodes; "
        f"L2R-PNW {l2r['incorporation']:.2f}% (expected below 100); "
        f"BLEU-2 {ins['bleu2']:.2f} vs {l2r['bleu2']:.2f}",
    )


@pytest.fixture(scope="module")
def bench_report():
    t0 = time.perf_counter()
    rep = run_bench(BENCH_LENGTHS, ("insnet", "l2r", "it_vanilla"), BenchConfig(vocab_size=256), InsNetConfig(d_model=64, n_layers=2))
    return rep, time.perf_counter() - t0


def test_c07_efficiency_scaling(verdict, bench_report):
    rep, dt = bench_report
    e = rep.exponents
    ratio = rep.seconds("insnet", 160) / rep.seconds("it_vanilla", 160)
    ok = e["it_vanilla"] >= 1.8 and e["insnet"] <= 1.3 and ratio <= 0.35 and dt < 900
    verdict(
        7,
        ok,
        f"exponents IT-vanilla {e['it_vanilla']:.3f}, InsNet {e['insnet']:.3f}, L2R {e['l2r']:.3f}; "
        f"InsNet/IT at L=160 {ratio:.3f}; {dt:.0f}s",
    )


def test_bench_l2r_and_insnet_within_factor(bench_report):
    rep, _ = bench_report
    for L in BENCH_LENGTHS:
        a, b = rep.seconds("insnet", L), rep.seconds("l2r", L)
        assert max(a, b) / min(a, b) <= 2.5, (L, a, b)


def test_c08_compositional_direction(verdict, capsys):
    runs = [compositional(seed=s) for s in COMPOSITIONAL_SEEDS]
    wins = sum(r["InsNet-full"]["joint_acc"] > r["L2R"]["joint_acc"] for r in runs)
    with capsys.disabled():
        print("\n" + summary_markdown(compositional=runs))
    detail = ", ".join(f"seed {s}: {r['InsNet-full']['joint_acc']:.2f} vs {r['L2R']['joint_acc']:.2f}" for s, r in zip(COMPOSITIONAL_SEEDS, runs))
    verdict(8, wins >= 2, f"InsNet-full beats L2R on split-B joint accuracy in {wins}/3 seeds ({detail})")


def test_c09_zero_head_loss(verdict):
    _, ok, detail = check_zero_head(4, 10)
    closed = math.log(2) + math.log(3) + math.log(4) + 2 * math.log(10)
    ok = ok and round(closed, 3) == 7.783
    verdict(9, ok, detail)


def _metrics(path):
    return [{k: v for k, v in row.items() if k != "wallclock_s"} for row in read_metrics(path)]


SMALL_MODEL = ["--set", "model.d_model=16", "--set", "model.d_ff=32", "--set", "model.n_heads=2"]


def test_c10_determinism(verdict, tmp_path, capsys):
    commands = {
        "train": ["train", "--task", "stories", "--seed", "5", "--set", "data.train_count=32", "--set", "data.dev_count=8",
                  "--set", "train.total_iters=8", "--set", "train.warmup_iters=2", "--set", "train.batch_size=4",
                  "--set", "train.eval_interval=4", *SMALL_MODEL],
        "train-l2r": ["train", "--kind", "l2r", "--task", "stories", "--seed", "5", "--set", "data.train_count=32",
                      "--set", "data.dev_count=8", "--set", "train.total_iters=8", "--set", "train.warmup_iters=2",
                      "--set", "train.batch_size=4", "--set", "train.eval_interval=4", *SMALL_MODEL],
        "gen-data": ["gen-data", "--task", "captions", "--count", "6", "--seed", "5"],
        "decode": ["decode", "--task", "stories", "--keywords", "ball garden", "--n", "3", "--seed", "5", *SMALL_MODEL],
        "bench": ["bench", "--lengths", "8,12,16", "--kinds", "insnet,l2r", "--set", "bench.n_sequences=2",
                  "--set", "bench.epochs=1", "--set", "bench.min_epoch_seconds=0", *SMALL_MODEL],
    }  # fmt: skip
    mismatched = []
    for name, args in commands.items():
        outs = []
        for rep in ("a", "b"):
            out = tmp_path / f"{name}-{rep}"
            assert cli.main([*args, "--out", str(out)]) == 0
            outs.append(out)
        a, b = outs
        if (a / "metrics.csv").exists():
            same = _metrics(a / "metrics.csv") == _metrics(b / "metrics.csv")
        else:
            files = sorted(p.name for p in a.iterdir())
            same = files == sorted(p.name for p in b.iterdir()) and all((a / f).read_bytes() == (b / f).read_bytes() for f in files)
        if not same:
            mismatched.append(name)
    ckpt = next((tmp_path / "train-a").glob("*.insn"))
    evals = []
    for rep in ("a", "b"):
        out = tmp_path / f"eval-{rep}"
        assert cli.main(["eval", "--checkpoint", str(ckpt), "--task", "stories", "--set", "data.dev_count=8", "--metrics", "nll", "--out", str(out)]) == 0
        evals.append((out / "metrics.csv").read_bytes())
    if evals[0] != evals[1]:
        mismatched.append("eval")
    verdict(10, not mismatched, f"{len(commands) + 1} commands rerun; mismatches: {mismatched or 'none'}")
