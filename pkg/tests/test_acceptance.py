"""End-to-end acceptance checks on the desk-scale model.

Each test prints one ``ACCEPTANCE <n> PASS|FAIL`` line with its measured
numbers, then asserts. The pretrained base model is cached on disk
(``$TEMPLORA_CACHE`` or ``~/.cache/templora``) under a name derived from its
full training recipe, so a stale cache can never be picked up.
"""

import dataclasses
import hashlib
import math
import os
import statistics
import subprocess
import sys
import time
from pathlib import Path

import pytest
import torch

from templora.corpus import GlossarySpec, gen_glossary_doc, pretrain_base
from templora.engine import EngineConfig
from templora.harness import bench
from templora.harness.config import DESK_BOUNDARIES, DESK_MODEL, PretrainConfig
from templora.metrics import bleu, format_change, relative_change
from templora.model import load_checkpoint, save_checkpoint

TESTS = Path(__file__).parent
DOC_SEEDS = tuple(range(1000, 1010))
DOC_LENGTH = 16384
PRETRAIN = PretrainConfig()
BASE_CFG = EngineConfig()


def _say(pytestconfig, n, ok, detail):
    line = f"ACCEPTANCE {n:>2} {'PASS' if ok else 'FAIL'}: {detail}"
    reporter = pytestconfig.pluginmanager.getplugin("terminalreporter")
    if reporter is not None:
        reporter.write_line(line)
    else:
        print(line)


def _run_pytest(*selectors):
    t0 = time.perf_counter()
    proc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", *selectors],
                          cwd=TESTS.parent, capture_output=True, text=True)
    elapsed = time.perf_counter() - t0
    last = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr[-200:]
    return proc.returncode == 0, elapsed, last


@pytest.fixture(scope="module")
def desk_model():
    torch.set_num_threads(1)
    spec = GlossarySpec()
    recipe = f"{DESK_MODEL}|{spec}|{PRETRAIN}|seed=0"
    name = "desk_" + hashlib.sha256(recipe.encode()).hexdigest()[:12] + ".tlm"
    cache = Path(os.environ.get("TEMPLORA_CACHE", Path.home() / ".cache" / "templora"))
    path = cache / name
    if not path.exists():
        cache.mkdir(parents=True, exist_ok=True)
        model, _ = pretrain_base(DESK_MODEL, spec, PRETRAIN.steps, seed=0, batch_size=PRETRAIN.batch_size,
                                 lr=PRETRAIN.lr, warmup=PRETRAIN.warmup, log_every=0)
        save_checkpoint(model, path)
    return load_checkpoint(path)


@pytest.fixture(scope="module")
def docs():
    return [gen_glossary_doc(GlossarySpec(seed=s, length=DOC_LENGTH)).tokens.tolist() for s in DOC_SEEDS]


@pytest.fixture(scope="module")
def streams(desk_model, docs):
    """Per-document stream summaries, computed once per configuration."""
    memo = {}

    def get(cfg: EngineConfig, doc_index: int):
        key = (cfg.digest(), doc_index)
        if key not in memo:
            memo[key] = bench.run_streams(desk_model, [docs[doc_index]], cfg, DESK_BOUNDARIES)
        return memo[key]

    return get


# ------------------------------------------------------------ correctness suites


def test_01_gradient_checks(pytestconfig):
    ok, elapsed, last = _run_pytest("tests/test_tensor_core.py", "-k", "gradcheck")
    passed = ok and elapsed < 60 and "40 passed" in last
    _say(pytestconfig, 1, passed, f"{last} in {elapsed:.1f}s (limit 60s, 2x20 seeded float64 checks)")
    assert passed


def test_02_exactness_suite(pytestconfig):
    ok, elapsed, last = _run_pytest(
        "tests/test_lora.py::test_zero_init_identity_bit_exact",
        "tests/test_lora.py::test_destroy_restores_base_bit_exact",
        "tests/test_model.py::test_cache_matches_full_forward",
        "tests/test_model.py::test_sink_eviction_matches_masked_attention_oracle",
        "tests/test_engine.py::test_stream_sink_mode_matches_oracle",
        "tests/test_model.py::test_causality_perturbation",
    )
    passed = ok and elapsed < 300
    _say(pytestconfig, 2, passed, f"{last} in {elapsed:.1f}s (limit 300s)")
    assert passed


def test_03_trace_oracle(pytestconfig):
    ok, elapsed, last = _run_pytest("tests/test_engine.py::test_trace_matches_bookkeeping_simulator",
                                    "tests/test_engine.py::test_hand_simulated_versions")
    passed = ok and elapsed < 120
    _say(pytestconfig, 3, passed, f"{last} in {elapsed:.1f}s over 120 random configurations (limit 120s)")
    assert passed


def test_04_parallel_replay(pytestconfig):
    ok, elapsed, last = _run_pytest("tests/test_engine.py", "-k", "parallel_replay")
    passed = ok and elapsed < 300 and "12 passed" in last
    _say(pytestconfig, 4, passed, f"{last} in {elapsed:.1f}s (12 replayed runs, limit 300s)")
    assert passed


# ------------------------------------------------------------ desk-scale analogs


def test_05_gain_grows_with_position(pytestconfig, streams, docs):
    t0 = time.perf_counter()
    base = [streams(BASE_CFG.replace(adapt=False), j) for j in range(len(docs))]
    tl = [streams(BASE_CFG, j) for j in range(len(docs))]
    elapsed = time.perf_counter() - t0

    def pooled(summaries, s):
        num = sum(r.report.segment_nll[s] * r.report.segment_tokens[s] for x in summaries for r in x.results)
        den = sum(r.report.segment_tokens[s] for x in summaries for r in x.results)
        return math.exp(num / den)

    n_seg = len(DESK_BOUNDARIES) + 1
    base_seg = [pooled(base, s) for s in range(n_seg)]
    tl_seg = [pooled(tl, s) for s in range(n_seg)]
    red = [100 * (b - t) / b for b, t in zip(base_seg, tl_seg)]
    last_red = [100 * (b.segment_ppl[-1] - t.segment_ppl[-1]) / b.segment_ppl[-1] for b, t in zip(base, tl)]
    mean_last = statistics.mean(last_red)
    passed = all(t < b for t, b in zip(tl_seg, base_seg)) and red[-1] > red[0] and mean_last >= 10 \
        and elapsed < 1800
    _say(pytestconfig, 5, passed,
         f"segment reductions {[round(x, 2) for x in red]}% (base {[round(x, 2) for x in base_seg]}, "
         f"TL {[round(x, 2) for x in tl_seg]}); mean last-segment reduction {mean_last:.2f}% (>=10); "
         f"{elapsed / 60:.1f} min")
    assert passed


def test_06_cache_reuse(pytestconfig, streams, docs):
    off = [streams(BASE_CFG, j).ppl for j in range(len(docs))]
    on = [streams(BASE_CFG.replace(cache_reuse=True), j).ppl for j in range(len(docs))]
    diff = 100 * abs(statistics.mean(on) - statistics.mean(off)) / statistics.mean(off)
    passed = diff <= 1.0
    _say(pytestconfig, 6, passed, f"mean PPL reuse off {statistics.mean(off):.4f}, on {statistics.mean(on):.4f}: "
         f"{diff:.3f}% apart (limit 1%)")
    assert passed


def test_07_chunk_size_trend(pytestconfig, streams):
    seeds = range(5)
    means = {}
    for d in (64, 128, 256):
        cfg = BASE_CFG.replace(chunk_size=d, input_length=None)
        means[d] = statistics.mean(streams(cfg, j).ppl for j in seeds)
    ok = [means[b] >= means[a] * (1 - 0.005) for a, b in ((64, 128), (128, 256))]
    passed = all(ok)
    _say(pytestconfig, 7, passed, "mean PPL by chunk size over 5 documents "
         + ", ".join(f"{d}: {p:.4f}" for d, p in means.items()) + " (non-decreasing, 0.5% tie band)")
    assert passed


def test_08_window_shrink(pytestconfig, desk_model, docs):
    W = desk_model.config.context_window
    small = W // 4
    cfg = BASE_CFG.replace(chunk_size=small // 2, train_input_length=small // 2)
    sample = docs[:5]
    full = bench.bench_window(desk_model, sample, [W], cfg, DESK_BOUNDARIES, repeats=1)
    shrunk = bench.bench_window(desk_model, sample, [small], cfg, DESK_BOUNDARIES, repeats=1, variants=("tl",))
    base_full = next(r for r in full if r.variant == "base")
    tl_full = next(r for r in full if r.variant == "tl")
    tl_small = shrunk[0]
    ratio = tl_small.latency_per_1k / tl_full.latency_per_1k
    passed = tl_small.ppl <= base_full.ppl and ratio < 0.7
    _say(pytestconfig, 8, passed,
         f"TL PPL at W={small}: {tl_small.ppl:.4f} vs base at W={W}: {base_full.ppl:.4f} "
         f"({format_change(relative_change(base_full.ppl, tl_small.ppl))}); latency/1K {tl_small.latency_per_1k:.3f}s "
         f"vs {tl_full.latency_per_1k:.3f}s = {100 * ratio:.1f}% (limit 70%); peak memory "
         f"{tl_small.peak_memory} vs {tl_full.peak_memory} bytes")
    assert passed


def test_09_training_cheaper_than_generation(pytestconfig, desk_model, docs):
    rows = bench.bench_traincost(desk_model, docs[0], [64, 128, 256], BASE_CFG, [None], repeats=3)
    pairs = {}
    for r in rows:
        pairs.setdefault(r.chunk_size, {})[r.variant] = r.train_time_per_chunk
    ok = {d: v["train"] < v["generate"] for d, v in pairs.items()}
    passed = all(ok.values())
    _say(pytestconfig, 9, passed, "train vs generate seconds per chunk (2 epochs) "
         + ", ".join(f"{d}: {v['train']:.3f} vs {v['generate']:.3f}" for d, v in pairs.items()))
    assert passed


def test_10_ntk_collapse(pytestconfig, desk_model, docs):
    rows = bench.bench_ntk(desk_model, docs[0], [2, 4, 8])
    baseline = next(r.ppl for r in rows if r.variant == "window")
    ntk = {int(r.flags.split("=")[1]): r.ppl for r in rows if r.variant == "ntk"}
    degradation = {f: p - baseline for f, p in ntk.items()}
    passed = ntk[8] > baseline and degradation[2] < degradation[4] < degradation[8]
    _say(pytestconfig, 10, passed, f"window baseline PPL {baseline:.4f}; NTK "
         + ", ".join(f"{f}x: {p:.4f}" for f, p in ntk.items()) + " (must rise monotonically above baseline)")
    assert passed


def test_11_sensitivity(pytestconfig, streams):
    sample = range(3)

    def mean_ppl(cfg):
        return statistics.mean(streams(cfg, j).ppl for j in sample)

    lc = BASE_CFG.lora
    base = mean_ppl(BASE_CFG.replace(adapt=False))
    ep2 = mean_ppl(BASE_CFG)
    ep1 = mean_ppl(BASE_CFG.replace(lora=dataclasses.replace(lc, epochs=1)))
    ranks = {r: mean_ppl(BASE_CFG.replace(lora=dataclasses.replace(lc, rank=r))) for r in (4, 16, 64)}
    hot = mean_ppl(BASE_CFG.replace(lora=dataclasses.replace(lc, lr=100 * lc.lr)))
    spread = 100 * (max(ranks.values()) - min(ranks.values())) / min(ranks.values())
    gain1, gain2 = base - ep1, base - ep2
    ok_epochs = gain2 > 0 and gain1 >= 0.5 * gain2
    passed = ok_epochs and spread <= 2.0 and hot > ep2
    _say(pytestconfig, 11, passed,
         f"base {base:.4f}; epochs 1/2 {ep1:.4f}/{ep2:.4f} (gain ratio {gain1 / gain2:.2f}, need >=0.5); "
         f"rank " + ", ".join(f"{r}: {p:.4f}" for r, p in ranks.items()) + f" (spread {spread:.2f}%, limit 2%); "
         f"lr x100 {hot:.4f} vs {ep2:.4f}")
    assert passed


def test_12_metrics(pytestconfig):
    b = bleu("a b c d e".split(), "a b c d f".split())
    table = [((9.81, 9.23), "-5.9%"), ((4.36, 3.32), "-23.8%"), ((12.4, 19.0), "+53.2%")]
    got = [format_change(relative_change(*pair)) for pair, _ in table]
    passed = abs(b - 0.6687) <= 1e-4 and bleu([1, 2, 3, 4], [1, 2, 3, 4]) == 1.0 \
        and bleu([1, 2, 3], [1, 2, 3]) == 0.0 and bleu([4], [1, 2]) == 0.0 \
        and got == [want for _, want in table]
    _say(pytestconfig, 12, passed, f"BLEU {b:.4f} (0.6687); relative changes {got}")
    assert passed
