"""Desk-scale sweeps: window size, chunk size, training cost, hyper-parameters, NTK extension.

Peak memory is the engine's own count of live tensor bytes, so it is
deterministic; timings use a monotonic clock and report medians.
"""

from __future__ import annotations

import logging
import math
import statistics
import time
from dataclasses import dataclass, replace
from typing import Sequence

import torch

from .. import lora as lora_mod
from ..engine import EngineConfig, StreamResult, start_session, teacher_forced_stream_ppl, validate
from ..metrics import sliding_window_nll
from ..model import TinyLM
from ..tensor_core import ConfigError, MemoryMeter
from .reports import BenchRow

log = logging.getLogger(__name__)


@dataclass
class StreamSummary:
    ppl: float
    n_tokens: int
    segment_ppl: list[float]
    latency_per_1k: list[float]
    peak_memory: int
    train_time_per_chunk: float
    results: list[StreamResult]


def run_streams(model: TinyLM, docs: Sequence[Sequence[int]], config: EngineConfig,
                boundaries: Sequence[int] = (), seeds: Sequence[int] | None = None) -> StreamSummary:
    """Teacher-forced streams over several documents, pooled token-weighted."""
    results = []
    for j, doc in enumerate(docs):
        cfg = config if seeds is None else config.replace(seed=seeds[j])
        results.append(teacher_forced_stream_ppl(model, doc, cfg, boundaries))
    total = sum(sum(r.nll) for r in results)
    count = sum(len(r.nll) for r in results)
    n_seg = len(results[0].report.segment_nll)
    seg = []
    for s in range(n_seg):
        num = sum(r.report.segment_nll[s] * r.report.segment_tokens[s] for r in results
                  if r.report.segment_tokens[s])
        den = sum(r.report.segment_tokens[s] for r in results)
        seg.append(math.exp(num / den) if den else math.nan)
    lat = [1000.0 * r.session.inference_seconds / len(r.nll) for r in results]
    peak = max(max(r.session.meter.peak, r.session.train_meter.peak) for r in results)
    calls = sum(r.session.train_calls for r in results)
    train_t = sum(r.session.train_seconds for r in results) / calls if calls else 0.0
    return StreamSummary(math.exp(total / count), count, seg, lat, peak, train_t, results)


def _flags(cfg: EngineConfig) -> str:
    names = [n for n, on in (("reuse", cfg.cache_reuse), ("sink", cfg.attention_sink)) if on]
    return "+".join(names) or "-"


def _row(variant: str, window: int, cfg: EngineConfig, summary: StreamSummary | None, seed: int,
         status: str = "ok") -> BenchRow:
    lc = cfg.lora
    if summary is None:
        return BenchRow(variant, window, cfg.chunk_size, lc.rank, lc.lr, lc.epochs, _flags(cfg),
                        math.nan, 0, math.nan, math.nan, seed, status)
    return BenchRow(variant, window, cfg.chunk_size, lc.rank, lc.lr, lc.epochs, _flags(cfg),
                    summary.ppl, summary.peak_memory, statistics.median(summary.latency_per_1k),
                    summary.train_time_per_chunk, seed, status)


def bench_window(model: TinyLM, docs: Sequence[Sequence[int]], windows: Sequence[int], config: EngineConfig,
                 boundaries: Sequence[int] = (), repeats: int | None = None,
                 variants: Sequence[str] = ("base", "tl")) -> list[BenchRow]:
    """PPL, peak memory and inference latency per 1K tokens as the context window shrinks.

    Windows smaller than chunk_size + train_input_length are reported as skipped rows.
    Latency counts forward passes only (training time goes to its own column) and
    is the median over at least three document runs.
    """
    rows = []
    repeats = repeats or max(1, math.ceil(3 / len(docs)))
    for w in windows:
        cfg = config.replace(input_length=None)
        need = cfg.chunk_size + cfg.train_input_length
        if w < need:
            for v in variants:
                rows.append(_row(v, w, cfg, None, cfg.seed, f"skipped: window < chunk_size + train_input_length = {need}"))
            continue
        m = model.with_config(context_window=w)
        for v in variants:
            vcfg = cfg.replace(adapt=(v == "tl"))
            runs = [run_streams(m, docs, vcfg, boundaries) for _ in range(repeats)]
            summary = runs[0]
            summary.latency_per_1k = [x for r in runs for x in r.latency_per_1k]
            rows.append(_row(v, w, vcfg, summary, cfg.seed))
            log.info("window %d %s ppl %.4f latency/1k %.4fs", w, v, summary.ppl,
                     statistics.median(summary.latency_per_1k))
    return rows


def bench_chunk(model: TinyLM, docs: Sequence[Sequence[int]], chunk_sizes: Sequence[int], config: EngineConfig,
                seeds: Sequence[int], boundaries: Sequence[int] = ()) -> list[BenchRow]:
    """One row per (chunk size, seed); ``input_length`` follows W - chunk_size."""
    rows = []
    W = model.config.context_window
    for d in chunk_sizes:
        cfg = config.replace(chunk_size=d, input_length=None)
        for seed in seeds:
            summary = run_streams(model, docs, cfg.replace(seed=seed), boundaries)
            rows.append(_row("tl", W, cfg, summary, seed))
            log.info("chunk %d seed %d ppl %.4f", d, seed, summary.ppl)
    return rows


def _median_time(fn, repeats: int) -> float:
    """Median of ``repeats`` calls to ``fn``, which returns its own timed duration."""
    return statistics.median(fn() for _ in range(repeats))


def bench_traincost(model: TinyLM, doc: Sequence[int], chunk_sizes: Sequence[int], config: EngineConfig,
                    batch_tokens: Sequence[int | None] = (None,), repeats: int = 3) -> list[BenchRow]:
    """Wall-clock and peak memory of training a chunk against generating it token by token.

    Both sides start from the same point of ``doc``: the generator holds the
    preceding ``input_length`` tokens in its window, the trainer uses the
    preceding ``train_input_length`` tokens as masked context.
    """
    rows = []
    W = model.config.context_window
    doc = [int(t) for t in doc]
    for d in chunk_sizes:
        cfg = validate(config.replace(chunk_size=d, input_length=None), model)
        start = max(cfg.input_length, cfg.train_input_length)
        if start + d > len(doc):
            raise ConfigError("document too short for the requested chunk size")
        for bt in batch_tokens:
            if bt is not None and bt > d:
                raise ConfigError(f"batch_tokens {bt} exceeds chunk size {d}")
            lcfg = replace(cfg.lora, batch_tokens=bt)
            tcfg = cfg.replace(lora=lcfg)
            meter_holder = {}

            def train_once():
                ad = lora_mod.attach(model, lcfg, seed=cfg.seed)
                meter = MemoryMeter()
                t0 = time.perf_counter()
                lora_mod.train_chunk(ad, model, doc, (start, start + d), cfg.train_input_length, meter=meter)
                elapsed = time.perf_counter() - t0
                meter_holder["train"] = meter.peak
                return elapsed

            def generate_once():
                s = start_session(model, tcfg, doc[start - cfg.input_length:start])
                s.meter.reset()
                t0 = time.perf_counter()
                with torch.no_grad():
                    for _ in range(d):
                        s.emit()
                elapsed = time.perf_counter() - t0
                meter_holder["gen"] = s.meter.peak
                return elapsed

            t_train = _median_time(train_once, repeats)
            t_gen = _median_time(generate_once, repeats)
            flag = f"batch={bt or d}"
            lc = tcfg.lora
            rows.append(BenchRow("train", W, d, lc.rank, lc.lr, lc.epochs, flag, math.nan,
                                 meter_holder["train"], math.nan, t_train, cfg.seed))
            rows.append(BenchRow("generate", W, d, lc.rank, lc.lr, lc.epochs, flag, math.nan,
                                 meter_holder["gen"], 1000.0 * t_gen / d, t_gen, cfg.seed))
            log.info("chunk %d batch %s train %.3fs generate %.3fs", d, bt, t_train, t_gen)
    return rows


SWEEP_AXES = ("epochs", "rank", "lr")


def sweep_hparams(model: TinyLM, docs: Sequence[Sequence[int]], axis: str, values: Sequence,
                  config: EngineConfig, boundaries: Sequence[int] = (), tie_alpha: bool = False) -> list[BenchRow]:
    """PPL per hyper-parameter value, preceded by the base model as the axis origin.

    On the rank axis ``alpha`` stays at its configured value, the usual practice
    when varying the rank, so the scaling alpha/r shrinks as the rank grows. With
    ``tie_alpha`` the alpha follows the rank instead.
    """
    if axis not in SWEEP_AXES:
        raise ConfigError(f"axis must be one of {SWEEP_AXES}")
    if not values:
        raise ConfigError("sweep needs at least one value")
    W = model.config.context_window
    base = run_streams(model, docs, config.replace(adapt=False), boundaries)
    rows = [_row("base", W, config, base, config.seed)]
    for value in values:
        lc = config.lora
        if axis == "epochs":
            lc = replace(lc, epochs=int(value))
        elif axis == "rank":
            alpha = float(value) if tie_alpha else lc.alpha
            lc = replace(lc, rank=int(value), alpha=alpha)
        else:
            lc = replace(lc, lr=float(value))
        cfg = config.replace(lora=lc)
        summary = run_streams(model, docs, cfg, boundaries)
        rows.append(_row("tl", W, cfg, summary, config.seed))
        log.info("sweep %s=%s ppl %.4f", axis, value, summary.ppl)
    return rows


def bench_ntk(model: TinyLM, doc: Sequence[int], factors: Sequence[int], stride: int | None = None,
              seed: int = 0) -> list[BenchRow]:
    """Sliding-window PPL at the training window against dynamic-NTK extension to ``factor * W``.

    Both variants score the same tokens with the same stride; only the window
    (and hence the rotary scaling) differs.
    """
    W = model.config.context_window
    stride = stride or W // 2
    base_nll = sliding_window_nll(model, doc, W, stride)
    base_ppl = math.exp(sum(base_nll) / len(base_nll))
    rows = []
    for f in factors:
        if f < 1:
            raise ConfigError("extension factors must be >= 1")
        ext = model.with_config(context_window=f * W, ntk_base_window=W)
        nll = sliding_window_nll(ext, doc, f * W, stride)
        ppl = math.exp(sum(nll) / len(nll))
        rows.append(BenchRow("window", W, stride, 0, 0.0, 0, f"factor={f}", base_ppl, 0, math.nan, math.nan, seed))
        rows.append(BenchRow("ntk", f * W, stride, 0, 0.0, 0, f"factor={f}", ppl, 0, math.nan, math.nan, seed))
        log.info("ntk factor %d ppl %.4f (window baseline %.4f)", f, ppl, base_ppl)
    return rows
