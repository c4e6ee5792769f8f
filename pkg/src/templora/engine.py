"""Chunked long-text generation with a progressively trained temporary adapter.

The session keeps the emitted stream ``Y``, a KV cache over the current input
window, and the adapter. Tokens are produced (or, in teacher-forced mode,
scored) chunk by chunk; when a chunk of ``chunk_size`` tokens completes, the
adapter is trained on it with the preceding ``train_input_length`` tokens as
masked context, and the window moves to the most recent ``input_length``
tokens.

Window maintenance when the cache is full:

* default: discard the cache and recompute it over the newest ``input_length``
  tokens, positions restarting at 0;
* attention sink: evict the oldest non-sink slot, never recompute.

With ``cache_reuse`` the cache survives adapter updates; without it the window
is recomputed under the new adapter at every chunk boundary.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import queue
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import torch

from . import lora as lora_mod
from .lora import LoraAdapter, LoraConfig
from .metrics import EvalReport, segment_report
from .model import KVCache, TinyLM, prefill, sink_evict, slide_and_recompute
from .tensor_core import ConfigError, MemoryMeter, Rng, Tensor, token_nll

log = logging.getLogger(__name__)

DEPLOYMENTS = ("cascaded", "parallelized")
SAMPLERS = ("greedy", "penalty", "temperature")


@dataclass(frozen=True)
class EngineConfig:
    chunk_size: int = 128
    input_length: int | None = None
    train_input_length: int = 128
    cache_reuse: bool = False
    attention_sink: bool = False
    deployment: str = "cascaded"
    sampler: str = "greedy"
    repetition_penalty: float = 1.12
    temperature: float = 1.0
    # False runs the same stream with no adapter (the base-model reference)
    adapt: bool = True
    # pretraining on long prompts: tail chunks shorter than this fraction of chunk_size are skipped
    min_tail_fraction: float = 0.25
    lora: LoraConfig = field(default_factory=LoraConfig)
    seed: int = 0

    def replace(self, **changes) -> "EngineConfig":
        return dataclasses.replace(self, **changes)

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.as_dict(), sort_keys=True, default=str).encode()).hexdigest()[:16]


def validate(config: EngineConfig, model: TinyLM) -> EngineConfig:
    """Fill defaults (input_length := W - chunk_size) and reject violated constraints."""
    W = model.config.context_window
    d = config.chunk_size
    if d < 1:
        raise ConfigError("chunk_size must be >= 1")
    lx = W - d if config.input_length is None else config.input_length
    if lx < 1:
        raise ConfigError(f"input_length must be >= 1 (chunk_size {d} leaves no room in window {W})")
    if lx + d > W:
        raise ConfigError(f"constraint input_length + chunk_size <= W violated: {lx} + {d} > {W}")
    if config.train_input_length < 0:
        raise ConfigError("train_input_length must be >= 0")
    if config.train_input_length + d > W:
        raise ConfigError(
            f"constraint train_input_length + chunk_size <= W violated: {config.train_input_length} + {d} > {W}")
    if config.attention_sink and not config.cache_reuse:
        raise ConfigError("constraint attention_sink => cache_reuse violated: sinks without cache reuse "
                          "still recompute after every adapter update")
    if config.attention_sink and W <= 5:
        raise ConfigError("attention sinks need a window larger than 5")
    if config.deployment not in DEPLOYMENTS:
        raise ConfigError(f"deployment must be one of {DEPLOYMENTS}")
    if config.sampler not in SAMPLERS:
        raise ConfigError(f"sampler must be one of {SAMPLERS}")
    if config.repetition_penalty <= 0 or config.temperature <= 0:
        raise ConfigError("repetition_penalty and temperature must be positive")
    return config.replace(input_length=lx)


@dataclass
class Event:
    index: int
    version: int
    window_start: int
    window_end: int
    sinks: int
    nll: float | None = None


@dataclass
class SwapSchedule:
    """Activation points: adapter ``version`` is first used for stream token ``index``."""

    points: list[tuple[int, int]] = field(default_factory=list)

    def add(self, index: int, version: int) -> None:
        if self.points and (index <= self.points[-1][0] or version <= self.points[-1][1]):
            raise ConfigError("swap schedule must increase in both index and version")
        self.points.append((index, version))


def apply_repetition_penalty(logits: Tensor, seen: Sequence[int], penalty: float) -> Tensor:
    """Divide positive and multiply negative logits of already-seen tokens by ``penalty``."""
    if penalty == 1.0 or not seen:
        return logits
    out = logits.clone()
    idx = torch.as_tensor(sorted(set(int(t) for t in seen)), dtype=torch.long)
    sel = out[idx]
    out[idx] = torch.where(sel > 0, sel / penalty, sel * penalty)
    return out


class GenerationSession:
    """Mutable state of one long-text run. Create with :func:`start_session`."""

    def __init__(self, model: TinyLM, config: EngineConfig, adapter: LoraAdapter | None):
        self.model = model
        self.config = config
        self.adapter = adapter
        self.Y: list[int] = []
        self.prompt_len = 0
        self.m = 0
        self.cache: KVCache = model.new_cache(config.attention_sink)
        self.fed_end = 0
        self.pending: Tensor | None = None
        self.events: list[Event] = []
        self.meter = MemoryMeter()
        self.train_meter = MemoryMeter()
        self.inference_seconds = 0.0
        self.train_seconds = 0.0
        self.train_calls = 0
        self.rng = Rng(config.seed).child("engine")
        # hook run after each chunk completes; replaces the default synchronous update
        self._on_chunk: Callable[[int, int], None] | None = None
        self._before_token: Callable[[], None] | None = None

    # ------------------------------------------------------------------ state

    @property
    def k(self) -> int:
        return self.adapter.version if self.adapter is not None else 0

    @property
    def i(self) -> int:
        return len(self.Y)

    @property
    def W(self) -> int:
        return self.model.config.context_window

    def _evicted(self) -> bool:
        idx, n = self.cache.token_index, self.cache.sink_count
        return bool(n) and len(idx) > n and idx[n] != idx[n - 1] + 1

    @property
    def window_start(self) -> int:
        """Stream index of the oldest non-sink token in the cache."""
        idx = self.cache.token_index
        if not idx:
            return self.fed_end
        return idx[self.cache.sink_count] if self._evicted() else idx[0]

    @property
    def sinks(self) -> int:
        """Pinned slots detached from the contiguous window (0 until the first eviction)."""
        return self.cache.sink_count if self._evicted() else 0

    # ----------------------------------------------------------- cache plumbing

    def _forward(self, tokens: Sequence[int], start_index: int) -> Tensor:
        t0 = time.perf_counter()
        logits = self.model.forward(list(tokens), self.cache, self.adapter, meter=self.meter,
                                    token_index=range(start_index, start_index + len(tokens)))
        self.inference_seconds += time.perf_counter() - t0
        return logits

    def _recompute(self, keep: int, end: int | None = None) -> Tensor:
        end = self.i if end is None else end
        t0 = time.perf_counter()
        self.cache, logits = slide_and_recompute(self.model, self.Y[:end], keep, self.adapter,
                                                 self.config.attention_sink, meter=self.meter)
        self.inference_seconds += time.perf_counter() - t0
        self.fed_end = end
        self.pending = logits[-1]
        return logits

    @torch.no_grad()
    def _feed_until(self, end: int) -> list[tuple[int, Tensor, int, int]]:
        """Push ``Y[fed_end:end]`` through the cache.

        Returns ``(p, logits, window_start, sinks)`` for each fed position ``p``;
        the logits predict ``Y[p + 1]`` and were computed over
        ``Y[window_start:p + 1]`` plus ``sinks`` pinned slots.
        """
        out = []
        W = self.W
        lx = self.config.input_length
        while self.fed_end < end:
            room = W - len(self.cache)
            if room >= 1:
                n = min(room, end - self.fed_end)
                ws, sk = self.window_start, self.sinks
                if not len(self.cache):
                    ws = self.fed_end
                logits = self._forward(self.Y[self.fed_end:self.fed_end + n], self.fed_end)
                for j in range(n):
                    out.append((self.fed_end + j, logits[j], ws, sk))
                self.fed_end += n
                self.pending = logits[-1]
            elif self.config.attention_sink:
                sink_evict(self.cache, W - 1)
                continue
            else:
                p = self.fed_end
                logits = self._recompute(min(lx, p + 1), end=p + 1)
                out.append((p, logits[-1], p + 1 - min(lx, p + 1), 0))
        return out

    def _next_logits(self) -> tuple[Tensor, int, int]:
        """Logits for the token at index ``i`` plus the window they saw."""
        if self.fed_end < self.i:
            self._feed_until(self.i)
        if self.pending is None:
            raise ConfigError("session has no context to predict from")
        return self.pending, self.window_start, self.sinks

    def _window_tokens(self) -> list[int]:
        return [self.Y[j] for j in self.cache.token_index]

    # --------------------------------------------------------------- updates

    def train_span(self, start: int, end: int) -> None:
        if self.adapter is None:
            return
        t0 = time.perf_counter()
        lora_mod.train_chunk(self.adapter, self.model, self.Y, (start, end),
                             self.config.train_input_length, meter=self.train_meter)
        self.train_seconds += time.perf_counter() - t0
        self.train_calls += 1

    def _chunk_complete(self, start: int, end: int) -> None:
        if self._on_chunk is not None:
            self._on_chunk(start, end)
        else:
            self.train_span(start, end)
        self.m = 0
        if not self.config.cache_reuse:
            self._recompute(min(self.config.input_length, self.i))

    def swap_adapter(self, adapter: LoraAdapter | None) -> None:
        """Replace the serving adapter between tokens; without cache reuse the window is recomputed."""
        self.adapter = adapter
        if not self.config.cache_reuse and len(self.cache) and self.fed_end > 0:
            keep = self.fed_end - self.window_start
            self._recompute(keep, end=self.fed_end)

    # ------------------------------------------------------------ generation

    def _choose(self, logits: Tensor) -> int:
        cfg = self.config
        if cfg.sampler == "penalty":
            logits = apply_repetition_penalty(logits, self._window_tokens(), cfg.repetition_penalty)
        if cfg.sampler == "temperature":
            probs = torch.softmax(logits.double() / cfg.temperature, dim=-1).numpy()
            u = self.rng.child("sample", self.i).numpy.random()
            return int(min(probs.cumsum().searchsorted(u, side="right"), len(probs) - 1))
        return int(torch.argmax(logits))

    @torch.no_grad()
    def emit(self) -> int:
        if self._before_token is not None:
            self._before_token()
        logits, ws, sk = self._next_logits()
        y = self._choose(logits)
        nll = float(token_nll(logits.unsqueeze(0), torch.tensor([y]))[0])
        self.events.append(Event(self.i, self.k, ws, self.i, sk, nll))
        self.Y.append(y)
        self.m += 1
        return y

    def generate(self, n_tokens: int) -> list[int]:
        """Append exactly ``n_tokens`` tokens, training whenever a chunk completes."""
        out = []
        for _ in range(n_tokens):
            out.append(self.emit())
            if self.m == self.config.chunk_size:
                self._chunk_complete(self.i - self.m, self.i)
        return out

    @torch.no_grad()
    def score(self, tokens: Sequence[int]) -> list[float]:
        """Teacher-force ``tokens`` onto the stream and return each one's NLL (no updates)."""
        if not tokens:
            return []
        if self._before_token is not None:
            self._before_token()
        logits0, ws0, sk0 = self._next_logits()
        start = self.i
        self.Y.extend(int(t) for t in tokens)
        rows = [(start - 1, logits0, ws0, sk0)] + self._feed_until(self.i - 1)
        tgt = torch.as_tensor(self.Y[start:], dtype=torch.long)
        nlls = token_nll(torch.stack([r[1] for r in rows]), tgt).tolist()
        for j, (p, _, ws, sk) in enumerate(rows):
            self.events.append(Event(p + 1, self.k, ws, p + 1, sk, nlls[j]))
        return nlls

    def rollback(self, to_index: int) -> None:
        """Drop ``Y[to_index:]`` and the cache slots that hold it (earlier slots stay valid)."""
        if to_index >= self.i:
            return
        self.Y = self.Y[:to_index]
        # The slot of Y[to_index - 1] is dropped as well so that re-feeding it
        # recomputes the logits that predict the next token.
        keep = [s for s, j in enumerate(self.cache.token_index) if j < to_index - 1]
        self.cache.keep_slots(keep)
        self.fed_end = min(self.fed_end, to_index - 1)
        self.pending = None
        if not len(self.cache) and to_index:
            self._recompute(min(self.config.input_length, to_index))

    def feed(self, tokens: Sequence[int]) -> None:
        """Append context tokens without scoring them."""
        self.Y.extend(int(t) for t in tokens)

    def finish(self) -> TinyLM:
        """Destroy the adapter; the base model is returned untouched."""
        return lora_mod.destroy(self.adapter, self.model)


# --------------------------------------------------------------- construction


def pretrain_on_prompt(session: GenerationSession, prompt: Sequence[int]) -> int:
    """Train on the prompt tokens that fall outside the input window. Returns the number of updates."""
    cfg = session.config
    n_pre = len(prompt) - cfg.input_length
    if n_pre <= 0 or session.adapter is None:
        return 0
    d = cfg.chunk_size
    updates = 0
    saved_Y = session.Y
    session.Y = list(prompt)
    for s in range(0, n_pre, d):
        e = min(s + d, n_pre)
        if e - s < d and e - s < cfg.min_tail_fraction * d:
            break
        session.train_span(s, e)
        updates += 1
    session.Y = saved_Y
    return updates


def start_session(model: TinyLM, config: EngineConfig, prompt: Sequence[int],
                  adapter: LoraAdapter | None = None) -> GenerationSession:
    """Validate, attach a fresh adapter, pretrain on a long prompt and prefill the input window."""
    cfg = validate(config, model)
    if not prompt:
        raise ConfigError("prompt must contain at least one token")
    if adapter is None and cfg.adapt:
        adapter = lora_mod.attach(model, cfg.lora, seed=cfg.seed)
    session = GenerationSession(model, cfg, adapter if cfg.adapt else None)
    prompt = [int(t) for t in prompt]
    pretrain_on_prompt(session, prompt)
    session.Y = list(prompt)
    session.prompt_len = len(prompt)
    x_len = min(cfg.input_length, len(prompt))
    session.fed_end = len(prompt) - x_len
    session._feed_until(len(prompt))
    return session


# ----------------------------------------------------------- segment mode


def generate_segment_mode(session: GenerationSession, segments: Sequence[tuple[Sequence[int], Sequence[int]]],
                          history: str = "reference") -> list[list[int]]:
    """Translate segment by segment; each completed segment is one adapter update.

    ``segments`` holds (source, reference) pairs. The source is fed as context,
    ``len(reference)`` tokens are generated, then the adapter trains on the whole
    segment. With ``history="reference"`` the reference replaces the hypothesis
    in the stream before training; with ``"generated"`` the hypothesis stays.
    """
    if history not in ("reference", "generated"):
        raise ConfigError("history must be 'reference' or 'generated'")
    cfg = session.config
    limit = session.W - cfg.train_input_length
    for src, ref in segments:
        if len(src) + len(ref) > limit:
            raise ConfigError(f"segment of {len(src) + len(ref)} tokens exceeds W - L_T = {limit}")
    outputs = []
    for src, ref in segments:
        seg_start = session.i
        session.feed(src)
        tgt_start = session.i
        hyp = [session.emit() for _ in range(len(ref))]
        outputs.append(hyp)
        if history == "reference":
            session.rollback(tgt_start)
            session.feed(ref)
        session.m = session.i - seg_start
        session._chunk_complete(seg_start, session.i)
    return outputs


# ----------------------------------------------------------- parallel mode


class _Trainer(threading.Thread):
    """Trains chunks sequentially on its own adapter chain and publishes snapshots."""

    def __init__(self, model: TinyLM, adapter: LoraAdapter, context_len: int, stall: bool = False,
                 delay: float = 0.0, fail_on: Callable[[tuple[int, int]], bool] | None = None):
        super().__init__(daemon=True)
        self.model = model
        self.adapter = adapter
        self.context_len = context_len
        self.jobs: queue.Queue = queue.Queue()
        self.lock = threading.Lock()
        self.published: LoraAdapter | None = None
        self.failures: list[str] = []
        self.release = threading.Event()
        if not stall:
            self.release.set()
        self.stop = threading.Event()
        self.delay = delay
        self.fail_on = fail_on

    def work(self, history: Sequence[int], span: tuple[int, int]) -> None:
        try:
            if self.fail_on is not None and self.fail_on(span):
                raise RuntimeError("injected trainer failure")
            lora_mod.train_chunk(self.adapter, self.model, history, span, self.context_len)
            snap = self.adapter.snapshot()
        except Exception as exc:  # keep serving the current adapter
            log.warning("adapter training failed for span %s: %s", span, exc)
            self.failures.append(f"{span}: {exc}")
            return
        with self.lock:
            self.published = snap

    def run(self) -> None:
        while True:
            job = self.jobs.get()
            self.release.wait()
            if job is None or self.stop.is_set():
                return
            if self.delay:
                time.sleep(self.delay)
            self.work(*job)

    def take(self, current_version: int) -> LoraAdapter | None:
        with self.lock:
            snap = self.published
        if snap is not None and snap.version > current_version:
            return snap
        return None


def run_parallelized(session: GenerationSession, n_tokens: int, stall: bool = False,
                     trainer_delay: float = 0.0, synchronous: bool = False,
                     fail_on: Callable[[tuple[int, int]], bool] | None = None) -> tuple[list[int], SwapSchedule]:
    """Generate while a background worker trains completed chunks on an adapter snapshot.

    The generator never waits for training; a trained snapshot is swapped in at
    the next token boundary. ``stall`` keeps the worker from ever finishing and
    ``synchronous`` runs each job inline (the instantaneous-trainer limit); both
    exist for testing, as does ``fail_on`` which makes chosen spans fail.
    Returns the new tokens and the realized swap schedule.
    """
    if session.adapter is None:
        raise ConfigError("parallelized deployment needs an adapter")
    schedule = SwapSchedule()
    trainer = _Trainer(session.model, session.adapter.snapshot(), session.config.train_input_length,
                       stall, trainer_delay, fail_on)

    def submit(start: int, end: int) -> None:
        job = (tuple(session.Y[:end]), (start, end))
        if synchronous:
            trainer.work(*job)
        else:
            trainer.jobs.put(job)

    def before_token() -> None:
        snap = trainer.take(session.k)
        if snap is not None:
            session.swap_adapter(snap)
            schedule.add(session.i, snap.version)

    session._on_chunk = submit
    session._before_token = before_token
    if not synchronous:
        trainer.start()
    try:
        out = session.generate(n_tokens)
    finally:
        session._on_chunk = None
        session._before_token = None
        trainer.stop.set()
        trainer.jobs.put(None)
        trainer.release.set()
    session.parallel_failures = trainer.failures
    return out, schedule


def replay_schedule(session: GenerationSession, n_tokens: int, schedule: SwapSchedule) -> list[int]:
    """Cascaded run that trains each chunk immediately but activates versions only where scheduled."""
    if session.adapter is None:
        raise ConfigError("replay needs an adapter")
    chain = session.adapter.snapshot()
    versions: dict[int, LoraAdapter] = {}
    pending = list(schedule.points)

    def on_chunk(start: int, end: int) -> None:
        lora_mod.train_chunk(chain, session.model, tuple(session.Y[:end]), (start, end),
                             session.config.train_input_length)
        versions[chain.version] = chain.snapshot()

    def before_token() -> None:
        while pending and pending[0][0] == session.i:
            _, version = pending.pop(0)
            session.swap_adapter(versions[version])

    session._on_chunk = on_chunk
    session._before_token = before_token
    try:
        return session.generate(n_tokens)
    finally:
        session._on_chunk = None
        session._before_token = None


# ------------------------------------------------------ teacher-forced PPL


@dataclass
class StreamResult:
    positions: list[int]
    nll: list[float]
    report: EvalReport
    session: GenerationSession

    @property
    def ppl(self) -> float:
        return math.exp(sum(self.nll) / len(self.nll))


def teacher_forced_stream_ppl(model: TinyLM, document: Sequence[int], config: EngineConfig,
                              boundaries: Sequence[int] = (), prompt_len: int = 1,
                              adapter: LoraAdapter | None = None) -> StreamResult:
    """Score a document left to right under progressive adaptation.

    Each chunk is scored with the adapter as it stands, and only afterwards
    trained on, so no token is ever scored by an adapter that has seen it.
    Window handling matches :meth:`GenerationSession.generate`.
    """
    doc = [int(t) for t in document]
    if len(doc) < 2:
        raise ConfigError("document needs at least two tokens")
    if not 1 <= prompt_len < len(doc):
        raise ConfigError("prompt_len must lie in [1, len(document))")
    session = start_session(model, config, doc[:prompt_len], adapter)
    d = session.config.chunk_size
    positions: list[int] = []
    nlls: list[float] = []
    pos = prompt_len
    while pos < len(doc):
        chunk = doc[pos:pos + d]
        nlls.extend(session.score(chunk))
        positions.extend(range(pos, pos + len(chunk)))
        pos += len(chunk)
        if len(chunk) == d:
            session.m = d
            session._chunk_complete(pos - d, pos)
    report = segment_report(positions, nlls, boundaries)
    report.metadata.update({"config_hash": session.config.digest(), "seed": session.config.seed})
    return StreamResult(positions, nlls, report, session)


# ------------------------------------------------------------------ manifest


def write_manifest(path: str | Path, config: EngineConfig, extra: dict | None = None) -> None:
    data = {"config": config.as_dict(), "config_hash": config.digest(), "seed": config.seed}
    if extra:
        data.update(extra)
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True, default=str) + "\n")


def write_event_log(path: str | Path, events: Sequence[Event]) -> None:
    total = 0.0
    with open(path, "w") as fh:
        for e in events:
            if e.nll is not None:
                total += e.nll
            fh.write(json.dumps({"index": e.index, "version": e.version,
                                 "window": [e.window_start, e.window_end], "sinks": e.sinks,
                                 "cumulative_nll": total}) + "\n")
