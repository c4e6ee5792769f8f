"""Synthetic long documents, byte-level ingestion, token-stream files, base-model pretraining.

Two document families:

* glossary: alternating source/target segments. Each target segment is the
  token-aligned translation of the source segment before it under a mapping
  sampled fresh for every document; filler tokens pass through unchanged.
* novel: an order-2 Markov background with recurring per-document entity n-grams.

Training and evaluation documents draw from disjoint seed namespaces, so the
same numeric seed never yields the same document in both roles.
"""

from __future__ import annotations

import functools
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .model import ModelConfig, TinyLM
from .tensor_core import ConfigError, OptimizerState, Rng, cross_entropy, optimizer_step

log = logging.getLogger(__name__)

SRC_MARK = 0
TGT_MARK = 1
SPLITS = ("train", "eval")


@dataclass(frozen=True)
class GlossarySpec:
    seed: int = 0
    length: int = 16384
    vocab_size: int = 2048
    mapping_size: int = 32
    segment_length: int = 32
    content_rate: float = 0.5
    filler_size: int = 64
    filler_zipf: float = 1.1
    split: str = "eval"

    def validate(self) -> None:
        if self.split not in SPLITS:
            raise ConfigError(f"split must be one of {SPLITS}")
        if self.mapping_size < 1 or self.mapping_size > self.vocab_size // 4:
            raise ConfigError(f"mapping_size {self.mapping_size} must lie in [1, vocab/4]")
        if 2 + self.filler_size > self.vocab_size - 2 * self.mapping_size:
            raise ConfigError("filler ids overlap the source/target pools")
        if self.segment_length < 1 or self.length < 1:
            raise ConfigError("segment_length and length must be positive")
        if not 0.0 <= self.content_rate <= 1.0:
            raise ConfigError("content_rate must lie in [0, 1]")

    @property
    def source_pool(self) -> np.ndarray:
        v, m = self.vocab_size, self.mapping_size
        return np.arange(v - 2 * m, v - m)

    @property
    def target_pool(self) -> np.ndarray:
        v, m = self.vocab_size, self.mapping_size
        return np.arange(v - m, v)


@dataclass(frozen=True)
class NovelSpec:
    seed: int = 0
    length: int = 16384
    vocab_size: int = 2048
    background_size: int = 512
    branching: int = 8
    family_seed: int = 1234
    entity_count: int = 32
    entity_length: int = 4
    recurrence_rate: float = 0.02
    split: str = "eval"

    def validate(self) -> None:
        if self.split not in SPLITS:
            raise ConfigError(f"split must be one of {SPLITS}")
        if self.background_size + self.entity_count * self.entity_length > self.vocab_size:
            raise ConfigError("background and entity ids exceed the vocabulary")
        if self.entity_length < 2:
            raise ConfigError("entity_length must be >= 2")
        if not 0.0 <= self.recurrence_rate * self.entity_length < 1.0:
            raise ConfigError("recurrence_rate too high for the entity length")


@dataclass
class Document:
    tokens: np.ndarray
    boundaries: list[int] = field(default_factory=list)
    mapping: dict[int, int] = field(default_factory=dict)
    entities: list[tuple[int, ...]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.tokens)

    def segment_pairs(self) -> list[tuple[list[int], list[int]]]:
        """Per glossary segment: (source tokens with both markers, target content tokens).

        The target marker ends the source side so that generation starts on
        the first translated token. A torn final segment is dropped.
        """
        b = self.boundaries + [len(self.tokens)]
        pairs = []
        for i in range(0, len(b) - 2, 2):
            src = self.tokens[b[i]:b[i + 1]].tolist()
            tgt = self.tokens[b[i + 1]:b[i + 2]].tolist()
            if len(tgt) == len(src):
                pairs.append((src + tgt[:1], tgt[1:]))
        return pairs


def _zipf_probs(n: int, exponent: float) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1) ** exponent
    return w / w.sum()


def gen_glossary_doc(spec: GlossarySpec) -> Document:
    spec.validate()
    rng = Rng(spec.seed).child("glossary", spec.split).numpy
    src_pool, tgt_pool = spec.source_pool, spec.target_pool
    perm = rng.permutation(spec.mapping_size)
    lut = np.arange(spec.vocab_size)
    lut[src_pool] = tgt_pool[perm]
    filler_p = _zipf_probs(spec.filler_size, spec.filler_zipf)

    L = spec.segment_length
    n_seg = math.ceil(spec.length / (2 * (L + 1)))
    content = rng.random((n_seg, L)) < spec.content_rate
    sources = rng.integers(0, spec.mapping_size, size=(n_seg, L)) + src_pool[0]
    fillers = rng.choice(spec.filler_size, size=(n_seg, L), p=filler_p) + 2
    src = np.where(content, sources, fillers)
    tgt = lut[src]
    block = np.concatenate([np.full((n_seg, 1), SRC_MARK), src, np.full((n_seg, 1), TGT_MARK), tgt], axis=1)
    tokens = block.reshape(-1)[:spec.length].astype(np.int64)
    boundaries = [b for i in range(n_seg) for b in (i * 2 * (L + 1), i * 2 * (L + 1) + L + 1)
                  if b < spec.length]
    mapping = {int(s): int(lut[s]) for s in src_pool}
    return Document(tokens, boundaries, mapping=mapping)


def _markov_table(spec: NovelSpec) -> tuple[np.ndarray, np.ndarray]:
    """Shared background source: successors and cumulative probabilities per (a, b) context."""
    return _build_markov(spec.family_seed, spec.background_size, spec.branching)


@functools.lru_cache(maxsize=4)
def _build_markov(family_seed: int, n: int, branching: int) -> tuple[np.ndarray, np.ndarray]:
    rng = Rng(family_seed).child("markov").numpy
    succ = rng.integers(0, n, size=(n * n, branching))
    probs = rng.dirichlet(np.full(branching, 0.5), size=n * n)
    succ.flags.writeable = False
    cdf = np.cumsum(probs, axis=1)
    cdf.flags.writeable = False
    return succ, cdf


def gen_novel_doc(spec: NovelSpec) -> Document:
    spec.validate()
    rng = Rng(spec.seed).child("novel", spec.split).numpy
    succ, cdf = _markov_table(spec)
    n = spec.background_size
    k = spec.entity_length
    pool = rng.choice(np.arange(n, spec.vocab_size), size=spec.entity_count * k, replace=False)
    entities = [tuple(int(t) for t in pool[i * k:(i + 1) * k]) for i in range(spec.entity_count)]
    # mentions per emitted token should equal recurrence_rate
    r = spec.recurrence_rate
    p_start = r / (1.0 - r * (k - 1)) if r > 0 else 0.0

    out: list[int] = []
    a, b = int(rng.integers(n)), int(rng.integers(n))
    draws = rng.random(spec.length * 2 + 8)
    d = 0
    while len(out) < spec.length:
        u = draws[d % len(draws)]
        d += 1
        if u < p_start:
            out.extend(entities[int(rng.integers(spec.entity_count))])
            continue
        ctx = a * n + b
        j = int(np.searchsorted(cdf[ctx], rng.random(), side="right"))
        nxt = int(succ[ctx, min(j, spec.branching - 1)])
        out.append(nxt)
        a, b = b, nxt
    return Document(np.asarray(out[:spec.length], dtype=np.int64), entities=entities)


def markov_logprob(spec: NovelSpec, a: int, b: int, c: int) -> float:
    """Log-probability of background token ``c`` after context (a, b)."""
    succ, cdf = _markov_table(spec)
    ctx = a * spec.background_size + b
    probs = np.diff(np.concatenate([[0.0], cdf[ctx]]))
    p = float(probs[succ[ctx] == c].sum())
    return math.log(p) if p > 0 else -math.inf


# ---------------------------------------------------------------- byte ingestion


def ingest_text(path: str | Path) -> list[int]:
    """Byte-level tokenisation: every byte becomes one id in 0..255."""
    return list(Path(path).read_bytes())


def detokenize(tokens: Sequence[int]) -> bytes:
    return bytes(int(t) for t in tokens)


# ------------------------------------------------------------ token-stream files

TLC_MAGIC = b"TLC1"


def write_tokens(path: str | Path, tokens: Sequence[int], vocab_size: int,
                 boundaries: Sequence[int] | None = None) -> None:
    """``TLC1`` + u32 vocab + u32 count + u32 tokens, little-endian; boundaries to ``<path>.seg``."""
    arr = np.asarray(tokens, dtype="<u4")
    if arr.size and int(arr.max()) >= vocab_size:
        raise ConfigError("token id exceeds vocab size")
    with open(path, "wb") as fh:
        fh.write(TLC_MAGIC)
        fh.write(struct.pack("<II", vocab_size, arr.size))
        fh.write(arr.tobytes())
    if boundaries is not None:
        Path(str(path) + ".seg").write_text("".join(f"{int(b)}\n" for b in boundaries))


def read_tokens(path: str | Path) -> tuple[np.ndarray, int, list[int] | None]:
    with open(path, "rb") as fh:
        if fh.read(4) != TLC_MAGIC:
            raise ConfigError(f"{path}: not a TLC1 token stream")
        header = fh.read(8)
        if len(header) != 8:
            raise ConfigError(f"{path}: truncated header")
        vocab, count = struct.unpack("<II", header)
        body = fh.read(4 * count)
    if len(body) != 4 * count:
        raise ConfigError(f"{path}: truncated token stream")
    data = np.frombuffer(body, dtype="<u4")
    seg = Path(str(path) + ".seg")
    boundaries = [int(x) for x in seg.read_text().split()] if seg.exists() else None
    return data.astype(np.int64), vocab, boundaries


# ------------------------------------------------------------------ pretraining


def make_doc(spec: GlossarySpec | NovelSpec) -> Document:
    return gen_glossary_doc(spec) if isinstance(spec, GlossarySpec) else gen_novel_doc(spec)


def _with(spec, **changes):
    from dataclasses import replace

    return replace(spec, **changes)


def pretrain_base(model_config: ModelConfig, family: GlossarySpec | NovelSpec | Sequence,
                  steps: int, seed: int, batch_size: int = 8, lr: float = 3e-3,
                  warmup: int = 50, doc_length: int | None = None,
                  log_every: int = 50) -> tuple[TinyLM, list[float]]:
    """Next-token training on freshly sampled ``split="train"`` documents.

    ``family`` may be one spec or a list of specs mixed round-robin across the batch.
    Each batch row is a random window of ``context_window`` tokens from its own document.
    """
    if steps < 1:
        raise ConfigError("steps must be >= 1")
    families = list(family) if isinstance(family, (list, tuple)) else [family]
    W = model_config.context_window
    model = TinyLM.initialize(model_config, seed)
    params = list(model.params.values())
    for p in params:
        p.requires_grad_(True)
    state = OptimizerState(lr=lr, weight_decay=0.01)
    rng = Rng(seed).child("pretrain")
    losses: list[float] = []
    dlen = doc_length or 4 * W
    for step in range(steps):
        rows = []
        for j in range(batch_size):
            spec = families[(step * batch_size + j) % len(families)]
            doc_seed = int(rng.child("doc", step, j).integers(0, 2**31 - 1))
            doc = make_doc(_with(spec, seed=doc_seed, length=dlen + 1, split="train"))
            off = int(rng.child("offset", step, j).integers(0, dlen - W + 1))
            rows.append(doc.tokens[off:off + W + 1])
        batch = torch.as_tensor(np.stack(rows), dtype=torch.long)
        for p in params:
            p.grad = None
        logits = model.forward(batch[:, :-1], train=True)
        loss = cross_entropy(logits, batch[:, 1:])
        loss.backward()
        torch.nn.utils.clip_grad_norm_(params, 1.0)
        if step < warmup:
            cur = lr * (step + 1) / warmup
        else:
            frac = (step - warmup) / max(1, steps - warmup)
            cur = lr * (0.1 + 0.9 * 0.5 * (1 + math.cos(math.pi * frac)))
        optimizer_step(params, [p.grad for p in params], state, lr=cur)
        losses.append(loss.item())
        if log_every and (step % log_every == 0 or step == steps - 1):
            log.info("pretrain step %d loss %.4f", step, losses[-1])
    for p in params:
        p.grad = None
        p.requires_grad_(False)
    return model, losses
