"""Temporary low-rank adapter: attach, adapted projection, chunk training, destroy."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import torch

from .model import TinyLM, read_tensors, write_tensors
from .tensor_core import (
    ConfigError,
    MemoryMeter,
    OptimizerState,
    Rng,
    Tensor,
    backward,
    cross_entropy,
    nbytes,
    optimizer_step,
    saved_tensor_bytes,
)

ATTN_TARGETS = ("q", "k", "v", "o")
FFN_TARGETS = ("gate", "up", "down")
# the output projection onto the vocabulary; one matrix, not one per layer
HEAD_TARGET = "head"
ALL_TARGETS = ATTN_TARGETS + FFN_TARGETS + (HEAD_TARGET,)


@dataclass(frozen=True)
class LoraConfig:
    rank: int = 16
    alpha: float = 16.0
    dropout: float = 0.05
    targets: tuple[str, ...] = ATTN_TARGETS + (HEAD_TARGET,)
    epochs: int = 2
    lr: float = 1e-3
    warmup_chunks: int = 2
    weight_decay: float = 0.0
    # tokens per optimizer step; None trains the whole chunk in one step
    batch_tokens: int | None = None

    def __post_init__(self):
        if self.rank < 1:
            raise ConfigError("lora rank must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("lora dropout must lie in [0, 1)")
        if self.warmup_chunks < 0:
            raise ConfigError("warmup_chunks must be >= 0")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.lr < 0:
            raise ConfigError("lr must be >= 0")
        if self.batch_tokens is not None and self.batch_tokens < 1:
            raise ConfigError("batch_tokens must be positive")
        unknown = [t for t in self.targets if t not in ALL_TARGETS]
        if unknown or not self.targets:
            raise ConfigError(f"unknown lora targets {unknown}; choose from {ALL_TARGETS}")

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank


# hyper-parameters used for 7B-scale models, kept as a preset
LARGE_MODEL_LORA = LoraConfig(rank=64, alpha=64.0, dropout=0.05, targets=ATTN_TARGETS, epochs=2, lr=5e-5,
                        warmup_chunks=2)


def target_param_names(model: TinyLM, targets: Sequence[str]) -> list[str]:
    names = []
    for i in range(model.config.n_layers):
        for t in targets:
            if t == HEAD_TARGET:
                continue
            group = "attn" if t in ATTN_TARGETS else "ffn"
            name = f"layers.{i}.{group}.{t}"
            if name not in model.params:
                raise ConfigError(f"model has no projection {name}")
            names.append(name)
    if HEAD_TARGET in targets:
        names.append(HEAD_TARGET)
    return names


class LoraAdapter:
    """Low-rank factors per target projection plus the optimizer state that trains them.

    ``version`` counts completed chunk updates.
    """

    def __init__(self, config: LoraConfig, factors: dict[str, tuple[Tensor, Tensor]],
                 rng: Rng, version: int = 0, state: OptimizerState | None = None):
        self.config = config
        self.factors = factors
        self.rng = rng
        self.version = version
        self.state = state or OptimizerState(lr=config.lr, weight_decay=config.weight_decay)
        self.destroyed = False
        self.steps_taken = 0
        self._dropout_rng: Rng | None = None

    @property
    def scaling(self) -> float:
        return self.config.scaling

    def parameters(self) -> list[Tensor]:
        return [t for pair in self.factors.values() for t in pair]

    def trainable_count(self) -> int:
        return sum(t.numel() for t in self.parameters())

    def nbytes(self) -> int:
        return nbytes(*self.parameters()) + self.state.nbytes()

    def delta(self, name: str, x: Tensor, train: bool = False) -> Tensor | None:
        pair = self.factors.get(name)
        if pair is None:
            return None
        A, B = pair
        return adapted_delta(x, A, B, self.scaling, self.config.dropout if train else 0.0,
                             self._dropout_rng)

    def snapshot(self) -> "LoraAdapter":
        """Independent deep copy: factors, optimizer moments and counters."""
        if self.destroyed:
            raise ConfigError("cannot snapshot a destroyed adapter")
        factors = {k: (A.detach().clone().requires_grad_(True), B.detach().clone().requires_grad_(True))
                   for k, (A, B) in self.factors.items()}
        copy = LoraAdapter(self.config, factors, self.rng, self.version, self.state.clone())
        copy.steps_taken = self.steps_taken
        return copy

    def with_config(self, **changes) -> "LoraAdapter":
        """Same factors, different hyper-parameters (e.g. alpha); factors are shared."""
        from dataclasses import replace

        copy = LoraAdapter(replace(self.config, **changes), self.factors, self.rng, self.version, self.state)
        return copy


def adapted_delta(x: Tensor, A: Tensor, B: Tensor, scaling: float, dropout: float = 0.0,
                  rng: Rng | None = None) -> Tensor:
    if dropout > 0.0:
        if rng is None:
            raise ConfigError("dropout needs a random stream")
        keep = (rng.uniform(x.shape, dtype=x.dtype) >= dropout).to(x.dtype)
        x = x * keep / (1.0 - dropout)
    return ((x @ A.T) @ B.T) * scaling


def adapted_projection(x: Tensor, w_base: Tensor, A: Tensor, B: Tensor, scaling: float,
                       dropout: float = 0.0, rng: Rng | None = None) -> Tensor:
    """``x W^T + scaling * (dropout(x) A^T) B^T`` for row-vector inputs."""
    return x @ w_base.T + adapted_delta(x, A, B, scaling, dropout, rng)


def attach(model: TinyLM, config: LoraConfig, seed: int = 0) -> LoraAdapter:
    """Allocate a fresh adapter: gaussian down-projections, zero up-projections.

    The model's weights are not touched; the adapter is passed to ``forward``.
    """
    names = target_param_names(model, config.targets)
    rng = Rng(seed).child("lora")
    dt = model.config.torch_dtype
    factors = {}
    for name in names:
        d_out, d_in = model.params[name].shape
        A = rng.child("A", name).normal((config.rank, d_in), 1.0 / math.sqrt(d_in), dt)
        B = torch.zeros((d_out, config.rank), dtype=dt)
        factors[name] = (A.requires_grad_(True), B.requires_grad_(True))
    return LoraAdapter(config, factors, rng)


def destroy(adapter: LoraAdapter | None, model: TinyLM | None = None) -> TinyLM | None:
    """Release every adapter tensor. Safe to call repeatedly; returns the untouched base model."""
    if adapter is not None and not adapter.destroyed:
        adapter.factors = {}
        adapter.state = OptimizerState(lr=adapter.config.lr)
        adapter._dropout_rng = None
        adapter.destroyed = True
    return model


def split_span(start: int, end: int, batch_tokens: int | None) -> list[tuple[int, int]]:
    if batch_tokens is None or batch_tokens >= end - start:
        return [(start, end)]
    return [(s, min(s + batch_tokens, end)) for s in range(start, end, batch_tokens)]


def warmup_lr(config: LoraConfig, updates_done: int, step_in_update: int, steps_per_update: int) -> float:
    """Linear ramp over every optimizer step of the first ``warmup_chunks`` updates, then constant."""
    if updates_done >= config.warmup_chunks:
        return config.lr
    total = config.warmup_chunks * steps_per_update
    return config.lr * (updates_done * steps_per_update + step_in_update + 1) / total


def train_chunk(adapter: LoraAdapter, model: TinyLM, history: Sequence[int], span: tuple[int, int],
                context_len: int, epochs: int | None = None, meter: MemoryMeter | None = None) -> list[float]:
    """Teacher-forced training on ``history[span]`` with up to ``context_len`` preceding tokens as
    masked input. Runs ``epochs`` passes, increments ``adapter.version`` and returns step losses."""
    if adapter.destroyed:
        raise ConfigError("adapter has been destroyed")
    cfg = adapter.config
    epochs = cfg.epochs if epochs is None else epochs
    if epochs < 1:
        raise ConfigError("train_chunk needs at least one epoch")
    start, end = span
    if not 0 <= start < end <= len(history):
        raise ConfigError(f"chunk span {span} invalid for history of length {len(history)}")
    W = model.config.context_window
    ctx = min(context_len, start)
    if ctx + (end - start) > W:
        raise ConfigError(f"training span {ctx} + {end - start} tokens exceeds context window {W}")

    subs = split_span(start, end, cfg.batch_tokens)
    steps_per_update = epochs * len(subs)
    params = adapter.parameters()
    hist = torch.as_tensor(list(history[max(0, start - context_len):end]), dtype=torch.long)
    offset = max(0, start - context_len)
    losses: list[float] = []
    step_in_update = 0
    for epoch in range(epochs):
        for s, e in subs:
            c0 = max(0, s - context_len)
            seq = hist[c0 - offset:e - offset]
            inputs, targets = seq[:-1], seq[1:]
            # target j sits at stream index c0 + 1 + j; only chunk tokens carry loss
            mask = torch.arange(c0 + 1, e) >= s
            lr = warmup_lr(cfg, adapter.version, step_in_update, steps_per_update)
            step_in_update += 1
            if not bool(mask.any()):
                continue
            adapter._dropout_rng = adapter.rng.child("dropout", adapter.version, epoch, s)
            for p in params:
                p.grad = None
            with saved_tensor_bytes() as saved:
                logits = model.forward(inputs, adapter=adapter, train=True)
                loss = cross_entropy(logits, targets, mask)
            backward(loss)
            optimizer_step(params, [p.grad for p in params], adapter.state, lr=lr)
            adapter.steps_taken += 1
            losses.append(loss.item())
            if meter is not None:
                grads = nbytes(*(p.grad for p in params))
                meter.record(model.param_bytes() + adapter.nbytes() + grads + saved[0])
            adapter._dropout_rng = None
    for p in params:
        p.grad = None
    adapter.version += 1
    return losses


@torch.no_grad()
def chunk_nll(model: TinyLM, adapter: LoraAdapter | None, history: Sequence[int],
              span: tuple[int, int], context_len: int) -> float:
    """Mean NLL of ``history[span]`` given up to ``context_len`` preceding tokens (eval mode)."""
    start, end = span
    c0 = max(0, start - context_len)
    seq = torch.as_tensor(list(history[c0:end]), dtype=torch.long)
    logits = model.forward(seq[:-1], adapter=adapter)
    mask = torch.arange(c0 + 1, end) >= start
    return float(cross_entropy(logits, seq[1:], mask))


# -------------------------------------------------------------------- checkpoint

LORA_MAGIC = b"TLLORA\x00\x00"
LORA_FORMAT_VERSION = 1


def save_adapter(adapter: LoraAdapter, path: str | Path) -> None:
    """Same container as model checkpoints: header fields then named f32 tensors.

    Optimizer moments are not stored; a loaded adapter restarts its optimizer.
    """
    cfg = adapter.config
    tensors = {}
    for name, (A, B) in adapter.factors.items():
        tensors[name + ".A"] = A
        tensors[name + ".B"] = B
    targets = ",".join(cfg.targets).encode()
    with open(path, "wb") as fh:
        fh.write(LORA_MAGIC)
        fh.write(struct.pack("<I", LORA_FORMAT_VERSION))
        fh.write(struct.pack("<IddIdII", cfg.rank, cfg.alpha, cfg.dropout, cfg.epochs, cfg.lr,
                             cfg.warmup_chunks, adapter.version))
        fh.write(struct.pack("<H", len(targets)))
        fh.write(targets)
        write_tensors(fh, tensors)


def load_adapter(path: str | Path, dtype: torch.dtype = torch.float32, seed: int = 0) -> LoraAdapter:
    with open(path, "rb") as fh:
        if fh.read(len(LORA_MAGIC)) != LORA_MAGIC:
            raise ConfigError(f"{path}: not an adapter checkpoint")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != LORA_FORMAT_VERSION:
            raise ConfigError(f"{path}: unsupported adapter format {version}")
        rank, alpha, dropout, epochs, lr, warmup, adapter_version = struct.unpack(
            "<IddIdII", fh.read(struct.calcsize("<IddIdII")))
        (ln,) = struct.unpack("<H", fh.read(2))
        targets = tuple(fh.read(ln).decode().split(","))
        tensors = read_tensors(fh)
    cfg = LoraConfig(rank=rank, alpha=alpha, dropout=dropout, targets=targets, epochs=epochs, lr=lr,
                     warmup_chunks=warmup)
    names = list(dict.fromkeys(k.rsplit(".", 1)[0] for k in tensors))
    factors = {n: (tensors[n + ".A"].to(dtype).requires_grad_(True),
                   tensors[n + ".B"].to(dtype).requires_grad_(True)) for n in names}
    return LoraAdapter(cfg, factors, Rng(seed).child("lora"), version=adapter_version)
