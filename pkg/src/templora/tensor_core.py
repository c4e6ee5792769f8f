"""Dense numeric core: differentiable primitives, AdamW, seeded substreams, memory accounting.

Tensors are ``torch.Tensor``; torch records the graph and runs reverse-mode
differentiation. Matrix products, norms and activations are spelled out from
elementary operations; softmax and cross-entropy use torch's fused kernels. All
of them are checked against central finite differences in float64.
"""

from __future__ import annotations

import hashlib
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np
import torch
import torch.nn.functional as F

Tensor = torch.Tensor

DTYPES = {"float32": torch.float32, "float64": torch.float64}


class ConfigError(ValueError):
    """Invalid configuration or incompatible shapes."""


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required."""


class CapacityError(RuntimeError):
    """A forward pass would exceed the model's context window."""


def resolve_dtype(name: str | torch.dtype) -> torch.dtype:
    if isinstance(name, torch.dtype):
        return name
    try:
        return DTYPES[name]
    except KeyError:
        raise ConfigError(f"unknown dtype {name!r}; expected one of {sorted(DTYPES)}") from None


# --------------------------------------------------------------------------- ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.dim() != 2 or b.dim() != 2:
        raise ConfigError(f"matmul expects 2-D operands, got {tuple(a.shape)} and {tuple(b.shape)}")
    if a.shape[1] != b.shape[0]:
        raise ConfigError(f"matmul inner dims differ: {tuple(a.shape)} @ {tuple(b.shape)}")
    return a @ b


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis (torch's kernel subtracts the row max first)."""
    if torch.isnan(x).any():
        raise NumericError("softmax input contains NaN")
    return torch.softmax(x, dim=-1)


def rmsnorm(x: Tensor, gamma: Tensor, eps: float) -> Tensor:
    if eps <= 0:
        raise ConfigError("rmsnorm eps must be positive")
    if x.shape[-1] != gamma.shape[-1] or x.shape[-1] == 0:
        raise ConfigError(f"rmsnorm: feature dim {x.shape[-1]} vs gamma {tuple(gamma.shape)}")
    inv = torch.rsqrt((x * x).mean(dim=-1, keepdim=True) + eps)
    return x * inv * gamma


def token_nll(logits: Tensor, targets: Tensor) -> Tensor:
    """Per-position negative log-likelihood, shape ``logits.shape[:-1]``."""
    flat = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1), reduction="none")
    return flat.view(targets.shape)


def cross_entropy(logits: Tensor, targets: Tensor, mask: Tensor | None = None) -> Tensor:
    """Mean NLL over positions where ``mask`` is true."""
    if logits.shape[:-1] != targets.shape:
        raise ConfigError(f"logits {tuple(logits.shape)} do not match targets {tuple(targets.shape)}")
    vocab = logits.shape[-1]
    if targets.numel() and (int(targets.min()) < 0 or int(targets.max()) >= vocab):
        raise ConfigError(f"target ids must lie in [0, {vocab})")
    nll = token_nll(logits, targets)
    if mask is None:
        mask = torch.ones_like(targets, dtype=torch.bool)
    mask = mask.to(torch.bool)
    n = int(mask.sum())
    if n == 0:
        raise ConfigError("cross_entropy: every position is masked out")
    return (nll * mask.to(nll.dtype)).sum() / n


def backward(loss: Tensor) -> None:
    """Accumulate gradients of a scalar loss into every ``requires_grad`` leaf.

    The recorded graph is consumed; build a new one for another pass.
    """
    if loss.numel() != 1 or loss.dim() != 0:
        raise ConfigError(f"backward needs a scalar root, got shape {tuple(loss.shape)}")
    if not loss.requires_grad:
        raise ConfigError("loss does not depend on any trainable tensor")
    loss.backward()


# --------------------------------------------------------------------- optimizer


@dataclass
class OptimizerState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    exp_avg: list[Tensor] = field(default_factory=list)
    exp_avg_sq: list[Tensor] = field(default_factory=list)

    def clone(self) -> "OptimizerState":
        return OptimizerState(
            self.lr, self.beta1, self.beta2, self.eps, self.weight_decay, self.step,
            [m.clone() for m in self.exp_avg], [v.clone() for v in self.exp_avg_sq],
        )

    def nbytes(self) -> int:
        return sum(t.numel() * t.element_size() for t in (*self.exp_avg, *self.exp_avg_sq))


@torch.no_grad()
def optimizer_step(params: Sequence[Tensor], grads: Sequence[Tensor | None], state: OptimizerState,
                   lr: float | None = None) -> None:
    """One AdamW update in place (decoupled weight decay, bias-corrected moments).

    ``lr`` overrides ``state.lr`` for this step (used by warmup schedules).
    """
    if len(params) != len(grads):
        raise ConfigError("params and grads differ in length")
    if not state.exp_avg:
        state.exp_avg = [torch.zeros_like(p) for p in params]
        state.exp_avg_sq = [torch.zeros_like(p) for p in params]
    if len(state.exp_avg) != len(params):
        raise ConfigError("optimizer state does not match parameter list")
    lr = state.lr if lr is None else lr
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.exp_avg, state.exp_avg_sq):
        if g is None:
            g = torch.zeros_like(p)
        if g.shape != p.shape or m.shape != p.shape:
            raise ConfigError(f"shape mismatch in optimizer step: {tuple(p.shape)} vs {tuple(g.shape)}")
        if state.weight_decay:
            p.mul_(1.0 - lr * state.weight_decay)
        m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
        v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
        denom = (v / bc2).sqrt_().add_(state.eps)
        p.addcdiv_(m, denom, value=-lr / bc1)


# --------------------------------------------------------------------------- RNG


def _name_key(name: object) -> int:
    digest = hashlib.blake2b(repr(name).encode(), digest_size=4).digest()
    return int.from_bytes(digest, "little")


class Rng:
    """Splittable counter-based generator (Philox) with named substreams.

    ``Rng(7).child("dropout", 3)`` always yields the same stream, independent
    of how many draws were taken from any other stream.
    """

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.path = path
        seq = np.random.SeedSequence(self.seed, spawn_key=path)
        self._gen = np.random.Generator(np.random.Philox(seq))

    def child(self, *names: object) -> "Rng":
        return Rng(self.seed, self.path + tuple(_name_key(n) for n in names))

    @property
    def numpy(self) -> np.random.Generator:
        return self._gen

    def normal(self, shape: Sequence[int], std: float = 1.0, dtype=torch.float32) -> Tensor:
        return torch.from_numpy(self._gen.standard_normal(tuple(shape)) * std).to(dtype)

    def uniform(self, shape: Sequence[int], dtype=torch.float32) -> Tensor:
        return torch.from_numpy(self._gen.random(tuple(shape))).to(dtype)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)


# ------------------------------------------------------------- memory accounting


def nbytes(*tensors: Tensor | None) -> int:
    return sum(t.numel() * t.element_size() for t in tensors if t is not None)


class MemoryMeter:
    """Tracks the peak of reported live tensor bytes.

    Figures come from the engine's own bookkeeping, not the OS, so they are
    deterministic for a given configuration.
    """

    def __init__(self) -> None:
        self.peak = 0
        self.last = 0

    def record(self, live_bytes: int) -> None:
        self.last = int(live_bytes)
        self.peak = max(self.peak, self.last)

    def reset(self) -> None:
        self.peak = self.last = 0


@contextmanager
def saved_tensor_bytes() -> Iterator[list[int]]:
    """Count bytes autograd saves for backward inside the block (deduplicated by storage)."""
    total = [0]
    seen: set[tuple[int, int]] = set()

    def pack(t: Tensor):
        key = (t.untyped_storage().data_ptr(), t.untyped_storage().nbytes())
        if key not in seen:
            seen.add(key)
            total[0] += key[1]
        return t

    with torch.autograd.graph.saved_tensors_hooks(pack, lambda t: t):
        yield total


def param_count(tensors: Iterable[Tensor]) -> int:
    return sum(t.numel() for t in tensors)


def silu(x: Tensor) -> Tensor:
    return x * torch.sigmoid(x)


def causal_mask(n_query: int, n_key: int, device=None) -> Tensor:
    """Boolean [n_query, n_key] mask; query i sits at key slot ``n_key - n_query + i``."""
    offset = n_key - n_query
    q = torch.arange(n_query, device=device).unsqueeze(1) + offset
    k = torch.arange(n_key, device=device).unsqueeze(0)
    return k <= q

