"""Miniature Llama-style decoder: RoPE attention, gated FFN, RMSNorm, KV cache.

The cache stores keys *before* rotation. Rotary positions are the cache slot
indices and are applied on every forward pass, which makes sink eviction and
dynamic-NTK rescaling consistent without rewriting stored keys.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import TYPE_CHECKING, Sequence

import torch
import torch.nn.functional as F

from .tensor_core import (
    CapacityError,
    ConfigError,
    MemoryMeter,
    Rng,
    Tensor,
    causal_mask,
    nbytes,
    resolve_dtype,
    rmsnorm,
    silu,
)

if TYPE_CHECKING:
    from .lora import LoraAdapter

PROJECTIONS = ("q", "k", "v", "o")
SINK_COUNT = 4


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 2048
    d_model: int = 256
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 688
    context_window: int = 512
    rope_base: float = 10000.0
    rms_eps: float = 1e-5
    # training window for dynamic-NTK scaling; None disables it
    ntk_base_window: int | None = None
    dtype: str = "float32"

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must be >= 2")
        if self.n_heads < 1 or self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.head_dim % 2:
            raise ConfigError(f"head dim {self.head_dim} must be even for rotary embeddings")
        if self.context_window < 8:
            raise ConfigError("context_window must be >= 8")
        if self.n_layers < 1 or self.d_ff < 1:
            raise ConfigError("n_layers and d_ff must be positive")
        if self.ntk_base_window is not None and self.ntk_base_window < 1:
            raise ConfigError("ntk_base_window must be positive")
        resolve_dtype(self.dtype)

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def torch_dtype(self) -> torch.dtype:
        return resolve_dtype(self.dtype)

    def replace(self, **changes) -> "ModelConfig":
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values.update(changes)
        return ModelConfig(**values)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Parameter names and shapes in checkpoint order. Linear weights are [out, in]."""
    d, f, v = cfg.d_model, cfg.d_ff, cfg.vocab_size
    shapes: dict[str, tuple[int, ...]] = {"embed": (v, d)}
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        shapes[p + "attn_norm"] = (d,)
        for name in PROJECTIONS:
            shapes[p + f"attn.{name}"] = (d, d)
        shapes[p + "ffn_norm"] = (d,)
        shapes[p + "ffn.gate"] = (f, d)
        shapes[p + "ffn.up"] = (f, d)
        shapes[p + "ffn.down"] = (d, f)
    shapes["final_norm"] = (d,)
    shapes["head"] = (v, d)
    return shapes


# ------------------------------------------------------------------------ rotary


def rope_inv_freq(head_dim: int, rope_base: float, ntk_scale: float = 1.0) -> Tensor:
    if head_dim % 2:
        raise ConfigError(f"rotary embedding needs an even head dim, got {head_dim}")
    if ntk_scale < 1.0:
        raise ConfigError("ntk_scale must be >= 1")
    base = rope_base * ntk_scale ** (head_dim / (head_dim - 2)) if ntk_scale > 1.0 else rope_base
    exponents = torch.arange(0, head_dim, 2, dtype=torch.float64) / head_dim
    return 1.0 / (base ** exponents)


def rope_rotate(x: Tensor, positions: Tensor, rope_base: float, ntk_scale: float = 1.0) -> Tensor:
    """Rotate the last axis of ``x`` (split into halves) by position-dependent angles.

    ``positions`` broadcasts against ``x.shape[-2]``.
    """
    hd = x.shape[-1]
    inv = rope_inv_freq(hd, rope_base, ntk_scale)
    ang = positions.to(torch.float64).unsqueeze(-1) * inv
    cos = torch.cos(ang).to(x.dtype)
    sin = torch.sin(ang).to(x.dtype)
    half = hd // 2
    x1, x2 = x[..., :half], x[..., half:]
    return torch.cat((x1 * cos - x2 * sin, x1 * sin + x2 * cos), dim=-1)


def rope_table(n: int, head_dim: int, rope_base: float, ntk_scale: float,
               dtype: torch.dtype) -> tuple[Tensor, Tensor]:
    """cos/sin tables [n, head_dim/2] for positions 0..n-1."""
    ang = torch.arange(n, dtype=torch.float64).unsqueeze(-1) * rope_inv_freq(head_dim, rope_base, ntk_scale)
    return torch.cos(ang).to(dtype), torch.sin(ang).to(dtype)


def _rotate(x: Tensor, cos: Tensor, sin: Tensor) -> Tensor:
    half = x.shape[-1] // 2
    x1, x2 = x[..., :half], x[..., half:]
    return torch.cat((x1 * cos - x2 * sin, x1 * sin + x2 * cos), dim=-1)


def rope_apply(q: Tensor, k: Tensor, q_positions: Tensor, k_positions: Tensor | None = None,
               rope_base: float = 10000.0, ntk_scale: float = 1.0) -> tuple[Tensor, Tensor]:
    if k_positions is None:
        k_positions = q_positions
    return (rope_rotate(q, q_positions, rope_base, ntk_scale),
            rope_rotate(k, k_positions, rope_base, ntk_scale))


def dynamic_ntk_scale(cfg: ModelConfig, total_len: int) -> float:
    if cfg.ntk_base_window is None:
        return 1.0
    return max(1.0, total_len / cfg.ntk_base_window)


# ------------------------------------------------------------------------- cache


@dataclass
class KVCache:
    """Per-layer unrotated keys and values, shaped [batch, heads, length, head_dim].

    ``token_index`` holds the absolute stream index of each slot; the rotary
    position of a slot is its slot index.
    """

    capacity: int
    sink_count: int = 0
    k: list[Tensor] = field(default_factory=list)
    v: list[Tensor] = field(default_factory=list)
    token_index: list[int] = field(default_factory=list)

    def __post_init__(self):
        if self.sink_count not in (0, SINK_COUNT):
            raise ConfigError(f"sink_count must be 0 or {SINK_COUNT}")

    def __len__(self) -> int:
        return len(self.token_index)

    @property
    def positions(self) -> list[int]:
        return list(range(len(self)))

    def nbytes(self) -> int:
        return nbytes(*self.k, *self.v)

    def clone(self) -> "KVCache":
        return KVCache(self.capacity, self.sink_count, [t.clone() for t in self.k],
                       [t.clone() for t in self.v], list(self.token_index))

    def keep_slots(self, slots: Sequence[int]) -> None:
        idx = torch.as_tensor(list(slots), dtype=torch.long)
        self.k = [t.index_select(2, idx) for t in self.k]
        self.v = [t.index_select(2, idx) for t in self.v]
        self.token_index = [self.token_index[s] for s in slots]


# ------------------------------------------------------------------------- model


class TinyLM:
    """Decoder-only transformer over a flat dict of dense parameters."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        shapes = param_shapes(config)
        if list(params) != list(shapes):
            missing = set(shapes) ^ set(params)
            raise ConfigError(f"parameter set does not match config (differences: {sorted(missing)[:4]})")
        for name, shape in shapes.items():
            if tuple(params[name].shape) != shape:
                raise ConfigError(f"{name}: expected {shape}, got {tuple(params[name].shape)}")
        self.config = config
        self.params = params
        # instrumentation: widest forward pass seen (positions attended over)
        self.max_positions_seen = 0
        self.forward_calls = 0

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int) -> "TinyLM":
        rng = Rng(seed).child("init")
        dt = config.torch_dtype
        resid_std = 0.02 / math.sqrt(2 * config.n_layers)
        params = {}
        for name, shape in param_shapes(config).items():
            if name.endswith("norm"):
                params[name] = torch.ones(shape, dtype=dt)
            elif name.endswith(("attn.o", "ffn.down")):
                params[name] = rng.child(name).normal(shape, resid_std, dt)
            else:
                params[name] = rng.child(name).normal(shape, 0.02, dt)
        return cls(config, params)

    # -- helpers

    def new_cache(self, sink: bool = False) -> KVCache:
        return KVCache(self.config.context_window, SINK_COUNT if sink else 0)

    def param_bytes(self) -> int:
        return nbytes(*self.params.values())

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for name, t in self.params.items():
            h.update(name.encode())
            h.update(t.detach().contiguous().numpy().tobytes())
        return h.hexdigest()

    def to_dtype(self, dtype: str) -> "TinyLM":
        cfg = self.config.replace(dtype=dtype)
        dt = cfg.torch_dtype
        return TinyLM(cfg, {k: v.detach().to(dt).clone() for k, v in self.params.items()})

    def with_config(self, **changes) -> "TinyLM":
        """Share weights under a modified config (e.g. a wider window with NTK scaling)."""
        return TinyLM(self.config.replace(**changes), self.params)

    def _proj(self, x: Tensor, name: str, adapter: "LoraAdapter | None", train: bool) -> Tensor:
        y = x @ self.params[name].T
        if adapter is not None:
            delta = adapter.delta(name, x, train)
            if delta is not None:
                y = y + delta
        return y

    # -- forward

    def forward(self, tokens, cache: KVCache | None = None, adapter: "LoraAdapter | None" = None,
                train: bool = False, meter: MemoryMeter | None = None,
                token_index: Sequence[int] | None = None) -> Tensor:
        """Logits for each new token, conditioned on the cache then on earlier new tokens.

        ``tokens`` is [t] or [batch, t]; logits come back with the same leading
        shape plus a vocab axis. With a cache, the new keys/values are appended.
        """
        cfg = self.config
        toks = torch.as_tensor(tokens, dtype=torch.long)
        squeeze = toks.dim() == 1
        if squeeze:
            toks = toks.unsqueeze(0)
        bsz, t = toks.shape
        if t == 0:
            raise ConfigError("forward needs at least one token")
        if cache is not None and bsz != 1:
            raise ConfigError("cached decoding supports batch size 1 only")
        past = len(cache) if cache is not None else 0
        total = past + t
        if total > cfg.context_window:
            raise CapacityError(
                f"window overflow: {past} cached + {t} new > context_window {cfg.context_window}")
        self.forward_calls += 1
        self.max_positions_seen = max(self.max_positions_seen, total)

        H, hd = cfg.n_heads, cfg.head_dim
        ntk = dynamic_ntk_scale(cfg, total)
        cos, sin = rope_table(total, hd, cfg.rope_base, ntk, cfg.torch_dtype)
        q_cos, q_sin = cos[past:], sin[past:]
        # top-left aligned causal masks only fit when nothing is cached
        mask = None if past == 0 else causal_mask(t, total)
        p = self.params

        x = p["embed"][toks]
        new_k, new_v = [], []
        for i in range(cfg.n_layers):
            pre = f"layers.{i}."
            h = rmsnorm(x, p[pre + "attn_norm"], cfg.rms_eps)
            q = self._proj(h, pre + "attn.q", adapter, train).view(bsz, t, H, hd).transpose(1, 2)
            k = self._proj(h, pre + "attn.k", adapter, train).view(bsz, t, H, hd).transpose(1, 2)
            v = self._proj(h, pre + "attn.v", adapter, train).view(bsz, t, H, hd).transpose(1, 2)
            if past:
                k_all = torch.cat((cache.k[i], k), dim=2)
                v_all = torch.cat((cache.v[i], v), dim=2)
            else:
                k_all, v_all = k, v
            new_k.append(k)
            new_v.append(v)
            qr = _rotate(q, q_cos, q_sin)
            kr = _rotate(k_all, cos, sin)
            attn = F.scaled_dot_product_attention(qr, kr, v_all, attn_mask=mask, is_causal=mask is None)
            attn = attn.transpose(1, 2).reshape(bsz, t, cfg.d_model)
            x = x + self._proj(attn, pre + "attn.o", adapter, train)
            h = rmsnorm(x, p[pre + "ffn_norm"], cfg.rms_eps)
            ff = silu(self._proj(h, pre + "ffn.gate", adapter, train)) * self._proj(h, pre + "ffn.up", adapter, train)
            x = x + self._proj(ff, pre + "ffn.down", adapter, train)
        x = rmsnorm(x, p["final_norm"], cfg.rms_eps)
        logits = self._proj(x, "head", adapter, train)

        if cache is not None:
            cache.k = [torch.cat((cache.k[i], k.detach()), 2) if past else k.detach()
                       for i, k in enumerate(new_k)]
            cache.v = [torch.cat((cache.v[i], v.detach()), 2) if past else v.detach()
                       for i, v in enumerate(new_v)]
            if token_index is None:
                start = cache.token_index[-1] + 1 if cache.token_index else 0
                token_index = range(start, start + t)
            cache.token_index.extend(int(j) for j in token_index)
        if meter is not None:
            meter.record(self.inference_bytes(bsz, t, total, cache, adapter))
        return logits[0] if squeeze else logits

    def inference_bytes(self, bsz: int, t: int, total: int, cache: KVCache | None,
                        adapter: "LoraAdapter | None") -> int:
        """Live bytes at the widest point of a no-grad forward: weights, cache, one layer's transients."""
        cfg = self.config
        es = torch.finfo(cfg.torch_dtype).bits // 8
        kv = cache.nbytes() if cache is not None else 2 * cfg.n_layers * bsz * total * cfg.d_model * es
        acts = bsz * t * (6 * cfg.d_model + 3 * cfg.d_ff) * es
        scores = 2 * bsz * cfg.n_heads * t * total * es
        logits = bsz * t * cfg.vocab_size * es
        extra = adapter.nbytes() if adapter is not None else 0
        return self.param_bytes() + extra + kv + acts + scores + logits


# ------------------------------------------------------------ cache maintenance


@torch.no_grad()
def prefill(model: TinyLM, tokens: Sequence[int], adapter=None, sink: bool = False,
            start_index: int = 0, meter: MemoryMeter | None = None) -> tuple[KVCache, Tensor]:
    cache = model.new_cache(sink)
    logits = model.forward(list(tokens), cache, adapter, meter=meter,
                           token_index=range(start_index, start_index + len(tokens)))
    return cache, logits


@torch.no_grad()
def slide_and_recompute(model: TinyLM, history: Sequence[int], keep: int, adapter=None,
                        sink: bool = False, meter: MemoryMeter | None = None) -> tuple[KVCache, Tensor]:
    """Discard the cache and rebuild it over the last ``keep`` tokens at positions 0..keep-1.

    Returns the fresh cache and the logits of every kept token.
    """
    W = model.config.context_window
    if keep > W:
        raise ConfigError(f"keep={keep} exceeds context window {W}")
    if keep < 1 or keep > len(history):
        raise ConfigError(f"keep={keep} must lie in [1, len(history)={len(history)}]")
    start = len(history) - keep
    return prefill(model, history[start:], adapter, sink, start_index=start, meter=meter)


def sink_evict(cache: KVCache, window: int) -> KVCache:
    """Pin the first four slots and keep only the newest ``window - 4`` others. No recompute."""
    if window <= SINK_COUNT:
        raise ConfigError(f"sink window must exceed {SINK_COUNT}, got {window}")
    if cache.sink_count != SINK_COUNT:
        raise ConfigError("cache was not created with attention sinks")
    n = len(cache)
    if n <= window:
        return cache
    recent = range(n - (window - SINK_COUNT), n)
    cache.keep_slots([*range(SINK_COUNT), *recent])
    return cache


# -------------------------------------------------------------------- checkpoint

MODEL_MAGIC = b"TLMODEL\x00"
FORMAT_VERSION = 1
_CFG_INTS = ("vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "context_window")


def write_tensors(fh, tensors: dict[str, Tensor]) -> None:
    fh.write(struct.pack("<I", len(tensors)))
    for name, t in tensors.items():
        raw = name.encode()
        fh.write(struct.pack("<H", len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<I", t.dim()))
        fh.write(struct.pack(f"<{t.dim()}I", *t.shape))
        fh.write(t.detach().to(torch.float32).contiguous().numpy().astype("<f4").tobytes())


def read_tensors(fh) -> dict[str, Tensor]:
    import numpy as np

    (count,) = struct.unpack("<I", fh.read(4))
    out = {}
    for _ in range(count):
        (ln,) = struct.unpack("<H", fh.read(2))
        name = fh.read(ln).decode()
        (ndim,) = struct.unpack("<I", fh.read(4))
        shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
        n = math.prod(shape)
        data = np.frombuffer(fh.read(4 * n), dtype="<f4").reshape(shape)
        out[name] = torch.from_numpy(data.astype("float32"))
    return out


def save_checkpoint(model: TinyLM, path: str | Path) -> None:
    """Binary layout: magic, u32 version, config (6 x u32, 2 x f64, u32 ntk window or 0),
    then every parameter in fixed order as (name, shape, little-endian f32 data)."""
    cfg = model.config
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<6I", *(getattr(cfg, n) for n in _CFG_INTS)))
        fh.write(struct.pack("<2d", cfg.rope_base, cfg.rms_eps))
        fh.write(struct.pack("<I", cfg.ntk_base_window or 0))
        write_tensors(fh, model.params)


def load_checkpoint(path: str | Path, dtype: str = "float32") -> TinyLM:
    with open(path, "rb") as fh:
        if fh.read(len(MODEL_MAGIC)) != MODEL_MAGIC:
            raise ConfigError(f"{path}: not a model checkpoint")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != FORMAT_VERSION:
            raise ConfigError(f"{path}: unsupported checkpoint version {version}")
        ints = struct.unpack("<6I", fh.read(24))
        rope_base, rms_eps = struct.unpack("<2d", fh.read(16))
        (ntk,) = struct.unpack("<I", fh.read(4))
        cfg = ModelConfig(**dict(zip(_CFG_INTS, ints)), rope_base=rope_base, rms_eps=rms_eps,
                          ntk_base_window=ntk or None, dtype=dtype)
        params = read_tensors(fh)
    dt = cfg.torch_dtype
    return TinyLM(cfg, {k: v.to(dt) for k, v in params.items()})
