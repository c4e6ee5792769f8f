"""Independent reference implementations used as test oracles.

Each one is written from the definitions with explicit loops, sharing no code
with the package beyond the parameter dict it reads.
"""

import math

import numpy as np
import torch


def _rms(x, g, eps):
    return x / torch.sqrt((x * x).mean() + eps) * g


def _rot(x, pos, base):
    hd = x.shape[-1]
    half = hd // 2
    out = x.clone()
    for j in range(half):
        theta = pos / base ** (2 * j / hd)
        c, s = math.cos(theta), math.sin(theta)
        out[j] = x[j] * c - x[j + half] * s
        out[j + half] = x[j] * s + x[j + half] * c
    return out


class StreamingReference:
    """Token-at-a-time decoder keeping unrotated keys per slot.

    When the store already holds ``capacity`` slots, the oldest slot after the
    ``sink`` pinned ones is dropped before the new token enters. Rotary
    positions are the current slot indices.
    """

    def __init__(self, params, cfg, capacity, sink=0, adapter=None):
        self.p = {k: v.double() for k, v in params.items()}
        self.cfg = cfg
        self.capacity = capacity
        self.sink = sink
        self.adapter = adapter
        self.keys = [[] for _ in range(cfg.n_layers)]
        self.vals = [[] for _ in range(cfg.n_layers)]
        self.tokens = []

    def _lin(self, name, x):
        y = self.p[name] @ x
        if self.adapter is not None and name in self.adapter.factors:
            A, B = self.adapter.factors[name]
            y = y + self.adapter.scaling * (B.detach().double() @ (A.detach().double() @ x))
        return y

    def step(self, token):
        cfg, p = self.cfg, self.p
        if len(self.tokens) == self.capacity:
            drop = self.sink if self.sink else 0
            for layer in range(cfg.n_layers):
                del self.keys[layer][drop]
                del self.vals[layer][drop]
            del self.tokens[drop]
        H, hd = cfg.n_heads, cfg.d_model // cfg.n_heads
        x = p["embed"][token].clone()
        n = len(self.tokens) + 1
        for layer in range(cfg.n_layers):
            pre = f"layers.{layer}."
            h = _rms(x, p[pre + "attn_norm"], cfg.rms_eps)
            q = self._lin(pre + "attn.q", h)
            k = self._lin(pre + "attn.k", h)
            v = self._lin(pre + "attn.v", h)
            self.keys[layer].append(k)
            self.vals[layer].append(v)
            heads = []
            for a in range(H):
                sl = slice(a * hd, (a + 1) * hd)
                qa = _rot(q[sl], n - 1, cfg.rope_base)
                scores = torch.tensor([
                    float(qa @ _rot(self.keys[layer][s][sl], s, cfg.rope_base)) / math.sqrt(hd)
                    for s in range(n)], dtype=torch.float64)
                w = torch.softmax(scores, 0)
                heads.append(sum(w[s] * self.vals[layer][s][sl] for s in range(n)))
            x = x + self._lin(pre + "attn.o", torch.cat(heads))
            h = _rms(x, p[pre + "ffn_norm"], cfg.rms_eps)
            g = self._lin(pre + "ffn.gate", h)
            x = x + self._lin(pre + "ffn.down", g * torch.sigmoid(g) * self._lin(pre + "ffn.up", h))
        self.tokens.append(token)
        return self._lin("head", _rms(x, p["final_norm"], cfg.rms_eps))


def prompt_updates(prompt_len, chunk, input_length, min_tail=0.25):
    """Updates made while pretraining on the prompt part outside the input window."""
    outside = prompt_len - input_length
    if outside <= 0:
        return 0
    full, tail = divmod(outside, chunk)
    return full + (1 if tail and tail >= min_tail * chunk else 0)


def simulate_schedule(prompt_len, n_tokens, chunk, input_length, window, cache_reuse):
    """Pure bookkeeping of the chunked loop: per emitted token, (adapter version, window start, window end).

    The window is the span of stream tokens the prediction conditions on.
    ``start`` is the first stream index still in the window after prefill of
    the last ``min(input_length, prompt_len)`` prompt tokens.
    """
    version = prompt_updates(prompt_len, chunk, input_length)
    m = 0
    i = prompt_len
    start = prompt_len - min(input_length, prompt_len)
    log = []
    for _ in range(n_tokens):
        # predicting token i needs tokens start..i-1 in the cache
        if i - start > window:
            start = i - input_length
        log.append((version, start, i))
        i += 1
        m += 1
        if m == chunk:
            version += 1
            m = 0
            if not cache_reuse:
                start = i - min(input_length, i)
    return log


def bleu_by_hand(cand, ref, max_n=4):
    logp = 0.0
    for n in range(1, max_n + 1):
        cg = [tuple(cand[i:i + n]) for i in range(len(cand) - n + 1)]
        rg = [tuple(ref[i:i + n]) for i in range(len(ref) - n + 1)]
        hit = 0
        pool = list(rg)
        for g in cg:
            if g in pool:
                pool.remove(g)
                hit += 1
        if not cg or hit == 0:
            return 0.0
        logp += math.log(hit / len(cg)) / max_n
    bp = 1.0 if len(cand) > len(ref) else math.exp(1 - len(ref) / len(cand))
    return bp * math.exp(logp)


def enumerate_nll(logits_fn, tokens):
    """Per-token NLL by direct softmax of full-prefix logits (no windowing)."""
    out = []
    for t in range(1, len(tokens)):
        logits = np.asarray(logits_fn(tokens[:t]), dtype=np.float64)
        z = logits - logits.max()
        out.append(float(-(z[tokens[t]] - math.log(np.exp(z).sum()))))
    return out
