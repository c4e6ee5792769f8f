"""Perplexity, position-bucketed reports, BLEU and relative change."""

from __future__ import annotations

import csv
import io
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import torch

from .tensor_core import ConfigError, token_nll

CSV_COLUMNS = ("segment_start", "segment_end", "n_tokens", "ppl")


@torch.no_grad()
def sliding_window_nll(model, tokens: Sequence[int], window: int, stride: int, adapter=None) -> list[float]:
    """NLL of tokens ``1..N-1``, each scored once from the placement where it sits in the final ``stride`` slots."""
    n = len(tokens)
    if n < 2:
        raise ConfigError("need at least two tokens")
    W = model.config.context_window
    if not 1 <= stride <= window <= W:
        raise ConfigError(f"need 1 <= stride <= window <= W, got stride={stride} window={window} W={W}")
    toks = torch.as_tensor([int(t) for t in tokens], dtype=torch.long)
    out: list[float] = []
    nxt = 1
    while nxt < n:
        end = min(nxt + stride, n)
        begin = max(0, end - 1 - window)
        logits = model.forward(toks[begin:end - 1], adapter=adapter)
        first = nxt - 1 - begin
        out.extend(token_nll(logits[first:], toks[nxt:end]).tolist())
        nxt = end
    return out


def sliding_window_ppl(model, tokens: Sequence[int], window: int, stride: int, adapter=None) -> float:
    nll = sliding_window_nll(model, tokens, window, stride, adapter)
    return math.exp(sum(nll) / len(nll))


@dataclass
class EvalReport:
    boundaries: list[int]
    segment_nll: list[float]
    segment_tokens: list[int]
    overall_nll: float
    n_tokens: int
    bleu: float | None = None
    metadata: dict = field(default_factory=dict)

    @property
    def segment_ppl(self) -> list[float]:
        return [math.exp(x) if c else math.nan for x, c in zip(self.segment_nll, self.segment_tokens)]

    @property
    def overall_ppl(self) -> float:
        return math.exp(self.overall_nll)

    def spans(self) -> list[tuple[int, int | None]]:
        edges = [0] + list(self.boundaries)
        return [(edges[j], edges[j + 1] if j + 1 < len(edges) else None) for j in range(len(edges))]

    def to_csv(self) -> str:
        buf = io.StringIO()
        for key, value in sorted(self.metadata.items()):
            buf.write(f"# {key}={value}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for (lo, hi), c, p in zip(self.spans(), self.segment_tokens, self.segment_ppl):
            w.writerow([lo, "" if hi is None else hi, c, f"{p:.6f}"])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({
            "segments": [{"start": lo, "end": hi, "n_tokens": c, "ppl": p}
                         for (lo, hi), c, p in zip(self.spans(), self.segment_tokens, self.segment_ppl)],
            "overall_ppl": self.overall_ppl, "n_tokens": self.n_tokens,
            "bleu": self.bleu, "metadata": self.metadata,
        }, indent=2, sort_keys=True, default=str)

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.write_text(self.to_csv() if path.suffix == ".csv" else self.to_json() + "\n")


def segment_report(positions: Sequence[int], nll: Sequence[float], boundaries: Sequence[int] = ()) -> EvalReport:
    """Bucket per-token NLL by absolute position; bucket j covers ``[b[j-1], b[j])``."""
    if len(positions) != len(nll):
        raise ConfigError("positions and nll differ in length")
    if not nll:
        raise ConfigError("empty NLL stream")
    b = [int(x) for x in boundaries]
    if any(y <= x for x, y in zip(b, b[1:])):
        raise ConfigError("boundaries must be strictly increasing")
    sums = [0.0] * (len(b) + 1)
    counts = [0] * (len(b) + 1)
    for p, x in zip(positions, nll):
        j = sum(1 for edge in b if p >= edge)
        sums[j] += x
        counts[j] += 1
    seg = [s / c if c else math.nan for s, c in zip(sums, counts)]
    return EvalReport(b, seg, counts, math.fsum(nll) / len(nll), len(nll))


def _ngrams(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidate: Sequence, reference: Sequence, max_n: int = 4) -> float:
    """Single-reference BLEU without smoothing."""
    if not reference:
        raise ConfigError("reference must be nonempty")
    if not candidate:
        return 0.0
    log_p = 0.0
    for n in range(1, max_n + 1):
        cand = _ngrams(candidate, n)
        total = sum(cand.values())
        if total == 0:
            return 0.0
        ref = _ngrams(reference, n)
        hit = sum(min(c, ref[g]) for g, c in cand.items())
        if hit == 0:
            return 0.0
        log_p += math.log(hit / total) / max_n
    c, r = len(candidate), len(reference)
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return bp * math.exp(log_p)


def corpus_bleu(candidates: Sequence[Sequence], references: Sequence[Sequence], max_n: int = 4) -> float:
    """Corpus-level BLEU: n-gram counts and lengths pooled before the geometric mean."""
    if len(candidates) != len(references) or not references:
        raise ConfigError("need equally many nonempty candidate and reference lists")
    hits = [0] * max_n
    totals = [0] * max_n
    c_len = r_len = 0
    for cand, ref in zip(candidates, references):
        c_len += len(cand)
        r_len += len(ref)
        for n in range(1, max_n + 1):
            cg, rg = _ngrams(cand, n), _ngrams(ref, n)
            hits[n - 1] += sum(min(c, rg[g]) for g, c in cg.items())
            totals[n - 1] += sum(cg.values())
    if c_len == 0 or min(hits) == 0:
        return 0.0
    log_p = sum(math.log(h / t) for h, t in zip(hits, totals)) / max_n
    bp = 1.0 if c_len > r_len else math.exp(1.0 - r_len / c_len)
    return bp * math.exp(log_p)


def relative_change(base: float, new: float) -> float:
    """Signed percent change of ``new`` against ``base``."""
    if base == 0:
        raise ConfigError("relative change against a zero base is undefined")
    return (new - base) / base * 100.0


def format_change(percent: float, digits: int = 1) -> str:
    """Signed percent cut (not rounded) to ``digits`` decimals, e.g. -23.853 -> "-23.8%".

    Published PPL and BLEU change tables quote figures cut toward zero; cutting
    reproduces them where rounding would drift by one unit in the last place.
    """
    scale = 10 ** digits
    cut = math.trunc(percent * scale + math.copysign(1e-9, percent)) / scale
    return f"{cut:+.{digits}f}%"
