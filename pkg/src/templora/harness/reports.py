"""Benchmark rows, CSV output with ``#`` metadata headers, and report comparison."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from ..metrics import format_change, relative_change
from ..tensor_core import ConfigError


@dataclass
class BenchRow:
    variant: str
    window: int
    chunk_size: int
    rank: int
    lr: float
    epochs: int
    flags: str
    ppl: float
    peak_memory: int
    latency_per_1k: float
    train_time_per_chunk: float
    seed: int
    status: str = "ok"


BENCH_COLUMNS = tuple(f.name for f in dataclasses.fields(BenchRow))


def corpus_hash(docs: Sequence[Sequence[int]]) -> str:
    h = hashlib.sha256()
    for d in docs:
        h.update(np.asarray(d, dtype="<u4").tobytes())
        h.update(b"|")
    return h.hexdigest()[:16]


def _fmt(value) -> str:
    if isinstance(value, float):
        return "nan" if math.isnan(value) else f"{value:.6g}"
    return str(value)


def rows_to_csv(rows: Sequence[BenchRow], metadata: dict | None = None) -> str:
    buf = io.StringIO()
    for key, value in sorted((metadata or {}).items()):
        buf.write(f"# {key}={value}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(BENCH_COLUMNS)
    for r in rows:
        w.writerow([_fmt(getattr(r, c)) for c in BENCH_COLUMNS])
    return buf.getvalue()


def write_rows(path: str | Path, rows: Sequence[BenchRow], metadata: dict | None = None) -> None:
    Path(path).write_text(rows_to_csv(rows, metadata))


def read_csv(path: str | Path) -> tuple[dict[str, str], list[dict[str, str]]]:
    """Split a report into its ``# key=value`` header and its data rows."""
    meta: dict[str, str] = {}
    body = []
    for line in Path(path).read_text().splitlines():
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition("=")
            meta[key.strip()] = value.strip()
        elif line.strip():
            body.append(line)
    return meta, list(csv.DictReader(body))


def compare_reports(base_path: str | Path, new_path: str | Path) -> list[dict[str, str]]:
    """Per-row relative change of ``ppl`` between two EvalReport CSVs over the same corpus."""
    base_meta, base_rows = read_csv(base_path)
    new_meta, new_rows = read_csv(new_path)
    b_hash, n_hash = base_meta.get("corpus_hash"), new_meta.get("corpus_hash")
    if not b_hash or not n_hash:
        raise ConfigError("both reports need a corpus_hash header")
    if b_hash != n_hash:
        raise ConfigError(f"corpus hashes differ ({b_hash} vs {n_hash}); refusing to compare")
    if len(base_rows) != len(new_rows):
        raise ConfigError("reports have different segment layouts")
    out = []
    for b, n in zip(base_rows, new_rows):
        if (b.get("segment_start"), b.get("segment_end")) != (n.get("segment_start"), n.get("segment_end")):
            raise ConfigError("reports have different segment layouts")
        bp, np_ = float(b["ppl"]), float(n["ppl"])
        out.append({"segment_start": b["segment_start"], "segment_end": b["segment_end"],
                    "base_ppl": f"{bp:.4f}", "new_ppl": f"{np_:.4f}",
                    "relative_change": format_change(relative_change(bp, np_))})
    return out


def format_table(rows: Sequence[dict[str, str]]) -> str:
    if not rows:
        return ""
    cols = list(rows[0])
    widths = [max(len(c), *(len(r[c]) for r in rows)) for c in cols]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    lines += ["  ".join(r[c].ljust(w) for c, w in zip(cols, widths)) for r in rows]
    return "\n".join(lines)
