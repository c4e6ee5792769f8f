"""Flat dotted-key run configuration.

A config file holds one ``section.key=value`` pair per line; ``#`` starts a
comment. Sections: ``model``, ``engine``, ``lora``, ``corpus``, ``pretrain``,
plus top-level ``seed``, ``checkpoint`` and ``boundaries``. Unknown keys are
rejected. ``TEMPLORA_SEED`` in the environment overrides ``seed``.

Example::

    model.d_model=128
    engine.chunk_size=128
    lora.targets=q,k,v,o
    corpus.family=glossary
"""

from __future__ import annotations

import dataclasses
import hashlib
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from ..corpus import GlossarySpec, NovelSpec
from ..engine import EngineConfig
from ..lora import LoraConfig
from ..model import ModelConfig
from ..tensor_core import ConfigError

# the miniature model every benchmark defaults to (fits a single CPU core)
DESK_MODEL = ModelConfig(d_model=128, n_layers=4, n_heads=4, d_ff=352)
DESK_BOUNDARIES = (2048, 6144, 10240)


@dataclass
class PretrainConfig:
    steps: int = 600
    batch_size: int = 8
    lr: float = 3e-3
    warmup: int = 50


@dataclass
class RunConfig:
    model: ModelConfig = DESK_MODEL
    engine: EngineConfig = field(default_factory=EngineConfig)
    family: str = "glossary"
    corpus: GlossarySpec | NovelSpec = field(default_factory=GlossarySpec)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    seed: int = 0
    checkpoint: str | None = None
    boundaries: tuple[int, ...] = DESK_BOUNDARIES

    def as_flat(self) -> dict[str, Any]:
        flat: dict[str, Any] = {"seed": self.seed, "checkpoint": self.checkpoint,
                                "boundaries": ",".join(map(str, self.boundaries)),
                                "corpus.family": self.family}
        for prefix, obj in (("model", self.model), ("engine", self.engine), ("corpus", self.corpus),
                            ("pretrain", self.pretrain), ("lora", self.engine.lora)):
            for f in dataclasses.fields(obj):
                if prefix == "engine" and f.name == "lora":
                    continue
                value = getattr(obj, f.name)
                flat[f"{prefix}.{f.name}"] = ",".join(value) if isinstance(value, tuple) else value
        return flat

    def digest(self) -> str:
        text = "\n".join(f"{k}={v}" for k, v in sorted(self.as_flat().items()))
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def dump(self) -> str:
        return "".join(f"{k}={'' if v is None else v}\n" for k, v in sorted(self.as_flat().items()))


def _convert(raw: str, like: Any, key: str) -> Any:
    raw = raw.strip()
    try:
        if isinstance(like, bool):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
        if isinstance(like, tuple):
            return tuple(x.strip() for x in raw.split(",") if x.strip())
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(like).__name__}") from None
    if like is None:
        if raw.lower() in ("", "none"):
            return None
        try:
            return int(raw)
        except ValueError:
            return raw
    return raw


def _apply(obj, section: str, values: dict[str, str]):
    names = {f.name: f for f in dataclasses.fields(obj)}
    changes = {}
    for key, raw in values.items():
        if key not in names or (section == "engine" and key == "lora"):
            raise ConfigError(f"unknown config key {section}.{key}")
        changes[key] = _convert(raw, getattr(obj, key), f"{section}.{key}")
    return dataclasses.replace(obj, **changes)


def parse_lines(text: str) -> dict[str, str]:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def build_config(pairs: dict[str, str], env: dict[str, str] | None = None) -> RunConfig:
    env = os.environ if env is None else env
    sections: dict[str, dict[str, str]] = {}
    top: dict[str, str] = {}
    for key, value in pairs.items():
        if "." in key:
            sec, name = key.split(".", 1)
            sections.setdefault(sec, {})[name] = value
        else:
            top[key] = value
    unknown_sections = set(sections) - {"model", "engine", "lora", "corpus", "pretrain"}
    if unknown_sections:
        raise ConfigError(f"unknown config section(s): {sorted(unknown_sections)}")
    unknown_top = set(top) - {"seed", "checkpoint", "boundaries"}
    if unknown_top:
        raise ConfigError(f"unknown config key(s): {sorted(unknown_top)}")

    model = _apply(DESK_MODEL, "model", sections.get("model", {}))
    lora = _apply(LoraConfig(), "lora", sections.get("lora", {}))
    engine = _apply(EngineConfig(), "engine", sections.get("engine", {}))
    corpus_vals = dict(sections.get("corpus", {}))
    family = corpus_vals.pop("family", "glossary")
    if family not in ("glossary", "novel"):
        raise ConfigError("corpus.family must be 'glossary' or 'novel'")
    base_spec = GlossarySpec() if family == "glossary" else NovelSpec()
    corpus_vals.setdefault("vocab_size", str(model.vocab_size))
    corpus = _apply(base_spec, "corpus", corpus_vals)
    pretrain = _apply(PretrainConfig(), "pretrain", sections.get("pretrain", {}))

    seed = int(top.get("seed", 0))
    if env.get("TEMPLORA_SEED"):
        try:
            seed = int(env["TEMPLORA_SEED"])
        except ValueError:
            raise ConfigError("TEMPLORA_SEED must be an integer") from None
    boundaries = DESK_BOUNDARIES
    if "boundaries" in top:
        boundaries = tuple(int(x) for x in top["boundaries"].split(",") if x.strip())
    checkpoint = top.get("checkpoint") or None
    engine = engine.replace(lora=lora, seed=seed)
    if corpus.vocab_size != model.vocab_size:
        raise ConfigError("corpus.vocab_size must equal model.vocab_size")
    corpus.validate()
    return RunConfig(model, engine, family, corpus, pretrain, seed, checkpoint, boundaries)


def load_config(path: str | Path | None = None, overrides: dict[str, str] | None = None,
                env: dict[str, str] | None = None) -> RunConfig:
    pairs = parse_lines(Path(path).read_text()) if path else {}
    pairs.update(overrides or {})
    return build_config(pairs, env)
