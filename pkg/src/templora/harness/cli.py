"""Command-line entry point: ``templora <subcommand> [options]``.

Exit codes: 0 success, 2 configuration error (including usage errors), 1 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from .. import corpus as corpus_mod
from ..engine import (generate_segment_mode, run_parallelized, start_session,
                      teacher_forced_stream_ppl, validate, write_event_log, write_manifest)
from ..metrics import segment_report, sliding_window_nll
from ..model import load_checkpoint, save_checkpoint
from ..tensor_core import ConfigError
from . import bench
from .config import RunConfig, load_config
from .reports import compare_reports, corpus_hash, format_table, write_rows

log = logging.getLogger("templora")


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key=value config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--seed", type=int, help="run seed (TEMPLORA_SEED still wins)")
    common.add_argument("--out", help="output path")
    common.add_argument("--checkpoint", help="base model checkpoint")
    common.add_argument("-v", "--verbose", action="store_true")

    docs = argparse.ArgumentParser(add_help=False)
    docs.add_argument("--doc", action="append", default=[], help="token stream file (repeatable)")
    docs.add_argument("--n-docs", type=int, default=1, help="generate this many eval documents when no --doc")

    p = argparse.ArgumentParser(prog="templora", description="Temporary low-rank adaptation for long-text generation")
    sub = p.add_subparsers(dest="command", metavar="command")
    sub.required = True

    sp = sub.add_parser("pretrain", parents=[common], help="train a base model on synthetic documents")
    sp.add_argument("--steps", type=int)

    sp = sub.add_parser("gen-corpus", parents=[common], help="write synthetic documents as token streams")
    sp.add_argument("--count", type=int, default=1)
    sp.add_argument("--split", default="eval", choices=corpus_mod.SPLITS)

    sp = sub.add_parser("generate", parents=[common, docs], help="generate with a temporary adapter")
    sp.add_argument("--n-tokens", type=int, default=256)
    sp.add_argument("--prompt-length", type=int, default=512, help="prompt tokens taken from the document")
    sp.add_argument("--segments", action="store_true", help="translate glossary segments one update each")

    sp = sub.add_parser("eval-ppl", parents=[common, docs], help="teacher-forced stream or sliding-window PPL")
    sp.add_argument("--base", action="store_true", help="no adapter (reference run)")
    sp.add_argument("--sliding", action="store_true", help="plain sliding-window PPL of the base model")
    sp.add_argument("--stride", type=int)

    sp = sub.add_parser("bench-window", parents=[common, docs], help="PPL, memory, latency vs window")
    sp.add_argument("--windows", type=_ints, default=[512, 256, 128])

    sp = sub.add_parser("bench-chunk", parents=[common, docs], help="PPL vs chunk size")
    sp.add_argument("--chunk-sizes", type=_ints, default=[64, 128, 256])
    sp.add_argument("--seeds", type=_ints, default=[0, 1, 2, 3, 4])

    sp = sub.add_parser("bench-traincost", parents=[common, docs], help="chunk training vs generation cost")
    sp.add_argument("--chunk-sizes", type=_ints, default=[64, 128, 256])
    sp.add_argument("--batch-tokens", type=_ints, default=[])
    sp.add_argument("--repeats", type=int, default=3)

    sp = sub.add_parser("sweep", parents=[common, docs], help="hyper-parameter sensitivity")
    sp.add_argument("--axis", required=True, choices=bench.SWEEP_AXES)
    sp.add_argument("--values", type=_floats, required=True)

    sp = sub.add_parser("bench-ntk", parents=[common, docs], help="dynamic-NTK extension vs windowed baseline")
    sp.add_argument("--factors", type=_ints, default=[1, 2, 4, 8])
    sp.add_argument("--stride", type=int)

    sp = sub.add_parser("compare", help="relative change between two EvalReport CSVs")
    sp.add_argument("base")
    sp.add_argument("new")
    return p


# ----------------------------------------------------------------- helpers


def _config(args) -> RunConfig:
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.checkpoint:
        overrides["checkpoint"] = args.checkpoint
    return load_config(args.config, overrides)


def _model(cfg: RunConfig):
    if not cfg.checkpoint:
        raise ConfigError("a base model checkpoint is required (--checkpoint or checkpoint=...)")
    return load_checkpoint(cfg.checkpoint, cfg.model.dtype)


def _docs(args, cfg: RunConfig) -> tuple[list[list[int]], list[list[int]] | None]:
    """Token lists plus their segment boundaries (None when unknown)."""
    if args.doc:
        out, bounds = [], []
        for path in args.doc:
            toks, vocab, b = corpus_mod.read_tokens(path)
            if vocab > cfg.model.vocab_size:
                raise ConfigError(f"{path}: vocab {vocab} exceeds model vocab {cfg.model.vocab_size}")
            out.append(toks.tolist())
            bounds.append(b)
        return out, bounds
    docs = [corpus_mod.make_doc(corpus_mod._with(cfg.corpus, seed=cfg.seed + j)) for j in range(args.n_docs)]
    return [d.tokens.tolist() for d in docs], [d.boundaries for d in docs]


def _metadata(cfg: RunConfig, docs) -> dict:
    return {"config_hash": cfg.digest(), "corpus_hash": corpus_hash(docs), "seed": cfg.seed,
            "memory": "engine-counted live tensor bytes"}


def _out(args, default: str) -> Path:
    return Path(args.out or default)


# --------------------------------------------------------------- commands


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    steps = args.steps or cfg.pretrain.steps
    pc = cfg.pretrain
    model, losses = corpus_mod.pretrain_base(cfg.model, cfg.corpus, steps, cfg.seed, batch_size=pc.batch_size,
                                             lr=pc.lr, warmup=pc.warmup)
    out = _out(args, "model.tlm")
    save_checkpoint(model, out)
    Path(str(out) + ".losses.csv").write_text("step,loss\n" + "".join(f"{i},{x:.6f}\n" for i, x in enumerate(losses)))
    print(f"wrote {out} (final loss {losses[-1]:.4f})")
    return 0


def cmd_gen_corpus(args) -> int:
    cfg = _config(args)
    out = _out(args, "corpus")
    out.mkdir(parents=True, exist_ok=True)
    for j in range(args.count):
        doc = corpus_mod.make_doc(corpus_mod._with(cfg.corpus, seed=cfg.seed + j, split=args.split))
        path = out / f"{cfg.family}_{args.split}_{cfg.seed + j}.tlc"
        corpus_mod.write_tokens(path, doc.tokens, cfg.model.vocab_size, doc.boundaries or None)
        print(path)
    return 0


def cmd_generate(args) -> int:
    cfg = _config(args)
    model = _model(cfg)
    docs, bounds = _docs(args, cfg)
    doc = docs[0]
    out = _out(args, "generated.tlc")
    engine = validate(cfg.engine, model)
    if args.segments:
        if not bounds[0]:
            raise ConfigError("segment mode needs a document with segment boundaries")
        d = corpus_mod.Document(np.asarray(doc), bounds[0])
        pairs = d.segment_pairs()
        session = start_session(model, engine, doc[:1])
        hyps = generate_segment_mode(session, pairs)
        tokens = [t for h in hyps for t in h]
    else:
        prompt = doc[:args.prompt_length]
        session = start_session(model, engine, prompt)
        if engine.deployment == "parallelized":
            tokens, schedule = run_parallelized(session, args.n_tokens)
            Path(str(out) + ".schedule.json").write_text(json.dumps(schedule.points) + "\n")
        else:
            tokens = session.generate(args.n_tokens)
    corpus_mod.write_tokens(out, tokens, cfg.model.vocab_size)
    write_event_log(str(out) + ".events.jsonl", session.events)
    write_manifest(str(out) + ".manifest.json", engine,
                   {"run_config": cfg.as_flat(), "adapter_updates": session.k, "tokens": len(tokens)})
    session.finish()
    print(f"wrote {len(tokens)} tokens to {out} ({session.k} adapter updates)")
    return 0


def cmd_eval_ppl(args) -> int:
    cfg = _config(args)
    model = _model(cfg)
    docs, _ = _docs(args, cfg)
    positions, nll = [], []
    for doc in docs:
        if args.sliding:
            W = model.config.context_window
            stride = args.stride or validate(cfg.engine, model).chunk_size
            x = sliding_window_nll(model, doc, W, stride)
            positions += list(range(1, len(doc)))
            nll += x
        else:
            r = teacher_forced_stream_ppl(model, doc, cfg.engine.replace(adapt=not args.base), cfg.boundaries)
            positions += r.positions
            nll += r.nll
    report = segment_report(positions, nll, cfg.boundaries)
    report.metadata.update(_metadata(cfg, docs))
    report.metadata["variant"] = "sliding" if args.sliding else ("base" if args.base else "tl")
    out = _out(args, "report.csv")
    report.save(out)
    print(report.to_csv(), end="")
    return 0


def cmd_bench_window(args) -> int:
    cfg = _config(args)
    model = _model(cfg)
    docs, _ = _docs(args, cfg)
    rows = bench.bench_window(model, docs, args.windows, cfg.engine, cfg.boundaries)
    write_rows(_out(args, "bench_window.csv"), rows, _metadata(cfg, docs))
    return 0


def cmd_bench_chunk(args) -> int:
    cfg = _config(args)
    model = _model(cfg)
    docs, _ = _docs(args, cfg)
    rows = bench.bench_chunk(model, docs, args.chunk_sizes, cfg.engine, args.seeds, cfg.boundaries)
    write_rows(_out(args, "bench_chunk.csv"), rows, _metadata(cfg, docs))
    return 0


def cmd_bench_traincost(args) -> int:
    cfg = _config(args)
    model = _model(cfg)
    docs, _ = _docs(args, cfg)
    batches = args.batch_tokens or [None]
    rows = bench.bench_traincost(model, docs[0], args.chunk_sizes, cfg.engine, batches, args.repeats)
    write_rows(_out(args, "bench_traincost.csv"), rows, _metadata(cfg, docs[:1]))
    return 0


def cmd_sweep(args) -> int:
    cfg = _config(args)
    model = _model(cfg)
    docs, _ = _docs(args, cfg)
    rows = bench.sweep_hparams(model, docs, args.axis, args.values, cfg.engine, cfg.boundaries)
    write_rows(_out(args, f"sweep_{args.axis}.csv"), rows, _metadata(cfg, docs))
    return 0


def cmd_bench_ntk(args) -> int:
    cfg = _config(args)
    model = _model(cfg)
    docs, _ = _docs(args, cfg)
    rows = bench.bench_ntk(model, docs[0], args.factors, args.stride, cfg.seed)
    write_rows(_out(args, "bench_ntk.csv"), rows, _metadata(cfg, docs[:1]))
    return 0


def cmd_compare(args) -> int:
    print(format_table(compare_reports(args.base, args.new)))
    return 0


COMMANDS = {
    "pretrain": cmd_pretrain, "gen-corpus": cmd_gen_corpus, "generate": cmd_generate,
    "eval-ppl": cmd_eval_ppl, "bench-window": cmd_bench_window, "bench-chunk": cmd_bench_chunk,
    "bench-traincost": cmd_bench_traincost, "sweep": cmd_sweep, "bench-ntk": cmd_bench_ntk,
    "compare": cmd_compare,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - top-level boundary
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
