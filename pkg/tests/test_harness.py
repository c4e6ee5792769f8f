import math

import numpy as np
import pytest

from templora.corpus import GlossarySpec, gen_glossary_doc, read_tokens, write_tokens
from templora.engine import EngineConfig
from templora.harness import bench
from templora.harness.cli import main
from templora.harness.config import DESK_BOUNDARIES, build_config, load_config, parse_lines
from templora.harness.reports import BENCH_COLUMNS, compare_reports, read_csv
from templora.lora import LoraConfig
from templora.model import ModelConfig, TinyLM, save_checkpoint
from templora.tensor_core import ConfigError

TINY = ModelConfig(vocab_size=128, d_model=16, n_layers=1, n_heads=2, d_ff=32, context_window=32)
TINY_SETTINGS = [
    "model.vocab_size=128", "model.d_model=16", "model.n_layers=1", "model.n_heads=2", "model.d_ff=32",
    "model.context_window=32", "engine.chunk_size=8", "engine.train_input_length=8",
    "corpus.mapping_size=8", "corpus.filler_size=32", "corpus.length=200", "boundaries=50,100",
    "lora.rank=4", "lora.alpha=4",
]
FAST = EngineConfig(chunk_size=8, train_input_length=8, lora=LoraConfig(rank=4, alpha=4, lr=5e-3))


def _sets(*extra):
    out = []
    for item in TINY_SETTINGS + list(extra):
        out += ["--set", item]
    return out


@pytest.fixture(scope="module")
def ckpt(tmp_path_factory):
    path = tmp_path_factory.mktemp("ckpt") / "tiny.tlm"
    save_checkpoint(TinyLM.initialize(TINY, 0), path)
    return str(path)


@pytest.fixture(scope="module")
def tiny_docs():
    spec = GlossarySpec(vocab_size=128, mapping_size=8, filler_size=32, length=160)
    return [gen_glossary_doc(GlossarySpec(**{**spec.__dict__, "seed": s})).tokens.tolist() for s in range(2)]


def test_parse_lines_and_defaults():
    pairs = parse_lines("# comment\nengine.chunk_size = 64  # inline\n\nseed=3\n")
    assert pairs == {"engine.chunk_size": "64", "seed": "3"}
    cfg = build_config(pairs, env={})
    assert cfg.engine.chunk_size == 64 and cfg.seed == 3 and cfg.engine.seed == 3
    assert cfg.boundaries == DESK_BOUNDARIES
    with pytest.raises(ConfigError):
        parse_lines("no equals sign")


def test_config_file_and_overrides(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("lora.targets=q,v\nlora.lr=0.01\nengine.attention_sink=true\nengine.cache_reuse=true\n")
    cfg = load_config(path, {"lora.rank": "8"}, env={})
    assert cfg.engine.lora.targets == ("q", "v") and cfg.engine.lora.lr == 0.01
    assert cfg.engine.lora.rank == 8 and cfg.engine.attention_sink


def test_env_seed_override():
    assert build_config({"seed": "4"}, env={"TEMPLORA_SEED": "11"}).seed == 11
    with pytest.raises(ConfigError):
        build_config({}, env={"TEMPLORA_SEED": "x"})


@pytest.mark.parametrize("pairs", [{"engine.nope": "1"}, {"bogus.key": "1"}, {"unknown": "1"},
                                   {"engine.chunk_size": "abc"}, {"corpus.family": "poetry"},
                                   {"corpus.vocab_size": "99"}])
def test_bad_config_rejected(pairs):
    with pytest.raises(ConfigError):
        build_config(pairs, env={})


def test_config_digest_tracks_changes():
    a = build_config({}, env={})
    b = build_config({"engine.chunk_size": "64"}, env={})
    assert a.digest() == build_config({}, env={}).digest() != b.digest()
    assert "engine.chunk_size=64" in b.dump()


def test_cli_unknown_subcommand_exits_2(capsys):
    assert main(["frobnicate"]) == 2
    assert "usage" in capsys.readouterr().err


def test_cli_invalid_window_constraint_exits_2(ckpt, capsys):
    code = main(["eval-ppl", "--checkpoint", ckpt, *_sets("engine.chunk_size=24", "engine.input_length=16")])
    assert code == 2
    assert "input_length + chunk_size" in capsys.readouterr().err


def test_cli_missing_checkpoint_is_config_error(capsys):
    assert main(["eval-ppl", *_sets()]) == 2


def test_cli_runtime_error_exits_1(tmp_path, capsys):
    assert main(["eval-ppl", "--checkpoint", str(tmp_path / "absent.tlm"), *_sets()]) == 1


def test_cli_gen_corpus_and_eval_ppl(ckpt, tmp_path, capsys):
    corpus_dir = tmp_path / "corpus"
    assert main(["gen-corpus", "--count", "1", "--out", str(corpus_dir), *_sets()]) == 0
    doc = next(corpus_dir.glob("*.tlc"))
    toks, vocab, bounds = read_tokens(doc)
    assert vocab == 128 and len(toks) == 200 and bounds
    out = tmp_path / "r.csv"
    assert main(["eval-ppl", "--checkpoint", ckpt, "--doc", str(doc), "--out", str(out), *_sets()]) == 0
    meta, rows = read_csv(out)
    assert {"config_hash", "corpus_hash", "seed"} <= set(meta)
    assert list(rows[0]) == ["segment_start", "segment_end", "n_tokens", "ppl"]
    assert [r["segment_start"] for r in rows] == ["0", "50", "100"]
    assert sum(int(r["n_tokens"]) for r in rows) == 199


def test_cli_compare(ckpt, tmp_path, capsys):
    doc = tmp_path / "d.tlc"
    write_tokens(doc, gen_glossary_doc(GlossarySpec(vocab_size=128, mapping_size=8, filler_size=32,
                                                    length=200)).tokens, 128)
    base, tl = tmp_path / "base.csv", tmp_path / "tl.csv"
    common = ["--checkpoint", ckpt, "--doc", str(doc), *_sets()]
    assert main(["eval-ppl", "--base", "--out", str(base), *common]) == 0
    assert main(["eval-ppl", "--out", str(tl), *common]) == 0
    capsys.readouterr()
    assert main(["compare", str(base), str(tl)]) == 0
    table = capsys.readouterr().out
    assert "relative_change" in table and "%" in table
    rows = compare_reports(base, tl)
    assert len(rows) == 3

    other = tmp_path / "other.tlc"
    write_tokens(other, gen_glossary_doc(GlossarySpec(seed=9, vocab_size=128, mapping_size=8, filler_size=32,
                                                      length=200)).tokens, 128)
    mismatched = tmp_path / "other.csv"
    assert main(["eval-ppl", "--checkpoint", ckpt, "--doc", str(other), "--out", str(mismatched), *_sets()]) == 0
    assert main(["compare", str(base), str(mismatched)]) == 2
    assert "corpus hashes differ" in capsys.readouterr().err


def test_cli_generate_writes_log_and_manifest(ckpt, tmp_path):
    out = tmp_path / "g.tlc"
    assert main(["generate", "--checkpoint", ckpt, "--n-tokens", "20", "--prompt-length", "12",
                 "--out", str(out), *_sets()]) == 0
    toks, _, _ = read_tokens(out)
    assert len(toks) == 20
    assert len((tmp_path / "g.tlc.events.jsonl").read_text().splitlines()) == 20
    assert '"config_hash"' in (tmp_path / "g.tlc.manifest.json").read_text()


def test_cli_generate_parallel_writes_schedule(ckpt, tmp_path):
    out = tmp_path / "p.tlc"
    assert main(["generate", "--checkpoint", ckpt, "--n-tokens", "20", "--prompt-length", "4",
                 "--out", str(out), *_sets("engine.deployment=parallelized")]) == 0
    assert (tmp_path / "p.tlc.schedule.json").exists()


def test_cli_pretrain(tmp_path):
    out = tmp_path / "m.tlm"
    assert main(["pretrain", "--steps", "3", "--out", str(out), *_sets("pretrain.batch_size=2")]) == 0
    assert out.exists()
    assert (tmp_path / "m.tlm.losses.csv").read_text().startswith("step,loss\n0,")


def test_bench_window_skips_small_windows(tiny_docs):
    m = TinyLM.initialize(TINY, 0)
    rows = bench.bench_window(m, tiny_docs[:1], [32, 12], FAST, repeats=3)
    by = {(r.variant, r.window): r for r in rows}
    assert by[("tl", 12)].status.startswith("skipped") and by[("base", 12)].status.startswith("skipped")
    assert by[("tl", 32)].status == "ok" and math.isfinite(by[("tl", 32)].ppl)
    assert by[("tl", 32)].peak_memory > 0 and by[("tl", 32)].latency_per_1k > 0


def test_bench_ppl_columns_reproducible(tiny_docs):
    m = TinyLM.initialize(TINY, 0)
    a = bench.bench_chunk(m, tiny_docs, [8], FAST, [0, 1])
    b = bench.bench_chunk(m, tiny_docs, [8], FAST, [0, 1])
    assert [r.ppl for r in a] == [r.ppl for r in b]
    assert len(a) == 2 and all(r.status == "ok" for r in a)


def test_bench_ntk_factor_one_matches_baseline(tiny_docs):
    m = TinyLM.initialize(TINY, 0)
    rows = bench.bench_ntk(m, tiny_docs[0], [1, 2])
    window = [r for r in rows if r.variant == "window"]
    ntk = [r for r in rows if r.variant == "ntk"]
    assert ntk[0].ppl == window[0].ppl
    assert ntk[1].window == 64


def test_sweep_rows_start_with_base(tiny_docs):
    m = TinyLM.initialize(TINY, 0)
    rows = bench.sweep_hparams(m, tiny_docs[:1], "rank", [2, 4], FAST)
    assert [r.variant for r in rows] == ["base", "tl", "tl"]
    assert [r.rank for r in rows[1:]] == [2, 4]
    with pytest.raises(ConfigError):
        bench.sweep_hparams(m, tiny_docs[:1], "rank", [], FAST)


def test_bench_traincost_rows(tiny_docs):
    m = TinyLM.initialize(TINY, 0)
    rows = bench.bench_traincost(m, tiny_docs[0], [8, 16], FAST, [None], repeats=3)
    kinds = {(r.variant, r.chunk_size) for r in rows}
    assert kinds == {("train", 8), ("generate", 8), ("train", 16), ("generate", 16)}
    assert all(r.train_time_per_chunk > 0 for r in rows)


def test_bench_csv_columns(tmp_path, tiny_docs):
    from templora.harness.reports import write_rows

    m = TinyLM.initialize(TINY, 0)
    rows = bench.bench_window(m, tiny_docs[:1], [12], FAST)
    write_rows(tmp_path / "w.csv", rows, {"config_hash": "x"})
    meta, body = read_csv(tmp_path / "w.csv")
    assert meta == {"config_hash": "x"} and tuple(body[0]) == BENCH_COLUMNS
    assert np.isnan(float(body[0]["ppl"]))
