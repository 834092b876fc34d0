"""CLI, configuration overrides, metrics files and the end-to-end pipeline."""

import csv
import json

import pytest
import torch
from pydantic import ValidationError

from doc2lora import harness
from doc2lora.__main__ import EXIT_FAILED, EXIT_INVALID, EXIT_OK, main
from doc2lora.checkpoint import state_checksum
from doc2lora.errors import ConfigError, SchemaVersionError
from doc2lora.harness import (
    CSV_COLUMNS,
    QUERY_ROOM,
    adapter_bytes,
    apply_overrides,
    cd_rows,
    cmd_eval,
    cmd_report,
    internalized_rows,
    load_config,
    measure_update_latency,
    pretrain_corpus,
    read_metrics_csv,
    stream_seed,
    write_metrics_csv,
)
from doc2lora.models import ALL_METHODS, METRICS_SCHEMA_VERSION, ExperimentConfig, HypernetConfig, MetricsRow
from doc2lora.querygen import RuleQueryGenerator
from doc2lora.target_lm import kv_cache_footprint, load_lm, save_lm
from doc2lora.tasks import PromptAudit, fit_context, gen_niah_eval_set
from doc2lora.text import EOS_ID, decode


def _row(method="in_context", length=64, **kw):
    return MetricsRow(method=method, context_length=length, accuracy=0.5, n=2, inference_footprint_bytes=100, **kw)


def test_overrides_are_json_where_possible():
    data = apply_overrides(
        {"schedule": {"lr": 0.1}},
        ["schedule.stage1_steps=5", "name=abc", "eval.lengths=[64,128]", "hypernet.latent_self_attn=true"],
    )
    assert data == {
        "schedule": {"lr": 0.1, "stage1_steps": 5},
        "name": "abc",
        "eval": {"lengths": [64, 128]},
        "hypernet": {"latent_self_attn": True},
    }
    with pytest.raises(ConfigError):
        apply_overrides({}, ["no-equals-sign"])
    with pytest.raises(ConfigError):
        apply_overrides({"name": "x"}, ["name.inner=1"])


def test_niah_hypernet_defaults_survive_partial_overrides():
    config = load_config(None, ["hyperkv.max_chunk_tokens=256", "hypernet.n_latents=4"])
    assert config.hypernet.activation_source == "single_layer" and config.hypernet.n_latents == 4
    assert config.hyperkv.output_mode == "prefix_kv" and config.hyperkv.n_latents == 20
    assert config.hyperkv.max_chunk_tokens == 256
    assert load_config().hyperkv.activation_source == "single_layer"
    assert HypernetConfig().activation_source == "per_layer"
    explicit = load_config(None, ["hypernet.activation_source=per_layer"])
    assert explicit.hypernet.activation_source == "per_layer"


def test_load_config(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"name": "from-file", "schedule": {"stage1_steps": 3}}))
    config = load_config(path, ["schedule.stage2_steps=4"])
    assert config.name == "from-file" and config.schedule.total_steps == 7
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")
    path.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(path)
    with pytest.raises(ValidationError):
        load_config(None, ["lm.d_model=15"])
    with pytest.raises(ValidationError):
        load_config(None, ["eval.methods=[\"telepathy\"]"])


def test_stream_seeds_are_stable_and_distinct():
    config = load_config()
    seeds = {p: stream_seed(config, p) for p in ("pretrain", "train", "eval", "cd", "heldout")}
    assert len(set(seeds.values())) == 5
    assert seeds == {p: stream_seed(load_config(), p) for p in seeds}
    assert stream_seed(load_config(None, ["seed=1"]), "eval") != seeds["eval"]


def test_pretrain_corpus_must_fit_the_window():
    config = load_config(
        None, ["lm.max_seq_len=64", "task.length_range=[16,32]", "pretrain.length_range=[40,80]", "pretrain.n_samples=2"]
    )
    with pytest.raises(ConfigError):
        pretrain_corpus(config)


def test_latency_excludes_warmup():
    calls = []
    stats = measure_update_latency(lambda: calls.append(1), repeats=1, warmup=2)
    assert len(calls) == 3 and len(stats.samples) == 1 and stats.std_ms == 0.0
    stats = measure_update_latency(lambda: None, repeats=4, warmup=0)
    assert len(stats.samples) == 4 and stats.mean_ms >= 0.0
    with pytest.raises(ValueError):
        measure_update_latency(lambda: None, repeats=0)


def test_metrics_csv(tmp_path):
    rows = [_row(), _row("cd-oracle", 128, latency_ms_mean=3.5, latency_ms_std=0.25, update_memory_bytes=64)]
    write_metrics_csv(tmp_path / "metrics.csv", rows)
    with (tmp_path / "metrics.csv").open() as f:
        header = next(csv.reader(f))
    assert header == CSV_COLUMNS and header[0] == "schema_version"
    back = read_metrics_csv(tmp_path / "metrics.csv")
    assert back[1].latency_ms_mean == 3.5 and back[0].latency_ms_mean is None
    assert json.loads((tmp_path / "metrics.json").read_text())[1]["method"] == "cd-oracle"

    (tmp_path / "old.csv").write_text("method,accuracy\nin_context,1.0\n")
    with pytest.raises(SchemaVersionError):
        read_metrics_csv(tmp_path / "old.csv")


def test_report_refuses_mixed_schema_versions(tmp_path):
    write_metrics_csv(tmp_path / "a" / "metrics.csv", [_row()])
    write_metrics_csv(tmp_path / "b" / "metrics.csv", [_row(schema_version=METRICS_SCHEMA_VERSION + 1)])
    with pytest.raises(SchemaVersionError):
        cmd_report([tmp_path / "a", tmp_path / "b"], tmp_path / "report")
    assert main(["report", str(tmp_path / "a"), str(tmp_path / "b"), "--out", str(tmp_path / "report")]) == EXIT_FAILED


def test_report_merges_runs(tmp_path):
    write_metrics_csv(tmp_path / "a" / "metrics.csv", [_row(), _row(length=128)])
    write_metrics_csv(tmp_path / "b" / "metrics.csv", [_row("hyperkv")])
    paths = cmd_report([tmp_path / "a", tmp_path / "b"], tmp_path / "report")
    with paths["accuracy"].open() as f:
        records = list(csv.DictReader(f))
    assert [(r["run"], r["context_length"]) for r in records] == [("a", "64"), ("a", "128"), ("b", "64")]
    assert len(json.loads(paths["json"].read_text())) == 3


def test_adapter_bytes(tiny_lm, tiny_hypernet, tiny_hyperkv):
    from doc2lora.hypernet import internalize

    tokens = list(range(3, 40))
    adapter = internalize(tiny_hypernet, tiny_lm, tokens)
    assert adapter_bytes(adapter, 4) == 4 * 2 * 4 * (32 + 16 + 1)
    prefix = internalize(tiny_hyperkv, tiny_lm, tokens)
    assert adapter_bytes(prefix, 2) == 2 * 2 * 2 * 3 * 16


def test_invalid_config_exits_2(tmp_path, capsys):
    assert main(["pretrain-lm", "lm.d_model=15", f"output_dir={tmp_path}"]) == EXIT_INVALID
    assert "lm" in capsys.readouterr().err
    assert main(["pretrain-lm", "oops"]) == EXIT_INVALID
    assert main(["eval", "--config", str(tmp_path / "nope.json")]) == EXIT_INVALID


def test_missing_artifact_exits_3(tmp_path):
    assert main(["gen-data", f"output_dir={tmp_path / 'run'}"]) == EXIT_FAILED
    assert (tmp_path / "run" / "config.json").exists()
    assert main(["report", str(tmp_path / "run"), "--out", str(tmp_path / "r")]) == EXIT_FAILED


MICRO_RUN = {
    "name": "micro",
    "lm": {"d_model": 16, "n_layers": 2, "n_heads": 2, "d_mlp": 32, "max_seq_len": 512},
    "hypernet": {
        "d_latent": 16, "n_latents": 2, "n_xattn_blocks": 1, "n_attn_heads": 2, "input_dim": 16,
        "mlp_hidden": 16, "max_chunk_tokens": 64, "min_chunk": 4,
    },
    "hyperkv": {
        "d_latent": 16, "n_latents": 2, "n_xattn_blocks": 1, "n_attn_heads": 2, "input_dim": 16,
        "mlp_hidden": 16, "max_chunk_tokens": 64, "min_chunk": 4, "output_mode": "prefix_kv",
    },
    "schedule": {"stage1_steps": 2, "stage2_steps": 1, "checkpoint_every": 1, "batch_token_budget": 256},
    "pretrain": {"steps": 2, "lr": 1e-4, "batch_size": 4, "n_samples": 8, "length_range": [40, 80]},
    "task": {"n_samples": 3, "length_range": [40, 80], "queries_per_context": 1, "topk": 4, "max_response_tokens": 4},
    "eval": {
        "lengths": [48, 96], "n_per_length": 1, "cd_steps": 1, "cd_queries": 1, "cd_instances": 1,
        "latency_repeats": 1,
    },
}


def test_pipeline_end_to_end(tmp_path):
    config = dict(MICRO_RUN, output_dir=str(tmp_path / "run"))
    path = tmp_path / "micro.json"
    path.write_text(json.dumps(config))
    run = tmp_path / "run"

    assert main(["pretrain-lm", "--config", str(path)]) == EXIT_OK
    assert (run / "lm.d2lm").exists() and (run / "pretrain_log.jsonl").exists()
    checksum = (run / "lm.sha256").read_text().strip()
    assert state_checksum(load_lm(run / "lm.d2lm")) == checksum

    assert main(["gen-data", "--config", str(path)]) == EXIT_OK
    manifest = json.loads((run / "data" / "manifest.json").read_text())
    assert manifest["requested_contexts"] == 3 and manifest["query_generator"] == "rule"

    assert main(["meta-train", "--config", str(path)]) == EXIT_OK
    assert (run / "hypernet.d2hn").exists() and (run / "hyperkv.d2hn").exists()
    steps = [json.loads(line)["step"] for line in (run / "hypernet_train_log.jsonl").read_text().splitlines()]
    assert steps == [1, 2, 3]
    assert (run / "checkpoints" / "hypernet" / "train_state.d2ts").exists()
    assert main(["meta-train", "--resume", "--config", str(path)]) == EXIT_OK

    assert main(["cd-baseline", "--config", str(path)]) == EXIT_OK
    assert len(list((run / "cd").glob("*.d2la"))) == 4

    assert main(["eval", "--config", str(path)]) == EXIT_OK
    rows = read_metrics_csv(run / "metrics.csv")
    assert {(r.method, r.context_length) for r in rows} == {(m, n) for m in ALL_METHODS for n in (48, 96)}
    assert all(0.0 <= r.accuracy <= 1.0 and r.n == 1 for r in rows)
    assert all(r.update_memory_bytes == 0 for r in rows if r.method == "in_context")
    by_key = {(r.method, r.context_length): r for r in rows}
    grow = lambda m: by_key[(m, 96)].inference_footprint_bytes - by_key[(m, 48)].inference_footprint_bytes  # noqa: E731
    assert grow("hypernet-batched") == grow("hyperkv") == 0 < grow("in_context")
    assert by_key[("hypernet-batched", 96)].adapter_bytes > 0

    inputs = json.loads((run / "inputs.json").read_text())
    assert set(inputs) == {"pretrain-lm", "gen-data", "meta-train", "cd-baseline", "eval"}
    assert state_checksum(load_lm(run / "lm.d2lm")) == checksum

    assert main(["report", str(run), "--out", str(tmp_path / "report")]) == EXIT_OK
    assert (tmp_path / "report" / "accuracy_vs_length.csv").exists()


def test_internalized_footprint_does_not_grow_with_haystack(tiny_lm, tiny_hypernet, tiny_hyperkv):
    config = ExperimentConfig.model_validate(MICRO_RUN)
    instances = gen_niah_eval_set(0, [64, 256], 1)
    for hypernet, method in ((tiny_hypernet, "hypernet-batched"), (tiny_hyperkv, "hyperkv")):
        rows = {r.context_length: r for r in internalized_rows(config, tiny_lm, hypernet, method, "batched", instances, PromptAudit())}
        assert rows[64].inference_footprint_bytes == rows[256].inference_footprint_bytes
        # one chunk at 64 tokens, four at 256
        assert rows[256].adapter_bytes == 4 * rows[64].adapter_bytes


def test_in_context_footprint_counts_kept_tokens(tmp_path, tiny_lm):
    save_lm(tiny_lm, tmp_path / "lm.d2lm")
    config = ExperimentConfig.model_validate(
        dict(MICRO_RUN, output_dir=str(tmp_path), eval=dict(MICRO_RUN["eval"], lengths=[600, 900], methods=["in_context"]))
    )
    rows = {r.context_length: r for r in cmd_eval(config, tmp_path)}
    assert rows[600].truncated and rows[900].truncated
    assert rows[600].inference_footprint_bytes == rows[900].inference_footprint_bytes
    assert rows[900].inference_footprint_bytes <= kv_cache_footprint(512, 0, tiny_lm.config, 4)


def test_cd_queries_come_from_the_distilled_context(monkeypatch, tiny_lm):
    seen = []

    class Recording(RuleQueryGenerator):
        def generate(self, context, n, rng, exclude=()):
            seen.append(context)
            return super().generate(context, n, rng, exclude)

    monkeypatch.setattr(harness, "make_query_generator", lambda *args, **kw: Recording())
    with torch.no_grad():
        tiny_lm.embed.weight[EOS_ID] = 0.0
    config = ExperimentConfig.model_validate(dict(MICRO_RUN, eval=dict(MICRO_RUN["eval"], methods=["cd-generated-q"])))
    inst = gen_niah_eval_set(0, [600], 1)[0]
    rows = cd_rows(config, tiny_lm, [inst])
    kept, cut = fit_context(inst.haystack_ids, QUERY_ROOM, config.task.max_response_tokens, tiny_lm.config.max_seq_len)
    assert cut and rows[0].truncated and len(kept) < 600
    assert seen and all(context == decode(kept) for context in seen)
