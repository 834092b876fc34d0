"""Experiment orchestration behind the CLI: run directories, the pipeline stages, metrics and reports."""

import csv
import hashlib
import json
import logging
import os
import statistics
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from tqdm import tqdm

from .adapters import LoraAdapter, PrefixKV, serialize_adapter
from .checkpoint import file_sha256, state_checksum
from .distill import cd_update_bytes, meta_train, run_cd, run_oracle_cd
from .errors import ConfigError, MissingArtifactError, SchemaVersionError, TaskError
from .hypernet import Hypernet, init_hypernet, internalize, load_hypernet, save_hypernet
from .logs import JsonlLog
from .models import METRICS_SCHEMA_VERSION, ExperimentConfig, MetricsRow
from .querygen import make_query_generator
from .target_lm import TinyLM, kv_cache_footprint, load_lm, pretrain_lm, save_lm
from .tasks import (
    NiahInstance,
    PromptAudit,
    build_meta_dataset,
    eval_niah,
    fit_context,
    gen_niah_dataset,
    gen_niah_eval_set,
    load_meta_dataset,
    sample_self_responses,
    save_meta_dataset,
    save_niah,
)
from .text import EOS_ID, decode, encode, student_prompt, teacher_prompt, teacher_prompt_overhead

logger = logging.getLogger(__name__)

RUN_DIR_ENV = "D2L_RUN_DIR"
CSV_COLUMNS = list(MetricsRow.model_fields)
QUERY_ROOM = 128

# independent seed streams per pipeline stage
_STREAMS = {"pretrain": 0, "train": 1, "eval": 2, "cd": 3, "heldout": 4}


def stream_seed(config: ExperimentConfig, purpose: str) -> int:
    return int(np.random.SeedSequence([config.seed, _STREAMS[purpose]]).generate_state(1)[0])


# Configuration


def _parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(data: Dict[str, Any], overrides: Iterable[str]) -> Dict[str, Any]:
    """Apply `a.b.c=value` overrides; values are JSON where they parse, strings otherwise."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = data
        for p in parts[:-1]:
            child = node.setdefault(p, {})
            if not isinstance(child, dict):
                raise ConfigError(f"override {key!r}: {p!r} is not a section")
            node = child
        node[parts[-1]] = _parse_value(raw)
    return data


def load_config(path: Optional[Union[str, Path]] = None, overrides: Sequence[str] = ()) -> ExperimentConfig:
    data: Dict[str, Any] = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file {path} does not exist") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from None
    return ExperimentConfig.model_validate(apply_overrides(data, overrides))


def run_dir(config: ExperimentConfig) -> Path:
    if config.output_dir:
        return Path(config.output_dir)
    return Path(os.environ.get(RUN_DIR_ENV, "runs")) / config.name


def prepare_run_dir(config: ExperimentConfig) -> Path:
    """Create the run directory and write the exact config in use."""
    out = run_dir(config)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(config.model_dump_json(indent=2), encoding="utf-8")
    return out


def record_inputs(out: Path, command: str, config: ExperimentConfig, inputs: Dict[str, Path]) -> None:
    """inputs.json: per command, the seed, a hash of the config and the sha256 of every input file."""
    path = out / "inputs.json"
    record = json.loads(path.read_text(encoding="utf-8")) if path.exists() else {}
    record[command] = {
        "seed": config.seed,
        "config_sha256": hashlib.sha256(config.model_dump_json().encode("utf-8")).hexdigest(),
        "inputs": {name: file_sha256(p) for name, p in inputs.items()},
    }
    path.write_text(json.dumps(record, indent=2, sort_keys=True), encoding="utf-8")


def seed_everything(config: ExperimentConfig) -> None:
    torch.manual_seed(config.seed)
    if config.single_threaded:
        torch.set_num_threads(1)


# Metrics


@dataclass
class LatencyStats:
    mean_ms: float
    std_ms: float
    samples: List[float]


def measure_update_latency(fn: Callable[[], Any], repeats: int = 5, warmup: int = 1) -> LatencyStats:
    """Wall-clock ms of `fn` over `repeats` runs after `warmup` untimed runs; population std."""
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        samples.append((time.perf_counter() - t0) * 1000.0)
    return LatencyStats(statistics.fmean(samples), statistics.pstdev(samples), samples)


def allocator_peak(fn: Callable[[], Any]) -> Optional[int]:
    """Peak CUDA allocator bytes during `fn`; None on CPU."""
    if not torch.cuda.is_available():
        return None
    torch.cuda.reset_peak_memory_stats()
    fn()
    return int(torch.cuda.max_memory_allocated())


def adapter_bytes(made: Union[LoraAdapter, PrefixKV], bytes_per_scalar: int) -> int:
    if isinstance(made, PrefixKV):
        return sum(k.numel() + v.numel() for k, v in zip(made.keys, made.values)) * bytes_per_scalar
    return made.num_scalars() * bytes_per_scalar


def write_metrics_csv(path: Union[str, Path], rows: Sequence[MetricsRow]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if v is None else v) for k, v in row.model_dump().items()})
    path.with_suffix(".json").write_text(
        json.dumps([r.model_dump() for r in rows], indent=2), encoding="utf-8"
    )


def read_metrics_csv(path: Union[str, Path]) -> List[MetricsRow]:
    with Path(path).open(newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if not reader.fieldnames or reader.fieldnames[0] != "schema_version":
            raise SchemaVersionError(f"{path} has no schema_version column")
        rows = []
        for raw in reader:
            rows.append(MetricsRow.model_validate({k: v for k, v in raw.items() if v != ""}))
    return rows


# Pipeline stages


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingArtifactError(f"{what} not found at {path}")
    return path


def load_run_lm(out: Path) -> TinyLM:
    return load_lm(_require(out / "lm.d2lm", "teacher checkpoint (run pretrain-lm first)"))


def pretrain_corpus(config: ExperimentConfig) -> Tuple[List[List[int]], List[int]]:
    """Teacher prompts with the haystack in context, followed by the gold answer and EOS."""
    pc = config.pretrain
    instances = gen_niah_dataset(stream_seed(config, "pretrain"), pc.n_samples, pc.length_range, config.task.needle_digits)
    seqs, starts = [], []
    for inst in instances:
        prompt = teacher_prompt(inst.haystack_ids, inst.query_ids)
        seqs.append(prompt + inst.answer_ids + [EOS_ID])
        starts.append(len(prompt))
    longest = max(len(s) for s in seqs)
    if longest > config.lm.max_seq_len:
        raise ConfigError(f"pretraining sequences reach {longest} tokens, lm.max_seq_len is {config.lm.max_seq_len}")
    return seqs, starts


def cmd_pretrain_lm(config: ExperimentConfig, out: Path) -> Path:
    seed_everything(config)
    seqs, starts = pretrain_corpus(config)
    pc = config.pretrain
    lm = pretrain_lm(
        seqs,
        config.lm,
        pc.steps,
        pc.lr,
        seed=config.seed,
        batch_size=pc.batch_size,
        loss_from=starts if pc.answer_loss_only else None,
        log=JsonlLog(out / "pretrain_log.jsonl"),
    )
    path = out / "lm.d2lm"
    save_lm(lm, path)
    (out / "lm.sha256").write_text(state_checksum(lm) + "\n", encoding="utf-8")
    record_inputs(out, "pretrain-lm", config, {})
    logger.info("teacher saved to %s", path)
    return path


def cmd_gen_data(config: ExperimentConfig, out: Path) -> Path:
    seed_everything(config)
    lm = load_run_lm(out)
    tc = config.task
    instances = gen_niah_dataset(stream_seed(config, "train"), tc.n_samples, tc.length_range, tc.needle_digits)
    data = out / "data"
    save_niah(data / "niah_train.jsonl", instances)
    generator = make_query_generator(tc.query_generator, tc.query_model, tc.query_base_url)
    dataset = build_meta_dataset(
        lm,
        tqdm(instances, desc="self-responses", disable=None),
        queries_per_context=tc.queries_per_context,
        max_new=tc.max_response_tokens,
        k=tc.topk,
        seed=stream_seed(config, "train"),
        generator=generator,
    )
    n = save_meta_dataset(data / "distill.jsonl", dataset)
    manifest = {
        "seed": config.seed,
        "requested_contexts": tc.n_samples,
        "n_contexts": len(dataset),
        "n_samples": n,
        "query_generator": generator.name,
        "files": {name: file_sha256(data / name) for name in ("niah_train.jsonl", "distill.jsonl")},
    }
    path = data / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    record_inputs(out, "gen-data", config, {"lm.d2lm": out / "lm.d2lm"})
    return path


def _heldout_fn(config: ExperimentConfig, lm: TinyLM) -> Callable[[Hypernet, int], Dict[str, float]]:
    heldout = gen_niah_eval_set(stream_seed(config, "heldout"), [config.task.length_range[1]], 8, config.task.needle_digits)

    def run(hypernet: Hypernet, step: int) -> Dict[str, float]:
        scores = eval_niah(lm, lambda inst: internalize(hypernet, lm, inst.haystack_ids), heldout, method="heldout")
        return {"eval_accuracy": next(iter(scores.values())).accuracy}

    return run


def cmd_meta_train(config: ExperimentConfig, out: Path, resume: bool = False) -> Dict[str, Path]:
    seed_everything(config)
    lm = load_run_lm(out)
    data_path = _require(out / "data" / "distill.jsonl", "distillation data (run gen-data first)")
    dataset = load_meta_dataset(data_path, config.schedule.batch_token_budget)
    names = ["hypernet"] + (["hyperkv"] if "hyperkv" in config.eval.methods else [])
    saved = {}
    for name in names:
        hcfg = config.hypernet if name == "hypernet" else config.hyperkv
        hypernet = init_hypernet(hcfg, config.lm)
        ckpt = out / "checkpoints" / name
        meta_train(
            hypernet,
            lm,
            dataset,
            config.schedule,
            log=JsonlLog(out / f"{name}_train_log.jsonl"),
            checkpoint_dir=ckpt,
            resume=resume and (ckpt / "train_state.d2ts").exists(),
            eval_fn=_heldout_fn(config, lm),
        )
        saved[name] = out / f"{name}.d2hn"
        save_hypernet(hypernet, saved[name], {"train_steps": config.schedule.total_steps, "loss": config.schedule.loss})
    record_inputs(out, "meta-train", config, {"lm.d2lm": out / "lm.d2lm", "distill.jsonl": data_path})
    return saved


def _by_length(instances: Sequence[NiahInstance]) -> Dict[int, List[NiahInstance]]:
    groups: Dict[int, List[NiahInstance]] = {}
    for inst in instances:
        groups.setdefault(inst.length, []).append(inst)
    return dict(sorted(groups.items()))


def cd_rows(
    config: ExperimentConfig,
    lm: TinyLM,
    instances: Sequence[NiahInstance],
    audit: Optional[PromptAudit] = None,
    save_dir: Optional[Path] = None,
) -> List[MetricsRow]:
    """Accuracy, latency and memory of both context-distillation baselines per length."""
    ec, tc = config.eval, config.task
    window = lm.config.max_seq_len
    generator = make_query_generator(tc.query_generator, tc.query_model, tc.query_base_url)
    rng = np.random.default_rng(stream_seed(config, "cd"))
    max_new = tc.needle_digits + 2

    def update(method: str, inst: NiahInstance) -> Tuple[LoraAdapter, bool]:
        # leave room for the longest generated query
        ctx, cut = fit_context(inst.haystack_ids, max(len(inst.query_ids), QUERY_ROOM), tc.max_response_tokens, window)
        if method == "cd-oracle":
            adapter = run_oracle_cd(
                lm, ctx, inst.query_ids, ec.cd_steps, ec.cd_lr, ec.cd_rank, max_new=max_new, k=tc.topk
            )
            return adapter, cut
        queries = [encode(q) for q in generator.generate(decode(ctx), ec.cd_queries, rng)]
        samples = [s for s in sample_self_responses(lm, ctx, queries, tc.max_response_tokens, tc.topk) if s]
        if not samples:
            raise TaskError("no usable self-responses for the generated queries")
        return run_cd(lm, ctx, samples, ec.cd_steps, ec.cd_lr, ec.cd_rank), cut

    rows = []
    for method in ("cd-oracle", "cd-generated-q"):
        if method not in ec.methods:
            continue
        for length, group in _by_length(instances).items():
            subset = group[: ec.cd_instances]
            made = {}
            truncated = False
            for j, inst in enumerate(tqdm(subset, desc=f"{method} @ {length}", disable=None)):
                adapter, cut = update(method, inst)
                made[id(inst)] = adapter
                truncated |= cut
                if save_dir is not None:
                    (save_dir / f"{method}_len{length}_{j}.d2la").write_bytes(serialize_adapter(adapter))
            score = eval_niah(lm, lambda inst: made[id(inst)], subset, method=method, audit=audit)[length]
            lat = measure_update_latency(lambda: update(method, subset[0]), ec.latency_repeats)
            size = next(iter(made.values())).num_scalars()
            rows.append(
                MetricsRow(
                    method=method,
                    context_length=length,
                    accuracy=score.accuracy,
                    n=score.n,
                    latency_ms_mean=lat.mean_ms,
                    latency_ms_std=lat.std_ms,
                    update_memory_bytes=cd_update_bytes(size, "sgd", ec.bytes_per_scalar),
                    inference_footprint_bytes=kv_cache_footprint(
                        len(student_prompt(subset[0].query_ids)), max_new, lm.config, ec.bytes_per_scalar
                    ),
                    adapter_bytes=size * ec.bytes_per_scalar,
                    truncated=truncated,
                )
            )
    return rows


def cmd_cd_baseline(config: ExperimentConfig, out: Path) -> List[MetricsRow]:
    seed_everything(config)
    lm = load_run_lm(out)
    ec = config.eval
    instances = gen_niah_eval_set(stream_seed(config, "eval"), ec.lengths, ec.n_per_length, config.task.needle_digits)
    save_dir = out / "cd"
    save_dir.mkdir(parents=True, exist_ok=True)
    rows = cd_rows(config, lm, instances, save_dir=save_dir)
    write_metrics_csv(out / "cd_metrics.csv", rows)
    record_inputs(out, "cd-baseline", config, {"lm.d2lm": out / "lm.d2lm"})
    return rows


def internalized_rows(
    config: ExperimentConfig,
    lm: TinyLM,
    hypernet: Hypernet,
    method: str,
    mode: str,
    instances: Sequence[NiahInstance],
    audit: PromptAudit,
) -> List[MetricsRow]:
    ec = config.eval
    max_new = config.task.needle_digits + 2
    scores = eval_niah(
        lm, lambda inst: internalize(hypernet, lm, inst.haystack_ids, mode), instances, method=method, audit=audit
    )
    rows = []
    for length, group in _by_length(instances).items():
        first = group[0]
        made = internalize(hypernet, lm, first.haystack_ids, mode)
        lat = measure_update_latency(lambda: internalize(hypernet, lm, first.haystack_ids, mode), ec.latency_repeats)
        size = adapter_bytes(made, ec.bytes_per_scalar)
        # the generated adapter or prefix is reported on its own; the prompt holds only the query
        footprint = kv_cache_footprint(len(student_prompt(first.query_ids)), max_new, lm.config, ec.bytes_per_scalar)
        # generation holds the chunk activations plus the emitted adapter
        n_act = (lm.config.n_layers + 1) * min(len(first.haystack_ids), hypernet.config.max_chunk_tokens)
        rows.append(
            MetricsRow(
                method=method,
                context_length=length,
                accuracy=scores[length].accuracy,
                n=scores[length].n,
                latency_ms_mean=lat.mean_ms,
                latency_ms_std=lat.std_ms,
                update_memory_bytes=n_act * lm.config.d_model * ec.bytes_per_scalar + size,
                inference_footprint_bytes=footprint,
                adapter_bytes=size,
                allocator_peak_bytes=allocator_peak(lambda: internalize(hypernet, lm, first.haystack_ids, mode)),
            )
        )
    return rows


def cmd_eval(config: ExperimentConfig, out: Path) -> List[MetricsRow]:
    """One MetricsRow per (method, length), written to metrics.csv and metrics.json."""
    seed_everything(config)
    lm = load_run_lm(out)
    ec = config.eval
    instances = gen_niah_eval_set(stream_seed(config, "eval"), ec.lengths, ec.n_per_length, config.task.needle_digits)
    audit = PromptAudit()
    rows: List[MetricsRow] = []
    max_new = config.task.needle_digits + 2

    if "in_context" in ec.methods:
        scores = eval_niah(lm, "in_context", instances, method="in_context", audit=audit)
        groups = _by_length(instances)
        for length, score in scores.items():
            first = groups[length][0]
            q_len = len(first.query_ids)
            kept, _ = fit_context(first.haystack_ids, q_len, max_new, lm.config.max_seq_len)
            rows.append(
                MetricsRow(
                    method="in_context",
                    context_length=length,
                    accuracy=score.accuracy,
                    n=score.n,
                    update_memory_bytes=0,
                    inference_footprint_bytes=kv_cache_footprint(
                        len(kept) + teacher_prompt_overhead(q_len), max_new, lm.config, ec.bytes_per_scalar
                    ),
                    truncated=score.truncated,
                )
            )

    wanted = [m for m in ("hypernet-batched", "hypernet-iterative") if m in ec.methods]
    if wanted:
        hypernet, _ = load_hypernet(_require(out / "hypernet.d2hn", "hypernetwork (run meta-train first)"))
        for method in wanted:
            rows += internalized_rows(config, lm, hypernet, method, method.split("-")[1], instances, audit)
    if "hyperkv" in ec.methods:
        hyperkv, _ = load_hypernet(_require(out / "hyperkv.d2hn", "prefix-KV hypernetwork (run meta-train first)"))
        rows += internalized_rows(config, lm, hyperkv, "hyperkv", config.schedule.generation_mode, instances, audit)
    rows += cd_rows(config, lm, instances, audit)

    write_metrics_csv(out / "metrics.csv", rows)
    inputs = {"lm.d2lm": out / "lm.d2lm"}
    inputs.update({p.name: p for p in (out / "hypernet.d2hn", out / "hyperkv.d2hn") if p.exists()})
    record_inputs(out, "eval", config, inputs)
    return rows


def cmd_report(run_dirs: Sequence[Union[str, Path]], out: Union[str, Path]) -> Dict[str, Path]:
    """Merge metrics.csv of several runs into accuracy-vs-length and cost tables."""
    merged: List[Tuple[str, MetricsRow]] = []
    for d in run_dirs:
        d = Path(d)
        for row in read_metrics_csv(_require(d / "metrics.csv", "metrics (run eval first)")):
            merged.append((d.name, row))
    versions = {row.schema_version for _, row in merged}
    if len(versions) > 1:
        raise SchemaVersionError(f"refusing to merge metrics with schema versions {sorted(versions)}")
    if versions and versions != {METRICS_SCHEMA_VERSION}:
        raise SchemaVersionError(f"metrics use schema {versions.pop()}, this build reads {METRICS_SCHEMA_VERSION}")

    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    accuracy_cols = ["schema_version", "run", "method", "context_length", "accuracy", "n", "truncated"]
    cost_cols = [
        "schema_version", "run", "method", "context_length", "latency_ms_mean", "latency_ms_std",
        "update_memory_bytes", "inference_footprint_bytes", "adapter_bytes", "allocator_peak_bytes",
    ]
    paths = {"accuracy": out / "accuracy_vs_length.csv", "cost": out / "latency_memory.csv"}
    for key, cols in (("accuracy", accuracy_cols), ("cost", cost_cols)):
        with paths[key].open("w", newline="", encoding="utf-8") as f:
            writer = csv.DictWriter(f, fieldnames=cols)
            writer.writeheader()
            for run, row in sorted(merged, key=lambda x: (x[0], x[1].method, x[1].context_length)):
                record = {"run": run, **row.model_dump()}
                writer.writerow({c: ("" if record[c] is None else record[c]) for c in cols})
    paths["json"] = out / "report.json"
    paths["json"].write_text(
        json.dumps([{"run": run, **row.model_dump()} for run, row in merged], indent=2), encoding="utf-8"
    )
    logger.info("report over %d runs written to %s", len(run_dirs), out)
    return paths
