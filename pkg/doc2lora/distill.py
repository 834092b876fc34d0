"""Training loops: context-distillation baselines and hypernetwork meta-training.

Every loop here updates adapter or hypernetwork parameters only; the target model is
frozen and its checksum is verified around each run.
"""

import logging
import math
import time
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np
import torch

from .adapters import LoraAdapter, LoraLayerDelta, PrefixKV, default_target_layers
from .checkpoint import dump_container, load_container, state_checksum, write_container
from .errors import DivergenceError, Doc2LoraError, MissingArtifactError, TaskError
from .hypernet import (
    ChunkPlan,
    Hypernet,
    chunk_context,
    generate_adapter,
    generate_prefix_kv,
    sample_training_chunk_plan,
    save_hypernet,
    target_dims,
)
from .logs import JsonlLog
from .models import TrainSchedule
from .objectives import DistillSample, MetaDataset, MetaEntry, ce_loss, kl_loss
from .target_lm import TinyLM, continuation_logits
from .tasks import forward_packed, pack_contexts, sample_self_response
from .text import student_prompt

logger = logging.getLogger(__name__)

TRAIN_STATE_MAGIC = b"D2TS"


def _check_frozen(lm: TinyLM, before: str) -> None:
    if state_checksum(lm) != before:
        raise Doc2LoraError("target model weights changed during training")


def sample_loss(sample: DistillSample, logits: torch.Tensor, loss: str) -> torch.Tensor:
    """Response-position loss of one sample; query positions are never targets."""
    if loss == "kl":
        return kl_loss(sample.targets, logits)
    if loss == "ntp":
        return ce_loss(logits, sample.response)
    raise ValueError(f"unknown loss {loss!r}")


def student_loss(
    lm: TinyLM,
    samples: Sequence[DistillSample],
    loss: str = "kl",
    adapter: Optional[LoraAdapter] = None,
    prefix: Optional[PrefixKV] = None,
) -> torch.Tensor:
    """Mean loss of the adapted student, which sees each query without its context."""
    prompts = [student_prompt(s.query) for s in samples]
    logits = continuation_logits(lm, prompts, [s.response for s in samples], adapter=adapter, prefix=prefix)
    return torch.stack([sample_loss(s, lg, loss) for s, lg in zip(samples, logits)]).mean()


# Context-distillation baselines


def init_cd_adapter(
    lm: TinyLM, rank: int, targets: Optional[Sequence[str]] = None, seed: int = 0
) -> Dict[str, Dict[str, torch.Tensor]]:
    """Trainable factors per target: B = 0 so the student starts at the base model, A small and random."""
    targets = list(targets or default_target_layers(lm.config.n_layers))
    gen = torch.Generator().manual_seed(seed)
    dtype = lm.embed.weight.dtype
    factors = {}
    for lid in targets:
        d_in, d_out = target_dims(lid, lm.config)
        A = torch.randn(rank, d_in, generator=gen, dtype=dtype) / math.sqrt(d_in)
        factors[lid] = {
            "A": A.to(lm.embed.weight.device).requires_grad_(True),
            "B": torch.zeros(d_out, rank, dtype=dtype, device=lm.embed.weight.device, requires_grad=True),
        }
    return factors


def _as_adapter(factors: Dict[str, Dict[str, torch.Tensor]], rank: int) -> LoraAdapter:
    one = torch.ones((), dtype=next(iter(factors.values()))["A"].dtype)
    return LoraAdapter(
        {lid: LoraLayerDelta(f["A"], f["B"], one.to(f["A"].device)) for lid, f in factors.items()},
        chunk_rank=rank,
        generator_version="cd-sgd",
    )


def run_cd(
    lm: TinyLM,
    context: Sequence[int],
    samples: Sequence[DistillSample],
    steps: int,
    lr: float,
    rank: int,
    *,
    targets: Optional[Sequence[str]] = None,
    seed: int = 0,
    log: Optional[JsonlLog] = None,
) -> LoraAdapter:
    """Plain gradient descent on a fresh LoRA, averaging the KL over the given queries."""
    if not samples:
        raise TaskError("context distillation needs at least one sample")
    for s in samples:
        if list(s.context) != list(context):
            raise TaskError("sample context does not match the context being distilled")
    before = state_checksum(lm)
    factors = init_cd_adapter(lm, rank, targets, seed)
    params = [t for f in factors.values() for t in f.values()]
    opt = torch.optim.SGD(params, lr=lr)
    last_finite = None
    t0 = time.perf_counter()
    for step in range(1, steps + 1):
        loss = student_loss(lm, samples, "kl", adapter=_as_adapter(factors, rank))
        value = float(loss)
        if not math.isfinite(value):
            raise DivergenceError(step, value, last_finite)
        last_finite = value
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if log is not None:
            log.write(step=step, stage=0, loss=value, lr=lr, wall_ms=(time.perf_counter() - t0) * 1000.0)
    _check_frozen(lm, before)
    logger.debug("context distillation: %d steps over %d queries, last loss %s", steps, len(samples), last_finite)
    return _as_adapter(factors, rank).detach()


def run_oracle_cd(
    lm: TinyLM,
    context: Sequence[int],
    query: Sequence[int],
    steps: int,
    lr: float,
    rank: int,
    *,
    max_new: int = 24,
    k: int = 16,
    targets: Optional[Sequence[str]] = None,
    seed: int = 0,
    log: Optional[JsonlLog] = None,
) -> LoraAdapter:
    """Distillation on the exact query that will be asked."""
    sample = sample_self_response(lm, context, query, max_new, k)
    if sample is None:
        raise TaskError("the teacher produced an empty response for the oracle query")
    return run_cd(lm, context, [sample], steps, lr, rank, targets=targets, seed=seed, log=log)


def cd_update_bytes(n_adapter_scalars: int, optimizer: str, bytes_per_scalar: int) -> int:
    """Adapter parameters, their gradients and optimizer state."""
    copies = {"sgd": 2, "adamw": 4}[optimizer]
    return copies * n_adapter_scalars * bytes_per_scalar


# Meta-training


def _optimizer_tensors(opt_state: dict):
    tensors, scalars = {}, {}
    for idx, st in opt_state["state"].items():
        for key, val in st.items():
            if isinstance(val, torch.Tensor):
                tensors[f"optim.{idx}.{key}"] = val
            else:
                scalars.setdefault(str(idx), {})[key] = val
    return tensors, scalars


def save_training_state(path: Union[str, Path], hypernet: Hypernet, opt: torch.optim.Optimizer, step: int) -> None:
    tensors = {f"hypernet.{k}": v for k, v in hypernet.state_dict().items()}
    opt_state = opt.state_dict()
    opt_tensors, scalars = _optimizer_tensors(opt_state)
    tensors.update(opt_tensors)
    meta = {
        "kind": "training_state",
        "step": step,
        "param_groups": opt_state["param_groups"],
        "optimizer_scalars": scalars,
        "optimizer": type(opt).__name__,
    }
    write_container(path, dump_container(tensors, meta, TRAIN_STATE_MAGIC))


def load_training_state(path: Union[str, Path], hypernet: Hypernet, opt: torch.optim.Optimizer) -> int:
    """Restore hypernetwork weights and optimizer moments in place; returns the completed step."""
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"no training state at {path}")
    tensors, meta = load_container(path.read_bytes(), TRAIN_STATE_MAGIC)
    if meta.get("optimizer") != type(opt).__name__:
        raise Doc2LoraError(f"state was saved with {meta.get('optimizer')}, resuming with {type(opt).__name__}")
    hypernet.load_state_dict({k[len("hypernet."):]: v for k, v in tensors.items() if k.startswith("hypernet.")})
    state: Dict[int, dict] = {}
    for name, t in tensors.items():
        if name.startswith("optim."):
            _, idx, key = name.split(".", 2)
            state.setdefault(int(idx), {})[key] = t
    for idx, extra in meta["optimizer_scalars"].items():
        state.setdefault(int(idx), {}).update(extra)
    opt.load_state_dict({"state": state, "param_groups": meta["param_groups"]})
    return int(meta["step"])


def make_optimizer(hypernet: Hypernet, schedule: TrainSchedule) -> torch.optim.Optimizer:
    params = [p for p in hypernet.parameters() if p.requires_grad]
    if schedule.optimizer == "sgd":
        return torch.optim.SGD(params, lr=schedule.lr, weight_decay=schedule.weight_decay)
    return torch.optim.AdamW(params, lr=schedule.lr, betas=schedule.betas, weight_decay=schedule.weight_decay)


def _select_entries(rng: np.random.Generator, dataset: MetaDataset, schedule: TrainSchedule) -> List[MetaEntry]:
    """Contexts for one step, drawn at random until the token budget or the context cap is reached."""
    picked, used = [], 0
    for i in rng.permutation(len(dataset.entries)):
        entry = dataset.entries[int(i)]
        n = len(entry.context)
        if picked and (used + n > schedule.batch_token_budget or len(picked) >= schedule.max_contexts_per_step):
            break
        picked.append(entry)
        used += n
    return picked


def _chunk_plan(rng: np.random.Generator, n_tokens: int, stage: int, min_chunk: int) -> ChunkPlan:
    if stage == 1:
        return chunk_context(n_tokens, n_tokens)
    return sample_training_chunk_plan(rng, n_tokens, min_chunk)


def meta_step_loss(
    hypernet: Hypernet,
    lm: TinyLM,
    entries: Sequence[MetaEntry],
    plans: Sequence[ChunkPlan],
    loss: str,
    mode: str,
    token_budget: int,
):
    """Loss of one step: chunks of every context are packed and encoded together, then each
    context gets its own adapter and is scored on its samples."""
    chunks, owners = [], []
    for c, (entry, plan) in enumerate(zip(entries, plans)):
        for piece in plan.split(entry.context):
            chunks.append(piece)
            owners.append(c)
    stacks: List = [None] * len(chunks)
    with torch.no_grad():
        for batch in pack_contexts(chunks, max(token_budget, max(len(c) for c in chunks))):
            acts = forward_packed(lm, batch, with_activations=True).activations
            for (start, end), idx in zip(batch.boundaries, batch.sample_ids):
                stacks[idx] = acts.select(0, start, end)
    losses = []
    for c, entry in enumerate(entries):
        mine = [stacks[i] for i, o in enumerate(owners) if o == c]
        if hypernet.config.output_mode == "lora":
            adapter = generate_adapter(hypernet, mine, mode)
            losses.append(student_loss(lm, entry.samples, loss, adapter=adapter))
        else:
            prefix = generate_prefix_kv(hypernet, mine, lm=lm, mode=mode)
            losses.append(student_loss(lm, entry.samples, loss, prefix=prefix))
    return torch.stack(losses).mean(), len(chunks)


def meta_train(
    hypernet: Hypernet,
    lm: TinyLM,
    dataset: MetaDataset,
    schedule: TrainSchedule,
    loss: Optional[str] = None,
    *,
    log: Optional[JsonlLog] = None,
    checkpoint_dir: Optional[Union[str, Path]] = None,
    resume: bool = False,
    eval_fn: Optional[Callable[[Hypernet, int], Dict[str, float]]] = None,
) -> Hypernet:
    """Two-stage meta-training: single-chunk steps, then randomly chunked steps.

    Only hypernetwork parameters are optimized. Step randomness is derived from
    (schedule.seed, step), so a resumed run replays the same batches.
    """
    if len(dataset) == 0:
        raise TaskError("meta-training needs a non-empty dataset")
    loss = loss or schedule.loss
    before = state_checksum(lm)
    opt = make_optimizer(hypernet, schedule)
    state_path = Path(checkpoint_dir) / "train_state.d2ts" if checkpoint_dir else None
    start = 0
    if resume:
        if state_path is None:
            raise MissingArtifactError("resume needs a checkpoint directory")
        start = load_training_state(state_path, hypernet, opt)
        logger.info("resuming meta-training after step %d", start)

    total = schedule.total_steps
    min_chunk = hypernet.config.min_chunk
    hypernet.train()
    last_finite = None
    t0 = time.perf_counter()
    completed = start
    try:
        for step in range(start + 1, total + 1):
            stage = 1 if step <= schedule.stage1_steps else 2
            if stage == 2 and step == schedule.stage1_steps + 1:
                logger.info("stage 2 (random chunking) begins at step %d", step)
            rng = np.random.default_rng([schedule.seed, step])
            entries = _select_entries(rng, dataset, schedule)
            plans = [_chunk_plan(rng, len(e.context), stage, min_chunk) for e in entries]
            value_t, n_chunks = meta_step_loss(
                hypernet, lm, entries, plans, loss, schedule.generation_mode, schedule.batch_token_budget
            )
            value = float(value_t)
            if not math.isfinite(value):
                raise DivergenceError(step, value, last_finite)
            last_finite = value
            opt.zero_grad(set_to_none=True)
            value_t.backward()
            if schedule.grad_clip is not None:
                torch.nn.utils.clip_grad_norm_(hypernet.parameters(), schedule.grad_clip)
            opt.step()
            completed = step

            record = dict(
                step=step,
                stage=stage,
                loss=value,
                lr=opt.param_groups[0]["lr"],
                wall_ms=(time.perf_counter() - t0) * 1000.0,
                n_contexts=len(entries),
                n_chunks=n_chunks,
            )
            if eval_fn is not None and schedule.eval_every and step % schedule.eval_every == 0:
                hypernet.eval()
                record.update(eval_fn(hypernet, step))
                hypernet.train()
            if log is not None:
                log.write(**record)
            if step % 100 == 0 or step == total:
                logger.info("meta-train step %d/%d stage %d loss %.4f", step, total, stage, value)
            if state_path is not None and schedule.checkpoint_every and step % schedule.checkpoint_every == 0:
                save_training_state(state_path, hypernet, opt, step)
                save_hypernet(hypernet, state_path.parent / f"hypernet_step{step}.d2hn")
    except KeyboardInterrupt:
        if state_path is not None:
            save_training_state(state_path, hypernet, opt, completed)
            logger.warning("interrupted; training state saved after step %d", completed)
        raise
    finally:
        hypernet.eval()
    if state_path is not None and completed > start:
        save_training_state(state_path, hypernet, opt, completed)
    _check_frozen(lm, before)
    return hypernet
