"""The frozen target model: a small decoder-only transformer with rotary attention.

The same weights act as teacher (context in the prompt) and student (adapter or prefix
applied, no context). Every forward pass can also return the residual stream entering
each block, which is what the hypernetwork reads.
"""

import copy
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .adapters import LoraAdapter, LoraLayerDelta, PrefixKV, check_prefix, inject_prefix_kv, parse_layer_id
from .checkpoint import dump_container, load_container, write_container
from .errors import (
    BudgetExceededError,
    DivergenceError,
    InvalidDimensionError,
    ShapeMismatchError,
    TokenizerError,
)
from .logs import JsonlLog
from .models import LMConfig
from .text import EOS_ID, PAD_ID

logger = logging.getLogger(__name__)

LM_MAGIC = b"D2LM"


@dataclass(frozen=True, eq=False)
class ActivationStack:
    """Residual-stream activations Z.

    ``hidden`` is [L+1, N, D] (or [B, L+1, N, D] for a batch); slice 0 is the embedding
    output and slice l is the input of block l (0-based), i.e. Z_{l} feeds the
    adapter of block l. Masked positions hold zeros and must be ignored.
    """

    hidden: torch.Tensor
    mask: torch.Tensor

    @property
    def is_batched(self) -> bool:
        return self.hidden.dim() == 4

    @property
    def n_tokens(self) -> int:
        return self.hidden.shape[-2]

    def select(self, b: int, start: int = 0, end: Optional[int] = None) -> "ActivationStack":
        """Unbatched view of sequence `b`, tokens [start, end)."""
        if not self.is_batched:
            raise ShapeMismatchError("select() needs a batched stack")
        return ActivationStack(self.hidden[b, :, start:end], self.mask[b, start:end])

    def layer(self, index: int) -> torch.Tensor:
        return self.hidden[..., index, :, :]


@dataclass(frozen=True, eq=False)
class LMOutput:
    logits: torch.Tensor
    activations: Optional[ActivationStack]


def rotary(x: torch.Tensor, positions: torch.Tensor, base: float) -> torch.Tensor:
    """Rotate-half RoPE. x is [B, N, H, d], positions [B, N]."""
    half = x.shape[-1] // 2
    inv_freq = base ** (-torch.arange(half, device=x.device, dtype=torch.float32) / half)
    angles = positions.to(torch.float32)[..., None] * inv_freq  # [B, N, half]
    cos = angles.cos().to(x.dtype)[:, :, None, :]
    sin = angles.sin().to(x.dtype)[:, :, None, :]
    x1, x2 = x[..., :half], x[..., half:]
    return torch.cat([x1 * cos - x2 * sin, x1 * sin + x2 * cos], dim=-1)


def project(x: torch.Tensor, weight: torch.Tensor, delta: Optional[LoraLayerDelta]) -> torch.Tensor:
    """x @ (W + alpha * B A)^T, computed in factored form."""
    out = F.linear(x, weight)
    if delta is None:
        return out
    if (delta.d_out, delta.d_in) != tuple(weight.shape):
        raise ShapeMismatchError(
            f"adapter delta is {(delta.d_out, delta.d_in)}, weight is {tuple(weight.shape)}"
        )
    low = F.linear(x, delta.A.to(x.dtype)) * delta.rank_alpha().to(x.dtype)
    return out + F.linear(low, delta.B.to(x.dtype))


def attention_mask(mask: torch.Tensor, segment_ids: Optional[torch.Tensor], n_prefix: int) -> torch.Tensor:
    """Boolean [B, 1, N, n_prefix + N] mask of allowed (query, key) pairs.

    Causal, restricted to valid keys and to the query's own segment. A position may
    always see itself so fully padded rows stay finite. Prefix entries are visible to all.
    """
    b, n = mask.shape
    idx = torch.arange(n, device=mask.device)
    causal = idx[None, :] <= idx[:, None]
    eye = idx[None, :] == idx[:, None]
    allowed = causal[None] & (mask[:, None, :] | eye[None])
    if segment_ids is not None:
        allowed = allowed & (segment_ids[:, :, None] == segment_ids[:, None, :])
    if n_prefix:
        allowed = torch.cat([torch.ones(b, n, n_prefix, dtype=torch.bool, device=mask.device), allowed], dim=-1)
    return allowed[:, None]


class Attention(nn.Module):
    def __init__(self, config: LMConfig):
        super().__init__()
        self.n_heads = config.n_heads
        self.d_head = config.head_dim
        self.rope_base = config.rope_base
        d = config.d_model
        self.q = nn.Linear(d, d, bias=False)
        self.k = nn.Linear(d, d, bias=False)
        self.v = nn.Linear(d, d, bias=False)
        self.o = nn.Linear(d, d, bias=False)
        self.q_norm = nn.RMSNorm(self.d_head, eps=config.norm_eps)
        self.k_norm = nn.RMSNorm(self.d_head, eps=config.norm_eps)

    def forward(self, x, positions, allowed, deltas, prefix, layer):
        b, n, _ = x.shape
        shape = (b, n, self.n_heads, self.d_head)
        q = self.q_norm(project(x, self.q.weight, deltas.get("attn.q")).view(shape))
        k = self.k_norm(project(x, self.k.weight, deltas.get("attn.k")).view(shape))
        v = project(x, self.v.weight, deltas.get("attn.v")).view(shape)
        q = rotary(q, positions, self.rope_base)
        k = rotary(k, positions, self.rope_base)
        k, v = inject_prefix_kv(prefix, layer, k, v)
        q, k, v = (t.transpose(1, 2) for t in (q, k, v))
        scores = (q @ k.transpose(-1, -2)) / math.sqrt(self.d_head)
        weights = torch.softmax(scores.masked_fill(~allowed, float("-inf")), dim=-1)
        out = (weights @ v).transpose(1, 2).reshape(b, n, -1)
        return project(out, self.o.weight, deltas.get("attn.o"))

    def prepare_prefix_keys(self, raw_keys: torch.Tensor) -> torch.Tensor:
        """Key norm then rotary at positions 0..P-1 for generated keys [P, H, d]."""
        positions = torch.arange(raw_keys.shape[0], device=raw_keys.device)[None]
        return rotary(self.k_norm(raw_keys)[None], positions, self.rope_base)[0]


class MLP(nn.Module):
    def __init__(self, config: LMConfig):
        super().__init__()
        self.gated = config.gated_mlp
        self.up = nn.Linear(config.d_model, config.d_mlp, bias=False)
        self.gate = nn.Linear(config.d_model, config.d_mlp, bias=False) if self.gated else None
        self.down = nn.Linear(config.d_mlp, config.d_model, bias=False)

    def forward(self, x, deltas):
        up = project(x, self.up.weight, deltas.get("mlp.up"))
        if self.gated:
            h = F.silu(project(x, self.gate.weight, deltas.get("mlp.gate"))) * up
        else:
            h = F.gelu(up)
        return project(h, self.down.weight, deltas.get("mlp.down"))


class Block(nn.Module):
    def __init__(self, config: LMConfig):
        super().__init__()
        self.attn_norm = nn.RMSNorm(config.d_model, eps=config.norm_eps)
        self.attn = Attention(config)
        self.mlp_norm = nn.RMSNorm(config.d_model, eps=config.norm_eps)
        self.mlp = MLP(config)

    def forward(self, x, positions, allowed, deltas, prefix, layer):
        x = x + self.attn(self.attn_norm(x), positions, allowed, deltas, prefix, layer)
        return x + self.mlp(self.mlp_norm(x), deltas)


class TinyLM(nn.Module):
    def __init__(self, config: LMConfig):
        super().__init__()
        self.config = config
        self.embed = nn.Embedding(config.vocab_size, config.d_model)
        self.blocks = nn.ModuleList(Block(config) for _ in range(config.n_layers))
        self.norm = nn.RMSNorm(config.d_model, eps=config.norm_eps)
        self.lm_head = None if config.tie_embeddings else nn.Linear(config.d_model, config.vocab_size, bias=False)

    def module_weight(self, lid: str) -> torch.Tensor:
        block, module = parse_layer_id(lid)
        if block >= len(self.blocks):
            raise ShapeMismatchError(f"{lid} targets block {block}, model has {len(self.blocks)}")
        owner, name = module.split(".")
        linear = getattr(getattr(self.blocks[block], owner), name)
        if linear is None:
            raise ShapeMismatchError(f"{lid} does not exist in this model")
        return linear.weight

    def _split_adapter(self, adapter: Optional[LoraAdapter]) -> List[Dict[str, LoraLayerDelta]]:
        per_block: List[Dict[str, LoraLayerDelta]] = [{} for _ in self.blocks]
        if adapter is None:
            return per_block
        for lid, delta in adapter.layers.items():
            weight = self.module_weight(lid)
            if (delta.d_out, delta.d_in) != tuple(weight.shape):
                raise ShapeMismatchError(
                    f"{lid}: delta is {(delta.d_out, delta.d_in)}, weight is {tuple(weight.shape)}"
                )
            block, module = parse_layer_id(lid)
            per_block[block][module] = delta
        return per_block

    def _run(self, tokens, mask, adapter, prefix, segment_ids, position_ids, with_activations):
        squeeze = tokens.dim() == 1
        if squeeze:
            tokens = tokens[None]
            mask = None if mask is None else mask[None]
            segment_ids = None if segment_ids is None else segment_ids[None]
            position_ids = None if position_ids is None else position_ids[None]
        if tokens.numel() and (int(tokens.min()) < 0 or int(tokens.max()) >= self.config.vocab_size):
            raise TokenizerError("token id outside the vocabulary")
        b, n = tokens.shape
        if mask is None:
            mask = torch.ones(b, n, dtype=torch.bool, device=tokens.device)
        mask = mask.to(torch.bool)
        if prefix is not None:
            check_prefix(prefix, self.config.n_layers, self.config.n_heads, self.config.head_dim)
        n_prefix = prefix.n_prefix if prefix is not None else 0
        offset = prefix.position_offset if prefix is not None else 0
        if position_ids is None:
            position_ids = torch.arange(n, device=tokens.device)[None].expand(b, n)
        positions = position_ids + offset
        allowed = attention_mask(mask, segment_ids, n_prefix)
        deltas = self._split_adapter(adapter)

        x = self.embed(tokens)
        hidden = [x] if with_activations else None
        for i, block in enumerate(self.blocks):
            x = block(x, positions, allowed, deltas[i], prefix, i)
            if with_activations:
                hidden.append(x)
        h = self.norm(x)
        logits = F.linear(h, self.embed.weight if self.lm_head is None else self.lm_head.weight)

        activations = None
        if with_activations:
            stack = torch.stack(hidden, dim=1).masked_fill(~mask[:, None, :, None], 0.0)
            activations = ActivationStack(stack[0] if squeeze else stack, mask[0] if squeeze else mask)
        return LMOutput(logits[0] if squeeze else logits, activations)

    def forward(self, tokens, mask=None, adapter=None, prefix=None, segment_ids=None, position_ids=None):
        return self._run(tokens, mask, adapter, prefix, segment_ids, position_ids, False).logits

    def forward_with_activations(
        self, tokens, mask=None, adapter=None, prefix=None, segment_ids=None, position_ids=None
    ) -> LMOutput:
        return self._run(tokens, mask, adapter, prefix, segment_ids, position_ids, True)


def _init_weights(module: nn.Module) -> None:
    if isinstance(module, (nn.Linear, nn.Embedding)):
        nn.init.normal_(module.weight, mean=0.0, std=0.02)


def init_lm(config: LMConfig, seed: int) -> TinyLM:
    """Deterministically initialized, frozen model."""
    if config.d_model % config.n_heads != 0:
        raise InvalidDimensionError(f"d_model={config.d_model} is not divisible by n_heads={config.n_heads}")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = TinyLM(config)
        model.apply(_init_weights)
    return freeze(model)


def freeze(model: nn.Module) -> nn.Module:
    model.eval()
    model.requires_grad_(False)
    return model


def forward_with_activations(
    params: TinyLM,
    tokens: torch.Tensor,
    mask: Optional[torch.Tensor] = None,
    adapter: Optional[LoraAdapter] = None,
    prefix: Optional[PrefixKV] = None,
) -> LMOutput:
    return params.forward_with_activations(tokens, mask, adapter=adapter, prefix=prefix)


def pad_sequences(seqs: Sequence[Sequence[int]], pad_id: int = PAD_ID) -> Tuple[torch.Tensor, torch.Tensor]:
    """Right-pad to a [B, N] token tensor plus its validity mask."""
    n = max((len(s) for s in seqs), default=0)
    tokens = torch.full((len(seqs), n), pad_id, dtype=torch.long)
    mask = torch.zeros(len(seqs), n, dtype=torch.bool)
    for i, s in enumerate(seqs):
        tokens[i, : len(s)] = torch.as_tensor(list(s), dtype=torch.long)
        mask[i, : len(s)] = True
    return tokens, mask


def continuation_logits(
    model: TinyLM,
    prompts: Sequence[Sequence[int]],
    continuations: Sequence[Sequence[int]],
    adapter: Optional[LoraAdapter] = None,
    prefix: Optional[PrefixKV] = None,
) -> List[torch.Tensor]:
    """Logits [T_i, V] predicting each continuation token, teacher-forced, one batch."""
    seqs = [list(p) + list(c)[:-1] for p, c in zip(prompts, continuations)]
    tokens, mask = pad_sequences(seqs)
    tokens, mask = tokens.to(model.embed.weight.device), mask.to(model.embed.weight.device)
    logits = model(tokens, mask, adapter=adapter, prefix=prefix)
    out = []
    for i, (p, c) in enumerate(zip(prompts, continuations)):
        start = len(p) - 1
        out.append(logits[i, start : start + len(c)])
    return out


def _lr_lambda(warmup: int, total: int):
    def f(step: int) -> float:
        if step < warmup:
            return (step + 1) / warmup
        progress = (step - warmup) / max(1, total - warmup)
        return 0.1 + 0.9 * 0.5 * (1.0 + math.cos(math.pi * min(1.0, progress)))

    return f


def pretrain_lm(
    corpus: Sequence[Sequence[int]],
    config: LMConfig,
    steps: int,
    lr: float,
    *,
    seed: int = 0,
    batch_size: int = 16,
    loss_from: Optional[Sequence[int]] = None,
    params: Optional[TinyLM] = None,
    log: Optional[JsonlLog] = None,
) -> TinyLM:
    """Next-token pretraining on `corpus`.

    ``loss_from[i]`` restricts the loss of sequence i to targets at positions >= that index.
    """
    if not corpus:
        raise ValueError("corpus is empty")
    model = init_lm(config, seed) if params is None else copy.deepcopy(params)
    if steps == 0:
        return freeze(model)

    model.train()
    model.requires_grad_(True)
    opt = torch.optim.AdamW(model.parameters(), lr=lr, betas=(0.9, 0.95), weight_decay=0.01)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, _lr_lambda(min(100, steps), steps))
    rng = np.random.default_rng(seed)
    last_finite = None
    t0 = time.perf_counter()
    for step in range(1, steps + 1):
        idx = rng.integers(0, len(corpus), size=batch_size)
        seqs = [list(corpus[i])[: config.max_seq_len] for i in idx]
        tokens, mask = pad_sequences(seqs)
        valid = mask[:, 1:].clone()
        if loss_from is not None:
            pos = torch.arange(1, tokens.shape[1])[None]
            starts = torch.as_tensor([loss_from[i] for i in idx])[:, None]
            valid &= pos >= starts
        logits = model(tokens, mask)
        nll = F.cross_entropy(
            logits[:, :-1].reshape(-1, config.vocab_size), tokens[:, 1:].reshape(-1), reduction="none"
        )
        loss = (nll * valid.reshape(-1)).sum() / valid.sum().clamp(min=1)
        value = float(loss)
        if not math.isfinite(value):
            raise DivergenceError(step, value, last_finite)
        last_finite = value
        opt.zero_grad(set_to_none=True)
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), 1.0)
        opt.step()
        sched.step()
        if log is not None:
            log.write(
                step=step,
                stage=0,
                loss=value,
                lr=sched.get_last_lr()[0],
                wall_ms=(time.perf_counter() - t0) * 1000.0,
            )
        if step % 100 == 0 or step == steps:
            logger.info("pretrain step %d/%d loss %.4f", step, steps, value)
    return freeze(model)


@torch.no_grad()
def generate(
    params: TinyLM,
    prompt: Sequence[int],
    max_new: int,
    adapter: Optional[LoraAdapter] = None,
    prefix: Optional[PrefixKV] = None,
    include_eos: bool = False,
) -> List[int]:
    """Greedy decoding; ties go to the lowest token id; stops at EOS or after max_new tokens."""
    n_prefix = prefix.n_prefix if prefix is not None else 0
    budget = params.config.max_seq_len
    if len(prompt) + max_new + n_prefix > budget:
        raise BudgetExceededError(
            f"prompt {len(prompt)} + max_new {max_new} + prefix {n_prefix} exceeds window {budget}"
        )
    device = params.embed.weight.device
    seq = list(prompt)
    out: List[int] = []
    for _ in range(max_new):
        logits = params(torch.as_tensor(seq, device=device), adapter=adapter, prefix=prefix)[-1]
        tok = int(torch.argmax(logits))  # first maximal index
        if tok == EOS_ID:
            if include_eos:
                out.append(tok)
            break
        out.append(tok)
        seq.append(tok)
    return out


def kv_cache_footprint(n_ctx_tokens: int, n_gen_tokens: int, config: LMConfig, bytes_per_scalar: int) -> int:
    """Bytes of keys and values held for n_ctx + n_gen positions across all layers."""
    if n_ctx_tokens < 0 or n_gen_tokens < 0 or bytes_per_scalar < 0:
        raise ValueError("counts must be non-negative")
    return 2 * config.n_layers * config.n_heads * config.head_dim * (n_ctx_tokens + n_gen_tokens) * bytes_per_scalar


def save_lm(model: TinyLM, path: Union[str, Path]) -> None:
    meta = {"kind": "target_lm", "config": model.config.model_dump()}
    write_container(path, dump_container(model.state_dict(), meta, LM_MAGIC))


def load_lm(path: Union[str, Path]) -> TinyLM:
    tensors, meta = load_container(Path(path).read_bytes(), LM_MAGIC)
    config = LMConfig(**meta["config"])
    model = TinyLM(config)
    model.load_state_dict(tensors)
    return freeze(model)
