"""Context-to-adapter hypernetwork.

A context is split into chunks, each chunk is run through the frozen target model, and
a Perceiver-style stack of cross-attention blocks reduces the activations to a fixed set
of latents. Per-layer heads turn latent i into row i of A_l and column i of B_l (LoRA
mode) or into the i-th generated key/value entry of every layer (prefix-KV mode). Chunk
results are concatenated along the rank (or prefix) axis.
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .adapters import (
    LoraAdapter,
    LoraLayerDelta,
    PrefixKV,
    compose_chunks,
    default_target_layers,
    parse_layer_id,
)
from .checkpoint import dump_container, load_container, write_container
from .errors import ConfigError, HypernetError, ShapeMismatchError
from .models import HypernetConfig, LMConfig
from .target_lm import ActivationStack, TinyLM, pad_sequences

logger = logging.getLogger(__name__)

HYPERNET_MAGIC = b"D2HN"

# K -> probability for training-time chunking
CHUNK_PROBS = {1: 0.5, 2: 0.125, **{k: 0.0625 for k in range(3, 9)}}


@dataclass(frozen=True)
class ChunkPlan:
    spans: Tuple[Tuple[int, int], ...]

    @property
    def K(self) -> int:
        return len(self.spans)

    def split(self, tokens: Sequence[int]) -> List[List[int]]:
        return [list(tokens[s:e]) for s, e in self.spans]


def _equal_spans(n: int, k: int) -> Tuple[Tuple[int, int], ...]:
    base, extra = divmod(n, k)
    sizes = [base] * (k - extra) + [base + 1] * extra  # trailing chunks absorb the remainder
    spans, start = [], 0
    for size in sizes:
        spans.append((start, start + size))
        start += size
    return tuple(spans)


def _length(tokens: Union[int, Sequence[int]]) -> int:
    return tokens if isinstance(tokens, int) else len(tokens)


def chunk_context(tokens: Union[int, Sequence[int]], max_chunk_tokens: int, min_chunk: int = 1) -> ChunkPlan:
    """Equal-sized contiguous chunks no longer than max_chunk_tokens."""
    n = _length(tokens)
    if n < 1:
        raise ValueError("cannot chunk an empty context")
    if min_chunk > n:
        raise ValueError(f"min_chunk={min_chunk} exceeds context length {n}")
    if n <= max_chunk_tokens:
        return ChunkPlan(((0, n),))
    if max_chunk_tokens < 2 * min_chunk:
        raise ConfigError("max_chunk_tokens must be at least twice min_chunk")
    return ChunkPlan(_equal_spans(n, math.ceil(n / max_chunk_tokens)))


def sample_training_chunk_plan(
    rng: np.random.Generator,
    tokens: Union[int, Sequence[int]],
    min_chunk: int = 25,
    probs: Optional[Dict[int, float]] = None,
) -> ChunkPlan:
    """Draw K from the training distribution, clamped so every chunk keeps min_chunk tokens."""
    n = _length(tokens)
    probs = probs or CHUNK_PROBS
    ks = sorted(probs)
    k = int(rng.choice(ks, p=np.asarray([probs[x] for x in ks]) / sum(probs.values())))
    k = max(1, min(k, n // min_chunk))
    return ChunkPlan(_equal_spans(n, k))


def latent_cross_attention(
    q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, mask: torch.Tensor, n_heads: int
) -> torch.Tensor:
    """Multi-head attention of latents q [B, R, d] over keys/values [B, N, d]; masked keys get zero weight."""
    if not bool(mask.any(dim=-1).all()):
        raise HypernetError("every context position is masked")
    b, r, d = q.shape
    n = k.shape[1]
    dh = d // n_heads
    q = q.view(b, r, n_heads, dh).transpose(1, 2)
    k = k.view(b, n, n_heads, dh).transpose(1, 2)
    v = v.view(b, n, n_heads, dh).transpose(1, 2)
    scores = (q @ k.transpose(-1, -2)) / math.sqrt(dh)
    scores = scores.masked_fill(~mask[:, None, None, :], float("-inf"))
    out = torch.softmax(scores, dim=-1) @ v
    return out.transpose(1, 2).reshape(b, r, d)


class GatedMLP(nn.Module):
    def __init__(self, d_in: int, d_hidden: int, d_out: int):
        super().__init__()
        self.gate = nn.Linear(d_in, d_hidden, bias=False)
        self.up = nn.Linear(d_in, d_hidden, bias=False)
        self.down = nn.Linear(d_hidden, d_out, bias=False)

    def forward(self, x):
        return self.down(F.silu(self.gate(x)) * self.up(x))


class LatentSelfAttention(nn.Module):
    def __init__(self, d: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.norm = nn.RMSNorm(d, eps=1e-6)
        self.qkv = nn.Linear(d, 3 * d, bias=False)
        self.o = nn.Linear(d, d, bias=False)

    def forward(self, latents):
        q, k, v = self.qkv(self.norm(latents)).chunk(3, dim=-1)
        full = torch.ones(latents.shape[:2], dtype=torch.bool, device=latents.device)
        return self.o(latent_cross_attention(q, k, v, full, self.n_heads))


class CrossAttentionBlock(nn.Module):
    def __init__(self, d: int, n_heads: int, self_attn: bool = False):
        super().__init__()
        self.n_heads = n_heads
        self.latents_norm = nn.RMSNorm(d, eps=1e-6)
        self.context_norm = nn.RMSNorm(d, eps=1e-6)
        self.q = nn.Linear(d, d, bias=False)
        self.k = nn.Linear(d, d, bias=False)
        self.v = nn.Linear(d, d, bias=False)
        self.o = nn.Linear(d, d, bias=False)
        self.self_attn = LatentSelfAttention(d, n_heads) if self_attn else None
        self.mlp_norm = nn.RMSNorm(d, eps=1e-6)
        self.mlp = GatedMLP(d, 4 * d, d)

    def forward(self, latents, context, mask):
        h = self.latents_norm(latents)
        c = self.context_norm(context)
        latents = latents + self.o(latent_cross_attention(self.q(h), self.k(c), self.v(c), mask, self.n_heads))
        if self.self_attn is not None:
            latents = latents + self.self_attn(latents)
        return latents + self.mlp(self.mlp_norm(latents))


def _head_key(name: str) -> str:
    return name.replace(".", "_")


def target_dims(lid: str, lm_config: LMConfig) -> Tuple[int, int]:
    """(d_in, d_out) of the weight behind a layer id."""
    _, module = parse_layer_id(lid)
    d, m = lm_config.d_model, lm_config.d_mlp
    if module == "mlp.down":
        return m, d
    if module in ("mlp.up", "mlp.gate"):
        return d, m
    return d, d


class Hypernet(nn.Module):
    def __init__(self, config: HypernetConfig, lm_config: LMConfig):
        super().__init__()
        if config.input_dim != lm_config.d_model:
            raise ConfigError(f"input_dim={config.input_dim} but the target model width is {lm_config.d_model}")
        if config.activation_source == "single_layer" and config.source_layer > lm_config.n_layers:
            raise ConfigError(f"source_layer={config.source_layer} is outside the activation stack")
        self.config = config
        self.lm_config = lm_config
        d = config.d_latent
        self.input_proj = GatedMLP(config.input_dim, config.mlp_hidden, d)
        self.latents = nn.Parameter(torch.randn(config.n_latents, d))
        self.blocks = nn.ModuleList(
            CrossAttentionBlock(d, config.n_attn_heads, config.latent_self_attn) for _ in range(config.n_xattn_blocks)
        )
        self.out_norm = nn.RMSNorm(d, eps=1e-6)

        if config.output_mode == "lora":
            self.targets = list(config.target_layers or default_target_layers(lm_config.n_layers))
            n_alpha = config.n_latents if config.scaler_mode == "per_rank" else 1
            self.heads = nn.ParameterDict()
            self.alpha = nn.ParameterDict()
            for lid in self.targets:
                block, _ = parse_layer_id(lid)
                if block >= lm_config.n_layers:
                    raise ConfigError(f"{lid} targets a block the model does not have")
                d_in, d_out = target_dims(lid, lm_config)
                self.heads[_head_key(lid)] = nn.Parameter(torch.randn(d, d_in + d_out) / math.sqrt(d))
                self.alpha[_head_key(lid)] = nn.Parameter(torch.full((n_alpha,), config.alpha_init))
        else:
            self.targets = [f"block{i}" for i in range(lm_config.n_layers)]
            width = 2 * lm_config.n_heads * lm_config.head_dim
            self.heads = nn.ParameterDict(
                {t: nn.Parameter(torch.randn(d, width) / math.sqrt(d)) for t in self.targets}
            )
            self.alpha = None

    def num_trainable(self) -> int:
        return sum(p.numel() for p in self.parameters() if p.requires_grad)

    def source_index(self, target: str) -> int:
        """Activation-stack slice feeding `target`: Z_{l-1} for block l, or the fixed source layer."""
        if self.config.activation_source == "single_layer":
            return self.config.source_layer
        block = int(target.split(".")[0][len("block"):])
        return block

    def encode(self, z: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """[B, N, D] activations -> [B, R, d_latent] latents."""
        x = self.input_proj(z)
        latents = self.latents.to(x.dtype).unsqueeze(0).expand(z.shape[0], -1, -1)
        for block in self.blocks:
            latents = block(latents, x, mask)
        return self.out_norm(latents)

    def latents_for(self, hidden: torch.Tensor, mask: torch.Tensor, mode: str) -> Dict[str, torch.Tensor]:
        """Per-target latents [K, R, d] from padded chunk activations [K, L+1, N, D].

        batched: every distinct source slice of every chunk goes through one encoder call.
        iterative: one encoder call per target, layer by layer.
        """
        k = hidden.shape[0]
        if mode == "batched":
            sources = sorted({self.source_index(t) for t in self.targets})
            z = hidden[:, sources].reshape(k * len(sources), *hidden.shape[2:])
            m = mask.repeat_interleave(len(sources), dim=0)
            u = self.encode(z, m).view(k, len(sources), self.config.n_latents, -1)
            by_source = {s: u[:, j] for j, s in enumerate(sources)}
            return {t: by_source[self.source_index(t)] for t in self.targets}
        if mode == "iterative":
            return {t: self.encode(hidden[:, self.source_index(t)], mask) for t in self.targets}
        raise ValueError(f"unknown generation mode {mode!r}")


def init_hypernet(config: HypernetConfig, lm_config: LMConfig, seed: Optional[int] = None) -> Hypernet:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed if seed is None else seed)
        model = Hypernet(config, lm_config)
    logger.info("hypernetwork (%s mode) has %d trainable parameters", config.output_mode, model.num_trainable())
    return model


def _pad_chunks(hypernet: Hypernet, activations: Sequence[ActivationStack]) -> Tuple[torch.Tensor, torch.Tensor]:
    if not activations:
        raise HypernetError("no chunk activations given")
    for a in activations:
        if a.is_batched:
            raise ShapeMismatchError("generate_* expects one unbatched ActivationStack per chunk")
        if a.hidden.shape[-1] != hypernet.config.input_dim:
            raise ShapeMismatchError(
                f"activation width {a.hidden.shape[-1]} != hypernet input_dim {hypernet.config.input_dim}"
            )
        if a.hidden.shape[0] != hypernet.lm_config.n_layers + 1:
            raise ShapeMismatchError("activation stack depth does not match the target model")
    n = max(a.n_tokens for a in activations)
    first = activations[0].hidden
    hidden = first.new_zeros(len(activations), first.shape[0], n, first.shape[-1])
    mask = torch.zeros(len(activations), n, dtype=torch.bool, device=first.device)
    for i, a in enumerate(activations):
        hidden[i, :, : a.n_tokens] = a.hidden
        mask[i, : a.n_tokens] = a.mask
    return hidden, mask


def cross_attend(hypernet: Hypernet, Z_in: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Latents U [n_latents, d_latent] for one activation slice Z_in [N, D]."""
    squeeze = Z_in.dim() == 2
    z = Z_in[None] if squeeze else Z_in
    if mask is None:
        mask = torch.ones(z.shape[:2], dtype=torch.bool, device=z.device)
    elif squeeze:
        mask = mask[None]
    u = hypernet.encode(z, mask.to(torch.bool))
    return u[0] if squeeze else u


def emit_lora_layer(U: torch.Tensor, head: torch.Tensor, alpha: torch.Tensor, d_in: int) -> LoraLayerDelta:
    """Latent i becomes row i of A and column i of B."""
    flat = U @ head  # [r, d_in + d_out]
    if alpha.numel() == 1:
        alpha = alpha.reshape(())
    return LoraLayerDelta(A=flat[:, :d_in], B=flat[:, d_in:].transpose(0, 1), alpha=alpha)


def generate_adapter(
    hypernet: Hypernet, activations: Sequence[ActivationStack], mode: str = "batched"
) -> LoraAdapter:
    """Per-chunk LoRA deltas from the hypernetwork, composed by rank concatenation."""
    if hypernet.config.output_mode != "lora":
        raise HypernetError("hypernetwork is configured for prefix_kv output")
    hidden, mask = _pad_chunks(hypernet, activations)
    latents = hypernet.latents_for(hidden, mask, mode)
    layers = {}
    for lid in hypernet.targets:
        key = _head_key(lid)
        d_in, _ = target_dims(lid, hypernet.lm_config)
        u = latents[lid]
        chunks = [emit_lora_layer(u[k], hypernet.heads[key], hypernet.alpha[key], d_in) for k in range(u.shape[0])]
        layers[lid] = compose_chunks(chunks)
    return LoraAdapter(layers, chunk_rank=hypernet.config.n_latents, n_chunks=len(activations))


def generate_prefix_kv(
    hypernet: Hypernet,
    activations: Sequence[ActivationStack],
    rope_on_keys: Optional[bool] = None,
    lm: Optional[TinyLM] = None,
    mode: str = "batched",
) -> PrefixKV:
    """Generated prefix entries; with rope_on_keys the keys pass through the model's key norm and RoPE."""
    if hypernet.config.output_mode != "prefix_kv":
        raise HypernetError("hypernetwork is configured for lora output")
    rope_on_keys = hypernet.config.rope_on_keys if rope_on_keys is None else rope_on_keys
    if rope_on_keys and lm is None:
        raise HypernetError("rope_on_keys needs the target model's key norm")
    cfg = hypernet.lm_config
    hidden, mask = _pad_chunks(hypernet, activations)
    latents = hypernet.latents_for(hidden, mask, mode)
    keys, values = [], []
    for t in hypernet.targets:
        kv = latents[t] @ hypernet.heads[t]  # [K, P, 2*H*dh]
        kv = kv.reshape(-1, 2, cfg.n_heads, cfg.head_dim)
        keys.append(kv[:, 0])
        values.append(kv[:, 1])
    raw = PrefixKV(keys, values, rope_applied=False, n_chunks=len(activations))
    if not rope_on_keys:
        return raw
    rotated = [lm.blocks[l].attn.prepare_prefix_keys(k) for l, k in enumerate(raw.keys)]
    return PrefixKV(rotated, raw.values, rope_applied=True, n_chunks=raw.n_chunks)


def encode_chunks(lm: TinyLM, tokens: Sequence[int], plan: ChunkPlan, batch_size: int = 8) -> List[ActivationStack]:
    """Run each chunk through the frozen model on its own; one ActivationStack per chunk."""
    chunks = plan.split(tokens)
    device = lm.embed.weight.device
    stacks: List[ActivationStack] = []
    with torch.no_grad():
        for i in range(0, len(chunks), batch_size):
            group = chunks[i : i + batch_size]
            toks, mask = pad_sequences(group)
            out = lm.forward_with_activations(toks.to(device), mask.to(device))
            stacks.extend(out.activations.select(j, 0, len(c)) for j, c in enumerate(group))
    return stacks


def internalize(
    hypernet: Hypernet,
    lm: TinyLM,
    tokens: Sequence[int],
    mode: str = "batched",
    max_chunk_tokens: Optional[int] = None,
) -> Union[LoraAdapter, PrefixKV]:
    """Chunk, encode and generate in one call; the adapter or prefix for `tokens`."""
    plan = chunk_context(tokens, max_chunk_tokens or hypernet.config.max_chunk_tokens)
    stacks = encode_chunks(lm, tokens, plan)
    with torch.no_grad():
        if hypernet.config.output_mode == "lora":
            return generate_adapter(hypernet, stacks, mode).detach()
        prefix = generate_prefix_kv(hypernet, stacks, lm=lm, mode=mode)
        return PrefixKV(
            [k.detach() for k in prefix.keys],
            [v.detach() for v in prefix.values],
            prefix.rope_applied,
            prefix.n_chunks,
        )


def save_hypernet(hypernet: Hypernet, path: Union[str, Path], extra: Optional[dict] = None) -> None:
    meta = {
        "kind": "hypernet",
        "config": hypernet.config.model_dump(),
        "lm_config": hypernet.lm_config.model_dump(),
        **(extra or {}),
    }
    write_container(path, dump_container(hypernet.state_dict(), meta, HYPERNET_MAGIC))


def load_hypernet(path: Union[str, Path]) -> Tuple[Hypernet, dict]:
    tensors, meta = load_container(Path(path).read_bytes(), HYPERNET_MAGIC)
    model = Hypernet(HypernetConfig(**meta["config"]), LMConfig(**meta["lm_config"]))
    model.load_state_dict(tensors)
    return model, meta
