"""Generated adapters: LoRA deltas, their composition across chunks, prefix-KV and the .d2la format.

Layer ids follow ``block{i}.{mlp|attn}.{module}``, e.g. ``block0.mlp.down``.
"""

import re
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import torch

from .checkpoint import FORMAT_VERSION, dump_container, load_container
from .errors import AdapterFormatError, ShapeMismatchError

ADAPTER_MAGIC = b"D2LA"
GENERATOR_VERSION = "doc2lora-1"

LAYER_MODULES = ("mlp.down", "mlp.up", "mlp.gate", "attn.q", "attn.k", "attn.v", "attn.o")
_LAYER_ID = re.compile(r"^block(\d+)\.(mlp\.(?:down|up|gate)|attn\.[qkvo])$")


def layer_id(block: int, module: str = "mlp.down") -> str:
    return f"block{block}.{module}"


def parse_layer_id(lid: str) -> Tuple[int, str]:
    m = _LAYER_ID.match(lid)
    if not m:
        raise AdapterFormatError(f"bad layer id {lid!r}; expected block<i>.<mlp|attn>.<module>")
    return int(m.group(1)), m.group(2)


def default_target_layers(n_layers: int) -> List[str]:
    return [layer_id(i) for i in range(n_layers)]


@dataclass(frozen=True, eq=False)
class LoraLayerDelta:
    """One low-rank update: effective delta is alpha * (B @ A), alpha scalar or per rank."""

    A: torch.Tensor  # [r, d_in]
    B: torch.Tensor  # [d_out, r]
    alpha: torch.Tensor  # [] or [r]

    def __post_init__(self):
        if self.A.dim() != 2 or self.B.dim() != 2:
            raise ShapeMismatchError("A and B must be matrices")
        if self.A.shape[0] != self.B.shape[1]:
            raise ShapeMismatchError(
                f"rank mismatch: A has {self.A.shape[0]} rows, B has {self.B.shape[1]} columns"
            )
        if self.alpha.dim() > 1 or (self.alpha.dim() == 1 and self.alpha.shape[0] != self.rank):
            raise ShapeMismatchError(f"alpha must be a scalar or have {self.rank} entries")
        if not bool(torch.isfinite(self.alpha).all()):
            raise AdapterFormatError("alpha must be finite")

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @property
    def d_in(self) -> int:
        return self.A.shape[1]

    @property
    def d_out(self) -> int:
        return self.B.shape[0]

    def rank_alpha(self) -> torch.Tensor:
        """alpha as a per-rank vector."""
        if self.alpha.dim() == 0:
            return self.alpha.expand(self.rank)
        return self.alpha

    def effective(self) -> torch.Tensor:
        return (self.B * self.rank_alpha()) @ self.A

    def detach(self) -> "LoraLayerDelta":
        return LoraLayerDelta(self.A.detach(), self.B.detach(), self.alpha.detach())


@dataclass(frozen=True, eq=False)
class LoraAdapter:
    layers: Dict[str, LoraLayerDelta]
    chunk_rank: int
    n_chunks: int = 1
    generator_version: str = GENERATOR_VERSION

    def __post_init__(self):
        if not self.layers:
            raise AdapterFormatError("an adapter needs at least one layer")
        for lid in self.layers:
            parse_layer_id(lid)

    @property
    def total_rank(self) -> int:
        return next(iter(self.layers.values())).rank

    def detach(self) -> "LoraAdapter":
        return LoraAdapter(
            {lid: d.detach() for lid, d in self.layers.items()},
            self.chunk_rank,
            self.n_chunks,
            self.generator_version,
        )

    def num_scalars(self) -> int:
        return sum(d.A.numel() + d.B.numel() + d.alpha.numel() for d in self.layers.values())


def apply_lora(W: torch.Tensor, delta: LoraLayerDelta) -> torch.Tensor:
    """Return W + alpha * (B @ A) without touching W."""
    if W.shape != (delta.d_out, delta.d_in):
        raise ShapeMismatchError(
            f"weight is {tuple(W.shape)}, delta expects {(delta.d_out, delta.d_in)}"
        )
    return W + delta.effective()


def compose_chunks(chunk_deltas: Sequence[LoraLayerDelta]) -> LoraLayerDelta:
    """Concatenate per-chunk deltas along the rank axis.

    A rows and B columns are stacked in chunk order; each chunk keeps its own alpha,
    stored as a per-rank vector of the composed rank. Chunks may differ in rank, so
    already composed deltas compose again.
    """
    if not chunk_deltas:
        raise ValueError("compose_chunks needs at least one chunk")
    if len(chunk_deltas) == 1:
        return chunk_deltas[0]
    first = chunk_deltas[0]
    for d in chunk_deltas[1:]:
        if (d.d_in, d.d_out) != (first.d_in, first.d_out):
            raise ShapeMismatchError("all chunks must share d_in and d_out")
    return LoraLayerDelta(
        A=torch.cat([d.A for d in chunk_deltas], dim=0),
        B=torch.cat([d.B for d in chunk_deltas], dim=1),
        alpha=torch.cat([d.rank_alpha() for d in chunk_deltas], dim=0),
    )


def compose_adapters(adapters: Sequence[LoraAdapter]) -> LoraAdapter:
    if not adapters:
        raise ValueError("compose_adapters needs at least one adapter")
    if len(adapters) == 1:
        return adapters[0]
    ids = list(adapters[0].layers)
    for a in adapters[1:]:
        if list(a.layers) != ids:
            raise ShapeMismatchError("adapters cover different layer sets")
    return LoraAdapter(
        {lid: compose_chunks([a.layers[lid] for a in adapters]) for lid in ids},
        chunk_rank=adapters[0].chunk_rank,
        n_chunks=sum(a.n_chunks for a in adapters),
        generator_version=adapters[0].generator_version,
    )


def serialize_adapter(adapter: LoraAdapter) -> bytes:
    tensors = {}
    for lid, d in adapter.layers.items():
        tensors[f"{lid}.A"] = d.A
        tensors[f"{lid}.B"] = d.B
        tensors[f"{lid}.alpha"] = d.alpha
    meta = {
        "kind": "lora_adapter",
        "layers": list(adapter.layers),
        "chunk_rank": adapter.chunk_rank,
        "n_chunks": adapter.n_chunks,
        "generator_version": adapter.generator_version,
    }
    return dump_container(tensors, meta, ADAPTER_MAGIC, FORMAT_VERSION)


def deserialize_adapter(data: bytes) -> LoraAdapter:
    tensors, meta = load_container(data, ADAPTER_MAGIC)
    if meta.get("kind") != "lora_adapter":
        raise AdapterFormatError(f"not a LoRA adapter: kind={meta.get('kind')!r}")
    try:
        layers = {
            lid: LoraLayerDelta(tensors[f"{lid}.A"], tensors[f"{lid}.B"], tensors[f"{lid}.alpha"])
            for lid in meta["layers"]
        }
    except KeyError as e:
        raise AdapterFormatError(f"missing tensor {e}") from e
    return LoraAdapter(layers, meta["chunk_rank"], meta["n_chunks"], meta["generator_version"])


@dataclass(frozen=True, eq=False)
class PrefixKV:
    """Per-layer generated key/value entries prepended to attention.

    keys[l] and values[l] are [n_prefix, n_heads, d_head]. When ``rope_applied`` the keys
    already went through the model's key norm and rotary embedding at positions
    0..n_prefix-1, and real tokens are shifted to start at position n_prefix.
    """

    keys: List[torch.Tensor]
    values: List[torch.Tensor]
    rope_applied: bool = False
    n_chunks: int = 1
    meta: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        if len(self.keys) != len(self.values):
            raise ShapeMismatchError("keys and values cover different layer counts")
        for k, v in zip(self.keys, self.values):
            if k.dim() != 3 or k.shape != v.shape:
                raise ShapeMismatchError("prefix keys/values must be matching [n_prefix, n_heads, d_head]")
            if k.shape[0] != self.keys[0].shape[0]:
                raise ShapeMismatchError("every layer must carry the same number of prefix tokens")

    @property
    def n_layers(self) -> int:
        return len(self.keys)

    @property
    def n_prefix(self) -> int:
        return self.keys[0].shape[0] if self.keys else 0

    @property
    def position_offset(self) -> int:
        return self.n_prefix if self.rope_applied else 0


def check_prefix(prefix: PrefixKV, n_layers: int, n_heads: int, d_head: int) -> None:
    if prefix.n_layers != n_layers:
        raise ShapeMismatchError(f"prefix covers {prefix.n_layers} layers, model has {n_layers}")
    if prefix.n_prefix and tuple(prefix.keys[0].shape[1:]) != (n_heads, d_head):
        raise ShapeMismatchError(
            f"prefix heads are {tuple(prefix.keys[0].shape[1:])}, model expects {(n_heads, d_head)}"
        )


def inject_prefix_kv(
    prefix: Optional[PrefixKV], layer: int, keys: torch.Tensor, values: torch.Tensor
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Prepend layer `layer`'s prefix entries to keys/values of shape [B, N, H, d_head]."""
    if prefix is None or prefix.n_prefix == 0:
        return keys, values
    if not 0 <= layer < prefix.n_layers:
        raise ShapeMismatchError(f"prefix has no entries for layer {layer}")
    b = keys.shape[0]
    pk = prefix.keys[layer].to(keys.dtype).unsqueeze(0).expand(b, -1, -1, -1)
    pv = prefix.values[layer].to(values.dtype).unsqueeze(0).expand(b, -1, -1, -1)
    return torch.cat([pk, keys], dim=1), torch.cat([pv, values], dim=1)


def concat_prefixes(prefixes: Sequence[PrefixKV]) -> PrefixKV:
    """Stack raw (un-rotated) per-chunk prefixes along the prefix axis."""
    if not prefixes:
        raise ValueError("concat_prefixes needs at least one prefix")
    if any(p.rope_applied for p in prefixes):
        raise ShapeMismatchError("only raw prefixes can be concatenated")
    if len(prefixes) == 1:
        return prefixes[0]
    n_layers = prefixes[0].n_layers
    return PrefixKV(
        keys=[torch.cat([p.keys[l] for p in prefixes], dim=0) for l in range(n_layers)],
        values=[torch.cat([p.values[l] for p in prefixes], dim=0) for l in range(n_layers)],
        rope_applied=False,
        n_chunks=sum(p.n_chunks for p in prefixes),
    )
