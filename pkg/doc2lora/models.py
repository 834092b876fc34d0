"""Pydantic models: experiment configuration, metric rows and HTTP payloads."""

from typing import Any, Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationInfo, field_validator, model_validator

from .text import VOCAB_SIZE

METRICS_SCHEMA_VERSION = 2

ALL_METHODS = (
    "in_context",
    "hypernet-batched",
    "hypernet-iterative",
    "cd-oracle",
    "cd-generated-q",
    "hyperkv",
)


class LMConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    vocab_size: int = Field(VOCAB_SIZE, ge=1, description="Size of the token vocabulary")
    d_model: int = Field(64, ge=1, description="Residual stream width D")
    n_layers: int = Field(4, ge=1, description="Number of transformer blocks L")
    n_heads: int = Field(4, ge=1)
    d_head: Optional[int] = Field(None, ge=1, description="Defaults to d_model // n_heads")
    d_mlp: int = Field(256, ge=1)
    max_seq_len: int = Field(2048, ge=1, description="Window in tokens, prefix tokens included")
    rope_base: float = Field(10000.0, gt=0)
    norm_eps: float = Field(1e-6, gt=0)
    gated_mlp: bool = True
    tie_embeddings: bool = True

    @property
    def head_dim(self) -> int:
        return self.d_head if self.d_head is not None else self.d_model // self.n_heads

    @model_validator(mode="after")
    def _check_dimensions(self) -> "LMConfig":
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.n_heads * self.head_dim != self.d_model:
            raise ValueError("d_model must equal n_heads * d_head")
        if self.head_dim % 2 != 0:
            raise ValueError("d_head must be even for rotary embeddings")
        return self


class HypernetConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    d_latent: int = Field(64, ge=1, description="Latent width d_u (= d_q)")
    n_latents: int = Field(8, ge=1, description="LoRA rank r, or prefix length in prefix_kv mode")
    n_xattn_blocks: int = Field(2, ge=1)
    n_attn_heads: int = Field(4, ge=1)
    input_dim: int = Field(64, ge=1, description="Width D of the activations fed in")
    mlp_hidden: int = Field(128, ge=1, description="Hidden width of the input projection")
    output_mode: Literal["lora", "prefix_kv"] = "lora"
    target_layers: Optional[List[str]] = Field(
        None, description="Layer ids such as block0.mlp.down; None means every down projection"
    )
    max_chunk_tokens: int = Field(1024, ge=1)
    min_chunk: int = Field(25, ge=1)
    activation_source: Literal["per_layer", "single_layer"] = Field(
        "per_layer", description="per_layer feeds block l from its own input; single_layer feeds every head from source_layer"
    )
    source_layer: int = Field(2, ge=0, description="Activation-stack index used in single_layer mode")
    latent_self_attn: bool = False
    scaler_mode: Literal["per_rank", "per_layer"] = "per_rank"
    alpha_init: float = 1e-3
    rope_on_keys: bool = True
    seed: int = 0

    @model_validator(mode="after")
    def _check(self) -> "HypernetConfig":
        if self.max_chunk_tokens < 2 * self.min_chunk:
            raise ValueError("max_chunk_tokens must be at least twice min_chunk")
        if self.d_latent % self.n_attn_heads != 0:
            raise ValueError("d_latent must be divisible by n_attn_heads")
        return self


class TrainSchedule(BaseModel):
    model_config = ConfigDict(extra="forbid")

    stage1_steps: int = Field(8000, ge=0, description="Single-chunk steps")
    stage2_steps: int = Field(2000, ge=0, description="Randomly chunked steps")
    lr: float = Field(1e-3, gt=0)
    optimizer: Literal["adamw", "sgd"] = "adamw"
    betas: Tuple[float, float] = (0.9, 0.999)
    weight_decay: float = Field(0.0, ge=0)
    grad_clip: Optional[float] = Field(1.0, gt=0)
    batch_token_budget: int = Field(4096, ge=1, description="Context tokens packed per step")
    max_contexts_per_step: int = Field(8, ge=1)
    loss: Literal["kl", "ntp"] = "kl"
    generation_mode: Literal["batched", "iterative"] = "batched"
    checkpoint_every: int = Field(1000, ge=0)
    eval_every: int = Field(0, ge=0)
    seed: int = 0

    @property
    def total_steps(self) -> int:
        return self.stage1_steps + self.stage2_steps


class PretrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    steps: int = Field(3000, ge=0)
    lr: float = Field(3e-3, gt=0)
    batch_size: int = Field(16, ge=1)
    n_samples: int = Field(20000, ge=1)
    length_range: Tuple[int, int] = (32, 1024)
    answer_loss_only: bool = False


class TaskConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    n_samples: int = Field(64000, ge=1, description="Meta-training contexts")
    length_range: Tuple[int, int] = (32, 256)
    needle_digits: int = Field(4, ge=1)
    queries_per_context: int = Field(10, ge=0, description="Generated queries per context")
    topk: int = Field(16, ge=1)
    max_response_tokens: int = Field(24, ge=1)
    query_generator: Literal["rule", "openai"] = "rule"
    query_model: str = "google/gemma-3-12b-it"
    query_base_url: str = "https://router.huggingface.co/v1"

    @model_validator(mode="after")
    def _check(self) -> "TaskConfig":
        lo, hi = self.length_range
        if not 1 <= lo <= hi:
            raise ValueError("length_range must satisfy 1 <= min <= max")
        return self


class EvalConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    lengths: List[int] = Field(default_factory=lambda: [64, 128, 256, 512, 1024, 2048, 4096])
    n_per_length: int = Field(32, ge=1)
    methods: List[str] = Field(default_factory=lambda: list(ALL_METHODS))
    cd_steps: int = Field(200, ge=0)
    cd_lr: float = Field(0.5, gt=0)
    cd_rank: int = Field(8, ge=1)
    cd_queries: int = Field(5, ge=1)
    cd_instances: int = Field(4, ge=1, description="Instances per length for the CD baselines")
    latency_repeats: int = Field(5, ge=1)
    bytes_per_scalar: int = Field(4, ge=1)

    @model_validator(mode="after")
    def _check(self) -> "EvalConfig":
        unknown = [m for m in self.methods if m not in ALL_METHODS]
        if unknown:
            raise ValueError(f"unknown methods: {unknown}")
        return self


_HYPERNET_DEFAULTS: Dict[str, Dict[str, Any]] = {
    "hypernet": {"activation_source": "single_layer"},
    "hyperkv": {"activation_source": "single_layer", "output_mode": "prefix_kv", "n_latents": 20},
}


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str = "niah"
    seed: int = 0
    output_dir: Optional[str] = Field(None, description="Run directory; defaults to $D2L_RUN_DIR/<name>")
    single_threaded: bool = True
    lm: LMConfig = Field(default_factory=LMConfig)
    hypernet: HypernetConfig = Field(default_factory=dict, validate_default=True)
    hyperkv: HypernetConfig = Field(default_factory=dict, validate_default=True)
    schedule: TrainSchedule = Field(default_factory=TrainSchedule)
    pretrain: PretrainConfig = Field(default_factory=PretrainConfig)
    task: TaskConfig = Field(default_factory=TaskConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)

    @field_validator("hypernet", "hyperkv", mode="before")
    @classmethod
    def _hypernet_defaults(cls, value: Any, info: ValidationInfo) -> Any:
        # NIAH runs read one activation slice; keys left out of a partial config keep these
        if not isinstance(value, dict):
            return value
        defaults = dict(_HYPERNET_DEFAULTS[info.field_name])
        defaults.update(value)
        return defaults

    @model_validator(mode="after")
    def _check(self) -> "ExperimentConfig":
        if self.lm.max_seq_len < 2 * self.task.length_range[1]:
            raise ValueError("lm.max_seq_len must be at least twice the maximum training length")
        for field, hcfg in (("hypernet", self.hypernet), ("hyperkv", self.hyperkv)):
            if hcfg.input_dim != self.lm.d_model:
                raise ValueError(f"{field}.input_dim must equal lm.d_model")
            if hcfg.source_layer > self.lm.n_layers:
                raise ValueError(f"{field}.source_layer exceeds lm.n_layers")
        return self


class MetricsRow(BaseModel):
    schema_version: int = METRICS_SCHEMA_VERSION
    method: str
    context_length: int
    accuracy: float
    n: int
    latency_ms_mean: Optional[float] = None
    latency_ms_std: Optional[float] = None
    update_memory_bytes: Optional[int] = None
    inference_footprint_bytes: int
    adapter_bytes: Optional[int] = None  # generated adapter or prefix, held once per document
    allocator_peak_bytes: Optional[int] = None
    truncated: bool = False


# HTTP payloads


class InternalizeRequest(BaseModel):
    document: str = Field(..., min_length=1, description="Text to internalize")
    session_id: Optional[str] = None
    mode: Literal["batched", "iterative"] = "batched"


class InternalizeResponse(BaseModel):
    session_id: str
    n_chunks: int
    total_rank: int
    context_tokens: int
    latency_ms: float
    replaced_chars: int = Field(0, description="Characters outside the vocabulary, read as spaces")


class QueryRequest(BaseModel):
    session_id: str
    query: str = Field(..., min_length=1)
    max_new: int = Field(16, ge=0, le=256)


class QueryResponse(BaseModel):
    session_id: str
    answer: str
    prompt_tokens: int
