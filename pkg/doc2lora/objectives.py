"""Distillation targets and losses, plus the records the data pipeline stores them in."""

from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence

import torch
import torch.nn.functional as F

from .errors import ShapeMismatchError, TaskError


@dataclass(frozen=True, eq=False)
class TopKTargetRecord:
    """Teacher supervision for one response: the k largest logits per position, descending."""

    token_ids: torch.Tensor  # [T, k] long
    logits: torch.Tensor  # [T, k]
    response: List[int]

    def __post_init__(self):
        if self.token_ids.shape != self.logits.shape or self.token_ids.dim() != 2:
            raise ShapeMismatchError("token_ids and logits must both be [T, k]")
        if self.token_ids.shape[0] != len(self.response):
            raise ShapeMismatchError(
                f"{self.token_ids.shape[0]} target positions for {len(self.response)} response tokens"
            )

    @property
    def T(self) -> int:
        return self.token_ids.shape[0]

    @property
    def k(self) -> int:
        return self.token_ids.shape[1]

    def to_json(self) -> List[List[List[float]]]:
        return [
            [[int(t), float(v)] for t, v in zip(ids, vals)]
            for ids, vals in zip(self.token_ids.tolist(), self.logits.tolist())
        ]

    @classmethod
    def from_json(cls, topk: Sequence[Sequence[Sequence[float]]], response: Sequence[int]) -> "TopKTargetRecord":
        k = len(topk[0]) if topk else 0
        ids = torch.tensor([[int(p[0]) for p in pos] for pos in topk], dtype=torch.long).reshape(-1, k)
        vals = torch.tensor([[float(p[1]) for p in pos] for pos in topk], dtype=torch.float32).reshape(-1, k)
        return cls(ids, vals, list(response))


def topk_targets(teacher_logits: torch.Tensor, k: int, response: Optional[Sequence[int]] = None) -> TopKTargetRecord:
    """Per position the k largest logits; equal logits keep the lowest token id first."""
    if k < 1:
        raise ValueError("k must be >= 1")
    k = min(k, teacher_logits.shape[-1])
    ordered = torch.sort(teacher_logits.detach(), dim=-1, descending=True, stable=True)
    ids, vals = ordered.indices[:, :k], ordered.values[:, :k]
    if response is None:
        response = [-1] * teacher_logits.shape[0]
    return TopKTargetRecord(ids, vals.to(torch.float32), list(response))


def kl_per_position(token_ids: torch.Tensor, teacher_logits: torch.Tensor, student_logits: torch.Tensor) -> torch.Tensor:
    """KL(p_teacher || p_student) per position, both renormalized over the teacher's top-k set."""
    s = student_logits.gather(-1, token_ids)
    log_p = F.log_softmax(teacher_logits.to(s.dtype), dim=-1)
    log_q = F.log_softmax(s, dim=-1)
    return (log_p.exp() * (log_p - log_q)).sum(dim=-1)


def kl_loss(targets: TopKTargetRecord, student_logits: torch.Tensor) -> torch.Tensor:
    """Mean over response positions of the truncated-support KL."""
    if student_logits.dim() != 2 or student_logits.shape[0] != targets.T:
        raise ShapeMismatchError(
            f"student logits cover {student_logits.shape[0]} positions, targets cover {targets.T}"
        )
    ids = targets.token_ids.to(student_logits.device)
    return kl_per_position(ids, targets.logits.to(student_logits.device), student_logits).mean()


def ce_loss(student_logits: torch.Tensor, gold_tokens) -> torch.Tensor:
    """Mean negative log-likelihood of the gold tokens."""
    gold = torch.as_tensor(gold_tokens, dtype=torch.long, device=student_logits.device)
    if student_logits.dim() != 2 or student_logits.shape[0] != gold.shape[0]:
        raise ShapeMismatchError(
            f"student logits cover {student_logits.shape[0]} positions, gold has {gold.shape[0]} tokens"
        )
    return F.cross_entropy(student_logits, gold)


@dataclass(eq=False)
class DistillSample:
    """One (context, query, self-response) triple; the response was decoded by the teacher with the context."""

    context: List[int]
    query: List[int]
    response: List[int]
    targets: TopKTargetRecord
    provenance: str = "teacher_with_context"
    meta: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if list(self.targets.response) != list(self.response):
            raise TaskError("targets were recorded for a different response")

    def to_json(self) -> Dict[str, Any]:
        return {
            "context": list(self.context),
            "query": list(self.query),
            "response": list(self.response),
            "topk": self.targets.to_json(),
            "meta": {"provenance": self.provenance, **self.meta},
        }

    @classmethod
    def from_json(cls, record: Dict[str, Any]) -> "DistillSample":
        meta = dict(record.get("meta", {}))
        provenance = meta.pop("provenance", "teacher_with_context")
        targets = TopKTargetRecord.from_json(record["topk"], record["response"])
        return cls(record["context"], record["query"], record["response"], targets, provenance, meta)


@dataclass(eq=False)
class MetaEntry:
    context: List[int]
    samples: List[DistillSample]

    def __post_init__(self):
        for s in self.samples:
            if list(s.context) != list(self.context):
                raise TaskError("sample context does not match its parent context")


@dataclass(eq=False)
class MetaDataset:
    entries: List[MetaEntry]
    token_budget: Optional[int] = None

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def n_samples(self) -> int:
        return sum(len(e.samples) for e in self.entries)

    @classmethod
    def from_samples(cls, samples: Sequence[DistillSample], token_budget: Optional[int] = None) -> "MetaDataset":
        """Group samples by context, preserving first-seen order."""
        groups: Dict[tuple, List[DistillSample]] = {}
        for s in samples:
            groups.setdefault(tuple(s.context), []).append(s)
        return cls([MetaEntry(list(c), g) for c, g in groups.items()], token_budget)
