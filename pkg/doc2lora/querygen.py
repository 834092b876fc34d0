"""Query generators for the self-distillation data pipeline.

The rule generator asks span-grounded questions about the context and is fully
deterministic given the rng. The OpenAI-compatible generator prompts an external
model and falls back to the rule generator on any failure.
"""

import logging
import math
import os
import re
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from openai import OpenAI

from .text import normalize

logger = logging.getLogger(__name__)

SLOT = "{input}"


@dataclass(frozen=True)
class QueryTemplateSet:
    """Instruction wrappers; each has exactly one {input} slot."""

    templates: Tuple[str, ...]

    def __post_init__(self):
        if not self.templates:
            raise ValueError("template set is empty")
        for t in self.templates:
            if t.count(SLOT) != 1:
                raise ValueError(f"template {t!r} must contain exactly one {SLOT} slot")

    def wrap(self, query: str, rng: np.random.Generator) -> str:
        template = self.templates[int(rng.integers(len(self.templates)))]
        return template.replace(SLOT, query)


DEFAULT_TEMPLATES = QueryTemplateSet(
    (
        "{input}",
        "{input} only give me the answer.",
        "answer briefly: {input}",
        "{input} keep it short.",
        "question: {input}",
        "{input} reply with just the answer, no explanation.",
    )
)


@dataclass
class QuerySet:
    queries: List[str]
    spans: List[Optional[str]] = field(default_factory=list)
    exhausted: bool = False  # fewer than requested could be produced

    def __len__(self) -> int:
        return len(self.queries)

    def __iter__(self):
        return iter(self.queries)


_WORD = re.compile(r"[a-z0-9']+")
_NUMBER = re.compile(r"\d+")


def _candidates(text: str, rng: np.random.Generator) -> List[Tuple[int, int, str]]:
    """(start, end, question) triples; text[start:end] is the span grounding the question."""
    words = list(_WORD.finditer(text))
    numbered, plain = [], []
    for i, w in enumerate(words):
        if _NUMBER.fullmatch(w.group()) and i >= 2:
            start = words[i - 2].start()
            left = text[start : words[i - 1].end()]
            numbered.append((start, w.end(), f"which number comes after '{left}'?"))
        if i + 3 <= len(words):
            start, end = w.start(), words[i + 2].end()
            plain.append((start, end, f"what comes after '{text[start:end]}' in the text?"))
    order = [plain[j] for j in rng.permutation(len(plain))]
    return [numbered[j] for j in rng.permutation(len(numbered))] + order


class RuleQueryGenerator:
    name = "rule"

    def __init__(self, templates: QueryTemplateSet = DEFAULT_TEMPLATES):
        self.templates = templates

    def generate(
        self, context: str, n: int, rng: np.random.Generator, exclude: Sequence[str] = ()
    ) -> QuerySet:
        if n < 1:
            raise ValueError("n must be >= 1")
        text = normalize(context)
        used_ranges: List[Tuple[int, int]] = []
        seen = {normalize(q) for q in exclude}
        queries, spans = [], []
        for start, end, question in _candidates(text, rng):
            if len(queries) == n:
                break
            span = text[start:end]
            if span in spans or question in seen:
                continue
            if any(start < e and s < end for s, e in used_ranges):
                continue
            used_ranges.append((start, end))
            seen.add(question)
            spans.append(span)
            queries.append(self.templates.wrap(question, rng))
        exhausted = len(queries) < n
        if exhausted:
            logger.warning("context supports only %d of %d distinct queries", len(queries), n)
        return QuerySet(queries, spans, exhausted)


def gen_queries(
    context: str, n: int, rng: np.random.Generator, templates: QueryTemplateSet = DEFAULT_TEMPLATES
) -> QuerySet:
    """n span-grounded, non-overlapping queries, each in a randomly chosen instruction template."""
    return RuleQueryGenerator(templates).generate(context, n, rng)


_QUESTION_LINE = re.compile(
    r"^\s*\**\s*question\s*\d+\s*\**\s*:\s*\**\s*(.+?)\s*\**\s*$", re.IGNORECASE | re.MULTILINE
)


def parse_questions(text: str) -> List[str]:
    """`Question N: ...` lines; answer lines are ignored."""
    return [m.group(1) for m in _QUESTION_LINE.finditer(text)]


def _build_prompt(context: str, count: int, previous: Sequence[str]) -> str:
    lines = [
        "Read the document below and write questions that can be answered from it alone.",
        f"Write exactly {count} questions, each on its own line formatted as 'Question N: ...',",
        "followed by 'Answer N: ...' with a short answer.",
    ]
    if previous:
        lines.append("Do not repeat or overlap with these earlier questions, and make the new ones harder:")
        lines.extend(f"- {q}" for q in previous)
    lines += ["", "Document:", context]
    return "\n".join(lines)


class OpenAIQueryGenerator:
    """Queries from an OpenAI-compatible chat endpoint, asked in rounds of `per_round`."""

    name = "openai"

    def __init__(
        self,
        model: str,
        base_url: str,
        api_key: Optional[str] = None,
        templates: QueryTemplateSet = DEFAULT_TEMPLATES,
        per_round: int = 5,
        client=None,
    ):
        self.model = model
        self.templates = templates
        self.per_round = per_round
        self.client = client or OpenAI(base_url=base_url, api_key=api_key)
        self.fallback = RuleQueryGenerator(templates)

    def _ask(self, context: str, count: int, previous: Sequence[str]) -> List[str]:
        response = self.client.chat.completions.create(
            model=self.model,
            messages=[
                {"role": "system", "content": "You write reading-comprehension questions."},
                {"role": "user", "content": _build_prompt(context, count, previous)},
            ],
            temperature=0,
            max_tokens=64 * count,
        )
        return parse_questions(response.choices[0].message.content or "")

    def generate(self, context: str, n: int, rng: np.random.Generator) -> QuerySet:
        if n < 1:
            raise ValueError("n must be >= 1")
        questions: List[str] = []
        try:
            for _ in range(math.ceil(n / self.per_round)):
                count = min(self.per_round, n - len(questions))
                for q in self._ask(context, count, questions):
                    q = normalize(q).strip()
                    if q and q not in questions:
                        questions.append(q)
                if len(questions) >= n:
                    break
        except Exception as e:
            logger.warning("query generation via %s failed, using rule-based queries: %s", self.model, e)
        questions = questions[:n]
        queries = [self.templates.wrap(q, rng) for q in questions]
        spans: List[Optional[str]] = [None] * len(queries)
        if len(queries) < n:
            extra = self.fallback.generate(context, n - len(queries), rng, exclude=questions)
            queries += extra.queries
            spans += extra.spans
            return QuerySet(queries, spans, extra.exhausted)
        return QuerySet(queries, spans, False)


def make_query_generator(kind: str, model: str, base_url: str, templates: QueryTemplateSet = DEFAULT_TEMPLATES):
    """The configured generator; 'openai' needs HF_TOKEN or D2L_QUERYGEN_API_KEY, else rule-based is used."""
    if kind == "openai":
        api_key = os.environ.get("D2L_QUERYGEN_API_KEY") or os.environ.get("HF_TOKEN")
        if api_key:
            return OpenAIQueryGenerator(model, base_url, api_key, templates)
        logger.warning("no API key for the query model; falling back to rule-based queries")
    return RuleQueryGenerator(templates)
