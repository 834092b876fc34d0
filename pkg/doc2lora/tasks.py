"""Needle-in-a-haystack benchmark and the self-distillation data pipeline.

NIAH haystacks are built from synthetic subject-verb-object sentences so no corpus has
to be downloaded. Every character is one token, so lengths below are token counts.
"""

import json
import logging
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from .adapters import LoraAdapter, PrefixKV
from .errors import BudgetExceededError, PackingError, TaskError
from .objectives import DistillSample, MetaDataset, MetaEntry, topk_targets
from .querygen import RuleQueryGenerator
from .target_lm import LMOutput, TinyLM, continuation_logits, generate, pad_sequences
from .text import EOS_ID, decode, encode, student_prompt, teacher_prompt, teacher_prompt_overhead

logger = logging.getLogger(__name__)

NEEDLE_TEMPLATE = "The special magic number is {value}."
NIAH_QUERY = "What is the special magic number? Reply with only the number."
_ANSWER_RE = re.compile(r"special magic number is (\d+)\.")

_SUBJECTS = (
    "the old farmer", "a quiet student", "the tall sailor", "my neighbour", "the young baker",
    "a tired doctor", "the painter", "our teacher", "the small child", "a busy clerk",
    "the river guide", "an honest judge",
)
_VERBS = (
    "carried", "painted", "found", "repaired", "watched", "sold", "cleaned", "described",
    "borrowed", "ignored", "measured", "wrapped",
)
_OBJECTS = (
    "a wooden chair", "the blue boat", "an empty basket", "the heavy door", "a paper map",
    "the broken clock", "a warm blanket", "the narrow bridge", "a silver spoon", "the long rope",
    "an old letter", "the garden gate",
)
_PLACES = (
    "near the market", "after dinner", "in the morning", "by the lake", "during the storm",
    "at the station", "behind the barn", "before sunrise", "in the quiet hall", "on the hill",
)


def needle_sentence(value: str) -> str:
    return NEEDLE_TEMPLATE.format(value=value)


def distractor_sentence(rng: np.random.Generator) -> str:
    pick = lambda xs: xs[int(rng.integers(len(xs)))]  # noqa: E731
    return f"{pick(_SUBJECTS)} {pick(_VERBS)} {pick(_OBJECTS)} {pick(_PLACES)}."


def distractor_text(rng: np.random.Generator, n_chars: int) -> str:
    """Whole synthetic sentences joined by spaces, cut to exactly n_chars."""
    parts, total = [], -1  # n sentences take n - 1 separators
    while total < n_chars:
        s = distractor_sentence(rng)
        parts.append(s)
        total += len(s) + 1
    return " ".join(parts)[:n_chars]


@dataclass
class NiahInstance:
    haystack: str
    needle: str  # the digits
    position: int  # character index of the needle sentence
    query: str = NIAH_QUERY
    answer: str = ""

    def __post_init__(self):
        if not self.answer:
            self.answer = self.needle

    @property
    def haystack_ids(self) -> List[int]:
        return encode(self.haystack)

    @property
    def query_ids(self) -> List[int]:
        return encode(self.query)

    @property
    def answer_ids(self) -> List[int]:
        return encode(self.answer)

    @property
    def length(self) -> int:
        return len(self.haystack)

    def to_json(self) -> Dict[str, Any]:
        return asdict(self)


def extract_answer(haystack: str) -> Optional[str]:
    m = _ANSWER_RE.findall(haystack.lower())
    return m[0] if len(m) == 1 else None


def gen_niah_sample(rng: np.random.Generator, haystack_len: int, needle_digits: int = 4) -> NiahInstance:
    """One haystack of exactly `haystack_len` tokens with the needle at a random sentence boundary."""
    value = f"{int(rng.integers(10 ** needle_digits)):0{needle_digits}d}"
    needle = needle_sentence(value)
    gap = haystack_len - len(needle)
    if gap < 0:
        raise TaskError(f"haystack_len={haystack_len} is shorter than the needle sentence ({len(needle)})")
    if gap == 0:
        return NiahInstance(needle, value, 0)
    text = distractor_text(rng, gap - 1)
    boundaries = [0] + [m.end() for m in re.finditer(r"\. ", text)]
    pos = boundaries[int(rng.integers(len(boundaries)))]
    haystack = text[:pos] + needle + " " + text[pos:]
    return NiahInstance(haystack, value, pos)


def _substreams(rng_or_seed: Union[int, np.random.Generator], n: int) -> List[np.random.Generator]:
    if isinstance(rng_or_seed, np.random.Generator):
        root = np.random.SeedSequence(int(rng_or_seed.integers(2**63)))
    else:
        root = np.random.SeedSequence(int(rng_or_seed))
    return [np.random.default_rng(s) for s in root.spawn(n)]


def gen_niah_dataset(
    rng: Union[int, np.random.Generator],
    n_samples: int,
    length_range: Tuple[int, int] = (32, 256),
    needle_digits: int = 4,
) -> List[NiahInstance]:
    """Lengths uniform over the range, raised to the needle length where the range starts below it."""
    lo, hi = length_range
    if not 1 <= lo <= hi:
        raise TaskError(f"invalid length range {length_range}")
    floor = len(needle_sentence("0" * needle_digits))
    out = []
    for sub in _substreams(rng, n_samples):
        length = max(int(sub.integers(lo, hi + 1)), floor)
        out.append(gen_niah_sample(sub, length, needle_digits))
    return out


def gen_niah_eval_set(seed: int, lengths: Sequence[int], n_per_length: int, needle_digits: int = 4) -> List[NiahInstance]:
    """n_per_length instances at each exact length."""
    streams = _substreams(seed, len(lengths) * n_per_length)
    return [
        gen_niah_sample(streams[i * n_per_length + j], length, needle_digits)
        for i, length in enumerate(lengths)
        for j in range(n_per_length)
    ]


# Self-responses


@torch.no_grad()
def greedy_batch(
    lm: TinyLM, prompts: Sequence[Sequence[int]], max_new: int, adapter: Optional[LoraAdapter] = None
) -> List[List[int]]:
    """Greedy decoding of several prompts at once; each result keeps its EOS if one was produced."""
    window = lm.config.max_seq_len
    for p in prompts:
        if len(p) + max_new > window:
            raise BudgetExceededError(f"prompt {len(p)} + max_new {max_new} exceeds window {window}")
    device = lm.embed.weight.device
    seqs = [list(p) for p in prompts]
    outs: List[List[int]] = [[] for _ in prompts]
    active = list(range(len(prompts)))
    for _ in range(max_new):
        if not active:
            break
        tokens, mask = pad_sequences([seqs[i] for i in active])
        logits = lm(tokens.to(device), mask.to(device), adapter=adapter)
        last = torch.as_tensor([len(seqs[i]) - 1 for i in active], device=device)
        next_ids = torch.argmax(logits[torch.arange(len(active), device=device), last], dim=-1).tolist()
        still = []
        for i, tok in zip(active, next_ids):
            outs[i].append(tok)
            seqs[i].append(tok)
            if tok != EOS_ID:
                still.append(i)
        active = still
    return outs


def sample_self_responses(
    lm: TinyLM, context: Sequence[int], queries: Sequence[Sequence[int]], max_new: int, k: int = 16
) -> List[Optional[DistillSample]]:
    """Teacher responses with the context in the prompt plus their top-k logits; None for empty ones."""
    prompts = [teacher_prompt(context, q) for q in queries]
    responses = greedy_batch(lm, prompts, max_new)
    keep = [i for i, r in enumerate(responses) if r and r[0] != EOS_ID]
    out: List[Optional[DistillSample]] = [None] * len(queries)
    if keep:
        logits = continuation_logits(lm, [prompts[i] for i in keep], [responses[i] for i in keep])
        for i, lg in zip(keep, logits):
            targets = topk_targets(lg, k, responses[i])
            out[i] = DistillSample(list(context), list(queries[i]), responses[i], targets)
    for i in range(len(queries)):
        if out[i] is None:
            logger.info("discarding empty self-response for query %r", decode(queries[i]))
    return out


def sample_self_response(
    lm: TinyLM, context: Sequence[int], query: Sequence[int], max_new: int, k: int = 16
) -> Optional[DistillSample]:
    return sample_self_responses(lm, context, [query], max_new, k)[0]


def build_meta_dataset(
    lm: TinyLM,
    instances: Sequence[NiahInstance],
    *,
    queries_per_context: int,
    max_new: int,
    k: int,
    seed: int,
    generator=None,
) -> MetaDataset:
    """Self-distillation samples for every haystack: the NIAH query plus generated ones."""
    generator = generator or RuleQueryGenerator()
    entries = []
    for inst, rng in zip(instances, _substreams(seed, len(instances))):
        queries = [inst.query]
        if queries_per_context:
            queries += list(generator.generate(inst.haystack, queries_per_context, rng))
        samples = sample_self_responses(lm, inst.haystack_ids, [encode(q) for q in queries], max_new, k)
        kept = [s for s in samples if s is not None]
        for s in kept:
            s.meta["answer"] = inst.answer
        if kept:
            entries.append(MetaEntry(inst.haystack_ids, kept))
    logger.info("built %d contexts with %d samples", len(entries), sum(len(e.samples) for e in entries))
    return MetaDataset(entries)


# Packing


@dataclass(eq=False)
class PackedBatch:
    """Several sequences laid end to end in one buffer; attention never crosses segments."""

    tokens: torch.Tensor  # [budget]
    segment_ids: torch.Tensor  # [budget], -1 on padding
    position_ids: torch.Tensor  # [budget], restarting at 0 per segment
    boundaries: List[Tuple[int, int]]
    sample_ids: List[int]
    budget: int

    @property
    def mask(self) -> torch.Tensor:
        return self.segment_ids >= 0

    @property
    def n_tokens(self) -> int:
        return self.boundaries[-1][1] if self.boundaries else 0

    def attention_mask(self) -> torch.Tensor:
        """[budget, budget] block-diagonal causal mask over real tokens."""
        idx = torch.arange(self.budget)
        same = (self.segment_ids[:, None] == self.segment_ids[None, :]) & self.mask[:, None]
        return same & (idx[None, :] <= idx[:, None])

    def unpack(self) -> List[List[int]]:
        return [self.tokens[s:e].tolist() for s, e in self.boundaries]


def pack_contexts(
    samples: Sequence[Sequence[int]], token_budget: int, max_segments: Optional[int] = None
) -> List[PackedBatch]:
    """First-fit packing in input order."""
    bins: List[List[int]] = []
    used: List[int] = []
    for i, s in enumerate(samples):
        n = len(s)
        if n > token_budget:
            raise PackingError(f"sample {i} has {n} tokens, budget is {token_budget}")
        if n == 0:
            raise PackingError(f"sample {i} is empty")
        for b, members in enumerate(bins):
            if used[b] + n <= token_budget and (max_segments is None or len(members) < max_segments):
                members.append(i)
                used[b] += n
                break
        else:
            bins.append([i])
            used.append(n)

    batches = []
    for members in bins:
        tokens = torch.zeros(token_budget, dtype=torch.long)
        segments = torch.full((token_budget,), -1, dtype=torch.long)
        positions = torch.zeros(token_budget, dtype=torch.long)
        boundaries, start = [], 0
        for seg, i in enumerate(members):
            n = len(samples[i])
            tokens[start : start + n] = torch.as_tensor(list(samples[i]), dtype=torch.long)
            segments[start : start + n] = seg
            positions[start : start + n] = torch.arange(n)
            boundaries.append((start, start + n))
            start += n
        batches.append(PackedBatch(tokens, segments, positions, boundaries, list(members), token_budget))
    return batches


def forward_packed(lm: TinyLM, batch: PackedBatch, with_activations: bool = False) -> LMOutput:
    device = lm.embed.weight.device
    args = (
        batch.tokens[None].to(device),
        batch.mask[None].to(device),
    )
    kwargs = dict(segment_ids=batch.segment_ids[None].to(device), position_ids=batch.position_ids[None].to(device))
    if with_activations:
        return lm.forward_with_activations(*args, **kwargs)
    return LMOutput(lm(*args, **kwargs), None)


# Evaluation


class PromptAudit:
    """Records every prompt sent during evaluation and refuses context leaks in internalized modes."""

    def __init__(self):
        self.prompt_tokens: Dict[str, List[int]] = {}

    def __call__(self, method: str, prompt: Sequence[int], query: Sequence[int], internalized: bool) -> None:
        self.prompt_tokens.setdefault(method, []).append(len(prompt))
        if internalized and len(prompt) != len(student_prompt(query)):
            raise TaskError(f"{method}: prompt carries {len(prompt)} tokens, only the query is allowed")


@dataclass
class NiahScore:
    length: int
    correct: int = 0
    n: int = 0
    truncated: bool = False
    predictions: List[str] = field(default_factory=list)

    @property
    def accuracy(self) -> float:
        return self.correct / self.n if self.n else 0.0


def fit_context(context: Sequence[int], query_len: int, max_new: int, window: int) -> Tuple[List[int], bool]:
    """Drop tokens from the front of the context until the teacher prompt fits the window."""
    keep = window - teacher_prompt_overhead(query_len) - max_new
    if len(context) <= keep:
        return list(context), False
    return (list(context[-keep:]) if keep > 0 else []), True


AdapterSource = Union[str, LoraAdapter, PrefixKV, Callable[[NiahInstance], Union[LoraAdapter, PrefixKV]]]


def exact_match(prediction: str, gold: str) -> bool:
    return prediction.strip() == gold.strip()


def eval_niah(
    lm: TinyLM,
    adapter_source: AdapterSource,
    instances: Sequence[NiahInstance],
    *,
    method: Optional[str] = None,
    audit: Optional[PromptAudit] = None,
    max_new: Optional[int] = None,
) -> Dict[int, NiahScore]:
    """Exact-match accuracy per haystack length.

    ``adapter_source`` is "in_context", a fixed adapter or prefix, or a callable building
    one per instance. Internalized sources see the query only.
    """
    in_context = isinstance(adapter_source, str)
    if in_context and adapter_source != "in_context":
        raise TaskError(f"unknown adapter source {adapter_source!r}")
    method = method or ("in_context" if in_context else "internalized")
    window = lm.config.max_seq_len
    scores: Dict[int, NiahScore] = {}
    for inst in instances:
        budget = max_new or len(inst.answer_ids) + 2
        score = scores.setdefault(inst.length, NiahScore(inst.length))
        adapter, prefix = None, None
        if in_context:
            context, cut = fit_context(inst.haystack_ids, len(inst.query_ids), budget, window)
            score.truncated |= cut
            prompt = teacher_prompt(context, inst.query_ids)
        else:
            made = adapter_source if isinstance(adapter_source, (LoraAdapter, PrefixKV)) else adapter_source(inst)
            if isinstance(made, PrefixKV):
                prefix = made
            else:
                adapter = made
            prompt = student_prompt(inst.query_ids)
        if audit is not None:
            audit(method, prompt, inst.query_ids, internalized=not in_context)
        pred = decode(generate(lm, prompt, budget, adapter=adapter, prefix=prefix))
        score.n += 1
        score.correct += int(exact_match(pred, inst.answer))
        score.predictions.append(pred)
    for length, s in sorted(scores.items()):
        logger.info("%s length %d: accuracy %.3f over %d%s", method, length, s.accuracy, s.n,
                    " (truncated)" if s.truncated else "")
    return dict(sorted(scores.items()))


# JSON-lines IO


def write_jsonl(path: Union[str, Path], records: Iterable[Dict[str, Any]]) -> int:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = 0
    with path.open("w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps(r, sort_keys=True) + "\n")
            n += 1
    return n


def read_jsonl(path: Union[str, Path]) -> Iterator[Dict[str, Any]]:
    with Path(path).open(encoding="utf-8") as f:
        for line in f:
            if line.strip():
                yield json.loads(line)


def save_niah(path: Union[str, Path], instances: Iterable[NiahInstance]) -> int:
    return write_jsonl(path, (i.to_json() for i in instances))


def load_niah(path: Union[str, Path]) -> List[NiahInstance]:
    return [NiahInstance(**r) for r in read_jsonl(path)]


def save_meta_dataset(path: Union[str, Path], dataset: MetaDataset) -> int:
    return write_jsonl(path, (s.to_json() for e in dataset.entries for s in e.samples))


def load_meta_dataset(path: Union[str, Path], token_budget: Optional[int] = None) -> MetaDataset:
    return MetaDataset.from_samples([DistillSample.from_json(r) for r in read_jsonl(path)], token_budget)
