"""Top-k targets and the distillation losses."""

import math

import numpy as np
import pytest
import torch

from doc2lora.errors import ShapeMismatchError, TaskError
from doc2lora.objectives import (
    DistillSample,
    MetaDataset,
    MetaEntry,
    TopKTargetRecord,
    ce_loss,
    kl_loss,
    topk_targets,
)


def _full_kl(teacher, student):
    p = torch.softmax(teacher.double(), -1)
    return float((p * (torch.log_softmax(teacher.double(), -1) - torch.log_softmax(student.double(), -1))).sum(-1).mean())


def test_topk_picks_largest_in_descending_order():
    rec = topk_targets(torch.tensor([[3.0, 1.0, 2.0]]), 2, response=[0])
    assert rec.token_ids.tolist() == [[0, 2]]
    assert rec.logits.tolist() == [[3.0, 2.0]]


def test_topk_ties_keep_lowest_ids():
    rec = topk_targets(torch.tensor([[1.0, 5.0, 5.0, 5.0, 0.0]]), 2)
    assert rec.token_ids.tolist() == [[1, 2]]
    rec = topk_targets(torch.zeros(2, 6), 3)
    assert rec.token_ids.tolist() == [[0, 1, 2], [0, 1, 2]]


def test_topk_clamps_to_vocab():
    rec = topk_targets(torch.randn(3, 5), 50)
    assert rec.k == 5
    assert sorted(rec.token_ids[0].tolist()) == [0, 1, 2, 3, 4]
    with pytest.raises(ValueError):
        topk_targets(torch.randn(3, 5), 0)


def test_record_validates_shapes():
    with pytest.raises(ShapeMismatchError):
        TopKTargetRecord(torch.zeros(2, 3, dtype=torch.long), torch.zeros(2, 4), [1, 2])
    with pytest.raises(ShapeMismatchError):
        TopKTargetRecord(torch.zeros(2, 3, dtype=torch.long), torch.zeros(2, 3), [1])


def test_kl_is_zero_when_student_equals_teacher():
    logits = torch.randn(4, 10, generator=torch.Generator().manual_seed(0))
    assert abs(float(kl_loss(topk_targets(logits, 3, [1] * 4), logits))) < 1e-6
    shifted = logits + 7.0
    assert abs(float(kl_loss(topk_targets(logits, 10, [1] * 4), shifted))) < 1e-5


def test_kl_matches_full_vocab_oracle():
    rng = np.random.default_rng(0)
    for _ in range(20):
        teacher = torch.tensor(rng.normal(size=(5, 12)) * 2).float().double()
        student = torch.tensor(rng.normal(size=(5, 12)) * 2)
        got = float(kl_loss(topk_targets(teacher, 12, [3] * 5), student))
        assert abs(got - _full_kl(teacher, student)) <= 1e-6
        assert got > 0


def test_truncated_kl_ignores_mass_outside_topk():
    teacher = torch.tensor([[4.0, 3.0, -1.0, -2.0]])
    student = teacher.clone()
    student[0, 3] = 10.0
    assert abs(float(kl_loss(topk_targets(teacher, 2, [0]), student))) < 1e-6


def test_kl_misaligned_lengths():
    rec = topk_targets(torch.randn(3, 8), 4, [1, 2, 3])
    with pytest.raises(ShapeMismatchError):
        kl_loss(rec, torch.randn(4, 8))


def test_ce_edge_values():
    one_hot = torch.full((3, 8), -1e4)
    gold = [1, 5, 7]
    one_hot[torch.arange(3), torch.tensor(gold)] = 1e4
    assert float(ce_loss(one_hot, gold)) == pytest.approx(0.0, abs=1e-6)
    assert float(ce_loss(torch.zeros(4, 8), [0, 1, 2, 3])) == pytest.approx(math.log(8), abs=1e-6)
    with pytest.raises(ShapeMismatchError):
        ce_loss(torch.zeros(4, 8), [0, 1])


def test_ce_matches_scalar_loop():
    rng = np.random.default_rng(1)
    logits = rng.normal(size=(6, 9))
    gold = rng.integers(0, 9, size=6).tolist()
    expected = 0.0
    for row, g in zip(logits, gold):
        expected += math.log(sum(math.exp(v) for v in row)) - row[g]
    expected /= len(gold)
    assert float(ce_loss(torch.tensor(logits), gold)) == pytest.approx(expected, abs=1e-6)


def _sample(context, response=(4, 5)):
    targets = topk_targets(torch.randn(len(response), 10), 3, list(response))
    return DistillSample(list(context), [7, 8], list(response), targets, meta={"query_source": "niah"})


def test_distill_sample_json():
    sample = _sample([3, 4, 5, 6])
    record = sample.to_json()
    assert record["meta"] == {"provenance": "teacher_with_context", "query_source": "niah"}
    assert len(record["topk"]) == 2 and len(record["topk"][0]) == 3
    back = DistillSample.from_json(record)
    assert back.context == sample.context and back.response == sample.response
    assert back.provenance == "teacher_with_context" and back.meta == {"query_source": "niah"}
    torch.testing.assert_close(back.targets.logits, sample.targets.logits)
    assert torch.equal(back.targets.token_ids, sample.targets.token_ids)


def test_sample_rejects_foreign_targets():
    targets = topk_targets(torch.randn(2, 10), 3, [4, 5])
    with pytest.raises(TaskError):
        DistillSample([3], [7], [4, 6], targets)


def test_meta_dataset_groups_by_context():
    samples = [_sample([3, 4]), _sample([5, 6]), _sample([3, 4], (9,))]
    ds = MetaDataset.from_samples(samples, token_budget=100)
    assert len(ds) == 2 and ds.n_samples == 3
    assert ds.entries[0].context == [3, 4] and len(ds.entries[0].samples) == 2
    with pytest.raises(TaskError):
        MetaEntry([1, 2], [_sample([3, 4])])
