"""Target model tests: forward oracle, masking, adapters, decoding and footprint."""

import copy
import math

import pytest
import torch
import torch.nn.functional as F
from pydantic import ValidationError

from doc2lora.adapters import LoraAdapter, LoraLayerDelta, PrefixKV
from doc2lora.checkpoint import state_checksum
from doc2lora.errors import BudgetExceededError, DivergenceError, InvalidDimensionError, ShapeMismatchError, TokenizerError
from doc2lora.logs import JsonlLog
from doc2lora.models import LMConfig
from doc2lora.target_lm import (
    continuation_logits,
    generate,
    init_lm,
    kv_cache_footprint,
    load_lm,
    pad_sequences,
    pretrain_lm,
    save_lm,
)
from doc2lora.text import EOS_ID, VOCAB_SIZE, encode


def _tokens(n, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.randint(3, VOCAB_SIZE, (n,), generator=g)


def _rope_reference(x, pos, base):
    # x [N, H, d]; pairs (i, i + d/2) rotated by pos * base^(-i / (d/2))
    n, h, d = x.shape
    half = d // 2
    out = x.clone()
    for t in range(n):
        for i in range(half):
            theta = pos[t] * base ** (-i / half)
            c, s = math.cos(theta), math.sin(theta)
            a, b = x[t, :, i], x[t, :, i + half]
            out[t, :, i] = a * c - b * s
            out[t, :, i + half] = a * s + b * c
    return out


def _rms(x, weight, eps):
    return x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + eps) * weight


def _reference_forward(lm, tokens):
    cfg = lm.config
    x = lm.embed.weight[tokens]
    n = tokens.shape[0]
    causal = torch.tril(torch.ones(n, n, dtype=torch.bool))
    pos = list(range(n))
    for block in lm.blocks:
        h = _rms(x, block.attn_norm.weight, cfg.norm_eps)
        a = block.attn
        q = (h @ a.q.weight.T).view(n, cfg.n_heads, cfg.head_dim)
        k = (h @ a.k.weight.T).view(n, cfg.n_heads, cfg.head_dim)
        v = (h @ a.v.weight.T).view(n, cfg.n_heads, cfg.head_dim)
        q = _rope_reference(_rms(q, a.q_norm.weight, cfg.norm_eps), pos, cfg.rope_base)
        k = _rope_reference(_rms(k, a.k_norm.weight, cfg.norm_eps), pos, cfg.rope_base)
        heads = []
        for i in range(cfg.n_heads):
            s = q[:, i] @ k[:, i].T / math.sqrt(cfg.head_dim)
            s = s.masked_fill(~causal, float("-inf"))
            heads.append(torch.softmax(s, -1) @ v[:, i])
        x = x + torch.cat(heads, -1) @ a.o.weight.T
        h = _rms(x, block.mlp_norm.weight, cfg.norm_eps)
        m = block.mlp
        x = x + (F.silu(h @ m.gate.weight.T) * (h @ m.up.weight.T)) @ m.down.weight.T
    return _rms(x, lm.norm.weight, cfg.norm_eps) @ lm.embed.weight.T


def _random_adapter(lm, rank=3, seed=0, per_rank=False):
    g = torch.Generator().manual_seed(seed)
    layers = {}
    for i in range(lm.config.n_layers):
        for module in ("mlp.down", "attn.q"):
            lid = f"block{i}.{module}"
            d_out, d_in = lm.module_weight(lid).shape
            alpha = torch.rand(rank, generator=g) if per_rank else torch.tensor(0.7)
            layers[lid] = LoraLayerDelta(
                torch.randn(rank, d_in, generator=g) * 0.3, torch.randn(d_out, rank, generator=g) * 0.3, alpha
            )
    return LoraAdapter(layers, chunk_rank=rank)


def test_forward_matches_reference(tiny_lm):
    tokens = _tokens(12)
    torch.testing.assert_close(tiny_lm(tokens), _reference_forward(tiny_lm, tokens), atol=1e-5, rtol=1e-5)


def test_null_adapter_is_identity(tiny_lm):
    tokens = _tokens(10)
    base = tiny_lm(tokens)
    null = LoraAdapter(
        {
            f"block{i}.mlp.down": LoraLayerDelta(torch.randn(2, 32), torch.zeros(16, 2), torch.tensor(1.0))
            for i in range(2)
        },
        chunk_rank=2,
    )
    torch.testing.assert_close(tiny_lm(tokens, adapter=null), base, atol=0, rtol=0)
    zero_alpha = LoraAdapter(
        {"block0.mlp.down": LoraLayerDelta(torch.randn(2, 32), torch.randn(16, 2), torch.tensor(0.0))}, chunk_rank=2
    )
    torch.testing.assert_close(tiny_lm(tokens, adapter=zero_alpha), base, atol=0, rtol=0)


@pytest.mark.parametrize("per_rank", [False, True])
def test_adapter_equals_merged_weights(tiny_lm, per_rank):
    adapter = _random_adapter(tiny_lm, per_rank=per_rank)
    merged = copy.deepcopy(tiny_lm)
    with torch.no_grad():
        for lid, delta in adapter.layers.items():
            merged.module_weight(lid).add_(delta.effective())
    tokens = _tokens(9, seed=3)
    torch.testing.assert_close(tiny_lm(tokens, adapter=adapter), merged(tokens), atol=1e-5, rtol=1e-5)


def test_adapter_shape_mismatch(tiny_lm):
    bad = LoraAdapter({"block0.mlp.down": LoraLayerDelta(torch.randn(2, 16), torch.randn(16, 2), torch.tensor(1.0))}, 2)
    with pytest.raises(ShapeMismatchError):
        tiny_lm(_tokens(4), adapter=bad)
    missing = LoraAdapter({"block7.mlp.down": LoraLayerDelta(torch.randn(2, 32), torch.randn(16, 2), torch.tensor(1.0))}, 2)
    with pytest.raises(ShapeMismatchError):
        tiny_lm(_tokens(4), adapter=missing)


def test_padding_does_not_change_valid_positions(tiny_lm):
    short, long = _tokens(5, seed=1).tolist(), _tokens(11, seed=2).tolist()
    tokens, mask = pad_sequences([short, long])
    batched = tiny_lm(tokens, mask)
    torch.testing.assert_close(batched[0, :5], tiny_lm(torch.tensor(short)), atol=1e-5, rtol=1e-5)
    torch.testing.assert_close(batched[1], tiny_lm(torch.tensor(long)), atol=1e-5, rtol=1e-5)


def test_causality(tiny_lm):
    a = _tokens(10)
    b = a.clone()
    b[6] = (b[6] + 1 - 3) % (VOCAB_SIZE - 3) + 3
    torch.testing.assert_close(tiny_lm(a)[:6], tiny_lm(b)[:6], atol=1e-6, rtol=1e-6)
    assert not torch.allclose(tiny_lm(a)[6:], tiny_lm(b)[6:])


def test_activation_stack(tiny_lm):
    tokens, mask = pad_sequences([_tokens(4).tolist(), _tokens(7).tolist()])
    out = tiny_lm.forward_with_activations(tokens, mask)
    stack = out.activations
    assert stack.hidden.shape == (2, 3, 7, 16)
    torch.testing.assert_close(stack.hidden[0, 0, :4], tiny_lm.embed.weight[tokens[0, :4]])
    assert torch.count_nonzero(stack.hidden[0, :, 4:]) == 0
    one = stack.select(1, 2, 5)
    assert one.hidden.shape == (3, 3, 16)
    assert bool(one.mask.all())


def test_segments_are_isolated(tiny_lm):
    a, b = _tokens(6, seed=4).tolist(), _tokens(5, seed=5).tolist()
    tokens = torch.tensor([a + b])
    segments = torch.tensor([[0] * 6 + [1] * 5])
    positions = torch.tensor([list(range(6)) + list(range(5))])
    packed = tiny_lm(tokens, segment_ids=segments, position_ids=positions)[0]
    torch.testing.assert_close(packed[6:], tiny_lm(torch.tensor(b)), atol=1e-5, rtol=1e-5)


def test_prefix_changes_output_and_checks_shapes(tiny_lm):
    tokens = _tokens(6)
    g = torch.Generator().manual_seed(0)
    prefix = PrefixKV([torch.randn(3, 2, 8, generator=g) for _ in range(2)], [torch.randn(3, 2, 8, generator=g) for _ in range(2)])
    assert not torch.allclose(tiny_lm(tokens, prefix=prefix), tiny_lm(tokens))
    wrong = PrefixKV([torch.randn(3, 4, 4)] * 2, [torch.randn(3, 4, 4)] * 2)
    with pytest.raises(ShapeMismatchError):
        tiny_lm(tokens, prefix=wrong)
    short = PrefixKV([torch.randn(3, 2, 8)], [torch.randn(3, 2, 8)])
    with pytest.raises(ShapeMismatchError):
        tiny_lm(tokens, prefix=short)


def test_rotated_prefix_shifts_token_positions(tiny_lm):
    tokens = _tokens(5)
    keys = [torch.randn(2, 2, 8) for _ in range(2)]
    values = [torch.zeros(2, 2, 8) for _ in range(2)]
    raw = PrefixKV(keys, values, rope_applied=False)
    rotated = PrefixKV(keys, values, rope_applied=True)
    assert raw.position_offset == 0 and rotated.position_offset == 2
    assert not torch.allclose(tiny_lm(tokens, prefix=raw), tiny_lm(tokens, prefix=rotated))


def test_init_is_deterministic_and_frozen(tiny_lm_config):
    a, b, c = init_lm(tiny_lm_config, 0), init_lm(tiny_lm_config, 0), init_lm(tiny_lm_config, 1)
    assert state_checksum(a) == state_checksum(b) != state_checksum(c)
    assert not any(p.requires_grad for p in a.parameters())


def test_invalid_dimensions():
    with pytest.raises(ValidationError):
        LMConfig(d_model=10, n_heads=3)
    with pytest.raises(InvalidDimensionError):
        init_lm(LMConfig.model_construct(d_model=10, n_heads=3), 0)


def test_token_outside_vocabulary(tiny_lm):
    with pytest.raises(TokenizerError):
        tiny_lm(torch.tensor([1, VOCAB_SIZE]))


def test_generate_breaks_ties_to_lowest_id(tiny_lm_config):
    lm = init_lm(tiny_lm_config, 0)
    with torch.no_grad():
        for name, p in lm.named_parameters():
            if "norm" not in name:
                p.zero_()
    assert generate(lm, [1, 5, 6], 3) == [0, 0, 0]


def test_generate_stops_at_eos(tiny_lm_config):
    lm = init_lm(tiny_lm_config, 0)
    with torch.no_grad():
        for name, p in lm.named_parameters():
            if "norm" not in name:
                p.zero_()
        lm.embed.weight[:, 0] = 1.0
        lm.embed.weight[EOS_ID, 0] = 2.0
    assert generate(lm, [1, 5], 4) == []
    assert generate(lm, [1, 5], 4, include_eos=True) == [EOS_ID]


def test_generate_budget(tiny_lm):
    with pytest.raises(BudgetExceededError):
        generate(tiny_lm, [1] * 500, 20)
    prefix = PrefixKV([torch.zeros(10, 2, 8)] * 2, [torch.zeros(10, 2, 8)] * 2)
    with pytest.raises(BudgetExceededError):
        generate(tiny_lm, [1] * 500, 5, prefix=prefix)


def test_continuation_logits_match_full_forward(tiny_lm):
    prompt, cont = _tokens(5, seed=1).tolist(), _tokens(3, seed=2).tolist()
    got = continuation_logits(tiny_lm, [prompt, prompt[:2]], [cont, cont[:1]])
    full = tiny_lm(torch.tensor(prompt + cont))
    torch.testing.assert_close(got[0], full[4:7], atol=1e-5, rtol=1e-5)
    assert got[1].shape == (1, VOCAB_SIZE)


def test_kv_cache_footprint(tiny_lm_config):
    per_token = 2 * 2 * 2 * 8 * 4
    assert kv_cache_footprint(10, 5, tiny_lm_config, 4) == 15 * per_token
    assert kv_cache_footprint(20, 5, tiny_lm_config, 4) - kv_cache_footprint(10, 5, tiny_lm_config, 4) == 10 * per_token
    with pytest.raises(ValueError):
        kv_cache_footprint(-1, 0, tiny_lm_config, 4)


def test_save_and_load(tmp_path, tiny_lm):
    save_lm(tiny_lm, tmp_path / "lm.d2lm")
    loaded = load_lm(tmp_path / "lm.d2lm")
    assert state_checksum(loaded) == state_checksum(tiny_lm)
    assert loaded.config == tiny_lm.config


def test_pretrain_zero_steps_returns_init(tiny_lm_config):
    corpus = [encode("abc", bos=True)]
    lm = pretrain_lm(corpus, tiny_lm_config, steps=0, lr=1e-2, seed=3)
    assert state_checksum(lm) == state_checksum(init_lm(tiny_lm_config, 3))


def test_pretrain_reduces_loss(tiny_lm_config):
    corpus = [encode("the number is 42.", bos=True, eos=True), encode("abcabcabc", bos=True, eos=True)]
    log = JsonlLog()
    pretrain_lm(corpus, tiny_lm_config, steps=60, lr=1e-2, seed=0, batch_size=4, log=log)
    losses = log.losses(stage=0)
    assert len(losses) == 60
    assert sum(losses[-5:]) / 5 < sum(losses[:5]) / 5


def test_pretrain_divergence(tiny_lm_config):
    lm = init_lm(tiny_lm_config, 0)
    with torch.no_grad():
        lm.embed.weight.fill_(float("nan"))
    with pytest.raises(DivergenceError) as info:
        pretrain_lm([encode("abc", bos=True)], tiny_lm_config, steps=3, lr=1e-2, params=lm)
    assert info.value.step == 1 and info.value.last_finite is None
