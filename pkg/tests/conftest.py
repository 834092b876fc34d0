"""Shared fixtures: micro and tiny model configurations that run in milliseconds on CPU."""

import os

import pytest
import torch

from doc2lora.hypernet import init_hypernet
from doc2lora.models import HypernetConfig, LMConfig
from doc2lora.target_lm import init_lm


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: acceptance-scale checks, run with D2L_RUN_SLOW=1")


def pytest_collection_modifyitems(config, items):
    if os.environ.get("D2L_RUN_SLOW") == "1":
        return
    skip = pytest.mark.skip(reason="set D2L_RUN_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


def sharpen(model, std=0.3, seed=0):
    """Re-draw linear and embedding weights with a larger std so logits are far from uniform."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        with torch.no_grad():
            for name, p in model.named_parameters():
                if "norm" not in name:
                    p.normal_(0.0, std)
    return model


@pytest.fixture
def micro_lm_config():
    return LMConfig(d_model=8, n_layers=2, n_heads=2, d_mlp=16, max_seq_len=256)


@pytest.fixture
def tiny_lm_config():
    return LMConfig(d_model=16, n_layers=2, n_heads=2, d_mlp=32, max_seq_len=512)


@pytest.fixture
def tiny_lm(tiny_lm_config):
    return sharpen(init_lm(tiny_lm_config, seed=0))


@pytest.fixture
def tiny_hypernet_config():
    return HypernetConfig(
        d_latent=16,
        n_latents=4,
        n_xattn_blocks=1,
        n_attn_heads=2,
        input_dim=16,
        mlp_hidden=16,
        max_chunk_tokens=64,
        min_chunk=4,
        alpha_init=0.5,
    )


@pytest.fixture
def tiny_hypernet(tiny_hypernet_config, tiny_lm_config):
    return init_hypernet(tiny_hypernet_config, tiny_lm_config, seed=0)


@pytest.fixture
def tiny_hyperkv(tiny_hypernet_config, tiny_lm_config):
    cfg = tiny_hypernet_config.model_copy(update={"output_mode": "prefix_kv", "n_latents": 3})
    return init_hypernet(cfg, tiny_lm_config, seed=1)
