import dataclasses

import numpy as np
import pytest

from moegrow import ModelConfig, MoEConfig, make_synthetic_corpus, random_init


@pytest.fixture(scope="session")
def micro_config() -> ModelConfig:
    """Smallest config that exercises GQA, biases, and the MLP."""
    return ModelConfig(
        n_layers=2, hidden_dim=8, n_heads=4, head_dim=2, kv_groups=2,
        intermediate_dim=6, vocab_size=16, qkv_bias=True, context_length=64,
    )


@pytest.fixture(scope="session")
def toy_config() -> ModelConfig:
    """Desk-scale config used for training runs."""
    return ModelConfig(
        n_layers=2, hidden_dim=64, n_heads=8, head_dim=8, kv_groups=4,
        intermediate_dim=128, vocab_size=256, qkv_bias=True, context_length=128,
    )


@pytest.fixture(scope="session")
def toy_double(toy_config) -> ModelConfig:
    return dataclasses.replace(
        toy_config, hidden_dim=128, n_heads=16, intermediate_dim=256
    )


@pytest.fixture(scope="session")
def micro_ckpt(micro_config):
    return random_init(micro_config, seed=3, init_std=0.4)


@pytest.fixture(scope="session")
def corpus():
    return make_synthetic_corpus(seed=1, vocab=256, n_tokens=50000, order=1)


@pytest.fixture(scope="session")
def moe_small() -> MoEConfig:
    return MoEConfig(n_experts=4, top_k=2, router_init_std=0.5)


acceptance_lines: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """Re-emit the acceptance PASS/FAIL lines that capture swallowed."""
    if acceptance_lines:
        terminalreporter.section("acceptance")
        for line in acceptance_lines:
            terminalreporter.write_line(line)
