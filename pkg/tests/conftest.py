import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from earn.model import ModelConfig, RegisterSpec, SequenceLayout, init_weights  # noqa: E402


def tiny_config(**kw):
    base = dict(num_layers=4, num_heads=4, num_kv_heads=2, head_dim=8, hidden_dim=32, ffn_dim=48,
                vocab_size=20, max_positions=256)
    base.update(kw)
    return ModelConfig(**base)


def random_layout(rng, config, spec, n_prompt, n_generated=0):
    prompt = rng.integers(0, config.vocab_size, n_prompt)
    gen = rng.integers(0, config.vocab_size, n_generated)
    return SequenceLayout.build(prompt, spec.n_prefix, spec.n_suffix, config.vocab_size, generated=gen)


@pytest.fixture
def tiny():
    cfg = tiny_config()
    spec = RegisterSpec(1, 1, 2)
    return cfg, spec, init_weights(cfg, spec, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
