from __future__ import annotations

import numpy as np
import pytest

from sand.config import ModelConfig

# filled by test_acceptance.py, reported after the run
ACCEPTANCE_RESULTS: dict[int, tuple[bool, str]] = {}


def small_config(**kw) -> ModelConfig:
    base = dict(R=3, d=16, N=2, heads=4, r=3, M=4, T_max=16, dropout_residue=0.0,
                dropout_attention=0.0, dropout_input=0.0, seed=0)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_RESULTS):
        ok, msg = ACCEPTANCE_RESULTS[k]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {k}: {msg}")
