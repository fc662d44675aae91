import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    from layoutgen.toydiffusion import DenoiserConfig
    return DenoiserConfig(channels=4, attn_dim=4, heads=2, token_dim=4, time_dim=8)


_CRITERIA = {}


@pytest.fixture(scope="session")
def criteria():
    """Records (passed, detail) per acceptance criterion for the end-of-run summary."""
    return _CRITERIA


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_CRITERIA):
        ok, name, detail = _CRITERIA[k]
        terminalreporter.write_line(f"criterion {k:2d} {'PASS' if ok else 'FAIL'}  {name}: {detail}")
