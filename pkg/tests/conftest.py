import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def verdict(request):
    """Print one PASS/FAIL line straight to the terminal, then assert."""
    capman = request.config.pluginmanager.getplugin("capturemanager")

    def emit(number: int, title: str, ok: bool, detail: str = ""):
        line = f"[criterion {number:2d}] {'PASS' if ok else 'FAIL'}  {title}"
        if detail:
            line += f"  ({detail})"
        with capman.global_and_fixture_disabled():
            print("\n" + line, flush=True)
        assert ok, line

    return emit
