import json
import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

from fastfusion.features import TagVocab
from fastfusion.model import ModelConfig, Reader
from fastfusion.training import build_vocab, synth_task

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_reader():
    """Hidden-8, 20-d embedding reader over a small synthetic vocabulary."""
    examples = synth_task(20, seed=5)
    vocab = build_vocab(examples, dim=20)
    cfg = ModelConfig(sru_hidden=8, emb_dim=20)
    return Reader.create(cfg, vocab, TagVocab(), seed=3)


@pytest.fixture
def squad3():
    return FIXTURES / "squad3.json"


def write_json(path, obj):
    path.write_text(json.dumps(obj), encoding="utf-8")
    return path


ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def record():
    """Store one acceptance verdict: record(n, passed, detail)."""

    def _record(n, passed, detail):
        ACCEPTANCE[n] = (bool(passed), detail)
        print(f"criterion {n}: {'PASS' if passed else 'FAIL'} - {detail}")
        return passed

    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}")
