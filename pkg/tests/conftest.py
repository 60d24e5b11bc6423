import numpy as np
import pytest

from meetalign.config import RunConfig
from meetalign.data import PreferenceExample
from meetalign.diffcore import SeededRng
from meetalign.model import ModelConfig, ModelState


@pytest.fixture(autouse=True)
def _isolated_cache(tmp_path_factory, monkeypatch):
    monkeypatch.setenv("MEETALIGN_CACHE", str(tmp_path_factory.getbasetemp() / "cache"))


@pytest.fixture
def tiny_config():
    return ModelConfig(vocab_size=260, context_length=64, n_layers=1, n_heads=2, hidden_dim=8)


@pytest.fixture
def tiny_state(tiny_config):
    return ModelState.init(tiny_config, SeededRng(0, "test/init"))


@pytest.fixture
def micro_state():
    return ModelState.init(ModelConfig(), SeededRng(0, "test/micro"))


@pytest.fixture
def pairs():
    return [
        PreferenceExample("cab", chosen="abc", rejected="cba"),
        PreferenceExample("dbca", chosen="abcd", rejected="dcab"),
        PreferenceExample("zy", chosen="yz", rejected="zy"),
    ]


def small_run_config(seed=0, n=40, adapter="soft_prompt"):
    """A run configuration small enough to train in seconds."""
    cfg = RunConfig(seed=seed)
    cfg.model.hidden_dim = 8
    cfg.model.n_heads = 2
    cfg.model.n_layers = 1
    cfg.model.context_length = 64
    cfg.adapter.kind = adapter
    cfg.adapter.prompt_length = 2
    cfg.adapter.rank = 2
    cfg.data.n = n
    cfg.train.epochs = 1
    cfg.train.batch_size = 8
    cfg.train.base_steps = 3
    cfg.train.base_batch_size = 4
    cfg.eval.max_len = 10
    return cfg


def max_rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(1e-6, np.abs(a) + np.abs(b))))


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
