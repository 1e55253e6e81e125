import numpy as np
import pytest

from crl.encoder import EncoderParams, backward, embed, forward
from crl.memory import MemoryBank


def unit_rows(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def make_bank(rng, n, d, n_classes):
    labels = np.arange(n) % n_classes
    return MemoryBank(unit_rows(rng, n, d), labels, np.arange(n))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def small_setup(seed, d_h=3, d_z=2, batch=4):
    rng = np.random.default_rng(seed)
    params = EncoderParams.init(d_h, d_z, seed=seed)
    X = rng.normal(size=(batch, 2 * d_h))
    return rng, params, X


ACCEPTANCE_SEEDS = [1, 2, 3, 4, 5]
DEFAULT_SYNTHETIC = {"classes": 40, "dim": 32, "train_per_class": 100, "sigma": 1.0}


def experiment(**overrides):
    from crl.cli import parse_config, run_experiment

    raw = {"tasks": 10, "seeds": ACCEPTANCE_SEEDS, "synthetic": dict(DEFAULT_SYNTHETIC)}
    raw.update(overrides)
    return run_experiment(parse_config(raw))


@pytest.fixture(scope="session")
def default_sweep():
    """Default synthetic stream, 5 seeds, full / no_cr / no_replay at memory size 10."""
    return experiment(variants=["full", "no_cr", "no_replay"])


ACCEPTANCE_RESULTS = []


def record(criterion, ok, detail=""):
    """Log one acceptance line for the terminal summary, then assert it."""
    ACCEPTANCE_RESULTS.append((criterion, bool(ok), detail))
    assert ok, f"criterion {criterion} failed: {detail}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, ok, detail in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {criterion}: {detail}")
