from __future__ import annotations

import functools

import pytest

from sparsesim import refnet


@functools.lru_cache(maxsize=None)
def _train(**kw) -> refnet.TrainingResult:
    return refnet.run_training(refnet.TrainConfig(**kw))


@pytest.fixture(scope="session")
def sparse_run() -> refnet.TrainingResult:
    """Toy run at 5x sparsity with decay, oracle overlap recorded every step."""
    return _train(target_density=0.2, lam=0.9, cutoff=1000, oracle=True)


@pytest.fixture(scope="session")
def nodecay_run() -> refnet.TrainingResult:
    return _train(target_density=0.2, lam=1.0, cutoff=None)


@pytest.fixture(scope="session")
def dense_run() -> refnet.TrainingResult:
    return _train(target_density=1.0, lam=1.0, cutoff=None)


@pytest.fixture(scope="session")
def final_snapshot(sparse_run):
    return sparse_run.snapshots[-1]


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.TITLES):
        if n in mod.RESULTS:
            terminalreporter.write_line(mod.RESULTS[n][2])
        else:
            terminalreporter.write_line(f"criterion {n:2d} {mod.TITLES[n]}: NOT RUN")
