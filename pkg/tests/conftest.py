"""Shared fixtures: task models are trained once per session and reused."""

import time

import numpy as np
import pytest

from effective_context.data import SyntheticTaskSpec, generate
from effective_context.model import ModelConfig
from effective_context.train import TrainConfig, train_probe, train_supervised

TRAIN_UTTS, DEV_UTTS, TEST_UTTS = 600, 50, 40
MIN_LEN, MAX_LEN = 17, 64
EPOCHS = 40


class TaskSuite:
    """Lazily trained (radius, seed) models with their data splits and probes."""

    def __init__(self):
        self._runs = {}

    def run(self, radius: int, seed: int = 0) -> dict:
        key = (radius, seed)
        if key not in self._runs:
            t0 = time.perf_counter()
            spec = SyntheticTaskSpec(context_radius=radius, seed=seed)
            train = generate(spec, TRAIN_UTTS, MIN_LEN, MAX_LEN, "train")
            dev = generate(spec, DEV_UTTS, MIN_LEN, MAX_LEN, "dev")
            test = generate(spec, TEST_UTTS, MIN_LEN, MAX_LEN, "test")
            res = train_supervised(ModelConfig(seed=seed), train, TrainConfig(epochs=EPOCHS, seed=seed), dev)
            model = res.model.astype(np.float64)
            probe = train_probe(model, -1, train.subset(range(200)), dev=dev)
            self._runs[key] = dict(spec=spec, train=train, dev=dev, test=test, result=res,
                                   model=model, probe=probe,
                                   seconds=time.perf_counter() - t0)
        return self._runs[key]


@pytest.fixture(scope="session")
def suite():
    return TaskSuite()


# -- acceptance report ---------------------------------------------------------

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture(scope="session")
def record():
    """``record(n, ok, detail)`` stores criterion ``n``'s outcome for the summary."""
    def _record(n: int, ok: bool, detail: str) -> bool:
        ACCEPTANCE[n] = (bool(ok), detail)
        return bool(ok)
    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
