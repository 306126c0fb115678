from __future__ import annotations

import numpy as np
import pytest

from taskvec.lab import Zoo
from taskvec.store import Checkpoint, CheckpointMeta, TensorMap


@pytest.fixture(scope="session")
def zoo() -> Zoo:
    """One default lab shared by every test; checkpoints are memoised inside."""
    return Zoo()


def random_map(rng: np.random.Generator, shapes=None) -> TensorMap:
    shapes = shapes or {"a.weight": (3, 4), "a.bias": (3,), "b.weight": (2, 3)}
    return TensorMap({k: rng.normal(size=s) for k, s in shapes.items()})


def make_ckpt(tm: TensorMap, model_id: str = "m", **meta) -> Checkpoint:
    return Checkpoint(tm, CheckpointMeta(model_id=model_id, **meta))


# --- acceptance reporting ----------------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
