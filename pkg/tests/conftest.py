import time
from pathlib import Path

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from mlip.config import load_config
from mlip.data import gen_synthetic_dataset
from mlip.tensor import precision

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

# one line per acceptance criterion, filled by test_acceptance
ACCEPTANCE_LINES = {}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def f64():
    with precision(np.float64):
        yield


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    """The 256-pair training set of the tiny preset, written to disk."""
    out = tmp_path_factory.mktemp("data")
    pairs = gen_synthetic_dataset(256, 0, out)
    return out, pairs


@pytest.fixture(scope="session")
def tiny_run(tmp_path_factory, tiny_data):
    """One full tiny-preset training run (seed 0), shared by the slow checks.

    Returns ``(out_dir, TrainResult, seconds, merge_stats)`` where merge_stats
    holds the conservation diagnostics of every merge step of the run.
    """
    import mlip.spatial as spatial
    from mlip.train import train

    out = tmp_path_factory.mktemp("tiny_seed0")
    cfg = load_config(CONFIGS / "tiny.cfg")
    stats = []
    original = spatial.merge_diagnostics

    def recording(before, after, keep_ratio):
        s = original(before, after, keep_ratio)
        stats.append(s)
        return s

    with pytest.MonkeyPatch.context() as mp, threadpool_limits(limits=1):
        mp.setattr(spatial, "merge_diagnostics", recording)
        start = time.perf_counter()
        result = train(cfg, tiny_data[1], seed=0, out_dir=out)
        seconds = time.perf_counter() - start
    return out, result, seconds, stats


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])
