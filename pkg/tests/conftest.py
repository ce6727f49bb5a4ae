import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


class _Trained:
    def __init__(self, cfg, splits, result, seconds):
        from wdistill.distill import Teacher

        self.cfg = cfg
        self.splits = splits
        self.result = result
        self.seconds = seconds
        self.teacher = Teacher(result.params, result.cfg)


@pytest.fixture(scope="session")
def trained():
    """The default reverse-task teacher (enc2/dec2/d32, vocab 16), trained once."""
    from wdistill import experiment as X

    cfg = X.ExperimentConfig()
    splits = X.make_data(cfg.task)
    t0 = time.perf_counter()
    result = X.run_teacher(cfg, splits)
    return _Trained(cfg, splits, result, time.perf_counter() - t0)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
