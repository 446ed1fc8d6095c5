import os
import sys
import time

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from motion_atlas.pipeline import PipelineConfig, run_pipeline  # noqa: E402

_LINES = []


class Acceptance:
    """Collects one pass/fail line per criterion for the terminal summary."""

    def record(self, criterion, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {criterion}: {detail}"
        _LINES.append(line)
        print(line)
        return ok


@pytest.fixture(scope="session")
def acceptance():
    return Acceptance()


@pytest.fixture(scope="session")
def default_run(tmp_path_factory):
    """The default desk configuration (N=300, T=20) run end to end once."""
    cfg = PipelineConfig()
    cfg.output = str(tmp_path_factory.mktemp("default_run"))
    t0 = time.perf_counter()
    manifest = run_pipeline(cfg, n_jobs=min(8, os.cpu_count() or 1))
    return cfg, manifest, time.perf_counter() - t0


@pytest.fixture
def rng():
    import numpy as np

    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in _LINES:
            terminalreporter.write_line(line)
