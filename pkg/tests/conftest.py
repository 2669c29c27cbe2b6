import time

import pytest

from viewage.harness import RunConfig

TINY = {
    "modulator.steps": 3,
    "modulator.batch_size": 2,
    "dataset.identities": 2,
    "base.steps": 2,
    "base.batch_size": 4,
    "aging.steps": 2,
    "aging.batch_size": 4,
    "view.steps": 2,
    "view.batch_size": 4,
    "controller.steps": 2,
    "controller.batch_size": 4,
    "temporal.steps": 2,
    "temporal.batch_size": 8,
    "sampler.steps": 2,
    "eval.identities": 2,
    "eval.ages": [0, 70],
}


def tiny_config(run_dir, **extra) -> RunConfig:
    return RunConfig({**TINY, "run_dir": str(run_dir), **extra})


@pytest.fixture(scope="session")
def tiny_run(tmp_path_factory):
    """A complete pipeline at a handful of steps: (config, report)."""
    from viewage.harness import run_pipeline

    cfg = tiny_config(tmp_path_factory.mktemp("tiny"))
    return cfg, run_pipeline(cfg)


@pytest.fixture(scope="session")
def full_run(tmp_path_factory):
    """The whole pipeline at default settings: (config, report, stage seconds)."""
    from viewage.harness import run_pipeline

    cfg = RunConfig({"run_dir": str(tmp_path_factory.mktemp("full-a"))})
    timings = {}
    start = time.perf_counter()
    report = run_pipeline(cfg, timings=timings)
    timings["total"] = time.perf_counter() - start
    return cfg, report, timings


def pytest_terminal_summary(terminalreporter):
    from helpers import VERDICTS

    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(VERDICTS, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
