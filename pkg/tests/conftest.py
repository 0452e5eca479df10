from __future__ import annotations

import os
import time
from dataclasses import replace

import pytest
from hypothesis import HealthCheck, settings

from cdbmm.model import Hyperparams
from cdbmm.scenarios import ChainConfig, ScenarioSpec, replicate_study

settings.register_profile("default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

# one master seed per scenario; replicate j always uses child j of it
STUDY_SEED = 20240
ACCEPTANCE_LINES: dict[int, str] = {}


class StudyCache:
    """Replicate studies shared by every test that needs scenario fits.

    Replicate j depends only on (scenario seed, j), so a 5-replicate study is
    the first five replicates of the 10-replicate one.
    """

    def __init__(self):
        self._store = {}
        self.seconds = {}  # wall time of the run that filled each entry, per replicate

    def get(self, scenario: int, reps: int, sigma2_beta: float = 20.0):
        key = (scenario, sigma2_beta)
        have = self._store.get(key)
        if have is None or len(have.replicates) < reps:
            spec = ScenarioSpec(scenario, n=500, seed=STUDY_SEED + scenario)
            start = time.perf_counter()
            have = replicate_study(spec, reps, Hyperparams(sigma2_beta=sigma2_beta), ChainConfig())
            self.seconds[key] = (time.perf_counter() - start) / reps
            self._store[key] = have
        if len(have.replicates) == reps:
            return have
        return replace(have, replicates=have.replicates[:reps])


@pytest.fixture(scope="session")
def studies() -> StudyCache:
    return StudyCache()


@pytest.fixture
def acceptance_line(capsys):
    def record(number: int, passed: bool, detail: str) -> None:
        line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES[number] = line
        with capsys.disabled():
            print("\n" + line)

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
