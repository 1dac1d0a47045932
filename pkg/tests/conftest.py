from __future__ import annotations

import dataclasses

import pytest
from hypothesis import HealthCheck, settings

from vo2fit import cohortgen as cg
from vo2fit import pipeline as pl
from vo2fit.models.dense import TrainConfig

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

ACCEPTANCE_RESULTS: dict[int, tuple[str, str, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_RESULTS):
        name, status, detail = ACCEPTANCE_RESULTS[k]
        terminalreporter.write_line(f"[{status}] criterion {k:2d} {name}: {detail}")


@pytest.fixture(scope="session")
def small_config() -> pl.Config:
    """A cohort small enough for second-scale pipeline tests."""
    return dataclasses.replace(
        pl.Config(),
        population=cg.PopulationSpec.desk(n_train=240, n_longitudinal=100, seed=11),
        seed=11,
        train=TrainConfig(max_epochs=6, patience=3, lr_patience=2),
        n_resamples=50,
        n_permutations=50,
    )


@pytest.fixture(scope="session")
def small_features(small_config):
    study = cg.generate_study(small_config.population, small_config.drift)
    return study, pl.build_features(study, small_config)
