import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from transda.config import ExperimentConfig, with_changes

settings.register_profile("default", deadline=None, max_examples=25,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def tiny_config(**changes) -> ExperimentConfig:
    """A few-second configuration: small extractor, short schedule, small pools."""
    base = {
        "extractor.image_size": [32, 32],
        "extractor.embed_dim": 16,
        "extractor.depth": 2,
        "extractor.heads": 2,
        "head_hidden": 8,
        "schedule.warmup_iters": 3,
        "schedule.iters_per_round": 3,
        "schedule.rounds": 2,
        "batch_size": 2,
        "data.n_source": 8,
        "data.n_target": 8,
        "data.n_test": 4,
        "data.min_objects": 1,
        "data.max_objects": 2,
        "tracking.probe_count": 2,
        "optim.lr_fc": 1e-3,
        "optim.lr_warmup_iters": 1,
    }
    base.update(changes)
    return with_changes(ExperimentConfig(), **base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
