import time

import numpy as np
import pytest

from n2nsdf.prior import AnalyticShape, PriorConfig, default_roster, train_prior

# filled by test_acceptance.py, one line per criterion
ACCEPTANCE_LINES: dict[int, str] = {}

DESK_PRIOR = dict(epochs=500, embedding_size=64, hidden=64, samples_per_shape=2048, batch_size=512)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def sphere_prior():
    """Prior trained on the desk sphere only (r = 0.35)."""
    ckpt, trace = train_prior([AnalyticShape.sphere(0.35)], PriorConfig(**DESK_PRIOR))
    return ckpt, trace


@pytest.fixture(scope="session")
def small_prior():
    """A quickly trained three-shape prior for plumbing tests."""
    cfg = PriorConfig(epochs=40, embedding_size=8, hidden=32, n_layers=4, samples_per_shape=512, batch_size=512)
    ckpt, _ = train_prior(default_roster(), cfg)
    return ckpt


@pytest.fixture(scope="session")
def desk_prior(tmp_path_factory):
    """Three-shape desk prior trained through the CLI; (checkpoint path, seconds spent)."""
    from n2nsdf.cli import cmd_train_prior, desk_config

    out = tmp_path_factory.mktemp("desk_prior")
    t0 = time.perf_counter()
    path = cmd_train_prior(desk_config(), out)
    return path, time.perf_counter() - t0


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])
