import numpy as np
import pytest

from manifold_gan.config import RunConfig
from manifold_gan.data import SyntheticManifoldSpec, make_split, synth_sample


def moons_config(**overrides) -> RunConfig:
    """Small MLP two-moons run that trains in well under a second per epoch."""
    base = {
        "dataset.kind": "two-moons", "dataset.n_samples": 200, "dataset.n_test": 100,
        "dataset.n_labeled": 8, "dataset.n_validation": 50,
        "model.profile": "mlp", "model.num_classes": 2, "model.latent_dim": 2,
        "model.hidden": 16, "train.batch_size": 25, "train.epochs": 4,
        "train.decay_start": 2, "train.ema_decay": 0.9, "run.seeds": (0, 1),
    }
    base.update(overrides)
    return RunConfig().replace(**base)


def moons_split(n=200, n_labeled=8, n_validation=50, seed=0, noise=0.05):
    x, y = synth_sample(SyntheticManifoldSpec("two-moons", n, noise), seed + 100)
    xt, yt = synth_sample(SyntheticManifoldSpec("two-moons", 100, noise), seed + 200)
    return make_split(x, y, n_labeled, n_validation, seed, xt, yt, source="two-moons")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_split():
    return moons_split()


@pytest.fixture
def small_config():
    return moons_config()


# acceptance criteria append "PASS/FAIL criterion N: ..." lines here
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
