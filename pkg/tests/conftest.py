import sys
import numpy as np
import pytest
import torch

from cmaae.data import SynthConfig, gen_synthetic_dataset
from cmaae.training import TrainConfig


@pytest.fixture(scope="session")
def small_synth():
    return gen_synthetic_dataset(SynthConfig(n_identities=20, images_per_identity=4, seed=3))


@pytest.fixture
def tiny_config():
    return TrainConfig.desk(
        base_filters=4,
        latent_dim=8,
        batch_size=16,
        epochs=2,
        pretrain_r_epochs=1,
        pretrain_e_epochs=1,
    )


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)
    np.random.seed(0)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    lines = getattr(mod, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
