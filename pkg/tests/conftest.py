import numpy as np
import pytest

from catrack import synth
from catrack.backbone import DESK
from catrack.config import Config

from dataclasses import replace

# a very small network so training/tracking tests stay fast
TINY = replace(DESK, channels=(4, 6, 8), fc_dim=16, branch_mid=2)
TINY_CFG = Config(channels="4,6,8", fc_dim=16, branch_mid=2, epoch_scale=0.002,
                  frames_per_batch=2, init_pos=100, init_neg=400, bbreg_samples=200,
                  init_epochs=5, update_epochs=2)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Five 24-frame sequences, one challenge schedule each."""
    root = tmp_path_factory.mktemp("tinyset")
    cycle = [["IV"], ["TC"], ["FM"], ["SV"], ["OCC"]]
    synth.generate_dataset(root, 5, 24, seed=3, challenge_cycle=cycle)
    return root, synth.load_dataset(root)


@pytest.fixture(scope="session")
def tiny_cfg():
    return TINY_CFG


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
