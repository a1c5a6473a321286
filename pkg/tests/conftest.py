import pytest

from rgpd.config import TrainConfig
from rgpd.training import load_datasets

# small enough that a full train() call takes about a second
TINY = TrainConfig(synth_units=12, synth_min_len=40, synth_max_len=60, synth_channels=4,
                   window_sizes=(10, 15), stride=3, gat_dim=4, gcrn_hidden=4, gcrn_steps=2,
                   time_embed_dim=3, dynamics_width=8, sac_hidden=8, sac_batch_size=16,
                   epochs=3, batch_size=16, valid_fraction=0.2, test_fraction=0.25, seed=3)


@pytest.fixture(scope="session")
def tiny_config():
    return TINY


@pytest.fixture(scope="session")
def tiny_split():
    return load_datasets(TINY)



# one summary line per acceptance criterion, filled in by tests/test_acceptance.py
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
