import numpy as np
import pytest

from moma import autograd as ag
from moma.config import default_config
from moma.vit import ViTConfig

# small enough for float64 checks, deep enough to exercise every block
NANO = ViTConfig(image_size=8, patch_size=4, depth=2, heads=2, dim=8, decoder_depth=1, decoder_dim=8, decoder_heads=2)


@pytest.fixture
def f64():
    with ag.default_dtype(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def quick_config(kind, steps=3, batch=16, n_train=32, **sections):
    """Config for a few-step run on synthetic data; ``sections`` maps section -> dict of overrides."""
    cfg = default_config(kind)
    cfg["run"].update(epochs=steps, warmup_epochs=0, batch_size=batch, max_steps=steps)
    cfg["data"].update(n_train=n_train, n_test=32)
    cfg["optim"].update(lr=1e-3, scale_lr=False)
    for section, values in sections.items():
        cfg[section].update(values)
    return cfg


# one line per acceptance criterion, echoed at the end of the session
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
