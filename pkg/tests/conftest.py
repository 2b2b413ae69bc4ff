import numpy as np
import pytest

from spalab import spgd


@pytest.fixture(autouse=True)
def check_feasibility():
    """Every attack run in the suite asserts its budget invariants per iteration."""
    old = spgd.CHECK_INVARIANTS
    spgd.CHECK_INVARIANTS = True
    yield
    spgd.CHECK_INVARIANTS = old


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_task():
    """An 8x8 synthetic task with a quickly trained CNN; for unit tests only."""
    from spalab.data import SyntheticSpec, make_synthetic
    from spalab.models import TrainConfig, make_cnn, sgd_train

    spec = SyntheticSpec(n=300, h=8, w=8)
    train = make_synthetic(spec, seed=11, split="train")
    test = make_synthetic(SyntheticSpec(n=60, h=8, w=8), seed=11, split="test")
    model, _ = sgd_train(make_cnn((8, 8, 3), 4, seed=0, widths=(8, 8), hidden=16), train,
                         TrainConfig(epochs=12, batch_size=20, lr=0.05, seed=0))
    return model, train, test


@pytest.fixture
def zero_model():
    """A CNN whose every weight is zero: constant logits and zero input gradient."""
    from spalab.models import make_cnn

    m = make_cnn((8, 8, 3), 4)
    for k in m.trainable():
        m.params[k][:] = 0.0
    return m


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
