import pytest

from ftnet import data


@pytest.fixture(scope="session")
def reference_data():
    """The frozen reference split: seed 0, 5000 train and 1000 test rows, sigma 0.1."""
    return data.generate(data.DataGenConfig())


@pytest.fixture(scope="session")
def trained_pair(reference_data):
    """Dropout and plain networks on the reference split, seed 1, full 200-epoch schedule."""
    from ftnet import nn
    from ftnet.trainer import TrainConfig, train

    train_set, _ = reference_data
    drop, _ = train(train_set, nn.REFERENCE_SPEC, TrainConfig(seed=1))
    plain, _ = train(train_set, nn.REFERENCE_SPEC, TrainConfig(seed=1, dropout=False))
    return drop, plain


# criterion number -> (title, passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n:2d}. {title}: {detail}")
