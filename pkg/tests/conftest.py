import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from sinr.data import SyntheticSpec, make_synthetic  # noqa: E402
from sinr.model import BlockSpec, ModelSpec, build_model  # noqa: E402
from sinr.trainer import TrainConfig, split_train_validation, train  # noqa: E402

TINY_SPEC = ModelSpec([BlockSpec(1, 8), BlockSpec(1, 16)], (32, 10), input_shape=(3, 8, 8))


@pytest.fixture(scope="session")
def tiny_data():
    ds = make_synthetic(SyntheticSpec(samples_per_class=160, size=8, noise=0.25, seed=7))
    test = ds.subset(slice(0, 600))
    update, val = split_train_validation(ds.subset(slice(600, len(ds))), seed=7)
    return update, val, test


@pytest.fixture(scope="session")
def tiny_trained(tiny_data):
    """Small two-block model trained with dropout 0.2 everywhere."""
    update, val, test = tiny_data
    model = build_model(TINY_SPEC.with_dropout(0.2), seed=7)
    model, report = train(model, update, val, TrainConfig(max_epochs=15, patience=20, seed=7))
    return model, test, report


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
