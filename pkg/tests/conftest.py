import numpy as np
import pytest

from eamap.data import Normalization, SyntheticSpec, generate_shapes, train_test_split
from eamap.vit import ModelConfig, TrainConfig, init_params, train
from eamap.tensor import RngState

TINY = ModelConfig(image_size=28, patch_size=7, embed_dim=16, num_layers=2, num_heads=2, num_classes=10)


@pytest.fixture(scope="session")
def tiny_cfg():
    return TINY


@pytest.fixture(scope="session")
def tiny_params():
    return init_params(TINY, RngState(0))


@pytest.fixture(scope="session")
def shapes_small():
    ds = generate_shapes(SyntheticSpec(samples_per_class=30, seed=3))
    return train_test_split(ds, 0.2, 0)


@pytest.fixture(scope="session")
def tiny_trained(shapes_small):
    """A few epochs on a small shapes set: attention maps that are not random."""
    tr, te = shapes_small
    norm = Normalization.fit(tr)
    params, _ = train(norm.apply(tr.images), tr.labels, TINY, TrainConfig(epochs=3, batch_size=32, seed=0))
    return params, norm


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# --- acceptance summary ------------------------------------------------------

_ACCEPTANCE_OUTCOMES: dict[str, str] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py" in report.nodeid and "test_criterion_" in report.nodeid:
        if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
            _ACCEPTANCE_OUTCOMES[report.nodeid] = report.outcome


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE_OUTCOMES:
        return
    from acceptance_report import DETAILS

    terminalreporter.section("acceptance criteria")
    for nodeid, outcome in sorted(_ACCEPTANCE_OUTCOMES.items(), key=lambda kv: int(kv[0].split("test_criterion_")[1][:2])):
        n = int(nodeid.split("test_criterion_")[1][:2])
        status = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {DETAILS.get(n, '')}")
