import numpy as np
import pytest
import torch

from reldeepsym import datasets, models


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def small_config(arch, **kw):
    base = dict(hidden=8, d_attn=8, agg_width=8, n_max=3)
    base.update(kw)
    return models.ModelConfig(arch, **base)


@pytest.fixture
def small_ckpt():
    def make(arch, seed=0, **kw):
        return models.ModelCheckpoint.init(small_config(arch, **kw), seed, torch.float64)
    return make


@pytest.fixture(scope="session")
def records_2obj():
    return datasets.generate_records("2obj", 200, 3)


@pytest.fixture(scope="session")
def records_mixed():
    return datasets.generate_records("mixed", 90, 5)


# acceptance reporting ---------------------------------------------------------

_acceptance: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): numbered acceptance criterion")


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("acceptance")
    if marker is None or call.when != "call" and not (call.when == "setup" and call.excinfo):
        return
    number, title = marker.args
    detail = dict(item.user_properties).get("detail", "")
    if call.excinfo is None:
        outcome = "PASS"
    elif call.excinfo.errisinstance(pytest.skip.Exception):
        outcome = "SKIP"
    else:
        outcome = "FAIL"
    _acceptance[number] = (title, outcome, detail)


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_acceptance):
        title, outcome, detail = _acceptance[number]
        line = f"[{outcome}] {number}. {title}"
        terminalreporter.write_line(f"{line}: {detail}" if detail else line)
