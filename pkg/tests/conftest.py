import numpy as np
import pytest

from liteseg.model import PRESETS, build_model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model():
    return build_model(PRESETS["tiny"], seed=0)


@pytest.fixture
def tiny_image(rng):
    return rng.standard_normal((1, 3, 64, 128)).astype(np.float32)


_ACCEPTANCE = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or not (rep.when == "call" or (rep.when == "setup" and rep.failed)):
        return
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    if rep.failed:
        lines = rep.longreprtext.strip().splitlines()
        detail = (detail + "; " if detail else "") + (lines[-1] if lines else "failed")
    _ACCEPTANCE.append(f"{'PASS' if rep.passed else 'FAIL'}  {marker.args[0]}" + (f"  [{detail}]" if detail else ""))


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
