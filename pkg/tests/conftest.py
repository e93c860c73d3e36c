import numpy as np
import pytest

from proxyunlearn import datagen, nets


@pytest.fixture(scope="session")
def subclass_setup():
    """2 classes x 2 subclasses in 2-d, 1000 points per subclass, forget (0, 1)."""
    spec = datagen.make_mixture_spec(2, 2, 2, seed=0)
    ds = datagen.generate(spec, 1000, seed=0)
    split = datagen.build_scenario(ds, datagen.SubclassScenario(0, 1))
    model = nets.make_arch("mlp1", 2, 2, 64, seed=0)
    nets.train_ce(model, ds, nets.TrainConfig(epochs=30, seed=0))
    return ds, split, model


@pytest.fixture(scope="session")
def three_class_setup():
    spec = datagen.make_mixture_spec(3, 2, 2, seed=5)
    ds = datagen.generate(spec, 60, seed=5)
    model = nets.make_arch("mlp1", 2, 3, 16, seed=5)
    nets.train_ce(model, ds, nets.TrainConfig(epochs=15, seed=5))
    return ds, model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_CRITERIA = {}


def pytest_runtest_logreport(report):
    marker = getattr(report, "criterion", None)
    if marker is None:
        return
    if report.when == "call" or report.outcome != "passed":
        ok = report.outcome == "passed" and _CRITERIA.get(marker, "PASS") == "PASS"
        _CRITERIA[marker] = "PASS" if ok else "FAIL"


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    mark = item.get_closest_marker("criterion")
    if mark is not None:
        outcome.get_result().criterion = mark.args


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for (number, title), status in sorted(_CRITERIA.items()):
        terminalreporter.write_line(f"criterion {number:2d} {status}: {title}")
