import pickle

import numpy as np
import pytest

from genegraph.data import SyntheticSpec, generate_synthetic
from genegraph.pipeline import GraphSettings, build_graph

_ACCEPTANCE: dict[str, str] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        name = report.nodeid.split("::")[-1]
        _ACCEPTANCE[name] = "PASS" if report.outcome == "passed" else report.outcome.upper()


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_ACCEPTANCE):
        terminalreporter.write_line(f"{_ACCEPTANCE[name]:<5} {name}")


SMALL_SPEC = SyntheticSpec(n_cells=400, n_genes=60, n_modules=2, module_size=10, seed=11)


@pytest.fixture(scope="session")
def small_collection():
    """Three small synthetic datasets, their planted truth and built graphs."""
    datasets, truth = generate_synthetic(SMALL_SPEC)
    graphs = [build_graph(ds, GraphSettings(n_genes=60)) for ds in datasets]
    return datasets, truth, graphs


@pytest.fixture(scope="session")
def default_graphs(tmp_path_factory):
    """Graphs of the default synthetic collection for several seeds, built once."""
    cache = tmp_path_factory.mktemp("default_graphs")
    built = {}

    def get(seed: int):
        if seed not in built:
            path = cache / f"{seed}.pkl"
            if path.exists():
                built[seed] = pickle.loads(path.read_bytes())
            else:
                datasets, truth = generate_synthetic(SyntheticSpec(seed=seed))
                built[seed] = ([build_graph(ds) for ds in datasets], truth)
                path.write_bytes(pickle.dumps(built[seed]))
        return built[seed]

    return get


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
