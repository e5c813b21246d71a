import os
from pathlib import Path

import numpy as np
import pytest

from saliency_align.data import MNIST_FILES, write_mnist_subset
from saliency_align.metrics import check_bounds

BOUND_LOG = {"checked": 0, "violations": []}
CRITERIA: dict[int, tuple[str, bool, str]] = {}


def assert_bounds(rep, where: str = "") -> None:
    """Check the bound chain on a report or record and log it for the session summary."""
    if rep.rho_tilde is None:
        return
    BOUND_LOG["checked"] += 1
    bad = check_bounds(rep)
    if bad:
        BOUND_LOG["violations"].append((where, bad))
    assert not bad, f"{where}: {bad}"


def record_criterion(number: int, title: str, passed: bool, detail: str) -> None:
    CRITERIA[number] = (title, bool(passed), detail)
    print(f"criterion {number} [{'PASS' if passed else 'FAIL'}] {title}: {detail}")


def pytest_collection_modifyitems(items):
    # acceptance runs last so its bound-suite check sees every sample the other suites analyzed
    items.sort(key=lambda item: item.nodeid.startswith("tests/test_acceptance.py"))


def pytest_terminal_summary(terminalreporter):
    tr = terminalreporter
    if CRITERIA:
        tr.section("acceptance criteria")
        for number in sorted(CRITERIA):
            title, passed, detail = CRITERIA[number]
            tr.write_line(f"criterion {number} [{'PASS' if passed else 'FAIL'}] {title}: {detail}")
    if BOUND_LOG["checked"]:
        tr.section("bound checks")
        tr.write_line(f"{BOUND_LOG['checked']} samples checked against the bound chain, "
                      f"{len(BOUND_LOG['violations'])} violations")


def _has_mnist(d: Path) -> bool:
    names = [n for pair in MNIST_FILES.values() for n in pair]
    return all((d / n).exists() or (d / (n + ".gz")).exists() for n in names)


@pytest.fixture(scope="session")
def mnist_dir(tmp_path_factory) -> Path:
    """Real MNIST when SALIENCY_MNIST_DIR points at it, else the bundled 5000-image sample."""
    env = os.environ.get("SALIENCY_MNIST_DIR")
    if env and _has_mnist(Path(env)):
        return Path(env)
    return write_mnist_subset(tmp_path_factory.mktemp("mnist"))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
