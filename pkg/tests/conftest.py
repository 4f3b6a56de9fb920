import os

import pytest

from fluxlab.cases import make_case, reference_values


def cache_dir():
    return os.environ.get("FLUXLAB_CACHE", os.path.join(os.path.expanduser("~"), ".cache", "fluxlab"))


@pytest.fixture(scope="session")
def slit():
    return make_case("slit")


@pytest.fixture(scope="session")
def manufactured():
    return make_case("manufactured")


@pytest.fixture(scope="session")
def slit_reference(slit):
    """Slit reference values; computed once (about a minute) and cached on disk."""
    return reference_values(slit, cache_dir=cache_dir())


GATE_LINES = []


class Gate:
    """Collects one PASS/FAIL line per acceptance criterion."""

    def __call__(self, label, checks, detail=""):
        failed = [name for name, ok in checks if not ok]
        status = "FAIL" if failed else "PASS"
        line = f"{status}  {label}"
        if detail:
            line += f" | {detail}"
        if failed:
            line += " | failing: " + "; ".join(failed)
        GATE_LINES.append((label, line))
        print(line)
        return not failed


@pytest.fixture(scope="session")
def gate():
    return Gate()


def pytest_terminal_summary(terminalreporter):
    if GATE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(GATE_LINES):
            terminalreporter.write_line(line)
