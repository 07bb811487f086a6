import math

import pytest

from inspectsim.model import animals_config, build_instance, derive_constants

DELTA_E3 = math.exp(-3)


def two_label_config(p=0.75, q=0.25, prior=(0.5, 0.5)):
    return {
        "labels": ["a", "b"],
        "expert_types": ["x"],
        "outcomes": ["0", "1"],
        "prior": list(prior),
        "mixture": [1.0],
        "rates": [1.0],
        "outcome_tensor": [[[1 - p, p]], [[1 - q, q]]],
    }


@pytest.fixture(scope="session")
def animals():
    return build_instance(animals_config())


@pytest.fixture(scope="session")
def animals_constants(animals):
    return derive_constants(animals)


@pytest.fixture(scope="session")
def two_label():
    return build_instance(two_label_config())


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        status, title, detail = results[number]
        terminalreporter.write_line(f"[{status}] criterion {number}: {title} | {detail}")
