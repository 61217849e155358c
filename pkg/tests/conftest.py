import pytest

from hivemem.embeddings import HashingEmbedder


@pytest.fixture(scope="session")
def provider():
    return HashingEmbedder(64)


@pytest.fixture(scope="session")
def tiny_provider():
    return HashingEmbedder(8)


def pytest_runtest_logreport(report):
    """One pass/fail line per acceptance criterion, printed as it resolves."""
    if report.when != "call" or "test_acceptance" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    status = "PASS" if report.passed else "FAIL"
    print(f"\nACCEPTANCE {name}: {status}", flush=True)
