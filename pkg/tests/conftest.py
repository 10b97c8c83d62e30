import pytest
from hypothesis import settings

from headoffload.workload import get_model, get_profile

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


@pytest.fixture(scope="session")
def llama8b():
    return get_model("llama3-8b")


@pytest.fixture(scope="session")
def llama70b():
    return get_model("llama3-70b")


@pytest.fixture(scope="session")
def toy():
    return get_model("toy")


@pytest.fixture(scope="session")
def profile_a():
    return get_profile("profile-a")


@pytest.fixture(scope="session")
def profile_b():
    return get_profile("profile-b")


@pytest.fixture(scope="session")
def toy_hw():
    return get_profile("toy")


def pytest_terminal_summary(terminalreporter):
    import sys
    module = sys.modules.get("test_acceptance")
    if module and module.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in module.RESULTS:
            terminalreporter.write_line(line)
