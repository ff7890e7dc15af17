import pytest

from searchrl.environment import generate_kb


@pytest.fixture(scope="session")
def toy_env():
    """Small knowledge base with a mixed 1-/2-hop prompt set."""
    return generate_kb(3, 12, 4, 0.5, facts_per_entity=2, n_prompts=16, n_filler=4)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
