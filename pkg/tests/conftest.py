import numpy as np
import pytest

from mhri.synth import SynthConfig, generate_dataset


@pytest.fixture(scope="session")
def default_episodes():
    return generate_dataset(SynthConfig())


@pytest.fixture(scope="session")
def small_episodes():
    return generate_dataset(SynthConfig(n_episodes=6, utterances_per_episode=(4, 7), d_v=8, d_t=8, seed=3))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request, capsys):
    """Record and print one pass/fail line for an acceptance criterion."""
    lines = request.config.stash.setdefault(ACCEPTANCE_KEY, [])

    def record(number, ok, detail):
        line = f"acceptance criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}"
        lines.append(line)
        with capsys.disabled():
            print("\n" + line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
