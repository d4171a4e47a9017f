import pytest

from mkws.corpus import CorpusConfig, build_corpus

EASY = CorpusConfig(n_positive=100, n_negative=100, positive_snrs=(10.0, 15.0, 20.0), distractor_rate_hz=0.0,
                    noise_types=("white", "pink", "street", "vacuum"))


@pytest.fixture(scope="session")
def easy_corpus(tmp_path_factory):
    """200 high-SNR utterances with every channel, shared by the trainer and evaluator tests."""
    return build_corpus(tmp_path_factory.mktemp("easy"), EASY, seed=1)


ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def acceptance_log(request):
    """Collects one pass/fail line per acceptance criterion for the terminal summary."""
    return request.config.stash.setdefault(ACCEPTANCE_KEY, [])


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
