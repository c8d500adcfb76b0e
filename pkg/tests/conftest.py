import sys

import pytest

from scalegate.experiment import DeskConfig, run_desk
from scalegate.synthdata import generate_corpus
from scalegate.trainer import TrainConfig, train


@pytest.fixture(scope="session")
def desk_run():
    """Full desk-scale run (three variants, 20k steps each); shared by the slow tests."""
    return run_desk(DeskConfig(seed=0))


@pytest.fixture(scope="session")
def small_corpus():
    return generate_corpus(11, 1200)


@pytest.fixture(scope="session")
def short_run(small_corpus):
    cfg = TrainConfig(steps=300, variant="cs_hlora", seed=4, log_every=10)
    return train(cfg, small_corpus.samples, 4)


def pytest_terminal_summary(terminalreporter):
    mod = next((m for name, m in list(sys.modules.items())
                if name.rsplit(".", 1)[-1] == "test_acceptance"), None)
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
