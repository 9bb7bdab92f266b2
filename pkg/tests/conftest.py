import pytest

from pipeqpp.harness import TrainConfig, simulate_corpus, train_ocp, train_qpp
from pipeqpp.models import ModelConfig

SMALL_MODEL = ModelConfig(ocp_hidden=(16, 16, 16), width=8)


@pytest.fixture(scope="session")
def small_corpus():
    return simulate_corpus(4, 12, 5, probe_chunks=4)


@pytest.fixture(scope="session")
def small_config():
    return TrainConfig(epochs=3, ocp_epochs=4, held_out_templates=(3,), seed=0)


@pytest.fixture(scope="session")
def small_ocp(small_corpus, small_config):
    ocp, _ = train_ocp(small_corpus.full, small_config, hidden=SMALL_MODEL.ocp_hidden)
    return ocp


@pytest.fixture(scope="session")
def small_bundle(small_corpus, small_ocp, small_config):
    bundle, _ = train_qpp(small_corpus.probe, small_ocp, small_config, model_config=SMALL_MODEL)
    return bundle


def pytest_terminal_summary(terminalreporter):
    import sys
    acceptance = sys.modules.get("test_acceptance")
    results = getattr(acceptance, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
