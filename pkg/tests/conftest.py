import pytest
import torch

from hstrnet.synthetic import write_toy_corpus


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


@pytest.fixture(scope="session")
def septuplet_root(tmp_path_factory):
    return write_toy_corpus(tmp_path_factory.mktemp("sept"), "septuplet", n_clips=4, size=(64, 64), seed=1)


@pytest.fixture(scope="session")
def triplet_root(tmp_path_factory):
    return write_toy_corpus(tmp_path_factory.mktemp("trip"), "triplet", n_clips=2, size=(64, 64), seed=2)


@pytest.fixture(scope="session")
def sequence_root(tmp_path_factory):
    return write_toy_corpus(tmp_path_factory.mktemp("seq"), "sequence", n_clips=1, size=(48, 64),
                            n_frames=9, seed=3)


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    if module is None or not module.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in module.summary_lines():
        terminalreporter.write_line(line)
