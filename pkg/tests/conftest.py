import pytest
import torch

from toys2st.synthspeech import default_codec


@pytest.fixture(scope="session")
def codec():
    return default_codec()


@pytest.fixture(scope="session")
def layout(codec):
    return codec.layout


@pytest.fixture(autouse=True)
def _one_thread():
    torch.set_num_threads(1)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
