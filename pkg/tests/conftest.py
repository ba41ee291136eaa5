import pytest

from cascade_explain.cascade import fit_cascade, paper_small_config
from cascade_explain.dataset import gen_sincos, gen_threeclass


@pytest.fixture(scope="session")
def sincos_model():
    d = gen_sincos(600, seed=11)
    return d, fit_cascade(d, paper_small_config(seed=5, max_layers=4))


@pytest.fixture(scope="session")
def threeclass_model():
    d = gen_threeclass(200, noise_dims=20, seed=4)
    return d, fit_cascade(d, paper_small_config(seed=2, max_layers=4))


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE_LOG

    if ACCEPTANCE_LOG:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LOG):
            terminalreporter.write_line(ACCEPTANCE_LOG[n])
