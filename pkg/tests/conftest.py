import numpy as np
import pytest

from aberray import lens as lenslib


@pytest.fixture(scope="session")
def fifty():
    return lenslib.load_lens("fifty_f2.8")


@pytest.fixture(scope="session")
def canon():
    return lenslib.load_lens("canon_rf50_f1.8")


@pytest.fixture(scope="session")
def fifty_at_1p5(fifty):
    return lenslib.focus_to(fifty, 1.5)


@pytest.fixture(scope="session")
def canon_at_1p5(canon):
    return lenslib.focus_to(canon, 1.5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
