import numpy as np
import pytest

from upsr.core import make_rng
from upsr.schedule import build_schedule


@pytest.fixture
def rng():
    return make_rng(1234, "tests")


@pytest.fixture
def schedule():
    return build_schedule()
