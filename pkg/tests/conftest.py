import warnings

import numpy as np
import pytest

from dipolelab import DipoleParams
from dipolelab.special import ConvergenceWarning


@pytest.fixture(scope="session")
def params2():
    return DipoleParams(2, 1.0, 1.0)


@pytest.fixture(scope="session")
def params3():
    return DipoleParams(3, 1.0, 1.0)


@pytest.fixture(autouse=True)
def _quiet_convergence_warnings():
    # small-t truncation ringing makes N(t) locally non-monotone; the warning
    # is expected background in many tests
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        yield


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20240817)
