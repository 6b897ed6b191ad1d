import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from stochctl.sde_sim import SdeSystem

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def make_system(drift, control, noise, sigma, domain, **kw):
    return SdeSystem.from_spec({"dim": len(domain), "drift": drift, "control_field": control,
                                "noise_field": noise, "sigma": sigma, "domain": domain, **kw})


def ou(sigma=0.5, domain=((-3.0, 3.0),)):
    """dx = -x dt + u dt + sigma dW (additive noise)."""
    return make_system([[[-1.0, [1]]]], [[[1.0, [0]]]], [[[1.0, [0]]]], sigma, [list(d) for d in domain],
                       strict_equilibrium=False)


def scalar_cubic(sigma=0.5):
    """dx = (0.01 x^3 + u) dt + sigma x dW on [-10, 10]."""
    return make_system([[[0.01, [3]]]], [[[1.0, [0]]]], [[[1.0, [1]]]], sigma, [[-10.0, 10.0]])


def integrator():
    """dx = u dt (no drift, no noise) on [-1, 1]."""
    return make_system([[]], [[[1.0, [0]]]], [[]], 0.0, [[-1.0, 1.0]])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
