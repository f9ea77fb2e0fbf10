import numpy as np
import pytest

from sdgame.model import GameSpec, Coefficient


def const(val, role):
    return Coefficient({"kind": "constant", "value": val}, role)


def make_spec(drift=0.0, diffusion=0.0, f1=0.0, f2=0.0, phi1=0.0, phi2=0.0,
              U=(0.0,), V=(0.0,), lam=0.5, K=0.0, C=2.0, T=1.0, bound=None):
    """Spec builder: numbers become constants, dicts/callables pass through."""
    def coef(c, role):
        if isinstance(c, Coefficient):
            return c
        if isinstance(c, (int, float)):
            return const(float(c), role)
        return Coefficient(c, role)

    return GameSpec(
        T=T,
        drift=coef(drift, "drift"),
        diffusion=coef(diffusion, "diffusion"),
        ftilde1=coef(f1, "driver"),
        ftilde2=coef(f2, "driver"),
        phi1=coef(phi1, "terminal"),
        phi2=coef(phi2, "terminal"),
        control_set_U=U,
        control_set_V=V,
        lam=lam,
        K=K,
        lipschitz_bound=C,
        coefficient_bound=bound,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
