import numpy as np
import pytest
from hypothesis import settings

from hpflex.thermal_id import BuildingModel, ChargeRateModel, ConstantRate, LossRateModel

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")

REF_LOSS = LossRateModel(-0.084, 1.722)
REF_CHARGE = ChargeRateModel(-17.85, 473.26, 1.6262)


@pytest.fixture
def ref_model():
    return BuildingModel("ref", p_r=2.0, loss=REF_LOSS, charge=REF_CHARGE, f=4.0)


def constant_model(r_l, r_c, p_r=2.0, f=4.0, bid="const"):
    return BuildingModel(bid, p_r=p_r, loss=ConstantRate(r_l), charge=ConstantRate(r_c), f=f)


def all_binary(N):
    """All 2^N binary sequences as rows of an int8 matrix."""
    k = np.arange(2 ** N, dtype=np.int64)
    return ((k[:, None] >> np.arange(N)) & 1).astype(np.int8)


def brute_force_envelope(x0, charge_steps, loss_steps, tol=1e-9):
    """Exhaustive min/max on-step counts per prefix over feasible trajectories.

    Independent of the polytope matrices: SOC is integrated by cumsum of
    per-step increments. Returns (lo, hi) or None if nothing is feasible.
    """
    N = len(charge_steps)
    U = all_binary(N)
    x = x0 + np.cumsum(U * np.asarray(charge_steps) - np.asarray(loss_steps), axis=1)
    ok = np.all((x >= -tol) & (x <= 1 + tol), axis=1)
    if not ok.any():
        return None
    counts = np.cumsum(U[ok], axis=1)
    return counts.min(axis=0), counts.max(axis=0)
