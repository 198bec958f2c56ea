from datetime import datetime, timedelta, timezone

import numpy as np
import pytest
from conftest import REF_CHARGE, REF_LOSS, all_binary, brute_force_envelope, constant_model
from hypothesis import given
from hypothesis import strategies as st

from hpflex.errors import InfeasibleStateError
from hpflex.flexibility import (FlexHorizon, build_polytope, energy_envelope, initial_soc,
                                is_feasible, max_deferral, predict_soc, write_envelope_csv)
from hpflex.flexibility import _envelope_dp, _envelope_milp
from hpflex.thermal_id import BuildingModel

T0 = datetime(2024, 1, 1, tzinfo=timezone.utc)


def random_instance(rng, n_max=12):
    N = int(rng.integers(1, n_max + 1))
    t_s = float(rng.choice([1 / 12, 1 / 6, 0.25]))
    if rng.random() < 0.3:
        rl = rng.uniform(0, 3)
        m = constant_model(rl, rl + rng.uniform(0.5, 6), p_r=rng.uniform(1, 5))
        h = FlexHorizon.constant(N, t_s, 0.0)
    else:
        m = BuildingModel("r", rng.uniform(1, 5), REF_LOSS, REF_CHARGE)
        h = FlexHorizon(N, t_s, rng.uniform(-15, 15) + np.cumsum(rng.normal(0, 1, N)))
    return m, h, float(rng.uniform(0, 1))


def test_predict_soc_hand_recursion():
    m = constant_model(2.0, 5.0)
    x = predict_soc(m, FlexHorizon.constant(5, 1 / 12, 0.0), 0.75, np.zeros(5))
    np.testing.assert_allclose(x, [0.58333333, 0.41666667, 0.25, 0.08333333, -0.08333333], atol=1e-8)


def test_predict_soc_balanced_and_lossless():
    h = FlexHorizon.constant(6, 0.25, 0.0)
    np.testing.assert_allclose(predict_soc(constant_model(2.0, 2.0), h, 0.4, np.ones(6)), 0.4)
    np.testing.assert_allclose(predict_soc(constant_model(0.0, 2.0), h, 0.4, np.zeros(6)), 0.4)


def test_initial_soc():
    m = constant_model(2.0, 4.0)
    assert initial_soc(m, last_on=0.0, last_off=1.0, now=1.0, theta_mean=0.0) == 1.0
    assert initial_soc(m, last_on=1.0, last_off=0.0, now=1.0, theta_mean=0.0) == 0.0
    assert initial_soc(m, last_on=0.0, last_off=1.0, now=1.25, theta_mean=0.0) == pytest.approx(0.5)
    assert initial_soc(m, last_on=0.0, last_off=1.0, now=9.0, theta_mean=0.0) == 0.0
    on, off = T0, T0 + timedelta(hours=1)
    assert initial_soc(m, on, off, off + timedelta(minutes=15), 0.0) == pytest.approx(0.5)


def test_polytope_three_steps():
    poly = build_polytope(constant_model(2.0, 4.0), FlexHorizon.constant(3, 0.25, 0.0), 0.5)
    np.testing.assert_allclose(poly.B, np.tril(np.ones((3, 3))))
    # row i holds the state after step i, so its loss includes step i
    np.testing.assert_allclose(poly.d, [0.5, 1.0, 1.5])
    assert poly.A.shape == (6, 3) and poly.b.shape == (6,)


def test_polytope_single_step():
    m = constant_model(2.0, 4.0, p_r=3.0)
    poly = build_polytope(m, FlexHorizon.constant(1, 0.25, 0.0), 0.3)
    for p in (0.0, 3.0):
        x1 = 0.3 + 0.25 * 4.0 * p / 3.0 - 0.25 * 2.0
        assert bool(is_feasible(poly, [p])) == (0 <= x1 <= 1)


def test_polytope_columns_follow_forecast():
    h = FlexHorizon(4, 0.25, [-5.0, 0.0, 5.0, 10.0])
    m = BuildingModel("v", 2.0, REF_LOSS, REF_CHARGE)
    poly = build_polytope(m, h, 0.5)
    for j in range(4):
        np.testing.assert_allclose(poly.B[j:, j], 0.25 * REF_CHARGE(h.theta_hat[j]))
        assert np.all(poly.B[:j, j] == 0)
    assert np.all(np.diff(poly.d) >= 0)


def test_polytope_preconditions():
    h = FlexHorizon.constant(3, 0.25, 0.0)
    with pytest.raises(ValueError):
        build_polytope(constant_model(2.0, 4.0), h, 1.5)
    with pytest.raises(ValueError):
        build_polytope(constant_model(2.0, 0.0), h, 0.5)
    with pytest.raises(ValueError):
        FlexHorizon(3, 0.25, [0.0, 1.0])


def test_feasibility_examples():
    m = constant_model(2.0, 4.0)
    h = FlexHorizon.constant(4, 0.1, 0.0)
    assert is_feasible(build_polytope(m, h, 0.9), np.zeros(4))
    rep = is_feasible(build_polytope(m, h, 0.9), [0, 1.0, 0, 0])
    assert not rep and "power level" in rep.reason
    rep = is_feasible(build_polytope(m, h, 1.0), np.full(4, 2.0))
    assert not rep and rep.reason.startswith("upper") and rep.row == 0


@given(st.integers(0, 2 ** 32 - 1))
def test_matrix_form_matches_recursion(seed):
    rng = np.random.default_rng(seed)
    m, h, x0 = random_instance(rng, 8)
    poly = build_polytope(m, h, x0)
    for u in all_binary(h.N):
        x = predict_soc(m, h, x0, u)
        assert np.max(np.abs(x0 + poly.B @ u - poly.d - x)) <= 1e-12
        inside = bool(np.all((x >= -1e-9) & (x <= 1 + 1e-9)))
        assert bool(is_feasible(poly, m.p_r * u)) == inside


@given(st.integers(0, 2 ** 32 - 1), st.floats(0, 1))
def test_larger_x0_never_shrinks_feasible_set(seed, bump):
    rng = np.random.default_rng(seed)
    m, h, x0 = random_instance(rng, 10)
    # a lossless unit can only gain SOC, so this holds once losses dominate
    m = m if np.all(m.loss(h.theta_hat) > 0) else constant_model(1.0, 3.0)
    x1 = x0 + bump * (1 - x0)
    U = all_binary(h.N)
    lo = [bool(is_feasible(build_polytope(m, h, x0), m.p_r * u)) for u in U]
    hi = [bool(is_feasible(build_polytope(m, h, x1), m.p_r * u)) for u in U]
    # an all-on trajectory feasible at x0 may overshoot at x1; monotonicity is
    # about the deferral side, so compare the trajectories that never touch 1
    x_hi = x1 + np.cumsum(U * (h.t_s * m.charge(h.theta_hat)) - h.t_s * m.loss(h.theta_hat), axis=1)
    safe = np.all(x_hi <= 1 + 1e-9, axis=1)
    assert all(h_ for l_, h_, s in zip(lo, hi, safe) if l_ and s)


@given(st.integers(0, 2 ** 32 - 1), st.floats(0.1, 10))
def test_power_scaling_keeps_feasibility(seed, c):
    rng = np.random.default_rng(seed)
    m, h, x0 = random_instance(rng, 6)
    scaled = BuildingModel(m.building_id, m.p_r * c, m.loss, m.charge, m.f)
    a, b = build_polytope(m, h, x0), build_polytope(scaled, h, x0)
    for u in all_binary(h.N):
        assert bool(is_feasible(a, m.p_r * u)) == bool(is_feasible(b, scaled.p_r * u))


@given(st.integers(0, 2 ** 32 - 1))
def test_envelope_matches_exhaustive_search(seed):
    rng = np.random.default_rng(seed)
    m, h, x0 = random_instance(rng)
    poly = build_polytope(m, h, x0)
    ref = brute_force_envelope(x0, h.t_s * m.charge(h.theta_hat), h.t_s * m.loss(h.theta_hat))
    if ref is None:
        with pytest.raises(InfeasibleStateError):
            energy_envelope(poly)
        return
    env = energy_envelope(poly)
    step = h.t_s * m.p_r
    np.testing.assert_allclose(env.e_min_cum, ref[0] * step, atol=1e-12)
    np.testing.assert_allclose(env.e_max_cum, ref[1] * step, atol=1e-12)
    assert np.all(env.e_min_cum <= env.e_max_cum)
    assert np.all(np.diff(env.e_min_cum) >= 0) and np.all(np.diff(env.e_max_cum) >= 0)


def test_milp_fallback_agrees_with_dp():
    rng = np.random.default_rng(7)
    for _ in range(15):
        m, h, x0 = random_instance(rng, 10)
        poly = build_polytope(m, h, x0)
        try:
            dp = _envelope_dp(poly, 10 ** 6)
        except InfeasibleStateError:
            with pytest.raises(InfeasibleStateError):
                _envelope_milp(poly)
            continue
        lo, hi = _envelope_milp(poly)
        np.testing.assert_array_equal(lo, dp[0])
        np.testing.assert_array_equal(hi, dp[1])
    # a tiny state cap forces the MILP path through the public function
    m, h, _ = random_instance(np.random.default_rng(3), 10)
    poly = build_polytope(m, h, 0.5)
    try:
        exact = energy_envelope(poly)
    except InfeasibleStateError:
        return
    np.testing.assert_allclose(energy_envelope(poly, max_states=1).e_max_cum, exact.e_max_cum)


def test_deferral_four_steps():
    poly = build_polytope(constant_model(2.0, 6.0), FlexHorizon.constant(12, 1 / 12, 0.0), 0.75)
    assert max_deferral(poly) == 4
    env = energy_envelope(poly)
    assert np.all(env.e_min_cum[:4] == 0) and env.e_min_cum[4] > 0


def test_deferral_edge_cases():
    h = FlexHorizon.constant(6, 0.25, 0.0)
    assert max_deferral(build_polytope(constant_model(2.0, 6.0), h, 0.0)) == 0
    assert max_deferral(build_polytope(constant_model(0.0, 6.0), h, 0.3)) == 6
    env = energy_envelope(build_polytope(constant_model(2.0, 6.0), h, 0.0))
    assert env.e_min_cum[0] == env.e_max_cum[0] > 0


@given(st.floats(0, 1), st.floats(0.1, 4), st.sampled_from([1 / 12, 0.25]))
def test_deferral_constant_rates(x0, r_l, t_s):
    poly = build_polytope(constant_model(r_l, r_l + 3), FlexHorizon.constant(40, t_s, 0.0), x0)
    ratio = x0 / (t_s * r_l)
    if abs(ratio - round(ratio)) > 1e-6:  # exact multiples sit on the tolerance edge
        assert max_deferral(poly) == min(40, int(np.floor(ratio)))


def test_infeasible_when_step_too_coarse():
    poly = build_polytope(constant_model(3.0, 10.0), FlexHorizon.constant(4, 0.5, 0.0), 0.5)
    with pytest.raises(InfeasibleStateError):
        energy_envelope(poly)


def test_envelope_csv(tmp_path):
    poly = build_polytope(constant_model(2.0, 6.0), FlexHorizon.constant(3, 0.25, 0.0), 0.5)
    write_envelope_csv(tmp_path / "e.csv", energy_envelope(poly), T0, 0.25)
    lines = (tmp_path / "e.csv").read_text().splitlines()
    assert lines[0] == "step,t_iso,e_min_kwh,e_max_kwh"
    assert lines[1].startswith("1,2024-01-01T00:15:00Z,")
    assert len(lines) == 4
