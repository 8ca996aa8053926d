import math

import numpy as np
import pytest

from mfg_lane.core import ControlInput, StateBounds, VehicleState, style_catalog
from mfg_lane.grid import DensityTensor, GridSpec
from mfg_lane.control import (ControlGrid, CostWeights, FieldProvider, ReferenceProfile, cost_components,
                              extract_batch, extract_policy, hjb_backward_solve, q_value, terminal_cost)

B = StateBounds()
G = GridSpec.from_bounds(B, 40, 9)
EGO = style_catalog("ego")
UG = ControlGrid.for_style(EGO, B)
W = CostWeights.for_style(EGO)
REF = ReferenceProfile.constant(100.0, 25.0, -3.75)


def _brute(V, fields, n, s, d, v):
    """Exhaustive enumeration in tie-break order: strictly smaller value replaces the incumbent."""
    best, arg = math.inf, -1
    for i in UG.order():
        q = q_value(V, fields, n, s, d, v, UG.control(int(i)))
        if q < best:
            best, arg = q, int(i)
    return arg, best


def test_weights_nonnegative():
    with pytest.raises(ValueError):
        CostWeights(w_jerk=-1.0)


def test_reference_point_costs_zero():
    ref = ReferenceProfile.constant(0.0, 25.0, 0.0)
    x = VehicleState(0.0, 25.0)
    u = ControlInput()
    parts = cost_components(x, u, u, None, EGO, ref, W)
    assert parts == (0.0, 0.0, 0.0, 0.0, 0.0)


def test_empty_field_transition_multiplier_is_one():
    ref = ReferenceProfile.constant(0.0, 25.0, 0.0)
    x = VehicleState(0.0, 25.0)
    u = ControlInput(0.0, 0.0, 1)
    lane = cost_components(x, u, u, DensityTensor.empty(G), EGO, ref, W)[4]
    assert lane == pytest.approx(W.w_transition * math.exp(0.0))


def test_terminal_cost_cases():
    ref = ReferenceProfile.constant(0.0, 25.0, -3.75)
    w = CostWeights(Q=(0.0, 0.0, 0.0, 1.0, 0.0, 0.0))
    assert terminal_cost(VehicleState(50.0, 25.0, d=-3.75), EGO, ref, w, 2.0) == 0.0
    assert terminal_cost(VehicleState(50.0, 25.0, d=0.0), EGO, ref, w, 2.0) == pytest.approx(14.0625)


def test_zero_cost_zero_value():
    zero = CostWeights(Q=(0,) * 6, R=(0,) * 3, S=(0, 0), w_jerk=0, w_lateral=0, w_aggr=0, w_centripetal=0,
                       w_fuel=0, w_mandatory=0, w_transition=0, w_smoothness=0)
    V = hjb_backward_solve(None, EGO, REF, zero, G, UG, 0.1, n_steps=4, bounds=B)
    assert np.all(V.V == 0.0)
    # every control ties, the tie-break returns the zero control
    u = extract_policy(V, None, 0, (float(G.s_centers[10]), 0.0, 20.0))
    assert u == ControlInput(0.0, 0.0, 0)


def test_one_step_matches_brute_force():
    V = hjb_backward_solve(None, EGO, REF, W, G, UG, 0.1, n_steps=1, bounds=B)
    rng = np.random.default_rng(11)
    vn = V.v_nodes
    for _ in range(40):
        k, j, b = rng.integers(G.K), rng.integers(G.J), rng.integers(len(vn))
        _, best = _brute(V, None, 0, G.s_centers[k], G.d_centers[j], vn[b])
        assert V.V[0, k, j, b] == pytest.approx(best, rel=1e-12, abs=1e-12)


def test_policy_matches_enumeration_at_100_cells():
    V = hjb_backward_solve(None, EGO, REF, W, G, UG, 0.1, n_steps=6, bounds=B)
    rng = np.random.default_rng(5)
    S = rng.uniform(G.s0 + G.ds, G.s_end - G.ds, 100)
    D = rng.uniform(-5.0, 5.0, 100)
    Vv = rng.uniform(0.0, B.v_max, 100)
    n = 2
    idx, val = extract_batch(V, None, n, S, D, Vv)
    for i in range(100):
        arg, best = _brute(V, None, n, S[i], D[i], Vv[i])
        assert idx[i] == arg
        assert val[i] == pytest.approx(best, rel=1e-12, abs=1e-12)
        assert extract_policy(V, None, n, (S[i], D[i], Vv[i])) == UG.control(arg)


def test_policy_with_density_field():
    r = np.zeros((G.J, G.K, 6))
    r[7, 12, 4] = 1.0
    seq = [DensityTensor(r, G)] * 4
    speeds = [np.full(6, 20.0)] * 4
    fp = FieldProvider(seq, speeds, G, B, targets=[0])
    V = hjb_backward_solve(None, EGO, REF, W, G, UG, 0.1, fields=fp, n_steps=3, bounds=B)
    s, d, v = float(G.s_centers[10]), float(G.d_centers[6]), 22.0
    arg, _ = _brute(V, fp, 1, s, d, v)
    assert extract_policy(V, fp, 1, (s, d, v)) == UG.control(arg)


def test_cost_scaling_leaves_policy_unchanged():
    V1 = hjb_backward_solve(None, EGO, REF, W, G, UG, 0.1, n_steps=5, bounds=B)
    V2 = hjb_backward_solve(None, EGO, REF, W.scaled(3.0), G, UG, 0.1, n_steps=5, bounds=B)
    np.testing.assert_allclose(V2.V, 3.0 * V1.V, rtol=1e-10, atol=1e-9)
    rng = np.random.default_rng(2)
    S, D, Vv = rng.uniform(100, 300, 30), rng.uniform(-4, 4, 30), rng.uniform(5, 30, 30)
    assert np.array_equal(extract_batch(V1, None, 0, S, D, Vv)[0], extract_batch(V2, None, 0, S, D, Vv)[0])


def test_control_grid_contains_zero_and_bounds():
    assert 0.0 in UG.ua and UG.ua.min() == EGO.a_min and UG.ua.max() == EGO.a_max
    assert UG.control(int(UG.order()[0])) == ControlInput(0.0, 0.0, 0)
    with pytest.raises(ValueError):
        ControlGrid.for_style(EGO, B, n_a=4)


def test_policy_step_out_of_range():
    V = hjb_backward_solve(None, EGO, REF, W, G, UG, 0.1, n_steps=2, bounds=B)
    with pytest.raises(ValueError):
        extract_policy(V, None, 2, (100.0, 0.0, 20.0))


def test_horizon_too_short():
    with pytest.raises(ValueError):
        hjb_backward_solve(None, EGO, REF, W, G, UG, 0.1, n_steps=0, bounds=B)
