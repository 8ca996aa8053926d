import json
import math

import pytest
from hypothesis import given, strategies as st

from mfg_lane.core import (STYLE_ORDER, ControlInput, DrivingStyle, LaneGeometry, ScenarioConfig, StateBounds,
                           StyleClass, VehicleSpec, VehicleState, build_scenario, in_style_box, load_scenario,
                           parse_style_class, saturate_control, save_scenario, style_catalog)

TABLE = {
    "ego": (25, 2.5, -4.0, 1.4, 1.2, 0.7, 0.8),
    "super_aggressive": (35, 4.0, -6.5, 0.4, 0.3, 0.95, 0.4),
    "aggressive": (32, 3.5, -5.5, 0.6, 0.4, 0.85, 0.5),
    "conservative": (16, 1.0, -2.5, 2.8, 2.5, 0.15, 1.5),
    "normal": (24, 2.2, -4.2, 1.3, 1.0, 0.5, 1.0),
    "competitive": (29, 3.2, -5.0, 0.7, 0.6, 0.8, 0.6),
}


@pytest.mark.parametrize("name", sorted(TABLE))
def test_catalog_matches_table(name):
    assert style_catalog(name).vector() == tuple(float(x) for x in TABLE[name])


def test_catalog_unknown_class():
    with pytest.raises(ValueError):
        style_catalog("reckless")


def test_style_aliases():
    assert parse_style_class("SA") is StyleClass.SUPER_AGGRESSIVE
    assert parse_style_class("super-aggressive") is StyleClass.SUPER_AGGRESSIVE


def test_style_validation():
    with pytest.raises(ValueError):
        DrivingStyle(StyleClass.NORMAL, 24, 2.2, 0.5, 1.3, 1.0, 0.5, 1.0)
    with pytest.raises(ValueError):
        DrivingStyle(StyleClass.NORMAL, 24, 2.2, -4.2, 1.3, 1.0, 1.0, 1.0)


def test_saturate_examples():
    b = StateBounds()
    assert saturate_control(ControlInput(5.0), style_catalog("super_aggressive"), b).u_a == 4.0
    assert saturate_control(ControlInput(-7.0), style_catalog("aggressive"), b).u_a == -5.5
    u = ControlInput(0.0, 0.0, 0)
    assert saturate_control(u, style_catalog("ego"), b) == u


@given(st.floats(-20, 20), st.floats(-20, 20), st.sampled_from([-1, 0, 1]), st.sampled_from(STYLE_ORDER))
def test_saturate_idempotent(ua, ud, delta, cls):
    th, b = style_catalog(cls), StateBounds()
    once = saturate_control(ControlInput(ua, ud, delta), th, b)
    assert saturate_control(once, th, b) == once
    assert th.a_min <= once.u_a <= th.a_max and abs(once.u_d) <= b.a_d_max and once.delta == delta


def test_control_delta_domain():
    with pytest.raises(ValueError):
        ControlInput(0.0, 0.0, 2)


@given(st.floats(-1e4, 1e4), st.floats(-100, 100), st.floats(-50, 50), st.floats(-20, 20),
       st.floats(-20, 20), st.floats(-20, 20))
def test_clamp_lands_in_bounds(s, v, a, d, vd, ad):
    b = StateBounds()
    x = VehicleState(s, v, a, d, vd, ad).clamp(b)
    assert 0 <= x.s <= b.s_max and 0 <= x.v_s <= b.v_max and abs(x.a_s) <= b.a_max
    assert abs(x.d) <= b.d_max and abs(x.v_d) <= b.v_d_max and abs(x.a_d) <= b.a_d_max


def test_bounds_positive():
    with pytest.raises(ValueError):
        StateBounds(v_max=0.0)


def test_geometry_ordering():
    with pytest.raises(ValueError):
        LaneGeometry(lane_centers=(0.0, -3.75))
    assert LaneGeometry().nearest_lane(-3.0) == 0


def test_scenario7_row():
    sc = build_scenario("scenario7")
    v = sc.vehicle(2)
    assert (v.style, v.lane, v.rel_s, v.speed) == (StyleClass.SUPER_AGGRESSIVE, 0, -25.0, 36.5)
    assert len(sc.vehicles) == 18


def test_scenario8_row():
    sc = build_scenario("scenario8")
    v = sc.vehicle(3)
    assert (v.style, v.lane, v.rel_s, v.speed) == (StyleClass.AGGRESSIVE, 1, -10.0, 20.8)
    assert sc.horizon == 45.0


@pytest.mark.parametrize("i", range(1, 7))
def test_combo_layout(i):
    sc = build_scenario(f"combo{i}")
    x = sc.initial_states()
    assert x[sc.ego_id].d == 0.0 and sc.target_d == -3.75
    front, rear = sc.vehicles[1], sc.vehicles[2]
    assert front.lane == sc.ego.lane and front.rel_s > 0
    assert rear.lane == sc.target_lane and rear.rel_s < 0


@pytest.mark.parametrize("name", ["combo1", "combo4", "scenario7", "scenario8"])
def test_vehicles_inside_style_boxes(name):
    sc = build_scenario(name)
    assert all(in_style_box(sc.style_of(v.style)) for v in sc.vehicles)


def test_unknown_scenario():
    with pytest.raises(ValueError):
        build_scenario("combo9")


def test_scenario_invariants():
    vs = [VehicleSpec(1, StyleClass.EGO, 1, 0.0, 25.0), VehicleSpec(1, StyleClass.NORMAL, 0, 5.0, 20.0)]
    with pytest.raises(ValueError):
        ScenarioConfig("dup", vs, 1, 0)
    with pytest.raises(ValueError):
        ScenarioConfig("noego", vs[:1], 2, 0)
    with pytest.raises(ValueError):
        ScenarioConfig("lane", vs[:1], 1, 3)


def test_scenario_json_round_trip(tmp_path):
    sc = build_scenario("scenario8")
    sc = sc.replace(styles={StyleClass.NORMAL: style_catalog("normal").scaled(1.02)})
    p = tmp_path / "sc.json"
    save_scenario(sc, p)
    back = load_scenario(p)
    assert back.to_dict() == sc.to_dict()
    assert json.loads(p.read_text())["geometry"]["curvature_radius"] is None
    assert math.isinf(back.geometry.curvature_radius)
