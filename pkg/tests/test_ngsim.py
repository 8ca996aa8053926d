import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mfg_lane.core import ScenarioConfig, StyleClass, VehicleSpec
from mfg_lane.equilibrium import SMALL_GRID, SolverParams, run_equilibrium
from mfg_lane.ngsim import (FRONT_ID, FT, REAR_ID, SUBJECT_ID, NgsimRecord, attach_replay, default_replay_scenario,
                            fixture_path, parse_ngsim_csv, resample_align, resample_all, summarize_gaps,
                            synthetic_fixture_records, write_ngsim_csv)
from mfg_lane.simulate import simulate

HEADER = "Vehicle_ID,Frame_ID,Local_X,Local_Y,v_Vel,v_Acc,Lane_ID\n"


def _write(tmp_path, body, header=HEADER):
    p = tmp_path / "t.csv"
    p.write_text(header + body)
    return p


def test_three_rows(tmp_path):
    p = _write(tmp_path, "5,1,6.0,100.0,10.0,0.0,2\n5,2,6.0,101.0,10.0,0.0,2\n5,3,6.0,102.0,10.0,0.0,2\n")
    recs = parse_ngsim_csv(p)
    assert len(recs) == 3 and recs.errors == []
    assert recs[1] == NgsimRecord(5, 2, 6.0, 101.0, 10.0, 0.0, 2)


def test_bad_rows_reported(tmp_path):
    p = _write(tmp_path, "5,1,6.0,100.0,10.0,0.0,2\n5,2,6.0,101.0,-3.0,0.0,2\n5,3,6.0,abc,10.0,0.0,2\n")
    recs = parse_ngsim_csv(p)
    assert len(recs) == 1
    assert [ln for ln, _ in recs.errors] == [3, 4]


def test_missing_column_and_empty(tmp_path):
    with pytest.raises(ValueError, match="Local_Y"):
        parse_ngsim_csv(_write(tmp_path, "5,1,6.0,10.0,0.0,2\n", "Vehicle_ID,Frame_ID,Local_X,v_Vel,v_Acc,Lane_ID\n"))
    with pytest.raises(ValueError):
        parse_ngsim_csv(_write(tmp_path, "", ""))
    with pytest.raises(ValueError):
        parse_ngsim_csv(_write(tmp_path, ""))


def test_imperial_conversion(tmp_path):
    p = _write(tmp_path, "5,1,0.0,0.0,10.0,0.0,2\n")
    r = parse_ngsim_csv(p, imperial=True)[0]
    assert r.v_vel == pytest.approx(3.048, rel=1e-15)
    assert r.lane_id == 2 and r.frame_id == 1


def test_custom_header_map(tmp_path):
    p = _write(tmp_path, "5,1,6.0,100.0,10.0,0.0,2\n", "id,Frame_ID,Local_X,Local_Y,v_Vel,v_Acc,Lane_ID\n")
    assert parse_ngsim_csv(p, header_map={"vehicle_id": "id"})[0].vehicle_id == 5


def test_fixture_round_trip(tmp_path):
    recs = parse_ngsim_csv(fixture_path())
    assert recs.errors == []
    out = write_ngsim_csv(recs, tmp_path / "rt.csv")
    again = parse_ngsim_csv(out)
    assert list(again) == list(recs)
    assert out.read_bytes() == write_ngsim_csv(again, tmp_path / "rt2.csv").read_bytes()


def test_fixture_matches_generator():
    assert list(parse_ngsim_csv(fixture_path())) == synthetic_fixture_records()


def test_imperial_round_trip(tmp_path):
    recs = synthetic_fixture_records()[:50]
    back = parse_ngsim_csv(write_ngsim_csv(recs, tmp_path / "m.csv", imperial=True), imperial=True)
    for a, b in zip(recs, back):
        assert a.local_y == pytest.approx(b.local_y, rel=1e-14)


def test_subject_span():
    segs = resample_all(parse_ngsim_csv(fixture_path(), imperial=True))
    seg = segs[SUBJECT_ID]
    assert len(seg.states) == 946
    assert seg.span == pytest.approx(94.6, abs=1e-9)


def _recs(frames, ys, vid=9):
    return [NgsimRecord(vid, int(f), 1.8288, float(y), 10.0, 0.0, 1) for f, y in zip(frames, ys)]


def test_identity_resample():
    ys = [0.0, 1.3, 2.1, 4.0, 4.5]
    seg = resample_align(_recs(range(10, 15), ys), 0.1)
    assert [x.s for x in seg.states] == ys
    assert seg.start_time == pytest.approx(1.0)


@settings(max_examples=30, deadline=None)
@given(st.floats(-50, 50), st.floats(0, 40), st.integers(3, 30))
def test_half_step_linearity(y0, v, n):
    frames = np.arange(n)
    ys = y0 + v * frames * 0.1
    seg = resample_align(_recs(frames, ys), 0.05)
    t = np.arange(len(seg.states)) * 0.05
    np.testing.assert_allclose([x.s for x in seg.states], y0 + v * t, rtol=0, atol=1e-12 * max(1.0, abs(y0) + v * n))
    assert len(seg.states) == 2 * n - 1


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0.0, 3.0), min_size=2, max_size=40), st.sampled_from([0.03, 0.1, 0.25]))
def test_resample_keeps_displacement(steps, dt):
    ys = np.concatenate([[0.0], np.cumsum(steps)])
    seg = resample_align(_recs(range(len(ys)), ys), dt)
    moved = seg.states[-1].s - seg.states[0].s
    v_max = max(steps) / 0.1
    assert abs(moved - (ys[-1] - ys[0])) <= dt * v_max + 1e-9


def test_duplicate_frames_rejected():
    with pytest.raises(ValueError, match="duplicate"):
        resample_align(_recs([1, 2, 2, 3], [0, 1, 2, 3]))


def test_summarize_gaps_hand_oracle():
    segs = resample_all(synthetic_fixture_records())
    g = summarize_gaps(segs)
    sub, fr, re = segs[SUBJECT_ID], segs[FRONT_ID], segs[REAR_ID]
    # the follower covers frames 40..935 of the subject's clock
    k, n = 40, len(re.states)
    front = [fr.states[i].s - sub.states[i].s for i in range(k, k + n)]
    rear = [sub.states[i].s - re.states[i - k].s for i in range(k, k + n)]
    assert g["n"] == len(front) == 896
    assert g["front_mean"] == pytest.approx(sum(front) / len(front), rel=1e-9)
    assert g["rear_mean"] == pytest.approx(sum(rear) / len(rear), rel=1e-9)


def _base():
    return ScenarioConfig("b", [VehicleSpec(1, StyleClass.EGO, 1, 0.0, 20.0)], 1, 2, horizon=3.0, ego_s=60.0)


def test_attach_replay_roles():
    segs = resample_all(parse_ngsim_csv(fixture_path(), imperial=True))
    sc = attach_replay(_base(), segs, {"front": FRONT_ID, "rear": REAR_ID})
    assert set(sc.replay) == {FRONT_ID, REAR_ID}
    t0 = segs[REAR_ID].start_time
    assert sc.replay[FRONT_ID].start_time == pytest.approx(t0)
    with pytest.raises(ValueError, match="rear"):
        attach_replay(_base(), segs, {"front": FRONT_ID})
    with pytest.raises(ValueError):
        attach_replay(_base(), segs, {"front": FRONT_ID, "rear": 1234})


def test_replay_exactness():
    sc = default_replay_scenario(horizon=5.0)
    eq = run_equilibrium(sc, SolverParams(warm_start=0, **SMALL_GRID))
    log, m = simulate(sc, eq)
    for vid, seg in sc.replay.items():
        n = log.n_points
        assert log.states[vid] == seg.states[:n]
    assert m.collision_count == 0
    assert all(u is None for vid in sc.replay for u in log.controls[vid])
    assert sc.vehicle(sc.ego_id).lane != sc.target_lane
