"""End-to-end acceptance checks; each prints one PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -s`` to see the lines inline, or
``python tests/test_acceptance.py``. The lines are also repeated in the pytest
terminal summary.
"""

import json
import math
import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from mfg_lane.cli import main
from mfg_lane.core import StateBounds
from mfg_lane.equilibrium import (SMALL_GRID, SolverParams, nash_gap, perturbation_test, run_equilibrium,
                                  two_vehicle_fixture)
from mfg_lane.grid import DensityTensor, GridSpec, NoiseModel, VelocityFieldTensor, fp_step
from mfg_lane.ngsim import (FRONT_ID, REAR_ID, SUBJECT_ID, NgsimRecord, default_replay_scenario, fixture_path,
                            parse_ngsim_csv, resample_align, resample_all, write_ngsim_csv)
from mfg_lane.safety import SafetyParams
from mfg_lane.simulate import simulate

RESULTS = {}
P = SafetyParams()
SMALL = SolverParams(warm_start=0, **SMALL_GRID)


def report(num, title, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {num}: {title} ({detail})"
    RESULTS[num] = line
    print(line)
    return ok


def _run(args, out):
    t = time.perf_counter()
    code = main([*args, "--out", str(out), "--quiet"])
    return code, time.perf_counter() - t


def _metrics(out):
    return json.loads((Path(out) / "metrics.json").read_text())


@pytest.fixture(scope="module")
def pair_eq():
    return run_equilibrium(two_vehicle_fixture(), SMALL)


def test_combos_collision_free(tmp_path):
    rows, ok = [], True
    for i in range(1, 7):
        code, secs = _run(["run", f"combo{i}"], tmp_path / f"combo{i}")
        m = _metrics(tmp_path / f"combo{i}")
        good = (code == 0 and m["collision_count"] == 0 and abs(m["ego_final_d"] + 3.75) <= 0.2 and secs <= 60.0)
        ok &= good
        rows.append(f"combo{i} coll={m['collision_count']} d_end={m['ego_final_d']:.2f} {secs:.0f}s")
    assert report(1, "combo scenarios collision-free", ok, "; ".join(rows))


def test_scenario7_shape(tmp_path):
    code, _ = _run(["run", "scenario7", "--seed", "0"], tmp_path)
    m = _metrics(tmp_path)
    d = np.array(m["min_distance"])
    tail = d[-int(round(10.0 / 0.1)):]
    ok = (code == 0 and d.min() < P.d_safe_threshold and d.min() > P.collision_dist and tail.mean() > 15.0
          and m["collision_count"] == 0)
    assert report(2, "scenario7 dips then recovers", ok,
                  f"min={d.min():.2f} m, trailing mean={tail.mean():.2f} m, collisions={m['collision_count']}")


def test_scenario8_hazard(tmp_path):
    code, secs = _run(["run", "scenario8"], tmp_path)
    m = _metrics(tmp_path)
    d = np.array(m["min_distance"][: int(round(45.0 / 0.1)) + 1])
    ok = code == 0 and m["danger_count"] > 0 and bool(np.all(d > 0)) and m["collision_count"] == 0
    assert report(3, "scenario8 hazard tolerated", ok,
                  f"danger steps={m['danger_count']}, min={d.min():.2f} m, collisions={m['collision_count']}, "
                  f"{secs:.0f}s")


def test_mass_conservation():
    g = GridSpec.from_bounds(StateBounds(), 40, 9)
    rng = np.random.default_rng(1)
    rho = DensityTensor(rng.random((g.J, g.K, 6)), g)
    m0 = rho.mass()
    vel = VelocityFieldTensor(rng.uniform(-0.5, 0.5, rho.values.shape) * g.ds / 0.1,
                              rng.uniform(-0.5, 0.5, rho.values.shape) * g.dd / 0.1)
    noise = NoiseModel.for_styles()
    worst, low = 0.0, math.inf
    for _ in range(1000):
        rho = fp_step(rho, vel, noise, 0.1, "reflecting")
        worst = max(worst, abs(rho.mass() + float(np.sum(rho.leak)) - m0))
        low = min(low, float(rho.values.min()))
    assert report(4, "mass conservation over 1000 steps", worst < 1e-6 and low >= 0.0,
                  f"max error {worst:.1e}, min density {low:.1e}")


def test_contraction(pair_eq):
    r = pair_eq.residuals
    tail = r[-5:]
    ok = (pair_eq.converged and pair_eq.iterations <= 30 and pair_eq.contraction < 1.0
          and all(a >= b for a, b in zip(tail, tail[1:])))
    assert report(5, "empirical contraction", ok,
                  f"ratio {pair_eq.contraction:.3f}, {pair_eq.iterations} iterations, final {r[-1]:.1e}")


def test_nash_gap(pair_eq):
    gap, rel = nash_gap(pair_eq)
    assert report(6, "best-response gap", rel < 0.01, f"absolute {gap:.2e}, relative {rel:.2e}")


def test_robustness_trend(pair_eq):
    deltas = (0.01, 0.02, 0.04)
    rows = perturbation_test(two_vehicle_fixture(), deltas, SMALL, base=pair_eq)
    d = [r["distance"] for r in rows]
    ratios = [x / dl for x, dl in zip(d, deltas)]
    ok = all(a <= b for a, b in zip(d, d[1:])) and max(ratios) / min(ratios) <= 3.0
    assert report(7, "perturbation trend", ok,
                  "distances " + ", ".join(f"{x:.4f}" for x in d) + f"; spread {max(ratios) / min(ratios):.2f}")


def test_oracle_equivalences():
    import test_control as tc
    import test_planner as tp
    from mfg_lane.control import extract_batch, hjb_backward_solve
    from mfg_lane.planner import evaluate_path

    # (a) path evaluation against the hand quadrature
    path, other, rho_seq, speeds = tp._fixture()
    ev = evaluate_path(path, rho_seq, [other], tp.EGO, others_styles=[tp.NORMAL], slab_speeds=speeds)
    total, _ = tp._oracle()
    err_a = abs(ev.total - total) / abs(total)

    # (b) policy extraction against enumeration
    V = hjb_backward_solve(None, tc.EGO, tc.REF, tc.W, tc.G, tc.UG, 0.1, n_steps=6, bounds=tc.B)
    rng = np.random.default_rng(5)
    S = rng.uniform(tc.G.s0 + tc.G.ds, tc.G.s_end - tc.G.ds, 100)
    D, Vv = rng.uniform(-5.0, 5.0, 100), rng.uniform(0.0, tc.B.v_max, 100)
    idx, _ = extract_batch(V, None, 2, S, D, Vv)
    miss_b = sum(int(idx[i] != tc._brute(V, None, 2, S[i], D[i], Vv[i])[0]) for i in range(100))

    # (c) one backward step against brute force
    V1 = hjb_backward_solve(None, tc.EGO, tc.REF, tc.W, tc.G, tc.UG, 0.1, n_steps=1, bounds=tc.B)
    err_c, miss_c = 0.0, 0
    vn = V1.v_nodes
    for k in range(0, tc.G.K, 4):
        for j in range(tc.G.J):
            for b in range(0, len(vn), 3):
                s, dd, v = tc.G.s_centers[k], tc.G.d_centers[j], vn[b]
                arg, best = tc._brute(V1, None, 0, s, dd, v)
                err_c = max(err_c, abs(V1.V[0, k, j, b] - best) / max(1.0, abs(best)))
                miss_c += int(extract_batch(V1, None, 0, [s], [dd], [v])[0][0] != arg)
    ok = err_a < 1e-9 and miss_b == 0 and miss_c == 0 and err_c < 1e-12
    assert report(8, "oracle equivalences", ok,
                  f"path rel err {err_a:.1e}; policy mismatches {miss_b}/100; one-step argmin mismatches "
                  f"{miss_c}, value rel err {err_c:.1e}")


def test_ngsim_pipeline(tmp_path):
    recs = parse_ngsim_csv(fixture_path())
    again = parse_ngsim_csv(write_ngsim_csv(recs, tmp_path / "rt.csv"))
    lossless = list(again) == list(recs) and not recs.errors

    segs = resample_all(parse_ngsim_csv(fixture_path(), imperial=True))
    span = segs[SUBJECT_ID].span

    frames = np.arange(50)
    ys = 12.0 + 17.3 * frames * 0.1
    lin = resample_align([NgsimRecord(9, int(f), 1.8288, float(y), 17.3, 0.0, 1) for f, y in zip(frames, ys)],
                         0.05)
    t = np.arange(len(lin.states)) * 0.05
    lin_err = float(np.max(np.abs(np.array([x.s for x in lin.states]) - (12.0 + 17.3 * t))))

    sc = default_replay_scenario(horizon=5.0)
    eq = run_equilibrium(sc, SMALL)
    log, _ = simulate(sc, eq)
    exact = all(log.states[v] == sc.replay[v].states[:log.n_points] for v in (FRONT_ID, REAR_ID))

    ok = lossless and abs(span - 94.6) < 1e-9 and lin_err < 1e-12 and exact
    assert report(9, "trajectory ingestion", ok,
                  f"round trip {'lossless' if lossless else 'lossy'}, span {span:.1f} s, "
                  f"linearity err {lin_err:.1e}, replay {'exact' if exact else 'inexact'}")


def test_determinism(tmp_path):
    _run(["run", "scenario7", "--seed", "7"], tmp_path / "a")
    _run(["run", "scenario7", "--seed", "7"], tmp_path / "b")
    a = (tmp_path / "a" / "manifest.json").read_bytes()
    b = (tmp_path / "b" / "manifest.json").read_bytes()
    assert report(10, "repeat runs identical", a == b, f"manifest {len(a)} bytes, identical={a == b}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-s"]))
