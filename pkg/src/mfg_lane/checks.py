"""Fast invariant suite behind the `check` subcommand (no pytest required)."""

from __future__ import annotations

import math
import tempfile
from pathlib import Path

import numpy as np

from .core import StateBounds, VehicleState, build_scenario
from .grid import DensityTensor, GridSpec, NoiseModel, VelocityFieldTensor, fp_step
from .planner import PathParams, lateral_profile, transition_fn
from .safety import SafetyParams, smooth_risk, ttc


def _mass_conservation():
    g = GridSpec.from_bounds(StateBounds(), 40, 9)
    rng = np.random.default_rng(0)
    rho = DensityTensor(rng.random((g.J, g.K, 6)), g)
    m0 = rho.mass()
    vel = VelocityFieldTensor(rng.uniform(-1, 1, rho.values.shape) * g.ds / 0.1 * 0.5,
                              rng.uniform(-1, 1, rho.values.shape) * g.dd / 0.1 * 0.5)
    noise = NoiseModel.for_styles()
    for _ in range(200):
        rho = fp_step(rho, vel, noise, 0.1, "reflecting")
    err = abs(rho.mass() + float(np.sum(rho.leak)) - m0)
    return err < 1e-6 and rho.values.min() >= 0, f"mass error {err:.2e}"


def _transition_endpoints():
    worst = 0.0
    for beta in (0.3, 1.0, 2.5):
        for gam in (0.0, 0.1):
            for n in (1, 2, 3):
                worst = max(worst, abs(transition_fn(0.0, beta, gam, n)), abs(transition_fn(1.0, beta, gam, n) - 1))
    return worst < 1e-12, f"max endpoint error {worst:.1e}"


def _lateral_continuity():
    p = PathParams(0.0, 100.0, 0.0, -3.75, 25.0, 20.0, 80.0, beta=1.7, gamma=0.1, n_ripple=2, s_mid=50.0)
    eps = 1e-9
    jump = max(abs(lateral_profile(20.0 - eps, p) - lateral_profile(20.0 + eps, p)),
               abs(lateral_profile(80.0 - eps, p) - lateral_profile(80.0 + eps, p)))
    return jump < 1e-6, f"max branch jump {jump:.1e}"


def _ttc_semantics():
    a = VehicleState(0.0, 20.0)
    b = VehicleState(30.0, 10.0)
    t = ttc(a, b)
    ok = abs(t - 3.0) < 1e-12 and math.isinf(ttc(b, VehicleState(0.0, 5.0)))
    return ok, f"ttc={t}"


def _smooth_risk_bands():
    p = SafetyParams()
    vals = [smooth_risk(d, 4.0, p.xi) for d in (1.0, 2.0, 3.0, 4.0, 5.0)]
    ok = vals[0] == 1.0 and vals[1] == 1.0 and 0 < vals[2] < 1 and vals[3] == 0.0 and vals[4] == 0.0
    return ok, f"values {vals}"


def _ngsim_round_trip():
    from .ngsim import fixture_path, parse_ngsim_csv, write_ngsim_csv
    recs = parse_ngsim_csv(fixture_path(), imperial=False)
    with tempfile.TemporaryDirectory() as d:
        p = write_ngsim_csv(recs, Path(d) / "rt.csv")
        again = parse_ngsim_csv(p)
    return list(recs) == list(again) and not recs.errors, f"{len(recs)} records"


def _scenarios_build():
    names = [f"combo{i}" for i in range(1, 7)] + ["scenario7", "scenario8", "ngsim_replay"]
    counts = [len(build_scenario(n).vehicles) for n in names]
    return counts[6] == 18 and counts[7] == 18 and counts[8] == 3, f"vehicle counts {counts}"


CHECKS = [
    ("mass_conservation", _mass_conservation),
    ("transition_endpoints", _transition_endpoints),
    ("lateral_continuity", _lateral_continuity),
    ("ttc_semantics", _ttc_semantics),
    ("smooth_risk_bands", _smooth_risk_bands),
    ("ngsim_round_trip", _ngsim_round_trip),
    ("scenarios_build", _scenarios_build),
]


def run_checks():
    out = []
    for name, fn in CHECKS:
        try:
            ok, detail = fn()
        except Exception as e:  # a crashing check is a failing check
            ok, detail = False, f"{type(e).__name__}: {e}"
        out.append((name, bool(ok), detail))
    return out
