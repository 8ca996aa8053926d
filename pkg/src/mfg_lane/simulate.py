"""Closed-loop multi-vehicle simulation on top of a computed equilibrium."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels as kn
from .control import TAU_LAT, extract_batch
from .core import STYLE_INDEX, ControlInput, DrivingStyle, ScenarioConfig, VehicleState
from .equilibrium import EquilibriumState
from .planner import (CandidatePath, EvalWeights, NoSafePath, SamplingRanges, evaluate_path, generate_candidates,
                      passes_gate, done_index, predict_traffic, sample_path, select_path)
from .safety import SafetyParams, admissible_acceleration, merge_is_safe, ttc


@dataclass(frozen=True)
class SimParams:
    seed: int = 0
    accel_noise: float = 0.3        # m/s^2, scaled by (0.5 + alpha) per style
    replan_interval: float = 1.0    # s
    n_paths: int = 32
    done_tol: float = 0.2           # m, lane change counted complete inside this band
    envelope_margin: float = 1.0    # m added to the braking envelope
    plan_with_field: bool = True

    def __post_init__(self):
        if self.accel_noise < 0 or self.replan_interval <= 0 or self.n_paths < 1 or self.done_tol <= 0:
            raise ValueError("invalid simulation parameters")


def step_noise(seed: int, vid: int, step: int) -> float:
    """Standard normal draw keyed by (seed, vehicle, step); independent of call order."""
    key = (int(seed) & 0xFFFFFFFF) << 32 | (int(vid) & 0xFFFFFFFF)
    bg = np.random.Philox(key=key, counter=int(step))
    return float(np.random.Generator(bg).standard_normal())


@dataclass
class TrajectoryLog:
    dt: float
    ids: list
    states: dict = field(default_factory=dict)     # vid -> list of VehicleState (N+1)
    controls: dict = field(default_factory=dict)   # vid -> list of ControlInput or None (N+1)

    COLUMNS = ("t", "vehicle_id", "s", "d", "v_s", "v_d", "u_a", "u_d", "delta")

    @property
    def n_points(self):
        return len(self.states[self.ids[0]]) if self.ids else 0

    def rows(self):
        for n in range(self.n_points):
            for vid in self.ids:
                x = self.states[vid][n]
                u = self.controls[vid][n]
                cells = ["", "", ""] if u is None else [f"{u.u_a:.6f}", f"{u.u_d:.6f}", str(u.delta)]
                yield [f"{n * self.dt:.3f}", str(vid), f"{x.s:.6f}", f"{x.d:.6f}", f"{x.v_s:.6f}", f"{x.v_d:.6f}",
                       *cells]

    def to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(self.COLUMNS)
            wr.writerows(self.rows())
        return path


@dataclass
class SimMetrics:
    min_distance: list          # per step, ego to nearest tracked vehicle (m)
    min_ttc: list               # per step (s), inf when nobody closes in
    histogram: dict             # safe / warning / danger counts of min_distance
    collision_count: int
    lane_change_time: float | None
    speed_mean: float
    speed_var: float
    background_collisions: int = 0
    replans: int = 0
    fallbacks: int = 0
    ego_final_d: float = math.nan

    @property
    def danger_count(self):
        return self.histogram["danger"]

    def to_dict(self):
        def clean(v):
            return None if isinstance(v, float) and not math.isfinite(v) else v
        return {
            "min_distance": [round(v, 9) for v in self.min_distance],
            "min_ttc": [clean(round(v, 9)) for v in self.min_ttc],
            "histogram": dict(self.histogram),
            "collision_count": self.collision_count,
            "danger_count": self.danger_count,
            "lane_change_time": self.lane_change_time,
            "speed_mean": self.speed_mean,
            "speed_var": self.speed_var,
            "background_collisions": self.background_collisions,
            "replans": self.replans,
            "fallbacks": self.fallbacks,
            "ego_final_d": self.ego_final_d,
        }

    def to_json(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))
        return path


def classify(d: float, p: SafetyParams = SafetyParams()) -> str:
    if d > p.d_safe_threshold:
        return "safe"
    if d > p.d_danger:
        return "warning"
    return "danger"


def compute_metrics(log: TrajectoryLog, ego_id: int, target_d: float, p: SafetyParams = SafetyParams(),
                    done_tol: float = 0.2, active=None) -> SimMetrics:
    """Distance/TTC traces of the ego against every other vehicle still on the road."""
    n_pts = log.n_points
    others = [v for v in log.ids if v != ego_id]
    dmin, tmin = [], []
    hist = {"safe": 0, "warning": 0, "danger": 0}
    coll = 0
    bg = 0
    for n in range(n_pts):
        xe = log.states[ego_id][n]
        live = [v for v in others if active is None or active[v][n]]
        best, bt = math.inf, math.inf
        for v in live:
            xj = log.states[v][n]
            dist = math.hypot(xj.s - xe.s, xj.d - xe.d)
            best = min(best, dist)
            if dist > 0:
                bt = min(bt, ttc(xe, xj))
        dmin.append(best)
        tmin.append(bt)
        hist[classify(best, p)] += 1
        if best <= p.collision_dist:
            coll += 1
        for a in range(len(live)):
            xa = log.states[live[a]][n]
            for b in range(a + 1, len(live)):
                xb = log.states[live[b]][n]
                if math.hypot(xa.s - xb.s, xa.d - xb.d) <= p.collision_dist:
                    bg += 1
    ds = np.array([x.d for x in log.states[ego_id]])
    inside = np.abs(ds - target_d) <= done_tol
    lc_time = None
    if inside[-1]:
        # first step of the final run inside the band
        out = np.nonzero(~inside)[0]
        first = 0 if out.size == 0 else int(out[-1]) + 1
        lc_time = round(first * log.dt, 6)
    speeds = np.array([x.v_s for x in log.states[ego_id]])
    return SimMetrics(dmin, tmin, hist, coll, lc_time, float(speeds.mean()), float(speeds.var()),
                      background_collisions=bg, ego_final_d=float(ds[-1]))


@dataclass
class PlanResult:
    selected: object | None          # CandidatePath or None (lane keeping fallback)
    candidates: list
    evaluations: list
    index: int | None


def plan_from_equilibrium(scenario: ScenarioConfig, eq: EquilibriumState, x0: VehicleState, n0: int = 0,
                          seed: int = 0, n_paths: int = 32, ew: EvalWeights = EvalWeights(),
                          p: SafetyParams = SafetyParams(), states: dict | None = None, use_field: bool = True,
                          ranges: SamplingRanges = SamplingRanges()) -> PlanResult:
    """Sample, score against the equilibrium density and select; falls back to lane keeping."""
    N = len(eq.rho_seq) - 1
    dt = scenario.dt
    n_steps = N - n0
    theta = scenario.style_of(scenario.ego.style)
    states = states if states is not None else scenario.initial_states()
    others = reactive_predictions(scenario, states, n_steps, dt)
    try:
        cands = generate_candidates(scenario, x0, theta, n_paths, seed=seed, horizon=n_steps * dt, dt=dt,
                                    ranges=ranges, t0=n0 * dt, others=others)
    except RuntimeError:
        return PlanResult(None, [], [], None)
    m = len(cands[0].states) - 1     # common evaluation window
    tables = _eval_inputs(scenario, eq, n0, m, use_field)
    evals = [evaluate_path(c, others=reactive_predictions(scenario, states, m, dt, c.states), theta_ego=theta, ew=ew,
                           p=p, bounds=scenario.bounds, **tables)
             for c in cands]
    try:
        sel = select_path(cands, evals, p)
        idx = next(i for i, c in enumerate(cands) if c is sel)
    except NoSafePath:
        sel, idx = None, None
    return PlanResult(sel, cands, evals, idx)


def reactive_predictions(scenario: ScenarioConfig, states: dict, n_steps: int, dt: float,
                         ego_states: list | None = None) -> list:
    """Car-following predictions of every non-ego vehicle, in id order.

    With `ego_states` the MFG-controlled vehicles also react to the planned ego;
    replayed vehicles keep constant velocity since they cannot react.
    """
    ids = [v for v in sorted(states) if v != scenario.ego_id]
    styles = [scenario.style_of(scenario.vehicle(v).style) for v in ids]
    return predict_traffic([states[v] for v in ids], styles, n_steps, dt, ego_states,
                           [v not in scenario.replay for v in ids])


def _eval_inputs(scenario, eq, n0, n_steps, use_field):
    if not use_field or eq is None:
        return dict(rho_seq=None, slab_speeds=None, flow=None, styles=None)
    sl = slice(n0, n0 + n_steps + 1)
    styles = eq.setup.styles if eq.setup is not None else None
    flow = eq.flow[sl] if eq.flow is not None else None
    return dict(rho_seq=eq.rho_seq[sl], slab_speeds=eq.slab_speeds[sl], flow=flow, styles=styles)


def _lane_index(d, centers):
    return int(np.argmin(np.abs(np.asarray(centers) - d)))


def simulate(scenario: ScenarioConfig, eq: EquilibriumState, plan: PlanResult | None = None,
             params: SimParams = SimParams(), sp: SafetyParams = SafetyParams(), ew: EvalWeights = EvalWeights()):
    """Euler steps of every vehicle; returns (TrajectoryLog, SimMetrics)."""
    dt = scenario.dt
    N = len(eq.rho_seq) - 1
    b = scenario.bounds
    geo = scenario.geometry
    centers = np.asarray(geo.lane_centers, dtype=float)
    fields = eq.fields()
    ego_id = scenario.ego_id
    ids = [v.id for v in scenario.vehicles]
    spec = {v.id: v for v in scenario.vehicles}
    style = {v.id: scenario.style_of(v.style) for v in scenario.vehicles}
    replayed = set(scenario.replay)
    x = scenario.initial_states()
    log = TrajectoryLog(dt, ids, {v: [x[v]] for v in ids}, {v: [] for v in ids})
    active = {v: [True] for v in ids}
    target_lane = scenario.target_lane
    theta_e = style[ego_id]

    if plan is None:
        plan = plan_from_equilibrium(scenario, eq, x[ego_id], 0, params.seed, params.n_paths, ew, sp, x,
                                     params.plan_with_field)
    path = plan.selected
    replans = 0
    fallbacks = 0 if path is not None else 1
    every = max(int(round(params.replan_interval / dt)), 1)
    blocked = False

    for n in range(N):
        nv = n
        done = (_lane_index(x[ego_id].d, centers) == target_lane
                and abs(x[ego_id].d - scenario.target_d) <= params.done_tol)
        # periodic safety re-check of the committed path, replanning when it fails
        if n > 0 and n % every == 0 and not done:
            need = blocked or path is None
            if not need:
                others = reactive_predictions(scenario, x, N - n, dt)
                cont = lane_path_continuation(path, theta_e, x[ego_id], N - n, dt, n, others)
                ev = evaluate_path(cont, None, reactive_predictions(scenario, x, len(cont) - 1, dt, cont.states),
                                   theta_e, ew, sp, bounds=b)
                need = not passes_gate(ev, sp)
            if need:
                replans += 1
                res = plan_from_equilibrium(scenario, eq, x[ego_id], n, params.seed * 100003 + n, params.n_paths,
                                            ew, sp, x, params.plan_with_field)
                if res.selected is None:
                    fallbacks += 1
                path = res.selected
                blocked = False

        # policy controls of MFG-controlled vehicles, batched per style slab
        ctrl = {}
        by_slab = {}
        for v in ids:
            if v in replayed:
                continue
            by_slab.setdefault(STYLE_INDEX[spec[v].style], []).append(v)
        for ell, vs in by_slab.items():
            V = eq.values[ell]
            step = min(nv, V.n_steps - 1)
            S = np.array([x[v].s for v in vs])
            D = np.array([x[v].d for v in vs])
            Vv = np.array([x[v].v_s for v in vs])
            idx, _ = extract_batch(V, fields, step, S, D, Vv)
            for v, i in zip(vs, idx):
                ctrl[v] = V.ug.control(int(i))

        new = {}
        for v in ids:
            if v in replayed:
                new[v] = scenario.replay[v].states[min(n + 1, len(scenario.replay[v].states) - 1)]
                log.controls[v].append(None)
                continue
            xv, th, u = x[v], style[v], ctrl[v]
            if not active[v][-1]:
                new[v] = xv
                log.controls[v].append(ControlInput(0.0, 0.0, 0))
                continue
            others = [(x[w], style[w]) for w in ids if w != v and active[w][-1]]
            ua = u.u_a
            if v != ego_id and params.accel_noise > 0:
                ua += params.accel_noise * (0.5 + th.alpha_aggr) * step_noise(params.seed, v, n)
            ua = min(max(ua, th.a_min), th.a_max)
            ua = min(ua, admissible_acceleration(xv, th, others, dt, sp, params.envelope_margin))
            v2 = min(max(xv.v_s + ua * dt, 0.0), b.v_max)
            s2 = xv.s + max(xv.v_s * dt + 0.5 * ua * dt * dt, 0.0)
            if v == ego_id:
                d_des = path.d_at(s2) if path is not None else centers[_lane_index(xv.d, centers)]
                vd = min(max((d_des - xv.d) / dt, -b.v_d_max), b.v_d_max)
                ud, delta = vd / TAU_LAT, int(np.sign(d_des - xv.d)) if abs(d_des - xv.d) > 1e-12 else 0
            else:
                vd = min(max(u.u_d * TAU_LAT, -b.v_d_max), b.v_d_max)
                ud, delta = u.u_d, u.delta
            d2 = kn.lane_gate(xv.d, xv.d + vd * dt, float(delta), centers, geo.lane_width)
            # merge gate: do not start overlapping a lane whose occupants are inside the braking envelope
            cur_lane = _lane_index(xv.d, centers)
            if _lane_index(d2, centers) != cur_lane or abs(d2 - centers[cur_lane]) > abs(xv.d - centers[cur_lane]):
                probe = VehicleState(s2, v2, ua, d2, (d2 - xv.d) / dt, 0.0)
                if not merge_is_safe(probe, th, [(x[w], style[w]) for w in ids if w != v and active[w][-1]
                                                 and _lane_index(x[w].d, centers) != cur_lane], sp,
                                     params.envelope_margin):
                    d2 = xv.d
                    if v == ego_id:
                        blocked = True
            vd_eff = (d2 - xv.d) / dt
            new[v] = VehicleState(s2, v2, ua, d2, vd_eff, 0.0).clamp(b)
            log.controls[v].append(ControlInput(ua, ud, delta))
        for v in ids:
            x[v] = new[v]
            log.states[v].append(new[v])
            gone = v not in replayed and new[v].s >= b.s_max
            active[v].append(active[v][-1] and not gone)
    for v in ids:
        log.controls[v].append(None if v in replayed else ControlInput(0.0, 0.0, 0))
    m = compute_metrics(log, ego_id, scenario.target_d, sp, params.done_tol, active)
    m.replans, m.fallbacks = replans, fallbacks
    return log, m


def lane_path_continuation(path, theta: DrivingStyle, x0: VehicleState, n_steps: int, dt: float, n0: int,
                           others=None, settle: float = SamplingRanges().settle):
    """Re-sample the remaining part of a committed path from the current ego state."""
    n_steps = max(n_steps, 2)
    states = sample_path(path.params, theta, x0, n_steps, dt, others=others)
    if settle is not None:
        keep = min(done_index(states, path.params.s_lc_end) + int(round(settle / dt)), n_steps)
        states = states[:max(keep, 2) + 1]
    return CandidatePath(path.params, states, dt, n0 * dt)
