"""Lane-change candidate generation, multi-objective scoring and safe selection."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .control import CostWeights
from .core import STYLE_INDEX, STYLE_ORDER, DrivingStyle, ScenarioConfig, StateBounds, StyleClass, VehicleState
from .grid import DensityTensor, bilinear
from .safety import SafetyParams, boundary_penalty, dynamic_safety_distance, field_quadrature, smooth_risk, ttc

STYLE_SPEED_FACTOR = {
    StyleClass.SUPER_AGGRESSIVE: 1.2,
    StyleClass.AGGRESSIVE: 1.1,
    StyleClass.COMPETITIVE: 1.1,
    StyleClass.CONSERVATIVE: 0.8,
}


def style_speed_factor(theta: DrivingStyle) -> float:
    return STYLE_SPEED_FACTOR.get(theta.cls, 1.0)


def preferred_sharpness(alpha_aggr: float) -> float:
    return 0.5 + 1.5 * alpha_aggr


@dataclass(frozen=True)
class PathParams:
    # global
    s_start: float
    s_end: float
    d_init: float
    d_target: float
    v_target: float
    # local
    s_lc_start: float
    s_lc_end: float
    phi_transition: float = 0.0
    kappa_smooth: float = 0.0
    # temporal
    t_start: float = 0.0
    t_end: float = 0.0
    tau_transition: float = 0.0
    sigma_timing: float = 0.0
    # shape
    beta: float = 1.0
    gamma: float = 0.0
    n_ripple: int = 2
    # slowdown
    eps_slowdown: float = 0.1
    sigma_slowdown: float = 20.0
    s_mid: float = 0.0

    def __post_init__(self):
        if not self.s_lc_start < self.s_lc_end:
            raise ValueError("need s_lc_start < s_lc_end")
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if int(self.n_ripple) != self.n_ripple or self.n_ripple < 1:
            raise ValueError("n_ripple must be a positive integer")
        if not 0 <= self.eps_slowdown < 1:
            raise ValueError("eps_slowdown must lie in [0, 1)")
        if self.sigma_slowdown <= 0:
            raise ValueError("sigma_slowdown must be positive")

    def key(self):
        return (self.s_lc_start, self.s_lc_end, self.t_start, self.beta, self.gamma, self.n_ripple,
                self.eps_slowdown)


@dataclass
class CandidatePath:
    params: PathParams
    states: list          # VehicleState per step
    dt: float
    t0: float = 0.0

    def arrays(self):
        a = np.array([x.as_tuple() for x in self.states])
        return {k: a[:, i] for i, k in enumerate(("s", "v_s", "a_s", "d", "v_d", "a_d"))}

    def d_at(self, s: float) -> float:
        return lateral_profile(s, self.params)

    def __len__(self):
        return len(self.states)


@dataclass(frozen=True)
class EvalWeights:
    w: tuple = (1.0, 2.0, 1.0, 0.5, 1.5)
    rho_v: float = 1.0
    rho_a: float = 1.0
    rho_j: float = 1.0
    rho_k: float = 1.0
    j_max: float = 10.0
    kappa_max: float = 0.2
    zeta_ttc: float = 5.0
    T_critical: float = 3.0

    def __post_init__(self):
        vals = list(self.w) + [self.rho_v, self.rho_a, self.rho_j, self.rho_k, self.j_max, self.kappa_max,
                               self.zeta_ttc, self.T_critical]
        if len(self.w) != 5 or any(v < 0 for v in vals):
            raise ValueError("evaluation weights must be five nonnegative entries plus nonnegative limits")


@dataclass(frozen=True)
class SamplingRanges:
    length: tuple = (90.0, 200.0)       # lane-change extent along s (m)
    t_start: tuple = (0.0, 8.0)         # s
    sharpness_spread: float = 0.2       # relative spread of beta around the style preference
    eps_slowdown: tuple = (0.05, 0.15)
    sigma_slowdown: float = 20.0
    sigma_timing: float = 0.5
    n_ripple: tuple = (1, 2, 3)
    eps_target: float = 2.0
    blend_tau: float = 2.0              # s, relaxation from the current speed onto the profile
    settle: float = 3.0                 # s kept after the manoeuvre ends; None keeps the full horizon
    max_tries: int = 50


def transition_fn(xi: float, beta: float, gamma: float, n: int) -> float:
    if not 0.0 <= xi <= 1.0:
        raise ValueError("xi must lie in [0, 1]")
    return 0.5 * (1 - math.cos(math.pi * xi ** beta)) + gamma * xi ** 2 * (1 - xi) ** 2 * math.sin(2 * math.pi * n * xi)


def lateral_profile(s: float, params: PathParams) -> float:
    if s <= params.s_lc_start:
        return params.d_init
    if s >= params.s_lc_end:
        return params.d_target
    xi = (s - params.s_lc_start) / (params.s_lc_end - params.s_lc_start)
    return params.d_init + (params.d_target - params.d_init) * transition_fn(xi, params.beta, params.gamma,
                                                                           params.n_ripple)


def velocity_profile(s: float, params: PathParams, theta: DrivingStyle) -> float:
    dip = params.eps_slowdown * math.exp(-(s - params.s_mid) ** 2 / (2 * params.sigma_slowdown ** 2))
    return theta.v_des * (1 - dip) * style_speed_factor(theta)


def _finite_diff(x, dt):
    return np.gradient(x, dt) if len(x) > 2 else np.zeros_like(x)


@dataclass(frozen=True)
class FollowModel:
    """Leader-following cap applied while time-sampling a path."""
    gap0: float = 5.0        # m, standstill body gap
    t_close: float = 2.0     # s, gap error relaxation time
    lateral: float = 2.5     # m, lateral overlap that makes a vehicle a leader
    body: float = 2.0        # m, centre-to-centre footprint


def sample_path(params: PathParams, theta: DrivingStyle, x0: VehicleState, n_steps: int, dt: float,
                blend_tau: float = 2.0, others=None, follow: FollowModel = FollowModel()) -> list:
    """Time samples of a parameterised path starting at x0.

    The speed relaxes from the current speed onto the profile, is capped by a
    gap-keeping law against predicted leaders (`others`, aligned per step) and
    changes at most by the style's acceleration bounds per step.
    """
    s = np.empty(n_steps + 1)
    v = np.empty(n_steps + 1)
    s[0], v[0] = x0.s, x0.v_s
    v0_off = x0.v_s - velocity_profile(x0.s, params, theta)
    headway = theta.tau_react * theta.kappa_safe
    for i in range(n_steps):
        tgt = max(velocity_profile(s[i], params, theta) + v0_off * math.exp(-i * dt / blend_tau), 0.0)
        if others:
            d_i = lateral_profile(s[i], params)
            for traj in others:
                y = traj[i]
                if y.s > s[i] and abs(y.d - d_i) < follow.lateral:
                    gap = y.s - s[i] - follow.body
                    want = follow.gap0 + v[i] * headway
                    tgt = min(tgt, max(y.v_s + (gap - want) / follow.t_close, 0.0))
        v[i + 1] = max(min(tgt, v[i] + theta.a_max * dt), v[i] + theta.a_min * dt, 0.0)
        s[i + 1] = s[i] + 0.5 * (v[i] + v[i + 1]) * dt
    d = np.array([lateral_profile(si, params) for si in s])
    vd = _finite_diff(d, dt)
    a_s = _finite_diff(v, dt)
    a_d = _finite_diff(vd, dt)
    return [VehicleState(float(s[i]), float(v[i]), float(a_s[i]), float(d[i]), float(vd[i]), float(a_d[i]))
            for i in range(n_steps + 1)]


def path_kinematics(path: CandidatePath):
    """Speed, acceleration, jerk magnitudes and curvature from sampled differences."""
    a = path.arrays()
    s, d, dt = a["s"], a["d"], path.dt
    s1, d1 = _finite_diff(s, dt), _finite_diff(d, dt)
    s2, d2 = _finite_diff(s1, dt), _finite_diff(d1, dt)
    s3, d3 = _finite_diff(s2, dt), _finite_diff(d2, dt)
    speed = np.hypot(s1, d1)
    acc = np.hypot(s2, d2)
    jerk = np.hypot(s3, d3)
    with np.errstate(divide="ignore", invalid="ignore"):
        kappa = np.where(speed > 1e-9, np.abs(s1 * d2 - d1 * s2) / np.maximum(speed, 1e-9) ** 3, 0.0)
    return speed, acc, jerk, kappa


def admissible(path: CandidatePath, target_d: float, bounds: StateBounds, eps_target: float) -> bool:
    speed, acc, _, _ = path_kinematics(path)
    end = path.states[-1]
    if abs(end.d - target_d) > eps_target:
        return False
    if np.any(speed > bounds.v_max) or np.any(acc > bounds.a_max):
        return False
    if max(abs(x.v_d) for x in path.states) > bounds.v_d_max:
        return False
    return path.params.s_lc_end <= end.s


def generate_candidates(scenario: ScenarioConfig, x0: VehicleState, theta: DrivingStyle, n: int = 32, seed: int = 0,
                        horizon: float | None = None, dt: float | None = None,
                        ranges: SamplingRanges = SamplingRanges(), t0: float = 0.0, others=None) -> list:
    """Seeded candidate sampler; inadmissible draws are redrawn up to a retry cap.

    `others` are predicted trajectories (one list of states per vehicle, at least
    horizon/dt + 1 long) used for the leader-following speed cap. Each candidate
    is cut `ranges.settle` seconds after its lateral move completes.
    """
    if n < 1:
        raise ValueError("need at least one candidate")
    dt = scenario.dt if dt is None else dt
    horizon = scenario.horizon - t0 if horizon is None else horizon
    n_steps = max(int(round(horizon / dt)), 2)
    rng = np.random.default_rng(seed)
    d_tgt = scenario.target_d
    v_nom = theta.v_des * style_speed_factor(theta)
    beta0 = preferred_sharpness(theta.alpha_aggr)
    gamma0 = 0.05 * theta.alpha_aggr
    already = abs(x0.d - d_tgt) <= 1e-9
    out, seen = [], set()
    tries = 0
    while len(out) < n and tries < ranges.max_tries * n:
        tries += 1
        length = rng.uniform(*ranges.length)
        t_hi = min(ranges.t_start[1], max(horizon - length / max(v_nom, 1.0) - 1.0, ranges.t_start[0]))
        t_start = rng.uniform(ranges.t_start[0], t_hi)
        jitter = rng.normal(0.0, ranges.sigma_timing)
        t_start = float(np.clip(t_start + jitter, ranges.t_start[0], t_hi))
        beta = beta0 * rng.uniform(1 - ranges.sharpness_spread, 1 + ranges.sharpness_spread)
        gamma = rng.uniform(0.0, 2 * gamma0)
        n_r = int(rng.choice(ranges.n_ripple))
        eps = rng.uniform(*ranges.eps_slowdown)
        s_lc0 = x0.s + max(x0.v_s, 0.0) * t_start
        s_lc1 = s_lc0 + length
        params = PathParams(
            s_start=x0.s, s_end=x0.s, d_init=x0.d, d_target=d_tgt, v_target=v_nom,
            s_lc_start=s_lc0, s_lc_end=s_lc1, t_start=t_start, sigma_timing=ranges.sigma_timing,
            beta=beta, gamma=gamma, n_ripple=n_r, eps_slowdown=eps, sigma_slowdown=ranges.sigma_slowdown,
            s_mid=0.5 * (s_lc0 + s_lc1))
        if params.key() in seen:
            continue
        states = sample_path(params, theta, x0, n_steps, dt, ranges.blend_tau, others)
        path = CandidatePath(params, states, dt, t0)
        if not admissible(path, d_tgt, scenario.bounds, ranges.eps_target) and not already:
            continue
        seen.add(params.key())
        out.append(path)
    if not out:
        raise RuntimeError("no admissible candidate path after retries")
    if ranges.settle is not None:
        # one common evaluation window: the latest manoeuvre end plus the settle time
        ends = [done_index(c.states, c.params.s_lc_end) for c in out]
        keep = min(max(ends) + int(round(ranges.settle / dt)), n_steps) + 1
        out = [CandidatePath(c.params, c.states[:keep], dt, t0) for c in out]
    return [_finalise(c) for c in out]


def done_index(states: list, s_done: float) -> int:
    for i, x in enumerate(states):
        if x.s >= s_done:
            return i
    return len(states) - 1


def _finalise(path: CandidatePath) -> CandidatePath:
    """Fill the derived descriptors (end position, timing, heading, curvature)."""
    p = path.params
    s = np.array([x.s for x in path.states])
    t = np.arange(len(s)) * path.dt
    t_end = float(np.interp(p.s_lc_end, s, t)) if s[-1] >= p.s_lc_end else float(t[-1])
    t_beg = float(np.interp(p.s_lc_start, s, t)) if s[-1] >= p.s_lc_start else float(t[-1])
    _, _, _, kappa = path_kinematics(path)
    h = 1e-3 * (p.s_lc_end - p.s_lc_start)
    slope = (lateral_profile(p.s_mid + h, p) - lateral_profile(p.s_mid - h, p)) / (2 * h)
    new = PathParams(**{**asdict(p), "s_end": float(s[-1]), "t_start": t_beg, "t_end": t_end,
                        "tau_transition": t_end - t_beg, "phi_transition": math.atan(slope),
                        "kappa_smooth": float(np.max(kappa))})
    return CandidatePath(new, path.states, path.dt, path.t0)


def lane_keep_path(x0: VehicleState, n_steps: int, dt: float, t0: float = 0.0) -> CandidatePath:
    """Straight constant-speed path (fallback when no safe lane change exists)."""
    params = PathParams(x0.s, x0.s + x0.v_s * n_steps * dt, x0.d, x0.d, x0.v_s, x0.s, x0.s + 1.0,
                        eps_slowdown=0.0, s_mid=x0.s)
    states = [VehicleState(x0.s + x0.v_s * i * dt, x0.v_s, 0.0, x0.d, 0.0, 0.0) for i in range(n_steps + 1)]
    return CandidatePath(params, states, dt, t0)


def predict_constant_velocity(x: VehicleState, n_steps: int, dt: float) -> list:
    return [VehicleState(x.s + x.v_s * i * dt, x.v_s, 0.0, x.d + x.v_d * i * dt, x.v_d, 0.0)
            for i in range(n_steps + 1)]


def predict_traffic(states: list, styles: list, n_steps: int, dt: float, ego_states: list | None = None,
                    reactive=None, follow: FollowModel = FollowModel()) -> list:
    """Joint car-following rollout of the given vehicles (one state list per vehicle).

    Each vehicle holds its current speed unless a leader (another predicted
    vehicle or, when given, the planned ego state) within `follow.lateral`
    forces it down through the gap-keeping law; speed changes respect the
    style's acceleration bounds. Non-reactive vehicles keep constant velocity.
    Lateral motion is constant-velocity.
    """
    m = len(states)
    if m == 0:
        return []
    S = np.array([x.s for x in states], dtype=float)
    V = np.array([x.v_s for x in states], dtype=float)
    D0 = np.array([x.d for x in states], dtype=float)
    VD = np.array([x.v_d for x in states], dtype=float)
    V0 = V.copy()
    amin = np.array([t.a_min for t in styles])
    amax = np.array([t.a_max for t in styles])
    hw = np.array([t.tau_react * t.kappa_safe for t in styles])
    react = np.ones(m, bool) if reactive is None else np.asarray(reactive, bool)
    Ss, Vs, As = [S.copy()], [V.copy()], [np.zeros(m)]
    for i in range(n_steps):
        D = D0 + VD * i * dt
        PS, PV, PD = S, V, D
        if ego_states is not None:
            e = ego_states[min(i, len(ego_states) - 1)]
            PS, PV, PD = np.append(S, e.s), np.append(V, e.v_s), np.append(D, e.d)
        ahead = (PS[None, :] > S[:, None]) & (np.abs(PD[None, :] - D[:, None]) < follow.lateral)
        gap = PS[None, :] - S[:, None] - follow.body
        cap = PV[None, :] + (gap - follow.gap0 - (V * hw)[:, None]) / follow.t_close
        tgt = np.minimum(V0, np.where(ahead, np.maximum(cap, 0.0), np.inf).min(axis=1))
        V2 = np.clip(tgt, V + amin * dt, V + amax * dt)
        V2 = np.where(react, np.maximum(V2, 0.0), V0)
        S = S + 0.5 * (V + V2) * dt
        As.append((V2 - V) / dt)
        V = V2
        Ss.append(S.copy())
        Vs.append(V.copy())
    return [[VehicleState(float(Ss[i][k]), float(Vs[i][k]), float(As[i][k]), float(D0[k] + VD[k] * i * dt),
                          float(VD[k]), 0.0) for i in range(n_steps + 1)] for k in range(m)]


@dataclass
class PathEvaluation:
    total: float
    breakdown: dict
    min_distance: float
    max_step_risk: float

    def to_dict(self):
        return {"J_total": self.total, **self.breakdown, "min_distance": self.min_distance,
                "max_step_risk": self.max_step_risk}


def _local_stats_at(rho: DensityTensor, s, d):
    g = rho.grid
    tot = rho.total()
    rho_local = bilinear(tot, g, s, d) / g.cell_area
    j, k = g.cell_of(min(max(s, g.s0), g.s_end - 1e-9), min(max(d, g.d0), g.d_end - 1e-9))
    nb = rho.values[max(j - 1, 0):j + 2, max(k - 1, 0):k + 2, :].sum(axis=(0, 1))
    m = nb.sum()
    alpha = float(nb @ np.asarray(rho.alphas[:nb.size])) / m if m >= 1e-12 else 0.0
    return rho_local, alpha


def evaluate_path(path: CandidatePath, rho_seq, others, theta_ego: DrivingStyle, ew: EvalWeights = EvalWeights(),
                  p: SafetyParams = SafetyParams(), *, others_styles=None, slab_speeds=None, flow=None,
                  styles=None, bounds: StateBounds = StateBounds(), cost: CostWeights | None = None,
                  eps_lane: float | None = None) -> PathEvaluation:
    """Score one path against the density sequence and predicted vehicles.

    `others` is a list of per-vehicle predicted state sequences aligned with
    the path samples; `flow` an optional aligned list of (J, K, 2) mean
    velocity fields whose divergence enters the field term.
    """
    n = len(path.states)
    if rho_seq is not None and len(rho_seq) != n:
        raise ValueError(f"density sequence has {len(rho_seq)} steps, path has {n}")
    for traj in others:
        if len(traj) != n:
            raise ValueError("predicted vehicle sequence length differs from the path")
    if flow is not None and len(flow) != n:
        raise ValueError("flow sequence length differs from the path")
    others_styles = others_styles or [None] * len(others)
    cost = cost or CostWeights.for_style(theta_ego)
    eps_lane = cost.eps_lane if eps_lane is None else eps_lane
    dt = path.dt
    own = STYLE_INDEX[theta_ego.cls]
    xs = path.states

    j_field = 0.0
    m_exp = np.ones(n)
    if rho_seq is not None:
        for i, x in enumerate(xs):
            sp = None if slab_speeds is None else slab_speeds[i]
            r, mq = field_quadrature(x, theta_ego, rho_seq[i], p, styles, sp, own)
            j_field += r * dt
            m_exp[i] = math.exp(mq)
            if flow is not None:
                g = rho_seq[i].grid
                f = flow[i]
                div = np.gradient(f[:, :, 0], g.ds, axis=1) + np.gradient(f[:, :, 1], g.dd, axis=0)
                j_field += bilinear(div, g, x.s, x.d) * dt

    j_safety = 0.0
    min_dist = math.inf
    max_risk = 0.0
    for i, x in enumerate(xs):
        t_pred = min(i * dt, p.T_pred)
        if rho_seq is not None:
            rl, al = _local_stats_at(rho_seq[i], x.s, x.d)
        else:
            rl, al = 0.0, 0.0
        clear = math.inf
        step_risk = 0.0
        for traj, tj in zip(others, others_styles):
            y = traj[i]
            tj = tj or theta_ego
            ds_, dd_ = y.s - x.s, y.d - x.d
            dist = math.hypot(ds_, dd_)
            d_safe = dynamic_safety_distance(x, y, theta_ego, tj, t_pred, rl, al, p, bounds)
            term = math.exp(-(dist / d_safe) ** 4)
            if dist == 0 or ttc(x, y) < ew.T_critical:
                term += ew.zeta_ttc
            j_safety += term * dt
            min_dist = min(min_dist, dist)
            step_risk = max(step_risk, smooth_risk(dist, 2 * p.collision_dist, p.xi))
            if abs(dd_) < p.lateral_conflict:
                clear = min(clear, dist - p.collision_dist)
        j_safety += boundary_penalty(clear, p) * dt
        max_risk = max(max_risk, step_risk)

    speed, acc, jerk, kappa = path_kinematics(path)
    hinge = lambda a, lim: np.clip(a - lim, 0.0, None) ** 2
    j_dyn = float(np.sum(ew.rho_v * hinge(speed, bounds.v_max) + ew.rho_a * hinge(acc, theta_ego.a_max)
                         + ew.rho_j * hinge(jerk, ew.j_max) + ew.rho_k * hinge(kappa, ew.kappa_max)) * dt)

    peak = max(x.v_s for x in xs) / theta_ego.v_des
    j_style = (path.params.beta - preferred_sharpness(theta_ego.alpha_aggr)) ** 2 \
        + (peak - style_speed_factor(theta_ego)) ** 2

    end = xs[-1]
    j_mand = cost.w_mandatory * float(abs(end.d - path.params.d_target) > eps_lane)
    t = np.arange(n) * dt
    changing = (t >= path.params.t_start) & (t <= path.params.t_end) & (path.params.d_init != path.params.d_target)
    vd = np.array([x.v_d for x in xs])
    j_mand += float(np.sum(cost.w_transition * changing * m_exp + cost.w_smoothness * vd ** 2) * dt)

    parts = {"J_field": float(j_field), "J_safety": float(j_safety), "J_dynamics": j_dyn, "J_style": float(j_style),
             "J_mandatory": float(j_mand)}
    total = sum(wi * parts[k] for wi, k in zip(ew.w, ("J_field", "J_safety", "J_dynamics", "J_style",
                                                       "J_mandatory")))
    return PathEvaluation(float(total), parts, float(min_dist), float(max_risk))


class NoSafePath(RuntimeError):
    pass


def passes_gate(ev: PathEvaluation, p: SafetyParams) -> bool:
    return ev.min_distance >= p.d_min and ev.max_step_risk <= p.eps_coll


def select_path(candidates, evaluations, p: SafetyParams = SafetyParams()):
    """Cheapest candidate passing the distance/risk gate; ties by lower safety cost, then index."""
    if not candidates:
        raise ValueError("no candidates")
    if len(candidates) != len(evaluations):
        raise ValueError("candidates and evaluations differ in length")
    best = None
    for i, ev in enumerate(evaluations):
        if not passes_gate(ev, p):
            continue
        key = (ev.total, ev.breakdown["J_safety"], i)
        if best is None or key < best[0]:
            best = (key, i)
    if best is None:
        raise NoSafePath("no safe path")
    return candidates[best[1]]


def export_path_csv(path: CandidatePath, out) -> Path:
    out = Path(out)
    with out.open("w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["t", "s", "d", "v_s", "v_d"])
        for i, x in enumerate(path.states):
            wr.writerow([f"{path.t0 + i * path.dt:.4f}", f"{x.s:.6f}", f"{x.d:.6f}", f"{x.v_s:.6f}", f"{x.v_d:.6f}"])
    return out


def export_evaluations_json(candidates, evaluations, out, selected: int | None = None) -> Path:
    out = Path(out)
    doc = {"selected": selected,
           "candidates": [{"index": i, "params": asdict(c.params), **e.to_dict()}
                          for i, (c, e) in enumerate(zip(candidates, evaluations))]}
    out.write_text(json.dumps(doc, indent=2, default=_json_default))
    return out


def _json_default(o):
    if isinstance(o, float) and not math.isfinite(o):
        return str(o)
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(type(o))
