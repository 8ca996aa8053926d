"""Style-dependent running/terminal costs, the backward HJB sweep and policy extraction.

The HJB works on the reduced state (s, d, v_s). Acceleration and lateral
speed enter through the control: within one step the longitudinal
acceleration settles on the saturated command and the lateral speed on
``u_d * tau_lat``.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels as kn
from .core import (STYLE_INDEX, STYLE_ORDER, ControlInput, DrivingStyle, LaneGeometry, StateBounds,
                   StyleClass, VehicleState, style_catalog)
from .grid import DensityTensor, GridSpec
from .interaction import CouplingFieldBuilder, InteractionParams
from .safety import (BOUNDARY_CAP, RiskFieldBuilder, SafetyParams, boundary_penalty, clearance,
                     discrete_weight, field_quadrature)

TAU_LAT = 1.0   # s, lateral speed reached per unit lateral command


@dataclass(frozen=True)
class CostWeights:
    Q: tuple = (0.0, 1.0, 0.1, 4.0, 0.5, 0.1)
    R: tuple = (0.5, 1.0, 0.2)
    S: tuple = (0.1, 0.1)
    w_jerk: float = 0.1
    w_lateral: float = 0.5
    w_aggr: float = 0.3
    w_centripetal: float = 0.1
    u_comfort: float = 1.5
    a_cent_des: float = 0.0
    w_fuel: float = 0.05
    w_mandatory: float = 5.0
    w_transition: float = 1.0
    w_smoothness: float = 0.5
    eps_lane: float = 0.3

    def __post_init__(self):
        vals = list(self.Q) + list(self.R) + list(self.S) + [
            self.w_jerk, self.w_lateral, self.w_aggr, self.w_centripetal, self.u_comfort, self.w_fuel,
            self.w_mandatory, self.w_transition, self.w_smoothness]
        if any(v < 0 for v in vals):
            raise ValueError("cost weights must be nonnegative")
        if self.eps_lane <= 0:
            raise ValueError("eps_lane must be positive")

    @classmethod
    def for_style(cls, style: DrivingStyle, **overrides) -> "CostWeights":
        kw = dict(w_aggr=1.0 - style.alpha_aggr, u_comfort=0.6 * style.a_max,
                  w_fuel=0.15 if style.cls == StyleClass.CONSERVATIVE else 0.05)
        kw.update(overrides)
        return cls(**kw)

    def scaled(self, c: float) -> "CostWeights":
        """Every cost weight multiplied by c (thresholds untouched)."""
        return CostWeights(
            Q=tuple(c * q for q in self.Q), R=tuple(c * r for r in self.R), S=tuple(c * s for s in self.S),
            w_jerk=c * self.w_jerk, w_lateral=c * self.w_lateral, w_aggr=c * self.w_aggr,
            w_centripetal=c * self.w_centripetal, u_comfort=self.u_comfort, a_cent_des=self.a_cent_des,
            w_fuel=c * self.w_fuel, w_mandatory=c * self.w_mandatory, w_transition=c * self.w_transition,
            w_smoothness=c * self.w_smoothness, eps_lane=self.eps_lane)


@dataclass(frozen=True)
class ReferenceProfile:
    """Reference schedules: s_ref(t) = s0 + v_des t, piecewise-linear d_target(t).

    An empty `d_values` means lane keeping: the target is the lane centre
    nearest to the current lateral position.
    """
    s0: float
    v_des: float
    d_times: tuple = (0.0,)
    d_values: tuple = (0.0,)
    lane_centers: tuple = LaneGeometry().lane_centers

    @classmethod
    def constant(cls, s0, v_des, d_target):
        return cls(float(s0), float(v_des), (0.0,), (float(d_target),))

    @classmethod
    def lane_keeping(cls, s0, v_des, geometry: LaneGeometry = LaneGeometry()):
        return cls(float(s0), float(v_des), (), (), tuple(geometry.lane_centers))

    @property
    def keeps_lane(self):
        return len(self.d_values) == 0

    def s_ref(self, t):
        return self.s0 + self.v_des * t

    def d_target(self, t, d=None):
        if self.keeps_lane:
            if d is None:
                return math.nan
            return float(min(self.lane_centers, key=lambda c: abs(c - d)))
        return float(np.interp(t, self.d_times, self.d_values))

    def delta_plan(self, t, d, eps_lane):
        """Planned lane decision: towards d_target while outside the lane tolerance."""
        tgt = self.d_target(t, d)
        if abs(d - tgt) <= eps_lane:
            return 0
        return 1 if tgt > d else -1


@dataclass(frozen=True)
class ControlGrid:
    ua: np.ndarray
    ud: np.ndarray
    delta: np.ndarray = field(default_factory=lambda: np.array([-1.0, 0.0, 1.0]))

    def __post_init__(self):
        if set(np.asarray(self.delta).tolist()) - {-1.0, 0.0, 1.0}:
            raise ValueError("delta levels must be within {-1, 0, 1}")

    @classmethod
    def for_style(cls, style: DrivingStyle, bounds: StateBounds = StateBounds(), n_a: int = 7, n_d: int = 3):
        if n_a < 3 or n_a % 2 == 0 or n_d < 3 or n_d % 2 == 0:
            raise ValueError("level counts must be odd and >= 3")
        half = n_a // 2
        ua = np.concatenate([np.linspace(style.a_min, 0.0, half + 1)[:-1], [0.0],
                             np.linspace(0.0, style.a_max, half + 1)[1:]])
        ud = np.linspace(-bounds.a_d_max, bounds.a_d_max, n_d)
        return cls(ua.astype(float), ud.astype(float))

    def __len__(self):
        return len(self.ua) * len(self.ud) * len(self.delta)

    def control(self, idx: int) -> ControlInput:
        nD, nL = len(self.ud), len(self.delta)
        ia, rem = divmod(int(idx), nD * nL)
        idd, il = divmod(rem, nL)
        return ControlInput(float(self.ua[ia]), float(self.ud[idd]), int(self.delta[il]))

    def all_controls(self):
        return [self.control(i) for i in range(len(self))]

    def order(self) -> np.ndarray:
        """Enumeration order implementing the tie-break: smallest norm, then smallest index."""
        return self._order

    @functools.cached_property
    def _order(self) -> np.ndarray:
        norms = [math.sqrt(u.u_a ** 2 + u.u_d ** 2 + u.delta ** 2) for u in self.all_controls()]
        return np.array(sorted(range(len(self)), key=lambda i: (norms[i], i)), dtype=np.int64)


def pack_weights(w: CostWeights, style: DrivingStyle, geometry: LaneGeometry) -> np.ndarray:
    out = np.zeros(kn.N_WEIGHTS)
    out[kn.W_QS:kn.W_QAD + 1] = w.Q
    out[kn.W_RA], out[kn.W_RD], out[kn.W_RDL] = w.R
    out[kn.W_SA], out[kn.W_SD] = w.S
    out[kn.W_JERK] = w.w_jerk
    out[kn.W_LAT] = w.w_lateral
    out[kn.W_AGGR] = w.w_aggr
    out[kn.W_UCOMF] = w.u_comfort
    out[kn.W_CENT] = w.w_centripetal
    out[kn.W_ACENT] = w.a_cent_des
    out[kn.W_FUEL] = w.w_fuel
    out[kn.W_MAND] = w.w_mandatory
    out[kn.W_EPS] = w.eps_lane
    out[kn.W_TRANS] = w.w_transition
    out[kn.W_SMOOTH] = w.w_smoothness
    out[kn.W_OMEGA] = style.omega_interact
    out[kn.W_INVR] = 0.0 if math.isinf(geometry.curvature_radius) else 1.0 / geometry.curvature_radius
    return out


def pack_geometry(grid: GridSpec, bounds: StateBounds, geometry: LaneGeometry, dt: float, n_v: int) -> np.ndarray:
    g = np.zeros(kn.N_GEOM)
    g[kn.G_S0], g[kn.G_DS], g[kn.G_D0], g[kn.G_DD] = grid.s0, grid.ds, grid.d0, grid.dd
    g[kn.G_DV] = bounds.v_max / (n_v - 1)
    g[kn.G_VMAX] = bounds.v_max
    g[kn.G_VDMAX] = bounds.v_d_max
    g[kn.G_TAULAT] = TAU_LAT
    g[kn.G_LANEW] = geometry.lane_width
    g[kn.G_DT] = dt
    g[kn.G_CAP] = BOUNDARY_CAP
    return g


def reduced_embedding(s, d, v, u: ControlInput, bounds: StateBounds = StateBounds()) -> VehicleState:
    """Full state seen by the cost when the HJB sits at node (s, d, v) and applies u."""
    vd = min(max(u.u_d * TAU_LAT, -bounds.v_d_max), bounds.v_d_max)
    return VehicleState(s=s, v_s=v, a_s=u.u_a, d=d, v_d=vd, a_d=0.0)


def cost_components(x: VehicleState, u: ControlInput, u_prev: ControlInput, rho: DensityTensor | None,
                    theta: DrivingStyle, ref: ReferenceProfile, w: CostWeights, p: SafetyParams = SafetyParams(),
                    t: float = 0.0, dt: float = 0.1, others=(), geometry: LaneGeometry = LaneGeometry(),
                    field_values=None, slab_speeds=None, styles=None, own_slab=None):
    """(track, safety, comfort, fuel, lane) running-cost rates.

    The density quadrature is taken from `field_values` = (risk, M quadrature)
    when supplied, otherwise computed directly from `rho`. `others` holds the
    (state, style) pairs of explicit vehicles.
    """
    Q, R, S = w.Q, w.R, w.S
    d_tgt = ref.d_target(t, x.d)
    x_ref = (ref.s_ref(t), ref.v_des, 0.0, d_tgt, 0.0, 0.0)
    xs = x.as_tuple()
    track = sum(q * (a - b) ** 2 for q, a, b in zip(Q, xs, x_ref))
    dplan = ref.delta_plan(t, x.d, w.eps_lane)
    track += R[0] * u.u_a ** 2 + R[1] * u.u_d ** 2 + R[2] * (u.delta - dplan) ** 2
    ja = (u.u_a - u_prev.u_a) / dt
    jd = (u.u_d - u_prev.u_d) / dt
    track += S[0] * ja ** 2 + S[1] * jd ** 2

    if field_values is not None:
        risk, mq = field_values
    elif rho is not None:
        risk, mq = field_quadrature(x, theta, rho, p, styles, slab_speeds, own_slab)
    else:
        risk, mq = 0.0, 0.0
    safety = theta.omega_interact * risk
    if others:
        safety += theta.kappa_safe * boundary_penalty(clearance(x, [o for o, _ in others], p), p)
        safety += theta.alpha_aggr * sum(discrete_weight(x, xj, theta, tj, p) for xj, tj in others)

    comfort = w.w_jerk * (ja ** 2 + jd ** 2) + w.w_lateral * u.u_d ** 2
    if math.hypot(u.u_a, u.u_d) > w.u_comfort:
        comfort += w.w_aggr
    inv_r = 0.0 if math.isinf(geometry.curvature_radius) else 1.0 / geometry.curvature_radius
    comfort += w.w_centripetal * (x.v_s ** 2 * inv_r - w.a_cent_des) ** 2

    fuel = w.w_fuel * u.u_a ** 2
    lane = w.w_mandatory * (abs(x.d - d_tgt) > w.eps_lane)
    lane += w.w_transition * u.delta ** 2 * math.exp(mq) + w.w_smoothness * x.v_d ** 2
    return float(track), float(safety), float(comfort), float(fuel), float(lane)


def terminal_cost(x: VehicleState, theta: DrivingStyle, ref: ReferenceProfile, w: CostWeights, T: float) -> float:
    x_ref = (ref.s_ref(T), ref.v_des, 0.0, ref.d_target(T, x.d), 0.0, 0.0)
    return float(sum(q * (a - b) ** 2 for q, a, b in zip(w.Q, x.as_tuple(), x_ref)))


class FieldProvider:
    """Grid-level risk and drift fields derived from a density sequence.

    `at(n, slab)` returns node arrays (risk, exp(M), h0, h1, h3) in (K, J, B)
    / (K, J) layout. All requested slabs of a step are built together and
    kept (as float32) so the backward sweep and the forward pass share them.
    """

    def __init__(self, rho_seq, slab_speeds, grid: GridSpec, bounds: StateBounds = StateBounds(),
                 sp: SafetyParams = SafetyParams(), ip: InteractionParams = InteractionParams(),
                 styles=None, n_v: int = 9, enabled: bool = True, coupling: bool = True, targets=None):
        self.rho_seq = rho_seq
        self.slab_speeds = slab_speeds
        self.grid, self.bounds = grid, bounds
        self.styles = list(styles) if styles is not None else [style_catalog(c) for c in STYLE_ORDER]
        self.v_nodes = np.linspace(0.0, bounds.v_max, n_v)
        self.enabled = enabled and rho_seq is not None
        self.coupling = coupling
        self.targets = list(range(len(self.styles))) if targets is None else sorted(set(targets))
        self.risk_builder = RiskFieldBuilder(grid, sp, self.styles, bounds)
        self.coupling_builder = CouplingFieldBuilder(grid, ip, self.styles)
        self._store = {}

    def __len__(self):
        return len(self.rho_seq) if self.rho_seq is not None else 0

    def _values(self, n):
        r = self.rho_seq[min(n, len(self.rho_seq) - 1)]
        return r.values if isinstance(r, DensityTensor) else np.asarray(r)

    def _build(self, n):
        vals = self._values(n)
        speeds = self.slab_speeds[min(n, len(self.slab_speeds) - 1)]
        rm = self.risk_builder.fields_many(vals, speeds, self.targets, self.v_nodes)
        step = {}
        for t in self.targets:
            R, M = rm[t]
            if self.coupling:
                h = self.coupling_builder.field(vals, t)[[0, 1, 3]].transpose(0, 2, 1)
            else:
                h = np.zeros((3, self.grid.K, self.grid.J))
            step[t] = (R.transpose(2, 1, 0).astype(np.float32), M.transpose(2, 1, 0).astype(np.float32),
                       h.astype(np.float32))
        return step

    def at(self, n: int, slab: int):
        g = self.grid
        B = len(self.v_nodes)
        if not self.enabled:
            z3 = np.zeros((g.K, g.J, B))
            z2 = np.zeros((g.K, g.J))
            return z3, np.ones_like(z3), z2, z2, z2
        if slab not in self.targets:
            raise KeyError(f"fields for slab {slab} were not requested")
        step = self._store.get(n)
        if step is None:
            step = self._store[n] = self._build(n)
        R, M, h = step[slab]
        risk = np.ascontiguousarray(R, dtype=float)
        mexp = np.exp(np.ascontiguousarray(M, dtype=float))
        return (risk, mexp, np.ascontiguousarray(h[0], dtype=float), np.ascontiguousarray(h[1], dtype=float),
                np.ascontiguousarray(h[2], dtype=float))


@dataclass
class ValueTable:
    V: np.ndarray               # (N+1, K, J, B)
    style: DrivingStyle
    ref: ReferenceProfile
    weights: CostWeights
    ug: ControlGrid
    grid: GridSpec
    bounds: StateBounds
    geometry: LaneGeometry
    dt: float

    @property
    def n_steps(self):
        return self.V.shape[0] - 1

    @property
    def v_nodes(self):
        return np.linspace(0.0, self.bounds.v_max, self.V.shape[3])

    def packed(self):
        w = pack_weights(self.weights, self.style, self.geometry)
        geo = pack_geometry(self.grid, self.bounds, self.geometry, self.dt, self.V.shape[3])
        return w, geo

    def relaxed(self, new: "ValueTable", gamma: float) -> "ValueTable":
        if new.V.shape != self.V.shape:
            raise ValueError("value table shapes differ")
        return ValueTable((1 - gamma) * self.V + gamma * new.V, self.style, self.ref, self.weights, self.ug,
                          self.grid, self.bounds, self.geometry, self.dt)


def _lane_args(grid: GridSpec, geometry: LaneGeometry):
    centers = np.asarray(geometry.lane_centers, dtype=float)
    return centers, grid.d0 + 0.5 * grid.dd, grid.d_end - 0.5 * grid.dd


def hjb_backward_solve(rho_seq, theta: DrivingStyle, ref: ReferenceProfile, w: CostWeights, grid: GridSpec,
                       ug: ControlGrid, dt: float, *, fields: FieldProvider | None = None, n_steps: int | None = None,
                       bounds: StateBounds = StateBounds(), geometry: LaneGeometry = LaneGeometry(),
                       n_v: int = 9, return_policy: bool = False, window=None):
    """Semi-Lagrangian backward sweep; V[N] is the terminal cost at the nodes.

    The final backward step evaluates the terminal cost exactly at each
    successor, earlier steps interpolate V[t+1] trilinearly. `window` is an
    optional (n_steps, 2) array of s-cell ranges [k_lo, k_hi) to update per
    step; it must contain every cell whose successors are queried later.
    """
    if n_steps is None:
        if rho_seq is None:
            raise ValueError("need rho_seq or n_steps")
        n_steps = len(rho_seq) - 1
    if n_steps < 1:
        raise ValueError("horizon must span at least one step")
    cmax = bounds.v_max * dt / grid.ds
    if cmax > 1.0 + 1e-12 or bounds.v_d_max * dt / grid.dd > 1.0 + 1e-12:
        raise ValueError("semi-Lagrangian step exceeds one cell; reduce dt")
    if fields is None:
        fields = FieldProvider(rho_seq, None, grid, bounds, enabled=False, n_v=n_v)
    slab = STYLE_INDEX[theta.cls]
    K, J = grid.K, grid.J
    B = n_v
    V = np.empty((n_steps + 1, K, J, B))
    policy = np.empty((n_steps, K, J, B), dtype=np.int16) if return_policy else None
    T = n_steps * dt
    wv = pack_weights(w, theta, geometry)
    geo = pack_geometry(grid, bounds, geometry, dt, B)
    sc = grid.s_centers
    dc = grid.d_centers
    vn = np.linspace(0.0, bounds.v_max, B)
    dT = np.array([ref.d_target(T, d) for d in dc])
    V[n_steps] = (w.Q[0] * (sc[:, None, None] - ref.s_ref(T)) ** 2 + w.Q[1] * (vn[None, None, :] - ref.v_des) ** 2
                  + w.Q[3] * (dc - dT)[None, :, None] ** 2)
    order = ug.order()
    centers, d_lo, d_hi = _lane_args(grid, geometry)
    arg = np.empty((K, J, B), dtype=np.int64)
    for n in range(n_steps - 1, -1, -1):
        t = n * dt
        risk, mexp, h0, h1, h3 = fields.at(n, slab)
        kn.hjb_step(V[n + 1], risk, mexp, h0, h1, h3, ug.ua, ug.ud, ug.delta, order, wv, geo, centers, d_lo, d_hi,
                    ref.s_ref(t), ref.v_des, ref.d_target(t), n == n_steps - 1, ref.s_ref(T), ref.d_target(T),
                    V[n], arg, *((int(window[n][0]), int(window[n][1])) if window is not None else (0, -1)))
        if policy is not None:
            policy[n] = arg
    table = ValueTable(V, theta, ref, w, ug, grid, bounds, geometry, dt)
    return (table, policy) if return_policy else table


def field_at_states(fields: FieldProvider, n: int, slab: int, S, D, Vv, geo):
    risk, mexp, h0, h1, h3 = fields.at(n, slab)
    S, D, Vv = (np.ascontiguousarray(a, dtype=float) for a in (S, D, Vv))
    R = kn.interp_fields(risk, S, D, Vv, geo)
    M = kn.interp_fields(mexp, S, D, Vv, geo)
    zero = np.zeros_like(Vv)
    H = [kn.interp_fields(np.ascontiguousarray(np.repeat(h[:, :, None], 2, axis=2)), S, D, zero, geo)
         for h in (h0, h1, h3)]
    return R, M, H[0], H[1], H[2]


def extract_batch(V: ValueTable, fields: FieldProvider | None, n: int, S, D, Vv, u_prev=None):
    """Argmin control indices and values at many (s, d, v) states at step n."""
    if not (0 <= n < V.n_steps):
        raise ValueError(f"step {n} outside value table horizon")
    wv, geo = V.packed()
    slab = STYLE_INDEX[V.style.cls]
    S, D, Vv = (np.ascontiguousarray(np.atleast_1d(a), dtype=float) for a in (S, D, Vv))
    if fields is None:
        fields = FieldProvider(None, None, V.grid, V.bounds, enabled=False, n_v=V.V.shape[3])
    R, M, H0, H1, H3 = field_at_states(fields, n, slab, S, D, Vv, geo)
    if u_prev is None:
        UPA = np.zeros_like(S)
        UPD = np.zeros_like(S)
        use_jerk = False
    else:
        UPA = np.ascontiguousarray(np.broadcast_to(u_prev[0], S.shape), dtype=float)
        UPD = np.ascontiguousarray(np.broadcast_to(u_prev[1], S.shape), dtype=float)
        use_jerk = True
    idx = np.empty(S.shape[0], dtype=np.int64)
    val = np.empty(S.shape[0])
    centers, d_lo, d_hi = _lane_args(V.grid, V.geometry)
    T = V.n_steps * V.dt
    t = n * V.dt
    kn.extract_batch(V.V[n + 1], S, D, Vv, R, M, H0, H1, H3, UPA, UPD, use_jerk, V.ug.ua, V.ug.ud, V.ug.delta,
                     V.ug.order(), wv, geo, centers, d_lo, d_hi, V.ref.s_ref(t), V.ref.v_des, V.ref.d_target(t),
                     n == V.n_steps - 1, V.ref.s_ref(T), V.ref.d_target(T), idx, val)
    return idx, val


def extract_policy(V: ValueTable, fields: FieldProvider | None, n: int, x, u_prev: ControlInput | None = None
                   ) -> ControlInput:
    """Argmin control at step n for a state (VehicleState or (s, d, v) cell tuple)."""
    if isinstance(x, VehicleState):
        s, d, v = x.s, x.d, x.v_s
    else:
        s, d, v = x
    up = None if u_prev is None else (u_prev.u_a, u_prev.u_d)
    idx, _ = extract_batch(V, fields, n, [s], [d], [v], up)
    return V.ug.control(int(idx[0]))


def q_value(V: ValueTable, fields: FieldProvider | None, n: int, s: float, d: float, v: float,
            u: ControlInput) -> float:
    """L(x, u) dt + V[n+1](successor) for one control, evaluated through the public cost path."""
    wv, geo = V.packed()
    slab = STYLE_INDEX[V.style.cls]
    if fields is None:
        fields = FieldProvider(None, None, V.grid, V.bounds, enabled=False, n_v=V.V.shape[3])
    R, M, H0, H1, H3 = field_at_states(fields, n, slab, [s], [d], [v], geo)
    centers, d_lo, d_hi = _lane_args(V.grid, V.geometry)
    s2, d2, v2, vd, pen = kn.successor(s, d, v, u.u_a, u.u_d, float(u.delta), H0[0], H1[0], H3[0], geo, centers,
                                       d_lo, d_hi)
    t = n * V.dt
    T = V.n_steps * V.dt
    x = reduced_embedding(s, d, v, u, V.bounds)
    parts = cost_components(x, u, u, None, V.style, V.ref, V.weights, t=t, dt=V.dt, geometry=V.geometry,
                            field_values=(R[0], math.log(M[0])))
    if n == V.n_steps - 1:
        nxt = terminal_cost(VehicleState(s2, v2, 0.0, d2, 0.0, 0.0), V.style, V.ref, V.weights, T)
    else:
        nxt = kn.interp3(V.V[n + 1], (s2 - V.grid.s0) / V.grid.ds - 0.5, (d2 - V.grid.d0) / V.grid.dd - 0.5,
                         v2 / geo[kn.G_DV])
    return sum(parts) * V.dt + nxt + pen


def dump_value_slices(V: ValueTable, out_dir, steps=None) -> list:
    """CSV slices of the value table per time step (rows: s cells, cols: d cells x speed nodes)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    steps = range(0, V.n_steps + 1, max(1, V.n_steps // 10)) if steps is None else steps
    paths = []
    for n in steps:
        p = out / f"value_{V.style.cls.value}_n{n:05d}.csv"
        np.savetxt(p, V.V[n].reshape(V.grid.K, -1), delimiter=",", fmt="%.8e")
        paths.append(p)
    return paths
