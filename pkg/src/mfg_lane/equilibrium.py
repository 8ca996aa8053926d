"""Relaxed forward-backward fixed-point iteration between style densities and value tables."""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernels as kn
from .control import (ControlGrid, CostWeights, FieldProvider, ReferenceProfile, ValueTable, _lane_args,
                      extract_batch, field_at_states, hjb_backward_solve, pack_geometry)
from .core import STYLE_INDEX, STYLE_ORDER, ScenarioConfig, StyleClass, VehicleSpec
from .grid import (DensityTensor, GridSpec, NoiseModel, VelocityFieldTensor, _gauss_cell_weights, default_alphas,
                   fp_step)
from .interaction import InteractionParams
from .safety import SafetyParams

N_SLABS = len(STYLE_ORDER)


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("MFG_LANE_THREADS", "1")))
    except ValueError:
        return 1


@dataclass(frozen=True)
class SolverParams:
    gamma: float = 0.5
    eps_conv: float = 1e-3
    eps_nash: float = 1e-2
    max_iters: int = 50
    T: float | None = None          # defaults to the scenario horizon
    dt: float = 0.1
    seed: int = 0
    K: int = 150
    J: int = 15
    n_v: int = 9
    spread: tuple = (5.0, 0.8)      # initial bump std in s and d (m)
    sigma_pos: float = 0.3
    sigma_vel: float = 0.2
    boundary: str = "absorbing"
    warm_start: int = 1             # undamped sweeps before the relaxed loop
    reach_window: bool = True       # restrict backward sweeps to forward-reachable s cells
    coupling: bool = True
    risk: bool = True
    mass_tol: float = 1e-6

    def __post_init__(self):
        if not (0.0 < self.gamma < 1.0):
            raise ValueError("gamma must lie in (0, 1)")
        if self.eps_conv <= 0 or self.eps_nash <= 0:
            raise ValueError("tolerances must be positive")
        if self.warm_start < 0:
            raise ValueError("warm_start must be nonnegative")
        if self.max_iters < 1 or self.dt <= 0:
            raise ValueError("max_iters >= 1 and dt > 0 required")

    def horizon(self, scenario: ScenarioConfig) -> float:
        return scenario.horizon if self.T is None else self.T

    def n_steps(self, scenario: ScenarioConfig) -> int:
        return int(round(self.horizon(scenario) / self.dt))


class GameSetup:
    """Everything about a scenario that stays fixed across fixed-point iterations."""

    def __init__(self, scenario: ScenarioConfig, params: SolverParams,
                 sp: SafetyParams = SafetyParams(), ip: InteractionParams = InteractionParams(),
                 weights: dict | None = None):
        self.scenario, self.params, self.sp, self.ip = scenario, params, sp, ip
        self.grid = GridSpec.from_bounds(scenario.bounds, params.K, params.J)
        self.N = params.n_steps(scenario)
        self.dt = params.dt
        self.styles = [scenario.style_of(c) for c in STYLE_ORDER]
        self.alphas = tuple(s.alpha_aggr for s in self.styles)
        scale = 0.5 + np.array(self.alphas)
        self.noise = NoiseModel(params.sigma_pos * scale, params.sigma_vel * scale)
        self.controlled = [v for v in scenario.vehicles if v.id not in scenario.replay]
        self.replayed = [v for v in scenario.vehicles if v.id in scenario.replay]
        self.slabs = sorted({STYLE_INDEX[v.style] for v in self.controlled})
        init = scenario.initial_states()
        weights = weights or {}
        self.weights, self.refs, self.ugs = {}, {}, {}
        for ell in self.slabs:
            st = self.styles[ell]
            self.weights[ell] = weights.get(ell) or CostWeights.for_style(st)
            members = [v for v in self.controlled if STYLE_INDEX[v.style] == ell]
            s0 = float(np.mean([init[v.id].s for v in members]))
            if any(v.id == scenario.ego_id for v in members):
                self.refs[ell] = ReferenceProfile.constant(init[scenario.ego_id].s, st.v_des, scenario.target_d)
            else:
                self.refs[ell] = ReferenceProfile.lane_keeping(s0, st.v_des, scenario.geometry)
            self.ugs[ell] = ControlGrid.for_style(st, scenario.bounds)
        self.mass_scale = float(len(scenario.vehicles))
        self._replay_cache = {}
        self.windows = {ell: self._reach_window(ell, init) for ell in self.slabs} if params.reach_window else {}

    def _reach_window(self, ell, init):
        """Per-step s-cell ranges that can hold mass of slab ell (no reversing, speed <= v_max)."""
        g, b = self.grid, self.scenario.bounds
        s = [init[v.id].s for v in self.controlled if STYLE_INDEX[v.style] == ell]
        pad = 3.0 * self.params.spread[0] + 3 * g.ds
        lo = min(s) - pad
        step = (b.v_max + 0.5 * b.a_max * self.dt) * self.dt
        n = np.arange(self.N)
        hi = max(s) + pad + step * (n + 1)
        k_lo = max(int(math.floor((lo - g.s0) / g.ds)), 0)
        k_hi = np.minimum(np.ceil((hi - g.s0) / g.ds).astype(int), g.K)
        return np.stack([np.full(self.N, k_lo), k_hi], axis=1)

    # -- densities ---------------------------------------------------------------------------
    def _bump(self, s, d):
        g = self.grid
        s_edges = g.s0 + np.arange(g.K + 1) * g.ds
        d_edges = g.d0 + np.arange(g.J + 1) * g.dd
        b = np.outer(_gauss_cell_weights(d_edges, d, self.params.spread[1]),
                     _gauss_cell_weights(s_edges, s, self.params.spread[0]))
        tot = b.sum()
        return b / tot if tot > 0 else b

    def initial(self):
        """(mass, momentum) arrays of controlled vehicles, each (J, K, L)."""
        g = self.grid
        rho = np.zeros((g.J, g.K, N_SLABS))
        mom = np.zeros_like(rho)
        init = self.scenario.initial_states()
        for v in self.controlled:
            x = init[v.id]
            if not g.contains(x.s, x.d):
                raise ValueError(f"vehicle {v.id} at (s={x.s}, d={x.d}) lies outside the grid")
            b = self._bump(x.s, x.d)
            rho[:, :, STYLE_INDEX[v.style]] += b
            mom[:, :, STYLE_INDEX[v.style]] += b * x.v_s
        return rho, mom

    def replay_state(self, vid, n):
        seg = self.scenario.replay[vid]
        return seg.states[min(n, len(seg.states) - 1)]

    def replay_layer(self, n):
        """Mass and momentum of replayed vehicles at step n (known trajectories, not transported)."""
        hit = self._replay_cache.get(n)
        if hit is not None:
            return hit
        g = self.grid
        rho = np.zeros((g.J, g.K, N_SLABS))
        mom = np.zeros_like(rho)
        for v in self.replayed:
            x = self.replay_state(v.id, n)
            if not g.contains(x.s, x.d):
                continue
            b = self._bump(x.s, x.d)
            rho[:, :, STYLE_INDEX[v.style]] += b
            mom[:, :, STYLE_INDEX[v.style]] += b * x.v_s
        self._replay_cache[n] = (rho, mom)
        return rho, mom

    def slab_speeds(self, rho, mom):
        m = rho.sum(axis=(0, 1))
        p = mom.sum(axis=(0, 1))
        dflt = np.array([s.v_des for s in self.styles])
        return np.where(m > 1e-12, p / np.maximum(m, 1e-300), dflt)

    # -- operators ---------------------------------------------------------------------------
    def fields(self, rho_seq, speeds) -> FieldProvider:
        return FieldProvider(rho_seq, speeds, self.grid, self.scenario.bounds, self.sp, self.ip, self.styles,
                             self.params.n_v, enabled=self.params.risk or self.params.coupling,
                             coupling=self.params.coupling, targets=self.slabs)

    def prebuild(self, fields: FieldProvider):
        for n in range(self.N + 1):
            if fields.enabled:
                fields.at(n, self.slabs[0])

    def backward(self, fields: FieldProvider) -> dict:
        self.prebuild(fields)
        if not self.params.risk and fields.enabled:
            fields = _NoRisk(fields)

        def solve(ell):
            return hjb_backward_solve(None, self.styles[ell], self.refs[ell], self.weights[ell], self.grid,
                                      self.ugs[ell], self.dt, fields=fields, n_steps=self.N,
                                      bounds=self.scenario.bounds, geometry=self.scenario.geometry,
                                      n_v=self.params.n_v, window=self.windows.get(ell))

        nw = min(worker_count(), len(self.slabs))
        if nw > 1:
            with ThreadPoolExecutor(nw) as ex:
                tables = list(ex.map(solve, self.slabs))
        else:
            tables = [solve(ell) for ell in self.slabs]
        return dict(zip(self.slabs, tables))

    def forward(self, values: dict | None, fields: FieldProvider | None):
        """Density sequence (N+1 tensors) and per-step slab mean speeds under the given policies.

        With `values=None` every cell cruises at its transport speed.
        """
        g, dt, N = self.grid, self.dt, self.N
        rho, mom = self.initial()
        if fields is not None and not self.params.risk and fields.enabled:
            fields = _NoRisk(fields)
        seq, speeds, flow = [], [], []
        leak = np.zeros(N_SLABS)
        sc, dc = g.s_centers, g.d_centers
        vmax = self.scenario.bounds.v_max
        cap_s, cap_d = 0.99 * g.ds / dt, 0.99 * g.dd / dt
        for n in range(N + 1):
            rr, rm = self.replay_layer(n)
            seq.append(DensityTensor(rho + rr, g, leak, self.alphas))
            speeds.append(self.slab_speeds(rho + rr, mom + rm))
            if n == N:
                break
            with np.errstate(invalid="ignore", divide="ignore"):
                U = np.where(rho > 1e-14, mom / np.where(rho > 1e-14, rho, 1.0), speeds[-1][None, None, :])
            U = np.clip(U, 0.0, vmax)
            Vs = U.copy()
            Vd = np.zeros_like(U)
            Un = U.copy()
            if values is not None:
                for ell in self.slabs:
                    jj, kk = np.nonzero(rho[:, :, ell] > self.params.mass_tol)
                    if jj.size == 0:
                        continue
                    S, D, Vv = sc[kk], dc[jj], U[jj, kk, ell]
                    S2, D2, V2 = policy_successors(values[ell], fields, n, S, D, Vv)
                    Vs[jj, kk, ell] = (S2 - S) / dt
                    Vd[jj, kk, ell] = (D2 - D) / dt
                    Un[jj, kk, ell] = V2
            np.clip(Vs, -cap_s, cap_s, out=Vs)
            np.clip(Vd, -cap_d, cap_d, out=Vd)
            vel = VelocityFieldTensor(Vs, Vd)
            cur = DensityTensor(rho, g, leak, self.alphas)
            nxt = fp_step(cur, vel, self.noise, dt, self.params.boundary)
            pm = fp_step(DensityTensor(rho * Un, g, None, self.alphas), vel, self.noise, dt, self.params.boundary)
            rho, mom, leak = np.array(nxt.values), np.array(pm.values), np.array(nxt.leak)
            rho_prev = cur.values
            tot = rho_prev.sum(axis=2)
            safe = np.where(tot > 0, tot, 1.0)
            flow.append(np.stack([(Vs * rho_prev).sum(axis=2) / safe, (Vd * rho_prev).sum(axis=2) / safe], axis=-1))
        flow.append(flow[-1] if flow else np.zeros((g.J, g.K, 2)))
        self.last_flow = flow
        return seq, np.array(speeds)


class _NoRisk:
    """Field view with the density risk removed but drift coupling kept."""

    def __init__(self, inner):
        self.inner = inner
        self.enabled = inner.enabled

    def at(self, n, slab):
        risk, mexp, h0, h1, h3 = self.inner.at(n, slab)
        return np.zeros_like(risk), np.ones_like(mexp), h0, h1, h3


def policy_successors(V: ValueTable, fields, n, S, D, Vv):
    """Deterministic successors of many states under the argmin policy of V at step n."""
    S, D, Vv = (np.ascontiguousarray(a, dtype=float) for a in (S, D, Vv))
    idx, _ = extract_batch(V, fields, n, S, D, Vv)
    _, geo = V.packed()
    if fields is None:
        z = np.zeros_like(S)
        H0 = H1 = H3 = z
    else:
        _, _, H0, H1, H3 = field_at_states(fields, n, STYLE_INDEX[V.style.cls], S, D, Vv, geo)
    centers, d_lo, d_hi = _lane_args(V.grid, V.geometry)
    S2, D2, V2 = np.empty_like(S), np.empty_like(S), np.empty_like(S)
    kn.successor_batch(S, D, Vv, idx, H0, H1, H3, V.ug.ua, V.ug.ud, V.ug.delta, geo, centers, d_lo, d_hi,
                       S2, D2, V2)
    return S2, D2, V2


@dataclass
class EquilibriumState:
    rho_seq: list                  # DensityTensor per time step
    slab_speeds: np.ndarray        # (N+1, L) mass-weighted mean speed per style
    values: dict                   # slab index -> ValueTable
    mass_scale: float
    value_scale: float
    residuals: list = field(default_factory=list)
    contraction: float = math.nan
    iterations: int = 0
    converged: bool = False
    setup: GameSetup | None = None
    _fields: FieldProvider | None = None
    flow: list | None = None        # (J, K, 2) mass-weighted mean velocity per step, last forward sweep

    def fields(self) -> FieldProvider:
        """Risk/drift fields of the (final) density sequence."""
        if self._fields is None:
            if self.setup is None:
                raise ValueError("state carries no game setup")
            self._fields = self.setup.fields(self.rho_seq, self.slab_speeds)
        return self._fields

    def total_mass(self):
        return np.array([r.mass() for r in self.rho_seq])


@dataclass(frozen=True)
class OperatorOutput:
    rho_seq: list
    slab_speeds: np.ndarray
    values: dict


def _check_shapes(a_rho, b_rho, a_vals, b_vals):
    if len(a_rho) != len(b_rho) or any(x.values.shape != y.values.shape for x, y in zip(a_rho, b_rho)):
        raise ValueError("density sequences differ in shape")
    if set(a_vals) != set(b_vals) or any(a_vals[k].V.shape != b_vals[k].V.shape for k in a_vals):
        raise ValueError("value tables differ in shape")


def relax_values(old: dict, new: dict, gamma: float) -> dict:
    return {k: old[k].relaxed(new[k], gamma) for k in old}


def relaxed_update(prev: EquilibriumState, out: OperatorOutput, gamma: float) -> EquilibriumState:
    """Convex blend of the previous iterate and the operator output; step masses kept at their previous values."""
    _check_shapes(prev.rho_seq, out.rho_seq, prev.values, out.values)
    if gamma == 0.0:
        rho_seq = list(prev.rho_seq)
        speeds = prev.slab_speeds.copy()
    elif gamma == 1.0:
        rho_seq = list(out.rho_seq)
        speeds = np.array(out.slab_speeds, dtype=float)
    else:
        rho_seq = []
        for a, b in zip(prev.rho_seq, out.rho_seq):
            mixed = (1 - gamma) * a.values + gamma * b.values
            tot = mixed.sum()
            m0 = a.values.sum()
            if tot > 0:
                mixed = mixed * (m0 / tot)
            rho_seq.append(DensityTensor(mixed, a.grid, a.leak, a.alphas))
        speeds = (1 - gamma) * prev.slab_speeds + gamma * np.asarray(out.slab_speeds)
    vals = relax_values(prev.values, out.values, gamma)
    return EquilibriumState(rho_seq, speeds, vals, prev.mass_scale, prev.value_scale, list(prev.residuals),
                            prev.contraction, prev.iterations, prev.converged, prev.setup)


def convergence_metric(a: EquilibriumState, b: EquilibriumState) -> float:
    """Normalised L1 distance of density sequences plus scaled mean absolute value-table difference."""
    _check_shapes(a.rho_seq, b.rho_seq, a.values, b.values)
    dens = sum(float(np.abs(x.values - y.values).sum()) for x, y in zip(a.rho_seq, b.rho_seq))
    dens /= a.mass_scale * len(a.rho_seq)
    if a.values:
        diffs = [float(np.mean(np.abs(a.values[k].V - b.values[k].V))) for k in sorted(a.values)]
        val = float(np.mean(diffs)) / a.value_scale
    else:
        val = 0.0
    return dens + val


def fit_contraction(residuals) -> float:
    """Least-squares slope of log residual versus iteration, returned as a ratio."""
    r = np.asarray([x for x in residuals], dtype=float)
    keep = r > 0
    if keep.sum() < 2:
        return 0.0 if len(r) and np.all(r == 0) else math.nan
    k = np.arange(len(r))[keep]
    slope = np.polyfit(k, np.log(r[keep]), 1)[0]
    return float(math.exp(slope))


def run_equilibrium(scenario: ScenarioConfig, params: SolverParams = SolverParams(), *,
                    sp: SafetyParams = SafetyParams(), ip: InteractionParams = InteractionParams(),
                    weights: dict | None = None, progress=None) -> EquilibriumState:
    """Fixed-point iteration; returns a state flagged unconverged when max_iters is exhausted."""
    setup = GameSetup(scenario, params, sp, ip, weights)
    rho, speeds = setup.forward(None, None)
    fields = setup.fields(rho, speeds)
    values = setup.backward(fields)
    rho, speeds = setup.forward(values, fields)
    for _ in range(params.warm_start):
        fields = setup.fields(rho, speeds)
        values = setup.backward(fields)
        rho, speeds = setup.forward(values, fields)
    vscale = float(np.mean([np.mean(np.abs(v.V)) for v in values.values()])) or 1.0
    state = EquilibriumState(rho, speeds, values, setup.mass_scale, vscale, setup=setup)
    for it in range(params.max_iters):
        fields = setup.fields(state.rho_seq, state.slab_speeds)
        v_new = setup.backward(fields)
        v_rel = relax_values(state.values, v_new, params.gamma)
        rho_new, sp_new = setup.forward(v_rel, fields)
        nxt = relaxed_update(state, OperatorOutput(rho_new, sp_new, v_new), params.gamma)
        r = convergence_metric(state, nxt)
        nxt.residuals.append(r)
        nxt.iterations = it + 1
        nxt._fields = None
        state = nxt
        if progress is not None:
            progress(it + 1, r)
        if r < params.eps_conv:
            state.converged = True
            break
    state.contraction = fit_contraction(state.residuals)
    state.flow = setup.last_flow
    return state


def best_response(eq: EquilibriumState) -> dict:
    """Value tables re-solved against the frozen final density sequence."""
    return eq.setup.backward(eq.fields())


def policy_value(eq: EquilibriumState, ell: int) -> np.ndarray:
    """Cost-to-go of following the equilibrium policy of slab ell against the frozen final densities."""
    setup = eq.setup
    V = eq.values[ell]
    fields = eq.fields()
    setup.prebuild(fields)
    if not setup.params.risk and fields.enabled:
        fields = _NoRisk(fields)
    w, geo = V.packed()
    ug, ref = V.ug, V.ref
    order = ug.order()
    centers, d_lo, d_hi = _lane_args(V.grid, V.geometry)
    N = V.n_steps
    T = N * V.dt
    out = np.empty_like(V.V)
    out[N] = V.V[N]
    scratch = np.empty(V.V.shape[1:])
    arg = np.empty(V.V.shape[1:], dtype=np.int64)
    window = setup.windows.get(ell)
    for n in range(N - 1, -1, -1):
        risk, mexp, h0, h1, h3 = fields.at(n, ell)
        t = n * V.dt
        args = (ref.s_ref(t), ref.v_des, ref.d_target(t), n == N - 1, ref.s_ref(T), ref.d_target(T))
        k_lo, k_hi = (int(window[n][0]), int(window[n][1])) if window is not None else (0, V.grid.K)
        kn.hjb_step(V.V[n + 1], risk, mexp, h0, h1, h3, ug.ua, ug.ud, ug.delta, order, w, geo, centers, d_lo, d_hi,
                    *args, scratch, arg, k_lo, k_hi)
        kn.policy_eval_step(out[n + 1], risk, mexp, h0, h1, h3, ug.ua, ug.ud, ug.delta, w, geo, centers, d_lo,
                            d_hi, *args, arg, out[n])
        # cells the backward sweep skips carry the next step's values, as in the solve
        out[n, :k_lo] = out[n + 1, :k_lo]
        out[n, k_hi:] = out[n + 1, k_hi:]
    return out


@dataclass(frozen=True)
class NashSample:
    n_times: int = 5
    cells_per_time: int = 4
    seed: int = 0


def nash_gap(eq: EquilibriumState, scenario: ScenarioConfig | None = None, sample: NashSample = NashSample()):
    """Largest best-response improvement over sampled (style, step, cell) triples.

    Returns (absolute gap, relative gap) where the relative gap divides by
    the sample's own cost-to-go under the equilibrium policy.
    """
    setup = eq.setup
    br = best_response(eq)
    rng = np.random.default_rng(sample.seed)
    g = setup.grid
    N = setup.N
    gap_abs, gap_rel = 0.0, 0.0
    for ell in setup.slabs:
        Vpi = policy_value(eq, ell)
        Vbr = br[ell].V
        _, geo = eq.values[ell].packed()
        for n in np.unique(np.linspace(0, N - 1, sample.n_times).astype(int)):
            m = eq.rho_seq[n].values[:, :, ell]
            jj, kk = np.nonzero(m > setup.params.mass_tol)
            if jj.size == 0:
                continue
            pick = [int(np.argmax(m[jj, kk]))]
            extra = rng.choice(jj.size, size=min(sample.cells_per_time, jj.size), replace=False)
            for i in pick + list(extra):
                s, d = g.s_centers[kk[i]], g.d_centers[jj[i]]
                v = float(eq.slab_speeds[n, ell])
                fs, fd, fv = (s - g.s0) / g.ds - 0.5, (d - g.d0) / g.dd - 0.5, v / geo[kn.G_DV]
                a = kn.interp3(Vpi[n], fs, fd, fv)
                b = kn.interp3(Vbr[n], fs, fd, fv)
                gap = max(0.0, a - b)
                gap_abs = max(gap_abs, gap)
                if a > 0:
                    gap_rel = max(gap_rel, gap / a)
    return gap_abs, gap_rel


def two_vehicle_fixture(horizon: float = 10.0) -> ScenarioConfig:
    """Ego in the middle lane and one normal driver ahead in the target lane."""
    vs = [VehicleSpec(1, StyleClass.EGO, 1, 0.0, 25.0), VehicleSpec(2, StyleClass.NORMAL, 0, 20.0, 24.0)]
    return ScenarioConfig(name="two_vehicle", vehicles=vs, ego_id=1, target_lane=0, horizon=horizon)


SMALL_GRID = dict(K=40, J=9)


def perturbation_test(scenario: ScenarioConfig, deltas=(0.01, 0.02, 0.04), params: SolverParams = SolverParams(),
                      base: EquilibriumState | None = None):
    """Equilibrium distance between the base scenario and one with every style vector scaled by (1 + delta)."""
    base = base or run_equilibrium(scenario, params)
    rows = []
    for dlt in deltas:
        styles = {c: scenario.style_of(c).scaled(1.0 + dlt) for c in STYLE_ORDER}
        pert = run_equilibrium(replace(scenario, styles=styles), params)
        pert.mass_scale, pert.value_scale = base.mass_scale, base.value_scale
        rows.append({"delta": float(dlt), "distance": convergence_metric(base, pert),
                     "base_converged": base.converged, "converged": pert.converged})
    return rows
