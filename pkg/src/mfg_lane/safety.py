"""Risk functions: dynamic safety distance, continuous/discrete risk, TTC and penalty shapes.

Also hosts the braking-envelope filter that keeps the closed-loop simulation
inside the collision-free set.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np
from scipy import fft as sfft

from .core import STYLE_ORDER, DrivingStyle, StateBounds, StyleClass, VehicleState, style_catalog
from .grid import DensityTensor, GridSpec, NoiseModel
from ._kernels import accumulate_spectra
from .interaction import normalized_theta

BOUNDARY_CAP = 1e9

AGGRESSIVE_GROUP = frozenset({StyleClass.AGGRESSIVE, StyleClass.SUPER_AGGRESSIVE, StyleClass.COMPETITIVE})
CALM_GROUP = frozenset({StyleClass.CONSERVATIVE, StyleClass.NORMAL})


@dataclass(frozen=True)
class SafetyParams:
    d_base: float = 10.0
    d_min: float = 3.0
    d_danger: float = 8.0
    d_safe_threshold: float = 15.0
    eps_coll: float = 0.05
    T_pred: float = 3.0
    T_critical: float = 3.0
    gamma_pred: float = 0.5
    delta_pred: float = 0.2
    sigma_pred: float = 1.0
    zeta_density: float = 0.3
    zeta_aggr: float = 0.2
    eta: float = 4.0
    nu: float = 1.0
    lambda_v: float = 0.5
    lambda_phi: float = 0.3
    eps_v: float = 0.1
    xi: float = 2.0
    beta_boundary: float = 10.0
    sigma_discrete: float = 20.0
    zeta_ttc: float = 5.0
    kappa_hetero: float = 0.1
    sigma_base_unc: float = 0.5
    v_ref: float = 25.0
    # geometry of the collision footprint
    collision_dist: float = 2.0
    lateral_conflict: float = 2.5

    def __post_init__(self):
        if not (self.d_min < self.d_danger < self.d_safe_threshold):
            raise ValueError("need d_min < d_danger < d_safe_threshold")
        if self.eta <= 2 or self.nu < 1 or self.xi < 2:
            raise ValueError("need eta > 2, nu >= 1, xi >= 2")
        for name in ("d_base", "T_pred", "sigma_pred", "sigma_discrete", "sigma_base_unc", "v_ref", "eps_v"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@functools.lru_cache(maxsize=1)
def theta_norm_max() -> float:
    return max(float(np.linalg.norm(style_catalog(c).vector())) for c in STYLE_ORDER)


def theta_distance(ti: DrivingStyle, tj: DrivingStyle) -> float:
    return float(np.linalg.norm(np.subtract(ti.vector(), tj.vector())))


def amplification(dv, dphi, ti: DrivingStyle, tj: DrivingStyle, da=0.0, dvd=0.0,
                  p: SafetyParams = SafetyParams(), bounds: StateBounds = StateBounds()) -> float:
    """Product of the five relative-motion / style amplification factors."""
    f = (abs(dv), abs(dphi), theta_distance(ti, tj), abs(da), abs(dvd))
    g = (p.v_ref, math.pi, theta_norm_max(), bounds.a_max, bounds.v_d_max)
    beta = (ti.omega_interact, ti.alpha_aggr, 1.0, ti.kappa_safe, ti.alpha_aggr)
    out = 1.0
    for fk, gk, bk in zip(f, g, beta):
        out *= 1.0 + bk * fk / gk
    return out


def temporal_factor(t: float, p: SafetyParams) -> float:
    return 1.0 + p.gamma_pred * (t / p.T_pred) ** 2 + p.delta_pred * math.exp(-(p.T_pred - t) ** 2 / p.sigma_pred ** 2)


def surrounding_factor(rho_local: float, alpha_local: float, p: SafetyParams) -> float:
    return 1.0 + p.zeta_density * rho_local + p.zeta_aggr * alpha_local


def heading_of(x: VehicleState) -> float:
    return math.atan2(x.v_d, x.v_s) if (x.v_s or x.v_d) else 0.0


def dynamic_safety_distance(xi: VehicleState, xj: VehicleState, ti: DrivingStyle, tj: DrivingStyle, t: float,
                            rho_local: float, alpha_local: float, p: SafetyParams = SafetyParams(),
                            bounds: StateBounds = StateBounds()) -> float:
    xi_f = amplification(xi.v_s - xj.v_s, heading_of(xi) - heading_of(xj), ti, tj,
                         xi.a_s - xj.a_s, xi.v_d - xj.v_d, p, bounds)
    return p.d_base * xi_f * temporal_factor(t, p) * surrounding_factor(rho_local, alpha_local, p)


def risk_kernel(xi: VehicleState, x: VehicleState, ti: DrivingStyle, t: DrivingStyle, d_safe: float,
                p: SafetyParams = SafetyParams()) -> float:
    if d_safe <= 0:
        raise ValueError("d_safe must be positive")
    d = math.hypot(xi.s - x.s, xi.d - x.d)
    dv = abs(xi.v_s - x.v_s)
    dphi = abs(heading_of(xi) - heading_of(x))
    return (math.exp(-(d / d_safe) ** p.eta)
            * (1 + p.lambda_v * dv / (max(xi.v_s, x.v_s) + p.eps_v))
            * (1 + p.lambda_phi * dphi / math.pi))


def behavioral_compatibility(ti: DrivingStyle, tj: DrivingStyle) -> float:
    ci, cj = ti.cls, tj.cls
    if ci == StyleClass.EGO:
        return 0.8
    if ci in AGGRESSIVE_GROUP and cj in AGGRESSIVE_GROUP:
        return 2.0
    if (ci in AGGRESSIVE_GROUP and cj in CALM_GROUP) or (ci in CALM_GROUP and cj in AGGRESSIVE_GROUP):
        return 1.5
    return 1.0


def discrete_weight(xi: VehicleState, xj: VehicleState, ti: DrivingStyle, tj: DrivingStyle,
                    p: SafetyParams = SafetyParams()) -> float:
    d = math.hypot(xi.s - xj.s, xi.d - xj.d)
    return math.exp(-d / p.sigma_discrete) / (1 + ti.tau_react * tj.tau_react) * behavioral_compatibility(ti, tj)


def smooth_risk(d: float, d_safe: float, xi: float = 2.0) -> float:
    if d_safe <= 0:
        raise ValueError("d_safe must be positive")
    if d <= d_safe / 2:
        return 1.0
    if d <= d_safe:
        return (1 - (2 * d - d_safe) / d_safe) ** xi
    return 0.0


def boundary_penalty(d_c2b: float, p: SafetyParams = SafetyParams()) -> float:
    if d_c2b <= 0:
        return BOUNDARY_CAP
    if d_c2b <= p.d_safe_threshold:
        return min(p.beta_boundary * (p.d_min / d_c2b) ** 2, BOUNDARY_CAP)
    return 0.0


def ttc(xi: VehicleState, xj: VehicleState) -> float:
    ds, dd = xj.s - xi.s, xj.d - xi.d
    d = math.hypot(ds, dd)
    if d == 0:
        raise ValueError("TTC undefined for coincident positions")
    closing = (xj.v_s - xi.v_s) * ds / d + (xj.v_d - xi.v_d) * dd / d
    if closing < 0:
        return d / -closing
    return math.inf


def lateral_conflict(xi: VehicleState, xj: VehicleState, p: SafetyParams = SafetyParams(),
                     horizon: float = 0.0) -> bool:
    """True when the two footprints overlap laterally now or within `horizon` seconds."""
    dd0 = xj.d - xi.d
    if abs(dd0) < p.lateral_conflict:
        return True
    if horizon <= 0:
        return False
    dd1 = dd0 + (xj.v_d - xi.v_d) * horizon
    return abs(dd1) < p.lateral_conflict or (dd0 > 0) != (dd1 > 0)


def clearance(x: VehicleState, others, p: SafetyParams = SafetyParams()) -> float:
    """Body-to-body clearance to the nearest laterally conflicting vehicle (inf if none)."""
    best = math.inf
    for xj in others:
        if lateral_conflict(x, xj, p):
            best = min(best, math.hypot(x.s - xj.s, x.d - xj.d) - p.collision_dist)
    return best


def _slab_styles(styles):
    return list(styles) if styles is not None else [style_catalog(c) for c in STYLE_ORDER]


def instantaneous_risk(x: VehicleState, theta: DrivingStyle, rho: DensityTensor, others,
                       p: SafetyParams = SafetyParams(), styles=None, slab_speeds=None,
                       own_slab: int | None = None) -> float:
    """Risk-kernel quadrature over the density plus discrete weights of explicit vehicles.

    `others` holds (state, style) pairs. Cells move at their slab speed when
    `slab_speeds` is given, otherwise at the speed of x. Cells of `own_slab`
    within one cell of x are skipped.
    """
    g = rho.grid
    if not g.contains(x.s, x.d):
        raise ValueError(f"state (s={x.s}, d={x.d}) outside grid")
    total = field_quadrature(x, theta, rho, p, styles, slab_speeds, own_slab)[0]
    for xj, tj in others:
        total += discrete_weight(x, xj, theta, tj, p)
    return total


def field_quadrature(x: VehicleState, theta: DrivingStyle, rho: DensityTensor, p: SafetyParams = SafetyParams(),
                     styles=None, slab_speeds=None, own_slab: int | None = None, t: float = 0.0,
                     omega: float = 1.0, bounds: StateBounds = StateBounds()):
    """(sum of omega*mass, sum of omega/d_safe*mass) over the grid."""
    g = rho.grid
    styles = _slab_styles(styles)
    sc, dc = g.s_centers, g.d_centers
    r = np.hypot(x.s - sc[None, :], x.d - dc[:, None])
    jx, kx = g.cell_of(x.s, x.d)
    risk = 0.0
    msum = 0.0
    for ell in range(rho.values.shape[2]):
        m = rho.values[:, :, ell]
        if not np.any(m > 0):
            continue
        if own_slab is not None and ell == own_slab:
            m = m.copy()
            m[max(jx - 1, 0):jx + 2, max(kx - 1, 0):kx + 2] = 0.0
        vj = x.v_s if slab_speeds is None else float(slab_speeds[ell])
        dv = abs(x.v_s - vj)
        ds_ = p.d_base * amplification(dv, 0.0, theta, styles[ell], 0.0, 0.0, p, bounds) \
            * temporal_factor(t, p) * omega
        w = np.exp(-(r / ds_) ** p.eta) * (1 + p.lambda_v * dv / (max(x.v_s, vj) + p.eps_v))
        risk += float(np.sum(w * m))
        msum += float(np.sum(w * m)) / ds_
    return risk, msum


def temporal_risk(x: VehicleState, theta: DrivingStyle, rho_pred, p: SafetyParams = SafetyParams(),
                  dt: float = 0.1, styles=None, noise: NoiseModel | None = None, slab_speeds=None) -> float:
    """Discounted smooth-risk quadrature over a predicted density sequence.

    x is extrapolated at constant velocity; step tau (1-based) is weighted by
    1/(1 + tau^nu) and the uncertainty factor uses elapsed time tau*dt.
    """
    if len(rho_pred) == 0:
        raise ValueError("empty prediction sequence")
    styles = _slab_styles(styles)
    T = len(rho_pred)
    total = 0.0
    th_i = normalized_theta(theta)
    for tau in range(1, T + 1):
        rho = rho_pred[tau - 1]
        g = rho.grid
        t_el = tau * dt
        xs = x.s + x.v_s * t_el
        xd = x.d + x.v_d * t_el
        r = np.hypot(xs - g.s_centers[None, :], xd - g.d_centers[:, None])
        q = 0.0
        for ell in range(rho.values.shape[2]):
            m = rho.values[:, :, ell]
            if not np.any(m > 0):
                continue
            vj = x.v_s if slab_speeds is None else float(slab_speeds[ell])
            d_safe = p.d_base * amplification(x.v_s - vj, 0.0, theta, styles[ell], p=p) \
                * temporal_factor(min(t_el, p.T_pred), p)
            rr = r / d_safe
            sr = np.where(rr <= 0.5, 1.0, np.where(rr <= 1.0, np.clip(2 - 2 * rr, 0, 1) ** p.xi, 0.0))
            frob = 0.0 if noise is None else noise.frobenius(ell)
            unc = math.exp(t_el * frob / p.sigma_base_unc) * \
                (1 + p.kappa_hetero * float(np.sum((th_i - normalized_theta(styles[ell])) ** 2)))
            q += float(np.sum(sr * m)) * unc
        total += q / (1 + tau ** p.nu)
    return total / T


class RiskFieldBuilder:
    """Risk-kernel quadrature of the density at every (cell, speed node) via FFT.

    The safety distance depends on the speed gap between target and source,
    which is binned to `dv_step` so each (target, source, gap level) kernel is
    transformed once and reused.
    """

    def __init__(self, grid: GridSpec, p: SafetyParams = SafetyParams(), styles=None,
                 bounds: StateBounds = StateBounds(), dv_step: float = 2.5):
        self.grid, self.p, self.bounds = grid, p, bounds
        self.styles = _slab_styles(styles)
        self.dv_step = dv_step
        J, K = grid.J, grid.K
        self.shape = (sfft.next_fast_len(2 * J), sfft.next_fast_len(2 * K, real=True))
        oj = np.arange(-(J - 1), J)[:, None] * grid.dd
        ok = np.arange(-(K - 1), K)[None, :] * grid.ds
        self._r = np.hypot(oj, ok)
        self._cache = {}
        self._ups = temporal_factor(0.0, p)

    def d_safe(self, ti: int, sj: int, level: int) -> float:
        key = ("d", ti, sj, level)
        hit = self._cache.get(key)
        if hit is None:
            hit = self._cache[key] = self._d_safe(ti, sj, level)
        return hit

    def _d_safe(self, ti: int, sj: int, level: int) -> float:
        return self.p.d_base * amplification(level * self.dv_step, 0.0, self.styles[ti], self.styles[sj],
                                             p=self.p, bounds=self.bounds) * self._ups

    def _kernel_hat(self, ti, sj, level):
        key = (ti, sj, level)
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        k = np.exp(-(self._r / self.d_safe(ti, sj, level)) ** self.p.eta)
        if ti == sj:
            cj, ck = self.grid.J - 1, self.grid.K - 1
            k[cj - 1:cj + 2, ck - 1:ck + 2] = 0.0
        out = sfft.rfft2(k, s=self.shape)
        self._cache[key] = out
        return out

    def _kernel_stack(self, ti, sj, n_lvl):
        key = ("stack", ti, sj)
        hit = self._cache.get(key)
        if hit is None or hit[0].shape[0] < n_lvl:
            n = max(n_lvl, int(math.ceil(self.bounds.v_max / self.dv_step)) + 1)
            stack = np.stack([self._kernel_hat(ti, sj, lv) for lv in range(n)])
            inv_ds = np.array([1.0 / self.d_safe(ti, sj, lv) for lv in range(n)])
            hit = self._cache[key] = (stack, inv_ds)
        return hit

    def fields(self, rho_values: np.ndarray, slab_speeds, target: int, v_nodes):
        """(R, M) arrays of shape (B, J, K): sum of omega*mass and of omega/d_safe*mass."""
        return self.fields_many(rho_values, slab_speeds, [target], v_nodes)[target]

    def fields_many(self, rho_values: np.ndarray, slab_speeds, targets, v_nodes) -> dict:
        """(R, M) for several target slabs, sharing the source transforms and one inverse FFT."""
        J, K = self.grid.J, self.grid.K
        v_nodes = np.asarray(v_nodes, dtype=float)
        B = len(v_nodes)
        targets = list(targets)
        sources = [sj for sj in range(rho_values.shape[2]) if np.any(rho_values[:, :, sj] > 0)]
        if not sources or not targets:
            z = np.zeros((B, J, K))
            return {t: (z, z.copy()) for t in targets}
        mh = sfft.rfft2(np.moveaxis(rho_values[:, :, sources], 2, 0), s=self.shape)       # (S, ., .)
        vj = np.asarray(slab_speeds, dtype=float)[sources]
        dv = np.abs(v_nodes[:, None] - vj[None, :])                                        # (B, S)
        lvl = np.rint(dv / self.dv_step).astype(int)
        c = 1 + self.p.lambda_v * dv / (np.maximum(v_nodes[:, None], vj[None, :]) + self.p.eps_v)
        acc = np.empty((len(targets), 2, B) + mh.shape[1:], dtype=complex)
        n_lvl = int(lvl.max()) + 1
        for it, t in enumerate(targets):
            acc[it] = 0.0
            for si, sj in enumerate(sources):
                stack, inv_ds = self._kernel_stack(t, sj, n_lvl)
                accumulate_spectra(acc[it], stack, mh[si], np.ascontiguousarray(lvl[:, si]),
                                   np.ascontiguousarray(c[:, si]), inv_ds)
        out = sfft.irfft2(acc, s=self.shape, axes=(-2, -1))[..., J - 1:2 * J - 1, K - 1:2 * K - 1]
        # FFT round-off can dip marginally below zero
        np.clip(out, 0.0, None, out=out)
        return {t: (out[it, 0], out[it, 1]) for it, t in enumerate(targets)}


# emergency braking floor (largest deceleration in the style table)
WORST_BRAKE = StateBounds().a_max


def _leader_brake(follower: DrivingStyle, leader: DrivingStyle) -> float:
    # a leader is assumed able to brake at least as hard as its follower
    return max(-leader.a_min, -follower.a_min)


def required_gap(v_f: float, v_l: float, follower: DrivingStyle, leader_brake: float, p: SafetyParams) -> float:
    """Body clearance a follower needs to stop behind a leader braking at `leader_brake`."""
    bf = -follower.a_min
    return max(0.0, v_f * follower.tau_react + v_f ** 2 / (2 * bf) - v_l ** 2 / (2 * leader_brake))


def admissible_acceleration(x: VehicleState, style: DrivingStyle, others, dt: float,
                            p: SafetyParams = SafetyParams(), margin: float = 1.0, n_levels: int = 41) -> float:
    """Largest acceleration in [a_min, a_max] that keeps the braking envelope to every leader.

    `others` is a list of (state, style). When no level in the style range is
    admissible the search continues into emergency braking down to -WORST_BRAKE,
    which is returned if even that fails.
    """
    leaders = [(xj, tj) for xj, tj in others if xj.s > x.s and lateral_conflict(x, xj, p, horizon=1.0)]
    if not leaders:
        return style.a_max
    levels = np.linspace(style.a_max, style.a_min, n_levels)
    emergency = np.linspace(style.a_min, -WORST_BRAKE, 11)[1:] if style.a_min > -WORST_BRAKE else []
    for a in np.concatenate([levels, emergency]):
        vi = max(x.v_s + a * dt, 0.0)
        si = x.s + x.v_s * dt + 0.5 * a * dt * dt
        ok = True
        for xj, tj in leaders:
            vj = max(xj.v_s + xj.a_s * dt, 0.0)
            sj = xj.s + xj.v_s * dt + 0.5 * xj.a_s * dt * dt
            gap = sj - si - p.collision_dist - margin
            if gap < required_gap(vi, vj, style, _leader_brake(style, tj), p):
                ok = False
                break
        if ok:
            return float(a)
    return -WORST_BRAKE


def merge_is_safe(x: VehicleState, style: DrivingStyle, others, p: SafetyParams = SafetyParams(),
                  margin: float = 1.0) -> bool:
    """Braking envelope check in both directions against vehicles x is about to overlap laterally."""
    for xj, tj in others:
        if not lateral_conflict(x, xj, p, horizon=1.0):
            continue
        if xj.s >= x.s:
            gap = xj.s - x.s - p.collision_dist - margin
            need = required_gap(x.v_s, xj.v_s, style, _leader_brake(style, tj), p)
        else:
            gap = x.s - xj.s - p.collision_dist - margin
            need = required_gap(xj.v_s, x.v_s, tj, _leader_brake(tj, style), p)
        if gap < need:
            return False
    return True
