"""Style-aware interaction kernels and the mean-field drift increment h."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import fft as sfft

from .core import STYLE_ORDER, DrivingStyle, VehicleState, style_catalog, style_envelope
from .grid import DensityTensor, GridSpec

LAMBDA_KEYS = ("v", "a", "va", "av", "aa", "d", "da", "vd", "ad", "add")
# (row, col) of each cross-style entry in the 6x6 matrix over (s, v_s, a_s, d, v_d, a_d)
_LAMBDA_POS = {
    "v": (0, 0), "va": (0, 2), "a": (1, 1), "av": (2, 0), "aa": (2, 2),
    "d": (3, 3), "da": (3, 5), "vd": (4, 4), "ad": (5, 3), "add": (5, 5),
}


@dataclass(frozen=True)
class InteractionParams:
    sigma_s_base2: float = 225.0
    sigma_d_base2: float = 4.0
    sigma_theta: float = 1.0
    W: tuple = (1.0,) * 7
    lam: dict = field(default_factory=lambda: {k: 0.0 for k in LAMBDA_KEYS})
    g_h: float = 1.0

    def __post_init__(self):
        if min(self.sigma_s_base2, self.sigma_d_base2, self.sigma_theta) <= 0:
            raise ValueError("interaction ranges and sigma_theta must be positive")
        if len(self.W) != 7 or any(w < 0 for w in self.W):
            raise ValueError("W needs 7 nonnegative entries")
        unknown = set(self.lam) - set(LAMBDA_KEYS)
        if unknown:
            raise ValueError(f"unknown cross-style entries: {sorted(unknown)}")

    def lambda_matrix(self) -> np.ndarray:
        L = np.zeros((6, 6))
        for k, v in self.lam.items():
            L[_LAMBDA_POS[k]] = v
        return L


def interaction_ranges(ti: DrivingStyle, tj: DrivingStyle, p: InteractionParams):
    """(sigma_s^2, sigma_d^2) for a style pair."""
    return (ti.omega_interact * tj.omega_interact * p.sigma_s_base2,
            math.sqrt(ti.alpha_aggr * tj.alpha_aggr) * p.sigma_d_base2)


def spatial_kernel(xi: VehicleState, xj: VehicleState, ti: DrivingStyle, tj: DrivingStyle,
                   p: InteractionParams) -> float:
    ss, sd = interaction_ranges(ti, tj, p)
    return math.exp(-(xi.s - xj.s) ** 2 / (2 * ss)) * math.exp(-(xi.d - xj.d) ** 2 / (2 * sd))


def heading(x: VehicleState) -> float:
    return math.atan2(x.v_d, x.v_s) if (x.v_s or x.v_d) else 0.0


def _sign(x):
    return (x > 0) - (x < 0)


def geometric_matrix(xi: VehicleState, xj: VehicleState, phi_i: float = 0.0, phi_j: float = 0.0) -> np.ndarray:
    ds, dd = xj.s - xi.s, xj.d - xi.d
    if ds == 0 and dd == 0:
        raise ValueError("bearing undefined for coincident positions")
    psi = math.atan2(dd, ds)
    c, s = math.cos(psi), math.sin(psi)
    dphi = phi_j - phi_i
    cp, sp = math.cos(dphi), math.sin(dphi)
    G = np.zeros((6, 6))
    G[:3, :3] = [[c, -s, 0], [s, c, 0], [0, 0, _sign(ds)]]
    G[3:, 3:] = [[1, 0, _sign(dd)], [0, cp, -sp], [0, sp, cp]]
    return G


def normalized_theta(t: DrivingStyle) -> np.ndarray:
    lo, hi = style_envelope()
    lo, hi = np.array(lo), np.array(hi)
    return (np.array(t.vector()) - lo) / (hi - lo)


def style_similarity(ti: DrivingStyle, tj: DrivingStyle, p: InteractionParams) -> float:
    """Scalar part exp(-||dtheta||_W^2 / sigma_theta^2) on normalised parameters."""
    dth = normalized_theta(ti) - normalized_theta(tj)
    return math.exp(-float(np.sum(np.asarray(p.W) * dth ** 2)) / p.sigma_theta ** 2)


def style_compatibility(ti: DrivingStyle, tj: DrivingStyle, p: InteractionParams) -> np.ndarray:
    return style_similarity(ti, tj, p) * np.eye(6) + p.lambda_matrix()


def _slab_styles(styles):
    return list(styles) if styles is not None else [style_catalog(c) for c in STYLE_ORDER]


def mean_field_coupling(x: VehicleState, theta: DrivingStyle, rho: DensityTensor, p: InteractionParams,
                        styles=None, own_slab: int | None = None) -> np.ndarray:
    """Drift increment h(x) from the density.

    Each cell contributes Phi * G * Psi * e_dir * mass with e_dir the unit
    offset from the cell centre towards x. Cells in `own_slab` within one cell
    of x are skipped (the vehicle's own bump).
    """
    g = rho.grid
    if not g.contains(x.s, x.d):
        raise ValueError(f"state (s={x.s}, d={x.d}) outside grid")
    styles = _slab_styles(styles)
    if own_slab is None:
        own_slab = STYLE_ORDER.index(theta.cls)
    sc, dc = g.s_centers, g.d_centers
    Ds = x.s - sc[None, :]                 # (1, K)  cell -> x
    Dd = x.d - dc[:, None]                 # (J, 1)
    Ds, Dd = np.broadcast_arrays(Ds, Dd)
    r = np.hypot(Ds, Dd)
    safe_r = np.where(r > 0, r, 1.0)
    es, ed = Ds / safe_r, Dd / safe_r
    # G(x_i = x, x_j = cell): psi = atan2(d_c - d_x, s_c - s_x)
    cpsi, spsi = -es, -ed
    sgn_s = np.sign(-Ds)
    sgn_d = np.sign(-Dd)
    jx, kx = g.cell_of(x.s, x.d)
    Lmat = p.lambda_matrix()
    h = np.zeros(6)
    vals = rho.values
    for ell in range(vals.shape[2]):
        m = vals[:, :, ell]
        if not np.any(m >= 1e-12):
            continue
        m = np.where(m >= 1e-12, m, 0.0)
        m = np.where(r > 0, m, 0.0)
        if ell == own_slab:
            m = m.copy()
            m[max(jx - 1, 0):jx + 2, max(kx - 1, 0):kx + 2] = 0.0
        tj = styles[ell]
        ss, sd = interaction_ranges(theta, tj, p)
        phi = np.exp(-Ds ** 2 / (2 * ss) - Dd ** 2 / (2 * sd)) * m
        psi = style_similarity(theta, tj, p)
        # w = Psi e with e = (es, 0, 0, ed, 0, 0)
        w0 = psi * es + Lmat[0, 0] * es + Lmat[0, 3] * ed
        w1 = Lmat[1, 0] * es + Lmat[1, 3] * ed
        w2 = Lmat[2, 0] * es + Lmat[2, 3] * ed
        w3 = psi * ed + Lmat[3, 0] * es + Lmat[3, 3] * ed
        w4 = Lmat[4, 0] * es + Lmat[4, 3] * ed
        w5 = Lmat[5, 0] * es + Lmat[5, 3] * ed
        # heading difference is zero for grid cells
        h[0] += np.sum(phi * (cpsi * w0 - spsi * w1))
        h[1] += np.sum(phi * (spsi * w0 + cpsi * w1))
        h[2] += np.sum(phi * sgn_s * w2)
        h[3] += np.sum(phi * (w3 + sgn_d * w5))
        h[4] += np.sum(phi * w4)
        h[5] += np.sum(phi * w5)
    return p.g_h * h


def pairwise_coupling(xi: VehicleState, ti: DrivingStyle, others, p: InteractionParams) -> np.ndarray:
    """Drift increment from explicit vehicles (unit mass each); `others` is (state, style) pairs."""
    h = np.zeros(6)
    phi_i = heading(xi)
    for xj, tj in others:
        dsv, ddv = xi.s - xj.s, xi.d - xj.d
        r = math.hypot(dsv, ddv)
        if r == 0:
            continue
        e = np.array([dsv / r, 0, 0, ddv / r, 0, 0])
        K = spatial_kernel(xi, xj, ti, tj, p) * geometric_matrix(xi, xj, phi_i, heading(xj)) \
            @ style_compatibility(ti, tj, p)
        h += K @ e
    return p.g_h * h


class CouplingFieldBuilder:
    """Drift increment h evaluated at every cell centre via FFT correlation.

    Kernels depend only on the cell offset, so they are transformed once per
    (target style, source slab) pair and reused for every time step.
    """

    def __init__(self, grid: GridSpec, p: InteractionParams, styles=None):
        self.grid = grid
        self.p = p
        self.styles = _slab_styles(styles)
        J, K = grid.J, grid.K
        self.shape = (sfft.next_fast_len(2 * J), sfft.next_fast_len(2 * K, real=True))
        oj = np.arange(-(J - 1), J)[:, None] * grid.dd
        ok = np.arange(-(K - 1), K)[None, :] * grid.ds
        # offset of x relative to the source cell
        self._Dd, self._Ds = np.broadcast_arrays(oj, ok)
        self._cache = {}

    def _kernel_hat(self, ti: int, sj: int):
        key = (ti, sj)
        if key in self._cache:
            return self._cache[key]
        g, p = self.grid, self.p
        t_i, t_j = self.styles[ti], self.styles[sj]
        Ds, Dd = self._Ds, self._Dd
        r = np.hypot(Ds, Dd)
        safe = np.where(r > 0, r, 1.0)
        es, ed = Ds / safe, Dd / safe
        ss, sd = interaction_ranges(t_i, t_j, p)
        phi = np.exp(-Ds ** 2 / (2 * ss) - Dd ** 2 / (2 * sd))
        phi[r == 0] = 0.0
        if ti == sj:
            cj, ck = g.J - 1, g.K - 1
            phi[cj - 1:cj + 2, ck - 1:ck + 2] = 0.0
        psi = style_similarity(t_i, t_j, p)
        Lm = p.lambda_matrix()
        cpsi, spsi = -es, -ed
        w0 = psi * es + Lm[0, 0] * es + Lm[0, 3] * ed
        w1 = Lm[1, 0] * es + Lm[1, 3] * ed
        w2 = Lm[2, 0] * es + Lm[2, 3] * ed
        w3 = psi * ed + Lm[3, 0] * es + Lm[3, 3] * ed
        w4 = Lm[4, 0] * es + Lm[4, 3] * ed
        w5 = Lm[5, 0] * es + Lm[5, 3] * ed
        comps = np.stack([
            phi * (cpsi * w0 - spsi * w1),
            phi * (spsi * w0 + cpsi * w1),
            phi * np.sign(-Ds) * w2,
            phi * (w3 + np.sign(-Dd) * w5),
            phi * w4,
            phi * w5,
        ])
        out = sfft.rfft2(comps, s=self.shape, axes=(1, 2))
        self._cache[key] = out
        return out

    def field(self, rho_values: np.ndarray, target: int, slabs=None) -> np.ndarray:
        """h at every cell for a vehicle of slab `target`; returns (6, J, K)."""
        J, K = self.grid.J, self.grid.K
        acc = None
        slabs = range(rho_values.shape[2]) if slabs is None else slabs
        for sj in slabs:
            m = rho_values[:, :, sj]
            if not np.any(m >= 1e-12):
                continue
            m = np.where(m >= 1e-12, m, 0.0)
            term = sfft.rfft2(m, s=self.shape) * self._kernel_hat(target, sj)
            acc = term if acc is None else acc + term
        if acc is None:
            return np.zeros((6, J, K))
        full = sfft.irfft2(acc, s=self.shape, axes=(1, 2))
        # kernel index (J-1, K-1) is zero offset
        return self.p.g_h * full[:, J - 1:2 * J - 1, K - 1:2 * K - 1]


def export_interaction_field(x: VehicleState, theta: DrivingStyle, other: DrivingStyle, p: InteractionParams,
                             path, half_s: float = 60.0, half_d: float = 5.625, n_s: int = 121, n_d: int = 31):
    """Aggregate kernel intensity Phi * Psi around `x` on a regular mesh, written as CSV."""
    ss = np.linspace(x.s - half_s, x.s + half_s, n_s)
    dd = np.linspace(x.d - half_d, x.d + half_d, n_d)
    s2, d2 = np.meshgrid(ss, dd)
    sig_s, sig_d = interaction_ranges(theta, other, p)
    inten = np.exp(-(s2 - x.s) ** 2 / (2 * sig_s) - (d2 - x.d) ** 2 / (2 * sig_d)) * style_similarity(theta, other, p)
    rows = np.column_stack([s2.ravel(), d2.ravel(), inten.ravel()])
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(path, rows, delimiter=",", header="s,d,intensity", comments="", fmt="%.8g")
    return rows
