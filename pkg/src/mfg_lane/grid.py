"""Structured (s, d) grid, per-style density tensor and the forward Fokker-Planck step.

Density arrays are laid out as (J, K, L): lateral cells, longitudinal cells,
style slabs in ``core.STYLE_ORDER``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import erf

from .core import STYLE_INDEX, STYLE_ORDER, ScenarioConfig, StateBounds, VehicleState

N_STYLES = len(STYLE_ORDER)


@dataclass(frozen=True)
class GridSpec:
    K: int = 150
    J: int = 15
    ds: float = 10.0
    dd: float = 0.75
    s0: float = 0.0
    d0: float = -5.625

    def __post_init__(self):
        if self.K < 2 or self.J < 2:
            raise ValueError("grid needs K >= 2 and J >= 2")
        if self.ds <= 0 or self.dd <= 0:
            raise ValueError("cell sizes must be positive")

    @classmethod
    def from_bounds(cls, bounds: StateBounds, K: int = 150, J: int = 15) -> "GridSpec":
        return cls(K=K, J=J, ds=bounds.s_max / K, dd=2 * bounds.d_max / J, s0=0.0, d0=-bounds.d_max)

    @property
    def s_centers(self):
        return self.s0 + (np.arange(self.K) + 0.5) * self.ds

    @property
    def d_centers(self):
        return self.d0 + (np.arange(self.J) + 0.5) * self.dd

    @property
    def s_end(self):
        return self.s0 + self.K * self.ds

    @property
    def d_end(self):
        return self.d0 + self.J * self.dd

    @property
    def cell_area(self):
        return self.ds * self.dd

    def contains(self, s: float, d: float) -> bool:
        return self.s0 <= s <= self.s_end and self.d0 <= d <= self.d_end

    def cell_of(self, s: float, d: float):
        k = min(max(int(math.floor((s - self.s0) / self.ds)), 0), self.K - 1)
        j = min(max(int(math.floor((d - self.d0) / self.dd)), 0), self.J - 1)
        return j, k


def default_alphas(scenario: ScenarioConfig | None = None):
    from .core import style_catalog
    if scenario is None:
        return tuple(style_catalog(c).alpha_aggr for c in STYLE_ORDER)
    return tuple(scenario.style_of(c).alpha_aggr for c in STYLE_ORDER)


@dataclass(frozen=True)
class DensityTensor:
    values: np.ndarray          # (J, K, L) cell masses
    grid: GridSpec
    leak: np.ndarray = None     # (L,) cumulative mass that left through absorbing edges
    alphas: tuple = field(default_factory=default_alphas)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 3 or v.shape[:2] != (self.grid.J, self.grid.K):
            raise ValueError(f"density shape {v.shape} does not match grid ({self.grid.J}, {self.grid.K}, L)")
        if np.any(v < 0):
            raise ValueError("density entries must be nonnegative")
        v = v.copy()
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        leak = np.zeros(v.shape[2]) if self.leak is None else np.asarray(self.leak, dtype=float).copy()
        leak.setflags(write=False)
        object.__setattr__(self, "leak", leak)

    @property
    def n_styles(self):
        return self.values.shape[2]

    def mass(self) -> float:
        return float(self.values.sum())

    def total(self) -> np.ndarray:
        """Density summed over style slabs, shape (J, K)."""
        return self.values.sum(axis=2)

    def with_values(self, values, leak=None) -> "DensityTensor":
        return DensityTensor(values, self.grid, self.leak if leak is None else leak, self.alphas)

    @classmethod
    def empty(cls, grid: GridSpec, n_styles: int = N_STYLES, alphas=None) -> "DensityTensor":
        return cls(np.zeros((grid.J, grid.K, n_styles)), grid, alphas=alphas or default_alphas())


@dataclass(frozen=True)
class VelocityFieldTensor:
    V_s: np.ndarray
    V_d: np.ndarray

    def __post_init__(self):
        if self.V_s.shape != self.V_d.shape:
            raise ValueError("V_s and V_d shapes differ")
        if not (np.all(np.isfinite(self.V_s)) and np.all(np.isfinite(self.V_d))):
            raise ValueError("velocity field must be finite")

    @classmethod
    def zeros(cls, shape):
        return cls(np.zeros(shape), np.zeros(shape))

    @classmethod
    def uniform(cls, shape, v_s=0.0, v_d=0.0):
        return cls(np.full(shape, float(v_s)), np.full(shape, float(v_d)))


@dataclass(frozen=True)
class NoiseModel:
    sigma_pos: np.ndarray   # (L,) m s^-1/2
    sigma_vel: np.ndarray   # (L,) m s^-3/2

    @classmethod
    def for_styles(cls, scenario: ScenarioConfig | None = None, sigma_pos=0.3, sigma_vel=0.2):
        alphas = np.array(default_alphas(scenario))
        scale = 0.5 + alphas
        return cls(sigma_pos * scale, sigma_vel * scale)

    @classmethod
    def zero(cls, n_styles: int = N_STYLES):
        return cls(np.zeros(n_styles), np.zeros(n_styles))

    def sigma_matrix(self, slab: int) -> np.ndarray:
        """Diagonal diffusion matrix over (s, v_s, a_s, d, v_d, a_d)."""
        p, v = self.sigma_pos[slab], self.sigma_vel[slab]
        return np.diag([p, v, 0.0, p, v, 0.0])

    def frobenius(self, slab: int) -> float:
        return float(np.linalg.norm(self.sigma_matrix(slab)))


def _gauss_cell_weights(edges, mu, sigma):
    if sigma <= 0:
        w = np.zeros(len(edges) - 1)
        idx = np.searchsorted(edges, mu, side="right") - 1
        w[min(max(idx, 0), len(w) - 1)] = 1.0
        return w
    cdf = 0.5 * (1 + erf((edges - mu) / (sigma * math.sqrt(2))))
    return np.diff(cdf)


def init_density(scenario: ScenarioConfig, grid: GridSpec, spread=(5.0, 0.8),
                 states: dict | None = None) -> DensityTensor:
    """One unit-mass truncated Gaussian bump per vehicle in its style slab."""
    states = states or scenario.initial_states()
    s_edges = grid.s0 + np.arange(grid.K + 1) * grid.ds
    d_edges = grid.d0 + np.arange(grid.J + 1) * grid.dd
    rho = np.zeros((grid.J, grid.K, N_STYLES))
    for v in scenario.vehicles:
        x = states[v.id]
        if not grid.contains(x.s, x.d):
            raise ValueError(f"vehicle {v.id} at (s={x.s}, d={x.d}) lies outside the grid")
        ws = _gauss_cell_weights(s_edges, x.s, spread[0])
        wd = _gauss_cell_weights(d_edges, x.d, spread[1])
        bump = np.outer(wd, ws)
        rho[:, :, STYLE_INDEX[v.style]] += bump / bump.sum()
    return DensityTensor(rho, grid, alphas=default_alphas(scenario))


def courant_number(V: VelocityFieldTensor, grid: GridSpec, dt: float) -> float:
    cs = np.max(np.abs(V.V_s)) * dt / grid.ds if V.V_s.size else 0.0
    cd = np.max(np.abs(V.V_d)) * dt / grid.dd if V.V_d.size else 0.0
    return float(max(cs, cd))


def _advect_axis(r, vel, c, axis, boundary):
    """Donor-cell upwind along `axis`; returns (new r, mass leaked per slab)."""
    right = np.clip(vel, 0, None) * c * r     # mass leaving towards +axis
    left = np.clip(-vel, 0, None) * c * r     # mass leaving towards -axis
    out = r - right - left
    n = r.shape[axis]
    sl = [slice(None)] * 3

    def take(a, s):
        sl2 = list(sl)
        sl2[axis] = s
        return a[tuple(sl2)]

    def put_add(a, s, val):
        sl2 = list(sl)
        sl2[axis] = s
        a[tuple(sl2)] += val

    leak = np.zeros(r.shape[2])
    put_add(out, slice(1, n), take(right, slice(0, n - 1)))
    put_add(out, slice(0, n - 1), take(left, slice(1, n)))
    edge_r = take(right, n - 1)
    edge_l = take(left, 0)
    if boundary == "absorbing":
        leak += edge_r.sum(axis=tuple(i for i in range(edge_r.ndim) if i != edge_r.ndim - 1))
        leak += edge_l.sum(axis=tuple(i for i in range(edge_l.ndim) if i != edge_l.ndim - 1))
    elif boundary == "periodic":
        put_add(out, 0, edge_r)
        put_add(out, n - 1, edge_l)
    else:  # reflecting: edge outflow stays put
        put_add(out, n - 1, edge_r)
        put_add(out, 0, edge_l)
    return out, leak


def _diffuse_axis(r, lam, axis, boundary):
    """Explicit centred second difference with per-slab number lam = D dt / h^2."""
    n = r.shape[axis]
    flux = np.diff(r, axis=axis) * lam   # flux from cell i+1 into cell i
    out = r.copy()
    sl_lo = [slice(None)] * 3
    sl_hi = [slice(None)] * 3
    sl_lo[axis] = slice(0, n - 1)
    sl_hi[axis] = slice(1, n)
    out[tuple(sl_lo)] += flux
    out[tuple(sl_hi)] -= flux
    leak = np.zeros(r.shape[2])
    first = [slice(None)] * 3
    last = [slice(None)] * 3
    first[axis] = 0
    last[axis] = n - 1
    if boundary == "absorbing":
        # ghost cells hold zero density
        e0 = r[tuple(first)] * lam
        e1 = r[tuple(last)] * lam
        out[tuple(first)] -= e0
        out[tuple(last)] -= e1
        leak += e0.sum(axis=0) + e1.sum(axis=0)
    elif boundary == "periodic":
        wrap = (r[tuple(first)] - r[tuple(last)]) * lam
        out[tuple(last)] += wrap
        out[tuple(first)] -= wrap
    return out, leak


def fp_step(rho: DensityTensor, V: VelocityFieldTensor, noise: NoiseModel, dt: float,
            boundary: str = "absorbing") -> DensityTensor:
    """Advance the density one explicit step (upwind advection, then diffusion).

    `boundary` is ``absorbing`` (outflow accumulated in ``leak``), ``reflecting``
    (zero flux) or ``periodic``.
    """
    if boundary not in ("absorbing", "reflecting", "periodic"):
        raise ValueError(f"unknown boundary mode {boundary!r}")
    g = rho.grid
    r = np.array(rho.values, dtype=float)
    if V.V_s.shape != r.shape:
        raise ValueError(f"velocity shape {V.V_s.shape} does not match density {r.shape}")
    cfl = courant_number(V, g, dt)
    if cfl > 1.0 + 1e-12:
        raise ValueError(f"CFL violated: max Courant number {cfl:.4f} > 1")
    leak = np.array(rho.leak, dtype=float)

    r, lk = _advect_axis(r, V.V_s, dt / g.ds, 1, boundary)
    leak += lk
    r, lk = _advect_axis(r, V.V_d, dt / g.dd, 0, boundary)
    leak += lk

    D = np.asarray(noise.sigma_pos, dtype=float) ** 2    # variance grows 2 D dt per axis
    lam_s = D * dt / g.ds ** 2
    lam_d = D * dt / g.dd ** 2
    nsub = max(1, int(math.ceil(2 * float(np.max(lam_s + lam_d, initial=0.0)) / 0.9)))
    if np.any(D > 0):
        for _ in range(nsub):
            r, lk = _diffuse_axis(r, lam_s / nsub, 1, boundary)
            leak += lk
            r, lk = _diffuse_axis(r, lam_d / nsub, 0, boundary)
            leak += lk
    # round-off can leave -1e-18 style residue
    np.clip(r, 0.0, None, out=r)
    return DensityTensor(r, g, leak, rho.alphas)


def bilinear(field2d: np.ndarray, grid: GridSpec, s: float, d: float) -> float:
    """Bilinear interpolation of a (J, K) cell-centred field, clamped at the edges."""
    fs = (s - grid.s0) / grid.ds - 0.5
    fd = (d - grid.d0) / grid.dd - 0.5
    fs = min(max(fs, 0.0), grid.K - 1.0)
    fd = min(max(fd, 0.0), grid.J - 1.0)
    k0 = min(int(fs), grid.K - 2)
    j0 = min(int(fd), grid.J - 2)
    ws, wd = fs - k0, fd - j0
    f = field2d
    return float((1 - wd) * ((1 - ws) * f[j0, k0] + ws * f[j0, k0 + 1])
                 + wd * ((1 - ws) * f[j0 + 1, k0] + ws * f[j0 + 1, k0 + 1]))


def local_stats(rho: DensityTensor, x: VehicleState):
    """(local density per m^2, density-weighted mean aggressiveness in a 3x3 neighbourhood)."""
    g = rho.grid
    if not g.contains(x.s, x.d):
        raise ValueError(f"state (s={x.s}, d={x.d}) outside grid")
    rho_local = bilinear(rho.total(), g, x.s, x.d) / g.cell_area
    j, k = g.cell_of(x.s, x.d)
    nb = rho.values[max(j - 1, 0):j + 2, max(k - 1, 0):k + 2, :].sum(axis=(0, 1))
    m = nb.sum()
    alpha = float(nb @ np.asarray(rho.alphas[:nb.size])) / m if m >= 1e-12 else 0.0
    return rho_local, alpha


def export_snapshots(rho_seq, dt: float, times, out_dir) -> list:
    """Write one CSV per (time, style) slab plus a JSON manifest of snapshot times."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    written = []
    for t in times:
        n = int(round(t / dt))
        if n < 0 or n >= len(rho_seq):
            continue
        vals = rho_seq[n].values
        for ell, cls in enumerate(STYLE_ORDER):
            p = out / f"density_t{n * dt:08.2f}_{cls.value}.csv"
            np.savetxt(p, vals[:, :, ell], delimiter=",", fmt="%.10e")
            paths.append(p)
        written.append(round(n * dt, 10))
    if written:
        man = out / "density_manifest.json"
        man.write_text(json.dumps({"times": written, "styles": [c.value for c in STYLE_ORDER],
                                   "layout": "rows=lateral cells (J), cols=longitudinal cells (K)"},
                                  indent=2))
        paths.append(man)
    return paths
