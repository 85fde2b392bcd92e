"""Linearised acoustic system, Lyapunov functionals and model parabolic problems.

The linear system for ``(q, d)`` is

    dq/dt + Lambda d = F
    dd/dt - nu Delta d - delta Lambda q + kappa Lambda (phi * q) = G

and each Fourier mode evolves by ``exp(M(xi) t)`` with

    M = [[0, -|xi|], [|xi| (delta - kappa phi_hat) + kreg |xi|^3, -nu |xi|^2]].

The incompressible part ``Omega`` obeys a heat equation with viscosity ``mu``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .besov import (
    BesovSpec,
    DyadicPartition,
    TrajectorySeries,
    _weighted_sum,
    block_norms,
    chemin_lerner_norm,
    hybrid_norm,
    besov_norm,
)
from .errors import CFLError, ValidationError
from .spectral import CapillaryKernel, Grid, SpectralField, dealias_mask, inverse, forward

__all__ = [
    "GAP_INEQUALITY",
    "LinearParams",
    "LyapunovConfig",
    "AcousticState",
    "symbol_matrix",
    "symbol_eigenvalues",
    "propagator",
    "evolve_linear",
    "lyapunov_profile",
    "lyapunov_equivalence",
    "fit_rate",
    "block_rate_oracle",
    "advective_cfl",
    "smoothing_times",
    "DampingRow",
    "DampingReport",
    "verify_damping",
    "SmoothingReport",
    "verify_smoothing",
    "EstimateReport",
    "solve_transport",
    "solve_heat",
    "solve_heat_variable",
    "reweight_trajectory",
    "write_damping_csv",
]

GAP_INEQUALITY = "δ̄−κ̄‖φ̂‖_{L^∞}≥c>0"


# Parameters -----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class LinearParams:
    """Linearised coefficients; ``nu = 2 mu + lam``."""

    mu: float
    lam: float
    delta: float
    kappa: float = 0.0
    kernel: Optional[CapillaryKernel] = None
    kappa_reg: float = 0.0
    gap: float = 1e-8

    @classmethod
    def from_nu(cls, nu: float, delta: float, kappa: float = 0.0, kernel=None, **kw) -> "LinearParams":
        """Parameters with ``lam = 0`` and ``mu = nu / 2``."""
        return cls(mu=nu / 2.0, lam=0.0, delta=delta, kappa=kappa, kernel=kernel, **kw)

    @property
    def nu(self) -> float:
        return 2.0 * self.mu + self.lam

    def phi_hat(self, grid: Grid) -> np.ndarray:
        if self.kernel is None or self.kappa == 0:
            return np.zeros(grid.shape)
        if self.kernel.grid != grid:
            raise ValidationError("capillary kernel lives on another grid", "kernel grid == field grid")
        return self.kernel.spectral_hat

    @property
    def sup_hat(self) -> float:
        return 0.0 if self.kernel is None else self.kernel.sup_hat

    def validate(self, grid: Optional[Grid] = None) -> "LinearParams":
        if not self.nu > 0:
            raise ValidationError(f"nu = {self.nu} must be positive", "ν̄>0")
        if not self.mu > 0:
            raise ValidationError(f"mu = {self.mu} must be positive", "μ̄>0")
        if self.kappa_reg < 0:
            raise ValidationError("kappa_reg must be nonnegative", "κ_reg≥0")
        if self.kappa < 0:
            raise ValidationError("kappa must be nonnegative", "κ̄≥0")
        if not self.delta - self.kappa * self.sup_hat >= self.gap > 0:
            raise ValidationError(
                f"delta - kappa * sup|phi_hat| = {self.delta - self.kappa * self.sup_hat:g} < {self.gap:g}",
                GAP_INEQUALITY,
            )
        if grid is not None and self.kernel is not None:
            hat = self.phi_hat(grid)
            if np.any(self.delta - self.kappa * hat[grid.resolved] < self.delta - self.kappa * self.sup_hat - 1e-14):
                raise ValidationError("capillary symbol exceeds its supremum", GAP_INEQUALITY)
        return self


def _low_ceiling(l0: int) -> float:
    return 2.0 ** (-2 * l0)


@dataclass(frozen=True)
class LyapunovConfig:
    """Constants of the frequency-split functionals; ``alpha`` is filled in by measurement."""

    l0: int
    K1: float
    A: float
    a: float
    alpha: Optional[float] = None

    @classmethod
    def default(cls, params: LinearParams, l0: int = 0) -> "LyapunovConfig":
        nu = params.nu
        K1 = 0.9 * min(_low_ceiling(l0), nu / (2 + 2.0 ** (2 * l0) * nu**2))
        A = 2.0 * max(2.0 / nu, 1.0, 1.0 / nu**2)
        return cls(l0, K1, A, 1.0 / (nu * A))

    def with_overrides(self, params: LinearParams, **kw) -> "LyapunovConfig":
        cfg = replace(self, **{k: v for k, v in kw.items() if v is not None})
        if "A" in kw and "a" not in kw and kw["A"] is not None:
            cfg = replace(cfg, a=1.0 / (params.nu * cfg.A))
        return cfg

    def validate(self, params: LinearParams) -> "LyapunovConfig":
        nu = params.nu
        bound = min(_low_ceiling(self.l0), nu / (2 + 2.0 ** (2 * self.l0) * nu**2))
        if not 0 < self.K1 < bound:
            raise ValidationError(f"K1 = {self.K1:g} not in (0, {bound:g})",
                                  "K₁<min(1/2^{2l₀}, ν̄/(2+2^{2l₀}ν̄²))")
        if not self.A > max(2.0 / nu, 1.0):
            raise ValidationError(f"A = {self.A:g} <= max(2/nu, 1)", "A>max(2/ν̄,1)")
        if not self.A > 1.0 / nu**2:
            raise ValidationError(f"A = {self.A:g} <= 1/nu^2, high functional indefinite", "A>1/ν̄²")
        if not math.isclose(self.a, 1.0 / (nu * self.A), rel_tol=1e-12):
            raise ValidationError("a must equal 1/(nu A)", "a=1/(ν̄A)")
        return self

    def check_positive(self, params: LinearParams, P: DyadicPartition) -> float:
        """Smallest eigenvalue of the per-mode quadratic forms over each block's support."""
        grid = P.grid
        xi = grid.xi_norm
        bt = params.delta - params.kappa * params.phi_hat(grid)
        worst = math.inf
        for l, m in zip(P.levels, P.masks):
            sel = (m > 0) & grid.resolved
            if not np.any(sel):
                continue
            if l <= self.l0:
                a11, a22, a12 = bt[sel], 1.0, -self.K1 * xi[sel]
            else:
                a11, a22, a12 = xi[sel] ** 2, self.A, -xi[sel] / params.nu
            tr = a11 + a22
            det = a11 * a22 - a12**2
            lam_min = tr / 2 - np.sqrt(np.maximum(tr**2 / 4 - det, 0.0))
            # Normalise by the diagonal so the check is scale free.
            worst = min(worst, float(np.min(lam_min / np.maximum(a11, a22))))
        if worst <= 0:
            raise ValidationError("Lyapunov functional is not positive definite", "f_l²>0")
        return worst


@dataclass(frozen=True, eq=False)
class AcousticState:
    """Density fluctuation ``q``, compressible part ``d`` and optional ``omega``."""

    q: SpectralField
    d: SpectralField
    omega: Optional[SpectralField] = None

    def __post_init__(self):
        if self.q.grid != self.d.grid or (self.omega is not None and self.omega.grid != self.q.grid):
            raise ValidationError("state components live on different grids", "shared grid")

    @property
    def grid(self) -> Grid:
        return self.q.grid

    @classmethod
    def zeros(cls, grid: Grid, with_omega: bool = False) -> "AcousticState":
        om = SpectralField.zeros(grid, "tensor") if with_omega else None
        return cls(SpectralField.zeros(grid), SpectralField.zeros(grid), om)


# Symbol and exact propagator -----------------------------------------------

def _symbol_parts(params: LinearParams, grid: Grid):
    xi = grid.xi_norm
    a = xi
    b = xi * (params.delta - params.kappa * params.phi_hat(grid)) + params.kappa_reg * xi**3
    c = params.nu * xi**2
    return a, b, c


def symbol_matrix(params: LinearParams, grid: Grid) -> np.ndarray:
    """``M(xi)`` on the lattice, shape ``(2, 2) + grid.shape``."""
    a, b, c = _symbol_parts(params, grid)
    return np.array([[np.zeros_like(a), -a], [b, -c]])


def symbol_eigenvalues(params: LinearParams, grid: Grid):
    """``(lam_fast, lam_slow)``; ``lam_slow`` has the larger real part."""
    a, b, c = _symbol_parts(params, grid)
    tau, det = -c, a * b
    s = np.sqrt((tau**2 / 4 - det).astype(complex))
    lam1 = tau / 2 - s
    with np.errstate(divide="ignore", invalid="ignore"):
        lam2 = np.where(lam1 != 0, det / lam1, 0.0)
    return lam1, lam2


def _expm1c(z):
    x, y = z.real, z.imag
    return (np.expm1(x) * np.cos(y) - 2 * np.sin(y / 2) ** 2) + 1j * np.exp(x) * np.sin(y)


def _exprel(z):
    z = np.asarray(z, dtype=complex)
    out = np.ones_like(z)
    small = np.abs(z) < 1e-5
    big = ~small
    out[big] = _expm1c(z[big]) / z[big]
    zs = z[small]
    out[small] = 1 + zs / 2 + zs**2 / 6 + zs**3 / 24
    return out


def propagator(params: LinearParams, grid: Grid, t: float) -> np.ndarray:
    """``exp(M(xi) t)`` per mode, real, shape ``(2, 2) + grid.shape``; identity at ``xi = 0``."""
    a, b, c = _symbol_parts(params, grid)
    lam1, lam2 = symbol_eigenvalues(params, grid)
    scale = np.exp(lam2 * t)
    w = t * _exprel((lam1 - lam2) * t)
    E = np.empty((2, 2) + grid.shape, dtype=complex)
    E[0, 0] = 1 + w * (0 - lam2)
    E[0, 1] = w * (-a)
    E[1, 0] = w * b
    E[1, 1] = 1 + w * (-c - lam2)
    E *= scale
    E[:, :, grid.nyquist] = 0.0
    E[0, 0][grid.nyquist] = E[1, 1][grid.nyquist] = 1.0
    return E.real


def _heat_factor(grid: Grid, visc: float, t: float) -> np.ndarray:
    return np.exp(-visc * grid.xi_norm**2 * t)


def _apply(E, q, d):
    return E[0, 0] * q + E[0, 1] * d, E[1, 0] * q + E[1, 1] * d


def _advect(v_hat_phys, f_hat, grid, mask):
    """Dealiased ``v . grad f`` in coefficient space; ``v_hat_phys`` are physical samples of v."""
    ixi = 1j * grid.xi
    extra = f_hat.ndim - grid.dims
    grad = ixi.reshape((grid.dims,) + (1,) * extra + grid.shape) * (f_hat * mask)[None]
    g = inverse(grad, grid.dims)
    prod = np.einsum("i...,i...->...", v_hat_phys.reshape((grid.dims,) + (1,) * extra + grid.shape), g)
    return forward(prod, grid.dims) * mask


def _as_field_fn(src) -> Optional[Callable[[float], SpectralField]]:
    """Forcing given as None, a field (constant in time), a callable or a trajectory."""
    if src is None:
        return None
    if isinstance(src, SpectralField):
        return lambda t, f=src: f
    if isinstance(src, TrajectorySeries):
        def interp(t, tr=src):
            i = int(np.clip(np.searchsorted(tr.times, t, side="right") - 1, 0, len(tr) - 1))
            if i == len(tr) - 1 or t <= tr.times[0]:
                return tr.items[i]
            w = (t - tr.times[i]) / (tr.times[i + 1] - tr.times[i])
            return tr.items[i] * (1 - w) + tr.items[i + 1] * w
        return interp
    if callable(src):
        return src
    raise TypeError(f"cannot use {type(src).__name__} as a forcing")


def _coef(fn, t, grid):
    if fn is None:
        return 0.0
    f = fn(t)
    if f.grid != grid:
        raise ValidationError("forcing lives on another grid", "shared grid")
    return np.asarray(f.coefficients)


def advective_cfl(v: SpectralField) -> float:
    """``dt`` limit for explicit dealiased advection: ``dt * max|v| * k_max <= 1``."""
    grid = v.grid
    kmax = grid.box_frequency * (grid.points // 3)
    vmax = v.sup_norm()
    return math.inf if vmax == 0 else 1.0 / (vmax * kmax)


def evolve_linear(init: AcousticState, params: LinearParams, T: float, dt: float, *,
                  F=None, G=None, H=None, v: Optional[SpectralField] = None,
                  times: Optional[Sequence[float]] = None, record_every: int = 1) -> TrajectorySeries:
    """Evolve the linear acoustic system.

    Without forcing and transport the exact propagator is used and the
    trajectory is sampled at ``times`` (default multiples of ``dt``).  With
    forcing or a transport field ``v`` the scheme is an integrating-factor
    explicit midpoint rule of second order.
    """
    grid = init.grid
    params.validate()
    if not dt > 0 or not T >= 0:
        raise ValidationError("need dt > 0 and T >= 0", "dt>0")
    Ffn, Gfn, Hfn = _as_field_fn(F), _as_field_fn(G), _as_field_fn(H)
    q = np.asarray(init.q.coefficients).copy()
    d = np.asarray(init.d.coefficients).copy()
    om = None if init.omega is None else np.asarray(init.omega.coefficients).copy()

    def pack(qc, dc, oc):
        return AcousticState(SpectralField.from_coefficients(grid, qc), SpectralField.from_coefficients(grid, dc),
                             None if oc is None else SpectralField.from_coefficients(grid, oc))

    free = Ffn is None and Gfn is None and Hfn is None and v is None
    if free:
        if times is None:
            nsteps = int(round(T / dt))
            times = np.linspace(0.0, nsteps * dt, nsteps + 1)
        times = np.asarray(times, dtype=float)
        items = []
        for t in times:
            E = propagator(params, grid, t)
            qt, dt_ = _apply(E, q, d)
            oc = None if om is None else om * _heat_factor(grid, params.mu, t)
            items.append(pack(qt, dt_, oc))
        return TrajectorySeries(times, items)

    vmask = dealias_mask(grid)
    vphys = None
    if v is not None:
        if v.grid != grid:
            raise ValidationError("transport field lives on another grid", "shared grid")
        lim = advective_cfl(v)
        if dt > lim:
            raise CFLError(f"dt = {dt:g} exceeds advective limit {lim:g}")
        vphys = inverse(np.asarray(v.coefficients) * vmask, grid.dims)
    nsteps = int(round(T / dt))
    E_h = propagator(params, grid, dt)
    E_half = propagator(params, grid, dt / 2)
    H_h = _heat_factor(grid, params.mu, dt)
    H_half = _heat_factor(grid, params.mu, dt / 2)

    def rhs(t, qc, dc, oc):
        fq = _coef(Ffn, t, grid)
        fd = _coef(Gfn, t, grid)
        fo = _coef(Hfn, t, grid) if oc is not None else None
        if vphys is not None:
            fq = fq - _advect(vphys, qc, grid, vmask)
            fd = fd - _advect(vphys, dc, grid, vmask)
            if oc is not None:
                fo = fo - _advect(vphys, oc, grid, vmask)
        return fq, fd, fo

    items = [pack(q, d, om)]
    out_t = [0.0]
    t = 0.0
    for n in range(nsteps):
        fq, fd, fo = rhs(t, q, d, om)
        qm, dm = _apply(E_half, q + dt / 2 * fq, d + dt / 2 * fd)
        omm = None if om is None else H_half * (om + dt / 2 * fo)
        gq, gd, go = rhs(t + dt / 2, qm, dm, omm)
        q1, d1 = _apply(E_h, q, d)
        g1q, g1d = _apply(E_half, gq, gd)
        q = q1 + dt * g1q
        d = d1 + dt * g1d
        if om is not None:
            om = H_h * om + dt * H_half * go
        t = (n + 1) * dt
        if (n + 1) % record_every == 0 or n + 1 == nsteps:
            items.append(pack(q, d, om))
            out_t.append(t)
    return TrajectorySeries(np.array(out_t), items)


# Lyapunov functionals ------------------------------------------------------

def _mode_terms(q_hat, d_hat, params: LinearParams, grid: Grid) -> np.ndarray:
    xi = grid.xi_norm
    hat = params.phi_hat(grid)
    qq = np.abs(q_hat) ** 2
    cross = xi * np.real(q_hat * np.conj(d_hat))
    return np.stack([qq, hat * qq, np.abs(d_hat) ** 2, cross, xi**2 * qq]).reshape(5, -1)


def _profile_from_coefs(q_hat, d_hat, cfg, params, P):
    sums = P.grid.volume * (P.squared_flat @ _mode_terms(q_hat, d_hat, params, P.grid).T)
    qq, qphi, dd, cross, lq = sums.T
    low = params.delta * qq - params.kappa * qphi + dd - 2 * cfg.K1 * cross
    high = lq + cfg.A * dd - (2.0 / params.nu) * cross
    f2 = np.where(P.levels <= cfg.l0, low, high)
    scale = np.maximum(np.abs(qq) + np.abs(dd) + np.abs(lq), 1e-300)
    if np.any(f2 < -1e-12 * scale):
        raise ValidationError("negative Lyapunov functional encountered", "f_l²≥0")
    return np.sqrt(np.maximum(f2, 0.0))


def lyapunov_profile(state: AcousticState, cfg: LyapunovConfig, params: LinearParams,
                     P: DyadicPartition) -> dict:
    """``{l: f_l}`` for every block of ``P``."""
    cfg.validate(params)
    f = _profile_from_coefs(np.asarray(state.q.coefficients), np.asarray(state.d.coefficients), cfg, params, P)
    return {int(l): float(v) for l, v in zip(P.levels, f)}


def lyapunov_equivalence(state: AcousticState, cfg: LyapunovConfig, params: LinearParams,
                         P: DyadicPartition):
    """Ratios ``f_l / (max(1, 2^l) ||q_l|| + ||d_l||)`` for blocks with content.

    Returns ``(min_ratio, max_ratio, ratios)``.
    """
    prof = lyapunov_profile(state, cfg, params, P)
    qn = block_norms(state.q, P)
    dn = block_norms(state.d, P)
    ratios = {}
    for i, l in enumerate(P.levels):
        ref = max(1.0, 2.0**l) * qn[i] + dn[i]
        if ref > 0:
            ratios[int(l)] = prof[int(l)] / ref
    vals = list(ratios.values()) or [1.0]
    return min(vals), max(vals), ratios


# Damping -------------------------------------------------------------------

def _pencil_rate(t: np.ndarray, y: np.ndarray, tol: float = 1e-9, wtol: float = 1e-6) -> float:
    """Slowest decay exponent of a sum of damped exponentials (matrix pencil method)."""
    dt = t[1] - t[0]
    M = len(y)
    L = M // 2
    Y = np.array([y[i:i + L + 1] for i in range(M - L)])
    _, S, Vh = np.linalg.svd(Y, full_matrices=False)
    m = int(np.sum(S > tol * S[0]))
    if m == 0:
        return math.nan
    V = Vh[:m].conj().T
    z = np.linalg.eigvals(np.linalg.pinv(V[:-1]) @ V[1:])
    z = z[np.abs(z) > 1e-300]
    s = np.log(z.astype(complex)) / dt
    basis = np.exp(np.outer(t - t[0], s))
    amp = np.linalg.lstsq(basis, y.astype(complex), rcond=None)[0]
    weight = np.abs(amp * np.exp(s.real * (t[-1] - t[0])))
    keep = weight > wtol * abs(y[-1])
    if not np.any(keep):
        return math.nan
    return float(-np.max(s.real[keep]))


def fit_rate(times: np.ndarray, values: np.ndarray, window: tuple = (0.5, 1.0), method: str = "pencil") -> float:
    """Exponential decay rate of ``values`` over a fraction of the time span.

    ``pencil`` fits ``values**2`` by a sum of damped complex exponentials and
    returns half the slowest exponent, which is insensitive to the
    oscillation of underdamped modes.  ``slope`` is the least-squares slope
    of ``log values``.  The pencil falls back to the slope on failure.
    """
    times = np.asarray(times, float)
    values = np.asarray(values, float)
    T0, T1 = times[0], times[-1]
    sel = (times >= T0 + window[0] * (T1 - T0) - 1e-12) & (times <= T0 + window[1] * (T1 - T0) + 1e-12)
    sel &= values > 0
    if sel.sum() < 2:
        return math.nan
    if method == "pencil" and sel.sum() >= 6:
        t, y = times[sel], values[sel]
        if np.allclose(np.diff(t), t[1] - t[0], rtol=1e-9):
            with np.errstate(all="ignore"):
                r = _pencil_rate(t, y**2) / 2
            if np.isfinite(r) and r > 0:
                return float(r)
    elif method not in ("pencil", "slope"):
        raise ValueError(f"unknown fit method {method!r}")
    slope = np.polyfit(times[sel], np.log(values[sel]), 1)[0]
    return float(-slope)


@dataclass
class DampingRow:
    l: int
    f0: float
    rate_fit: float
    rate_bound: float
    rate_oracle: float
    monotone: bool
    passed: bool


@dataclass
class DampingReport:
    alpha_fit: float
    rows: list
    passed: bool
    max_increase: float
    oracle_mismatch: float
    profiles: Optional[np.ndarray] = None
    times: Optional[np.ndarray] = None

    def to_rows(self):
        return [{"l": r.l, "f_l(0)": r.f0, "rate_fit": r.rate_fit, "rate_bound": r.rate_bound,
                 "pass": r.passed} for r in self.rows]


def block_rate_oracle(params: LinearParams, P: DyadicPartition) -> np.ndarray:
    """Slowest ``|Re lambda|`` over the lattice modes each block sees."""
    _, lam2 = symbol_eigenvalues(params, P.grid)
    rate = np.abs(lam2.real)
    out = np.full(len(P.masks), np.nan)
    for i, m in enumerate(P.masks):
        sel = (m > 0) & P.grid.resolved
        if np.any(sel):
            out[i] = rate[sel].min()
    return out


def verify_damping(init: AcousticState, params: LinearParams, cfg: LyapunovConfig, T: float, dt: float,
                   P: DyadicPartition, *, slack: float = 1e-9, oracle_tol: float = 0.15,
                   window: tuple = (0.5, 1.0), method: str = "pencil",
                   keep_profiles: bool = False) -> DampingReport:
    """Evolve without forcing and check decay of every ``f_l``.

    A block passes when ``f_l`` never increases by more than ``slack`` and its
    fitted rate exceeds ``alpha_fit * min(2^{2l}, 1)``; ``alpha_fit`` is the
    largest constant that works for every block.  The fitted rate is compared
    with the slowest symbol eigenvalue in the block.
    """
    params.validate(P.grid)
    cfg.validate(params)
    grid = P.grid
    nsteps = int(round(T / dt))
    times = np.linspace(0.0, nsteps * dt, nsteps + 1)
    E = propagator(params, grid, dt)
    q = np.asarray(init.q.coefficients).copy()
    d = np.asarray(init.d.coefficients).copy()
    prof = np.empty((len(times), len(P.masks)))
    for j in range(len(times)):
        prof[j] = _profile_from_coefs(q, d, cfg, params, P)
        q, d = _apply(E, q, d)
    f0 = prof[0]
    increase = np.max(np.diff(prof, axis=0), axis=0) if len(times) > 1 else np.zeros(len(f0))
    monotone = increase <= slack
    weight = np.minimum(2.0 ** (2 * P.levels), 1.0)
    oracle = block_rate_oracle(params, P)
    active = f0 > 1e-12 * max(f0.max(), 1e-300)
    rates = np.full(len(f0), np.nan)
    for i in np.where(active)[0]:
        # Stop the fit where the block has decayed to rounding level.
        alive = prof[:, i] > 1e-11 * f0[i]
        rates[i] = fit_rate(times[alive], prof[alive, i], window, method)
    valid = active & np.isfinite(rates)
    alpha = float(np.min(rates[valid] / weight[valid])) if np.any(valid) else 0.0
    mismatch = np.abs(rates - oracle) / oracle
    worst = float(np.nanmax(mismatch[valid])) if np.any(valid) else 0.0
    rows = []
    ok_all = True
    for i, l in enumerate(P.levels):
        bound = alpha * weight[i]
        if valid[i]:
            ok = bool(monotone[i] and rates[i] >= bound * (1 - 1e-12) and alpha > 0 and mismatch[i] <= oracle_tol)
        else:
            ok = bool(monotone[i])
        ok_all &= ok
        rows.append(DampingRow(int(l), float(f0[i]), float(rates[i]), float(bound), float(oracle[i]),
                               bool(monotone[i]), ok))
    return DampingReport(alpha, rows, ok_all, float(increase.max()) if increase.size else 0.0, worst,
                         prof if keep_profiles else None, times if keep_profiles else None)


def write_damping_csv(report: DampingReport, path) -> None:
    cols = ["l", "f_l(0)", "rate_fit", "rate_bound", "pass"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for row in report.to_rows():
            w.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in row.items()})


# Smoothing -----------------------------------------------------------------

@dataclass
class SmoothingReport:
    lhs: float
    rhs: float
    ratio: float
    c_max: float
    passed: bool
    details: dict = field(default_factory=dict)


def smoothing_times(T: float, count: int = 400, first: float = 1e-6) -> np.ndarray:
    """Geometric sampling that resolves fast parabolic transients near ``t = 0``."""
    return np.concatenate([[0.0], np.geomspace(first, T, count)])


def verify_smoothing(traj: TrajectorySeries, s: float, cfg: LyapunovConfig, P: DyadicPartition, *,
                     F: Optional[TrajectorySeries] = None, G: Optional[TrajectorySeries] = None,
                     V: float = 0.0, c_max: float = 100.0) -> SmoothingReport:
    """``int_0^T sum_{l >= l0} 2^{l(s+1)} ||d_l|| dt`` against the initial data norms.

    The right side is ``(1 + V)(||q0||_{B~^{s-1,s}} + ||d0||_{B^{s-1}}) + int (||F|| + ||G||)``
    with ``F`` measured in ``B~^{s-1,s}`` and ``G`` in ``B^{s-1}``.
    """
    first = traj.items[0]
    lv = P.levels
    high = lv >= cfg.l0
    dnorms = np.stack([block_norms(st.d, P) for st in traj.items])
    per_t = (2.0 ** (lv[high] * (s + 1)) * dnorms[:, high]).sum(axis=1)
    lhs = float(np.sum(traj.weights * per_t))
    q0 = hybrid_norm(first.q, BesovSpec(s - 1, s, 2, 1), P)
    d0 = besov_norm(first.d, BesovSpec(s - 1, p=2, r=1), P)
    forcing = 0.0
    if F is not None:
        forcing += float(np.sum(F.weights * [hybrid_norm(f, BesovSpec(s - 1, s), P) for f in F.items]))
    if G is not None:
        forcing += float(np.sum(G.weights * [besov_norm(g, BesovSpec(s - 1), P) for g in G.items]))
    rhs = (1 + V) * (q0 + d0) + forcing
    ratio = 0.0 if lhs == 0 else (math.inf if rhs == 0 else lhs / rhs)
    return SmoothingReport(lhs, rhs, ratio, c_max, bool(ratio <= c_max),
                           {"s": s, "q0": q0, "d0": d0, "forcing": forcing, "T": traj.duration})


# Model problems ------------------------------------------------------------

@dataclass
class EstimateReport:
    name: str
    lhs: float
    rhs: float
    ratio: float
    constant: float
    passed: bool
    details: dict = field(default_factory=dict)


def _velocity_fn(u):
    if u is None:
        return None
    return _as_field_fn(u)


def _grad_norm(u: SpectralField, P: DyadicPartition) -> float:
    """``||grad u||_{B^{N/2}_{2,1}}``, which controls ``||grad u||_{L^inf}``."""
    grid = u.grid
    c = np.asarray(u.coefficients)
    grads = (1j * grid.xi[None] * c[:, None]).reshape((-1,) + grid.shape)
    g = SpectralField.from_coefficients(grid, grads.reshape((grid.dims, grid.dims) + grid.shape))
    return besov_norm(g, BesovSpec(grid.dims / 2.0, p=2, r=1), P)


def solve_transport(q0: SpectralField, u, T: float, dt: float, spec: BesovSpec, P: DyadicPartition, *,
                    F=None, record_every: int = 1, c_cap: float = 1e3):
    """Dealiased pseudo-spectral RK4 for ``dq/dt + u . grad q = F``.

    ``u`` is a vector field (steady), a callable of time or a trajectory.
    The report gives the smallest ``C`` for which the exponential transport
    bound holds at every sample, with ``U(t) = int ||grad u||_{B^{N/2}_{2,1}}``.
    """
    grid = q0.grid
    N = grid.dims
    lo, hi = -min(N / spec.p, N * (1 - 1 / spec.p)), N / spec.p + 1
    warn = not (lo < spec.s < hi)
    ufn = _velocity_fn(u)
    Ffn = _as_field_fn(F)
    mask = dealias_mask(grid)
    q = np.asarray(q0.coefficients).astype(complex)
    if ufn is not None:
        lim = advective_cfl(ufn(0.0))
        if dt > 2.8 * lim:
            raise CFLError(f"dt = {dt:g} exceeds RK4 advective limit {2.8 * lim:g}")

    cache = {}

    def vel(t):
        if ufn is None:
            return None
        key = round(t, 14)
        if key not in cache:
            if len(cache) > 8:
                cache.clear()
            cache[key] = inverse(np.asarray(ufn(t).coefficients) * mask, N)
        return cache[key]

    def rhs(t, qc):
        out = _coef(Ffn, t, grid) * mask if Ffn is not None else np.zeros_like(qc)
        vp = vel(t)
        if vp is not None:
            out = out - _advect(vp, qc, grid, mask)
        return out

    nsteps = int(round(T / dt))
    times = [0.0]
    items = [q0]
    grad_u = [0.0 if ufn is None else _grad_norm(ufn(0.0), P)]
    for n in range(nsteps):
        t = n * dt
        k1 = rhs(t, q)
        k2 = rhs(t + dt / 2, q + dt / 2 * k1)
        k3 = rhs(t + dt / 2, q + dt / 2 * k2)
        k4 = rhs(t + dt, q + dt * k3)
        q = q + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        if (n + 1) % record_every == 0 or n + 1 == nsteps:
            times.append((n + 1) * dt)
            items.append(SpectralField.from_coefficients(grid, q))
            grad_u.append(0.0 if ufn is None else _grad_norm(ufn((n + 1) * dt), P))
    traj = TrajectorySeries(np.array(times), items)
    report = _transport_report(traj, np.array(grad_u), Ffn, spec, P, c_cap)
    report.details["regularity_warning"] = warn
    return traj, report


def _transport_report(traj, grad_u, Ffn, spec, P, c_cap):
    times = traj.times
    # U(t) by cumulative trapezoid.
    U = np.concatenate([[0.0], np.cumsum(np.diff(times) * (grad_u[1:] + grad_u[:-1]) / 2)])
    norms = np.stack([block_norms(f, P, spec.p) for f in traj.items])
    lhs_t = np.array([_weighted_sum(np.max(norms[: j + 1], axis=0), P.levels, spec, not spec.is_plain)
                      for j in range(len(times))])
    q0n = lhs_t[0]
    Fn = np.zeros(len(times))
    if Ffn is not None:
        for j, t in enumerate(times):
            Fn[j] = float(_weighted_sum(block_norms(Ffn(t), P, spec.p), P.levels, spec, not spec.is_plain))

    def rhs_of(C):
        g = np.exp(-C * U) * Fn
        integ = np.concatenate([[0.0], np.cumsum(np.diff(times) * (g[1:] + g[:-1]) / 2)])
        with np.errstate(over="ignore"):
            return np.exp(C * U) * (q0n + integ)

    def ok(C):
        return np.all(lhs_t <= rhs_of(C) * (1 + 1e-12) + 1e-300)

    if ok(0.0):
        C = 0.0
    elif not ok(c_cap):
        C = math.inf
    else:
        a, b = 0.0, c_cap
        for _ in range(80):
            m = 0.5 * (a + b)
            a, b = (a, m) if ok(m) else (m, b)
        C = b
    final_rhs = float(rhs_of(C if math.isfinite(C) else c_cap)[-1])
    lhs = float(lhs_t[-1])
    return EstimateReport("transport", lhs, final_rhs, lhs / final_rhs if final_rhs else 0.0, C,
                          bool(math.isfinite(C)), {"U_T": float(U[-1]), "norm_series": lhs_t.tolist()})


def _phi12(z):
    """``phi1(z) = (e^z - 1)/z`` and ``phi2(z) = (e^z - 1 - z)/z^2`` for real ``z <= 0``."""
    z = np.asarray(z, float)
    p1 = np.ones_like(z)
    p2 = np.full_like(z, 0.5)
    big = np.abs(z) > 1e-4
    zb = z[big]
    p1[big] = np.expm1(zb) / zb
    p2[big] = (np.expm1(zb) - zb) / zb**2
    zs = z[~big]
    p1[~big] = 1 + zs / 2 + zs**2 / 6
    p2[~big] = 0.5 + zs / 6 + zs**2 / 24
    return p1, p2


def solve_heat(u0: SpectralField, mu: float, T: float, dt: float, rho1: float, rho2: float, spec: BesovSpec,
               P: DyadicPartition, *, f=None, times: Optional[Sequence[float]] = None):
    """Exact integrating factor for ``du/dt - mu Delta u = f``.

    The forcing is interpolated linearly over each step and integrated
    exactly.  Without forcing the solution is sampled at ``times`` (default
    geometric sampling, which resolves the parabolic layer).  The report
    ratio is ``||u||_{L~^rho1(B^{s+2/rho1})} / (||u0||_{B^s} + mu^{1/rho2-1} ||f||_{L~^rho2(B^{s-2+2/rho2})})``.
    """
    if not mu > 0:
        raise ValidationError(f"mu = {mu} must be positive", "μ>0")
    if not 1 <= rho2 <= rho1:
        raise ValidationError("need 1 <= rho2 <= rho1", "1≤ρ₂≤ρ₁≤∞")
    grid = u0.grid
    xi2 = grid.xi_norm**2
    c0 = np.asarray(u0.coefficients)
    ffn = _as_field_fn(f)
    if ffn is None:
        if times is None:
            times = smoothing_times(T)
        times = np.asarray(times, float)
        items = [SpectralField.from_coefficients(grid, c0 * np.exp(-mu * xi2 * t)) for t in times]
    else:
        nsteps = int(round(T / dt))
        times = np.linspace(0, nsteps * dt, nsteps + 1)
        z = -mu * xi2 * dt
        ez = np.exp(z)
        p1, p2 = _phi12(z)
        c = c0.astype(complex)
        items = [u0]
        fn = np.asarray(ffn(0.0).coefficients)
        for n in range(nsteps):
            fn1 = np.asarray(ffn((n + 1) * dt).coefficients)
            c = ez * c + dt * (p1 * fn + p2 * (fn1 - fn))
            fn = fn1
            items.append(SpectralField.from_coefficients(grid, c))
    traj = TrajectorySeries(times, items)
    target = BesovSpec(spec.s + 2.0 / rho1, spec.t + 2.0 / rho1, spec.p, spec.r)
    lhs = chemin_lerner_norm(traj, rho1, target, P, hybrid=not target.is_plain)
    rhs = float(_weighted_sum(block_norms(u0, P, spec.p), P.levels, spec, not spec.is_plain))
    if ffn is not None:
        ftraj = TrajectorySeries(times, [ffn(t) for t in times])
        fspec = BesovSpec(spec.s - 2 + 2.0 / rho2, spec.t - 2 + 2.0 / rho2, spec.p, spec.r)
        rhs += mu ** (1.0 / rho2 - 1) * chemin_lerner_norm(ftraj, rho2, fspec, P, hybrid=not fspec.is_plain)
    ratio = 0.0 if lhs == 0 else (math.inf if rhs == 0 else lhs / rhs)
    return traj, EstimateReport("heat", lhs, rhs, ratio, ratio, bool(np.isfinite(ratio)),
                                {"mu": mu, "rho1": rho1, "rho2": rho2})


def solve_heat_variable(u0: SpectralField, mu: float, lam: float, T: float, dt: float, P: DyadicPartition, *,
                        a=None, G=None, s: Optional[float] = None, record_every: int = 1):
    """``du/dt - mu div(a grad u) - (lam + mu) grad(a div u) = G``.

    The part with the spatial mean of ``a(0)`` is integrated exactly (per
    Hodge component); the fluctuation is explicit (integrating-factor
    midpoint).  ``a`` is a scalar field, a callable of time or ``None``
    (``a = 1``).
    """
    grid = u0.grid
    N = grid.dims
    nu = 2 * mu + lam
    if not (nu > 0 and mu > 0):
        raise ValidationError("need mu > 0 and 2 mu + lam > 0", "ν̄=2μ̄+λ̄>0")
    afn = _as_field_fn(a) if a is not None else (lambda t: SpectralField(grid, np.ones(grid.shape)))
    a0 = afn(0.0)
    amin, amax = float(a0.values.min()), float(a0.values.max())
    if not amin > 0:
        raise ValidationError(f"coefficient lower bound {amin:g} is not positive", "0<a_≤a(t,x)≤ā")
    abar = float(a0.mean)
    xi = grid.xi
    xi2 = grid.xi_norm**2
    inv2 = np.zeros(grid.shape)
    inv2[grid.xi_norm > 0] = 1.0 / xi2[grid.xi_norm > 0]
    # Projector onto gradients: xi xi^T / |xi|^2.
    Pd = xi[:, None] * xi[None, :] * inv2
    eye = np.eye(N).reshape((N, N) + (1,) * N)

    def semigroup(t):
        ed = np.exp(-abar * nu * xi2 * t)
        ec = np.exp(-abar * mu * xi2 * t)
        return ed * Pd + ec * (eye - Pd)

    S_h, S_half = semigroup(dt), semigroup(dt / 2)
    mask = dealias_mask(grid)
    ixi = 1j * xi

    def apply(S, c):
        return np.einsum("ij...,j...->i...", S, c)

    Gfn = _as_field_fn(G)

    def fluct(t, c):
        at = afn(t)
        if at.values.min() <= 0:
            raise ValidationError("coefficient lost positivity", "0<a_≤a(t,x)≤ā")
        da = at.values - abar
        if not np.any(da) and Gfn is None:
            return np.zeros_like(c)
        cm = c * mask
        grad = inverse(ixi[None, :] * cm[:, None], N)  # grad[i, j] = d_j u_i
        div = inverse(np.sum(ixi * cm, axis=0), N)
        flux = forward(da * grad, N) * mask
        term1 = mu * np.sum(ixi[None, :] * flux, axis=1)
        term2 = (lam + mu) * ixi * (forward(da * div, N) * mask)
        out = term1 + term2
        if Gfn is not None:
            out = out + np.asarray(Gfn(t).coefficients)
        return out

    dev = max(abs(amax - abar), abs(amin - abar))
    if dev > 0 and dt * nu * dev * float(xi2[mask].max()) > 2.0:
        raise CFLError(f"dt = {dt:g} too large for the explicit coefficient fluctuation")
    c = np.asarray(u0.coefficients).astype(complex)
    nsteps = int(round(T / dt))
    times, items = [0.0], [u0]
    for n in range(nsteps):
        t = n * dt
        k1 = fluct(t, c)
        cm = apply(S_half, c + dt / 2 * k1)
        k2 = fluct(t + dt / 2, cm)
        c = apply(S_h, c) + dt * apply(S_half, k2)
        if (n + 1) % record_every == 0 or n + 1 == nsteps:
            times.append((n + 1) * dt)
            items.append(SpectralField.from_coefficients(grid, c))
    traj = TrajectorySeries(np.array(times), items)
    s = N / 2.0 - 1 if s is None else s
    ga = []
    for t in traj.times:
        at = afn(t)
        g = SpectralField.from_coefficients(grid, ixi * np.asarray(at.coefficients))
        ga.append(besov_norm(g, BesovSpec(N / 2.0, p=2, r=1), P))
    ga = np.array(ga)
    corr = float(np.sum(traj.weights * ga**2)) / (amin * nu)
    spec0 = BesovSpec(s, p=2, r=1)
    lhs = chemin_lerner_norm(traj, math.inf, spec0, P, hybrid=False) + amin * min(mu, nu) * chemin_lerner_norm(
        traj, 1, BesovSpec(s + 2, p=2, r=1), P, hybrid=False)
    rhs0 = besov_norm(u0, spec0, P)
    if Gfn is not None:
        rhs0 += float(np.sum(traj.weights * [besov_norm(Gfn(t), spec0, P) for t in traj.times]))
    rhs = math.exp(corr) * rhs0
    ratio = 0.0 if lhs == 0 else (math.inf if rhs == 0 else lhs / rhs)
    energy = np.array([f.l2_norm() ** 2 for f in traj.items])
    return traj, EstimateReport("variable_heat", lhs, rhs, ratio, ratio, bool(np.isfinite(ratio)),
                                {"a_min": amin, "a_max": amax, "a_mean": abar, "grad_a_correction": corr,
                                 "energy": energy.tolist()})


def reweight_trajectory(traj: TrajectorySeries, K: float, v_traj: Optional[TrajectorySeries],
                        P: DyadicPartition) -> TrajectorySeries:
    """Multiply each state by ``exp(-K V(t))`` with ``V(t) = int ||grad v||_{B^{N/2}_{2,1}}``."""
    if v_traj is None or K == 0:
        return traj
    g = np.array([_grad_norm(v, P) for v in v_traj.items])
    V = np.concatenate([[0.0], np.cumsum(np.diff(v_traj.times) * (g[1:] + g[:-1]) / 2)])
    w = np.exp(-K * np.interp(traj.times, v_traj.times, V))

    def scale(x, c):
        if isinstance(x, AcousticState):
            return AcousticState(x.q * c, x.d * c, None if x.omega is None else x.omega * c)
        return x * c

    return TrajectorySeries(traj.times, [scale(x, c) for x, c in zip(traj.items, w)])
