"""Friedrichs-truncated pseudo-spectral solver for the capillary shallow-water system.

Unknowns are ``q = (rho - rho_bar) / rho_bar`` and ``u``.  Dividing the
momentum equation by ``rho`` gives

    dq/dt + div u = -u . grad q - q div u
    du/dt - mu Delta u - (mu + lam) grad div u + delta grad q - kappa grad(phi * q)
        = -u . grad u + A(rho, u) - K(rho) grad q

with ``K(rho) = rho_bar P'(rho) / rho - P'(rho_bar)`` and
``A = [div(2 mu(rho) D u) + grad(lam(rho) div u)] / rho - mu Delta u - (mu + lam) grad div u``.
The linear part is integrated exactly in the variables ``(q, d, Omega)``;
the right side is explicit (integrating-factor midpoint rule).
"""
from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from typing import Optional

import numpy as np

from .besov import (
    BesovSpec,
    DyadicPartition,
    TrajectorySeries,
    _weighted_sum,
    besov_norm,
    block_norms,
    build_partition,
    chemin_lerner_norm,
    hybrid_norm,
)
from .errors import CFLError, ValidationError, VacuumError
from .linear import AcousticState, LinearParams, _heat_factor, propagator
from .spectral import (
    Grid,
    SpectralField,
    dealias_mask,
    forward,
    gaussian_kernel,
    hodge_coefficients,
    inverse,
    read_snapshot,
    velocity_coefficients,
    write_snapshot,
)

__all__ = [
    "PhysicalLaws",
    "FriedrichsLevel",
    "SolutionState",
    "friedrichs_project",
    "nonlinear_rhs",
    "evolve_sw",
    "EnergyReport",
    "energy_functional",
    "scale_to_energy",
    "BoundReport",
    "global_bound_experiment",
    "local_time_bound",
    "StabilityReport",
    "stability_experiment",
    "composition_ratio",
    "save_trajectory",
    "load_trajectory",
]

VACUUM_FLOOR = 0.25


# Physics ---------------------------------------------------------------------

@dataclass(frozen=True)
class PhysicalLaws:
    """Power laws ``P = p_coef rho^p_exp``, ``mu = mu_coef rho^mu_exp``, ``lam = lam_coef rho^lam_exp``.

    The capillary kernel is a periodised Gaussian whose width is
    ``kernel_width`` times the torus side.
    """

    rho_bar: float = 1.0
    kappa: float = 0.0
    p_coef: float = 1.0
    p_exp: float = 2.0
    mu_coef: float = 1.0
    mu_exp: float = 1.0
    lam_coef: float = 0.0
    lam_exp: float = 1.0
    kernel_width: float = 1.0 / 16.0
    kappa_reg: float = 0.0
    gap: float = 1e-8

    @classmethod
    def shallow_water(cls, kappa: float = 0.0, **kw) -> "PhysicalLaws":
        """``P = rho^2``, ``mu = rho``, ``lam = 0``, ``rho_bar = 1``."""
        return cls(kappa=kappa, **kw)

    def pressure(self, rho):
        return self.p_coef * np.power(rho, self.p_exp)

    def dpressure(self, rho):
        return self.p_coef * self.p_exp * np.power(rho, self.p_exp - 1)

    def mu(self, rho):
        return self.mu_coef * np.power(rho, self.mu_exp)

    def lam(self, rho):
        return self.lam_coef * np.power(rho, self.lam_exp)

    def K(self, rho):
        return self.rho_bar * self.dpressure(rho) / rho - self.dpressure(self.rho_bar)

    @property
    def nu_tilde(self) -> float:
        rb = self.rho_bar
        return float(min(self.mu(rb), self.lam(rb) + 2 * self.mu(rb)))

    def kernel(self, grid: Grid):
        return _kernel_cache(grid, self.kernel_width)

    def linear_params(self, grid: Optional[Grid] = None) -> LinearParams:
        rb = self.rho_bar
        kern = None if grid is None else self.kernel(grid)
        return LinearParams(
            mu=float(self.mu(rb) / rb),
            lam=float(self.lam(rb) / rb),
            delta=float(self.kappa * rb + self.dpressure(rb)),
            kappa=float(self.kappa * rb),
            kernel=kern,
            kappa_reg=self.kappa_reg,
            gap=self.gap,
        )

    def rescaled(self, lam: float) -> "PhysicalLaws":
        """Laws for the critically rescaled problem: pressure and capillarity times ``lam**2``."""
        return replace(self, p_coef=self.p_coef * lam**2, kappa=self.kappa * lam**2)

    def validate(self, grid: Optional[Grid] = None, density_range=(0.5, 1.5)) -> "PhysicalLaws":
        rb = self.rho_bar
        if not rb > 0:
            raise ValidationError("rho_bar must be positive", "ρ̄>0")
        if self.kappa < 0:
            raise ValidationError("kappa must be nonnegative", "κ≥0")
        if not self.dpressure(rb) > 0:
            raise ValidationError("P'(rho_bar) must be positive", "P′(ρ̄)>0")
        if not self.mu(rb) > 0:
            raise ValidationError("mu(rho_bar) must be positive", "μ(ρ̄)>0")
        if not 2 * self.mu(rb) + self.lam(rb) > 0:
            raise ValidationError("2 mu + lam must be positive at rho_bar", "2μ(ρ̄)+λ(ρ̄)>0")
        rho = rb * np.linspace(density_range[0], density_range[1], 201)
        if np.any(self.mu(rho) <= 0):
            raise ValidationError("mu must be positive on the density range", "μ>0")
        if grid is not None:
            N = grid.dims
            if np.any(2 * self.mu(rho) + N * self.lam(rho) < 0):
                raise ValidationError("2 mu + N lam must be nonnegative", "2μ+Nλ≥0")
            self.kernel(grid).check()
        self.linear_params(grid).validate(grid)
        return self

    def to_dict(self) -> dict:
        return asdict(self)


@lru_cache(maxsize=16)
def _kernel_cache(grid: Grid, fraction: float):
    return gaussian_kernel(grid, width=fraction * grid.period)


@dataclass(frozen=True)
class FriedrichsLevel:
    """Spectral annulus ``1/n <= |xi| <= n``; ``n = None`` keeps every resolved mode."""

    n: Optional[float] = None

    def __post_init__(self):
        if self.n is not None and not self.n >= 1:
            raise ValidationError("Friedrichs level must be >= 1", "n≥1")

    def mask(self, grid: Grid) -> np.ndarray:
        m = grid.resolved.copy()
        if self.n is not None:
            r = grid.xi_norm
            m &= (r >= 1.0 / self.n) & (r <= self.n)
        return m


def friedrichs_project(f: SpectralField, level: FriedrichsLevel) -> SpectralField:
    return SpectralField.from_coefficients(f.grid, np.asarray(f.coefficients) * level.mask(f.grid))


@dataclass(frozen=True, eq=False)
class SolutionState:
    q: SpectralField
    u: SpectralField
    t: float = 0.0

    @property
    def grid(self) -> Grid:
        return self.q.grid

    def hodge(self):
        d, om = hodge_coefficients(np.asarray(self.u.coefficients), self.grid)
        return SpectralField.from_coefficients(self.grid, d), SpectralField.from_coefficients(self.grid, om)

    @property
    def d(self) -> SpectralField:
        return self.hodge()[0]

    @property
    def omega(self) -> SpectralField:
        return self.hodge()[1]

    def acoustic(self) -> AcousticState:
        d, om = self.hodge()
        return AcousticState(self.q, d, om)


# Right-hand side ---------------------------------------------------------------

class _Workspace:
    """Per-grid arrays reused by every right-hand side evaluation."""

    def __init__(self, grid: Grid, laws: PhysicalLaws, level: FriedrichsLevel):
        self.grid = grid
        self.N = grid.dims
        self.laws = laws
        self.dealias = dealias_mask(grid)
        self.out_mask = self.dealias & level.mask(grid)
        self.ixi = 1j * grid.xi
        self.params = laws.linear_params(grid)

    def phys(self, c):
        return inverse(c * self.dealias, self.N)

    def trunc(self, values):
        return forward(values, self.N) * self.dealias


def _rhs_coefficients(q_hat, u_hat, ws: _Workspace, guard: float = VACUUM_FLOOR):
    """Return ``(F1_hat, Gtot_hat)`` with the output mask applied."""
    laws, N, ixi = ws.laws, ws.N, ws.ixi
    rb = laws.rho_bar
    q = ws.phys(q_hat)
    rho = rb * (1.0 + q)
    if rho.min() < guard * rb:
        raise VacuumError(f"density ratio {rho.min() / rb:.3g} below {guard}", float(rho.min() / rb))
    u = ws.phys(u_hat)
    grad_u = inverse(ixi[None, :] * (u_hat * ws.dealias)[:, None], N)  # [i, j] = d_j u_i
    div_u = np.trace(grad_u, axis1=0, axis2=1)
    grad_q = inverse(ixi * (q_hat * ws.dealias), N)

    F1 = -ws.trunc(np.einsum("i...,i...->...", u, grad_q) + q * div_u)

    adv = ws.trunc(np.einsum("j...,ij...->i...", u, grad_u))
    mu_rho = ws.phys(ws.trunc(laws.mu(rho)))
    lam_rho = ws.phys(ws.trunc(laws.lam(rho)))
    inv_rho = ws.phys(ws.trunc(1.0 / rho))
    Du = 0.5 * (grad_u + np.swapaxes(grad_u, 0, 1))
    stress = ws.trunc(2.0 * mu_rho * Du)
    div_stress = np.sum(ixi[None, :] * stress, axis=1)
    bulk = ixi * ws.trunc(lam_rho * div_u)
    visc = ws.phys(div_stress + bulk)
    mu_b, lam_b = ws.params.mu, ws.params.lam
    uh = u_hat * ws.dealias
    lin_visc = -mu_b * ws.grid.xi_norm**2 * uh + (mu_b + lam_b) * ixi * np.sum(ixi * uh, axis=0)
    A_hat = ws.trunc(inv_rho * visc) - lin_visc
    K_rho = ws.phys(ws.trunc(laws.K(rho)))
    Kgrad = ws.trunc(K_rho * grad_q)
    G = -adv + A_hat - Kgrad
    return F1 * ws.out_mask, G * ws.out_mask


def nonlinear_rhs(state: SolutionState, laws: PhysicalLaws, level: FriedrichsLevel):
    """``(F1, G1, H1)``: the mass source, and the compressible and incompressible parts of the momentum source."""
    ws = _Workspace(state.grid, laws, level)
    F1, G = _rhs_coefficients(np.asarray(state.q.coefficients), np.asarray(state.u.coefficients), ws)
    G1, H1 = hodge_coefficients(G, state.grid)
    g = state.grid
    return (SpectralField.from_coefficients(g, F1), SpectralField.from_coefficients(g, G1),
            SpectralField.from_coefficients(g, H1))


# Time stepping -----------------------------------------------------------------

def _max_speed_limit(u_phys: np.ndarray, grid: Grid) -> float:
    vmax = float(np.sqrt(np.sum(u_phys**2, axis=0)).max())
    kmax = grid.box_frequency * (grid.points // 3)
    return math.inf if vmax == 0 else 1.0 / (vmax * kmax)


def evolve_sw(q0: SpectralField, u0: SpectralField, laws: PhysicalLaws, level: FriedrichsLevel, T: float,
              dt: float, *, record_every: int = 1, vacuum_band=(0.5, 1.5), cfl: float = 1.0,
              validate: bool = True, observer=None) -> TrajectorySeries:
    """Integrate the truncated system; returns a trajectory of :class:`SolutionState`.

    The initial data are projected onto the Friedrichs annulus; the mean of
    ``q`` and ``u`` is carried unchanged.  The run halts (flagged, partial
    trajectory returned) when ``1 + q`` leaves ``vacuum_band`` or the
    advective CFL condition fails mid-run.  ``observer(state)`` is called
    on every step, recorded or not.
    """
    grid = q0.grid
    if u0.grid != grid:
        raise ValidationError("q0 and u0 live on different grids", "shared grid")
    if validate:
        laws.validate(grid)
    if not (dt > 0 and T >= 0):
        raise ValidationError("need dt > 0 and T >= 0", "dt>0")
    ws = _Workspace(grid, laws, level)
    params = ws.params
    mask = level.mask(grid)
    zero = (0,) * grid.dims
    q_hat = np.asarray(q0.coefficients) * mask
    u_hat = np.asarray(u0.coefficients) * mask
    q_mean = complex(np.asarray(q0.coefficients)[zero])
    u_mean = np.asarray(u0.coefficients)[(slice(None),) + zero].copy()
    q_hat[zero] = q_mean
    d_hat, om_hat = hodge_coefficients(u_hat, grid)

    def velocity(d, om):
        u = velocity_coefficients(d, om, grid)
        u[(slice(None),) + zero] = u_mean
        return u

    def make_state(q, d, om, t):
        return SolutionState(SpectralField.from_coefficients(grid, q),
                             SpectralField.from_coefficients(grid, velocity(d, om)), t)

    u_phys = inverse(velocity(d_hat, om_hat), grid.dims)
    if dt > cfl * _max_speed_limit(u_phys, grid):
        raise CFLError(f"dt = {dt:g} exceeds the advective limit {cfl * _max_speed_limit(u_phys, grid):g}")
    q_phys = inverse(q_hat, grid.dims)
    if q_phys.min() + 1 < vacuum_band[0] or q_phys.max() + 1 > vacuum_band[1]:
        raise VacuumError("initial density outside the admissible band", float(q_phys.min() + 1))

    E_h, E_half = propagator(params, grid, dt), propagator(params, grid, dt / 2)
    H_h, H_half = _heat_factor(grid, params.mu, dt), _heat_factor(grid, params.mu, dt / 2)

    def N(q, d, om):
        F1, G = _rhs_coefficients(q, velocity(d, om), ws)
        g1, h1 = hodge_coefficients(G, grid)
        return F1, g1, h1

    def lin(E, H, q, d, om):
        return E[0, 0] * q + E[0, 1] * d, E[1, 0] * q + E[1, 1] * d, H * om

    nsteps = int(round(T / dt))
    times, items = [0.0], [make_state(q_hat, d_hat, om_hat, 0.0)]
    if observer is not None:
        observer(items[0])
    halted, reason = False, ""
    for n in range(nsteps):
        t = n * dt
        try:
            f1, g1, h1 = N(q_hat, d_hat, om_hat)
            qm, dm, omm = lin(E_half, H_half, q_hat + dt / 2 * f1, d_hat + dt / 2 * g1, om_hat + dt / 2 * h1)
            f2, g2, h2 = N(qm, dm, omm)
        except VacuumError as exc:
            halted, reason = True, f"vacuum at t={t:.6g}: {exc}"
            break
        a, b, c = lin(E_h, H_h, q_hat, d_hat, om_hat)
        ia, ib, ic = lin(E_half, H_half, f2, g2, h2)
        q_hat, d_hat, om_hat = a + dt * ia, b + dt * ib, c + dt * ic
        q_hat[zero] = q_mean
        q_phys = inverse(q_hat, grid.dims)
        u_phys = inverse(velocity(d_hat, om_hat), grid.dims)
        if not np.all(np.isfinite(q_phys)):
            halted, reason = True, f"non-finite state at t={t + dt:.6g}"
            break
        if q_phys.min() + 1 < vacuum_band[0] or q_phys.max() + 1 > vacuum_band[1]:
            halted, reason = True, f"density left [{vacuum_band[0]}, {vacuum_band[1]}] at t={t + dt:.6g}"
        elif dt > cfl * _max_speed_limit(u_phys, grid):
            halted, reason = True, f"CFL violated at t={t + dt:.6g}"
        record = (n + 1) % record_every == 0 or n + 1 == nsteps or halted
        if record or observer is not None:
            state = make_state(q_hat, d_hat, om_hat, (n + 1) * dt)
            if observer is not None:
                observer(state)
            if record:
                times.append((n + 1) * dt)
                items.append(state)
        if halted:
            break
    meta = {"dt": dt, "level": level.n, "grid": [grid.dims, grid.points, grid.period]}
    return TrajectorySeries(np.array(times), items, halted, reason, meta)


# Energy functional ----------------------------------------------------------------

@dataclass
class EnergyReport:
    E0: float
    times: np.ndarray
    q_sup: np.ndarray
    q_int: np.ndarray
    u_sup: np.ndarray
    u_int: np.ndarray

    @property
    def total(self) -> np.ndarray:
        return self.q_sup + self.q_int + self.u_sup + self.u_int

    @property
    def ratio(self) -> float:
        if self.E0 == 0:
            return 0.0 if np.all(self.total == 0) else math.inf
        return float(self.total.max() / self.E0)


def _cumtrapz(values, times):
    return np.concatenate([[0.0], np.cumsum(np.diff(times) * (values[1:] + values[:-1]) / 2)])


def _energy_norms(state: SolutionState, P: DyadicPartition):
    N = state.grid.dims
    h = N / 2.0
    qn = block_norms(state.q, P)
    un = block_norms(state.u, P)
    lv = P.levels
    return (
        float(_weighted_sum(qn, lv, BesovSpec(h - 1, h), True)),
        float(_weighted_sum(qn, lv, BesovSpec(h + 1, h), True)),
        float(_weighted_sum(un, lv, BesovSpec(h - 1), False)),
        float(_weighted_sum(un, lv, BesovSpec(h + 1), False)),
    )


def initial_energy(q0: SpectralField, u0: SpectralField, P: DyadicPartition, u_space: str = "N/2-1") -> float:
    """``||q0||_{B~^{N/2-1,N/2}} + ||u0||_{B^{N/2-1}}`` (``u_space="N/2"`` for the alternative)."""
    N = q0.grid.dims
    su = N / 2.0 - 1 if u_space == "N/2-1" else N / 2.0
    return hybrid_norm(q0, BesovSpec(N / 2.0 - 1, N / 2.0), P) + besov_norm(u0, BesovSpec(su), P)


def energy_functional(traj: TrajectorySeries, P: DyadicPartition, u_space: str = "N/2-1") -> EnergyReport:
    """Running components of the critical energy along a trajectory.

    ``sup ||q||_{B~^{N/2-1,N/2}}``, ``int ||q||_{B~^{N/2+1,N/2}}``,
    ``sup ||u||_{B^{N/2-1}}`` and ``int ||u||_{B^{N/2+1}}``, all with
    ``p = 2, r = 1``.
    """
    if len(traj) == 0:
        raise ValueError("empty trajectory")
    vals = np.array([_energy_norms(s, P) for s in traj.items])
    first = traj.items[0]
    return _energy_from_norms(traj.times, vals, initial_energy(first.q, first.u, P, u_space))


def _energy_from_norms(t, vals, E0) -> EnergyReport:
    return EnergyReport(E0, t, np.maximum.accumulate(vals[:, 0]), _cumtrapz(vals[:, 1], t),
                        np.maximum.accumulate(vals[:, 2]), _cumtrapz(vals[:, 3], t))


def scale_to_energy(q0: SpectralField, u0: SpectralField, P: DyadicPartition, target: float):
    """Scale both fields by one factor so the initial energy equals ``target``."""
    E = initial_energy(q0, u0, P)
    if E == 0:
        return q0, u0
    c = target / E
    return q0 * c, u0 * c


# Experiments ------------------------------------------------------------------------

@dataclass
class BoundReport:
    E0: float
    ratio: float
    margin: float
    passed: bool
    first_violation: Optional[float]
    halted: bool
    halt_reason: str
    mass_drift: float
    energy: EnergyReport = field(repr=False)
    trajectory: Optional[TrajectorySeries] = field(default=None, repr=False)


def mass_drift(traj: TrajectorySeries) -> float:
    """Relative change of the total mass ``rho_bar (1 + mean q)``."""
    m = np.array([1.0 + float(s.q.mean) for s in traj.items])
    return float(np.max(np.abs(m - m[0])) / abs(m[0]))


def global_bound_experiment(q0: SpectralField, u0: SpectralField, laws: PhysicalLaws, level: FriedrichsLevel,
                            T: float, dt: float, margin: float = 10.0, *, eps0: float = math.inf,
                            P: Optional[DyadicPartition] = None, record_every: int = 1,
                            keep_trajectory: bool = False) -> BoundReport:
    """Run the solver and compare ``sup_t E(t) / E(0)`` with ``margin``."""
    P = P or build_partition(q0.grid)
    E0 = initial_energy(q0, u0, P)
    if E0 > eps0:
        raise ValidationError(f"E(0) = {E0:g} exceeds the smallness threshold {eps0:g}", "E(0)≤ε₀")
    seen_t, seen = [], []

    def observe(state):
        seen_t.append(state.t)
        seen.append(_energy_norms(state, P))

    traj = evolve_sw(q0, u0, laws, level, T, dt, record_every=record_every, observer=observe)
    rep = _energy_from_norms(np.array(seen_t), np.array(seen), E0)
    total = rep.total
    if rep.E0 == 0:
        ratio = 0.0 if np.all(total == 0) else math.inf
        over = np.zeros(len(total), bool) if ratio == 0 else total > 0
    else:
        ratio = float(total.max() / rep.E0)
        over = total > margin * rep.E0
    first = float(traj.times[np.argmax(over)]) if np.any(over) else None
    passed = bool(ratio <= margin and not traj.halted)
    return BoundReport(rep.E0, ratio, margin, passed, first, traj.halted, traj.halt_reason, mass_drift(traj),
                       rep, traj if keep_trajectory else None)


def local_time_bound(u0: SpectralField, laws: PhysicalLaws, eps: float, P: DyadicPartition, *,
                     eta: float = 1.0, c: float = 1.0, p: float = 2.0, exponent: str = "2^{2q}",
                     tol: float = 1e-14) -> float:
    """Lower bound for the existence time from the velocity data.

    Solves ``sum_q 2^{q(N/p-1)} ||Delta_q u0|| (1 - exp(-c nu t w_q)) / (c nu) = eps nu^2 / (nu + U0)``
    for ``t`` by bisection, with ``w_q = 2^{2q}`` (``exponent="e^{2q}"``
    uses ``exp(2q)``), ``nu = min(mu(rho_bar), lam(rho_bar) + 2 mu(rho_bar))``
    and ``U0 = ||u0||_{B^{N/p}_{p,1}}``; returns ``min(eta, t*)``.
    """
    if not eps > 0:
        raise ValidationError("eps must be positive", "ε>0")
    N = u0.grid.dims
    nu = laws.nu_tilde
    norms = block_norms(u0, P, p)
    lv = P.levels
    U0 = float(np.sum(2.0 ** (lv * N / p) * norms))
    weights = 2.0 ** (lv * (N / p - 1)) * norms
    rates = 2.0 ** (2 * lv) if exponent == "2^{2q}" else np.exp(2.0 * lv)
    threshold = eps * nu**2 / (nu + U0)

    def lhs(t):
        return float(np.sum(weights * -np.expm1(-c * nu * t * rates)) / (c * nu))

    if lhs(eta) <= threshold:
        return float(eta)
    lo, hi = 0.0, float(eta)
    while hi - lo > tol * max(hi, 1e-300):
        mid = 0.5 * (lo + hi)
        if mid in (lo, hi):
            break
        if lhs(mid) <= threshold:
            lo = mid
        else:
            hi = mid
    return float(lo)


@dataclass
class StabilityReport:
    X: np.ndarray
    times: np.ndarray
    initial_separation: float
    amplification: float
    bound: float
    passed: bool
    gate_value: float
    gate_threshold: float
    gate_ok: bool
    dq_sup: float
    halted: bool


def stability_experiment(q0: SpectralField, u0: SpectralField, delta: float, laws: PhysicalLaws,
                         level: FriedrichsLevel, T: float, dt: float, P: Optional[DyadicPartition] = None, *,
                         perturbation: Optional[SpectralField] = None, target: str = "u", bound: float = 100.0,
                         gate: float = 0.5, record_every: int = 1, parallel: bool = True) -> StabilityReport:
    """Evolve two runs whose initial data differ by ``delta`` times a unit perturbation.

    ``X(t) = sup_{s<=t} ||du||_{B^{-1}_{N,1}} + int_0^t ||du||_{B^1_{N,1}}``
    is compared with the initial separation ``||du0||_{B^{-1}_{N,1}}``
    (or ``||dq0||_{B^0_{N,1}}`` when the perturbation acts on ``q``).  The
    smallness gate is ``||q||_{L~^inf_T(B^1_{N,1})} <= gate`` for the base run.
    """
    grid = q0.grid
    N = grid.dims
    P = P or build_partition(grid)
    if perturbation is None:
        from .corpus import random_field

        perturbation = random_field(grid, 12345, rank="vector" if target == "u" else "scalar", gamma=1.0)
    pert = perturbation * (1.0 / max(perturbation.sup_norm(), 1e-300))
    if target == "u":
        args = [(q0, u0), (q0, u0 + pert * delta)]
    elif target == "q":
        args = [(q0, u0), (q0 + pert * delta, u0)]
    else:
        raise ValueError("target must be 'u' or 'q'")

    def run(a):
        return evolve_sw(a[0], a[1], laws, level, T, dt, record_every=record_every)

    if parallel:
        with ThreadPoolExecutor(max_workers=2) as pool:
            base, other = list(pool.map(run, args))
    else:
        base, other = run(args[0]), run(args[1])
    m = min(len(base), len(other))
    times = base.times[:m]
    p = float(N)
    lo_spec, hi_spec = BesovSpec(-1, p=p, r=1), BesovSpec(1, p=p, r=1)
    du = [other.items[i].u - base.items[i].u for i in range(m)]
    dq = [other.items[i].q - base.items[i].q for i in range(m)]
    lo = np.array([besov_norm(f, lo_spec, P) for f in du])
    hi = np.array([besov_norm(f, hi_spec, P) for f in du])
    X = np.maximum.accumulate(lo) + _cumtrapz(hi, times)
    if target == "u":
        sep = besov_norm(du[0], lo_spec, P)
    else:
        sep = besov_norm(dq[0], BesovSpec(0, p=p, r=1), P)
    amp = 0.0 if sep == 0 else float(X[-1] / sep)
    dq_sup = max(besov_norm(f, BesovSpec(0, p=p, r=1), P) for f in dq)
    qtraj = TrajectorySeries(times, [s.q for s in base.items[:m]])
    gate_val = chemin_lerner_norm(qtraj, math.inf, BesovSpec(1, p=p, r=1), P, hybrid=False)
    passed = bool(amp <= bound and not (base.halted or other.halted))
    if delta == 0:
        passed = bool(np.all(X == 0))
    return StabilityReport(X, times, sep, amp, bound, passed, gate_val, gate, bool(gate_val <= gate), dq_sup,
                           bool(base.halted or other.halted))


def composition_ratio(state: SolutionState, laws: PhysicalLaws, P: DyadicPartition) -> float:
    """``||K(rho)||_{B^{N/2}_{2,1}} / ||q||_{B^{N/2}_{2,1}}`` (0 when ``K`` vanishes identically)."""
    N = state.grid.dims
    rho = laws.rho_bar * (1.0 + state.q.values)
    K = SpectralField(state.grid, laws.K(rho))
    spec = BesovSpec(N / 2.0)
    qn = besov_norm(state.q, spec, P)
    kn = besov_norm(K, spec, P)
    return 0.0 if kn == 0 else (math.inf if qn == 0 else kn / qn)


# Persistence --------------------------------------------------------------------------

def save_trajectory(traj: TrajectorySeries, directory, parameters: Optional[dict] = None) -> str:
    """Write SWF1 snapshots ``q_#####.swf``/``u_#####.swf`` and ``index.json``."""
    os.makedirs(directory, exist_ok=True)
    files = []
    grid = traj.items[0].grid
    for i, s in enumerate(traj.items):
        qf, uf = f"q_{i:05d}.swf", f"u_{i:05d}.swf"
        write_snapshot(s.q, os.path.join(directory, qf))
        write_snapshot(s.u, os.path.join(directory, uf))
        files.append({"q": qf, "u": uf})
    index = {
        "format": "SWF1",
        "grid": {"dims": grid.dims, "points_per_dim": grid.points, "period": grid.period},
        "times": [float(t) for t in traj.times],
        "halted": traj.halted,
        "halt_reason": traj.halt_reason,
        "parameters": parameters or {},
        "files": files,
    }
    path = os.path.join(directory, "index.json")
    with open(path, "w") as fh:
        json.dump(index, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def load_trajectory(directory) -> TrajectorySeries:
    with open(os.path.join(directory, "index.json")) as fh:
        index = json.load(fh)
    items = []
    for t, entry in zip(index["times"], index["files"]):
        q = read_snapshot(os.path.join(directory, entry["q"]))
        u = read_snapshot(os.path.join(directory, entry["u"]))
        items.append(SolutionState(q, u, t))
    return TrajectorySeries(np.array(index["times"]), items, index.get("halted", False),
                            index.get("halt_reason", ""), {"parameters": index.get("parameters", {})})
