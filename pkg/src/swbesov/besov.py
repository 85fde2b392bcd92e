"""Littlewood-Paley blocks, Besov/hybrid norms and Chemin-Lerner norms.

The dyadic profile is ``phi(r) = chi(r/2) - chi(r)`` where ``chi`` is a
smooth step equal to 1 on ``[0, 3/4]`` and to 0 on ``[4/3, inf)``.  Its
support is exactly the annulus ``3/4 < r < 8/3`` and the sum over ``l`` of
``phi(2^-l r)`` telescopes to one for every ``r > 0``.

All norms ignore the zero mode; homogeneous norms do not see constants.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Sequence

import numpy as np

from .errors import BlockRangeError, GridMismatchError, ValidationError
from .spectral import Grid, SpectralField, dealiased_product, inverse

__all__ = [
    "smooth_step",
    "bump",
    "DyadicPartition",
    "BesovSpec",
    "TrajectorySeries",
    "build_partition",
    "dyadic_block",
    "low_frequency_cutoff",
    "block_norms",
    "besov_norm",
    "hybrid_norm",
    "chemin_lerner_norm",
    "time_space_norm",
    "lebesgue_time_norm",
    "InequalityReport",
    "verify_product_laws",
    "log_interpolation",
    "write_norm_report",
]

R_IN, R_OUT = 3.0 / 4.0, 8.0 / 3.0


def _psi(t):
    out = np.zeros_like(t, dtype=float)
    pos = t > 0
    out[pos] = np.exp(-1.0 / t[pos])
    return out


def smooth_step(r):
    """``chi``: 1 for ``r <= 3/4``, 0 for ``r >= 4/3``, C-infinity between."""
    r = np.asarray(r, dtype=float)
    t = (r - 0.75) / (4.0 / 3.0 - 0.75)
    a, b = _psi(1.0 - t), _psi(t)
    return a / (a + b)


def bump(r):
    """Dyadic profile supported in the annulus ``3/4 < r < 8/3``."""
    r = np.asarray(r, dtype=float)
    return smooth_step(r / 2.0) - smooth_step(r)


@dataclass(frozen=True, eq=False)
class DyadicPartition:
    grid: Grid
    l_min: int
    l_max: int
    masks: np.ndarray  # (n_blocks,) + grid.shape, real

    @property
    def levels(self) -> np.ndarray:
        return np.arange(self.l_min, self.l_max + 1)

    def index(self, l: int) -> int:
        if not self.l_min <= l <= self.l_max:
            raise BlockRangeError(f"block {l} outside [{self.l_min}, {self.l_max}]")
        return int(l - self.l_min)

    def mask(self, l: int) -> np.ndarray:
        return self.masks[self.index(l)]

    @cached_property
    def squared_flat(self) -> np.ndarray:
        """``mask_l^2`` flattened, shape ``(n_blocks, n**N)``; used for Parseval sums."""
        return (self.masks**2).reshape(len(self.masks), -1)

    def unity_defect(self) -> float:
        """max over resolved lattice of ``|sum_l mask_l - 1|``."""
        total = self.masks.sum(axis=0)
        return float(np.abs(total[self.grid.resolved] - 1.0).max())


def build_partition(grid: Grid) -> DyadicPartition:
    """Blocks covering every resolved lattice frequency of ``grid``."""
    xi_min = grid.box_frequency
    l_min = math.floor(math.log2(R_IN * xi_min) + 1e-12)
    l_max = math.ceil(math.log2(grid.xi_max / R_IN) - 1e-12) - 1
    # Widen until the telescoping sum is exactly one at both ends of the band.
    while smooth_step(2.0 ** -(l_max + 1) * grid.xi_max) < 1.0:
        l_max += 1
    while smooth_step(2.0**-l_min * xi_min) > 0.0:
        l_min -= 1
    # Drop blocks that see no lattice point.
    rho = grid.xi_norm
    levels = [l for l in range(l_min, l_max + 1) if np.any(bump(2.0**-l * rho)[grid.resolved] > 0)]
    l_min, l_max = levels[0], levels[-1]
    masks = np.stack([bump(2.0**-l * rho) for l in range(l_min, l_max + 1)])
    masks[:, ~grid.resolved] = 0.0
    masks.setflags(write=False)
    return DyadicPartition(grid, l_min, l_max, masks)


def low_frequency_cutoff(partition: DyadicPartition) -> float:
    """Frequencies below this lie outside the dyadic band and are not represented."""
    return R_IN * 2.0**partition.l_min


def _check(f: SpectralField, P: DyadicPartition):
    if f.grid != P.grid:
        raise GridMismatchError("field and partition live on different grids")


def dyadic_block(f: SpectralField, l: int, P: DyadicPartition) -> SpectralField:
    _check(f, P)
    m = P.mask(l)
    return SpectralField.from_coefficients(f.grid, np.asarray(f.coefficients) * m)


@dataclass(frozen=True)
class BesovSpec:
    """Regularity ``s`` (low blocks), ``t`` (high blocks), integrability ``p``, summation ``r``."""

    s: float
    t: Optional[float] = None
    p: float = 2.0
    r: float = 1.0

    def __post_init__(self):
        if self.t is None:
            object.__setattr__(self, "t", float(self.s))
        if not (self.p >= 1 and self.r >= 1):
            raise ValidationError(f"need p, r >= 1, got p={self.p}, r={self.r}", "p, r >= 1")

    @property
    def is_plain(self) -> bool:
        return self.s == self.t


def _lp_norms_physical(values: np.ndarray, grid: Grid, p: float) -> float:
    """L^p norm of a (possibly vector valued) sample array over the torus."""
    v = values.reshape((-1,) + grid.shape)
    mag = np.sqrt(np.sum(v**2, axis=0))
    if np.isinf(p):
        return float(mag.max())
    cell = grid.spacing**grid.dims
    return float((np.sum(mag**p) * cell) ** (1.0 / p))


def block_norms(f: SpectralField, P: DyadicPartition, p: float = 2.0) -> np.ndarray:
    """``||Delta_l f||_{L^p}`` for every block ``l_min..l_max``."""
    _check(f, P)
    c = np.asarray(f.coefficients)
    grid = f.grid
    if p == 2:
        power = np.abs(c.reshape((-1,) + grid.shape)) ** 2
        power = power.sum(axis=0).reshape(-1)
        return np.sqrt(grid.volume * (P.squared_flat @ power))
    out = np.empty(len(P.masks))
    for i, m in enumerate(P.masks):
        out[i] = _lp_norms_physical(inverse(c * m, grid.dims), grid, p)
    return out


def _lr(x: np.ndarray, r: float, axis=-1) -> np.ndarray:
    if x.shape[axis] == 0:
        return np.zeros(np.delete(x.shape, axis if axis >= 0 else x.ndim + axis))
    if np.isinf(r):
        return np.max(x, axis=axis)
    return np.sum(x**r, axis=axis) ** (1.0 / r)


def _weighted_sum(norms: np.ndarray, levels: np.ndarray, spec: BesovSpec, hybrid: bool) -> np.ndarray:
    """Combine block norms (last axis) into a Besov or hybrid norm."""
    if not hybrid:
        if not spec.is_plain:
            raise ValidationError("plain Besov norm requires s == t", "s == t")
        return _lr(2.0 ** (levels * spec.s) * norms, spec.r)
    low = levels <= 0
    w = np.where(low, 2.0 ** (levels * spec.s), 2.0 ** (levels * spec.t))
    weighted = w * norms
    return _lr(weighted[..., low], spec.r) + _lr(weighted[..., ~low], spec.r)


def besov_norm(f: SpectralField, spec: BesovSpec, P: DyadicPartition) -> float:
    """``(sum_l (2^{ls} ||Delta_l f||_{L^p})^r)^{1/r}``; the mean is ignored."""
    return float(_weighted_sum(block_norms(f, P, spec.p), P.levels, spec, hybrid=False))


def hybrid_norm(f: SpectralField, spec: BesovSpec, P: DyadicPartition) -> float:
    """Exponent ``s`` on blocks ``l <= 0`` and ``t`` on ``l > 0``, each part ``l^r`` summed."""
    return float(_weighted_sum(block_norms(f, P, spec.p), P.levels, spec, hybrid=True))


# Trajectories ---------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TrajectorySeries:
    """Time samples of fields or states with trapezoid quadrature weights.

    ``items`` may be :class:`SpectralField` objects or any state object whose
    field attributes can be extracted with :meth:`component`.
    """

    times: np.ndarray
    items: tuple
    halted: bool = False
    halt_reason: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "items", tuple(self.items))
        if len(times) != len(self.items):
            raise ValueError("times and items differ in length")
        if len(times) > 1 and np.any(np.diff(times) <= 0):
            raise ValueError("times must be strictly increasing")

    def __len__(self):
        return len(self.items)

    def __getitem__(self, i):
        return self.items[i]

    @property
    def final(self):
        return self.items[-1]

    @property
    def duration(self) -> float:
        return float(self.times[-1] - self.times[0])

    @cached_property
    def weights(self) -> np.ndarray:
        t = self.times
        w = np.zeros_like(t)
        if len(t) > 1:
            dt = np.diff(t)
            w[:-1] += dt / 2
            w[1:] += dt / 2
        return w

    def component(self, name: str) -> "TrajectorySeries":
        return TrajectorySeries(self.times, [getattr(s, name) for s in self.items],
                                self.halted, self.halt_reason, dict(self.meta))

    def truncated(self, T: float) -> "TrajectorySeries":
        keep = self.times <= T + 1e-12
        return TrajectorySeries(self.times[keep], [s for s, k in zip(self.items, keep) if k],
                                self.halted, self.halt_reason, dict(self.meta))


def lebesgue_time_norm(values: np.ndarray, weights: np.ndarray, rho: float, axis=0) -> np.ndarray:
    """Trapezoid ``L^rho`` norm in time along ``axis``."""
    values = np.abs(values)
    if np.isinf(rho):
        return values.max(axis=axis)
    w = np.expand_dims(weights, tuple(range(1, values.ndim))) if axis == 0 else weights
    return np.sum(w * values**rho, axis=axis) ** (1.0 / rho)


def _trajectory_block_norms(traj: TrajectorySeries, P: DyadicPartition, p: float) -> np.ndarray:
    if len(traj) == 0:
        raise ValueError("empty trajectory")
    return np.stack([block_norms(f, P, p) for f in traj.items])


def chemin_lerner_norm(traj: TrajectorySeries, rho: float, spec: BesovSpec, P: DyadicPartition,
                       hybrid: bool = True) -> float:
    """Time norm of each block first, then the (hybrid) Besov summation."""
    norms = _trajectory_block_norms(traj, P, spec.p)
    per_block = lebesgue_time_norm(norms, traj.weights, rho)
    return float(_weighted_sum(per_block, P.levels, spec, hybrid))


def time_space_norm(traj: TrajectorySeries, rho: float, spec: BesovSpec, P: DyadicPartition,
                    hybrid: bool = True) -> float:
    """``|| ||u(t)||_B ||_{L^rho_T}``: Besov norm at each time, then the time norm."""
    norms = _trajectory_block_norms(traj, P, spec.p)
    per_time = _weighted_sum(norms, P.levels, spec, hybrid)
    return float(lebesgue_time_norm(per_time, traj.weights, rho))


# Inequality checkers ---------------------------------------------------------

@dataclass
class InequalityReport:
    case: str
    lhs: float
    rhs: float
    ratio: float
    c_max: float
    passed: bool
    details: dict = field(default_factory=dict)


def _ratio(lhs, rhs):
    if rhs == 0:
        return 0.0 if lhs == 0 else math.inf
    return lhs / rhs


def verify_product_laws(u: SpectralField, v: SpectralField, case: str, P: DyadicPartition, *,
                        s: float = None, t: float = None, s1: float = None, t1: float = None,
                        s2: float = None, t2: float = None, p: float = 2.0, r: float = 1.0,
                        c_max: float = 100.0) -> InequalityReport:
    """Measure one product inequality on a pair of fields.

    ``algebra``: ``||uv||_{B^{s,t}} <= C(||u||_inf ||v||_{B^{s,t}} + ||v||_inf ||u||_{B^{s,t}})``, s, t > 0.
    ``hybrid_bilinear``: ``||uv||_{B^{s1+s2-N/p, t1+t2-N/p}_{p,r}} <= C ||u||_{B^{s1,t1}_{p,r}} ||v||_{B^{s2,t2}_{p,inf}}``.
    ``limit_endpoint``: ``||uv||_{B^{-N/p}_{p,inf}} <= C ||u||_{B^s_{p,1}} ||v||_{B^{-s}_{p,inf}}``.

    The product is the dealiased one; the constant-free ratio ``lhs/rhs`` is
    reported and must not exceed ``c_max``.
    """
    N = u.grid.dims
    uv = dealiased_product(u, v)
    if case == "algebra":
        s = N / p if s is None else s
        t = s if t is None else t
        if not (s > 0 and t > 0):
            raise ValidationError("algebra case needs s, t > 0", "s, t > 0")
        sp = BesovSpec(s, t, p, r)
        lhs = hybrid_norm(uv, sp, P)
        rhs = u.sup_norm() * hybrid_norm(v, sp, P) + v.sup_norm() * hybrid_norm(u, sp, P)
        params = {"s": s, "t": t}
    elif case == "hybrid_bilinear":
        s1 = N / p if s1 is None else s1
        t1 = s1 if t1 is None else t1
        s2 = N / p if s2 is None else s2
        t2 = s2 if t2 is None else t2
        if max(s1, s2, t1, t2) > N / p or min(s1 + s2, t1 + t2) <= 0:
            raise ValidationError("need s_i, t_i <= N/p and min(s1+s2, t1+t2) > 0",
                                  "s_i,t_i <= N/p, min(s1+s2,t1+t2) > 0")
        lhs = hybrid_norm(uv, BesovSpec(s1 + s2 - N / p, t1 + t2 - N / p, p, r), P)
        rhs = hybrid_norm(u, BesovSpec(s1, t1, p, r), P) * hybrid_norm(v, BesovSpec(s2, t2, p, np.inf), P)
        params = {"s1": s1, "t1": t1, "s2": s2, "t2": t2}
    elif case == "limit_endpoint":
        s = 0.0 if s is None else s
        if not (-N / p < s <= N / p) or p < 2:
            raise ValidationError("endpoint case needs p >= 2 and -N/p < s <= N/p", "-N/p < s <= N/p")
        lhs = besov_norm(uv, BesovSpec(-N / p, p=p, r=np.inf), P)
        rhs = besov_norm(u, BesovSpec(s, p=p, r=1), P) * besov_norm(v, BesovSpec(-s, p=p, r=np.inf), P)
        params = {"s": s}
    else:
        raise ValueError(f"unknown product law case {case!r}")
    ratio = _ratio(lhs, rhs)
    return InequalityReport(case, lhs, rhs, ratio, c_max, bool(ratio <= c_max), {"p": p, "r": r, **params})


def log_interpolation(f: SpectralField, s: float, eps: float, p: float, P: DyadicPartition):
    """Both sides of the logarithmic interpolation inequality, constant omitted.

    ``lhs = ||f||_{B^s_{p,1}}`` and
    ``rhs = (1+eps)/eps ||f||_{B^s_{p,inf}} (1 + log((||f||_{B^{s-eps}_{p,inf}} + ||f||_{B^{s+eps}_{p,inf}}) / ||f||_{B^s_{p,inf}}))``.
    """
    if not eps > 0:
        raise ValidationError("eps must be positive", "eps > 0")
    norms = block_norms(f, P, p)
    lv = P.levels
    lhs = float(np.sum(2.0 ** (lv * s) * norms))
    mid = float(np.max(2.0 ** (lv * s) * norms))
    if mid == 0:
        return 0.0, 0.0
    lo = float(np.max(2.0 ** (lv * (s - eps)) * norms))
    hi = float(np.max(2.0 ** (lv * (s + eps)) * norms))
    rhs = (1 + eps) / eps * mid * (1 + math.log((lo + hi) / mid))
    return lhs, rhs


def write_norm_report(rows: Sequence[dict], path) -> None:
    """CSV with columns ``field_id, space, s, t, p, r, value``."""
    import csv

    cols = ["field_id", "space", "s", "t", "p", "r", "value"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(float(row[k])) if k in ("s", "t", "p", "r", "value") else row[k]) for k in cols})
