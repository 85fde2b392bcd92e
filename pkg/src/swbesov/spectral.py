"""Periodic grids, spectral fields and Fourier multipliers.

Everything downstream works on a torus of side ``period`` sampled with
``points`` nodes per axis.  Fourier coefficients are normalised so that
``values = sum_k c_k exp(i xi_k . x)``, which keeps amplitudes independent of
the resolution.  Nyquist modes are discarded by every multiplier.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Optional

import numpy as np
import scipy.fft as sfft

from .errors import GridMismatchError, UndefinedAtZeroError, ValidationError

__all__ = [
    "Grid",
    "SpectralField",
    "MultiplierSymbol",
    "CapillaryKernel",
    "make_grid",
    "fourier_multiplier",
    "hodge_split",
    "hodge_reconstruct",
    "convolve_kernel",
    "gaussian_kernel",
    "dealias_mask",
    "dealiased_product",
    "write_snapshot",
    "read_snapshot",
    "set_threads",
]

_workers = max(1, int(os.environ.get("SWBESOV_THREADS", "1") or 1))


def set_threads(n: Optional[int]) -> int:
    """Set the FFT worker count; ``None`` restores ``SWBESOV_THREADS``.

    One worker is the deterministic mode used for reproducible artifacts.
    """
    global _workers
    if n is None:
        n = int(os.environ.get("SWBESOV_THREADS", "1") or 1)
    _workers = max(1, int(n))
    return _workers


def _spatial_axes(ndim_total, dims):
    return tuple(range(ndim_total - dims, ndim_total))


def forward(values: np.ndarray, dims: int) -> np.ndarray:
    axes = _spatial_axes(values.ndim, dims)
    npts = np.prod([values.shape[a] for a in axes])
    return sfft.fftn(values, axes=axes, workers=_workers) / npts


def inverse(coefs: np.ndarray, dims: int) -> np.ndarray:
    axes = _spatial_axes(coefs.ndim, dims)
    npts = np.prod([coefs.shape[a] for a in axes])
    return sfft.ifftn(coefs * npts, axes=axes, workers=_workers).real


@dataclass(frozen=True, eq=False)
class Grid:
    dims: int
    points: int
    period: float = 2 * np.pi

    def __eq__(self, other):
        return (
            isinstance(other, Grid)
            and self.dims == other.dims
            and self.points == other.points
            and self.period == other.period
        )

    def __hash__(self):
        return hash((self.dims, self.points, self.period))

    @property
    def shape(self):
        return (self.points,) * self.dims

    @property
    def spacing(self) -> float:
        return self.period / self.points

    @property
    def volume(self) -> float:
        return self.period**self.dims

    @property
    def box_frequency(self) -> float:
        return 2 * np.pi / self.period

    @cached_property
    def wavenumbers(self) -> np.ndarray:
        """Integer lattice vectors, shape ``(dims, n, ..., n)``."""
        k1 = np.fft.fftfreq(self.points, 1.0 / self.points).round().astype(int)
        return np.stack(np.meshgrid(*([k1] * self.dims), indexing="ij"))

    @cached_property
    def xi(self) -> np.ndarray:
        return self.box_frequency * self.wavenumbers

    @cached_property
    def xi_norm(self) -> np.ndarray:
        return np.sqrt(np.sum(self.xi**2, axis=0))

    @cached_property
    def nyquist(self) -> np.ndarray:
        return np.any(np.abs(self.wavenumbers) == self.points // 2, axis=0)

    @cached_property
    def resolved(self) -> np.ndarray:
        """Nonzero, non-Nyquist lattice points."""
        return (~self.nyquist) & (self.xi_norm > 0)

    @cached_property
    def xi_max(self) -> float:
        return float(self.xi_norm[~self.nyquist].max())

    @cached_property
    def coordinates(self) -> np.ndarray:
        x1 = np.arange(self.points) * self.spacing
        return np.stack(np.meshgrid(*([x1] * self.dims), indexing="ij"))

    def frequencies_1d(self) -> np.ndarray:
        """Sorted resolved frequencies along one axis (Nyquist excluded)."""
        k = np.arange(-(self.points // 2) + 1, self.points // 2)
        return self.box_frequency * k


def make_grid(dims: int, points_per_dim: int, period: float = 2 * np.pi) -> Grid:
    if dims not in (1, 2, 3):
        raise ValidationError(f"dims must be 1, 2 or 3, got {dims}", "invalid-dimension")
    n = int(points_per_dim)
    if n != points_per_dim or n < 8 or n & (n - 1):
        raise ValidationError(
            f"points_per_dim must be a power of two >= 8, got {points_per_dim}",
            "non-power-of-two",
        )
    if not period > 0:
        raise ValidationError(f"period must be positive, got {period}", "non-positive-period")
    return Grid(dims, n, float(period))


_RANKS = {"scalar": 0, "vector": 1, "tensor": 2}


@dataclass(frozen=True, eq=False)
class SpectralField:
    """Real field on a periodic grid with a lazily computed spectral view.

    ``values`` has shape ``grid.shape`` (scalar), ``(N,) + grid.shape``
    (vector) or ``(N, N) + grid.shape`` (tensor).
    """

    grid: Grid
    values: np.ndarray
    rank: str = field(default="")

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        extra = values.ndim - self.grid.dims
        if extra < 0 or values.shape[extra:] != self.grid.shape:
            raise GridMismatchError(f"values of shape {values.shape} do not live on {self.grid}")
        if any(s != self.grid.dims for s in values.shape[:extra]) or extra > 2:
            raise ValueError(f"unsupported leading shape {values.shape[:extra]}")
        rank = {0: "scalar", 1: "vector", 2: "tensor"}[extra]
        if self.rank and self.rank != rank:
            raise ValueError(f"rank {self.rank!r} inconsistent with shape {values.shape}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "rank", rank)

    @classmethod
    def from_coefficients(cls, grid: Grid, coefs: np.ndarray) -> "SpectralField":
        f = cls(grid, inverse(np.asarray(coefs), grid.dims))
        return f

    @classmethod
    def zeros(cls, grid: Grid, rank: str = "scalar") -> "SpectralField":
        lead = (grid.dims,) * _RANKS[rank]
        return cls(grid, np.zeros(lead + grid.shape))

    @classmethod
    def from_function(cls, grid: Grid, func: Callable) -> "SpectralField":
        """Sample ``func(*coordinates)`` on the grid."""
        return cls(grid, np.asarray(func(*grid.coordinates), dtype=float))

    @cached_property
    def coefficients(self) -> np.ndarray:
        c = forward(self.values, self.grid.dims)
        c.setflags(write=False)
        return c

    @property
    def mean(self):
        axes = _spatial_axes(self.values.ndim, self.grid.dims)
        return self.values.mean(axis=axes)

    def without_mean(self) -> "SpectralField":
        axes = _spatial_axes(self.values.ndim, self.grid.dims)
        return SpectralField(self.grid, self.values - self.values.mean(axis=axes, keepdims=True))

    def pointwise_norm(self) -> np.ndarray:
        """Euclidean (Frobenius) magnitude at each grid node."""
        v = self.values.reshape((-1,) + self.grid.shape)
        return np.sqrt(np.sum(v**2, axis=0))

    def sup_norm(self) -> float:
        return float(self.pointwise_norm().max())

    def l2_norm(self) -> float:
        return float(np.sqrt(self.grid.volume * np.sum(np.abs(self.coefficients) ** 2)))

    def inner(self, other: "SpectralField") -> float:
        _check_same_grid(self, other)
        return float(np.sum(self.values * other.values) * self.grid.spacing**self.grid.dims)

    def component(self, i: int) -> "SpectralField":
        return SpectralField(self.grid, self.values[i])

    def _binary(self, other, op):
        if isinstance(other, SpectralField):
            _check_same_grid(self, other)
            other = other.values
        return SpectralField(self.grid, op(self.values, other))

    def __add__(self, other):
        return self._binary(other, np.add)

    def __sub__(self, other):
        return self._binary(other, np.subtract)

    def __mul__(self, other):
        if isinstance(other, SpectralField):
            raise TypeError("use dealiased_product for field products")
        return SpectralField(self.grid, self.values * other)

    __rmul__ = __mul__
    __radd__ = __add__

    def __neg__(self):
        return SpectralField(self.grid, -self.values)

    def __repr__(self):
        return f"SpectralField({self.rank}, dims={self.grid.dims}, n={self.grid.points})"


def _check_same_grid(*fields):
    g = fields[0].grid
    for f in fields[1:]:
        if f.grid != g:
            raise GridMismatchError(f"{f.grid} differs from {g}")


@dataclass(frozen=True)
class MultiplierSymbol:
    """Fourier symbol ``m(xi)``.

    ``evaluator`` receives the stacked frequency array ``xi`` of shape
    ``(N, ...)`` and returns either an array of the lattice shape (scalar
    symbol) or of shape ``(N, N) + lattice`` (matrix symbol acting on vector
    fields).  ``zero_value`` overrides the value at ``xi = 0``.
    """

    evaluator: Callable[[np.ndarray], np.ndarray]
    homogeneity_degree: Optional[float] = None
    label: str = ""
    zero_value: Optional[complex] = None

    def __call__(self, xi):
        return self.evaluator(xi)

    def __mul__(self, other: "MultiplierSymbol") -> "MultiplierSymbol":
        deg = None
        if self.homogeneity_degree is not None and other.homogeneity_degree is not None:
            deg = self.homogeneity_degree + other.homogeneity_degree
        zero = None
        if self.zero_value is not None and other.zero_value is not None:
            zero = self.zero_value * other.zero_value
        return MultiplierSymbol(
            lambda xi, a=self, b=other: a(xi) * b(xi), deg, f"{self.label}*{other.label}", zero
        )

    def table(self, grid: Grid, has_mean: bool = False) -> np.ndarray:
        """Evaluate on the lattice, with Nyquist zeroed and ``xi = 0`` resolved."""
        xi = grid.xi
        zero = grid.xi_norm == 0
        with np.errstate(divide="ignore", invalid="ignore"):
            m = np.asarray(self.evaluator(xi), dtype=complex)
        m = np.broadcast_to(m, m.shape[:-grid.dims] + grid.shape).copy()
        if self.zero_value is not None:
            m[..., zero] = self.zero_value
        elif self.homogeneity_degree is not None and self.homogeneity_degree > 0:
            m[..., zero] = 0.0
        elif has_mean and not np.all(np.isfinite(m[..., zero])):
            raise UndefinedAtZeroError(f"symbol {self.label!r} is undefined at xi = 0")
        else:
            m[..., zero] = np.where(np.isfinite(m[..., zero]), m[..., zero], 0.0)
        m[..., grid.nyquist] = 0.0
        return m

    # Frequently used symbols.
    @staticmethod
    def identity() -> "MultiplierSymbol":
        return MultiplierSymbol(lambda xi: np.ones(xi.shape[1:]), 0.0, "id", 1.0)

    @staticmethod
    def laplacian() -> "MultiplierSymbol":
        return MultiplierSymbol(lambda xi: -np.sum(xi**2, axis=0), 2.0, "laplacian")

    @staticmethod
    def fractional(s: float) -> "MultiplierSymbol":
        """``Lambda^s`` with symbol ``|xi|^s``."""
        return MultiplierSymbol(
            lambda xi: np.sqrt(np.sum(xi**2, axis=0)) ** s, float(s), f"Lambda^{s:g}"
        )

    @staticmethod
    def derivative(j: int) -> "MultiplierSymbol":
        return MultiplierSymbol(lambda xi: 1j * xi[j], 1.0, f"d{j}")


def fourier_multiplier(f: SpectralField, m: MultiplierSymbol, tol: float = 1e-13) -> SpectralField:
    """Apply ``m(D)`` to ``f``; the physical view of the result is its real part."""
    scale = max(f.sup_norm(), 1.0)
    has_mean = bool(np.any(np.abs(f.mean) > tol * scale))
    table = m.table(f.grid, has_mean=has_mean)
    c = f.coefficients
    if table.ndim == f.grid.dims:
        out = table * c
    elif table.ndim == f.grid.dims + 2 and f.rank == "vector":
        out = np.einsum("ij...,j...->i...", table, c)
    else:
        raise ValueError(f"symbol of shape {table.shape} cannot act on a {f.rank} field")
    return SpectralField.from_coefficients(f.grid, out)


# Hodge splitting ----------------------------------------------------------

def _inv_norm(grid: Grid) -> np.ndarray:
    inv = np.zeros(grid.shape)
    inv[grid.resolved] = 1.0 / grid.xi_norm[grid.resolved]
    return inv


def hodge_coefficients(u_hat: np.ndarray, grid: Grid):
    """``d = Lambda^{-1} div u`` and ``Omega_ij = Lambda^{-1}(d_j u_i - d_i u_j)``."""
    inv = _inv_norm(grid)
    ixi = 1j * grid.xi
    d = inv * np.sum(ixi * u_hat, axis=0)
    omega = inv * (ixi[None, :] * u_hat[:, None] - ixi[:, None] * u_hat[None, :])
    return d, omega


def velocity_coefficients(d_hat: np.ndarray, omega_hat: np.ndarray, grid: Grid) -> np.ndarray:
    """Inverse of :func:`hodge_coefficients` on mean-free, non-Nyquist modes."""
    inv = _inv_norm(grid)
    ixi = 1j * grid.xi
    return -inv * (ixi * d_hat + np.sum(ixi[None, :] * omega_hat, axis=1))


@dataclass(frozen=True)
class HodgeParts:
    d: SpectralField
    omega: SpectralField
    mean: np.ndarray


def hodge_split(u: SpectralField, allow_mean: bool = False, tol: float = 1e-12) -> HodgeParts:
    """Compressible part ``d`` and antisymmetric incompressible part ``Omega``.

    The mean of ``u`` is invisible to both parts; it is returned separately
    and only accepted when ``allow_mean`` is set.
    """
    if u.rank != "vector":
        raise ValueError("hodge_split expects a vector field")
    mean = np.asarray(u.mean)
    if not allow_mean and np.any(np.abs(mean) > tol * max(u.sup_norm(), 1.0)):
        raise ValidationError("velocity has a nonzero mean; pass allow_mean=True", "nonzero-mean")
    d, omega = hodge_coefficients(np.asarray(u.coefficients), u.grid)
    return HodgeParts(
        SpectralField.from_coefficients(u.grid, d),
        SpectralField.from_coefficients(u.grid, omega),
        mean,
    )


def hodge_reconstruct(d: SpectralField, omega: SpectralField, mean=None) -> SpectralField:
    """``u = -Lambda^{-1} grad d - Lambda^{-1} div Omega (+ mean)``."""
    _check_same_grid(d, omega)
    u_hat = velocity_coefficients(np.asarray(d.coefficients), np.asarray(omega.coefficients), d.grid)
    if mean is not None:
        zero = (0,) * d.grid.dims
        for i in range(d.grid.dims):
            u_hat[(i,) + zero] = mean[i]
    return SpectralField.from_coefficients(d.grid, u_hat)


# Capillary kernel ---------------------------------------------------------

@dataclass(frozen=True, eq=False)
class CapillaryKernel:
    physical: SpectralField
    spectral_hat: np.ndarray
    sup_hat: float
    width: Optional[float] = None

    @property
    def grid(self) -> Grid:
        return self.physical.grid

    @classmethod
    def from_samples(cls, samples: SpectralField, width=None) -> "CapillaryKernel":
        g = samples.grid
        mass = samples.values.sum() * g.spacing**g.dims
        phys = SpectralField(g, samples.values / mass)
        hat = (np.asarray(phys.coefficients) * g.volume).real
        hat[g.nyquist] = 0.0
        return cls(phys, hat, float(np.abs(hat).max()), width)

    def check(self, tol: float = 1e-10) -> None:
        g = self.grid
        v = self.physical.values
        mass = v.sum() * g.spacing**g.dims
        if abs(mass - 1.0) > tol:
            raise ValidationError(f"kernel mass {mass} != 1", "integral of phi = 1")
        if v.min() < 0:
            raise ValidationError("kernel takes negative values", "phi >= 0")
        flipped = np.flip(np.roll(v, -1, axis=tuple(range(g.dims))), axis=tuple(range(g.dims)))
        if np.abs(flipped - v).max() > 1e-12 * max(v.max(), 1.0):
            raise ValidationError("kernel is not even", "phi even")


def gaussian_kernel(grid: Grid, width: Optional[float] = None, images: int = 2) -> CapillaryKernel:
    """Periodised Gaussian of standard deviation ``width`` (default ``L/16``)."""
    sigma = grid.period / 16 if width is None else float(width)
    L = grid.period
    vals = np.zeros(grid.shape)
    shifts = range(-images, images + 1)
    for offset in np.array(np.meshgrid(*([list(shifts)] * grid.dims), indexing="ij")).reshape(grid.dims, -1).T:
        r2 = sum((grid.coordinates[i] + offset[i] * L) ** 2 for i in range(grid.dims))
        vals += np.exp(-r2 / (2 * sigma**2))
    return CapillaryKernel.from_samples(SpectralField(grid, vals), sigma)


def convolve_kernel(f: SpectralField, kernel: CapillaryKernel) -> SpectralField:
    if f.grid != kernel.grid:
        raise GridMismatchError("field and kernel live on different grids")
    c = np.asarray(f.coefficients) * kernel.spectral_hat
    return SpectralField.from_coefficients(f.grid, c)


# Dealiasing ---------------------------------------------------------------

def dealias_mask(grid: Grid) -> np.ndarray:
    """Two-thirds rule: keep ``|k_i| < n/3`` on every axis."""
    return np.all(np.abs(grid.wavenumbers) < grid.points / 3, axis=0)


def dealiased_product(u: SpectralField, v: SpectralField) -> SpectralField:
    """Pointwise product truncated by the two-thirds rule.

    Exact on the retained modes when both factors are supported in
    ``|k_i| < n/3``.  Vector/tensor factors multiply componentwise by
    broadcasting against a scalar.
    """
    _check_same_grid(u, v)
    mask = dealias_mask(u.grid)
    a = inverse(np.asarray(u.coefficients) * mask, u.grid.dims)
    b = inverse(np.asarray(v.coefficients) * mask, u.grid.dims)
    prod = a * b
    return SpectralField.from_coefficients(u.grid, forward(prod, u.grid.dims) * mask)


# Binary snapshots -----------------------------------------------------------

_MAGIC = b"SWF1"
_HEADER = struct.Struct("<4sBIdB")


def write_snapshot(f: SpectralField, path) -> None:
    header = _HEADER.pack(_MAGIC, f.grid.dims, f.grid.points, f.grid.period, _RANKS[f.rank])
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(f.values, dtype="<f8").tobytes(order="C"))


def read_snapshot(path) -> SpectralField:
    with open(path, "rb") as fh:
        raw = fh.read()
    magic, dims, n, period, rank = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    grid = Grid(int(dims), int(n), float(period))
    lead = (grid.dims,) * int(rank)
    data = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size)
    expected = int(np.prod(lead + grid.shape))
    if data.size != expected:
        raise ValueError(f"{path}: expected {expected} samples, found {data.size}")
    return SpectralField(grid, data.reshape(lead + grid.shape).astype(float))
