"""Seeded random band-limited fields.

Coefficients are drawn once on a fixed reference cube of wavenumbers and
then truncated to the target grid, so a given seed describes the same
function at every resolution that resolves its band.  The standard
deviation of mode ``k`` is ``|xi|^(-gamma - N/2)``, which gives dyadic
block norms of order ``2^(-gamma l)``.
"""
from __future__ import annotations

from typing import Optional

import numpy as np

from .spectral import Grid, SpectralField

__all__ = ["REFERENCE_MAX_K", "random_coefficients", "random_field", "block_field"]

REFERENCE_MAX_K = {1: 64, 2: 64, 3: 32}


def _reference_cube(dims: int, seed: int, components: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    m = 2 * REFERENCE_MAX_K[dims] + 1
    shape = (components,) + (m,) * dims
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def random_coefficients(grid: Grid, seed: int, *, gamma: float = 1.0, kmax: Optional[int] = None,
                        kmin: int = 1, components: int = 1) -> np.ndarray:
    """Complex coefficients of a real random field, shape ``(components,) + grid.shape``.

    Modes are kept when ``kmin <= |k| `` and every ``|k_i| <= kmax``; ``kmax``
    defaults to ``n//3 - 1`` so products stay exact under two-thirds dealiasing.
    """
    n = grid.points
    kmax = n // 3 - 1 if kmax is None else int(kmax)
    kmax = min(kmax, n // 2 - 1, REFERENCE_MAX_K[grid.dims])
    ref = _reference_cube(grid.dims, seed, components)
    k = grid.wavenumbers
    inside = np.all(np.abs(k) <= kmax, axis=0)
    knorm = np.sqrt(np.sum(k**2, axis=0))
    inside &= knorm >= kmin
    idx = tuple(np.where(inside, k[i], 0) + REFERENCE_MAX_K[grid.dims] for i in range(grid.dims))
    draws = ref[(slice(None),) + idx]
    xi = grid.box_frequency * knorm
    with np.errstate(divide="ignore"):
        std = np.where(inside, xi ** (-gamma - grid.dims / 2.0), 0.0)
    c = draws * std
    # Hermitian symmetrisation: the coefficients of Re(field).
    flip = tuple(range(1, grid.dims + 1))
    mirrored = np.conj(np.roll(np.flip(c, axis=flip), 1, axis=flip))
    return 0.5 * (c + mirrored)


def random_field(grid: Grid, seed: int, *, gamma: float = 1.0, kmax: Optional[int] = None,
                 kmin: int = 1, rank: str = "scalar", amplitude: Optional[float] = None) -> SpectralField:
    """Mean-free random field; ``amplitude`` rescales to that sup norm."""
    comps = grid.dims if rank == "vector" else 1
    c = random_coefficients(grid, seed, gamma=gamma, kmax=kmax, kmin=kmin, components=comps)
    if rank != "vector":
        c = c[0]
    f = SpectralField.from_coefficients(grid, c)
    if amplitude is not None:
        s = f.sup_norm()
        if s > 0:
            f = f * (amplitude / s)
    return f


def block_field(grid: Grid, seed: int, l: int, partition, rank: str = "scalar") -> SpectralField:
    """Random field localised in dyadic block ``l`` (mask applied to a random field)."""
    comps = grid.dims if rank == "vector" else 1
    c = random_coefficients(grid, seed, gamma=0.0, kmax=grid.points // 2 - 1, components=comps)
    c = c * partition.mask(l)
    if rank != "vector":
        c = c[0]
    return SpectralField.from_coefficients(grid, c)
