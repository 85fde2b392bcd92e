"""scikit-learn style wrappers around the dyadic decomposition.

Samples are rows of flattened physical values on a fixed periodic grid.
``fit`` only checks the shape and builds the partition; nothing is learned.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .besov import BesovSpec, block_norms, build_partition, _weighted_sum
from .spectral import SpectralField, make_grid

__all__ = ["LittlewoodPaleyDecomposition", "BesovNormTransformer"]


class _GridMixin:
    def _setup(self, X):
        X = check_array(X, dtype=np.float64)
        grid = make_grid(self.dims, self.points_per_dim, self.period)
        size = int(np.prod(grid.shape))
        if X.shape[1] != size:
            raise ValueError(f"expected {size} features for a {grid.shape} grid, got {X.shape[1]}")
        return X, grid

    def _check(self, X):
        check_is_fitted(self, "partition_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return X

    def _fit(self, X):
        X, grid = self._setup(X)
        self.grid_ = grid
        self.partition_ = build_partition(grid)
        self.levels_ = self.partition_.levels.copy()
        self.n_features_in_ = X.shape[1]
        return self


class LittlewoodPaleyDecomposition(_GridMixin, TransformerMixin, BaseEstimator):
    """Maps each field to its ``L^p`` block norms ``||Delta_l f||``, one column per block."""

    def __init__(self, dims=1, points_per_dim=64, period=2 * np.pi, p=2.0):
        self.dims = dims
        self.points_per_dim = points_per_dim
        self.period = period
        self.p = p

    def fit(self, X, y=None):
        return self._fit(X)

    def transform(self, X):
        X = self._check(X)
        g = self.grid_
        return np.stack([block_norms(SpectralField(g, row.reshape(g.shape)), self.partition_, self.p) for row in X])

    def get_feature_names_out(self, input_features=None):
        check_is_fitted(self, "partition_")
        return np.array([f"block_{l}" for l in self.levels_], dtype=object)


class BesovNormTransformer(_GridMixin, TransformerMixin, BaseEstimator):
    """One column per requested space; ``spaces`` holds ``(s, t, p, r)`` tuples (hybrid when ``s != t``)."""

    def __init__(self, dims=1, points_per_dim=64, period=2 * np.pi, spaces=((0.5, 0.5, 2.0, 1.0),)):
        self.dims = dims
        self.points_per_dim = points_per_dim
        self.period = period
        self.spaces = spaces

    def fit(self, X, y=None):
        self._fit(X)
        self.specs_ = [BesovSpec(*map(float, sp)) for sp in self.spaces]
        return self

    def transform(self, X):
        X = self._check(X)
        g, P = self.grid_, self.partition_
        out = np.empty((X.shape[0], len(self.specs_)))
        cache = {}
        for i, row in enumerate(X):
            f = SpectralField(g, row.reshape(g.shape))
            for j, sp in enumerate(self.specs_):
                if sp.p not in cache:
                    cache[sp.p] = block_norms(f, P, sp.p)
                out[i, j] = _weighted_sum(cache[sp.p], P.levels, sp, not sp.is_plain)
            cache.clear()
        return out
