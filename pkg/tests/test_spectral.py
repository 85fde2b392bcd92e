import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from swbesov.errors import GridMismatchError, UndefinedAtZeroError, ValidationError
from swbesov.spectral import (
    MultiplierSymbol,
    SpectralField,
    convolve_kernel,
    dealias_mask,
    dealiased_product,
    fourier_multiplier,
    gaussian_kernel,
    hodge_reconstruct,
    hodge_split,
    make_grid,
    read_snapshot,
    write_snapshot,
)


class TestGrid:
    def test_frequencies_exclude_nyquist(self):
        g = make_grid(1, 8, 2 * math.pi)
        assert list(g.frequencies_1d()) == [-3, -2, -1, 0, 1, 2, 3]
        assert g.nyquist.sum() == 1
        assert g.resolved.sum() == 6

    def test_shape_2d(self):
        g = make_grid(2, 256)
        assert g.shape == (256, 256)
        assert g.coordinates.shape == (2, 256, 256)

    @pytest.mark.parametrize("dims,n,period,name", [
        (3, 7, 1.0, "non-power-of-two"),
        (4, 8, 1.0, "invalid-dimension"),
        (1, 8, -1.0, "non-positive-period"),
        (1, 4, 1.0, "non-power-of-two"),
    ])
    def test_invalid(self, dims, n, period, name):
        with pytest.raises(ValidationError) as exc:
            make_grid(dims, n, period)
        assert exc.value.inequality == name

    def test_equality_and_hash(self):
        assert make_grid(2, 16) == make_grid(2, 16)
        assert hash(make_grid(2, 16)) == hash(make_grid(2, 16))
        assert make_grid(2, 16) != make_grid(2, 16, 1.0)


class TestField:
    def test_coefficients_match_direct_sum(self):
        g = make_grid(2, 8)
        rng = np.random.default_rng(3)
        f = SpectralField(g, rng.standard_normal(g.shape))
        for k in [(0, 0), (1, 2), (-3, 1), (2, -2)]:
            idx = tuple(kk % 8 for kk in k)
            assert f.coefficients[idx] == pytest.approx(oracles.direct_coefficient(f.values, k), abs=1e-13)

    def test_rank_inferred(self, grid2):
        assert SpectralField.zeros(grid2, "vector").rank == "vector"
        assert SpectralField.zeros(grid2, "tensor").values.shape == (2, 2, 32, 32)

    def test_wrong_shape(self, grid2):
        with pytest.raises(GridMismatchError):
            SpectralField(grid2, np.zeros((16, 16)))

    def test_product_requires_dealiasing(self, grid2):
        f = SpectralField.zeros(grid2)
        with pytest.raises(TypeError):
            f * f

    def test_l2_parseval(self, grid2):
        f = SpectralField.from_function(grid2, lambda x, y: np.sin(x) + np.cos(3 * y))
        assert f.l2_norm() ** 2 == pytest.approx(4 * math.pi**2, rel=1e-12)
        assert f.inner(f) == pytest.approx(f.l2_norm() ** 2, rel=1e-12)

    def test_values_are_read_only(self, grid2):
        f = SpectralField.zeros(grid2)
        with pytest.raises(ValueError):
            f.values[0, 0] = 1.0


class TestMultipliers:
    def test_identity(self, grid2):
        rng = np.random.default_rng(0)
        f = SpectralField(grid2, rng.standard_normal(grid2.shape))
        g = fourier_multiplier(f, MultiplierSymbol.identity())
        # Nyquist modes are not represented.
        ref = SpectralField.from_coefficients(grid2, np.where(grid2.nyquist, 0, f.coefficients))
        assert np.abs(g.values - ref.values).max() < 1e-13

    def test_laplacian_of_sine(self, grid1):
        f = SpectralField.from_function(grid1, np.sin)
        g = fourier_multiplier(f, MultiplierSymbol.laplacian())
        assert np.abs(g.values + np.sin(grid1.coordinates[0])).max() < 1e-12

    def test_lambda_of_cos2x(self, grid1):
        f = SpectralField.from_function(grid1, lambda x: np.cos(2 * x))
        g = fourier_multiplier(f, MultiplierSymbol.fractional(1.0))
        # Oracle: scale the two nonzero coefficients by |k| = 2 by hand.
        c = np.zeros(64, complex)
        c[2] = c[-2] = 0.5 * 2
        assert np.abs(g.values - np.real(np.fft.ifft(c) * 64)).max() < 1e-12

    def test_negative_order_with_mean_raises(self, grid1):
        f = SpectralField.from_function(grid1, lambda x: 1 + np.cos(x))
        with pytest.raises(UndefinedAtZeroError):
            fourier_multiplier(f, MultiplierSymbol.fractional(-1.0))

    def test_negative_order_mean_free(self, grid1):
        f = SpectralField.from_function(grid1, lambda x: np.cos(4 * x))
        g = fourier_multiplier(f, MultiplierSymbol.fractional(-1.0))
        assert np.abs(g.values - np.cos(4 * grid1.coordinates[0]) / 4).max() < 1e-13

    @given(st.floats(-2, 2), st.floats(-2, 2))
    def test_composition_of_fractional_powers(self, a, b):
        g = make_grid(1, 32)
        f = SpectralField.from_function(g, lambda x: np.sin(3 * x) + 0.5 * np.cos(5 * x))
        one = fourier_multiplier(fourier_multiplier(f, MultiplierSymbol.fractional(a)),
                                 MultiplierSymbol.fractional(b))
        two = fourier_multiplier(f, MultiplierSymbol.fractional(a) * MultiplierSymbol.fractional(b))
        assert np.abs(one.values - two.values).max() < 1e-10 * max(1.0, 5.0 ** (a + b))


class TestHodge:
    def test_gradient_is_curl_free(self, grid2):
        x, y = grid2.coordinates
        f = np.sin(x) * np.cos(2 * y)
        u = SpectralField(grid2, np.stack([oracles.spectral_derivative(f, 0), oracles.spectral_derivative(f, 1)]))
        parts = hodge_split(u)
        assert np.abs(parts.omega.values).max() < 1e-10

    def test_divergence_free(self, grid2):
        x, y = grid2.coordinates
        psi = np.sin(2 * x) * np.cos(y)
        u = SpectralField(grid2, np.stack([oracles.spectral_derivative(psi, 1),
                                           -oracles.spectral_derivative(psi, 0)]))
        assert np.abs(hodge_split(u).d.values).max() < 1e-10

    def test_shear_closed_form(self, grid2):
        x, y = grid2.coordinates
        u = SpectralField(grid2, np.stack([np.sin(y), np.zeros_like(y)]))
        parts = hodge_split(u)
        # div u = 0, so d = 0; Omega_01 = Lambda^{-1}(d_1 u_0) = Lambda^{-1} cos y = cos y.
        assert np.abs(parts.d.values).max() < 1e-12
        assert np.abs(parts.omega.values[0, 1] - np.cos(y)).max() < 1e-12
        assert np.abs(parts.omega.values[1, 0] + np.cos(y)).max() < 1e-12
        back = hodge_reconstruct(parts.d, parts.omega)
        assert np.abs(back.values - u.values).max() < 1e-10

    def test_mean_rejected(self, grid2):
        u = SpectralField(grid2, np.ones((2,) + grid2.shape))
        with pytest.raises(ValidationError):
            hodge_split(u)
        parts = hodge_split(u, allow_mean=True)
        assert np.allclose(parts.mean, 1.0)
        assert np.allclose(hodge_reconstruct(parts.d, parts.omega, parts.mean).values, 1.0)

    @given(st.integers(0, 2**31 - 1))
    def test_roundtrip_random(self, seed):
        g = make_grid(3, 8)
        rng = np.random.default_rng(seed)
        u = SpectralField(g, rng.standard_normal((3,) + g.shape)).without_mean()
        u = SpectralField.from_coefficients(g, np.where(g.nyquist, 0, u.coefficients))
        parts = hodge_split(u)
        back = hodge_reconstruct(parts.d, parts.omega)
        assert np.abs(back.values - u.values).max() < 1e-10 * max(1.0, u.sup_norm())


class TestKernel:
    def test_constant_preserved(self, grid2):
        k = gaussian_kernel(grid2)
        c = SpectralField(grid2, np.full(grid2.shape, 2.5))
        assert np.abs(convolve_kernel(c, k).values - 2.5).max() < 1e-12

    def test_single_mode_against_gaussian_transform(self):
        g = make_grid(1, 128)
        sigma = g.period / 16
        k = gaussian_kernel(g, width=sigma)
        k.check()
        f = SpectralField.from_function(g, lambda x: np.cos(5 * x))
        out = convolve_kernel(f, k)
        expected = oracles.gaussian_hat(5.0, sigma) * np.cos(5 * g.coordinates[0])
        assert np.abs(out.values - expected).max() < 1e-12
        assert k.sup_hat == pytest.approx(1.0, abs=1e-12)

    def test_narrow_kernel_is_identity_on_band(self):
        g = make_grid(1, 64)
        k = gaussian_kernel(g, width=1e-3)
        f = SpectralField.from_function(g, lambda x: np.sin(3 * x))
        # A width below the grid spacing leaves a single sample: phi_hat = 1 on every mode.
        assert np.abs(convolve_kernel(f, k).values - f.values).max() < 1e-12


class TestDealiasing:
    def test_mask_two_thirds(self):
        g = make_grid(1, 16)
        kept = g.wavenumbers[0][dealias_mask(g)]
        assert sorted(kept) == list(range(-5, 6))

    def test_product_exact_for_band_limited(self, grid1):
        a = SpectralField.from_function(grid1, lambda x: np.sin(5 * x))
        b = SpectralField.from_function(grid1, lambda x: np.cos(7 * x))
        p = dealiased_product(a, b)
        x = grid1.coordinates[0]
        assert np.abs(p.values - np.sin(5 * x) * np.cos(7 * x)).max() < 1e-13

    def test_product_drops_modes_beyond_band(self):
        g = make_grid(1, 32)
        a = SpectralField.from_function(g, lambda x: np.cos(8 * x))
        p = dealiased_product(a, a)
        # cos^2(8x) = 1/2 + cos(16x)/2; mode 16 is outside |k| < 32/3.
        assert np.abs(p.values - 0.5).max() < 1e-13


class TestSnapshots:
    @pytest.mark.parametrize("rank", ["scalar", "vector", "tensor"])
    def test_roundtrip(self, tmp_path, grid2, rank):
        rng = np.random.default_rng(1)
        lead = {"scalar": (), "vector": (2,), "tensor": (2, 2)}[rank]
        f = SpectralField(grid2, rng.standard_normal(lead + grid2.shape))
        path = tmp_path / "f.swf"
        write_snapshot(f, path)
        g = read_snapshot(path)
        assert g.grid == grid2 and g.rank == rank
        assert np.array_equal(g.values, f.values)

    def test_truncated_file(self, tmp_path, grid2):
        path = tmp_path / "f.swf"
        write_snapshot(SpectralField.zeros(grid2), path)
        data = path.read_bytes()
        path.write_bytes(data[:-8])
        with pytest.raises(ValueError):
            read_snapshot(path)
