import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from swbesov.besov import BesovSpec, besov_norm, block_norms, build_partition
from swbesov.corpus import block_field, random_field
from swbesov.errors import CFLError, ValidationError
from swbesov.linear import (
    GAP_INEQUALITY,
    AcousticState,
    LinearParams,
    LyapunovConfig,
    block_rate_oracle,
    evolve_linear,
    fit_rate,
    lyapunov_equivalence,
    lyapunov_profile,
    propagator,
    smoothing_times,
    solve_heat,
    solve_heat_variable,
    solve_transport,
    symbol_eigenvalues,
    verify_damping,
    verify_smoothing,
    write_damping_csv,
)
from swbesov.spectral import SpectralField, gaussian_kernel, hodge_split, make_grid


def params_for(grid, nu=1.0, delta=1.0, kappa=0.0):
    return LinearParams.from_nu(nu, delta, kappa, gaussian_kernel(grid))


class TestParams:
    def test_gap_violation_names_inequality(self, grid1):
        p = LinearParams.from_nu(1.0, 0.2, 0.5, gaussian_kernel(grid1))
        with pytest.raises(ValidationError) as exc:
            p.validate(grid1)
        assert exc.value.inequality == GAP_INEQUALITY

    @pytest.mark.parametrize("kw,name", [
        (dict(mu=0.0, lam=1.0, delta=1.0), "μ̄>0"),
        (dict(mu=0.5, lam=-1.5, delta=1.0), "ν̄>0"),
        (dict(mu=0.5, lam=0.0, delta=1.0, kappa=-1.0), "κ̄≥0"),
    ])
    def test_other_violations(self, kw, name):
        with pytest.raises(ValidationError) as exc:
            LinearParams(**kw).validate()
        assert exc.value.inequality == name

    def test_lyapunov_defaults_valid(self):
        for nu in (0.1, 0.5, 1.0, 4.0):
            p = LinearParams.from_nu(nu, 1.0)
            cfg = LyapunovConfig.default(p)
            cfg.validate(p)
            assert cfg.a == pytest.approx(1 / (nu * cfg.A))

    @pytest.mark.parametrize("over,name", [
        (dict(K1=10.0), "K₁<min(1/2^{2l₀}, ν̄/(2+2^{2l₀}ν̄²))"),
        (dict(A=1.5), "A>max(2/ν̄,1)"),
    ])
    def test_lyapunov_violations(self, over, name):
        p = LinearParams.from_nu(1.0, 1.0)
        cfg = LyapunovConfig.default(p).with_overrides(p, **over)
        with pytest.raises(ValidationError) as exc:
            cfg.validate(p)
        assert exc.value.inequality == name

    def test_positive_definiteness(self, part2):
        p = params_for(part2.grid, kappa=0.3)
        assert LyapunovConfig.default(p).check_positive(p, part2) > 0


class TestPropagator:
    @pytest.mark.parametrize("nu,delta,kappa", [(1.0, 1.0, 0.0), (0.1, 2.0, 0.0), (2.0, 1.0, 0.3), (4.0, 0.5, 0.0)])
    def test_matches_matrix_exponential(self, nu, delta, kappa):
        g = make_grid(1, 64)
        p = params_for(g, nu, delta, kappa)
        hat = p.phi_hat(g)
        for t in (0.01, 0.7, 3.0):
            E = propagator(p, g, t)
            for k in (1, 2, 5, 17, 31):
                ref = oracles.acoustic_flow(float(k), delta, nu, t, kappa=kappa, phi_hat=hat[k])
                assert np.allclose(E[:, :, k], ref, atol=1e-12, rtol=1e-10)

    def test_critical_damping_branch(self):
        # nu^2 xi^2 = 4 delta: repeated eigenvalue at xi = 2.
        g = make_grid(1, 16)
        p = LinearParams.from_nu(1.0, 1.0)
        E = propagator(p, g, 0.5)
        assert np.allclose(E[:, :, 2], oracles.acoustic_flow(2.0, 1.0, 1.0, 0.5), atol=1e-12)

    def test_eigenvalues_against_numpy(self):
        g = make_grid(1, 32)
        p = params_for(g, 1.0, 1.0, 0.3)
        _, slow = symbol_eigenvalues(p, g)
        hat = p.phi_hat(g)
        for k in range(1, 16):
            assert abs(slow[k].real) == pytest.approx(
                oracles.slowest_rate(float(k), 1.0, 1.0, kappa=0.3, phi_hat=hat[k]), rel=1e-10)


class TestEvolveLinear:
    def test_zero_state(self, grid1):
        p = params_for(grid1)
        traj = evolve_linear(AcousticState.zeros(grid1), p, 1.0, 0.1)
        assert all(np.all(s.q.values == 0) and np.all(s.d.values == 0) for s in traj.items)

    def test_single_mode_unit_frequency(self, grid1):
        p = LinearParams.from_nu(1.0, 1.0)
        x = grid1.coordinates[0]
        st0 = AcousticState(SpectralField(grid1, np.cos(x)), SpectralField(grid1, 0.3 * np.cos(x)))
        traj = evolve_linear(st0, p, 2.0, 0.25)
        for t, s in zip(traj.times, traj.items):
            ref = oracles.acoustic_flow(1.0, 1.0, 1.0, t) @ np.array([1.0, 0.3])
            assert np.abs(s.q.values - ref[0] * np.cos(x)).max() < 1e-10
            assert np.abs(s.d.values - ref[1] * np.cos(x)).max() < 1e-10

    def test_capillary_decay_rate(self):
        g = make_grid(1, 64)
        p = params_for(g, 1.0, 1.0, 0.5)
        x = g.coordinates[0]
        st0 = AcousticState(SpectralField(g, np.cos(3 * x)), SpectralField.zeros(g))
        times = np.linspace(0, 20, 401)
        traj = evolve_linear(st0, p, 20.0, 0.05, times=times)
        amp = np.array([np.hypot(s.q.l2_norm(), s.d.l2_norm()) for s in traj.items])
        rate = -np.polyfit(times[200:], np.log(amp[200:]), 1)[0]
        expected = oracles.slowest_rate(3.0, 1.0, 1.0, kappa=0.5, phi_hat=oracles.gaussian_hat(3.0, g.period / 16))
        assert rate == pytest.approx(expected, rel=2e-3)

    def test_constant_forcing_second_order(self):
        g = make_grid(1, 32)
        p = LinearParams.from_nu(1.0, 1.0)
        x = g.coordinates[0]
        F = SpectralField(g, np.cos(2 * x))
        T = 1.0
        M = oracles.acoustic_matrix(2.0, 1.0, 1.0)
        exact = np.linalg.solve(M, (oracles.acoustic_flow(2.0, 1.0, 1.0, T) - np.eye(2)) @ np.array([1.0, 0.0]))
        errs = []
        for dt in (0.1, 0.05, 0.025):
            s = evolve_linear(AcousticState.zeros(g), p, T, dt, F=F).final
            errs.append(np.abs(s.q.values - exact[0] * np.cos(2 * x)).max())
        orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
        assert np.all(orders > 1.9)

    def test_transport_cfl(self, grid1):
        p = params_for(grid1)
        v = SpectralField(grid1, 50.0 * np.ones((1,) + grid1.shape))
        st0 = AcousticState(random_field(grid1, 0), random_field(grid1, 1))
        with pytest.raises(CFLError):
            evolve_linear(st0, p, 1.0, 0.5, v=v)


class TestLyapunov:
    def test_low_block_pure_d(self, part1):
        p = params_for(part1.grid)
        cfg = LyapunovConfig.default(p)
        d = random_field(part1.grid, 3)
        prof = lyapunov_profile(AcousticState(SpectralField.zeros(part1.grid), d), cfg, p, part1)
        bn = block_norms(d, part1)
        for i, l in enumerate(part1.levels):
            if l <= cfg.l0:
                assert prof[int(l)] == pytest.approx(bn[i], rel=1e-12)

    def test_high_block_pure_q(self, part1):
        p = params_for(part1.grid)
        cfg = LyapunovConfig.default(p)
        q = random_field(part1.grid, 4)
        lq = SpectralField.from_coefficients(part1.grid, part1.grid.xi_norm * np.asarray(q.coefficients))
        prof = lyapunov_profile(AcousticState(q, SpectralField.zeros(part1.grid)), cfg, p, part1)
        bn = block_norms(lq, part1)
        for i, l in enumerate(part1.levels):
            if l > cfg.l0:
                assert prof[int(l)] == pytest.approx(bn[i], rel=1e-12)

    @given(st.integers(0, 10**6), st.sampled_from([0.0, 0.3]))
    def test_equivalence_positive(self, seed, kappa):
        g = make_grid(1, 64)
        P = build_partition(g)
        p = params_for(g, kappa=kappa)
        cfg = LyapunovConfig.default(p)
        lo, hi, _ = lyapunov_equivalence(AcousticState(random_field(g, seed), random_field(g, seed + 1)), cfg, p, P)
        assert 0 < lo <= hi < 10


class TestDamping:
    def test_zero_state(self, part1):
        p = params_for(part1.grid)
        rep = verify_damping(AcousticState.zeros(part1.grid), p, LyapunovConfig.default(p), 1.0, 0.05, part1)
        assert rep.passed

    @pytest.mark.parametrize("kappa", [0.0, 0.3])
    def test_random_state(self, part1, kappa):
        p = params_for(part1.grid, kappa=kappa)
        st0 = AcousticState(random_field(part1.grid, 1, gamma=0.5), random_field(part1.grid, 2, gamma=0.5))
        rep = verify_damping(st0, p, LyapunovConfig.default(p), 5.0, 0.05, part1)
        assert rep.passed and rep.alpha_fit > 0
        assert rep.max_increase <= 1e-9

    def test_single_low_block_rate(self):
        g = make_grid(1, 256)
        P = build_partition(g)
        p = params_for(g)
        q = block_field(g, 2, -1, P)
        rep = verify_damping(AcousticState(q, SpectralField.zeros(g)), p, LyapunovConfig.default(p), 5.0, 0.05, P)
        row = next(r for r in rep.rows if r.l == -1)
        assert row.rate_fit == pytest.approx(row.rate_oracle, rel=0.10)
        # Oracle: the only lattice mode of block -1 on this torus is |k| = 1.
        assert row.rate_oracle == pytest.approx(oracles.slowest_rate(1.0, 1.0, 1.0, phi_hat=math.exp(-0.5 * (g.period / 16) ** 2)),
                                                rel=1e-10)

    def test_oracle_is_block_minimum(self, part1):
        p = params_for(part1.grid)
        oracle = block_rate_oracle(p, part1)
        assert np.all(oracle[np.isfinite(oracle)] > 0)

    def test_fit_rate_pencil(self):
        t = np.linspace(0, 5, 101)
        y = 3 * np.exp(-0.4 * t) * (1 + 0.5 * np.cos(2 * t)) + np.exp(-2.0 * t)
        # The pencil fit targets the squared profile and reports half its slowest rate.
        assert fit_rate(t, y) == pytest.approx(0.4, rel=5e-3)

    def test_csv_schema(self, tmp_path, part1):
        p = params_for(part1.grid)
        st0 = AcousticState(random_field(part1.grid, 0), random_field(part1.grid, 1))
        rep = verify_damping(st0, p, LyapunovConfig.default(p), 1.0, 0.05, part1)
        path = tmp_path / "damping.csv"
        write_damping_csv(rep, path)
        assert path.read_text().splitlines()[0] == "l,f_l(0),rate_fit,rate_bound,pass"


class TestSmoothing:
    def test_zero(self, part2):
        p = params_for(part2.grid)
        traj = evolve_linear(AcousticState.zeros(part2.grid), p, 1.0, 0.1)
        rep = verify_smoothing(traj, 1.0, LyapunovConfig.default(p), part2)
        assert rep.lhs == 0 and rep.rhs == 0 and rep.passed

    def test_heat_only_matches_heat_solver(self):
        g = make_grid(1, 128)
        P = build_partition(g)
        nu = 1.0
        # delta at the gap: d decouples into a heat equation with viscosity nu.
        p = LinearParams.from_nu(nu, 1e-14, gap=1e-14)
        d0 = random_field(g, 5, kmin=2)
        times = smoothing_times(2.0)
        traj = evolve_linear(AcousticState(SpectralField.zeros(g), d0), p, 2.0, 1.0, times=times)
        s = 0.5
        rep = verify_smoothing(traj, s, LyapunovConfig.default(p), P)
        _, heat = solve_heat(d0, nu, 2.0, 0.1, 1.0, 1.0, BesovSpec(s - 1), P, times=times)
        assert rep.ratio == pytest.approx(heat.ratio, rel=1e-6)

    def test_random_ratio_bounded(self, part2):
        p = params_for(part2.grid)
        st0 = AcousticState(random_field(part2.grid, 0), random_field(part2.grid, 1))
        traj = evolve_linear(st0, p, 5.0, 1.0, times=smoothing_times(5.0, 200))
        rep = verify_smoothing(traj, 1.0, LyapunovConfig.default(p), part2)
        assert rep.passed and 0 < rep.ratio < 100


class TestTransport:
    def test_zero_velocity(self, part1):
        q0 = random_field(part1.grid, 0)
        traj, rep = solve_transport(q0, None, 1.0, 0.1, BesovSpec(0.5), part1)
        assert np.abs(traj.final.values - q0.values).max() < 1e-14
        assert rep.constant == 0 and rep.details["U_T"] == 0

    def test_rigid_rotation_preserves_norms(self):
        from swbesov.harness import rotation_flow

        g = make_grid(2, 128)
        P = build_partition(g)
        c = g.period / 2
        x, y = g.coordinates[0] - c, g.coordinates[1] - c
        q0 = SpectralField(g, (x + 0.3 * y) * np.exp(-(x**2 + y**2) / (2 * 0.2**2)))
        u = rotation_flow(g)
        T = 2 * math.pi
        traj, _ = solve_transport(q0, u, T, T / 600, BesovSpec(1.0), P, record_every=20)
        norms = np.array([besov_norm(f, BesovSpec(1.0), P) for f in traj.items])
        assert np.abs(norms / norms[0] - 1).max() < 1e-6
        # After one period the field returns to itself.
        assert np.abs(traj.final.values - q0.values).max() < 1e-6 * q0.sup_norm()

    def test_shear_growth_bounded(self, part2):
        g = part2.grid
        u = SpectralField(g, np.stack([np.sin(g.coordinates[1]), np.zeros(g.shape)]))
        q0 = random_field(g, 2, kmax=4)
        traj, rep = solve_transport(q0, u, 2.0, 0.02, BesovSpec(1.0), part2)
        assert rep.passed and math.isfinite(rep.constant)
        assert rep.lhs <= rep.rhs * (1 + 1e-9)

    def test_cfl(self, part1):
        u = SpectralField(part1.grid, 100 * np.ones((1,) + part1.grid.shape))
        with pytest.raises(CFLError):
            solve_transport(random_field(part1.grid, 0), u, 1.0, 0.5, BesovSpec(0.0), part1)

    def test_regularity_warning(self, part1):
        _, rep = solve_transport(random_field(part1.grid, 0), None, 0.1, 0.1, BesovSpec(5.0), part1)
        assert rep.details["regularity_warning"]


class TestHeat:
    @pytest.mark.parametrize("mu", [0.1, 1.0, 3.0])
    def test_single_mode(self, grid2, part2, mu):
        x, y = grid2.coordinates
        u0 = SpectralField(grid2, np.cos(2 * x + 3 * y))
        times = np.linspace(0, 1, 6)
        traj, _ = solve_heat(u0, mu, 1.0, 0.1, 1.0, 1.0, BesovSpec(0.0), part2, times=times)
        for t, f in zip(times, traj.items):
            assert np.abs(f.values - np.exp(-mu * 13 * t) * u0.values).max() < 1e-12

    def test_duhamel_constant_forcing(self, grid1, part1):
        x = grid1.coordinates[0]
        f = SpectralField(grid1, np.sin(3 * x))
        mu = 0.7
        traj, _ = solve_heat(SpectralField.zeros(grid1), mu, 1.0, 0.1, 1.0, 1.0, BesovSpec(0.0), part1, f=f)
        for t, u in zip(traj.times, traj.items):
            expected = oracles.duhamel_constant_forcing(mu, 9.0, t) * np.sin(3 * x)
            assert np.abs(u.values - expected).max() < 1e-13

    def test_ratio_stable_across_resolution(self):
        ratios = []
        for n in (64, 128, 256):
            g = make_grid(1, n)
            _, rep = solve_heat(random_field(g, 4, kmax=20), 1.0, 1.0, 0.1, 1.0, 1.0, BesovSpec(0.0), build_partition(g))
            ratios.append(rep.ratio)
        assert max(ratios) / min(ratios) - 1 < 0.10

    @pytest.mark.parametrize("mu,rho1,rho2", [(0.0, 1.0, 1.0), (1.0, 1.0, 2.0)])
    def test_preconditions(self, part1, mu, rho1, rho2):
        with pytest.raises(ValidationError):
            solve_heat(random_field(part1.grid, 0), mu, 1.0, 0.1, rho1, rho2, BesovSpec(0.0), part1)


class TestVariableHeat:
    def test_unit_coefficient_reduces_to_constant(self, grid2, part2):
        mu, lam = 0.5, 0.3
        u0 = random_field(grid2, 3, rank="vector", kmax=6)
        T = 0.5
        traj, _ = solve_heat_variable(u0, mu, lam, T, 0.01, part2)
        parts = hodge_split(u0)
        nu = 2 * mu + lam
        xi2 = grid2.xi_norm**2
        d = SpectralField.from_coefficients(grid2, np.asarray(parts.d.coefficients) * np.exp(-nu * xi2 * T))
        om = SpectralField.from_coefficients(grid2, np.asarray(parts.omega.coefficients) * np.exp(-mu * xi2 * T))
        from swbesov.spectral import hodge_reconstruct

        ref = hodge_reconstruct(d, om)
        assert np.abs(traj.final.values - ref.values).max() < 1e-10

    def test_energy_and_rate(self):
        g = make_grid(1, 32)
        P = build_partition(g)
        a = SpectralField(g, 1 + 0.1 * np.sin(g.coordinates[0]))
        u0 = SpectralField(g, np.cos(g.coordinates[0])[None])
        traj, rep = solve_heat_variable(u0, 0.5, 0.0, 1.0, 1e-3, P, a=a, record_every=10)
        energy = np.array(rep.details["energy"])
        assert np.all(np.diff(energy) < 0)
        rate = -np.polyfit(traj.times, np.log(energy), 1)[0] / 2
        assert 0.9 * 1.0 <= rate <= 1.1 * 1.0

    def test_lower_bound_violation(self, part1):
        a = SpectralField(part1.grid, np.sin(part1.grid.coordinates[0]))
        with pytest.raises(ValidationError):
            solve_heat_variable(random_field(part1.grid, 0, rank="vector"), 1.0, 0.0, 1.0, 0.01, part1, a=a)
