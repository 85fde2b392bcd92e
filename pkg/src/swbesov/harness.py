"""Scenario configuration, execution and artifact persistence."""
from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import math
import os
import platform
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import scipy
from scipy.special import erfc

from . import __version__, spectral
from .besov import (
    BesovSpec,
    besov_norm,
    build_partition,
    dyadic_block,
    hybrid_norm,
    log_interpolation,
    verify_product_laws,
)
from .corpus import random_field
from .errors import ValidationError
from .linear import (
    AcousticState,
    LinearParams,
    LyapunovConfig,
    evolve_linear,
    smoothing_times,
    solve_heat,
    solve_heat_variable,
    solve_transport,
    verify_damping,
    verify_smoothing,
)
from .nonlinear import (
    FriedrichsLevel,
    PhysicalLaws,
    evolve_sw,
    global_bound_experiment,
    local_time_bound,
    save_trajectory,
    scale_to_energy,
    stability_experiment,
)
from .spectral import SpectralField, gaussian_kernel, make_grid, set_threads

__all__ = [
    "SCENARIOS",
    "ScenarioConfig",
    "ScenarioResult",
    "RunArtifacts",
    "ConvergenceTable",
    "load_config",
    "run_scenario",
    "emit_artifacts",
    "compare_resolutions",
]

SCENARIOS = (
    "partition_check",
    "norm_suite",
    "linear_damping",
    "linear_smoothing",
    "transport_estimate",
    "heat_estimate",
    "variable_heat",
    "nonlinear_global",
    "nonlinear_local",
    "stability",
    "scaling_check",
    "convergence_sweep",
)

_BASE = {
    "grid": {"dims": 2, "points_per_dim": 128, "period": 2 * math.pi},
    "physics": {
        # Linear scenarios read nu, delta and kappa (as the linearised capillary coefficient).
        "nu": 1.0, "delta": 1.0, "kappa": 0.0, "kernel_width": 1.0 / 16.0, "kappa_reg": 0.0, "gap": 1e-8,
        # Nonlinear scenarios read the power laws; kappa is then the physical capillarity.
        "rho_bar": 1.0, "p_coef": 1.0, "p_exp": 2.0, "mu_coef": 1.0, "mu_exp": 1.0,
        "lam_coef": 0.0, "lam_exp": 1.0,
    },
    "lyapunov": {"l0": 0, "K1": None, "A": None},
    "tolerances": {},
    "run": {},
    "seed": 0,
    "output_dir": "swbesov-out",
}

_SCENARIO_DEFAULTS = {
    "partition_check": {"grid": {"dims": 1, "points_per_dim": 256}, "tolerances": {"unity": 1e-12}},
    "norm_suite": {"run": {"n_fields": 50, "gamma": 1.0, "kmax": None},
                   "tolerances": {"reconstruction": 1e-10, "derivative_c": 3.0, "c_max": 100.0}},
    "linear_damping": {"grid": {"dims": 1, "points_per_dim": 256},
                       "run": {"n_states": 20, "T": 5.0, "dt": 0.05, "gamma": 0.5, "method": "pencil"},
                       "tolerances": {"slack": 1e-9, "oracle": 0.15}},
    "linear_smoothing": {"run": {"n_states": 5, "T": 5.0, "samples": 400, "s": None, "gamma": 1.0},
                         "tolerances": {"c_max": 100.0}},
    "transport_estimate": {"run": {"flow": "rotation", "T": 2 * math.pi, "dt": None, "s": 1.0},
                           "tolerances": {"norm_drift": 1e-6, "c_max": 50.0}},
    "heat_estimate": {"run": {"mu": 1.0, "T": 1.0, "rho1": 1.0, "rho2": 1.0, "s": 0.0, "gamma": 1.0},
                      "tolerances": {"single_mode": 1e-12, "c_max": 100.0}},
    "variable_heat": {"grid": {"dims": 1, "points_per_dim": 32},
                      "run": {"mu": 0.5, "lam": 0.0, "amplitude": 0.1, "T": 1.0, "dt": 1e-3, "mode": 1},
                      "tolerances": {"c_max": 100.0}},
    "nonlinear_global": {"physics": {"kappa": 0.1},
                         "run": {"E0": 1e-2, "T": 50.0, "dt": 0.05, "gamma": 1.0, "kmax": 20, "level": None,
                                 "record_every": 100, "save_trajectory": False},
                         "tolerances": {"margin": 10.0, "mass_drift": 1e-8}},
    "nonlinear_local": {"grid": {"dims": 2, "points_per_dim": 64},
                        "run": {"eps": 0.1, "u_amplitude": 1.0, "q_amplitude": 1e-3, "dt": 0.01, "eta": 1.0,
                                "c": 1.0, "exponent": "2^{2q}", "gamma": 1.0, "kmax": 10}},
    "stability": {"physics": {"kappa": 0.1},
                  "run": {"E0": 1e-2, "delta": 1e-6, "T": 1.0, "dt": 0.05, "gamma": 1.0, "kmax": 20,
                          "target": "u", "gate": 0.5},
                  "tolerances": {"amplification": 100.0}},
    "scaling_check": {"grid": {"dims": 2, "points_per_dim": 64},
                      "physics": {"kappa": 0.1},
                      "run": {"lambda": 2.0, "amplitude": 0.05, "T": 1.0, "dt": 0.02, "gamma": 1.0, "kmax": 10},
                      "tolerances": {"relative": 0.05}},
    "convergence_sweep": {"grid": {"dims": 2, "points_per_dim": 64},
                          "physics": {"kappa": 0.1},
                          "run": {"levels": [4, 8, 16], "amplitude": 0.05, "T": 1.0, "dt": 0.02,
                                  "gamma": 1.0, "kmax": None}},
}


def _merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in (extra or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


@dataclass
class ScenarioConfig:
    scenario: str
    grid: dict
    physics: dict
    lyapunov: dict
    tolerances: dict
    run: dict
    seed: int = 0
    output_dir: str = "swbesov-out"

    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioConfig":
        name = data.get("scenario")
        if name not in SCENARIOS:
            raise ValidationError(f"unknown scenario {name!r}; expected one of {', '.join(SCENARIOS)}",
                                  "scenario ∈ known set")
        merged = _merge(_merge(_BASE, _SCENARIO_DEFAULTS[name]), data)
        unknown = set(merged) - set(_BASE) - {"scenario"}
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}", "known keys")
        return cls(name, merged["grid"], merged["physics"], merged["lyapunov"], merged["tolerances"],
                   merged["run"], int(merged["seed"]), str(merged["output_dir"]))

    def to_dict(self) -> dict:
        return {"scenario": self.scenario, "grid": self.grid, "physics": self.physics, "lyapunov": self.lyapunov,
                "tolerances": self.tolerances, "run": self.run, "seed": self.seed, "output_dir": self.output_dir}

    def with_overrides(self, assignments: Sequence[str]) -> "ScenarioConfig":
        """Apply ``dotted.path=value`` strings; values are parsed as JSON when possible."""
        data = self.to_dict()
        for item in assignments:
            if "=" not in item:
                raise ValidationError(f"override {item!r} is not of the form key=value", "key=value")
            key, raw = item.split("=", 1)
            parts = key.strip().split(".")
            node = data
            for p in parts[:-1]:
                if not isinstance(node.get(p), dict):
                    raise ValidationError(f"override path {key!r} does not exist", "known keys")
                node = node[p]
            node[parts[-1]] = _parse_value(raw)
        return ScenarioConfig.from_dict(data)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()

    # Derived objects ------------------------------------------------------
    def make_grid(self):
        g = self.grid
        return make_grid(int(g["dims"]), g["points_per_dim"], float(g["period"]))

    def linear_params(self, grid) -> LinearParams:
        ph = self.physics
        kernel = gaussian_kernel(grid, width=float(ph["kernel_width"]) * grid.period)
        nu = float(ph["nu"])
        mu = float(ph.get("mu", nu / 2.0) or nu / 2.0)
        lam = nu - 2 * mu
        return LinearParams(mu, lam, float(ph["delta"]), float(ph["kappa"]), kernel, float(ph["kappa_reg"]),
                            float(ph["gap"]))

    def laws(self) -> PhysicalLaws:
        ph = self.physics
        keys = ["rho_bar", "kappa", "p_coef", "p_exp", "mu_coef", "mu_exp", "lam_coef", "lam_exp",
                "kernel_width", "kappa_reg", "gap"]
        return PhysicalLaws(**{k: float(ph[k]) for k in keys})

    def lyapunov_config(self, params: LinearParams) -> LyapunovConfig:
        ly = self.lyapunov
        cfg = LyapunovConfig.default(params, int(ly.get("l0", 0)))
        return cfg.with_overrides(params, K1=ly.get("K1"), A=ly.get("A"))

    def validate(self):
        """Build every derived object; raises :class:`ValidationError` naming the failed inequality."""
        grid = self.make_grid()
        nonlinear = self.scenario in ("nonlinear_global", "nonlinear_local", "stability", "scaling_check",
                                      "convergence_sweep")
        if nonlinear:
            self.laws().validate(grid)
        elif self.scenario in ("linear_damping", "linear_smoothing"):
            params = self.linear_params(grid).validate(grid)
            cfg = self.lyapunov_config(params).validate(params)
            cfg.check_positive(params, build_partition(grid))
        for key in ("T", "dt"):
            v = self.run.get(key)
            if v is not None and not float(v) > 0:
                raise ValidationError(f"run.{key} must be positive", f"{key}>0")
        return grid


@dataclass
class ScenarioResult:
    scenario: str
    passed: bool
    metrics: dict = field(default_factory=dict)
    tables: Dict[str, tuple] = field(default_factory=dict)  # name -> (columns, rows)
    trajectories: Dict[str, tuple] = field(default_factory=dict)  # name -> (trajectory, parameters)
    checks: Dict[str, bool] = field(default_factory=dict)


@dataclass
class RunArtifacts:
    report: dict
    files: List[str]
    manifest: dict
    output_dir: str

    @property
    def passed(self) -> bool:
        return bool(self.report.get("passed", False))


# Scenario implementations -----------------------------------------------------

def _fields(grid, seed, n, gamma=1.0, kmax=None, rank="scalar"):
    return [random_field(grid, seed + i, gamma=gamma, kmax=kmax, rank=rank) for i in range(n)]


def _gradient(f: SpectralField) -> SpectralField:
    g = f.grid
    return SpectralField.from_coefficients(g, 1j * g.xi * np.asarray(f.coefficients)[None])


def _run_partition(cfg, grid):
    t0 = time.perf_counter()
    P = build_partition(grid)
    dev = P.unity_defect()
    overlap = float(np.max(np.abs(P.masks[:-2] * P.masks[2:]))) if len(P.masks) > 2 else 0.0
    elapsed = time.perf_counter() - t0
    rows = []
    for l, m in zip(P.levels, P.masks):
        sel = m > 0
        r = grid.xi_norm[sel]
        rows.append({"l": int(l), "modes": int(sel.sum()), "min_radius": float(r.min()) if r.size else 0.0,
                     "max_radius": float(r.max()) if r.size else 0.0})
    ok = dev < float(cfg.tolerances["unity"]) and overlap == 0.0
    return ScenarioResult(cfg.scenario, ok, {"max_deviation": dev, "l_min": P.l_min, "l_max": P.l_max,
                                             "third_block_overlap": overlap, "seconds": elapsed},
                          {"partition": (["l", "modes", "min_radius", "max_radius"], rows)},
                          checks={"unity": dev < float(cfg.tolerances["unity"]), "two_block_overlap": overlap == 0.0})


def _run_norm_suite(cfg, grid):
    P = build_partition(grid)
    run, tol = cfg.run, cfg.tolerances
    N = grid.dims
    fields = _fields(grid, cfg.seed, int(run["n_fields"]), float(run["gamma"]), run["kmax"])
    recon, deriv, hyb = 0.0, {}, []
    rows = []
    for i, f in enumerate(fields):
        total = sum(np.asarray(dyadic_block(f, int(l), P).values) for l in P.levels) + f.mean
        recon = max(recon, float(np.abs(total - f.values).max() / f.sup_norm()))
        gf = _gradient(f)
        for s in (0.0, 1.0, N / 2.0):
            ratio = besov_norm(gf, BesovSpec(s - 1), P) / besov_norm(f, BesovSpec(s), P)
            lo, hi = deriv.get(s, (math.inf, 0.0))
            deriv[s] = (min(lo, ratio), max(hi, ratio))
        b = besov_norm(f, BesovSpec(N / 2.0), P)
        h = hybrid_norm(f, BesovSpec(N / 2.0), P)
        hyb.append(h / b)
        for name, spec, value in (
            ("besov", BesovSpec(N / 2.0), b),
            ("hybrid", BesovSpec(N / 2.0 - 1, N / 2.0), hybrid_norm(f, BesovSpec(N / 2.0 - 1, N / 2.0), P)),
            ("besov", BesovSpec(0.0, p=2, r=math.inf), besov_norm(f, BesovSpec(0.0, r=math.inf), P)),
        ):
            rows.append({"field_id": f"f{i:03d}", "space": name, "s": spec.s, "t": spec.t, "p": spec.p,
                         "r": spec.r, "value": value})
    products = []
    cmax = float(tol["c_max"])
    for i in range(0, len(fields) - 1, 2):
        u, v = fields[i], fields[i + 1]
        for case in ("algebra", "hybrid_bilinear", "limit_endpoint"):
            rep = verify_product_laws(u, v, case, P, c_max=cmax)
            products.append({"pair": i // 2, "case": case, "lhs": rep.lhs, "rhs": rep.rhs, "ratio": rep.ratio,
                             "pass": rep.passed})
    interp = []
    for i, f in enumerate(fields[:10]):
        lhs, rhs = log_interpolation(f, 0.0, 1.0, 2.0, P)
        interp.append(lhs / rhs if rhs else 0.0)
    C = float(tol["derivative_c"])
    deriv_ok = all(1 / C <= lo and hi <= C for lo, hi in deriv.values())
    checks = {"reconstruction": recon < float(tol["reconstruction"]), "derivative": deriv_ok,
              "hybrid_vs_besov": all(1 - 1e-12 <= r <= 2 + 1e-12 for r in hyb),
              "products": all(p["pass"] for p in products)}
    metrics = {"reconstruction_error": recon, "hybrid_ratio_max": max(hyb), "hybrid_ratio_min": min(hyb),
               "product_ratio_max": max(p["ratio"] for p in products), "log_interp_ratio_max": max(interp)}
    for s, (lo, hi) in deriv.items():
        metrics[f"derivative_ratio_min_s{s:g}"] = lo
        metrics[f"derivative_ratio_max_s{s:g}"] = hi
    return ScenarioResult(cfg.scenario, all(checks.values()), metrics,
                          {"norms": (["field_id", "space", "s", "t", "p", "r", "value"], rows),
                           "products": (["pair", "case", "lhs", "rhs", "ratio", "pass"], products)}, checks=checks)


def _acoustic_states(grid, seed, n, gamma, kmax=None):
    return [AcousticState(random_field(grid, seed + 2 * i, gamma=gamma, kmax=kmax),
                          random_field(grid, seed + 2 * i + 1, gamma=gamma, kmax=kmax)) for i in range(n)]


def _run_damping(cfg, grid):
    P = build_partition(grid)
    params = cfg.linear_params(grid)
    lcfg = cfg.lyapunov_config(params)
    run, tol = cfg.run, cfg.tolerances
    kmax = run.get("kmax") or grid.points // 2 - 1
    states = _acoustic_states(grid, cfg.seed, int(run["n_states"]), float(run["gamma"]), kmax)
    cols = ["l", "f_l(0)", "rate_fit", "rate_bound", "pass"]
    tables, every, alphas, mismatch, increase = {}, [], [], 0.0, -math.inf
    ok = True
    for i, st in enumerate(states):
        rep = verify_damping(st, params, lcfg, float(run["T"]), float(run["dt"]), P, slack=float(tol["slack"]),
                             oracle_tol=float(tol["oracle"]), method=run.get("method", "pencil"))
        ok &= rep.passed
        alphas.append(rep.alpha_fit)
        mismatch = max(mismatch, rep.oracle_mismatch)
        increase = max(increase, rep.max_increase)
        rows = rep.to_rows()
        if i == 0:
            tables["damping"] = (cols, rows)
        every.extend({"state": i, **r} for r in rows)
    tables["damping_states"] = (["state"] + cols, every)
    alpha = min(alphas)
    return ScenarioResult(cfg.scenario, bool(ok and alpha > 0),
                          {"alpha_fit": alpha, "oracle_mismatch": mismatch, "max_increase": increase,
                           "K1": lcfg.K1, "A": lcfg.A}, tables,
                          checks={"monotone": increase <= float(tol["slack"]), "alpha_positive": alpha > 0,
                                  "oracle": mismatch <= float(tol["oracle"])})


def _run_smoothing(cfg, grid):
    P = build_partition(grid)
    params = cfg.linear_params(grid)
    lcfg = cfg.lyapunov_config(params)
    run = cfg.run
    s = grid.dims / 2.0 if run.get("s") is None else float(run["s"])
    times = smoothing_times(float(run["T"]), int(run["samples"]))
    rows, ratios = [], []
    for i, st in enumerate(_acoustic_states(grid, cfg.seed, int(run["n_states"]), float(run["gamma"]),
                                            run.get("kmax"))):
        traj = evolve_linear(st, params, float(run["T"]), 1.0, times=times)
        rep = verify_smoothing(traj, s, lcfg, P, c_max=float(cfg.tolerances["c_max"]))
        ratios.append(rep.ratio)
        rows.append({"state": i, "lhs": rep.lhs, "rhs": rep.rhs, "ratio": rep.ratio, "pass": rep.passed})
    return ScenarioResult(cfg.scenario, all(r["pass"] for r in rows),
                          {"C_obs": max(ratios), "C_min": min(ratios), "s": s},
                          {"smoothing": (["state", "lhs", "rhs", "ratio", "pass"], rows)})


def rotation_flow(grid, radius: float = 2.2, width: float = 0.25):
    """Divergence-free swirl: rigid unit rotation well inside ``radius``, at rest near the box edge.

    The erfc cutoff keeps the spectrum Gaussian, so the field is band-limited
    to round-off on 128^2 and finer grids.
    """
    c = grid.period / 2
    x, y = grid.coordinates[0] - c, grid.coordinates[1] - c
    w = 0.5 * erfc((np.hypot(x, y) - radius) / width)
    # u = w(r) (-y, x) is divergence free for any radial w.
    return SpectralField(grid, np.stack([-y * w, x * w]))


def _run_transport(cfg, grid):
    P = build_partition(grid)
    run, tol = cfg.run, cfg.tolerances
    if grid.dims != 2:
        raise ValidationError("transport scenarios need a 2D grid", "dims = 2")
    c = grid.period / 2
    x, y = grid.coordinates[0] - c, grid.coordinates[1] - c
    spec = BesovSpec(float(run["s"]))
    if run["flow"] == "rotation":
        u = rotation_flow(grid)
        # Dipole well inside the rigid core, so rotation preserves every block norm.
        q0 = SpectralField(grid, (x + 0.3 * y) * np.exp(-(x**2 + y**2) / (2 * 0.2**2)))
    elif run["flow"] == "shear":
        u = SpectralField(grid, np.stack([np.sin(grid.coordinates[1]), np.zeros(grid.shape)]))
        q0 = random_field(grid, cfg.seed, gamma=1.0, kmax=grid.points // 6)
    else:
        raise ValidationError(f"unknown flow {run['flow']!r}", "flow ∈ {rotation, shear}")
    dt = run.get("dt") or 0.5 * 2.8 / (u.sup_norm() * grid.box_frequency * (grid.points // 3))
    T = float(run["T"])
    nsteps = max(1, int(math.ceil(T / dt)))
    traj, rep = solve_transport(q0, u, T, T / nsteps, spec, P, record_every=max(1, nsteps // 50))
    norms = np.array([besov_norm(f, spec, P) for f in traj.items])
    drift = float(np.max(np.abs(norms / norms[0] - 1)))
    checks = {"estimate": rep.passed and rep.constant <= float(tol["c_max"])}
    if run["flow"] == "rotation":
        checks["norm_constant"] = drift < float(tol["norm_drift"])
    rows = [{"t": float(t), "norm": float(v)} for t, v in zip(traj.times, norms)]
    return ScenarioResult(cfg.scenario, all(checks.values()),
                          {"C_fit": rep.constant, "norm_drift": drift, "U_T": rep.details["U_T"]},
                          {"transport": (["t", "norm"], rows)}, checks=checks)


def _run_heat(cfg, grid):
    P = build_partition(grid)
    run, tol = cfg.run, cfg.tolerances
    mu, T = float(run["mu"]), float(run["T"])
    spec = BesovSpec(float(run["s"]))
    mode = SpectralField(grid, np.cos(3 * grid.coordinates[0] * grid.box_frequency))
    traj, _ = solve_heat(mode, mu, T, 0.1, 1.0, 1.0, spec, P, times=np.linspace(0, T, 11))
    kk = (3 * grid.box_frequency) ** 2
    single = max(float(np.abs(f.values - mode.values * np.exp(-mu * kk * t)).max())
                 for t, f in zip(traj.times, traj.items))
    rows = []
    ratios = []
    for i in range(5):
        u0 = random_field(grid, cfg.seed + i, gamma=float(run["gamma"]), kmax=run.get("kmax"))
        _, rep = solve_heat(u0, mu, T, 0.1, float(run["rho1"]), float(run["rho2"]), spec, P)
        ratios.append(rep.ratio)
        rows.append({"field": i, "lhs": rep.lhs, "rhs": rep.rhs, "ratio": rep.ratio})
    checks = {"single_mode": single < float(tol["single_mode"]), "ratio": max(ratios) <= float(tol["c_max"])}
    decay = traj.items[-1].l2_norm() / mode.l2_norm()
    return ScenarioResult(cfg.scenario, all(checks.values()),
                          {"single_mode_error": single, "single_mode_decay": decay, "C_obs": max(ratios),
                           "C_min": min(ratios)},
                          {"heat": (["field", "lhs", "rhs", "ratio"], rows)}, checks=checks)


def _run_variable_heat(cfg, grid):
    P = build_partition(grid)
    run = cfg.run
    amp = float(run["amplitude"])
    a = SpectralField(grid, 1 + amp * np.sin(grid.coordinates[0] * grid.box_frequency))
    m = int(run["mode"])
    vals = np.zeros((grid.dims,) + grid.shape)
    vals[0] = np.cos(m * grid.box_frequency * grid.coordinates[0])
    u0 = SpectralField(grid, vals)
    traj, rep = solve_heat_variable(u0, float(run["mu"]), float(run["lam"]), float(run["T"]), float(run["dt"]), P,
                                    a=a, record_every=10)
    energy = np.array(rep.details["energy"])
    decreasing = bool(np.all(np.diff(energy) <= 1e-14 * energy[0]))
    nu = 2 * float(run["mu"]) + float(run["lam"])
    base = nu * (m * grid.box_frequency) ** 2  # energy decays at twice this for the pure mode
    rate = -np.polyfit(traj.times, np.log(energy), 1)[0] / 2
    amin, amax = rep.details["a_min"], rep.details["a_max"]
    in_band = amin * base * (1 - 1e-3) <= rate <= amax * base * (1 + 1e-3)
    checks = {"energy_decreasing": decreasing, "rate_in_band": bool(in_band),
              "estimate": rep.ratio <= float(cfg.tolerances["c_max"])}
    rows = [{"t": float(t), "energy": float(e)} for t, e in zip(traj.times, energy)]
    return ScenarioResult(cfg.scenario, all(checks.values()),
                          {"rate": float(rate), "rate_const": base, "a_min": amin, "a_max": amax,
                           "ratio": rep.ratio, "grad_a_correction": rep.details["grad_a_correction"]},
                          {"variable_heat": (["t", "energy"], rows)}, checks=checks)


def _small_data(cfg, grid, P):
    run = cfg.run
    q0 = random_field(grid, cfg.seed, gamma=float(run["gamma"]), kmax=run.get("kmax"))
    u0 = random_field(grid, cfg.seed + 1, gamma=float(run["gamma"]), kmax=run.get("kmax"), rank="vector")
    return scale_to_energy(q0, u0, P, float(run["E0"]))


def _run_global(cfg, grid):
    P = build_partition(grid)
    run, tol = cfg.run, cfg.tolerances
    laws = cfg.laws()
    q0, u0 = _small_data(cfg, grid, P)
    rep = global_bound_experiment(q0, u0, laws, FriedrichsLevel(run.get("level")), float(run["T"]),
                                  float(run["dt"]), float(tol["margin"]), P=P,
                                  record_every=int(run["record_every"]), keep_trajectory=True)
    e = rep.energy
    stride = max(1, len(e.times) // 200)
    rows = [{"t": float(e.times[i]), "q_sup": float(e.q_sup[i]), "q_int": float(e.q_int[i]),
             "u_sup": float(e.u_sup[i]), "u_int": float(e.u_int[i]), "E": float(e.total[i])}
            for i in range(0, len(e.times), stride)]
    checks = {"bound": rep.ratio <= rep.margin, "no_vacuum": not rep.halted,
              "mass": rep.mass_drift < float(tol["mass_drift"])}
    trajs = {"trajectory": (rep.trajectory, {"laws": laws.to_dict()})} if run.get("save_trajectory") else {}
    return ScenarioResult(cfg.scenario, all(checks.values()),
                          {"E0": rep.E0, "E_T": float(e.total[-1]), "ratio": rep.ratio, "mass_drift": rep.mass_drift,
                           "first_violation": rep.first_violation, "halt_reason": rep.halt_reason},
                          {"energy": (["t", "q_sup", "q_int", "u_sup", "u_int", "E"], rows)}, trajs, checks)


def _run_local(cfg, grid):
    P = build_partition(grid)
    run = cfg.run
    laws = cfg.laws()
    u0 = random_field(grid, cfg.seed + 1, gamma=float(run["gamma"]), kmax=run.get("kmax"), rank="vector",
                      amplitude=float(run["u_amplitude"]))
    q0 = random_field(grid, cfg.seed, gamma=float(run["gamma"]), kmax=run.get("kmax"),
                      amplitude=float(run["q_amplitude"]))
    T_lb = local_time_bound(u0, laws, float(run["eps"]), P, eta=float(run["eta"]), c=float(run["c"]),
                            exponent=run["exponent"])
    dt = min(float(run["dt"]), T_lb / 4)
    traj = evolve_sw(q0, u0, laws, FriedrichsLevel(), T_lb, dt, record_every=10)
    reached = float(traj.times[-1])
    checks = {"stable_on_T_lb": (not traj.halted) and reached >= T_lb - dt}
    return ScenarioResult(cfg.scenario, all(checks.values()),
                          {"T_lb": T_lb, "reached": reached, "halt_reason": traj.halt_reason}, checks=checks)


def _run_stability(cfg, grid):
    P = build_partition(grid)
    run, tol = cfg.run, cfg.tolerances
    laws = cfg.laws()
    q0, u0 = _small_data(cfg, grid, P)
    level = FriedrichsLevel(run.get("level"))
    rep = stability_experiment(q0, u0, float(run["delta"]), laws, level, float(run["T"]), float(run["dt"]), P,
                               target=run["target"], bound=float(tol["amplification"]), gate=float(run["gate"]))
    zero = stability_experiment(q0, u0, 0.0, laws, level, float(run["T"]), float(run["dt"]), P,
                                target=run["target"])
    rows = [{"t": float(t), "X": float(x)} for t, x in zip(rep.times, rep.X)]
    checks = {"amplification": rep.passed, "determinism": bool(np.all(zero.X == 0))}
    return ScenarioResult(cfg.scenario, all(checks.values()),
                          {"amplification": rep.amplification, "initial_separation": rep.initial_separation,
                           "gate_value": rep.gate_value, "gate_ok": rep.gate_ok, "dq_sup": rep.dq_sup},
                          {"stability": (["t", "X"], rows)}, checks=checks)


def critical_norms(state, P):
    N = state.grid.dims
    return besov_norm(state.q, BesovSpec(N / 2.0), P), besov_norm(state.u, BesovSpec(N / 2.0 - 1), P)


def scaling_comparison(q0, u0, laws, lam, T, dt, record_every=5):
    """Run the original problem and the rescaled one on a torus ``lam`` times smaller.

    Returns the largest relative difference of the critical norms
    ``||q||_{B^{N/2}_{2,1}}`` and ``||u||_{B^{N/2-1}_{2,1}}`` at matching times.
    """
    grid = q0.grid
    small = make_grid(grid.dims, grid.points, grid.period / lam)
    qs = SpectralField(small, q0.values)
    us = SpectralField(small, u0.values * lam)
    a = evolve_sw(q0, u0, laws, FriedrichsLevel(), T, dt, record_every=record_every)
    b = evolve_sw(qs, us, laws.rescaled(lam), FriedrichsLevel(), T / lam**2, dt / lam**2,
                  record_every=record_every)
    Pa, Pb = build_partition(grid), build_partition(small)
    worst = 0.0
    for sa, sb in zip(a.items, b.items):
        for x, y in zip(critical_norms(sa, Pa), critical_norms(sb, Pb)):
            if x > 0:
                worst = max(worst, abs(y / x - 1))
    return worst, a, b


def _run_scaling(cfg, grid):
    run = cfg.run
    lam = float(run["lambda"])
    laws = cfg.laws()
    q0 = random_field(grid, cfg.seed, gamma=float(run["gamma"]), kmax=run.get("kmax"),
                      amplitude=float(run["amplitude"]))
    u0 = random_field(grid, cfg.seed + 1, gamma=float(run["gamma"]), kmax=run.get("kmax"), rank="vector",
                      amplitude=float(run["amplitude"]))
    worst, a, b = scaling_comparison(q0, u0, laws, lam, float(run["T"]), float(run["dt"]))
    ok = worst <= float(cfg.tolerances["relative"]) and not (a.halted or b.halted)
    return ScenarioResult(cfg.scenario, ok, {"max_relative_difference": worst, "lambda": lam},
                          checks={"critical_norms": ok})


def friedrichs_differences(q0, u0, laws, levels, T, dt, P, record_every=5):
    """``sup_t ||u_{n_{k+1}} - u_{n_k}||_{B^{N/2-1}} + ||q_{n_{k+1}} - q_{n_k}||_{B~^{N/2-1,N/2}}``."""
    N = q0.grid.dims
    runs = [evolve_sw(q0, u0, laws, FriedrichsLevel(n), T, dt, record_every=record_every) for n in levels]
    out = []
    for a, b in zip(runs[:-1], runs[1:]):
        diff = 0.0
        for sa, sb in zip(a.items, b.items):
            diff = max(diff, besov_norm(sb.u - sa.u, BesovSpec(N / 2.0 - 1), P)
                       + hybrid_norm(sb.q - sa.q, BesovSpec(N / 2.0 - 1, N / 2.0), P))
        out.append(diff)
    return out


def _run_convergence(cfg, grid):
    P = build_partition(grid)
    run = cfg.run
    laws = cfg.laws()
    q0 = random_field(grid, cfg.seed, gamma=float(run["gamma"]), kmax=run.get("kmax"),
                      amplitude=float(run["amplitude"]))
    u0 = random_field(grid, cfg.seed + 1, gamma=float(run["gamma"]), kmax=run.get("kmax"), rank="vector",
                      amplitude=float(run["amplitude"]))
    levels = [float(n) for n in run["levels"]]
    diffs = friedrichs_differences(q0, u0, laws, levels, float(run["T"]), float(run["dt"]), P)
    mono = all(b < a for a, b in zip(diffs[:-1], diffs[1:]))
    rows = [{"n_low": levels[i], "n_high": levels[i + 1], "difference": d} for i, d in enumerate(diffs)]
    return ScenarioResult(cfg.scenario, mono, {f"diff_{i}": d for i, d in enumerate(diffs)},
                          {"friedrichs": (["n_low", "n_high", "difference"], rows)}, checks={"monotone": mono})


_RUNNERS: Dict[str, Callable] = {
    "partition_check": _run_partition,
    "norm_suite": _run_norm_suite,
    "linear_damping": _run_damping,
    "linear_smoothing": _run_smoothing,
    "transport_estimate": _run_transport,
    "heat_estimate": _run_heat,
    "variable_heat": _run_variable_heat,
    "nonlinear_global": _run_global,
    "nonlinear_local": _run_local,
    "stability": _run_stability,
    "scaling_check": _run_scaling,
    "convergence_sweep": _run_convergence,
}


# Artifacts --------------------------------------------------------------------------

def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def _csv_text(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_fmt(row[c]) for c in columns])
    return buf.getvalue()


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else str(x)
    return x


def emit_artifacts(results: Sequence[ScenarioResult], output_dir, provenance: Optional[dict] = None) -> dict:
    """Write CSV tables, ``summary.txt``, ``report.json`` and ``manifest.json``.

    Returns the manifest, which maps every written file to its sha256.
    """
    os.makedirs(output_dir, exist_ok=True)
    written = []
    for res in results:
        prefix = "" if len(results) == 1 else f"{res.scenario}_"
        for name, (cols, rows) in sorted(res.tables.items()):
            fname = f"{prefix}{name}.csv"
            with open(os.path.join(output_dir, fname), "w", newline="") as fh:
                fh.write(_csv_text(cols, rows))
            written.append(fname)
        for name, (traj, params) in res.trajectories.items():
            sub = f"{prefix}{name}"
            save_trajectory(traj, os.path.join(output_dir, sub), params)
            written.extend(os.path.join(sub, f) for f in sorted(os.listdir(os.path.join(output_dir, sub))))
    lines = []
    for res in results:
        lines.append(f"{res.scenario}: {'PASS' if res.passed else 'FAIL'}")
        for k, v in res.checks.items():
            lines.append(f"  check {k}: {'pass' if v else 'fail'}")
        for k, v in res.metrics.items():
            lines.append(f"  {k} = {_fmt(v)}")
    if not results:
        lines.append("no results")
    with open(os.path.join(output_dir, "summary.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    written.append("summary.txt")
    if results or provenance:
        report = {
            "passed": all(r.passed for r in results),
            "results": [{"scenario": r.scenario, "passed": r.passed, "checks": r.checks, "metrics": r.metrics}
                        for r in results],
            "provenance": provenance or {},
        }
        with open(os.path.join(output_dir, "report.json"), "w") as fh:
            json.dump(_jsonable(report), fh, indent=2, sort_keys=True)
            fh.write("\n")
        written.append("report.json")
    manifest = {"files": {f: _sha256(os.path.join(output_dir, f)) for f in sorted(written)}}
    with open(os.path.join(output_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def provenance(cfg: ScenarioConfig, deterministic: bool) -> dict:
    return {
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "deterministic": deterministic,
        "versions": {"swbesov": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
    }


def load_config(path) -> ScenarioConfig:
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: invalid JSON ({exc})", "valid JSON") from exc
    return ScenarioConfig.from_dict(data)


def run_scenario(cfg: ScenarioConfig, *, deterministic: bool = False, output_dir: Optional[str] = None,
                 write: bool = True) -> RunArtifacts:
    """Validate, run and (optionally) persist one scenario."""
    grid = cfg.validate()
    previous = spectral._workers
    if deterministic:
        set_threads(1)
    try:
        t0 = time.perf_counter()
        result = _RUNNERS[cfg.scenario](cfg, grid)
        elapsed = time.perf_counter() - t0
    finally:
        set_threads(previous)
    prov = provenance(cfg, deterministic)
    prov["seconds"] = elapsed
    out = output_dir or cfg.output_dir
    manifest, files = {}, []
    if write:
        manifest = emit_artifacts([result], out, prov)
        files = list(manifest["files"])
    report = {"passed": result.passed, "scenario": cfg.scenario, "checks": result.checks,
              "metrics": result.metrics, "provenance": prov, "result": result}
    return RunArtifacts(report, files, manifest, out)


@dataclass
class ConvergenceTable:
    resolutions: List[int]
    metrics: Dict[str, List[float]]
    passed: List[bool]

    def ratios(self, key: str) -> List[float]:
        v = self.metrics[key]
        return [b / a if a else math.inf for a, b in zip(v[:-1], v[1:])]

    def differences(self, key: str) -> List[float]:
        v = self.metrics[key]
        return [abs(b - a) for a, b in zip(v[:-1], v[1:])]

    def rows(self):
        out = []
        for key in sorted(self.metrics):
            v = self.metrics[key]
            for i, n in enumerate(self.resolutions):
                out.append({"metric": key, "points_per_dim": n, "value": v[i],
                            "ratio_to_previous": (v[i] / v[i - 1] if i and v[i - 1] else math.nan)})
        return out


def compare_resolutions(cfg: ScenarioConfig, resolutions: Sequence[int], *, deterministic: bool = True,
                        output_dir: Optional[str] = None) -> ConvergenceTable:
    """Run ``cfg`` at several grid sizes and tabulate its numeric metrics."""
    resolutions = [int(n) for n in resolutions]
    if len(resolutions) < 2:
        raise ValidationError("compare_resolutions needs at least two resolutions", "len(resolutions)≥2")
    metrics: Dict[str, List[float]] = {}
    passed = []
    for n in resolutions:
        sub = cfg.with_overrides([f"grid.points_per_dim={n}"])
        art = run_scenario(sub, deterministic=deterministic, write=False)
        passed.append(art.passed)
        for k, v in art.report["metrics"].items():
            if isinstance(v, (int, float, np.floating, np.integer)) and not isinstance(v, bool):
                metrics.setdefault(k, []).append(float(v))
    metrics = {k: v for k, v in metrics.items() if len(v) == len(resolutions)}
    table = ConvergenceTable(resolutions, metrics, passed)
    if output_dir:
        os.makedirs(output_dir, exist_ok=True)
        res = ScenarioResult(cfg.scenario, all(passed), {},
                             {"convergence": (["metric", "points_per_dim", "value", "ratio_to_previous"],
                                              table.rows())})
        emit_artifacts([res], output_dir, provenance(cfg, deterministic))
    return table
