import csv
import json
import math
import os

import numpy as np
import pytest

from swbesov import spectral
from swbesov.errors import ValidationError
from swbesov.harness import (
    SCENARIOS,
    ScenarioConfig,
    ScenarioResult,
    compare_resolutions,
    emit_artifacts,
    load_config,
    run_scenario,
)

CONFIG_DIR = os.path.join(os.path.dirname(__file__), os.pardir, "configs")

# Reduced settings so each scenario finishes in a few seconds.
FAST = {
    "partition_check": [],
    "norm_suite": ["grid.points_per_dim=32", "run.n_fields=5"],
    "linear_damping": ["grid.points_per_dim=64", "run.n_states=2", "run.T=2.0"],
    "linear_smoothing": ["grid.points_per_dim=32", "run.n_states=2", "run.samples=60"],
    "transport_estimate": ["grid.points_per_dim=32", "run.flow=\"shear\"", "run.T=0.5"],
    "heat_estimate": ["grid.points_per_dim=32"],
    "variable_heat": ["run.T=0.2"],
    "nonlinear_global": ["grid.points_per_dim=32", "run.T=0.5", "run.kmax=6"],
    "nonlinear_local": ["grid.points_per_dim=32", "run.kmax=6"],
    "stability": ["grid.points_per_dim=32", "run.T=0.3", "run.kmax=6"],
    "scaling_check": ["grid.points_per_dim=32", "run.T=0.2", "run.kmax=6"],
    "convergence_sweep": ["grid.points_per_dim=32", "run.T=0.2", "run.kmax=6"],
}


def fast(name, *extra):
    return ScenarioConfig.from_dict({"scenario": name}).with_overrides(FAST[name] + list(extra))


class TestConfig:
    def test_every_scenario_has_a_shipped_config(self):
        for name in SCENARIOS:
            assert load_config(os.path.join(CONFIG_DIR, f"{name}.json")).scenario == name

    def test_overrides_parse_json(self):
        cfg = fast("heat_estimate", "physics.kappa=0.1", "run.s=\"x\"", "tolerances.new=[1, 2]")
        assert cfg.physics["kappa"] == 0.1 and cfg.run["s"] == "x" and cfg.tolerances["new"] == [1, 2]

    def test_hash_changes_with_content(self):
        a = ScenarioConfig.from_dict({"scenario": "heat_estimate"})
        assert a.config_hash() == ScenarioConfig.from_dict({"scenario": "heat_estimate"}).config_hash()
        assert a.config_hash() != a.with_overrides(["seed=1"]).config_hash()

    @pytest.mark.parametrize("data", [{"scenario": "nope"}, {"scenario": "heat_estimate", "colour": 1}])
    def test_rejected(self, data):
        with pytest.raises(ValidationError):
            ScenarioConfig.from_dict(data)

    def test_capillary_sign_named(self):
        cfg = ScenarioConfig.from_dict({"scenario": "linear_damping", "physics": {"delta": 0.2, "kappa": 0.5}})
        with pytest.raises(ValidationError) as exc:
            run_scenario(cfg, write=False)
        assert exc.value.inequality == "δ̄−κ̄‖φ̂‖_{L^∞}≥c>0"

    def test_nonlinear_laws_checked(self):
        with pytest.raises(ValidationError) as exc:
            fast("stability", "physics.mu_coef=-1").validate()
        assert exc.value.inequality == "μ(ρ̄)>0"

    def test_time_step_positive(self):
        with pytest.raises(ValidationError):
            fast("nonlinear_global", "run.dt=0").validate()

    def test_bad_json(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text("{")
        with pytest.raises(ValidationError):
            load_config(p)


class TestScenarios:
    @pytest.mark.parametrize("name", SCENARIOS)
    def test_runs_and_passes(self, name, tmp_path):
        art = run_scenario(fast(name), deterministic=True, output_dir=str(tmp_path))
        assert art.passed, art.report["checks"]
        assert "manifest.json" in os.listdir(tmp_path)
        report = json.loads((tmp_path / "report.json").read_text())
        assert report["provenance"]["seed"] == 0 and len(report["provenance"]["config_hash"]) == 64

    def test_partition_full_size(self):
        art = run_scenario(ScenarioConfig.from_dict({"scenario": "partition_check"}), write=False)
        assert art.passed and art.report["metrics"]["max_deviation"] < 1e-12

    def test_threads_restored(self, tmp_path):
        before = spectral._workers
        run_scenario(fast("heat_estimate"), deterministic=True, write=False)
        assert spectral._workers == before


class TestArtifacts:
    def test_empty_results(self, tmp_path):
        manifest = emit_artifacts([], tmp_path)
        assert list(manifest["files"]) == ["summary.txt"]
        assert sorted(os.listdir(tmp_path)) == ["manifest.json", "summary.txt"]

    def test_damping_csv_schema(self, tmp_path):
        run_scenario(fast("linear_damping"), output_dir=str(tmp_path))
        with open(tmp_path / "damping.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["l", "f_l(0)", "rate_fit", "rate_bound", "pass"]
        assert {r[4] for r in rows[1:]} <= {"true", "false"}
        with open(tmp_path / "damping_states.csv") as fh:
            assert next(csv.reader(fh))[0] == "state"

    def test_manifest_checksums(self, tmp_path):
        import hashlib
        manifest = emit_artifacts([ScenarioResult("x", True, {"a": 1.0}, {"t": (["a"], [{"a": 0.5}])})], tmp_path)
        for name, digest in manifest["files"].items():
            assert hashlib.sha256((tmp_path / name).read_bytes()).hexdigest() == digest

    @pytest.mark.parametrize("name", ["linear_damping", "nonlinear_global"])
    def test_deterministic_reruns_identical(self, name, tmp_path):
        a = run_scenario(fast(name), deterministic=True, output_dir=str(tmp_path / "a"))
        b = run_scenario(fast(name), deterministic=True, output_dir=str(tmp_path / "b"))
        csvs = [f for f in a.manifest["files"] if f.endswith(".csv")]
        assert csvs
        assert all(a.manifest["files"][f] == b.manifest["files"][f] for f in csvs)


class TestResolutions:
    def test_single_resolution_rejected(self):
        with pytest.raises(ValidationError):
            compare_resolutions(fast("heat_estimate"), [64])

    def test_heat_single_mode_spectrally_exact(self, tmp_path):
        table = compare_resolutions(fast("heat_estimate"), [64, 128, 256], output_dir=str(tmp_path))
        decay = table.metrics["single_mode_decay"]
        assert max(decay) - min(decay) < 1e-12
        assert decay[0] == pytest.approx(math.exp(-9.0), rel=1e-12)
        assert (tmp_path / "convergence.csv").exists()
        assert len(table.ratios("single_mode_decay")) == 2
        assert np.allclose(table.differences("single_mode_decay"), 0, atol=1e-12)
