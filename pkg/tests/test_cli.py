"""Command-line interface: exit codes, wrapper fidelity, determinism."""

import json

import numpy as np
import pandas as pd
import pytest
from click.testing import CliRunner

from seqtrial.cli import main
from seqtrial.datamodel import write_csv
from seqtrial.expansion import expand
from seqtrial.msm import MsmSpec
from seqtrial.pipeline import PipelineSpec, run_pipeline
from seqtrial.simulation import Scenario, generate
from seqtrial.weights import WeightModelSpec

CONFIG = """\
schema:
  id: patient_id
  tv_covariates: [x1]
  static_covariates: [x2]
weights:
  denominator_covariates: [x1, x2]
  censoring: false
msm:
  baseline_covariates: [x1, x2]
resample:
  n_boot: 20
  n_draws: 20
  seed: 5
"""


@pytest.fixture
def workspace(tmp_path):
    ds = generate(Scenario(n_patients=120), 42)
    data = tmp_path / "data.csv"
    write_csv(ds, data)
    config = tmp_path / "config.yml"
    config.write_text(CONFIG)
    return tmp_path, str(config), str(data), ds


def run(args, env=None):
    return CliRunner().invoke(main, args, env=env, catch_exceptions=False)


class TestValidate:
    def test_clean_data_exit_zero(self, workspace):
        _, config, data, _ = workspace
        r = run(["validate", "--config", config, "--data", data])
        assert r.exit_code == 0
        assert "ok" in r.output

    def test_structural_finding_exit_one(self, workspace):
        tmp, config, data, _ = workspace
        frame = pd.read_csv(data)
        frame.loc[frame.index[-1], "visit"] = 99  # break consecutiveness
        bad = tmp / "bad.csv"
        frame.to_csv(bad, index=False)
        r = run(["validate", "--config", config, "--data", str(bad)])
        assert r.exit_code == 1
        assert "consecutive" in r.output

    def test_unknown_config_key_exit_two(self, workspace):
        tmp, _, data, _ = workspace
        cfg = tmp / "broken.yml"
        cfg.write_text(CONFIG + "bogus_section: {}\n")
        r = run(["validate", "--config", str(cfg), "--data", data])
        assert r.exit_code == 2
        assert "bogus_section" in r.output


class TestWrapperFidelity:
    def test_expand_matches_library(self, workspace):
        tmp, config, data, ds = workspace
        out = tmp / "expanded.csv"
        r = run(["expand", "--config", config, "--data", data, "--out", str(out)])
        assert r.exit_code == 0
        assert len(pd.read_csv(out)) == len(expand(ds).rows)

    def test_weights_writes_rows_and_summary(self, workspace):
        tmp, config, data, _ = workspace
        out = tmp / "weights.csv"
        r = run(["weights", "--config", config, "--data", data, "--out", str(out)])
        assert r.exit_code == 0
        rows = pd.read_csv(out)
        assert {"sw_a", "sw_c", "sw"} <= set(rows.columns)
        summary = pd.read_csv(tmp / "weights.summary.csv")
        assert list(summary["weight"]) == ["sw_a", "sw_c", "sw"]

    def test_fit_writes_coefficient_table(self, workspace):
        tmp, config, data, _ = workspace
        out = tmp / "fit.csv"
        r = run(["fit", "--config", config, "--data", data, "--out", str(out)])
        assert r.exit_code == 0
        table = pd.read_csv(out)
        assert list(table.columns) == ["term", "estimate", "robust_se"]
        assert len(table) > 0

    def test_mrd_matches_library_pipeline(self, workspace):
        tmp, config, data, ds = workspace
        out = tmp / "mrd.csv"
        r = run(["mrd", "--config", config, "--data", data, "--out", str(out)])
        assert r.exit_code == 0
        got = pd.read_csv(out)
        spec = PipelineSpec(
            weight_spec=WeightModelSpec(
                denominator_covariates=("x1", "x2"), censoring=False
            ),
            msm_spec=MsmSpec(baseline_covariates=("x1", "x2")),
        )
        expected = run_pipeline(ds, spec).mrd.values
        np.testing.assert_allclose(got["mrd"].to_numpy(), expected, atol=1e-12)


class TestCi:
    def test_all_methods_block_structure(self, workspace):
        tmp, config, data, _ = workspace
        out = tmp / "ci.json"
        r = run(["ci", "--config", config, "--data", data, "--out", str(out)])
        assert r.exit_code == 0
        payload = json.loads(out.read_text())
        assert payload["schema_version"] == 1
        assert len(payload["methods"]) == 6

    def test_seed_determinism_and_env_override(self, workspace):
        tmp, config, data, _ = workspace
        args = ["ci", "--config", config, "--data", data,
                "--method", "boot", "-B", "15"]
        out1, out2, out3 = (tmp / f"ci{i}.json" for i in range(3))
        assert run(args + ["--out", str(out1), "--seed", "7"]).exit_code == 0
        assert run(args + ["--out", str(out2), "--seed", "7"]).exit_code == 0
        assert out1.read_text() == out2.read_text()
        r = run(args + ["--out", str(out3)], env={"SEQTRIAL_SEED": "8"})
        assert r.exit_code == 0
        assert json.loads(out3.read_text())["seed"] == 8
        assert out3.read_text() != out1.read_text()


class TestTruth:
    def test_curve_written(self, tmp_path):
        out = tmp_path / "truth.json"
        r = run(["truth", "--scenario", "0", "--N", "20000", "--out", str(out)])
        assert r.exit_code == 0
        payload = json.loads(out.read_text())
        assert len(payload["mrd"]) == 5
        assert payload["n_mc"] == 20000

    def test_index_out_of_range_exit_two(self, tmp_path):
        r = run(["truth", "--scenario", "999", "--out", str(tmp_path / "x.json")])
        assert r.exit_code == 2


class TestStudy:
    def test_custom_grid_runs_and_writes_metrics(self, tmp_path):
        grid = tmp_path / "grid.json"
        grid.write_text(json.dumps([{"n_patients": 100}]))
        out = tmp_path / "study"
        r = run([
            "study", "--grid", str(grid), "--nsim", "3", "-B", "6", "-S", "6",
            "--N", "5000", "--method", "sandwich", "--out", str(out),
        ])
        assert r.exit_code == 0
        table = pd.read_csv(out / "study_metrics.csv")
        assert len(table) == 5  # one method x five visits
        meta = json.loads((out / "study_meta.json").read_text())
        assert meta["n_sim"] == 3
