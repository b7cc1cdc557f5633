"""Command-line interface over the estimation pipeline and study harness.

Exit codes: 0 success, 1 validation findings, 2 argument/config errors,
3 construction failure (an unfittable model or unconstructable interval).
Environment variables SEQTRIAL_SEED and SEQTRIAL_THREADS override the seed
and thread count only; everything else lives in the config file.
"""

from __future__ import annotations

import json
import os
import sys
from pathlib import Path

import click
import numpy as np
import pandas as pd

from . import datamodel, expansion, weights as weights_mod
from .config import Config, ConfigError, load_config
from .inference import METHODS, compute_ci
from .msm import estimate_mrd, fit_msm
from .pipeline import PipelineFailure, run_pipeline
from .simulation import Scenario, scenario_grid, true_mrd
from .study import SCHEMA_VERSION, StudySettings, default_pipeline_spec, run_study
from . import glm

EXIT_OK = 0
EXIT_FINDINGS = 1
EXIT_ARGS = 2
EXIT_CONSTRUCTION = 3


def _env_int(name: str, default: int | None) -> int | None:
    raw = os.environ.get(name)
    if raw is None:
        return default
    try:
        return int(raw)
    except ValueError:
        raise click.UsageError(f"{name} must be an integer, got {raw!r}")


def _load(config_path, data_path, check=True):
    try:
        cfg = load_config(config_path)
    except (ConfigError, OSError, ValueError) as err:
        raise click.UsageError(f"config {config_path}: {err}")
    try:
        ds = datamodel.load_csv(data_path, cfg.schema, check=check)
    except (datamodel.SchemaError, datamodel.ValueDomainError) as err:
        raise click.UsageError(f"data {data_path}: {err}")
    except datamodel.StructureError as err:
        click.echo(f"validation: {err}", err=True)
        sys.exit(EXIT_FINDINGS)
    return cfg, ds


def _write_json(path: Path, payload: dict) -> None:
    payload = {"schema_version": SCHEMA_VERSION, **payload}
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


@click.group()
def main() -> None:
    """Sequential-trial-emulation pipeline for survival outcomes."""


_config_opt = click.option(
    "--config", "config_path", required=True, type=click.Path(exists=True)
)
_data_opt = click.option(
    "--data", "data_path", required=True, type=click.Path(exists=True)
)
_out_opt = click.option("--out", "out_path", required=True, type=click.Path())


@main.command()
@_config_opt
@_data_opt
def validate(config_path, data_path) -> None:
    """Check the dataset's structural invariants; exit 1 on findings."""
    cfg, ds = _load(config_path, data_path, check=False)
    try:
        for col in ("treatment", "outcome", "censored"):
            datamodel._check_binary(ds.visits, col)
    except datamodel.ValueDomainError as err:
        click.echo(str(err))
        sys.exit(EXIT_FINDINGS)
    report = datamodel.validate(ds)
    if report.ok:
        click.echo(f"ok: {ds.n_patients} patients, {len(ds.visits)} rows")
        sys.exit(EXIT_OK)
    for f in report.findings:
        where = f"patient {f.patient_id}" + ("" if f.visit is None else f" visit {f.visit}")
        click.echo(f"{where}: {f.message}")
    sys.exit(EXIT_FINDINGS)


@main.command()
@_config_opt
@_data_opt
@_out_opt
def expand(config_path, data_path, out_path) -> None:
    """Write the pooled sequential-trials expansion as CSV."""
    cfg, ds = _load(config_path, data_path)
    ex = expansion.expand(ds)
    ex.rows.to_csv(out_path, index=False)
    click.echo(f"wrote {len(ex.rows)} rows to {out_path}")


@main.command("weights")
@_config_opt
@_data_opt
@_out_opt
def weights_cmd(config_path, data_path, out_path) -> None:
    """Write the weighted expansion CSV plus a weight summary CSV."""
    cfg, ds = _load(config_path, data_path)
    models = weights_mod.fit_weight_models(ds, cfg.pipeline.weight_spec)
    wx = weights_mod.compute_weights(expansion.expand(ds), models)
    wx.rows.to_csv(out_path, index=False)
    summary_path = Path(out_path).with_suffix(".summary.csv")
    weights_mod.weight_summary(wx).to_csv(summary_path, index=False)
    click.echo(
        f"wrote {len(wx.rows)} rows to {out_path} "
        f"({wx.diagnostics.n_excluded_rows} excluded); summary in {summary_path}"
    )


@main.command()
@_config_opt
@_data_opt
@_out_opt
def fit(config_path, data_path, out_path) -> None:
    """Fit the weighted pooled hazard model; write coefficients + robust SEs."""
    cfg, ds = _load(config_path, data_path)
    models = weights_mod.fit_weight_models(ds, cfg.pipeline.weight_spec)
    wx = weights_mod.compute_weights(expansion.expand(ds), models)
    msm_fit = fit_msm(wx, cfg.pipeline.msm_spec)
    if not msm_fit.fit.converged:
        click.echo("outcome model did not converge", err=True)
        sys.exit(EXIT_CONSTRUCTION)
    if isinstance(msm_fit.sandwich, glm.ConstructionFailure):
        se = [None] * len(msm_fit.column_names)
        note = msm_fit.sandwich.reason
    else:
        se = np.sqrt(np.diag(msm_fit.sandwich)).tolist()
        note = None
    table = pd.DataFrame(
        {
            "term": msm_fit.column_names,
            "estimate": msm_fit.beta,
            "robust_se": se,
        }
    )
    table.to_csv(out_path, index=False)
    if note:
        click.echo(f"robust variance unavailable: {note}", err=True)
    click.echo(f"wrote {len(table)} coefficients to {out_path}")


@main.command()
@_config_opt
@_data_opt
@_out_opt
def mrd(config_path, data_path, out_path) -> None:
    """Estimate the marginal risk-difference curve; write it as CSV."""
    cfg, ds = _load(config_path, data_path)
    try:
        result = run_pipeline(ds, cfg.pipeline)
    except PipelineFailure as err:
        click.echo(str(err), err=True)
        sys.exit(EXIT_CONSTRUCTION)
    result.mrd.to_frame().to_csv(out_path, index=False)
    click.echo(f"wrote {len(result.mrd.visits)} visits to {out_path}")


@main.command()
@_config_opt
@_data_opt
@_out_opt
@click.option(
    "--method",
    type=click.Choice(list(METHODS) + ["all"]),
    default="all",
    show_default=True,
)
@click.option("-B", "n_boot", type=int, default=None, help="bootstrap replicates")
@click.option("-S", "n_draws", type=int, default=None, help="normal-sampling draws")
@click.option("--seed", type=int, default=None)
def ci(config_path, data_path, out_path, method, n_boot, n_draws, seed) -> None:
    """Construct confidence intervals; write one JSON block per method."""
    cfg, ds = _load(config_path, data_path)
    seed = _env_int("SEQTRIAL_SEED", seed if seed is not None else cfg.resample.seed)
    n_boot = n_boot if n_boot is not None else cfg.resample.n_boot
    n_draws = n_draws if n_draws is not None else cfg.resample.n_draws
    methods = list(METHODS) if method == "all" else [method]
    try:
        result = run_pipeline(ds, cfg.pipeline)
    except PipelineFailure as err:
        click.echo(str(err), err=True)
        sys.exit(EXIT_CONSTRUCTION)
    blocks = []
    any_failure = False
    for m in methods:
        res = compute_ci(result, m, n_boot=n_boot, n_draws=n_draws, seed=seed)
        any_failure = any_failure or not res.ok
        blocks.append(
            {
                "method": m,
                "failure": res.failure,
                "n_replicates_failed": res.n_replicates_failed,
                "rows": res.to_records(),
            }
        )
    _write_json(Path(out_path), {"seed": seed, "methods": blocks})
    click.echo(f"wrote {len(blocks)} method block(s) to {out_path}")
    if any_failure and len(methods) == 1:
        sys.exit(EXIT_CONSTRUCTION)


@main.command()
@click.option("--scenario", type=int, required=True, help="index into the preset grid")
@click.option("--N", "n_mc", type=int, default=1_000_000, show_default=True)
@click.option("--seed", type=int, default=20_240_101, show_default=True)
@_out_opt
def truth(scenario, n_mc, seed, out_path) -> None:
    """Monte Carlo true risk-difference curve for one preset scenario."""
    grid = scenario_grid()
    if not 0 <= scenario < len(grid):
        raise click.UsageError(
            f"--scenario must be in [0, {len(grid) - 1}], got {scenario}"
        )
    sc = grid[scenario]
    curve = true_mrd(sc, n_mc=n_mc, seed=seed)
    _write_json(
        Path(out_path),
        {
            "scenario_index": scenario,
            "scenario": {
                "n_patients": sc.n_patients,
                "outcome_intercept": sc.outcome_intercept,
                "treatment_intercept": sc.treatment_intercept,
                "confounding": sc.confounding,
            },
            "n_mc": n_mc,
            "seed": seed,
            "mrd": curve.tolist(),
        },
    )
    click.echo(f"wrote truth curve to {out_path}")


@main.command()
@click.option("--grid", "grid_path", type=click.Path(exists=True), default=None,
              help="JSON list of scenario objects; default is the full preset grid")
@click.option("--nsim", type=int, default=211, show_default=True)
@click.option("--seed", type=int, default=2024, show_default=True)
@click.option("--threads", type=int, default=1, show_default=True)
@click.option("-B", "n_boot", type=int, default=500, show_default=True)
@click.option("-S", "n_draws", type=int, default=500, show_default=True)
@click.option("--N", "truth_mc", type=int, default=1_000_000, show_default=True)
@click.option("--method", "methods", multiple=True,
              type=click.Choice(list(METHODS) + ["all"]), default=("all",))
@click.option("--out", "out_dir", required=True, type=click.Path())
def study(grid_path, nsim, seed, threads, n_boot, n_draws, truth_mc, methods, out_dir) -> None:
    """Run the Monte Carlo study; write metric CSV and metadata JSON."""
    seed = _env_int("SEQTRIAL_SEED", seed)
    threads = _env_int("SEQTRIAL_THREADS", threads)
    if grid_path is None:
        scenarios = scenario_grid()
    else:
        try:
            entries = json.loads(Path(grid_path).read_text())
            scenarios = [Scenario(**e) for e in entries]
        except (ValueError, TypeError) as err:
            raise click.UsageError(f"--grid {grid_path}: {err}")
    if "all" in methods:
        method_tuple = METHODS
    else:
        method_tuple = tuple(dict.fromkeys(methods))
    settings = StudySettings(
        n_sim=nsim,
        n_boot=n_boot,
        n_draws=n_draws,
        master_seed=seed,
        methods=method_tuple,
        truth_mc=truth_mc,
        threads=threads,
        cache_dir=str(Path(out_dir) / "truth_cache"),
    )
    table = run_study(scenarios, settings, out_dir=out_dir)
    click.echo(
        f"wrote {len(table)} metric rows for {len(scenarios)} scenario(s) to {out_dir}"
    )


if __name__ == "__main__":
    main()
