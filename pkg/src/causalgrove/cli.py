"""Command-line interface.

Exit codes: 0 success, 2 configuration error, 3 data error,
4 numerical or inference error. Failures print a structured error JSON
to stderr.
"""

from __future__ import annotations

import json
import sys
from dataclasses import replace

import click

from .data import SchoolEffectSpec
from .errors import CausalGroveError, ConfigError, DataError, NumericalError
from .workflows import (
    AnalysisConfig,
    RunConfig,
    SchemaConfig,
    ablation,
    analyze,
    load_config,
    load_dataset,
    school_analysis,
    simulate,
)

_EXIT_CONFIG, _EXIT_DATA, _EXIT_NUMERIC = 2, 3, 4


def _fail(exc: Exception, code: int) -> None:
    doc = {"error": {"type": type(exc).__name__, "message": str(exc)}}
    click.echo(json.dumps(doc), err=True)
    sys.exit(code)


def _run_guarded(fn):
    try:
        return fn()
    except ConfigError as exc:
        _fail(exc, _EXIT_CONFIG)
    except DataError as exc:
        _fail(exc, _EXIT_DATA)
    except NumericalError as exc:
        _fail(exc, _EXIT_NUMERIC)
    except CausalGroveError as exc:
        _fail(exc, _EXIT_NUMERIC)
    except OSError as exc:
        _fail(exc, _EXIT_DATA)


def _build_config(config_path, seed, out, no_cluster, trivial_propensity,
                  folds, jobs) -> RunConfig:
    if config_path is not None:
        config = load_config(config_path)
    else:
        config = RunConfig(schema=SchemaConfig("Y", "W", "cluster"),
                           analysis=AnalysisConfig())
    if seed is not None:
        config.seed = seed
        config.forest = replace(config.forest, seed=seed)
    if out is not None:
        config.output_dir = out
    if no_cluster:
        config.analysis.clustering = False
    if trivial_propensity:
        config.analysis.trivial_propensity = True
    if folds is not None:
        config.analysis.folds = folds
    if jobs is not None:
        config.n_jobs = jobs
    return config


def _common_options(fn):
    fn = click.option("--data", "data_path", required=True,
                      type=click.Path(), help="Input data CSV.")(fn)
    fn = click.option("--config", "config_path", type=click.Path(),
                      help="JSON run configuration.")(fn)
    fn = click.option("--seed", type=int, default=None, help="Master seed.")(fn)
    fn = click.option("--out", type=click.Path(), default=None,
                      help="Output directory.")(fn)
    fn = click.option("--no-cluster", is_flag=True,
                      help="Disable cluster-aware subsampling and OOB logic.")(fn)
    fn = click.option("--trivial-propensity", is_flag=True,
                      help="Use w_hat = mean(W) instead of a propensity forest.")(fn)
    fn = click.option("--folds", type=int, default=None,
                      help="Folds for cross-fit evaluation.")(fn)
    fn = click.option("--jobs", type=int, default=None,
                      help="Parallel workers (-1 = all cores).")(fn)
    return fn


@click.group()
def main():
    """Cluster-robust causal forest analyses."""


@main.command("simulate")
@click.option("--kind", type=click.Choice(["school", "confounded"]),
              required=True)
@click.option("--out", type=click.Path(), required=True,
              help="Output directory for data and oracle CSVs.")
@click.option("--seed", type=int, default=0)
@click.option("--n", type=int, default=1000, help="Samples (confounded kind).")
@click.option("--p", type=int, default=10, help="Covariates (confounded kind).")
@click.option("--clusters", type=int, default=76, help="Clusters (school kind).")
@click.option("--mean-size", type=int, default=137,
              help="Mean cluster size (school kind).")
@click.option("--base-effect", type=float, default=0.25)
@click.option("--effect-step", type=float, default=0.0)
@click.option("--school-effect-slope", type=float, default=0.0)
@click.option("--main-effect-sd", type=float, default=0.0)
@click.option("--cluster-effect-sd", type=float, default=0.0)
@click.option("--noise-sd", type=float, default=1.0)
@click.option("--propensity", type=float, default=0.5)
@click.option("--propensity-slope", type=float, default=0.0)
@click.option("--size-spread", type=float, default=0.0)
def cmd_simulate(kind, out, seed, n, p, clusters, mean_size, base_effect,
                 effect_step, school_effect_slope, main_effect_sd,
                 cluster_effect_sd, noise_sd, propensity, propensity_slope,
                 size_spread):
    """Write a simulated dataset and its ground-truth sidecar."""
    def run():
        spec = SchoolEffectSpec(
            base_effect=base_effect, effect_step=effect_step,
            school_effect_slope=school_effect_slope,
            main_effect_sd=main_effect_sd, cluster_effect_sd=cluster_effect_sd,
            noise_sd=noise_sd, propensity=propensity,
            propensity_slope=propensity_slope, cluster_size_spread=size_spread)
        summary = simulate(kind, out, seed, n=n, p=p, clusters=clusters,
                           mean_cluster_size=mean_size, effect_spec=spec)
        click.echo(json.dumps(summary))
    _run_guarded(run)


@main.command("analyze")
@_common_options
def cmd_analyze(data_path, config_path, seed, out, no_cluster,
                trivial_propensity, folds, jobs):
    """Full pipeline: ATE, heterogeneity tests, importances, plot CSVs."""
    def run():
        config = _build_config(config_path, seed, out, no_cluster,
                               trivial_propensity, folds, jobs)
        d = load_dataset(data_path, config)
        report = analyze(d, config)
        click.echo(json.dumps({"ate": report["ate"],
                               "report": f"{config.output_dir}/report.json"}))
    _run_guarded(run)


@main.command("ablation")
@click.option("--mode", type=click.Choice(["no-cluster", "no-propensity",
                                           "crossfit"]), required=True)
@_common_options
def cmd_ablation(mode, data_path, config_path, seed, out, no_cluster,
                 trivial_propensity, folds, jobs):
    """Compare the pipeline against a variant with one feature disabled."""
    def run():
        config = _build_config(config_path, seed, out, no_cluster,
                               trivial_propensity, folds, jobs)
        d = load_dataset(data_path, config)
        report = ablation(d, config, mode)
        summary = {"mode": mode, "report": f"{config.output_dir}/report.json"}
        if "variance_ratio_variant_over_baseline" in report:
            summary["variance_ratio"] = report["variance_ratio_variant_over_baseline"]
        click.echo(json.dumps(summary))
    _run_guarded(run)


@main.command("school-analysis")
@_common_options
def cmd_school_analysis(data_path, config_path, seed, out, no_cluster,
                        trivial_propensity, folds, jobs):
    """Cluster-level effect analysis: forest, calibration, robust OLS."""
    def run():
        config = _build_config(config_path, seed, out, no_cluster,
                               trivial_propensity, folds, jobs)
        d = load_dataset(data_path, config)
        report = school_analysis(d, config)
        click.echo(json.dumps(
            {"ate": report["ate"],
             "report": f"{config.output_dir}/school_report.json"}))
    _run_guarded(run)


if __name__ == "__main__":
    main()
