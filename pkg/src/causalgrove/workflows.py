"""End-to-end analysis workflows behind the command-line interface.

Each workflow returns a JSON-serializable report dictionary and writes
plot-ready CSVs next to it, so any plotting tool can regenerate the
figures (effect histogram, per-school scores, paired ablation
estimates) without rerunning the analysis.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .causal import (
    CateEstimates,
    CausalForestModel,
    NuisanceEstimates,
    PipelineOptions,
    child_seed,
    default_tuning_grid,
    estimate_nuisances,
    fit_causal_forest,
    predict_cate_oob,
    run_pipeline,
    tune_parameters,
)
from .data import (
    Dataset,
    SchemaConfig,
    SchoolEffectSpec,
    build_cluster_index,
    load_csv,
    simulate_confounded,
    simulate_school_data,
    write_dataset_csv,
    write_oracle_csv,
)
from .errors import ConfigError, DegenerateSplitError, InferenceError, SchemaError
from .forest import ForestParams, variable_importance
from .inference import (
    AteResult,
    CalibrationResult,
    SubgroupResult,
    TestResult,
    ate_cluster_robust,
    crossfit_cluster_evaluation,
    doubly_robust_scores,
    ols_hc,
    one_way_anova,
    school_level_forest_analysis,
    school_scores,
    subgroup_ate_by_median,
    tercile_groups,
    test_calibration,
    variance_ratio,
    welch_t_test,
)

CALIBRATION_NOTE = ("heuristic test: formal large-sample guarantees for these "
                    "p-values are not established")


@dataclass
class AnalysisConfig:
    clustering: bool = True
    trivial_propensity: bool = False
    folds: int = 5
    tune_final: bool = True
    pilot_num_trees: int = 200
    final_samples_per_cluster: int | str = 50
    histogram_bins: int = 30
    school_columns: list[str] = field(default_factory=list)
    moderators: list[str] = field(default_factory=list)


@dataclass
class RunConfig:
    """Full run configuration; parseable from a JSON file."""

    schema: SchemaConfig
    forest: ForestParams = field(default_factory=ForestParams)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)
    seed: int = 0
    output_dir: str = "."
    n_jobs: int = -1


_SCHEMA_KEYS = {"outcome_column", "treatment_column", "cluster_column",
                "categorical_columns"}
_FOREST_KEYS = {"num_trees", "sample_fraction", "samples_per_cluster", "mtry",
                "min_node_size", "honesty_fraction", "alpha_child_share", "seed"}
_ANALYSIS_KEYS = {"clustering", "trivial_propensity", "folds", "tune_final",
                  "pilot_num_trees", "final_samples_per_cluster",
                  "histogram_bins", "school_columns", "moderators"}
_TOP_KEYS = {"schema", "forest", "analysis", "seed", "output_dir", "n_jobs"}


def _reject_unknown(doc: dict, allowed: set, where: str) -> None:
    unknown = set(doc) - allowed
    if unknown:
        raise ConfigError(f"unknown {where} keys: {sorted(unknown)}")


def config_from_dict(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("configuration must be a JSON object")
    _reject_unknown(doc, _TOP_KEYS, "configuration")
    schema_doc = doc.get("schema")
    if not isinstance(schema_doc, dict):
        raise ConfigError('configuration needs a "schema" object')
    _reject_unknown(schema_doc, _SCHEMA_KEYS, "schema")
    try:
        schema = SchemaConfig(
            outcome_column=schema_doc.get("outcome_column", "Y"),
            treatment_column=schema_doc.get("treatment_column", "W"),
            cluster_column=schema_doc.get("cluster_column"),
            categorical_columns=tuple(schema_doc.get("categorical_columns", ())))
    except SchemaError as exc:
        raise ConfigError(str(exc)) from exc
    forest_doc = dict(doc.get("forest", {}))
    _reject_unknown(forest_doc, _FOREST_KEYS, "forest")
    if "mtry" in forest_doc and forest_doc["mtry"] is not None:
        forest_doc["mtry"] = int(forest_doc["mtry"])
    forest = ForestParams(**forest_doc)
    analysis_doc = dict(doc.get("analysis", {}))
    _reject_unknown(analysis_doc, _ANALYSIS_KEYS, "analysis")
    analysis = AnalysisConfig(**analysis_doc)
    seed = doc.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError("seed must be a non-negative integer")
    return RunConfig(schema=schema, forest=replace(forest, seed=seed),
                     analysis=analysis, seed=seed,
                     output_dir=str(doc.get("output_dir", ".")),
                     n_jobs=int(doc.get("n_jobs", -1)))


def load_config(path) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return config_from_dict(doc)


def config_to_dict(config: RunConfig) -> dict:
    doc = asdict(config)
    doc["schema"]["categorical_columns"] = list(
        config.schema.categorical_columns)
    return doc


def _ate_dict(ate: AteResult) -> dict:
    return {"estimate": ate.estimate, "std_err": ate.std_err,
            "n_clusters": ate.n_clusters, "ci_low": ate.ci_low,
            "ci_high": ate.ci_high}


def _subgroup_dict(sub: SubgroupResult) -> dict:
    return {"high": _ate_dict(sub.high), "low": _ate_dict(sub.low),
            "difference": sub.difference,
            "difference_std_err": sub.difference_std_err,
            "ci_low": sub.ci_low, "ci_high": sub.ci_high}


def _calibration_dict(cal: CalibrationResult) -> dict:
    return {"mean_coef": cal.mean_coef, "mean_se": cal.mean_se,
            "mean_t": cal.mean_t, "mean_p": cal.mean_p,
            "diff_coef": cal.diff_coef, "diff_se": cal.diff_se,
            "diff_t": cal.diff_t, "diff_p": cal.diff_p,
            "degenerate": cal.degenerate, "n_used": cal.n_used,
            "n_clusters": cal.n_clusters, "note": CALIBRATION_NOTE}


def _test_dict(row: TestResult) -> dict:
    return {k: v for k, v in asdict(row).items() if v is not None}


def _pipeline_options(config: RunConfig) -> PipelineOptions:
    return PipelineOptions(
        params=replace(config.forest, seed=config.seed),
        clustering=config.analysis.clustering,
        trivial_propensity=config.analysis.trivial_propensity,
        tune_final=config.analysis.tune_final,
        pilot_num_trees=config.analysis.pilot_num_trees,
        final_samples_per_cluster=config.analysis.final_samples_per_cluster,
        n_jobs=config.n_jobs)


def _write_json(doc: dict, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _histogram_csv(cates: CateEstimates, bins: int, path: Path) -> None:
    values = cates.values()
    if values.size and np.ptp(values) > 0:
        counts, edges = np.histogram(values, bins=bins)
    else:
        center = float(values[0]) if values.size else 0.0
        counts, edges = np.histogram(values, bins=1,
                                     range=(center - 0.5, center + 0.5))
    pd.DataFrame({"bin_left": edges[:-1], "bin_right": edges[1:],
                  "count": counts}).to_csv(path, index=False)


def _school_scores_csv(d: Dataset, scores_j: np.ndarray,
                       cates: CateEstimates, path: Path) -> None:
    idx = build_cluster_index(d)
    mean_cate = []
    for members in idx.members:
        vals = cates.tau_oob[members]
        vals = vals[~np.isnan(vals)]
        mean_cate.append(float(vals.mean()) if vals.size else np.nan)
    pd.DataFrame({
        "cluster": [str(lab) for lab in idx.labels],
        "n_samples": idx.sizes,
        "dr_score": scores_j,
        "mean_cate": mean_cate,
    }).to_csv(path, index=False)


def _warnings_dict(model: CausalForestModel, cates: CateEstimates,
                   filled_cate: int) -> dict:
    return {
        "propensity_clipped": model.nuisances.clip_count,
        "y_hat_oob_filled": model.nuisances.y_fill_count,
        "w_hat_oob_filled": model.nuisances.w_fill_count,
        "empty_leaves": model.forest.empty_leaf_count,
        "missing_cate": cates.n_missing,
        "cate_filled_for_scores": filled_cate,
        "selection_fallback": model.selection_fallback,
    }


def _core_results(d: Dataset, model: CausalForestModel, cates: CateEstimates):
    idx = build_cluster_index(d)
    scores = doubly_robust_scores(d, model.nuisances, cates)
    ate = ate_cluster_robust(scores, idx)
    return idx, scores, ate


def analyze(d: Dataset, config: RunConfig) -> dict:
    """Run the full pipeline and write report.json plus plot CSVs."""
    out = Path(config.output_dir)
    model, cates = run_pipeline(d, _pipeline_options(config))
    idx, scores, ate = _core_results(d, model, cates)
    scores_j = school_scores(scores, idx)
    try:
        subgroup = _subgroup_dict(subgroup_ate_by_median(scores, idx, cates))
    except (DegenerateSplitError, InferenceError) as exc:
        # A degenerate median split is a report fact, not a failure.
        subgroup = {"skipped": str(exc)}
    calibration = test_calibration(d, model.nuisances, cates, idx)
    importance = variable_importance(model.forest)

    out.mkdir(parents=True, exist_ok=True)
    _histogram_csv(cates, config.analysis.histogram_bins, out / "cate_histogram.csv")
    _school_scores_csv(d, scores_j, cates, out / "school_scores.csv")

    report = {
        "tool": {"name": "causalgrove", "version": __version__},
        "config": config_to_dict(config),
        "data": {"n": d.n, "p": d.p, "n_clusters": d.n_clusters,
                 "feature_names": list(d.feature_names)},
        "nuisances": {"y_source": model.nuisances.y_source,
                      "w_source": model.nuisances.w_source},
        "ate": _ate_dict(ate),
        "subgroup_test": subgroup,
        "calibration": _calibration_dict(calibration),
        "cate_summary": _cate_summary(cates),
        "variable_importance": dict(zip(d.feature_names,
                                        importance.round(10).tolist())),
        "selected_features": [d.feature_names[j]
                              for j in model.selected_features.tolist()],
        "tuned_params": {
            "min_node_size": model.params.min_node_size,
            "sample_fraction": model.params.sample_fraction,
            "mtry": model.params.mtry,
            "samples_per_cluster": model.params.samples_per_cluster,
        },
        "warnings": _warnings_dict(model, cates, scores.filled_cate_count),
        "files": {"cate_histogram": "cate_histogram.csv",
                  "school_scores": "school_scores.csv"},
    }
    _write_json(report, out / "report.json")
    return report


def _cate_summary(cates: CateEstimates) -> dict:
    values = cates.values()
    return {"mean": float(values.mean()), "sd": float(values.std(ddof=1))
            if values.size > 1 else 0.0,
            "min": float(values.min()), "max": float(values.max()),
            "n_missing": cates.n_missing}


def _refit_variant(d: Dataset, model: CausalForestModel, config: RunConfig,
                   *, clustered: bool, nuisances: NuisanceEstimates,
                   seed_tag: int) -> tuple[CausalForestModel, CateEstimates]:
    """Refit the final forest with one ingredient changed.

    Reuses the baseline's selected features; parameters are re-tuned for
    the variant when tuning is enabled.
    """
    d_eff = d if clustered else d.without_clusters()
    base = replace(config.forest, seed=child_seed(config.seed, 100 + seed_tag))
    if clustered:
        base = replace(base,
                       samples_per_cluster=config.analysis.final_samples_per_cluster)
    subset = model.selected_features
    if config.analysis.tune_final:
        grid = default_tuning_grid(base, subset.size)
        tuning = tune_parameters(d_eff, nuisances, grid,
                                 config.analysis.pilot_num_trees,
                                 feature_subset=subset, n_jobs=config.n_jobs)
        params = replace(tuning.best_params, num_trees=base.num_trees,
                         seed=base.seed)
    else:
        params = base
    variant = fit_causal_forest(d_eff, nuisances, params,
                                feature_subset=subset, n_jobs=config.n_jobs)
    return variant, predict_cate_oob(variant)


def _ablation_pairs_csv(baseline: CateEstimates, variant: CateEstimates,
                        path: Path) -> None:
    pd.DataFrame({
        "sample": np.arange(baseline.tau_oob.size),
        "baseline_cate": baseline.tau_oob,
        "variant_cate": variant.tau_oob,
    }).to_csv(path, index=False)


def ablation(d: Dataset, config: RunConfig, mode: str) -> dict:
    """Rerun the analysis with one feature disabled and compare.

    Modes: "no-cluster" refits the final forest without cluster-aware
    subsampling or out-of-bag logic; "no-propensity" refits it with the
    trivial propensity model w_hat = mean(W); "crossfit" evaluates
    non-clustered forests on cluster-aligned held-out folds.
    """
    if mode not in ("no-cluster", "no-propensity", "crossfit"):
        raise ConfigError(f"unknown ablation mode {mode!r}")
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    model, cates = run_pipeline(d, _pipeline_options(config))
    idx, scores, ate = _core_results(d, model, cates)
    baseline_cal = test_calibration(d, model.nuisances, cates, idx)
    report = {
        "tool": {"name": "causalgrove", "version": __version__},
        "config": config_to_dict(config),
        "mode": mode,
        "baseline": {
            "ate": _ate_dict(ate),
            "calibration": _calibration_dict(baseline_cal),
            "cate_summary": _cate_summary(cates),
        },
    }

    if mode == "crossfit":
        crossfit_cal = crossfit_cluster_evaluation(
            d, model.nuisances, config.analysis.folds,
            replace(config.forest, seed=child_seed(config.seed, 103)),
            n_jobs=config.n_jobs)
        report["crossfit"] = {
            "folds": config.analysis.folds,
            "calibration": _calibration_dict(crossfit_cal),
        }
        _write_json(report, out / "report.json")
        return report

    if mode == "no-cluster":
        nuis_variant = model.nuisances
        variant, v_cates = _refit_variant(d, model, config, clustered=False,
                                          nuisances=nuis_variant, seed_tag=1)
    else:
        nuis_variant = estimate_nuisances(
            d if config.analysis.clustering else d.without_clusters(),
            config.forest, y_hat=model.nuisances.y_hat,
            trivial_propensity=True, n_jobs=config.n_jobs)
        variant, v_cates = _refit_variant(d, model, config, clustered=True,
                                          nuisances=nuis_variant, seed_tag=2)
    d_variant = d if mode == "no-propensity" else d.without_clusters()
    v_idx = build_cluster_index(d_variant)
    v_scores = doubly_robust_scores(d_variant, nuis_variant, v_cates)
    v_ate = ate_cluster_robust(v_scores, v_idx)
    v_cal = test_calibration(d_variant, nuis_variant, v_cates, v_idx)
    both = (~cates.missing) & (~v_cates.missing)
    ratio = None
    if both.sum() >= 2 and np.ptp(cates.tau_oob[both]) > 0:
        ratio = variance_ratio(v_cates.tau_oob[both], cates.tau_oob[both])
    _ablation_pairs_csv(cates, v_cates, out / "ablation_pairs.csv")
    report["variant"] = {
        "ate": _ate_dict(v_ate),
        "calibration": _calibration_dict(v_cal),
        "cate_summary": _cate_summary(v_cates),
    }
    report["variance_ratio_variant_over_baseline"] = ratio
    report["files"] = {"ablation_pairs": "ablation_pairs.csv"}
    _write_json(report, out / "report.json")
    return report


def _school_covariates(d: Dataset, columns: list[str]):
    """Per-cluster covariate matrix (within-cluster means of the columns).

    With no columns named, every feature that is constant within all
    clusters is treated as cluster-level.
    """
    idx = build_cluster_index(d)
    names = list(d.feature_names)
    if columns:
        missing = [c for c in columns if c not in names]
        if missing:
            raise SchemaError(f"school columns not in the data: {missing}")
        cols = [names.index(c) for c in columns]
    else:
        cols = []
        for j in range(d.p):
            constant = all(np.ptp(d.features[m, j]) == 0.0 for m in idx.members)
            if constant:
                cols.append(j)
        if not cols:
            raise SchemaError("no cluster-level feature columns found; name "
                              "them explicitly via analysis.school_columns")
    mat = np.column_stack([
        np.array([d.features[m, j].mean() for m in idx.members]) for j in cols])
    return mat, [names[j] for j in cols], idx


def school_analysis(d: Dataset, config: RunConfig) -> dict:
    """School-level heterogeneity analysis on per-cluster effect scores."""
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    model, cates = run_pipeline(d, _pipeline_options(config))
    idx, scores, ate = _core_results(d, model, cates)
    scores_j = school_scores(scores, idx)
    school_X, school_names, idx = _school_covariates(
        d, config.analysis.school_columns)

    forest_result = school_level_forest_analysis(
        school_X, scores_j,
        replace(config.forest, seed=child_seed(config.seed, 104)),
        n_jobs=config.n_jobs)
    ols_rows = ols_hc(scores_j, school_X, names=school_names)

    moderator_tests = {}
    for col in config.analysis.moderators:
        if col not in school_names:
            raise SchemaError(f"moderator column {col!r} is not a school column")
        values = school_X[:, school_names.index(col)]
        high = values > np.median(values)
        entry: dict = {}
        if high.sum() >= 2 and (~high).sum() >= 2:
            entry["median_split_welch"] = _test_dict(
                welch_t_test(scores_j[high], scores_j[~high]))
        else:
            entry["median_split_welch"] = {"skipped": "a side of the median "
                                           "split has fewer than 2 clusters"}
        groups = tercile_groups(values)
        if np.unique(groups).size >= 2:
            entry["tercile_anova"] = _test_dict(one_way_anova(scores_j, groups))
        else:
            entry["tercile_anova"] = {"skipped": "terciles are degenerate"}
        moderator_tests[col] = entry

    _school_scores_csv(d, scores_j, cates, out / "school_scores.csv")
    report = {
        "tool": {"name": "causalgrove", "version": __version__},
        "config": config_to_dict(config),
        "ate": _ate_dict(ate),
        "school_columns": school_names,
        "school_forest_calibration": _calibration_dict(forest_result.calibration),
        "ols_hc3": [_test_dict(r) for r in ols_rows],
        "moderator_tests": moderator_tests,
        "files": {"school_scores": "school_scores.csv"},
    }
    _write_json(report, out / "school_report.json")
    return report


def simulate(kind: str, out_dir, seed: int, *, n: int = 1000, p: int = 10,
             clusters: int = 76, mean_cluster_size: int = 137,
             effect_spec: SchoolEffectSpec | None = None) -> dict:
    """Write a simulated dataset plus its ground-truth sidecar as CSV."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if kind == "confounded":
        d, propensity, cate = simulate_confounded(n, p, seed)
        oracle: object = (propensity, cate)
    elif kind == "school":
        d, oracle = simulate_school_data(clusters, mean_cluster_size,
                                         effect_spec, seed)
    else:
        raise ConfigError(f"unknown simulation kind {kind!r}")
    data_path = out / f"{kind}_data.csv"
    oracle_path = out / f"{kind}_oracle.csv"
    write_dataset_csv(d, data_path)
    write_oracle_csv(oracle, oracle_path)
    return {"kind": kind, "n": d.n, "p": d.p, "n_clusters": d.n_clusters,
            "seed": seed, "data": str(data_path), "oracle": str(oracle_path)}


def load_dataset(data_path, config: RunConfig) -> Dataset:
    return load_csv(data_path, config.schema)
