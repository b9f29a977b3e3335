"""Cluster-robust causal forests for heterogeneous treatment effects."""

from .causal import (
    CateEstimates,
    CausalForestModel,
    NuisanceEstimates,
    PipelineOptions,
    causal_split_responses,
    estimate_nuisances,
    fit_causal_forest,
    predict_cate,
    predict_cate_oob,
    r_loss,
    robinson_tau,
    run_pipeline,
    tune_parameters,
)
from .data import (
    ClusterIndex,
    Dataset,
    SchemaConfig,
    SchoolEffectSpec,
    build_cluster_index,
    load_csv,
    simulate_confounded,
    simulate_school_data,
    split_clusters_kfold,
)
from .forest import (
    Forest,
    ForestParams,
    Tree,
    draw_cluster_subsample,
    fit_regression_forest,
    grow_tree,
    kernel_weights,
    predict,
    predict_oob,
    variable_importance,
)
from .inference import (
    AteResult,
    CalibrationResult,
    DoublyRobustScores,
    TestResult,
    ate_cluster_robust,
    crossfit_cluster_evaluation,
    doubly_robust_scores,
    ols_hc,
    one_way_anova,
    school_level_forest_analysis,
    school_scores,
    subgroup_ate_by_median,
    test_calibration,
    variance_ratio,
    welch_t_test,
)

__version__ = "0.1.0"

__all__ = [
    "AteResult",
    "CalibrationResult",
    "CateEstimates",
    "CausalForestModel",
    "ClusterIndex",
    "Dataset",
    "DoublyRobustScores",
    "Forest",
    "ForestParams",
    "NuisanceEstimates",
    "PipelineOptions",
    "SchemaConfig",
    "SchoolEffectSpec",
    "TestResult",
    "Tree",
    "ate_cluster_robust",
    "build_cluster_index",
    "causal_split_responses",
    "crossfit_cluster_evaluation",
    "doubly_robust_scores",
    "draw_cluster_subsample",
    "estimate_nuisances",
    "fit_causal_forest",
    "fit_regression_forest",
    "grow_tree",
    "kernel_weights",
    "load_csv",
    "ols_hc",
    "one_way_anova",
    "predict",
    "predict_cate",
    "predict_cate_oob",
    "predict_oob",
    "r_loss",
    "robinson_tau",
    "run_pipeline",
    "school_level_forest_analysis",
    "school_scores",
    "simulate_confounded",
    "simulate_school_data",
    "split_clusters_kfold",
    "subgroup_ate_by_median",
    "test_calibration",
    "tune_parameters",
    "variable_importance",
    "variance_ratio",
    "welch_t_test",
]
