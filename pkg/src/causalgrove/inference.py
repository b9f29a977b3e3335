"""Doubly-robust effect inference and heterogeneity tests.

Per-sample doubly robust scores are the common currency: their cluster
means give average effects with cluster-robust standard errors, drive
subgroup comparisons, and feed the school-level analyses. All
cluster-robust quantities weight clusters equally, so conclusions
generalize to new clusters rather than to new samples from the observed
ones.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import stats

from .causal import (
    CateEstimates,
    NuisanceEstimates,
    child_seed,
    fit_causal_forest,
    predict_cate_batch,
)
from .data import ClusterIndex, Dataset, build_cluster_index, split_clusters_kfold
from .errors import (
    DegenerateSplitError,
    InferenceError,
    OverlapError,
    ParameterError,
    RatioUndefinedError,
)
from .forest import ForestParams, fit_regression_forest, predict_batch, predict_oob

logger = logging.getLogger(__name__)

__all__ = [
    "DoublyRobustScores",
    "AteResult",
    "SubgroupResult",
    "CalibrationResult",
    "TestResult",
    "SchoolForestResult",
    "doubly_robust_scores",
    "ate_cluster_robust",
    "subgroup_ate_by_median",
    "test_calibration",
    "school_scores",
    "welch_t_test",
    "one_way_anova",
    "tercile_groups",
    "ols_hc",
    "school_level_forest_analysis",
    "variance_ratio",
    "crossfit_cluster_evaluation",
]

Z_975 = 1.959963984540054  # 97.5% standard normal quantile


def _numerically_constant(values: np.ndarray) -> bool:
    # Forest averages of identical responses can differ in the last ulp.
    return np.ptp(values) <= 1e-12 * (1.0 + abs(float(values.mean())))


@dataclass(frozen=True)
class DoublyRobustScores:
    """Per-sample augmented inverse-propensity scores."""

    gamma: np.ndarray
    filled_cate_count: int = 0


@dataclass(frozen=True)
class AteResult:
    estimate: float
    std_err: float
    n_clusters: int
    ci_low: float
    ci_high: float


@dataclass(frozen=True)
class SubgroupResult:
    high: AteResult
    low: AteResult
    difference: float
    difference_std_err: float
    ci_low: float
    ci_high: float


@dataclass(frozen=True)
class CalibrationResult:
    """Best-linear-predictor regression of residualized outcomes.

    ``mean_*`` describes the coefficient on the mean-effect predictor (1
    when the average effect is well captured); ``diff_*`` the
    coefficient on the centered differential predictor (near 1 when the
    heterogeneity estimates are calibrated, with its p-value a heuristic
    test for detected heterogeneity). ``degenerate`` is set when the
    effect estimates are constant and the differential term drops out.
    """

    mean_coef: float
    mean_se: float
    mean_t: float
    mean_p: float
    diff_coef: float | None
    diff_se: float | None
    diff_t: float | None
    diff_p: float | None
    degenerate: bool
    n_used: int
    n_clusters: int


@dataclass(frozen=True)
class TestResult:
    """One test statistic (or one OLS coefficient row)."""

    name: str
    statistic: float
    df: float
    p_value: float
    df_denom: float | None = None
    estimate: float | None = None
    std_err: float | None = None
    conf_low: float | None = None
    conf_high: float | None = None


def doubly_robust_scores(d: Dataset, nuis: NuisanceEstimates,
                         cate: CateEstimates) -> DoublyRobustScores:
    """Augment out-of-bag effect estimates with inverse-propensity residuals.

    gamma_i = tau_i + (W_i - e_i) / (e_i (1 - e_i))
                      * (Y_i - m_i - (W_i - e_i) tau_i)

    where every hat quantity is the out-of-bag estimate for sample i.
    Samples with a missing out-of-bag effect estimate use the mean of
    the non-missing ones (counted in ``filled_cate_count``).
    """
    e = nuis.w_hat
    at_bounds = (e <= 0.0) | (e >= 1.0)
    if at_bounds.any():
        rows = np.flatnonzero(at_bounds)[:10].tolist()
        raise OverlapError(
            f"propensity estimates hit 0 or 1 at rows {rows}; cannot form "
            "inverse-propensity weights")
    tau = cate.tau_oob
    filled = 0
    if cate.missing.any():
        if cate.missing.all():
            raise InferenceError("every effect estimate is missing")
        filled = int(cate.missing.sum())
        logger.warning("filling %d missing effect estimates with the mean "
                       "estimate before scoring", filled)
        tau = np.where(cate.missing, tau[~cate.missing].mean(), tau)
    wr = d.treatment - e
    resid = d.outcome - nuis.y_hat - wr * tau
    gamma = tau + wr / (e * (1.0 - e)) * resid
    return DoublyRobustScores(gamma=gamma, filled_cate_count=filled)


def ate_cluster_robust(scores: DoublyRobustScores, idx: ClusterIndex,
                       subset=None) -> AteResult:
    """Average effect with equal cluster weights.

    The estimate is the unweighted mean of within-cluster score means
    over clusters with at least one (subset) member; its variance is the
    between-cluster variance of those means divided by the cluster
    count. With every sample its own cluster this reduces to the usual
    mean and standard error.
    """
    gamma = scores.gamma
    cluster_means = []
    for members in idx.members:
        values = gamma[members] if subset is None else gamma[members[subset[members]]]
        if values.size:
            cluster_means.append(float(values.mean()))
    J = len(cluster_means)
    if J < 2:
        raise InferenceError(f"cluster-robust inference needs >= 2 nonempty "
                             f"clusters, got {J}")
    means = np.asarray(cluster_means)
    estimate = float(means.mean())
    sigma2 = float(np.sum((means - estimate) ** 2)) / (J * (J - 1))
    std_err = math.sqrt(sigma2)
    return AteResult(estimate=estimate, std_err=std_err, n_clusters=J,
                     ci_low=estimate - Z_975 * std_err,
                     ci_high=estimate + Z_975 * std_err)


def subgroup_ate_by_median(scores: DoublyRobustScores, idx: ClusterIndex,
                           cate: CateEstimates) -> SubgroupResult:
    """Compare average effects above and below the median effect estimate.

    Samples exactly at the median go to the "low" group; samples with a
    missing estimate are excluded from both groups.
    """
    tau = cate.tau_oob
    usable = ~cate.missing
    values = tau[usable]
    if values.size == 0 or _numerically_constant(values):
        raise DegenerateSplitError("effect estimates are constant; no "
                                   "median split exists")
    median = float(np.median(values))
    high = usable & (tau > median)
    low = usable & (tau <= median)
    ate_high = ate_cluster_robust(scores, idx, subset=high)
    ate_low = ate_cluster_robust(scores, idx, subset=low)
    diff = ate_high.estimate - ate_low.estimate
    se = math.hypot(ate_high.std_err, ate_low.std_err)
    return SubgroupResult(high=ate_high, low=ate_low, difference=diff,
                          difference_std_err=se,
                          ci_low=diff - Z_975 * se, ci_high=diff + Z_975 * se)


def _cluster_robust_noint_ols(y: np.ndarray, X: np.ndarray,
                              cluster_id: np.ndarray):
    """No-intercept WLS with equal cluster weights and clustered SEs.

    Each observation gets weight 1/n_j so every cluster carries the same
    total weight; the variance is a cluster sandwich over per-cluster
    score sums with small-sample factor J/(J-1), and p-values use a t
    distribution with J-1 degrees of freedom.
    """
    n, k = X.shape
    _, inverse, counts = np.unique(cluster_id, return_inverse=True,
                                   return_counts=True)
    J = counts.size
    if J < 2:
        raise InferenceError("clustered regression needs >= 2 clusters")
    w = 1.0 / counts[inverse]
    Xw = X * w[:, None]
    bread = X.T @ Xw
    beta = np.linalg.solve(bread, Xw.T @ y)
    resid = y - X @ beta
    scores = X * (w * resid)[:, None]
    cluster_sums = np.zeros((J, k))
    np.add.at(cluster_sums, inverse, scores)
    meat = cluster_sums.T @ cluster_sums * (J / (J - 1))
    bread_inv = np.linalg.inv(bread)
    cov = bread_inv @ meat @ bread_inv
    se = np.sqrt(np.diag(cov))
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(se > 0, beta / se, np.where(beta == 0, 0.0, np.inf * np.sign(beta)))
    p = 2.0 * stats.t.sf(np.abs(t), df=J - 1)
    return beta, se, t, p, J


def test_calibration(d: Dataset, nuis: NuisanceEstimates, cate: CateEstimates,
                     idx: ClusterIndex | None = None) -> CalibrationResult:
    """Best-linear-predictor calibration of the effect estimates.

    Regresses the residualized outcome on a mean-effect predictor
    tau_bar * (W - w_hat) and a differential predictor
    (tau_i - tau_bar) * (W - w_hat), without intercept, using
    cluster-robust standard errors with equal cluster weights. Constant
    effect estimates drop the differential term and set the degenerate
    flag. The p-values are heuristic: no formal asymptotic justification
    for this test is established.
    """
    usable = ~cate.missing
    if not usable.any():
        raise InferenceError("every effect estimate is missing")
    tau = cate.tau_oob[usable]
    wr = (d.treatment - nuis.w_hat)[usable]
    yr = (d.outcome - nuis.y_hat)[usable]
    cluster = d.cluster_id[usable]
    tau_bar = float(tau.mean())
    mean_pred = tau_bar * wr
    diff_pred = (tau - tau_bar) * wr
    degenerate = _numerically_constant(tau)
    if degenerate:
        X = mean_pred[:, None]
    else:
        X = np.column_stack([mean_pred, diff_pred])
    beta, se, t, p, J = _cluster_robust_noint_ols(yr, X, cluster)
    if degenerate:
        return CalibrationResult(
            mean_coef=float(beta[0]), mean_se=float(se[0]), mean_t=float(t[0]),
            mean_p=float(p[0]), diff_coef=None, diff_se=None, diff_t=None,
            diff_p=None, degenerate=True, n_used=int(usable.sum()), n_clusters=J)
    return CalibrationResult(
        mean_coef=float(beta[0]), mean_se=float(se[0]), mean_t=float(t[0]),
        mean_p=float(p[0]), diff_coef=float(beta[1]), diff_se=float(se[1]),
        diff_t=float(t[1]), diff_p=float(p[1]), degenerate=False,
        n_used=int(usable.sum()), n_clusters=J)


def school_scores(scores: DoublyRobustScores, idx: ClusterIndex) -> np.ndarray:
    """Within-cluster means of the doubly robust scores, in cluster order."""
    return np.array([float(scores.gamma[m].mean()) for m in idx.members])


def welch_t_test(a, b) -> TestResult:
    """Two-sample t test with unequal variances.

    Returns the statistic, the Welch-Satterthwaite degrees of freedom,
    the two-sided p-value, and a 95% confidence interval for
    mean(a) - mean(b). With zero variance in both groups the statistic
    is 0 (p = 1) for equal means and infinite (p = 0) otherwise.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise ParameterError("both groups need at least 2 observations")
    na, nb = a.size, b.size
    va, vb = a.var(ddof=1), b.var(ddof=1)
    diff = float(a.mean() - b.mean())
    se2 = va / na + vb / nb
    if se2 == 0.0:
        df = float(na + nb - 2)
        if diff == 0.0:
            return TestResult("welch_t", 0.0, df, 1.0, estimate=0.0,
                              std_err=0.0, conf_low=0.0, conf_high=0.0)
        t = math.inf if diff > 0 else -math.inf
        return TestResult("welch_t", t, df, 0.0, estimate=diff, std_err=0.0,
                          conf_low=diff, conf_high=diff)
    se = math.sqrt(se2)
    t = diff / se
    df = se2 ** 2 / ((va / na) ** 2 / (na - 1) + (vb / nb) ** 2 / (nb - 1))
    p = 2.0 * float(stats.t.sf(abs(t), df=df))
    crit = float(stats.t.ppf(0.975, df=df))
    return TestResult("welch_t", float(t), float(df), p, estimate=diff,
                      std_err=se, conf_low=diff - crit * se,
                      conf_high=diff + crit * se)


def tercile_groups(values) -> np.ndarray:
    """Split values into three groups at the 1/3 and 2/3 empirical quantiles.

    Intervals are right-closed: group 0 is (-inf, q1], group 1 (q1, q2],
    group 2 (q2, inf).
    """
    values = np.asarray(values, dtype=np.float64)
    q1, q2 = np.quantile(values, [1.0 / 3.0, 2.0 / 3.0])
    return np.where(values <= q1, 0, np.where(values <= q2, 1, 2)).astype(np.int64)


def one_way_anova(values, groups) -> TestResult:
    """One-way analysis of variance across group labels."""
    values = np.asarray(values, dtype=np.float64)
    groups = np.asarray(groups)
    if values.shape != groups.shape:
        raise ParameterError("values and groups must have the same length")
    labels = np.unique(groups)
    G = labels.size
    n = values.size
    if G < 2:
        raise ParameterError("ANOVA needs at least 2 groups")
    if n <= G:
        raise ParameterError("ANOVA needs more observations than groups")
    grand = values.mean()
    ss_between = 0.0
    ss_within = 0.0
    for lab in labels:
        grp = values[groups == lab]
        ss_between += grp.size * (grp.mean() - grand) ** 2
        ss_within += float(np.sum((grp - grp.mean()) ** 2))
    df1, df2 = float(G - 1), float(n - G)
    if ss_within == 0.0:
        if ss_between == 0.0:
            return TestResult("anova_f", 0.0, df1, 1.0, df_denom=df2)
        return TestResult("anova_f", math.inf, df1, 0.0, df_denom=df2)
    F = (ss_between / df1) / (ss_within / df2)
    p = float(stats.f.sf(F, df1, df2))
    return TestResult("anova_f", float(F), df1, p, df_denom=df2)


def ols_hc(y, X, names=None) -> list[TestResult]:
    """OLS with an intercept and HC3 heteroskedasticity-robust errors.

    Returns one row per coefficient (intercept first) with t statistics
    on n - rank degrees of freedom and 95% confidence intervals. The
    HC3 sandwich rescales squared residuals by (1 - leverage)^-2.
    """
    y = np.asarray(y, dtype=np.float64)
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[0] != y.size:
        raise ParameterError("y and X must have the same number of rows")
    n, k = X.shape
    design = np.column_stack([np.ones(n), X])
    if names is None:
        names = [f"x{j + 1}" for j in range(k)]
    names = ["intercept"] + list(names)
    rank = np.linalg.matrix_rank(design)
    if rank < design.shape[1]:
        culprit = _first_dependent_column(design, names)
        raise ParameterError(f"design matrix is rank deficient; column "
                             f"{culprit!r} is collinear with earlier columns")
    xtx_inv = np.linalg.inv(design.T @ design)
    beta = xtx_inv @ design.T @ y
    resid = y - design @ beta
    leverage = np.einsum("ij,jk,ik->i", design, xtx_inv, design)
    adj = resid / (1.0 - leverage)
    cov = xtx_inv @ (design.T * (adj * adj)) @ design @ xtx_inv
    se = np.sqrt(np.diag(cov))
    df = float(n - design.shape[1])
    rows = []
    crit = float(stats.t.ppf(0.975, df=df)) if df > 0 else math.nan
    for j, name in enumerate(names):
        if se[j] > 0:
            t = float(beta[j] / se[j])
            p = 2.0 * float(stats.t.sf(abs(t), df=df))
        else:
            t = 0.0 if beta[j] == 0 else math.copysign(math.inf, beta[j])
            p = 1.0 if beta[j] == 0 else 0.0
        rows.append(TestResult(name, t, df, p, estimate=float(beta[j]),
                               std_err=float(se[j]),
                               conf_low=float(beta[j] - crit * se[j]),
                               conf_high=float(beta[j] + crit * se[j])))
    return rows


def _first_dependent_column(design: np.ndarray, names: list[str]) -> str:
    for j in range(1, design.shape[1]):
        if np.linalg.matrix_rank(design[:, :j + 1]) <= np.linalg.matrix_rank(design[:, :j]):
            return names[j]
    return names[-1]


@dataclass(frozen=True)
class SchoolForestResult:
    predictions: np.ndarray
    missing: np.ndarray
    calibration: CalibrationResult


def school_level_forest_analysis(school_X, scores_per_school,
                                 params: ForestParams | None = None,
                                 n_jobs: int = 1) -> SchoolForestResult:
    """Regression forest on per-cluster effect estimates.

    Fits an honest regression forest of the per-cluster doubly robust
    scores on cluster-level covariates (each cluster its own unit) and
    runs the calibration regression of the scores on the mean and
    centered out-of-bag predictions.
    """
    school_X = np.atleast_2d(np.asarray(school_X, dtype=np.float64))
    target = np.asarray(scores_per_school, dtype=np.float64)
    J = school_X.shape[0]
    if target.shape != (J,):
        raise ParameterError("scores must align with the school covariate rows")
    if J < 10:
        logger.warning("only %d clusters; school-level analysis will be noisy", J)
    params = params if params is not None else ForestParams()
    d = Dataset.from_arrays(school_X, target, np.zeros(J), cluster=None)
    forest = fit_regression_forest(d, target, params, n_jobs=n_jobs)
    pred, missing = predict_oob(forest, d)
    usable = ~missing
    if not usable.any():
        raise InferenceError("no out-of-bag predictions available")
    p_bar = float(pred[usable].mean())
    mean_pred = np.full(int(usable.sum()), p_bar)
    diff_pred = pred[usable] - p_bar
    degenerate = _numerically_constant(pred[usable])
    if degenerate:
        X = mean_pred[:, None]
    else:
        X = np.column_stack([mean_pred, diff_pred])
    beta, se, t, p, n_cl = _cluster_robust_noint_ols(
        target[usable], X, np.arange(int(usable.sum())))
    calibration = CalibrationResult(
        mean_coef=float(beta[0]), mean_se=float(se[0]), mean_t=float(t[0]),
        mean_p=float(p[0]),
        diff_coef=None if degenerate else float(beta[1]),
        diff_se=None if degenerate else float(se[1]),
        diff_t=None if degenerate else float(t[1]),
        diff_p=None if degenerate else float(p[1]),
        degenerate=bool(degenerate), n_used=int(usable.sum()), n_clusters=n_cl)
    return SchoolForestResult(predictions=pred, missing=missing,
                              calibration=calibration)


def variance_ratio(cates_a, cates_b) -> float:
    """Ratio of sample variances var(a) / var(b)."""
    a = np.asarray(cates_a, dtype=np.float64)
    b = np.asarray(cates_b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise ParameterError("variance ratio needs at least 2 values per vector")
    vb = float(b.var(ddof=1))
    if vb == 0.0:
        raise RatioUndefinedError("denominator variance is zero")
    return float(a.var(ddof=1)) / vb


def crossfit_cluster_evaluation(d: Dataset, nuis: NuisanceEstimates,
                                folds: int, params: ForestParams | None = None,
                                n_jobs: int = 1) -> CalibrationResult:
    """Cluster-aligned cross-fit evaluation of non-clustered forests.

    Clusters are split into folds; for each fold a causal forest is fit
    without clustering on the samples of the other folds and used to
    predict effects on the held-out fold. The calibration regression
    then runs on the out-of-fold predictions with cluster-robust
    standard errors, so the evaluation is robust to clustering even
    though the forests are not.
    """
    if folds < 2:
        raise ParameterError("cross-fit evaluation needs at least 2 folds")
    params = params if params is not None else ForestParams()
    idx = build_cluster_index(d)
    fold_of = split_clusters_kfold(idx, folds, seed=child_seed(params.seed, 6))
    oof = np.full(d.n, np.nan)
    for f in range(folds):
        test_mask = fold_of[d.cluster_id] == f
        if not test_mask.any() or test_mask.all():
            raise ParameterError(f"fold {f} has an empty train or test side")
        train_mask = ~test_mask
        d_train = d.subset(train_mask).without_clusters()
        nuis_train = replace(nuis, y_hat=nuis.y_hat[train_mask],
                             w_hat=nuis.w_hat[train_mask])
        model = fit_causal_forest(
            d_train, nuis_train,
            replace(params, seed=child_seed(params.seed, 6, f + 1)),
            n_jobs=n_jobs)
        oof[test_mask] = predict_cate_batch(model, d.features[test_mask])
    cate = CateEstimates(tau_oob=oof, missing=np.isnan(oof))
    return test_calibration(d, nuis, cate)
