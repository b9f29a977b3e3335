"""Orthogonalized causal forests.

The estimation strategy residualizes outcome and treatment on
out-of-bag nuisance estimates (partialling out main effects and
treatment propensities), grows an honest forest whose splits chase
heterogeneity in the residual-on-residual effect, and reads off effect
estimates as kernel-weighted ratios of the residual cross moments. The
end-to-end pipeline additionally selects features with a pilot forest
and tunes the final forest by minimizing the out-of-bag residualized
squared-error objective.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .data import Dataset
from .errors import (
    DegenerateTreatmentError,
    EvaluationError,
    InferenceError,
    InsufficientOverlapError,
    ParameterError,
)
from .forest import (
    Forest,
    ForestParams,
    _accumulate,
    _CausalTarget,
    _fit_forest,
    fit_regression_forest,
    forest_from_json,
    forest_to_json,
    params_from_dict,
    params_to_dict,
    predict_batch,
    predict_oob,
    variable_importance,
)

logger = logging.getLogger(__name__)

__all__ = [
    "NuisanceEstimates",
    "CausalForestModel",
    "CateEstimates",
    "PipelineOptions",
    "TuningResult",
    "child_seed",
    "estimate_nuisances",
    "robinson_tau",
    "causal_split_responses",
    "fit_causal_forest",
    "predict_cate",
    "predict_cate_batch",
    "predict_cate_oob",
    "r_loss",
    "default_tuning_grid",
    "tune_parameters",
    "run_pipeline",
]

PROPENSITY_CLIP = 1e-6
OVERLAP_EPS = 1e-10

# Fixed tags for deriving stage seeds from the master seed.
_SEED_Y, _SEED_W, _SEED_PILOT, _SEED_TUNE, _SEED_FINAL = 1, 2, 3, 4, 5


def child_seed(seed: int, *key: int) -> int:
    """Derive an independent child seed from (seed, key)."""
    ss = np.random.SeedSequence(entropy=seed, spawn_key=tuple(key))
    return int(ss.generate_state(1, np.uint64)[0])


@dataclass
class NuisanceEstimates:
    """Out-of-bag estimates of the outcome and propensity surfaces."""

    y_hat: np.ndarray
    w_hat: np.ndarray
    y_source: str
    w_source: str
    clip_count: int = 0
    y_fill_count: int = 0
    w_fill_count: int = 0


@dataclass
class CateEstimates:
    """Out-of-bag effect estimates; NaN where flagged missing."""

    tau_oob: np.ndarray
    missing: np.ndarray

    @property
    def n_missing(self) -> int:
        return int(self.missing.sum())

    def values(self) -> np.ndarray:
        """Non-missing estimates, in sample order."""
        return self.tau_oob[~self.missing]


@dataclass
class TuningResult:
    best_params: ForestParams
    candidates: list[ForestParams]
    losses: np.ndarray


@dataclass
class CausalForestModel:
    """A fitted causal forest together with everything it conditioned on."""

    forest: Forest
    nuisances: NuisanceEstimates
    selected_features: np.ndarray
    params: ForestParams
    dataset: Dataset | None = None
    selection_importance: np.ndarray | None = None
    selection_fallback: bool = False
    tuning: TuningResult | None = None


def estimate_nuisances(d: Dataset, params: ForestParams | None = None,
                       *, y_hat=None, w_hat=None,
                       trivial_propensity: bool = False,
                       n_jobs: int = 1) -> NuisanceEstimates:
    """Estimate y_hat and w_hat with cluster-aware regression forests.

    Either estimate can be overridden with a user-supplied vector
    (oracle mode, e.g. known randomization probabilities); a scalar
    ``w_hat`` is broadcast. ``trivial_propensity`` replaces w_hat by the
    sample mean of the treatment, deliberately skipping
    orthogonalization on the treatment side.

    Out-of-bag gaps (samples whose cluster was drawn by every tree) are
    filled with full-forest predictions and counted; forest propensities
    are clipped away from 0 and 1 and the clips counted.
    """
    params = params if params is not None else ForestParams()
    n = d.n
    y_fill = 0
    if y_hat is not None:
        y_hat = _checked_vector("y_hat", y_hat, n)
        y_source = "oracle"
    else:
        y_forest = fit_regression_forest(
            d, d.outcome, replace(params, seed=child_seed(params.seed, _SEED_Y)),
            n_jobs=n_jobs)
        y_hat, y_missing = predict_oob(y_forest, d)
        y_fill = int(y_missing.sum())
        if y_fill:
            logger.warning("filling %d out-of-bag gaps in y_hat with "
                           "full-forest predictions", y_fill)
            y_hat[y_missing] = predict_batch(y_forest, d.features[y_missing])
        y_source = "forest"

    clip_count = 0
    w_fill = 0
    if trivial_propensity:
        w_hat = np.full(n, float(d.treatment.mean()))
        w_source = "trivial"
    elif w_hat is not None:
        if np.isscalar(w_hat):
            w_hat = np.full(n, float(w_hat))
        w_hat = _checked_vector("w_hat", w_hat, n)
        if (w_hat <= 0).any() or (w_hat >= 1).any():
            raise ParameterError("supplied w_hat values must lie strictly in (0, 1)")
        w_source = "oracle"
    else:
        w_forest = fit_regression_forest(
            d, d.treatment, replace(params, seed=child_seed(params.seed, _SEED_W)),
            n_jobs=n_jobs)
        w_hat, w_missing = predict_oob(w_forest, d)
        w_fill = int(w_missing.sum())
        if w_fill:
            logger.warning("filling %d out-of-bag gaps in w_hat with "
                           "full-forest predictions", w_fill)
            w_hat[w_missing] = predict_batch(w_forest, d.features[w_missing])
        lo, hi = PROPENSITY_CLIP, 1.0 - PROPENSITY_CLIP
        outside = (w_hat < lo) | (w_hat > hi)
        clip_count = int(outside.sum())
        if clip_count:
            logger.warning("clipped %d propensity estimates into [%g, %g]",
                           clip_count, lo, hi)
            w_hat = np.clip(w_hat, lo, hi)
        w_source = "forest"
    return NuisanceEstimates(y_hat=y_hat, w_hat=w_hat, y_source=y_source,
                             w_source=w_source, clip_count=clip_count,
                             y_fill_count=y_fill, w_fill_count=w_fill)


def _checked_vector(name: str, vec, n: int) -> np.ndarray:
    vec = np.asarray(vec, dtype=np.float64)
    if vec.shape != (n,):
        raise ParameterError(f"{name} must be a length-{n} vector")
    if not np.isfinite(vec).all():
        raise ParameterError(f"{name} contains non-finite values")
    return vec.copy()


def robinson_tau(residual_y: np.ndarray, residual_w: np.ndarray) -> float:
    """Constant-effect estimate from residualized outcome and treatment."""
    ry = np.asarray(residual_y, dtype=np.float64)
    rw = np.asarray(residual_w, dtype=np.float64)
    if ry.shape != rw.shape or ry.ndim != 1 or ry.size < 1:
        raise ParameterError("residual vectors must share a length >= 1")
    denom = float(rw @ rw)
    if denom < 1e-12:
        raise DegenerateTreatmentError(
            "treatment residuals are numerically zero; effect is unidentified")
    return float(ry @ rw) / denom


def causal_split_responses(residual_y: np.ndarray,
                           residual_w: np.ndarray) -> np.ndarray:
    """Per-sample pseudo-outcomes scored by the causal splitting rule.

    With tau_P the node-level effect estimate, sample i contributes
    rho_i = rw_i * (ry_i - tau_P * rw_i) / mean(rw^2); heterogeneity in
    rho is what a split can explain, so split candidates are ranked by
    the usual variance reduction applied to rho.
    """
    ry = np.asarray(residual_y, dtype=np.float64)
    rw = np.asarray(residual_w, dtype=np.float64)
    tau_parent = robinson_tau(ry, rw)
    rww = rw * rw
    return rw * (ry - tau_parent * rw) / rww.mean()


def fit_causal_forest(d: Dataset, nuis: NuisanceEstimates,
                      params: ForestParams | None = None,
                      feature_subset=None, n_jobs: int = 1) -> CausalForestModel:
    """Grow a causal forest on residualized data.

    ``feature_subset`` restricts splits to the given feature indices
    (all features when None); cluster subsampling and honesty follow the
    regression-forest rules.
    """
    params = params if params is not None else ForestParams()
    if d.n_clusters < 2:
        raise InferenceError("causal forests need at least 2 clusters; "
                             "got a single cluster")
    y_hat = _checked_vector("y_hat", nuis.y_hat, d.n)
    w_hat = _checked_vector("w_hat", nuis.w_hat, d.n)
    subset = _checked_subset(feature_subset, d.p)
    residual_y = d.outcome - y_hat
    residual_w = d.treatment - w_hat
    forest = _fit_forest(d.features, d.cluster_id,
                         _CausalTarget(residual_y, residual_w), params,
                         feature_pool=subset, n_jobs=n_jobs)
    return CausalForestModel(forest=forest, nuisances=nuis,
                             selected_features=subset, params=params,
                             dataset=d)


def _checked_subset(feature_subset, p: int) -> np.ndarray:
    if feature_subset is None:
        return np.arange(p)
    subset = np.unique(np.asarray(feature_subset, dtype=np.int64))
    if subset.size == 0:
        raise ParameterError("feature_subset must be nonempty")
    if subset.min() < 0 or subset.max() >= p:
        raise ParameterError("feature_subset indices out of range")
    return subset


def predict_cate_batch(model: CausalForestModel, X) -> np.ndarray:
    """Effect estimates at the rows of X (full feature vectors)."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != model.forest.p:
        raise ParameterError(f"expected {model.forest.p} features, got {X.shape[1]}")
    sums, count = _accumulate(model.forest, X, np.arange(X.shape[0]),
                              ("leaf_num", "leaf_den"))
    if (count == 0).any():
        raise InsufficientOverlapError("no tree produced a leaf for some rows")
    den = sums["leaf_den"] / count
    if (den < OVERLAP_EPS).any():
        bad = int(np.flatnonzero(den < OVERLAP_EPS)[0])
        raise InsufficientOverlapError(
            f"kernel-weighted treatment variation is ~0 at row {bad}; "
            "propensity estimates may be overfit")
    return sums["leaf_num"] / sums["leaf_den"]


def predict_cate(model: CausalForestModel, x) -> float:
    """Effect estimate at a single point."""
    return float(predict_cate_batch(model, np.asarray(x)[None, :])[0])


def predict_cate_oob(model: CausalForestModel,
                     d: Dataset | None = None) -> CateEstimates:
    """Cluster-aware out-of-bag effect estimates for the training samples.

    Samples with no qualifying tree, or with numerically zero
    kernel-weighted treatment variation, are flagged missing.
    """
    d = d if d is not None else model.dataset
    if d is None:
        raise ParameterError("model carries no dataset; pass one explicitly")
    rows = np.arange(d.n)
    sums, count = _accumulate(model.forest, d.features, rows,
                              ("leaf_num", "leaf_den"),
                              oob_cluster_id=d.cluster_id)
    with np.errstate(invalid="ignore", divide="ignore"):
        den_mean = np.where(count > 0, sums["leaf_den"] / np.maximum(count, 1), 0.0)
        tau = sums["leaf_num"] / sums["leaf_den"]
    missing = (count == 0) | (den_mean < OVERLAP_EPS)
    tau = np.where(missing, np.nan, tau)
    n_overlap = int((missing & (count > 0)).sum())
    if n_overlap:
        logger.warning("flagged %d out-of-bag estimates with ~0 treatment "
                       "variation as missing", n_overlap)
    return CateEstimates(tau_oob=tau, missing=missing)


def r_loss(d: Dataset, nuis: NuisanceEstimates, cate: CateEstimates) -> float:
    """Mean squared residualized objective over non-missing samples."""
    keep = ~cate.missing
    if not keep.any():
        raise EvaluationError("all samples are missing an out-of-bag estimate")
    ry = d.outcome[keep] - nuis.y_hat[keep]
    rw = d.treatment[keep] - nuis.w_hat[keep]
    err = ry - cate.tau_oob[keep] * rw
    return float(np.mean(err * err))


def default_tuning_grid(base: ForestParams, pool_size: int) -> list[ForestParams]:
    """Candidate grid over node size, subsample fraction and mtry.

    Duplicate candidates (possible for small feature pools) are dropped,
    keeping first occurrence so tie-breaking by grid order is stable.
    """
    mtries = []
    for m in (math.ceil(pool_size / 3), math.ceil(math.sqrt(pool_size)), pool_size):
        m = min(int(m), pool_size)
        if m not in mtries:
            mtries.append(m)
    grid = []
    for min_node in (5, 10, 20, 50):
        for fraction in (0.3, 0.5):
            for mtry in mtries:
                cand = replace(base, min_node_size=min_node,
                               sample_fraction=fraction, mtry=mtry)
                if cand not in grid:
                    grid.append(cand)
    return grid


def tune_parameters(d: Dataset, nuis: NuisanceEstimates,
                    grid: list[ForestParams], pilot_num_trees: int,
                    feature_subset=None, n_jobs: int = 1) -> TuningResult:
    """Pick the grid candidate whose pilot forest minimizes the OOB objective.

    Every candidate is evaluated with a pilot of ``pilot_num_trees``
    trees grown from a common seed; ties break toward earlier grid
    entries (exact argmin).
    """
    if not grid:
        raise ParameterError("tuning grid must be nonempty")
    losses = np.empty(len(grid))
    for i, cand in enumerate(grid):
        pilot_params = replace(cand, num_trees=pilot_num_trees,
                               seed=child_seed(cand.seed, _SEED_TUNE))
        pilot = fit_causal_forest(d, nuis, pilot_params,
                                  feature_subset=feature_subset, n_jobs=n_jobs)
        losses[i] = r_loss(d, nuis, predict_cate_oob(pilot))
    best = int(np.argmin(losses))
    return TuningResult(best_params=grid[best], candidates=list(grid),
                        losses=losses)


@dataclass
class PipelineOptions:
    """Options for the end-to-end estimation pipeline."""

    params: ForestParams = field(default_factory=ForestParams)
    clustering: bool = True
    trivial_propensity: bool = False
    y_hat: np.ndarray | None = None
    w_hat: np.ndarray | float | None = None
    tune_final: bool = True
    pilot_num_trees: int = 200
    final_samples_per_cluster: int | str = 50
    n_jobs: int = 1


def run_pipeline(d: Dataset, options: PipelineOptions | None = None):
    """Nuisances, pilot forest, feature selection, tuned final forest.

    Steps: (1) fit outcome and propensity forests on all features and
    keep their out-of-bag predictions; (2) grow a pilot causal forest on
    all features; (3) keep features whose depth-weighted split share
    exceeds the mean share (falling back to all features if none does);
    (4) grow the final causal forest on the kept features with a larger
    per-cluster sample and, optionally, tuned parameters; (5) return the
    model and its out-of-bag effect estimates.

    Returns (CausalForestModel, CateEstimates).
    """
    options = options if options is not None else PipelineOptions()
    base = options.params
    d_eff = d if options.clustering else d.without_clusters()

    nuis = estimate_nuisances(
        d_eff, base, y_hat=options.y_hat, w_hat=options.w_hat,
        trivial_propensity=options.trivial_propensity, n_jobs=options.n_jobs)

    pilot_params = replace(base, seed=child_seed(base.seed, _SEED_PILOT))
    pilot = fit_causal_forest(d_eff, nuis, pilot_params, n_jobs=options.n_jobs)
    importance = variable_importance(pilot.forest)
    selected = np.flatnonzero(importance > importance.mean())
    fallback = selected.size == 0
    if fallback:
        logger.warning("importance-based selection kept no features; "
                       "falling back to all features")
        selected = np.arange(d.p)

    final_base = replace(base,
                         samples_per_cluster=options.final_samples_per_cluster,
                         seed=child_seed(base.seed, _SEED_FINAL))
    tuning = None
    if options.tune_final:
        grid = default_tuning_grid(final_base, selected.size)
        tuning = tune_parameters(d_eff, nuis, grid, options.pilot_num_trees,
                                 feature_subset=selected, n_jobs=options.n_jobs)
        final_params = replace(tuning.best_params, num_trees=base.num_trees,
                               seed=final_base.seed)
    else:
        final_params = final_base
    model = fit_causal_forest(d_eff, nuis, final_params,
                              feature_subset=selected, n_jobs=options.n_jobs)
    model.selection_importance = importance
    model.selection_fallback = fallback
    model.tuning = tuning
    cates = predict_cate_oob(model)
    return model, cates


_BUNDLE_FORMAT = "causalgrove.model"
_BUNDLE_VERSION = 1


def model_to_json(model: CausalForestModel) -> dict:
    """Serialize a model bundle (nuisances, forest, selection metadata)."""
    doc = {
        "format": _BUNDLE_FORMAT,
        "version": _BUNDLE_VERSION,
        "nuisances": {
            "y_hat": model.nuisances.y_hat.tolist(),
            "w_hat": model.nuisances.w_hat.tolist(),
            "y_source": model.nuisances.y_source,
            "w_source": model.nuisances.w_source,
            "clip_count": model.nuisances.clip_count,
            "y_fill_count": model.nuisances.y_fill_count,
            "w_fill_count": model.nuisances.w_fill_count,
        },
        "selected_features": model.selected_features.tolist(),
        "selection_fallback": model.selection_fallback,
        "params": params_to_dict(model.params),
        "forest": forest_to_json(model.forest),
    }
    if model.selection_importance is not None:
        doc["selection_importance"] = model.selection_importance.tolist()
    return doc


def model_from_json(doc: dict) -> CausalForestModel:
    """Rebuild a model bundle; the training dataset is not part of it."""
    if doc.get("format") != _BUNDLE_FORMAT:
        raise ParameterError("not a serialized model document")
    if doc.get("version") != _BUNDLE_VERSION:
        raise ParameterError(f"unsupported model version {doc.get('version')!r}")
    nd = doc["nuisances"]
    nuis = NuisanceEstimates(
        y_hat=np.array(nd["y_hat"], dtype=np.float64),
        w_hat=np.array(nd["w_hat"], dtype=np.float64),
        y_source=nd["y_source"], w_source=nd["w_source"],
        clip_count=int(nd["clip_count"]),
        y_fill_count=int(nd["y_fill_count"]),
        w_fill_count=int(nd["w_fill_count"]))
    importance = doc.get("selection_importance")
    return CausalForestModel(
        forest=forest_from_json(doc["forest"]),
        nuisances=nuis,
        selected_features=np.array(doc["selected_features"], dtype=np.int64),
        params=params_from_dict(doc["params"]),
        dataset=None,
        selection_importance=(np.array(importance) if importance is not None
                              else None),
        selection_fallback=bool(doc["selection_fallback"]))
