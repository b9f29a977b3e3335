"""Dataset representation, CSV ingestion and synthetic data generators.

A :class:`Dataset` bundles the four ingredients every estimator in this
package consumes: a numeric feature matrix, a real-valued outcome, a
binary treatment indicator and a cluster label per sample (a "school"
in the motivating application). Cluster labels may be arbitrary strings
or integers; they are mapped to contiguous internal ids in order of
first appearance so that downstream code is reproducible regardless of
label values.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .errors import ParameterError, ParseError, SchemaError, ValidationError

__all__ = [
    "Dataset",
    "ClusterIndex",
    "SchemaConfig",
    "SchoolEffectSpec",
    "SchoolOracle",
    "load_csv",
    "build_cluster_index",
    "split_clusters_kfold",
    "simulate_confounded",
    "simulate_school_data",
    "write_dataset_csv",
    "write_oracle_csv",
]


@dataclass(frozen=True)
class Dataset:
    """Immutable sample container.

    Attributes:
        features: (n, p) float matrix.
        outcome: length-n outcome vector.
        treatment: length-n vector with values in {0, 1}.
        cluster_id: length-n vector of internal cluster ids in 0..J-1,
            assigned by first appearance of the original label.
        feature_names: p column names.
        cluster_labels: original label for each internal cluster id.
    """

    features: np.ndarray
    outcome: np.ndarray
    treatment: np.ndarray
    cluster_id: np.ndarray
    feature_names: tuple[str, ...]
    cluster_labels: tuple = ()

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.float64)
        outcome = np.asarray(self.outcome, dtype=np.float64)
        treatment = np.asarray(self.treatment, dtype=np.float64)
        cluster_id = np.asarray(self.cluster_id, dtype=np.int64)
        if features.ndim != 2:
            raise ValidationError("features must be a 2-d matrix")
        n = features.shape[0]
        if n < 1:
            raise ValidationError("dataset must contain at least one sample")
        for name, vec in (("outcome", outcome), ("treatment", treatment),
                          ("cluster_id", cluster_id)):
            if vec.shape != (n,):
                raise ValidationError(
                    f"{name} has length {vec.shape}, expected ({n},)")
        if not np.isfinite(features).all():
            raise ValidationError("features contain non-finite values")
        if not np.isfinite(outcome).all():
            raise ValidationError("outcome contains non-finite values")
        if not np.isin(treatment, (0.0, 1.0)).all():
            bad = treatment[~np.isin(treatment, (0.0, 1.0))][0]
            raise ValidationError(f"treatment values must be 0 or 1, got {bad!r}")
        labels = self.cluster_labels
        if len(labels) == 0:
            labels = tuple(range(int(cluster_id.max()) + 1)) if n else ()
        if cluster_id.min() < 0 or cluster_id.max() >= len(labels):
            raise ValidationError("cluster ids must index cluster_labels")
        if np.unique(cluster_id).size != len(labels):
            raise ValidationError("every cluster label must be non-empty")
        names = tuple(str(c) for c in self.feature_names)
        if len(names) != features.shape[1]:
            raise ValidationError("feature_names length must match p")
        for arr in (features, outcome, treatment, cluster_id):
            arr.setflags(write=False)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "outcome", outcome)
        object.__setattr__(self, "treatment", treatment)
        object.__setattr__(self, "cluster_id", cluster_id)
        object.__setattr__(self, "feature_names", names)
        object.__setattr__(self, "cluster_labels", tuple(labels))

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def p(self) -> int:
        return self.features.shape[1]

    @property
    def n_clusters(self) -> int:
        return len(self.cluster_labels)

    @staticmethod
    def from_arrays(features, outcome, treatment, cluster=None,
                    feature_names=None) -> "Dataset":
        """Build a Dataset from raw arrays.

        ``cluster`` may hold arbitrary labels; ``None`` makes every sample
        its own cluster.
        """
        features = np.asarray(features, dtype=np.float64)
        n = features.shape[0]
        if cluster is None:
            ids = np.arange(n, dtype=np.int64)
            labels = tuple(range(1, n + 1))
        else:
            ids, labels = _canonical_cluster_ids(np.asarray(cluster))
        if feature_names is None:
            feature_names = tuple(f"x{j + 1}" for j in range(features.shape[1]))
        return Dataset(features, outcome, treatment, ids,
                       tuple(feature_names), labels)

    def with_clusters(self, cluster) -> "Dataset":
        """Return a copy with a different cluster assignment."""
        return Dataset.from_arrays(self.features, self.outcome, self.treatment,
                                   cluster, self.feature_names)

    def without_clusters(self) -> "Dataset":
        """Return a copy in which every sample is its own cluster."""
        return Dataset.from_arrays(self.features, self.outcome, self.treatment,
                                   None, self.feature_names)

    def subset(self, mask) -> "Dataset":
        """Row subset; cluster ids are re-canonicalized on the kept labels."""
        mask = np.asarray(mask)
        labels = np.asarray(self.cluster_labels, dtype=object)
        return Dataset.from_arrays(
            self.features[mask], self.outcome[mask], self.treatment[mask],
            labels[self.cluster_id[mask]], self.feature_names)


def _canonical_cluster_ids(raw: np.ndarray) -> tuple[np.ndarray, tuple]:
    """Map raw labels to 0-based ids in order of first appearance."""
    seen: dict = {}
    ids = np.empty(raw.shape[0], dtype=np.int64)
    for i, lab in enumerate(raw.tolist()):
        if lab not in seen:
            seen[lab] = len(seen)
        ids[i] = seen[lab]
    return ids, tuple(seen.keys())


@dataclass(frozen=True)
class ClusterIndex:
    """Partition of sample indices by cluster, ordered by first appearance."""

    members: tuple[np.ndarray, ...]
    sizes: np.ndarray
    labels: tuple = ()

    @property
    def n_clusters(self) -> int:
        return len(self.members)


def build_cluster_index(d: Dataset) -> ClusterIndex:
    """Group sample indices by cluster id."""
    order = np.argsort(d.cluster_id, kind="stable")
    sorted_ids = d.cluster_id[order]
    boundaries = np.flatnonzero(np.diff(sorted_ids)) + 1
    groups = np.split(order, boundaries)
    members = tuple(np.ascontiguousarray(g) for g in groups)
    sizes = np.array([g.size for g in members], dtype=np.int64)
    return ClusterIndex(members=members, sizes=sizes, labels=d.cluster_labels)


@dataclass(frozen=True)
class SchemaConfig:
    """Column roles for CSV ingestion."""

    outcome_column: str
    treatment_column: str
    cluster_column: str | None = None
    categorical_columns: tuple[str, ...] = ()

    def __post_init__(self):
        roles = [self.outcome_column, self.treatment_column]
        if self.cluster_column is not None:
            roles.append(self.cluster_column)
        if len(set(roles)) != len(roles):
            raise SchemaError("outcome/treatment/cluster columns must be distinct")
        overlap = set(self.categorical_columns) & set(roles)
        if overlap:
            raise SchemaError(
                f"categorical columns overlap with role columns: {sorted(overlap)}")
        object.__setattr__(self, "categorical_columns",
                           tuple(self.categorical_columns))


def load_csv(path, schema: SchemaConfig) -> Dataset:
    """Load a comma-separated file into a Dataset.

    Categorical columns are expanded into one indicator column per
    observed level, named ``<col>.<level>`` with levels sorted for
    reproducibility. All other non-role columns must be numeric and are
    passed through unchanged. Missing values are rejected.
    """
    df = pd.read_csv(path, header=0, encoding="utf-8",
                     float_precision="round_trip")
    needed = [schema.outcome_column, schema.treatment_column]
    if schema.cluster_column is not None:
        needed.append(schema.cluster_column)
    needed.extend(schema.categorical_columns)
    for col in needed:
        if col not in df.columns:
            raise SchemaError(f"column {col!r} not found in {path}")

    role_cols = {schema.outcome_column, schema.treatment_column}
    if schema.cluster_column is not None:
        role_cols.add(schema.cluster_column)
    categorical = set(schema.categorical_columns)

    outcome = _numeric_column(df, schema.outcome_column)
    treatment = _numeric_column(df, schema.treatment_column)
    bad = ~np.isin(treatment, (0.0, 1.0))
    if bad.any():
        line = int(np.flatnonzero(bad)[0]) + 2
        raise ValidationError(
            f"treatment column {schema.treatment_column!r} has a value outside "
            f"{{0, 1}} at line {line}")

    blocks: list[np.ndarray] = []
    names: list[str] = []
    for col in df.columns:
        if col in role_cols:
            continue
        if col in categorical:
            raw = df[col]
            if raw.isna().any():
                line = int(np.flatnonzero(raw.isna().to_numpy())[0]) + 2
                raise ValidationError(f"missing value in column {col!r} at line {line}")
            values = raw.astype(str).to_numpy()
            for level in np.unique(values):
                blocks.append((values == level).astype(np.float64))
                names.append(f"{col}.{level}")
        else:
            blocks.append(_numeric_column(df, col))
            names.append(col)
    if not blocks:
        raise SchemaError("no feature columns remain after applying the schema")
    features = np.column_stack(blocks)

    cluster = None
    if schema.cluster_column is not None:
        raw = df[schema.cluster_column]
        if raw.isna().any():
            line = int(np.flatnonzero(raw.isna().to_numpy())[0]) + 2
            raise ValidationError(
                f"missing value in column {schema.cluster_column!r} at line {line}")
        cluster = raw.to_numpy()
    return Dataset.from_arrays(features, outcome, treatment, cluster, names)


def _numeric_column(df: pd.DataFrame, col: str) -> np.ndarray:
    raw = df[col]
    if raw.isna().any():
        line = int(np.flatnonzero(raw.isna().to_numpy())[0]) + 2
        raise ValidationError(f"missing value in column {col!r} at line {line}")
    converted = pd.to_numeric(raw, errors="coerce")
    bad = converted.isna().to_numpy()
    if bad.any():
        line = int(np.flatnonzero(bad)[0]) + 2
        raise ParseError(
            f"non-numeric value {raw.iloc[int(np.flatnonzero(bad)[0])]!r} in "
            f"column {col!r} at line {line}")
    return converted.to_numpy(dtype=np.float64)


def split_clusters_kfold(idx: ClusterIndex, folds: int, seed: int) -> np.ndarray:
    """Assign each cluster to one of ``folds`` folds, sizes differing by <= 1.

    Returns an array of fold ids (0-based), one per cluster.
    """
    J = idx.n_clusters
    if folds < 1 or folds > J:
        raise ParameterError(f"folds must be in 1..{J}, got {folds}")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(J)
    assignment = np.empty(J, dtype=np.int64)
    assignment[perm] = np.arange(J) % folds
    return assignment


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


def simulate_confounded(n: int, p: int, seed: int):
    """Confounded design with no true treatment effect.

    Covariates are i.i.d. standard normal, treatment follows a logistic
    model in the first covariate, and the outcome loads on the mean of
    the first six covariates, so the first covariate is both a strong
    treatment driver and an outcome driver.

    Returns (dataset, true_propensity, true_cate); the true CATE is
    identically zero.
    """
    if n < 1:
        raise ParameterError("n must be >= 1")
    if p < 6:
        raise ParameterError(f"p must be >= 6, got {p}")
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, p))
    propensity = _sigmoid(X[:, 0])
    W = rng.binomial(1, propensity).astype(np.float64)
    Y = 2.0 * X[:, :6].mean(axis=1) + rng.standard_normal(n)
    d = Dataset.from_arrays(X, Y, W, cluster=None)
    return d, propensity, np.zeros(n)


@dataclass(frozen=True)
class SchoolEffectSpec:
    """Generator parameters for the clustered ("school") design.

    The outcome model is
        Y = m(X) + W * (tau(X) + gamma_j) + beta_j + noise
    with m linear in the first student covariate, tau a step function in
    the first student covariate, and per-cluster offsets beta_j, gamma_j
    drawn from centered normals. School-level covariates are drawn once
    per cluster and broadcast to its members; they carry no effect but
    make clusters identifiable to a forest.
    """

    n_student_covariates: int = 4
    n_school_covariates: int = 2
    base_effect: float = 0.25
    effect_step: float = 0.0
    school_effect_slope: float = 0.0
    main_effect_scale: float = 1.0
    main_effect_sd: float = 0.0
    cluster_effect_sd: float = 0.0
    noise_sd: float = 1.0
    propensity: float = 0.5
    propensity_slope: float = 0.0
    cluster_size_spread: float = 0.0

    def __post_init__(self):
        if self.n_student_covariates < 1:
            raise ParameterError("need at least one student covariate")
        if self.n_school_covariates < 0:
            raise ParameterError("n_school_covariates must be >= 0")
        if self.school_effect_slope != 0.0 and self.n_school_covariates < 1:
            raise ParameterError("school_effect_slope needs a school covariate")
        for name in ("main_effect_sd", "cluster_effect_sd", "noise_sd",
                     "cluster_size_spread"):
            if getattr(self, name) < 0:
                raise ParameterError(f"{name} must be >= 0")
        if not 0.0 < self.propensity < 1.0:
            raise ParameterError("propensity must be in (0, 1)")


@dataclass(frozen=True)
class SchoolOracle:
    """Ground truth recorded alongside a simulated school dataset."""

    true_propensity: np.ndarray
    true_cate: np.ndarray        # covariate part tau(X_i)
    cluster_effect: np.ndarray   # idiosyncratic gamma_{A_i}
    main_offset: np.ndarray      # beta_{A_i}


def simulate_school_data(J: int, mean_cluster_size: int,
                         effect_spec: SchoolEffectSpec | None = None,
                         seed: int = 0):
    """Simulate a clustered dataset with known per-cluster effects.

    Returns (dataset, oracle). Draw order is fixed (sizes, offsets,
    school covariates, student covariates, treatment, noise) so results
    are bit-reproducible for a given seed.
    """
    if J < 2:
        raise ParameterError(f"J must be >= 2, got {J}")
    if mean_cluster_size < 2:
        raise ParameterError("mean_cluster_size must be >= 2")
    spec = effect_spec if effect_spec is not None else SchoolEffectSpec()
    rng = np.random.default_rng(seed)

    if spec.cluster_size_spread > 0:
        sizes = np.maximum(
            2, np.rint(rng.normal(mean_cluster_size, spec.cluster_size_spread,
                                  size=J)).astype(np.int64))
    else:
        sizes = np.full(J, mean_cluster_size, dtype=np.int64)
    n = int(sizes.sum())
    cluster_of = np.repeat(np.arange(J), sizes)

    beta = rng.normal(0.0, spec.main_effect_sd, size=J) \
        if spec.main_effect_sd > 0 else np.zeros(J)
    gamma = rng.normal(0.0, spec.cluster_effect_sd, size=J) \
        if spec.cluster_effect_sd > 0 else np.zeros(J)
    school_cov = rng.standard_normal((J, spec.n_school_covariates))
    student_cov = rng.standard_normal((n, spec.n_student_covariates))

    s1 = student_cov[:, 0]
    if spec.propensity_slope != 0.0:
        propensity = _sigmoid(spec.propensity_slope * s1)
    else:
        propensity = np.full(n, spec.propensity)
    W = rng.binomial(1, propensity).astype(np.float64)
    noise = rng.normal(0.0, spec.noise_sd, size=n) if spec.noise_sd > 0 \
        else np.zeros(n)

    tau = spec.base_effect + spec.effect_step * (s1 > 0)
    if spec.school_effect_slope != 0.0:
        tau = tau + spec.school_effect_slope * school_cov[cluster_of, 0]
    m = spec.main_effect_scale * s1
    Y = m + W * (tau + gamma[cluster_of]) + beta[cluster_of] + noise

    X = np.hstack([student_cov, school_cov[cluster_of]])
    names = [f"s{k + 1}" for k in range(spec.n_student_covariates)]
    names += [f"z{k + 1}" for k in range(spec.n_school_covariates)]
    labels = np.array([f"school_{j + 1}" for j in range(J)], dtype=object)
    d = Dataset.from_arrays(X, Y, W, labels[cluster_of], names)
    oracle = SchoolOracle(true_propensity=propensity, true_cate=tau,
                          cluster_effect=gamma[cluster_of],
                          main_offset=beta[cluster_of])
    return d, oracle


def write_dataset_csv(d: Dataset, path) -> None:
    """Write a Dataset in the same CSV format accepted by load_csv."""
    labels = np.asarray(d.cluster_labels, dtype=object)
    frame = pd.DataFrame(d.features, columns=list(d.feature_names))
    frame["Y"] = d.outcome
    frame["W"] = d.treatment.astype(np.int64)
    frame["cluster"] = labels[d.cluster_id]
    # %.17g keeps float64 values exactly round-trippable.
    frame.to_csv(path, index=False, float_format="%.17g")


def write_oracle_csv(oracle: SchoolOracle | tuple, path) -> None:
    """Write the ground-truth sidecar next to a simulated dataset."""
    if isinstance(oracle, SchoolOracle):
        frame = pd.DataFrame({
            "true_propensity": oracle.true_propensity,
            "true_cate": oracle.true_cate,
            "cluster_effect": oracle.cluster_effect,
        })
    else:
        propensity, cate = oracle
        frame = pd.DataFrame({
            "true_propensity": propensity,
            "true_cate": cate,
            "cluster_effect": np.zeros(len(cate)),
        })
    frame.to_csv(path, index=False, float_format="%.17g")
