"""Honest, cluster-aware regression forests.

Trees are grown on cluster subsamples: each tree draws a subset of
clusters and then at most ``samples_per_cluster`` members from each
drawn cluster, so every cluster contributes comparably many samples
regardless of its size. Honesty splits each tree's subsample into a
half that chooses the splits and a disjoint half that populates the
leaves. A sample is out-of-bag for a tree only when its whole cluster
was left out of that tree's draw, which keeps out-of-bag estimates
independent of within-cluster correlation.

With trivial clustering (every sample its own cluster) all of this
reduces to ordinary subsampled honest regression forests.

Tree growth is embarrassingly parallel; per-tree random streams are
derived from (seed, tree index) so the fitted forest is identical for
any worker count.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from joblib import Parallel, delayed

from .data import ClusterIndex, Dataset, build_cluster_index
from .errors import ParameterError, PredictionError

__all__ = [
    "ForestParams",
    "Tree",
    "Forest",
    "draw_cluster_subsample",
    "grow_tree",
    "fit_regression_forest",
    "predict",
    "predict_batch",
    "predict_oob",
    "kernel_weights",
    "variable_importance",
    "forest_to_json",
    "forest_from_json",
]

# Relative floor a split's between-child sum of squares must clear; guards
# against splitting on floating-point noise in (near-)constant nodes.
_GAIN_TOL = 1e-10

IMPORTANCE_MAX_DEPTH = 4
IMPORTANCE_DECAY_EXPONENT = 2.0


@dataclass(frozen=True)
class ForestParams:
    """Tuning parameters shared by regression and causal forests.

    ``samples_per_cluster`` may be "auto", which resolves at fit time to
    ceil(sample_fraction * median cluster size). ``mtry`` of None
    resolves to min(ceil(sqrt(q)) + 20, q) for a pool of q features.
    """

    num_trees: int = 2000
    sample_fraction: float = 0.5
    samples_per_cluster: int | str = "auto"
    mtry: int | None = None
    min_node_size: int = 5
    honesty_fraction: float = 0.5
    alpha_child_share: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.num_trees < 1:
            raise ParameterError("num_trees must be >= 1")
        if not 0.0 < self.sample_fraction <= 1.0:
            raise ParameterError("sample_fraction must be in (0, 1]")
        if not 0.0 < self.honesty_fraction < 1.0:
            raise ParameterError("honesty_fraction must be in (0, 1)")
        if not 0.0 < self.alpha_child_share < 0.5:
            raise ParameterError("alpha_child_share must be in (0, 0.5)")
        if self.min_node_size < 1:
            raise ParameterError("min_node_size must be >= 1")
        if self.mtry is not None and self.mtry < 1:
            raise ParameterError("mtry must be >= 1 when given")
        if self.samples_per_cluster != "auto" and (
                not isinstance(self.samples_per_cluster, (int, np.integer))
                or self.samples_per_cluster < 1):
            raise ParameterError('samples_per_cluster must be "auto" or an int >= 1')
        if not isinstance(self.seed, (int, np.integer)) or self.seed < 0:
            raise ParameterError("seed must be a non-negative integer")


@dataclass
class Tree:
    """A single honest tree.

    Structure arrays are indexed by node id; ``feature`` is -1 at
    leaves. Leaf membership is stored CSR-style over the honest
    estimation half: members of node v are
    ``leaf_indices[leaf_indptr[v]:leaf_indptr[v + 1]]``. Payload arrays
    hold per-leaf aggregates of the responses over those members and are
    NaN for internal nodes and for leaves left empty by the honest
    repopulation (such leaves are skipped at prediction).
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    depth: np.ndarray
    drawn_clusters: np.ndarray
    split_sample: np.ndarray
    estimation_sample: np.ndarray
    leaf_indptr: np.ndarray
    leaf_indices: np.ndarray
    leaf_mean: np.ndarray | None = None
    leaf_num: np.ndarray | None = None
    leaf_den: np.ndarray | None = None

    @property
    def n_nodes(self) -> int:
        return self.feature.shape[0]

    def leaf_members(self, node: int) -> np.ndarray:
        return self.leaf_indices[self.leaf_indptr[node]:self.leaf_indptr[node + 1]]

    def empty_leaf_count(self) -> int:
        leaves = self.feature < 0
        counts = np.diff(self.leaf_indptr)
        return int(np.count_nonzero(leaves & (counts == 0)))


@dataclass
class Forest:
    """A fitted ensemble plus the resolved parameters it was grown with."""

    trees: list[Tree]
    params: ForestParams
    p: int
    kind: str
    feature_pool: np.ndarray
    n_samples: int
    n_clusters: int
    resolved_mtry: int
    resolved_k: int

    @property
    def num_trees(self) -> int:
        return len(self.trees)

    @property
    def empty_leaf_count(self) -> int:
        return sum(t.empty_leaf_count() for t in self.trees)


def resolve_samples_per_cluster(params: ForestParams, sizes: np.ndarray) -> int:
    if params.samples_per_cluster == "auto":
        return int(math.ceil(params.sample_fraction * float(np.median(sizes))))
    return int(params.samples_per_cluster)


def resolve_mtry(params: ForestParams, pool_size: int) -> int:
    if params.mtry is None:
        return min(int(math.ceil(math.sqrt(pool_size))) + 20, pool_size)
    if params.mtry > pool_size:
        raise ParameterError(
            f"mtry={params.mtry} exceeds the {pool_size} available features")
    return int(params.mtry)


def draw_cluster_subsample(idx: ClusterIndex, params: ForestParams,
                           tree_rng: np.random.Generator):
    """Draw one tree's cluster set and sample set.

    A uniform subset of ceil(sample_fraction * J) clusters is drawn;
    each drawn cluster contributes ``samples_per_cluster`` members
    without replacement, or all of its members when it is smaller than
    that. Clusters are visited in sorted order so the draw depends only
    on the generator state.
    """
    J = idx.n_clusters
    k = resolve_samples_per_cluster(params, idx.sizes)
    n_draw = int(math.ceil(params.sample_fraction * J))
    drawn = np.sort(tree_rng.choice(J, size=n_draw, replace=False))
    parts = []
    for j in drawn:
        members = idx.members[j]
        if members.size <= k:
            parts.append(members)
        else:
            parts.append(tree_rng.choice(members, size=k, replace=False))
    samples = np.sort(np.concatenate(parts))
    return drawn.astype(np.int64), samples.astype(np.int64)


class _RegressionTarget:
    """Fixed responses; leaves store the estimation-half mean."""

    kind = "regression"

    def __init__(self, y: np.ndarray):
        self.y = np.asarray(y, dtype=np.float64)

    def node_values(self, idx: np.ndarray):
        return self.y[idx]

    def leaf_payload(self, tree: Tree, members_per_node: list[np.ndarray]):
        n_nodes = tree.n_nodes
        mean = np.full(n_nodes, np.nan)
        for v, members in enumerate(members_per_node):
            if tree.feature[v] < 0 and members.size:
                mean[v] = float(self.y[members].mean())
        tree.leaf_mean = mean


class _CausalTarget:
    """Residual pair target used by causal forests.

    Split criteria operate on per-node pseudo-outcomes that proxy how
    much each sample pulls the node's effect estimate; leaves store the
    estimation-half means of ry*rw and rw^2, whose ratio across trees is
    the kernel-weighted effect estimate.
    """

    kind = "causal"

    def __init__(self, residual_y: np.ndarray, residual_w: np.ndarray):
        self.ryw = np.asarray(residual_y, dtype=np.float64) * residual_w
        self.rww = np.asarray(residual_w, dtype=np.float64) ** 2

    def node_values(self, idx: np.ndarray):
        ryw = self.ryw[idx]
        rww = self.rww[idx]
        s2 = float(rww.sum())
        if s2 <= 1e-12:
            return None
        tau_parent = float(ryw.sum()) / s2
        return (ryw - tau_parent * rww) / (s2 / idx.size)

    def leaf_payload(self, tree: Tree, members_per_node: list[np.ndarray]):
        n_nodes = tree.n_nodes
        num = np.full(n_nodes, np.nan)
        den = np.full(n_nodes, np.nan)
        for v, members in enumerate(members_per_node):
            if tree.feature[v] < 0 and members.size:
                num[v] = float(self.ryw[members].mean())
                den[v] = float(self.rww[members].mean())
        tree.leaf_num = num
        tree.leaf_den = den


def _best_split(X, values, idx, feats, alpha):
    """Exhaustive CART search over midpoint thresholds of ``feats``.

    Returns (feature, threshold, left_idx, right_idx) or None when no
    admissible split improves on the node. Candidates are scored by the
    between-child sum of squares of the (centered) values; ties are
    broken toward the lowest feature index, then the smallest threshold.
    """
    n = idx.size
    center = values.mean()
    vc = values - center
    total_ss = float(vc @ vc)
    if total_ss <= n * (1e-12 * (1.0 + abs(center))) ** 2:
        return None
    Xn = X[np.ix_(idx, feats)]
    order = np.argsort(Xn, axis=0)
    xs = np.take_along_axis(Xn, order, axis=0)
    vs = vc[order]
    cs = np.cumsum(vs, axis=0)
    tot = cs[-1]
    left_cnt = np.arange(1, n, dtype=np.float64)[:, None]
    num_l = cs[:-1]
    score = num_l * num_l / left_cnt + (tot - num_l) ** 2 / (n - left_cnt)
    valid = xs[1:] > xs[:-1]
    kmin = max(int(math.ceil(alpha * n)), 1)
    if kmin > 1:
        valid[:kmin - 1] = False
        valid[n - kmin:] = False
    score[~valid] = -np.inf
    best_k = np.argmax(score, axis=0)
    cols = np.arange(feats.size)
    best_vals = score[best_k, cols]
    c = int(np.argmax(best_vals))
    if not np.isfinite(best_vals[c]) or best_vals[c] <= _GAIN_TOL * total_ss:
        return None
    kb = int(best_k[c])
    thr = 0.5 * (xs[kb, c] + xs[kb + 1, c])
    if thr >= xs[kb + 1, c]:
        # Midpoint rounded up to the right value; fall back to the left
        # value so that `x <= thr` reproduces the counted partition.
        thr = float(xs[kb, c])
    mask = Xn[:, c] <= thr
    return int(feats[c]), float(thr), idx[mask], idx[~mask]


def _grow(X, target, split_idx, est_idx, drawn, mtry, min_node_size, alpha,
          feature_pool, rng) -> Tree:
    """Recursive partitioning on the split half, honest repopulation after."""
    feature: list[int] = []
    threshold: list[float] = []
    left: list[int] = []
    right: list[int] = []
    depth: list[int] = []

    def new_node(d: int) -> int:
        feature.append(-1)
        threshold.append(np.nan)
        left.append(-1)
        right.append(-1)
        depth.append(d)
        return len(feature) - 1

    root = new_node(0)
    stack = [(root, split_idx)]
    while stack:
        node, idx = stack.pop()
        if idx.size < 2 * min_node_size:
            continue
        values = target.node_values(idx)
        if values is None:
            continue
        feats = np.sort(rng.choice(feature_pool, size=mtry, replace=False))
        found = _best_split(X, values, idx, feats, alpha)
        if found is None:
            continue
        f, thr, left_idx, right_idx = found
        feature[node] = f
        threshold[node] = thr
        lid = new_node(depth[node] + 1)
        rid = new_node(depth[node] + 1)
        left[node] = lid
        right[node] = rid
        stack.append((rid, right_idx))
        stack.append((lid, left_idx))

    tree = Tree(
        feature=np.asarray(feature, dtype=np.int32),
        threshold=np.asarray(threshold, dtype=np.float64),
        left=np.asarray(left, dtype=np.int32),
        right=np.asarray(right, dtype=np.int32),
        depth=np.asarray(depth, dtype=np.int32),
        drawn_clusters=drawn,
        split_sample=split_idx,
        estimation_sample=est_idx,
        leaf_indptr=np.zeros(len(feature) + 1, dtype=np.int64),
        leaf_indices=np.empty(0, dtype=np.int64),
    )
    members_per_node = _repopulate(tree, X, est_idx)
    target.leaf_payload(tree, members_per_node)
    return tree


def _repopulate(tree: Tree, X, est_idx) -> list[np.ndarray]:
    """Route the estimation half down the fitted splits into the leaves."""
    n_nodes = tree.n_nodes
    members: list[np.ndarray] = [np.empty(0, dtype=np.int64)] * n_nodes
    if est_idx.size:
        leaf = _route(tree, X, rows=est_idx)
        order = np.argsort(leaf, kind="stable")
        sorted_leaf = leaf[order]
        bounds = np.flatnonzero(np.diff(sorted_leaf)) + 1
        for grp in np.split(order, bounds):
            members[leaf[grp[0]]] = est_idx[grp]
    indptr = np.zeros(n_nodes + 1, dtype=np.int64)
    for v, m in enumerate(members):
        indptr[v + 1] = indptr[v] + m.size
    tree.leaf_indptr = indptr
    tree.leaf_indices = (np.concatenate(members) if n_nodes else
                         np.empty(0, dtype=np.int64))
    return members


def _route(tree: Tree, X, rows=None) -> np.ndarray:
    """Vectorized leaf lookup; returns the leaf node id per routed row."""
    if rows is None:
        rows = np.arange(X.shape[0])
    node = np.zeros(rows.size, dtype=np.int32)
    while True:
        f = tree.feature[node]
        active = f >= 0
        if not active.any():
            return node
        an = node[active]
        x = X[rows[active], f[active]]
        go_left = x <= tree.threshold[an]
        node[active] = np.where(go_left, tree.left[an], tree.right[an])


def _honest_halves(samples: np.ndarray, honesty_fraction: float,
                   rng: np.random.Generator):
    s = samples.size
    if s == 1:
        return np.empty(0, dtype=np.int64), samples
    n_split = int(math.ceil(honesty_fraction * s))
    n_split = min(max(n_split, 1), s - 1)
    perm = rng.permutation(samples)
    return np.sort(perm[:n_split]), np.sort(perm[n_split:])


def grow_tree(d: Dataset, responses: np.ndarray, samples: np.ndarray,
              params: ForestParams, tree_rng: np.random.Generator) -> Tree:
    """Grow one honest regression tree on a pre-drawn sample set."""
    target = _RegressionTarget(responses)
    pool = np.arange(d.p)
    mtry = resolve_mtry(params, d.p)
    split_idx, est_idx = _honest_halves(np.asarray(samples, dtype=np.int64),
                                        params.honesty_fraction, tree_rng)
    return _grow(d.features, target, split_idx, est_idx,
                 drawn=np.unique(d.cluster_id[samples]),
                 mtry=mtry, min_node_size=params.min_node_size,
                 alpha=params.alpha_child_share, feature_pool=pool,
                 rng=tree_rng)


def _grow_tree_range(X, idx: ClusterIndex, target, params: ForestParams,
                     feature_pool, mtry, b_range) -> list[Tree]:
    trees = []
    for b in b_range:
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=params.seed, spawn_key=(b,)))
        drawn, samples = draw_cluster_subsample(idx, params, rng)
        split_idx, est_idx = _honest_halves(samples, params.honesty_fraction, rng)
        trees.append(_grow(X, target, split_idx, est_idx, drawn,
                           mtry=mtry, min_node_size=params.min_node_size,
                           alpha=params.alpha_child_share,
                           feature_pool=feature_pool, rng=rng))
    return trees


def _fit_forest(X, cluster_id, target, params: ForestParams,
                feature_pool=None, n_jobs: int = 1) -> Forest:
    X = np.asarray(X, dtype=np.float64)
    n, p = X.shape
    idx = _index_from_ids(cluster_id)
    if feature_pool is None:
        feature_pool = np.arange(p)
    feature_pool = np.asarray(feature_pool, dtype=np.int64)
    mtry = resolve_mtry(params, feature_pool.size)
    B = params.num_trees
    if n_jobs == 1 or B == 1:
        trees = _grow_tree_range(X, idx, target, params, feature_pool, mtry,
                                 range(B))
    else:
        n_chunks = min(B, max(1, 8 * abs(n_jobs) if n_jobs > 0 else 16))
        bounds = np.linspace(0, B, n_chunks + 1).astype(int)
        chunks = Parallel(n_jobs=n_jobs)(
            delayed(_grow_tree_range)(X, idx, target, params, feature_pool,
                                      mtry, range(bounds[i], bounds[i + 1]))
            for i in range(n_chunks))
        trees = [t for chunk in chunks for t in chunk]
    return Forest(trees=trees, params=params, p=p, kind=target.kind,
                  feature_pool=feature_pool, n_samples=n,
                  n_clusters=idx.n_clusters, resolved_mtry=mtry,
                  resolved_k=resolve_samples_per_cluster(params, idx.sizes))


def _index_from_ids(cluster_id: np.ndarray) -> ClusterIndex:
    order = np.argsort(cluster_id, kind="stable")
    sorted_ids = cluster_id[order]
    bounds = np.flatnonzero(np.diff(sorted_ids)) + 1
    members = tuple(np.ascontiguousarray(g) for g in np.split(order, bounds))
    sizes = np.array([g.size for g in members], dtype=np.int64)
    return ClusterIndex(members=members, sizes=sizes)


def fit_regression_forest(d: Dataset, responses: np.ndarray,
                          params: ForestParams | None = None,
                          n_jobs: int = 1) -> Forest:
    """Fit a cluster-aware honest regression forest to ``responses``."""
    params = params if params is not None else ForestParams()
    responses = np.asarray(responses, dtype=np.float64)
    if responses.shape != (d.n,):
        raise ParameterError("responses must be a length-n vector")
    if not np.isfinite(responses).all():
        raise ParameterError("responses must be finite")
    return _fit_forest(d.features, d.cluster_id, _RegressionTarget(responses),
                       params, n_jobs=n_jobs)


def _accumulate(forest: Forest, X, rows, stats, oob_cluster_id=None):
    """Sum per-leaf payloads over trees for each routed row.

    ``stats`` names Tree payload arrays; rows whose leaf payload is NaN
    (empty honest leaf) are skipped for that tree. When
    ``oob_cluster_id`` is given, a tree contributes to a row only if the
    row's cluster is outside the tree's drawn cluster set.
    """
    m = rows.size
    sums = {s: np.zeros(m) for s in stats}
    count = np.zeros(m, dtype=np.int64)
    primary = stats[0]
    for tree in forest.trees:
        payloads = {s: getattr(tree, s) for s in stats}
        if oob_cluster_id is not None:
            in_tree = np.zeros(forest.n_clusters, dtype=bool)
            in_tree[tree.drawn_clusters] = True
            keep = ~in_tree[oob_cluster_id[rows]]
            if not keep.any():
                continue
            sel = rows[keep]
            leaf = _route(tree, X, rows=sel)
            ok = ~np.isnan(payloads[primary][leaf])
            target_rows = np.flatnonzero(keep)[ok]
        else:
            leaf = _route(tree, X, rows=rows)
            ok = ~np.isnan(payloads[primary][leaf])
            target_rows = np.flatnonzero(ok)
        if not ok.any():
            continue
        for s in stats:
            sums[s][target_rows] += payloads[s][leaf[ok]]
        count[target_rows] += 1
    return sums, count


def predict_batch(forest: Forest, X) -> np.ndarray:
    """Ensemble predictions for the rows of X (regression forests)."""
    if forest.kind != "regression":
        raise ParameterError("predict_batch expects a regression forest")
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != forest.p:
        raise ParameterError(f"expected {forest.p} features, got {X.shape[1]}")
    sums, count = _accumulate(forest, X, np.arange(X.shape[0]), ("leaf_mean",))
    if (count == 0).any():
        raise PredictionError("all trees were skipped for at least one row")
    return sums["leaf_mean"] / count


def predict(forest: Forest, x) -> float:
    """Ensemble prediction at a single point."""
    return float(predict_batch(forest, np.asarray(x, dtype=np.float64)[None, :])[0])


def predict_oob(forest: Forest, d: Dataset):
    """Cluster-aware out-of-bag predictions for the training samples.

    A tree contributes to sample i only when i's cluster was not drawn
    by that tree. Returns (values, missing) where ``missing`` flags
    samples with no qualifying tree; their value is NaN.
    """
    if forest.kind != "regression":
        raise ParameterError("predict_oob expects a regression forest")
    rows = np.arange(d.n)
    sums, count = _accumulate(forest, d.features, rows, ("leaf_mean",),
                              oob_cluster_id=d.cluster_id)
    missing = count == 0
    values = np.full(d.n, np.nan)
    values[~missing] = sums["leaf_mean"][~missing] / count[~missing]
    return values, missing


def kernel_weights(forest: Forest, x) -> dict[int, float]:
    """Forest kernel at x: sample index -> weight, summing to 1.

    The weight of training sample i is the average over non-skipped
    trees of 1/|leaf| over the leaves containing both i and x.
    """
    x = np.asarray(x, dtype=np.float64)
    raw: dict[int, float] = {}
    used = 0
    for tree in forest.trees:
        node = 0
        while tree.feature[node] >= 0:
            if x[tree.feature[node]] <= tree.threshold[node]:
                node = tree.left[node]
            else:
                node = tree.right[node]
        members = tree.leaf_members(node)
        if members.size == 0:
            continue
        used += 1
        share = 1.0 / members.size
        for i in members.tolist():
            raw[i] = raw.get(i, 0.0) + share
    if used == 0:
        return {}
    return {i: v / used for i, v in sorted(raw.items())}


def variable_importance(forest: Forest) -> np.ndarray:
    """Depth-weighted split frequencies, normalized to sum to 1.

    For each depth level 1..4 (root split = depth 1) the per-feature
    share of that level's splits is computed across all trees; levels
    are combined with weights proportional to depth^-2 and the result is
    renormalized. A forest with no splits returns the uniform vector.
    """
    if forest.num_trees == 0:
        raise ParameterError("forest has no trees")
    p = forest.p
    counts = np.zeros((IMPORTANCE_MAX_DEPTH, p))
    for tree in forest.trees:
        internal = tree.feature >= 0
        if not internal.any():
            continue
        level = tree.depth[internal] + 1
        feat = tree.feature[internal]
        keep = level <= IMPORTANCE_MAX_DEPTH
        np.add.at(counts, (level[keep] - 1, feat[keep]), 1.0)
    level_totals = counts.sum(axis=1, keepdims=True)
    freq = np.divide(counts, level_totals, out=np.zeros_like(counts),
                     where=level_totals > 0)
    weights = (1.0 + np.arange(IMPORTANCE_MAX_DEPTH)) ** -IMPORTANCE_DECAY_EXPONENT
    weights = weights / weights.sum()
    imp = weights @ freq
    total = imp.sum()
    if total <= 0:
        return np.full(p, 1.0 / p)
    return imp / total


_FOREST_FORMAT = "causalgrove.forest"
_FOREST_VERSION = 1


def _array_out(a: np.ndarray) -> list:
    if a.dtype.kind == "f":
        return [None if math.isnan(v) else v for v in a.tolist()]
    return a.tolist()


def _float_in(values, dtype=np.float64) -> np.ndarray:
    return np.array([np.nan if v is None else v for v in values], dtype=dtype)


def forest_to_json(forest: Forest) -> dict:
    """Serialize a forest to a versioned JSON-compatible document."""
    trees = []
    for t in forest.trees:
        entry = {
            "feature": t.feature.tolist(),
            "threshold": _array_out(t.threshold),
            "left": t.left.tolist(),
            "right": t.right.tolist(),
            "depth": t.depth.tolist(),
            "drawn_clusters": t.drawn_clusters.tolist(),
            "split_sample": t.split_sample.tolist(),
            "estimation_sample": t.estimation_sample.tolist(),
            "leaf_indptr": t.leaf_indptr.tolist(),
            "leaf_indices": t.leaf_indices.tolist(),
        }
        for name in ("leaf_mean", "leaf_num", "leaf_den"):
            arr = getattr(t, name)
            if arr is not None:
                entry[name] = _array_out(arr)
        trees.append(entry)
    return {
        "format": _FOREST_FORMAT,
        "version": _FOREST_VERSION,
        "kind": forest.kind,
        "p": forest.p,
        "n_samples": forest.n_samples,
        "n_clusters": forest.n_clusters,
        "feature_pool": forest.feature_pool.tolist(),
        "resolved_mtry": forest.resolved_mtry,
        "resolved_k": forest.resolved_k,
        "params": params_to_dict(forest.params),
        "trees": trees,
    }


def forest_from_json(doc: dict) -> Forest:
    """Rebuild a forest from its JSON document."""
    if doc.get("format") != _FOREST_FORMAT:
        raise ParameterError("not a serialized forest document")
    if doc.get("version") != _FOREST_VERSION:
        raise ParameterError(f"unsupported forest version {doc.get('version')!r}")
    trees = []
    for entry in doc["trees"]:
        trees.append(Tree(
            feature=np.array(entry["feature"], dtype=np.int32),
            threshold=_float_in(entry["threshold"]),
            left=np.array(entry["left"], dtype=np.int32),
            right=np.array(entry["right"], dtype=np.int32),
            depth=np.array(entry["depth"], dtype=np.int32),
            drawn_clusters=np.array(entry["drawn_clusters"], dtype=np.int64),
            split_sample=np.array(entry["split_sample"], dtype=np.int64),
            estimation_sample=np.array(entry["estimation_sample"], dtype=np.int64),
            leaf_indptr=np.array(entry["leaf_indptr"], dtype=np.int64),
            leaf_indices=np.array(entry["leaf_indices"], dtype=np.int64),
            leaf_mean=_float_in(entry["leaf_mean"]) if "leaf_mean" in entry else None,
            leaf_num=_float_in(entry["leaf_num"]) if "leaf_num" in entry else None,
            leaf_den=_float_in(entry["leaf_den"]) if "leaf_den" in entry else None,
        ))
    return Forest(trees=trees, params=params_from_dict(doc["params"]),
                  p=int(doc["p"]), kind=doc["kind"],
                  feature_pool=np.array(doc["feature_pool"], dtype=np.int64),
                  n_samples=int(doc["n_samples"]),
                  n_clusters=int(doc["n_clusters"]),
                  resolved_mtry=int(doc["resolved_mtry"]),
                  resolved_k=int(doc["resolved_k"]))


def params_to_dict(params: ForestParams) -> dict:
    return {
        "num_trees": params.num_trees,
        "sample_fraction": params.sample_fraction,
        "samples_per_cluster": params.samples_per_cluster,
        "mtry": params.mtry,
        "min_node_size": params.min_node_size,
        "honesty_fraction": params.honesty_fraction,
        "alpha_child_share": params.alpha_child_share,
        "seed": params.seed,
    }


def params_from_dict(doc: dict) -> ForestParams:
    return ForestParams(**doc)


def save_forest(forest: Forest, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(forest_to_json(forest), fh)


def load_forest(path) -> Forest:
    with open(path, "r", encoding="utf-8") as fh:
        return forest_from_json(json.load(fh))
