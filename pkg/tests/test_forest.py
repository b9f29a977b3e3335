import json
import math

import numpy as np
import pytest

from causalgrove.data import Dataset, build_cluster_index, simulate_school_data
from causalgrove.errors import ParameterError
from causalgrove.forest import (
    Forest,
    ForestParams,
    Tree,
    draw_cluster_subsample,
    fit_regression_forest,
    forest_from_json,
    forest_to_json,
    grow_tree,
    kernel_weights,
    predict,
    predict_batch,
    predict_oob,
    variable_importance,
)


def make_dataset(n=200, p=4, seed=0, clusters=None, signal=1.0, noise=1.0):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, p))
    y = signal * X[:, 0] + noise * rng.standard_normal(n)
    d = Dataset.from_arrays(X, y, rng.integers(0, 2, n).astype(float),
                            cluster=clusters)
    return d, y


def leaf_tree(members, value, n_samples=10):
    """Hand-built single-leaf tree holding the given estimation members."""
    members = np.asarray(members, dtype=np.int64)
    return Tree(
        feature=np.array([-1], dtype=np.int32),
        threshold=np.array([np.nan]),
        left=np.array([-1], dtype=np.int32),
        right=np.array([-1], dtype=np.int32),
        depth=np.array([0], dtype=np.int32),
        drawn_clusters=np.arange(n_samples, dtype=np.int64),
        split_sample=np.empty(0, dtype=np.int64),
        estimation_sample=members,
        leaf_indptr=np.array([0, members.size], dtype=np.int64),
        leaf_indices=members,
        leaf_mean=np.array([float(value)]),
    )


class TestDrawClusterSubsample:
    def test_counts_from_rule(self):
        # 4 clusters of 3, draw half the clusters, 2 members each.
        d, _ = simulate_school_data(4, 3, seed=0)
        idx = build_cluster_index(d)
        params = ForestParams(sample_fraction=0.5, samples_per_cluster=2)
        drawn, samples = draw_cluster_subsample(idx, params,
                                                np.random.default_rng(0))
        assert drawn.size == 2
        assert samples.size == 4
        assert np.unique(samples).size == 4

    def test_small_cluster_used_whole(self):
        d = Dataset.from_arrays(np.zeros((5, 1)), np.zeros(5), np.zeros(5),
                                cluster=[1, 2, 2, 2, 2])
        idx = build_cluster_index(d)
        params = ForestParams(sample_fraction=1.0, samples_per_cluster=50)
        drawn, samples = draw_cluster_subsample(idx, params,
                                                np.random.default_rng(3))
        assert drawn.size == 2
        np.testing.assert_array_equal(np.sort(samples), np.arange(5))

    def test_trivial_clustering_reduces_to_subsampling(self):
        d, _ = make_dataset(n=101, seed=1)
        idx = build_cluster_index(d)
        params = ForestParams(sample_fraction=0.5)
        drawn, samples = draw_cluster_subsample(idx, params,
                                                np.random.default_rng(5))
        assert samples.size == math.ceil(0.5 * 101)
        assert np.unique(samples).size == samples.size

    def test_every_drawn_cluster_contributes(self):
        d, _ = simulate_school_data(10, 7, seed=2)
        idx = build_cluster_index(d)
        params = ForestParams(sample_fraction=0.7, samples_per_cluster=3)
        drawn, samples = draw_cluster_subsample(idx, params,
                                                np.random.default_rng(1))
        present = np.unique(d.cluster_id[samples])
        np.testing.assert_array_equal(present, drawn)


def brute_force_best_split(X, y, alpha=0.05):
    """Exhaustive CART oracle: scan every feature and every midpoint."""
    n = X.shape[0]
    kmin = max(math.ceil(alpha * n), 1)
    best = None
    for f in range(X.shape[1]):
        order = np.argsort(X[:, f])
        xs, ys = X[order, f], y[order]
        for k in range(kmin, n - kmin + 1):
            if k == 0 or k == n or xs[k - 1] >= xs[k]:
                continue
            left, right = ys[:k], ys[k:]
            score = (np.var(y) * n
                     - len(left) * np.var(left) - len(right) * np.var(right))
            if best is None or score > best[0] + 1e-12:
                best = (score, f, 0.5 * (xs[k - 1] + xs[k]))
    return best


class TestGrowTree:
    def test_constant_responses_single_leaf(self):
        d, _ = make_dataset(n=60, seed=2)
        params = ForestParams(num_trees=1, seed=0)
        tree = grow_tree(d, np.full(d.n, 3.3), np.arange(d.n), params,
                         np.random.default_rng(0))
        assert tree.n_nodes == 1
        assert tree.feature[0] == -1

    def test_root_split_matches_exhaustive_oracle(self):
        # Separable responses: y flips sign with feature 1 at threshold 0.
        rng = np.random.default_rng(3)
        X = rng.standard_normal((10, 2))
        y = np.where(X[:, 0] > 0, 1.0, -1.0)
        d = Dataset.from_arrays(X, y, np.zeros(10))
        params = ForestParams(num_trees=1, mtry=2, min_node_size=1,
                              honesty_fraction=0.5, seed=0)
        tree = grow_tree(d, y, np.arange(10), params, np.random.default_rng(7))
        split_half = tree.split_sample
        oracle = brute_force_best_split(X[split_half], y[split_half])
        assert tree.feature[0] == oracle[1] == 0
        assert abs(tree.threshold[0] - oracle[2]) < 1e-12
        lo = X[split_half, 0][X[split_half, 0] <= 0].max()
        hi = X[split_half, 0][X[split_half, 0] > 0].min()
        assert lo <= tree.threshold[0] < hi

    def test_honesty_no_split_half_leakage(self):
        d, y = make_dataset(n=80, seed=4)
        params = ForestParams(num_trees=1, min_node_size=2, seed=0)
        tree = grow_tree(d, y, np.arange(d.n), params, np.random.default_rng(1))
        split_set = set(tree.split_sample.tolist())
        est_set = set(tree.estimation_sample.tolist())
        assert not split_set & est_set
        for node in range(tree.n_nodes):
            members = set(tree.leaf_members(node).tolist())
            assert not members & split_set
            assert members <= est_set

    def test_child_share_constraint(self):
        d, y = make_dataset(n=100, seed=5)
        params = ForestParams(num_trees=1, min_node_size=1,
                              alpha_child_share=0.3, seed=0)
        tree = grow_tree(d, y, np.arange(d.n), params, np.random.default_rng(2))
        # Recount the split-half members of each internal node's children.
        from causalgrove.forest import _route
        leaf_of = {}
        for i in tree.split_sample:
            node = 0
            path = [0]
            while tree.feature[node] >= 0:
                if d.features[i, tree.feature[node]] <= tree.threshold[node]:
                    node = tree.left[node]
                else:
                    node = tree.right[node]
                path.append(node)
            for v in path:
                leaf_of.setdefault(v, 0)
                leaf_of[v] += 1
        for v in range(tree.n_nodes):
            if tree.feature[v] >= 0:
                n_node = leaf_of[v]
                for child in (tree.left[v], tree.right[v]):
                    assert leaf_of.get(child, 0) >= math.ceil(0.3 * n_node)


class TestForestPrediction:
    def test_single_tree_single_leaf_mean(self):
        rng = np.random.default_rng(0)
        X = rng.standard_normal((12, 2))
        y = np.zeros(12)
        d = Dataset.from_arrays(X, y, np.zeros(12))
        forest = Forest(trees=[leaf_tree([0, 1], value=2.0, n_samples=12)],
                        params=ForestParams(num_trees=1), p=2,
                        kind="regression", feature_pool=np.arange(2),
                        n_samples=12, n_clusters=12, resolved_mtry=2,
                        resolved_k=1)
        assert predict(forest, X[3]) == 2.0

    def test_two_trees_average(self):
        forest = Forest(trees=[leaf_tree([0], 1.0), leaf_tree([1], 3.0)],
                        params=ForestParams(num_trees=2), p=2,
                        kind="regression", feature_pool=np.arange(2),
                        n_samples=10, n_clusters=10, resolved_mtry=2,
                        resolved_k=1)
        assert predict(forest, np.zeros(2)) == 2.0

    def test_constant_responses_predict_constant(self):
        d, _ = make_dataset(n=120, seed=6)
        f = fit_regression_forest(d, np.full(d.n, 5.5),
                                  ForestParams(num_trees=20, seed=1))
        preds = predict_batch(f, d.features[:10])
        np.testing.assert_allclose(preds, 5.5, atol=1e-12)

    def test_kernel_equivalence(self):
        d, y = make_dataset(n=250, p=5, seed=7)
        f = fit_regression_forest(d, y, ForestParams(num_trees=40, seed=2))
        rng = np.random.default_rng(0)
        for _ in range(20):
            x = rng.standard_normal(5)
            weights = kernel_weights(f, x)
            assert abs(sum(weights.values()) - 1.0) < 1e-12
            kernel_pred = sum(w * y[i] for i, w in weights.items())
            assert abs(predict(f, x) - kernel_pred) <= 1e-10

    def test_kernel_weights_two_singleton_leaves(self):
        # Explicit evaluation of the kernel average over two trees whose
        # leaves at x hold the singleton estimation samples {4} and {9}.
        forest = Forest(trees=[leaf_tree([4], 1.0), leaf_tree([9], 3.0)],
                        params=ForestParams(num_trees=2), p=2,
                        kind="regression", feature_pool=np.arange(2),
                        n_samples=10, n_clusters=10, resolved_mtry=2,
                        resolved_k=1)
        weights = kernel_weights(forest, np.zeros(2))
        assert weights == {4: 0.5, 9: 0.5}

    def test_single_tree_leaf_pair(self):
        forest = Forest(trees=[leaf_tree([4, 9], 2.0)],
                        params=ForestParams(num_trees=1), p=2,
                        kind="regression", feature_pool=np.arange(2),
                        n_samples=10, n_clusters=10, resolved_mtry=2,
                        resolved_k=1)
        assert kernel_weights(forest, np.ones(2)) == {4: 0.5, 9: 0.5}


class TestOob:
    def test_oob_trees_exclude_own_cluster(self):
        d, _ = simulate_school_data(8, 12, seed=3)
        f = fit_regression_forest(d, d.outcome, ForestParams(num_trees=30, seed=4))
        for tree in f.trees:
            drawn = set(tree.drawn_clusters.tolist())
            for i in tree.estimation_sample:
                assert d.cluster_id[i] in drawn

    def test_cluster_always_drawn_is_missing(self):
        # With 2 clusters and full sample fraction, every tree draws both
        # clusters, so no sample is ever out-of-bag.
        d, _ = simulate_school_data(2, 10, seed=1)
        f = fit_regression_forest(
            d, d.outcome, ForestParams(num_trees=10, sample_fraction=1.0, seed=0))
        values, missing = predict_oob(f, d)
        assert missing.all()

    def test_reduces_to_standard_oob_without_clusters(self):
        d, y = make_dataset(n=90, seed=8)
        f = fit_regression_forest(d, y, ForestParams(num_trees=25, seed=3))
        values, missing = predict_oob(f, d)
        # Manual recomputation from tree internals.
        for i in range(0, 90, 17):
            contribs = []
            for tree in f.trees:
                if i in set(tree.drawn_clusters.tolist()):
                    continue
                node = 0
                while tree.feature[node] >= 0:
                    if d.features[i, tree.feature[node]] <= tree.threshold[node]:
                        node = tree.left[node]
                    else:
                        node = tree.right[node]
                if not math.isnan(tree.leaf_mean[node]):
                    contribs.append(tree.leaf_mean[node])
            if contribs:
                assert abs(values[i] - np.mean(contribs)) < 1e-12
            else:
                assert missing[i]

    def test_consistency_smoke(self):
        # Forest beats the constant predictor on a linear signal.
        rng = np.random.default_rng(9)
        X = rng.standard_normal((2000, 5))
        y = X[:, 0] + rng.standard_normal(2000)
        d = Dataset.from_arrays(X, y, np.zeros(2000))
        f = fit_regression_forest(d, y, ForestParams(num_trees=100, seed=5))
        oob, missing = predict_oob(f, d)
        keep = ~missing
        forest_mse = np.mean((oob[keep] - y[keep]) ** 2)
        const_mse = np.mean((y[keep] - y[keep].mean()) ** 2)
        assert forest_mse < const_mse


class TestVariableImportance:
    def test_all_splits_one_feature(self):
        d, _ = make_dataset(n=300, p=3, seed=10, signal=3.0, noise=0.1)
        y = d.features[:, 2] * 5.0
        f = fit_regression_forest(d, y, ForestParams(num_trees=15, seed=6))
        imp = variable_importance(f)
        assert imp.argmax() == 2
        assert imp[2] > 0.9

    def test_no_splits_uniform(self):
        d, _ = make_dataset(n=40, p=4, seed=11)
        f = fit_regression_forest(d, np.zeros(d.n), ForestParams(num_trees=5, seed=0))
        np.testing.assert_allclose(variable_importance(f), 0.25)

    def test_depth_weighting_hand_forest(self):
        # One depth-1 split on feature 0, one depth-2 split on feature 1:
        # weighted shares 1 and 1/4 normalize to 0.8 and 0.2.
        tree = Tree(
            feature=np.array([0, 1, -1, -1, -1], dtype=np.int32),
            threshold=np.array([0.0, 0.0, np.nan, np.nan, np.nan]),
            left=np.array([1, 3, -1, -1, -1], dtype=np.int32),
            right=np.array([2, 4, -1, -1, -1], dtype=np.int32),
            depth=np.array([0, 1, 1, 2, 2], dtype=np.int32),
            drawn_clusters=np.arange(4, dtype=np.int64),
            split_sample=np.arange(4, dtype=np.int64),
            estimation_sample=np.arange(4, dtype=np.int64),
            leaf_indptr=np.zeros(6, dtype=np.int64),
            leaf_indices=np.empty(0, dtype=np.int64),
            leaf_mean=np.full(5, np.nan),
        )
        forest = Forest(trees=[tree], params=ForestParams(num_trees=1), p=3,
                        kind="regression", feature_pool=np.arange(3),
                        n_samples=4, n_clusters=4, resolved_mtry=3,
                        resolved_k=1)
        imp = variable_importance(forest)
        np.testing.assert_allclose(imp, [0.8, 0.2, 0.0])


class TestDeterminism:
    def test_same_seed_same_forest(self):
        d, y = make_dataset(n=150, seed=12)
        f1 = fit_regression_forest(d, y, ForestParams(num_trees=12, seed=9))
        f2 = fit_regression_forest(d, y, ForestParams(num_trees=12, seed=9))
        assert forest_to_json(f1) == forest_to_json(f2)

    def test_worker_count_invariance(self):
        d, y = make_dataset(n=150, seed=13)
        f1 = fit_regression_forest(d, y, ForestParams(num_trees=8, seed=10),
                                   n_jobs=1)
        f2 = fit_regression_forest(d, y, ForestParams(num_trees=8, seed=10),
                                   n_jobs=2)
        assert forest_to_json(f1) == forest_to_json(f2)

    def test_single_tree_forest_equals_leaf_means(self):
        d, y = make_dataset(n=100, seed=14)
        f = fit_regression_forest(d, y, ForestParams(num_trees=1, seed=11))
        tree = f.trees[0]
        x = d.features[17]
        node = 0
        while tree.feature[node] >= 0:
            if x[tree.feature[node]] <= tree.threshold[node]:
                node = tree.left[node]
            else:
                node = tree.right[node]
        assert predict(f, x) == pytest.approx(tree.leaf_mean[node], abs=1e-15)


class TestSerialization:
    def test_roundtrip_preserves_predictions(self, tmp_path):
        d, y = make_dataset(n=130, seed=15)
        f = fit_regression_forest(d, y, ForestParams(num_trees=10, seed=12))
        doc = json.loads(json.dumps(forest_to_json(f)))
        f2 = forest_from_json(doc)
        x = d.features[:20]
        np.testing.assert_array_equal(predict_batch(f, x), predict_batch(f2, x))
        v1, m1 = predict_oob(f, d)
        v2, m2 = predict_oob(f2, d)
        np.testing.assert_array_equal(m1, m2)
        np.testing.assert_array_equal(v1[~m1], v2[~m2])

    def test_version_check(self):
        d, y = make_dataset(n=60, seed=16)
        f = fit_regression_forest(d, y, ForestParams(num_trees=2, seed=0))
        doc = forest_to_json(f)
        doc["version"] = 99
        with pytest.raises(ParameterError):
            forest_from_json(doc)


class TestParamValidation:
    @pytest.mark.parametrize("kwargs", [
        {"num_trees": 0},
        {"sample_fraction": 0.0},
        {"sample_fraction": 1.5},
        {"honesty_fraction": 1.0},
        {"alpha_child_share": 0.5},
        {"min_node_size": 0},
        {"samples_per_cluster": 0},
        {"samples_per_cluster": "median"},
        {"seed": -1},
    ])
    def test_bad_params(self, kwargs):
        with pytest.raises(ParameterError):
            ForestParams(**kwargs)

    def test_mtry_exceeding_pool(self):
        d, y = make_dataset(n=50, p=3, seed=17)
        with pytest.raises(ParameterError):
            fit_regression_forest(d, y, ForestParams(num_trees=2, mtry=5))
