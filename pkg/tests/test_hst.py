import math

import numpy as np
import pytest

from gpmd.hst import HstTree, frt_embed, leaf_count_ratios, tree_distance
from gpmd.metric import FiniteMetric, grid_metric

from conftest import random_hst


def star_tree(weights=(1.0, 1.0)) -> HstTree:
    n = len(weights)
    metric = FiniteMetric.from_matrix(np.where(np.eye(n), 0.0, min(weights) * 2))
    return HstTree(
        parent=np.array([-1] + [0] * n),
        weight=np.array([0.0, *weights]),
        leaf_vertex=np.arange(1, n + 1),
        tau=2.0,
        metric=metric,
    )


def depth3_tree() -> HstTree:
    # root -> a, b ; a -> c, leaf l3 ; c -> l1, l2 ; b -> l4
    parent = np.array([-1, 0, 0, 1, 3, 3, 1, 2])
    weight = np.array([0.0, 8.0, 8.0, 4.0, 2.0, 2.0, 4.0, 4.0])
    leaf_vertex = np.array([4, 5, 6, 7])  # l1, l2, l3, l4
    metric = FiniteMetric.from_matrix(np.where(np.eye(4), 0.0, 4.0))
    return HstTree(parent=parent, weight=weight, leaf_vertex=leaf_vertex, tau=2.0, metric=metric)


class TestTreeDistance:
    def test_identity(self):
        t = star_tree()
        assert tree_distance(t, 0, 0) == 0.0

    def test_star_two_leaves(self):
        t = star_tree((1.0, 1.0))
        assert tree_distance(t, 0, 1) == pytest.approx(2.0)

    def test_depth3_child_side_weights(self):
        # Path sums the child-side weight of every traversed edge once:
        # two leaves under sibling subtrees meet at their grandparent.
        t = depth3_tree()
        w = t.weight
        expected = w[4] + w[3] + w[6]  # l1 -> c -> a <- l3
        assert tree_distance(t, 0, 2) == pytest.approx(expected)

    def test_symmetry_and_triangle(self, rng):
        t = random_hst(rng, 12)
        D = t.distance_matrix()
        assert np.allclose(D, D.T)
        for _ in range(200):
            i, j, k = rng.integers(0, 12, 3)
            assert D[i, j] <= D[i, k] + D[k, j] + 1e-12

    def test_unknown_leaf(self):
        t = star_tree()
        with pytest.raises(ValueError, match="unknown point"):
            tree_distance(t, 0, 99)


class TestLeafCountRatios:
    def test_only_child(self):
        # vertex 3 (c) has 2 leaves, its parent a has 3; l4 is an only child of b.
        t = depth3_tree()
        theta, eta, delta = leaf_count_ratios(t, 7)
        assert (theta, eta, delta) == (1.0, 1.0, 1.0)

    def test_binary_equal_split(self):
        t = star_tree((1.0, 1.0))
        theta, eta, delta = leaf_count_ratios(t, 1)
        assert theta == pytest.approx(0.5)
        assert eta == pytest.approx(1.0 + math.log(2.0))
        assert delta == pytest.approx(0.5 / (1.0 + math.log(2.0)))

    def test_one_of_four(self):
        t = star_tree((1.0, 1.0, 1.0, 1.0))
        theta, eta, delta = leaf_count_ratios(t, 2)
        assert theta == pytest.approx(0.25)
        assert eta == pytest.approx(1.0 + math.log(4.0))
        assert delta == pytest.approx(0.25 / (1.0 + math.log(4.0)))

    def test_root_rejected(self):
        t = star_tree()
        with pytest.raises(ValueError, match="root"):
            leaf_count_ratios(t, t.root)


class TestTreeValidation:
    def test_weight_decay_enforced(self):
        metric = FiniteMetric.from_matrix(np.where(np.eye(2), 0.0, 1.0))
        with pytest.raises(ValueError, match="decay"):
            HstTree(
                parent=np.array([-1, 0, 1, 1]),
                weight=np.array([0.0, 4.0, 3.0, 3.0]),  # 3 > 4/2
                leaf_vertex=np.array([2, 3]),
                tau=2.0,
                metric=metric,
            )

    def test_internal_vertex_needs_children(self):
        metric = FiniteMetric.from_matrix(np.zeros((1, 1)))
        with pytest.raises(ValueError, match="no children"):
            HstTree(
                parent=np.array([-1, 0, 0]),
                weight=np.array([0.0, 1.0, 1.0]),
                leaf_vertex=np.array([1]),  # vertex 2 is childless and not a leaf
                tau=2.0,
                metric=metric,
            )

    def test_records_roundtrip(self):
        t = depth3_tree()
        recs = t.to_records()
        assert len(recs) == t.n_vertices
        labels = [r["leaf_label"] for r in recs if r["leaf_label"] is not None]
        assert sorted(labels) == sorted(t.metric.labels)


class TestFrtEmbed:
    def test_single_point(self):
        m = FiniteMetric.from_matrix(np.zeros((1, 1)))
        t = frt_embed(m, tau=5.0, rng_seed=0)
        assert t.n_vertices == 1 and t.n_leaves == 1
        assert tree_distance(t, 0, 0) == 0.0

    def test_two_points_dominance_every_seed(self):
        m = FiniteMetric.from_matrix(np.array([[0.0, 3.0], [3.0, 0.0]]))
        for seed in range(40):
            t = frt_embed(m, tau=5.0, rng_seed=seed)
            assert tree_distance(t, 0, 1) >= 3.0

    def test_dominance_random_metrics(self, rng):
        for trial in range(10):
            pts = rng.uniform(0.0, 1.0, size=(12, 2))
            m = FiniteMetric.from_coords(pts)
            t = frt_embed(m, tau=5.0, rng_seed=trial)
            assert np.all(t.distance_matrix() >= m.dist - 1e-12)

    def test_deterministic_in_seed(self):
        m = grid_metric(3, 3)
        a = frt_embed(m, tau=5.0, rng_seed=11)
        b = frt_embed(m, tau=5.0, rng_seed=11)
        assert np.array_equal(a.parent, b.parent)
        assert np.allclose(a.weight, b.weight)

    def test_invalid_tau(self):
        m = grid_metric(2, 2)
        with pytest.raises(ValueError, match="tau"):
            frt_embed(m, tau=1.0, rng_seed=0)

    def test_duplicates_collapse_to_zero_weight_fanout(self):
        pts = np.array([[0.0, 0.0], [0.0, 0.0], [1.0, 0.0]])
        m = FiniteMetric.from_coords(pts)
        t = frt_embed(m, tau=5.0, rng_seed=2)
        assert t.n_leaves == 3
        assert tree_distance(t, 0, 1) == 0.0
        assert tree_distance(t, 0, 2) >= 1.0

    def test_all_zero_metric(self):
        m = FiniteMetric.from_matrix(np.zeros((3, 3)))
        t = frt_embed(m, tau=5.0, rng_seed=0)
        assert t.n_leaves == 3
        assert t.distance_matrix().max() == 0.0

    def test_distortion_statistic_small(self, rng):
        # Statistical soft check at test scale; the acceptance suite runs the
        # full 200-seed version.
        m = grid_metric(4, 4)
        ratios = []
        mask = m.dist > 0
        for seed in range(30):
            t = frt_embed(m, tau=5.0, rng_seed=seed)
            DT = t.distance_matrix()
            ratios.append((DT[mask] / m.dist[mask]).mean())
        assert np.mean(ratios) <= 8.0 * math.log(16)

    def test_tau_decay_after_construction(self):
        m = grid_metric(5, 5)
        t = frt_embed(m, tau=5.0, rng_seed=9)
        root = t.root
        for v in range(t.n_vertices):
            p = t.parent[v]
            if p >= 0 and p != root:
                assert t.weight[v] <= t.weight[p] / t.tau + 1e-12
