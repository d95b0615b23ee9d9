"""Shared fixtures and independent oracles used across the test suite."""

import numpy as np
import pytest
from scipy.optimize import linprog

from gpmd.hst import HstTree
from gpmd.metric import FiniteMetric


@pytest.fixture
def rng():
    return np.random.default_rng(20240811)


def random_hst(rng, n_leaves: int, tau: float = 5.0, max_children: int = 4) -> HstTree:
    """A random laminar hierarchy with exact tau-decay, metric = its own d_T."""
    parents = [-1]
    depths = [0]
    leaf_vertex = np.full(n_leaves, -1, dtype=np.int64)

    def split(vertex: int, members: list):
        if len(members) == 1:
            leaf_vertex[members[0]] = vertex
            return
        k = min(len(members), int(rng.integers(2, max_children + 1)))
        cuts = sorted(rng.choice(np.arange(1, len(members)), size=k - 1, replace=False))
        groups = np.split(np.asarray(members), cuts)
        for g in groups:
            parents.append(vertex)
            depths.append(depths[vertex] + 1)
            split(len(parents) - 1, list(g))

    order = list(rng.permutation(n_leaves))
    if n_leaves == 1:
        leaf_vertex[0] = 0
    else:
        split(0, order)
    w0 = float(rng.uniform(0.5, 4.0))
    weights = np.array([0.0 if d == 0 else w0 * tau ** (1 - d) for d in depths])
    zero = FiniteMetric.from_matrix(np.zeros((n_leaves, n_leaves)))
    probe = HstTree(
        parent=np.asarray(parents, dtype=np.int64),
        weight=weights,
        leaf_vertex=leaf_vertex,
        tau=tau,
        metric=zero,
    )
    metric = FiniteMetric.from_matrix(probe.distance_matrix())
    return HstTree(
        parent=np.asarray(parents, dtype=np.int64),
        weight=weights,
        leaf_vertex=leaf_vertex,
        tau=tau,
        metric=metric,
    )


def lp_transport_cost(cost: np.ndarray, a: np.ndarray, b: np.ndarray) -> float:
    """Dense LP oracle for the optimal-transport value with ground cost ``cost``."""
    n = cost.shape[0]
    rows = []
    for i in range(n):
        row = np.zeros((n, n))
        row[i, :] = 1.0
        rows.append(row.ravel())
    for j in range(n):
        row = np.zeros((n, n))
        row[:, j] = 1.0
        rows.append(row.ravel())
    A_eq = np.asarray(rows)[:-1]  # drop one redundant marginal constraint
    b_eq = np.concatenate([a, b])[:-1]
    res = linprog(cost.ravel(), A_eq=A_eq, b_eq=b_eq, bounds=(0, None), method="highs")
    assert res.status == 0, res.message
    return float(res.fun)
