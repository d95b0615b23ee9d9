"""Optimal transport between leaf distributions under the tree metric.

On a weighted tree the Wasserstein-1 distance has the closed form
sum_v w_v * |z_v - z'_v| over the lifted subtree masses, and an optimal
coupling is built greedily: mass that can stay put stays put, and per
subtree the remaining surplus is matched against the deficit before the
imbalance is routed through the parent edge.
"""

from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass

import numpy as np

from .hst import HstTree
from .mirror import MdEngine

DIST_SUM_TOL = 1e-10
MARGINAL_TOL = 1e-9


@dataclass(frozen=True)
class LeafDistribution:
    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=float)
        object.__setattr__(self, "probs", p)
        if np.any(p < 0):
            raise ValueError("leaf probabilities must be non-negative")
        if abs(p.sum() - 1.0) > DIST_SUM_TOL:
            raise ValueError(f"leaf probabilities sum to {p.sum()!r}, not 1")


@dataclass(frozen=True)
class Coupling:
    """Sparse joint distribution over (previous leaf, next leaf) pairs."""

    tree: HstTree
    pairs: tuple  # ((i, j, mass), ...)

    def row_marginal(self) -> np.ndarray:
        out = np.zeros(self.tree.n_leaves)
        for i, _, m in self.pairs:
            out[i] += m
        return out

    def col_marginal(self) -> np.ndarray:
        out = np.zeros(self.tree.n_leaves)
        for _, j, m in self.pairs:
            out[j] += m
        return out

    def expected_cost(self) -> float:
        return float(sum(m * self.tree.tree_distance(i, j) for i, j, m in self.pairs))

    def conditional_row(self, prev: int) -> tuple[np.ndarray, np.ndarray]:
        js = np.array([j for i, j, _ in self.pairs if i == prev], dtype=np.int64)
        ms = np.array([m for i, _, m in self.pairs if i == prev], dtype=float)
        return js, ms

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["prev_leaf", "next_leaf", "mass"])
            for i, j, m in self.pairs:
                writer.writerow([i, j, repr(m)])


def _as_probs(dist) -> np.ndarray:
    if isinstance(dist, LeafDistribution):
        return dist.probs
    return LeafDistribution(np.asarray(dist, dtype=float)).probs


def tree_wasserstein(tree: HstTree, a, b) -> float:
    """Closed-form W1 between two leaf distributions on the same tree."""
    pa, pb = _as_probs(a), _as_probs(b)
    if pa.shape != (tree.n_leaves,) or pb.shape != (tree.n_leaves,):
        raise ValueError("distributions must cover the tree's leaves")
    engine = MdEngine(tree)
    za = engine.lift_leaf_distribution(pa)
    zb = engine.lift_leaf_distribution(pb)
    diff = np.abs(za - zb)
    diff[tree.root] = 0.0  # root mass is 1 on both sides; its weight is unused
    return float((tree.weight * diff).sum())


def optimal_coupling(tree: HstTree, a, b) -> Coupling:
    """A minimal-cost coupling between leaf distributions ``a`` and ``b``.

    Bottom-up matching: the diagonal min(a, b) stays in place; at each
    internal vertex the surplus queued below is matched FIFO against the
    deficit queued below, so the net flow across every edge equals the
    subtree imbalance and the coupling attains the closed-form W1 cost.
    """
    pa, pb = _as_probs(a), _as_probs(b)
    if pa.shape != (tree.n_leaves,) or pb.shape != (tree.n_leaves,):
        raise ValueError("distributions must cover the tree's leaves")
    pairs: list[tuple[int, int, float]] = []
    stay = np.minimum(pa, pb)
    for i in range(tree.n_leaves):
        if stay[i] > 0.0:
            pairs.append((i, i, float(stay[i])))

    # surplus[v] / deficit[v]: FIFO queues of (leaf point, mass) below v.
    surplus: dict[int, deque] = {}
    deficit: dict[int, deque] = {}
    for i in range(tree.n_leaves):
        v = int(tree.leaf_vertex[i])
        extra = float(pa[i] - pb[i])
        if extra > 0.0:
            surplus[v] = deque([(i, extra)])
        elif extra < 0.0:
            deficit[v] = deque([(i, -extra)])

    for v in tree.topological_vertices():
        kids = tree.children[v]
        if len(kids) == 0:
            continue
        sq: deque = deque()
        dq: deque = deque()
        for c in kids:
            sq.extend(surplus.pop(int(c), ()))
            dq.extend(deficit.pop(int(c), ()))
        while sq and dq:
            si, sm = sq[0]
            di, dm = dq[0]
            moved = min(sm, dm)
            pairs.append((si, di, moved))
            if sm - moved <= 0.0:
                sq.popleft()
            else:
                sq[0] = (si, sm - moved)
            if dm - moved <= 0.0:
                dq.popleft()
            else:
                dq[0] = (di, dm - moved)
        if sq:
            surplus[v] = sq
        if dq:
            deficit[v] = dq

    root = tree.root
    leftover = sum(m for _, m in surplus.get(root, ())) + sum(
        m for _, m in deficit.get(root, ())
    )
    if leftover > MARGINAL_TOL:
        raise AssertionError(f"unmatched transport mass {leftover:.3e}")
    return Coupling(tree=tree, pairs=tuple(pairs))


def sample_next(coupling: Coupling, prev: int, rng: np.random.Generator) -> int:
    """Draw the next leaf from the coupling's conditional row at ``prev``.

    A zero previous marginal (possible only through float underflow) falls
    back to sampling the next marginal directly.
    """
    js, ms = coupling.conditional_row(prev)
    total = ms.sum()
    if total <= 0.0:
        probs = coupling.col_marginal()
        probs = probs / probs.sum()
        return int(rng.choice(probs.shape[0], p=probs))
    return int(rng.choice(js, p=ms / total))
