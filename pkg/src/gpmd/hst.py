"""Hierarchically separated trees over a finite metric, and their random construction.

A tree carries one non-negative weight per vertex, interpreted as the weight
of the edge to the vertex's parent (the root weight is unused). The leaf
metric d_T(a, b) is the sum of the child-side weights along the a-b path.
The randomized embedding guarantees d_T >= d surely and O(log n) distortion
in expectation over the construction seed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .metric import FiniteMetric


@dataclass(frozen=True)
class HstTree:
    """Rooted weighted tree whose leaves are the points of a finite metric.

    ``parent[v]`` is -1 for the root. ``leaf_vertex[i]`` maps metric point i
    to its leaf vertex; ``point_index[v]`` is the inverse (-1 on internal
    vertices). Weight decay by a factor ``tau`` is enforced on every edge
    whose parent is not the root.
    """

    parent: np.ndarray
    weight: np.ndarray
    leaf_vertex: np.ndarray
    tau: float
    metric: FiniteMetric

    # Derived structure, filled in __post_init__.
    children: tuple = field(default=None, repr=False)
    depth: np.ndarray = field(default=None, repr=False)
    point_index: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        parent = np.asarray(self.parent, dtype=np.int64)
        weight = np.asarray(self.weight, dtype=float)
        leaf_vertex = np.asarray(self.leaf_vertex, dtype=np.int64)
        object.__setattr__(self, "parent", parent)
        object.__setattr__(self, "weight", weight)
        object.__setattr__(self, "leaf_vertex", leaf_vertex)

        nv = parent.shape[0]
        kids: list[list[int]] = [[] for _ in range(nv)]
        roots = []
        for v in range(nv):
            p = parent[v]
            if p < 0:
                roots.append(v)
            else:
                kids[p].append(v)
        if len(roots) != 1:
            raise ValueError(f"tree must have exactly one root, found {len(roots)}")
        object.__setattr__(self, "children", tuple(np.asarray(c, dtype=np.int64) for c in kids))

        depth = np.full(nv, -1, dtype=np.int64)
        depth[roots[0]] = 0
        stack = [roots[0]]
        seen = 1
        while stack:
            u = stack.pop()
            for c in kids[u]:
                depth[c] = depth[u] + 1
                stack.append(c)
                seen += 1
        if seen != nv or np.any(depth < 0):
            raise ValueError("tree contains unreachable vertices or a cycle")
        object.__setattr__(self, "depth", depth)

        point_index = np.full(nv, -1, dtype=np.int64)
        for i, v in enumerate(leaf_vertex):
            point_index[v] = i
        object.__setattr__(self, "point_index", point_index)
        self._validate()

    @property
    def root(self) -> int:
        return int(np.where(self.parent < 0)[0][0])

    @property
    def n_vertices(self) -> int:
        return self.parent.shape[0]

    @property
    def n_leaves(self) -> int:
        return self.leaf_vertex.shape[0]

    def _validate(self) -> None:
        if self.tau <= 1:
            raise ValueError(f"tau must exceed 1, got {self.tau}")
        if np.any(self.weight < 0):
            raise ValueError("vertex weights must be non-negative")
        if self.n_leaves != self.metric.n:
            raise ValueError("leaves must be in bijection with the metric points")
        is_leaf = self.point_index >= 0
        for v in range(self.n_vertices):
            has_kids = len(self.children[v]) > 0
            if is_leaf[v] and has_kids:
                raise ValueError(f"vertex {v} is both a leaf and internal")
            if not is_leaf[v] and not has_kids:
                raise ValueError(f"internal vertex {v} has no children")
        # tau-decay on every edge whose parent edge exists (parent not root).
        root = self.root
        for v in range(self.n_vertices):
            p = self.parent[v]
            if p < 0 or p == root:
                continue
            if self.weight[v] > self.weight[p] / self.tau + 1e-12:
                raise ValueError(
                    f"weight decay violated at vertex {v}: "
                    f"{self.weight[v]} > {self.weight[p]}/{self.tau}"
                )

    # -- tree metric ---------------------------------------------------

    def tree_distance(self, a: int, b: int) -> float:
        """Weighted path length between metric points a and b (point indices)."""
        la, lb = self._leaf_of(a), self._leaf_of(b)
        if la == lb:
            return 0.0
        total = 0.0
        da, db = self.depth[la], self.depth[lb]
        while da > db:
            total += self.weight[la]
            la = self.parent[la]
            da -= 1
        while db > da:
            total += self.weight[lb]
            lb = self.parent[lb]
            db -= 1
        while la != lb:
            total += self.weight[la] + self.weight[lb]
            la = self.parent[la]
            lb = self.parent[lb]
        return float(total)

    def _leaf_of(self, point: int) -> int:
        if not 0 <= point < self.n_leaves:
            raise ValueError(f"unknown point index {point}")
        return int(self.leaf_vertex[point])

    def distance_matrix(self) -> np.ndarray:
        """All-pairs d_T over metric points. O(n^2 * depth); intended for tests."""
        n = self.n_leaves
        out = np.zeros((n, n))
        for i in range(n):
            for j in range(i + 1, n):
                out[i, j] = out[j, i] = self.tree_distance(i, j)
        return out

    # -- per-vertex bookkeeping used by the mirror-descent potential ----

    def leaf_counts(self) -> np.ndarray:
        counts = np.zeros(self.n_vertices, dtype=np.int64)
        counts[self.leaf_vertex] = 1
        for v in self.topological_vertices():
            p = self.parent[v]
            if p >= 0:
                counts[p] += counts[v]
        return counts

    def leaf_count_ratios(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Per-vertex (theta, eta, delta); entries at the root are NaN.

        theta_u = |L(u)| / |L(parent(u))|, eta_u = 1 + log(1/theta_u),
        delta_u = theta_u / eta_u.
        """
        counts = self.leaf_counts().astype(float)
        theta = np.full(self.n_vertices, np.nan)
        mask = self.parent >= 0
        theta[mask] = counts[mask] / counts[self.parent[mask]]
        eta = 1.0 - np.log(theta)
        delta = theta / eta
        return theta, eta, delta

    def topological_vertices(self) -> np.ndarray:
        """All vertices ordered children-before-parents: by (-depth, index)."""
        order = np.lexsort((np.arange(self.n_vertices), -self.depth))
        return order

    def topological_internal(self) -> np.ndarray:
        order = self.topological_vertices()
        is_internal = self.point_index[order] < 0
        return order[is_internal]

    def path_weight_to_root(self) -> np.ndarray:
        """P[v] = sum of weights from v up to (excluding) the root."""
        out = np.zeros(self.n_vertices)
        # parents have smaller depth, so iterate by increasing depth
        for v in self.topological_vertices()[::-1]:
            p = self.parent[v]
            if p >= 0:
                out[v] = out[p] + self.weight[v]
        return out

    # -- serialization ---------------------------------------------------

    def to_records(self) -> list[dict]:
        recs = []
        for v in range(self.n_vertices):
            recs.append(
                {
                    "vertex": v,
                    "parent": int(self.parent[v]),
                    "weight": float(self.weight[v]),
                    "leaf_label": (
                        self.metric.labels[self.point_index[v]]
                        if self.point_index[v] >= 0
                        else None
                    ),
                }
            )
        return recs

    def dump_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump({"tau": self.tau, "vertices": self.to_records()}, fh, indent=1)


def tree_distance(tree: HstTree, a: int, b: int) -> float:
    return tree.tree_distance(a, b)


def leaf_count_ratios(tree: HstTree, vertex: int) -> tuple[float, float, float]:
    """(theta, eta, delta) for one non-root vertex."""
    if vertex == tree.root:
        raise ValueError("leaf-count ratios are undefined at the root")
    theta, eta, delta = tree.leaf_count_ratios()
    return float(theta[vertex]), float(eta[vertex]), float(delta[vertex])


def frt_embed(metric: FiniteMetric, tau: float = 5.0, rng_seed: int = 0) -> HstTree:
    """Randomized low-distortion embedding of ``metric`` into a tau-HST.

    Draws a uniform permutation of the points and a radius multiplier
    beta = tau**U (U uniform, i.e. density proportional to 1/beta on
    [1, tau)), then builds laminar clusters with radii beta * tau**i from
    level ceil(log_tau diameter) downward; each point joins the first
    permuted center within the radius. A cluster created at level i gets
    vertex weight beta * tau**(i+1), which makes d_T dominate d for every
    pair on every seed. Points at zero distance are collapsed and restored
    as zero-weight children below the shared leaf.
    """
    if tau <= 1:
        raise ValueError(f"tau must exceed 1, got {tau}")
    rng = np.random.default_rng(rng_seed)
    n = metric.n
    dist = metric.dist

    # Collapse zero-distance groups: reps[g] is the representative point.
    group_of = np.full(n, -1, dtype=np.int64)
    reps: list[int] = []
    for i in range(n):
        if group_of[i] >= 0:
            continue
        g = len(reps)
        members = np.where(dist[i] == 0.0)[0]
        group_of[members] = g
        reps.append(i)
    members_of = [np.where(group_of == g)[0] for g in range(len(reps))]
    rep_idx = np.asarray(reps, dtype=np.int64)
    m = len(reps)

    parents: list[int] = []
    weights: list[float] = []
    group_leaf = np.full(m, -1, dtype=np.int64)

    def new_vertex(parent: int, weight: float) -> int:
        parents.append(parent)
        weights.append(weight)
        return len(parents) - 1

    if m == 1:
        root = new_vertex(-1, 0.0)
        group_leaf[0] = root
    else:
        sub = dist[np.ix_(rep_idx, rep_idx)]
        psi = float(sub.max())
        top = math.ceil(math.log(psi, tau))
        while tau**top < psi:  # guard against log() rounding
            top += 1
        perm = rng.permutation(m)
        beta = float(tau ** rng.uniform(0.0, 1.0))

        root = new_vertex(-1, 0.0)
        # (vertex, member representative indices) clusters awaiting splitting
        active: list[tuple[int, np.ndarray]] = [(root, np.arange(m))]
        level = top - 1
        while active:
            radius = beta * tau**level
            child_w = beta * tau ** (level + 1)
            nxt: list[tuple[int, np.ndarray]] = []
            for vert, members in active:
                assigned = np.full(members.shape[0], -1, dtype=np.int64)
                for c in perm:
                    free = assigned < 0
                    if not free.any():
                        break
                    hit = free & (sub[members, c] <= radius)
                    assigned[hit] = c
                for c in perm:
                    chunk = members[assigned == c]
                    if chunk.size == 0:
                        continue
                    child = new_vertex(vert, child_w)
                    if chunk.size == 1:
                        group_leaf[chunk[0]] = child
                    else:
                        nxt.append((child, chunk))
            active = nxt
            level -= 1

    # Restore collapsed duplicates as zero-weight fanouts.
    leaf_vertex = np.full(n, -1, dtype=np.int64)
    for g in range(m):
        members = members_of[g]
        if members.size == 1:
            leaf_vertex[members[0]] = group_leaf[g]
        else:
            for p in members:
                leaf_vertex[p] = new_vertex(int(group_leaf[g]), 0.0)

    return HstTree(
        parent=np.asarray(parents, dtype=np.int64),
        weight=np.asarray(weights, dtype=float),
        leaf_vertex=leaf_vertex,
        tau=float(tau),
        metric=metric,
    )
