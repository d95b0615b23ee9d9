"""Offline optimum, regret accounting, and the synthetic objective generator."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cholesky as sp_cholesky
from scipy.spatial.distance import cdist

from .metric import FiniteMetric


@dataclass
class EpisodeLog:
    """Per-episode record of what a policy did and what it cost."""

    x0: int
    contexts: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    service: list = field(default_factory=list)
    movement: list = field(default_factory=list)
    observations: list = field(default_factory=list)

    def append(self, context, action: int, service: float, movement: float, y: float):
        self.contexts.append(context)
        self.actions.append(int(action))
        self.service.append(float(service))
        self.movement.append(float(movement))
        self.observations.append(float(y))

    @property
    def service_total(self) -> float:
        return float(sum(self.service))

    @property
    def movement_total(self) -> float:
        return float(sum(self.movement))

    @property
    def cost_total(self) -> float:
        return self.service_total + self.movement_total


@dataclass
class RegretReport:
    alpha: float
    beta: float
    episode_costs: np.ndarray
    optimal_costs: np.ndarray
    per_episode: np.ndarray = field(default=None)
    cumulative: np.ndarray = field(default=None)

    def __post_init__(self):
        costs = np.asarray(self.episode_costs, dtype=float)
        opts = np.asarray(self.optimal_costs, dtype=float)
        if costs.shape != opts.shape:
            raise ValueError("episode and optimal cost lists must have equal length")
        self.episode_costs = costs
        self.optimal_costs = opts
        self.per_episode = costs - self.alpha * opts - self.beta
        self.cumulative = np.cumsum(self.per_episode)

    @property
    def total(self) -> float:
        return float(self.cumulative[-1]) if self.cumulative.size else 0.0

    def average_series(self) -> np.ndarray:
        """R/m for m = 1..N, the sublinearity diagnostic."""
        m = np.arange(1, self.cumulative.size + 1)
        return self.cumulative / m


def regret(logs, opt_costs, alpha: float, beta: float) -> RegretReport:
    costs = [log.cost_total if isinstance(log, EpisodeLog) else float(log) for log in logs]
    return RegretReport(
        alpha=alpha,
        beta=beta,
        episode_costs=np.asarray(costs),
        optimal_costs=np.asarray(opt_costs, dtype=float),
    )


def offline_optimal_matrix(cost_matrix: np.ndarray, dist: np.ndarray, x0: int):
    """Exact minimizer of total service-plus-movement cost by dynamic programming.

    ``cost_matrix`` is (H, n): the realized per-step service cost of each
    action. Transitions pay ``dist``; the first step moves from ``x0``.
    Ties are broken toward the lowest action index. O(H * n^2).
    """
    cost_matrix = np.asarray(cost_matrix, dtype=float)
    if not np.all(np.isfinite(cost_matrix)):
        raise ValueError("service cost table must be finite and complete")
    H, n = cost_matrix.shape
    if not 0 <= x0 < n:
        raise ValueError(f"unknown start {x0}")
    value = cost_matrix[0] + dist[x0]
    back = np.zeros((H, n), dtype=np.int64)
    for h in range(1, H):
        reach = value[:, None] + dist  # (from, to)
        back[h] = np.argmin(reach, axis=0)
        value = cost_matrix[h] + reach[back[h], np.arange(n)]
    last = int(np.argmin(value))
    seq = [last]
    for h in range(H - 1, 0, -1):
        last = int(back[h, last])
        seq.append(last)
    seq.reverse()
    return seq, float(value.min())


def offline_optimal(metric: FiniteMetric, f_table: np.ndarray, contexts, x0: int):
    """DP optimum for a dense (action, context-id) table and a context-id sequence."""
    f_table = np.asarray(f_table, dtype=float)
    ctx = np.asarray(contexts, dtype=np.int64)
    if ctx.min() < 0 or ctx.max() >= f_table.shape[1]:
        raise ValueError("context index out of range of the table")
    cost_matrix = f_table[:, ctx].T
    return offline_optimal_matrix(cost_matrix, metric.dist, x0)


def brute_force_optimal(cost_matrix: np.ndarray, dist: np.ndarray, x0: int):
    """Enumerates every action sequence; test oracle for the DP."""
    cost_matrix = np.asarray(cost_matrix, dtype=float)
    H, n = cost_matrix.shape
    if n**H > 2_000_000:
        raise ValueError("instance too large to enumerate")
    seqs = np.indices((n,) * H).reshape(H, -1)
    total = cost_matrix[0][seqs[0]] + dist[x0][seqs[0]]
    for h in range(1, H):
        total = total + cost_matrix[h][seqs[h]] + dist[seqs[h - 1], seqs[h]]
    best = int(np.argmin(total))
    return [int(s) for s in seqs[:, best]], float(total[best])


@dataclass(frozen=True)
class SyntheticInstance:
    """A sampled service objective over a grid of actions and scalar contexts.

    The raw sample is shifted to be non-negative and rescaled so its mean
    equals the mean pairwise movement cost; observation noise is 1% of the
    resulting range.
    """

    metric: FiniteMetric
    contexts: np.ndarray
    f_table: np.ndarray  # (n_actions, n_contexts)
    raw_sample: np.ndarray  # unshifted, unscaled draw (diagnostics)
    scale: float
    noise_sigma: float
    lengthscale: float
    seed: int

    @property
    def n_actions(self) -> int:
        return self.f_table.shape[0]

    @property
    def n_contexts(self) -> int:
        return self.f_table.shape[1]


def _chol_with_jitter(K: np.ndarray, jitter: float = 1e-8):
    for eps in (jitter, 1e-6):
        try:
            return sp_cholesky(K + eps * np.eye(K.shape[0]), lower=True)
        except np.linalg.LinAlgError:
            continue
    raise ValueError("kernel factorization failed even with raised jitter")


def synth_instance(
    seed: int,
    metric: FiniteMetric | None = None,
    n_contexts: int = 40,
    lengthscale: float = 0.2,
) -> SyntheticInstance:
    """Draw one objective from a squared-exponential process on the joint grid.

    The joint kernel over (action coords, context) factorizes across the two
    blocks, so the exact joint sample is L_x @ G @ L_e^T with G standard
    normal; this equals a draw from the full joint factorization.
    """
    from .metric import grid_metric

    if metric is None:
        metric = grid_metric(20, 20)
    if metric.coords is None:
        raise ValueError("synthetic instances need point coordinates")
    rng = np.random.default_rng(seed)
    contexts = np.sort(rng.uniform(0.0, 1.0, n_contexts))

    sq_x = cdist(metric.coords, metric.coords, "sqeuclidean")
    Kx = np.exp(-0.5 * sq_x / lengthscale**2)
    de = contexts[:, None] - contexts[None, :]
    Ke = np.exp(-0.5 * de**2 / lengthscale**2)
    Lx = _chol_with_jitter(Kx)
    Le = _chol_with_jitter(Ke)
    G = rng.standard_normal((metric.n, n_contexts))
    sample = Lx @ G @ Le.T

    shifted = sample - sample.min()
    mean_move = metric.mean_pairwise_distance()
    scale = mean_move / shifted.mean() if shifted.mean() > 0 else 1.0
    f_table = shifted * scale
    noise_sigma = 0.01 * float(f_table.max() - f_table.min())
    return SyntheticInstance(
        metric=metric,
        contexts=contexts,
        f_table=f_table,
        raw_sample=sample,
        scale=scale,
        noise_sigma=noise_sigma,
        lengthscale=lengthscale,
        seed=seed,
    )


def hallucinated_optimal(metric: FiniteMetric, lcb_table: np.ndarray, contexts, x0: int):
    """Offline DP on clamped confidence lower bounds; diagnostic counterpart
    of the true-cost optimum."""
    clamped = np.maximum(np.asarray(lcb_table, dtype=float), 0.0)
    return offline_optimal(metric, clamped, contexts, x0)


def log_alpha(n: int) -> float:
    """Default competitive factor (log n)^2 used in regret reports."""
    return math.log(n) ** 2 if n > 1 else 1.0


def write_f_table_csv(path, f_table: np.ndarray, contexts=None) -> None:
    """Dense service-cost table: one row per action, one column per context."""
    import csv

    f_table = np.asarray(f_table, dtype=float)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        header = ["action"] + [
            repr(float(c)) if contexts is not None else f"context_{j}"
            for j, c in enumerate(contexts if contexts is not None else range(f_table.shape[1]))
        ]
        writer.writerow(header)
        for i in range(f_table.shape[0]):
            writer.writerow([i] + [repr(float(v)) for v in f_table[i]])


def write_dp_solution_csv(path, sequence, cost: float) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "action"])
        for h, a in enumerate(sequence, start=1):
            writer.writerow([h, int(a)])
        writer.writerow(["total_cost", repr(float(cost))])
