"""Dataflow optimizer: input-channel reordering and output-channel clustering.

Reordering front-loads non-negative weight work so the partial sum crosses
zero at most once per output; clustering groups output channels with similar
sign patterns first, so the per-cluster channel order fits every row in the
cluster better. None of it changes the exact computation result: the same
permutation is applied to the weight columns and the activation rows.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import QuantTensor, SeededStream, SignMatrix, WideTensor, mix64, sign_matrix
from .env import TimingEnv
from .macsim import TerReport, run_tile


def reorder_by_positive_fraction(w: QuantTensor) -> list[int]:
    """Input channels sorted by descending fraction of non-negative weights.

    Ties keep ascending original index, so an already-sorted matrix maps to
    the identity permutation. Zeros count as non-negative, matching the sign
    convention.
    """
    if len(w.dims) != 2:
        raise ValueError(f"need 2-D weights, got dims {w.dims}")
    arr = w.as_array()
    fractions = (arr >= 0).mean(axis=0)
    return sorted(range(w.dims[1]), key=lambda c: (-fractions[c], c))


def sign_difference(x, y) -> int:
    """Sum of |x_i - y_i| over {+1,-1} vectors: twice the differing count."""
    x = np.asarray(x, dtype=np.int64).reshape(-1)
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    if x.size != y.size:
        raise ValueError(f"sign vectors differ in length: {x.size} vs {y.size}")
    return int(np.abs(x - y).sum())


def _majority_centroid(rows: np.ndarray) -> np.ndarray:
    """Elementwise majority sign; ties resolve to +1."""
    return np.where(rows.sum(axis=0) >= 0, 1, -1).astype(np.int64)


def _balanced_sizes(n: int, k: int) -> list[int]:
    base, extra = divmod(n, k)
    return [base + 1 if i < extra else base for i in range(k)]


def _greedy_balanced_assign(dist: np.ndarray, capacities: list[int]) -> np.ndarray:
    """Assign each point to its nearest centroid with spare capacity,
    processing points with the largest best-to-second-best margin first."""
    n, k = dist.shape
    if k == 1:
        return np.zeros(n, dtype=np.int64)
    part = np.sort(dist, axis=1)
    margin = part[:, 1] - part[:, 0]
    point_order = sorted(range(n), key=lambda i: (-margin[i], i))
    remaining = list(capacities)
    assign = np.full(n, -1, dtype=np.int64)
    for i in point_order:
        choices = sorted(range(k), key=lambda c: (dist[i, c], c))
        for c in choices:
            if remaining[c] > 0:
                assign[i] = c
                remaining[c] -= 1
                break
    return assign


def _objective(rows: np.ndarray, assign: np.ndarray, centroids: np.ndarray) -> int:
    return int(np.abs(rows - centroids[assign]).sum())


def _seed_centroids(rows: np.ndarray, k: int, stream: SeededStream) -> np.ndarray:
    """Farthest-point seeding from one random row; deterministic given the stream."""
    n = rows.shape[0]
    chosen = [stream.randint(0, n)]
    dist = np.abs(rows - rows[chosen[0]]).sum(axis=1)
    while len(chosen) < k:
        best = int(np.lexsort((np.arange(n), -dist))[0])
        chosen.append(best)
        dist = np.minimum(dist, np.abs(rows - rows[best]).sum(axis=1))
    return rows[chosen].copy()


@dataclass(frozen=True)
class ClusterResult:
    clusters: list[list[int]]
    objective: int
    objective_history: list[int] = field(default_factory=list)


def cluster_output_channels(
    s: SignMatrix,
    k: int,
    max_iters: int = 50,
    seed: int = 0,
    restarts: int = 8,
) -> ClusterResult:
    """Balanced k-means over sign rows with the Manhattan metric.

    Cluster sizes differ by at most one. Centroids are elementwise-majority
    signs; assignment is greedy largest-margin-first under the size caps.
    The reported objective never increases across iterations (an iteration
    that would increase it is rolled back and the search stops), and the best
    of `restarts` seeded starts is returned.
    """
    n = s.rows
    if k < 1:
        raise ValueError("cluster count must be at least 1")
    if k > n:
        raise ValueError(f"cluster count {k} exceeds row count {n}")
    rows = s.as_array().astype(np.int64)
    capacities = _balanced_sizes(n, k)

    best_assign = None
    best_obj = None
    best_history: list[int] = []
    for r in range(max(1, restarts)):
        stream = SeededStream(mix64(seed ^ (0xC1 + r)))
        centroids = _seed_centroids(rows, k, stream)
        assign = _greedy_balanced_assign(np.abs(rows[:, None, :] - centroids[None, :, :]).sum(axis=2), capacities)
        centroids = np.stack(
            [_majority_centroid(rows[assign == c]) if np.any(assign == c) else centroids[c] for c in range(k)]
        )
        obj = _objective(rows, assign, centroids)
        history = [obj]
        for _ in range(max_iters):
            new_assign = _greedy_balanced_assign(
                np.abs(rows[:, None, :] - centroids[None, :, :]).sum(axis=2), capacities
            )
            new_centroids = np.stack(
                [
                    _majority_centroid(rows[new_assign == c]) if np.any(new_assign == c) else centroids[c]
                    for c in range(k)
                ]
            )
            new_obj = _objective(rows, new_assign, new_centroids)
            if new_obj >= obj:
                break
            assign, centroids, obj = new_assign, new_centroids, new_obj
            history.append(obj)
        if best_obj is None or obj < best_obj:
            best_obj, best_assign, best_history = obj, assign, history

    clusters = [sorted(np.flatnonzero(best_assign == c).tolist()) for c in range(k)]
    clusters = [c for c in clusters if c]
    clusters.sort(key=lambda c: c[0])
    return ClusterResult(clusters=clusters, objective=int(best_obj), objective_history=best_history)


@dataclass(frozen=True)
class ReorderPlan:
    """Executable reordering: a whole-matrix input permutation, a balanced
    partition of the output channels, and one input permutation per cluster."""

    input_perm: list[int]
    clusters: list[list[int]]
    per_cluster_perms: list[list[int]]

    def validate(self, c_out: int, c_in: int) -> None:
        if sorted(self.input_perm) != list(range(c_in)):
            raise ValueError("input_perm is not a permutation of the input channels")
        flat = sorted(i for cl in self.clusters for i in cl)
        if flat != list(range(c_out)):
            raise ValueError("clusters do not partition the output channels")
        sizes = [len(cl) for cl in self.clusters]
        if sizes and max(sizes) - min(sizes) > 1:
            raise ValueError("clusters are not balanced")
        if len(self.per_cluster_perms) != len(self.clusters):
            raise ValueError("one input permutation required per cluster")
        for perm in self.per_cluster_perms:
            if sorted(perm) != list(range(c_in)):
                raise ValueError("per-cluster perm is not a permutation of the input channels")

    def to_json(self) -> str:
        return json.dumps(
            {
                "input_perm": self.input_perm,
                "clusters": self.clusters,
                "per_cluster_perms": self.per_cluster_perms,
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "ReorderPlan":
        d = json.loads(text)
        for key in ("input_perm", "clusters", "per_cluster_perms"):
            if key not in d:
                raise ValueError(f"plan is missing field '{key}'")
        return cls(
            input_perm=[int(i) for i in d["input_perm"]],
            clusters=[[int(i) for i in cl] for cl in d["clusters"]],
            per_cluster_perms=[[int(i) for i in p] for p in d["per_cluster_perms"]],
        )


def save_plan(plan: ReorderPlan, path) -> None:
    Path(path).write_text(plan.to_json() + "\n")


def load_plan(path) -> ReorderPlan:
    return ReorderPlan.from_json(Path(path).read_text())


def identity_plan(c_out: int, c_in: int) -> ReorderPlan:
    return ReorderPlan(
        input_perm=list(range(c_in)),
        clusters=[list(range(c_out))],
        per_cluster_perms=[list(range(c_in))],
    )


def direct_plan(w: QuantTensor) -> ReorderPlan:
    """Whole-matrix reordering: one cluster, one fraction-sorted permutation."""
    perm = reorder_by_positive_fraction(w)
    return ReorderPlan(
        input_perm=list(perm),
        clusters=[list(range(w.dims[0]))],
        per_cluster_perms=[list(perm)],
    )


def cluster_then_reorder(w: QuantTensor, k: int, max_iters: int = 50, seed: int = 0) -> ReorderPlan:
    """Cluster output channels on the sign matrix, then reorder the input
    channels independently inside each cluster's sub-matrix."""
    if len(w.dims) != 2:
        raise ValueError(f"need 2-D weights, got dims {w.dims}")
    result = cluster_output_channels(sign_matrix(w), k, max_iters=max_iters, seed=seed)
    arr = w.as_array()
    perms = []
    for cl in result.clusters:
        sub = QuantTensor((len(cl), w.dims[1]), arr[cl].reshape(-1), w.scale)
        perms.append(list(reorder_by_positive_fraction(sub)))
    plan = ReorderPlan(
        input_perm=list(reorder_by_positive_fraction(w)),
        clusters=[list(cl) for cl in result.clusters],
        per_cluster_perms=perms,
    )
    plan.validate(w.dims[0], w.dims[1])
    return plan


@dataclass(frozen=True)
class TerEvaluation:
    baseline: TerReport
    optimized: TerReport
    reduction: float | None  # None when the optimized run has no errors
    no_errors: bool
    flip_reduction: float | None
    no_flips: bool
    y_baseline: WideTensor
    y_optimized: WideTensor


def _ratio(base: float, opt: float) -> tuple[float | None, bool]:
    if opt == 0.0:
        return None, True
    return base / opt, False


def evaluate_ter_reduction(
    w: QuantTensor,
    x: QuantTensor,
    plan: ReorderPlan,
    env: TimingEnv,
    collect_events: bool = False,
) -> TerEvaluation:
    """Timing-error rates of the identity order versus the plan's order.

    The optimized run executes each cluster as its own sub-tile with the
    cluster's permutation; reports merge associatively. Reduction is the
    baseline-to-optimized TER ratio, flagged instead of divided when the
    optimized run is error-free.
    """
    plan.validate(w.dims[0], w.dims[1])
    y_base, base_report, _ = run_tile(w, x, env, order=None, collect_events=collect_events)

    arr = w.as_array()
    m, n = w.dims[0], x.dims[1]
    merged: TerReport | None = None
    y_opt = np.zeros((m, n), dtype=np.int64)
    for cl, perm in zip(plan.clusters, plan.per_cluster_perms):
        sub = QuantTensor((len(cl), w.dims[1]), arr[cl].reshape(-1), w.scale)
        y_sub, rep, _ = run_tile(sub, x, env, order=perm, collect_events=False)
        y_opt[cl] = y_sub.as_array()
        merged = rep if merged is None else merged.merge(rep)

    reduction, no_errors = _ratio(base_report.ter, merged.ter)
    flip_reduction, no_flips = _ratio(base_report.flip_rate, merged.flip_rate)
    return TerEvaluation(
        baseline=base_report,
        optimized=merged,
        reduction=reduction,
        no_errors=no_errors,
        flip_reduction=flip_reduction,
        no_flips=no_flips,
        y_baseline=y_base,
        y_optimized=WideTensor((m, n), y_opt, w.scale * x.scale),
    )


def geometric_mean(values) -> float:
    values = [v for v in values]
    if not values:
        raise ValueError("geometric mean of an empty sequence")
    return math.exp(sum(math.log(v) for v in values) / len(values))
