"""Clustering agents by distance and carrying networks across re-clusterings.

Affinity propagation turns a distance matrix into clusters.  Consecutive
clusterings are matched through their overlap matrix with the Hungarian
method, and the match decides which network every agent inherits.  Splits
become Copy ops and merges become Merge ops; the trainer applies them.
"""

from __future__ import annotations

import enum
import itertools
import warnings
from dataclasses import dataclass, field

import numpy as np

from hetlab.errors import StructuralError

AP_JITTER = 1e-2


class MergeMode(str, enum.Enum):
    MAJORITY = "majority"
    RANDOM = "random"
    AVERAGE = "average"
    WEIGHTED = "weighted"


@dataclass(frozen=True)
class ClusterAssignment:
    labels: tuple
    k: int
    converged: bool = True

    def __post_init__(self):
        labels = tuple(int(v) for v in np.asarray(self.labels).ravel())
        object.__setattr__(self, "labels", labels)
        if self.k < 1 or any(not 0 <= v < self.k for v in labels):
            raise StructuralError(f"labels must lie in [0, {self.k})")
        if len(set(labels)) != self.k:
            raise StructuralError("every cluster must be non-empty")

    @classmethod
    def from_labels(cls, labels, converged: bool = True) -> "ClusterAssignment":
        """Relabel in order of first appearance so equal partitions compare equal."""
        canon, out = {}, []
        for v in np.asarray(labels).ravel():
            out.append(canon.setdefault(int(v), len(canon)))
        return cls(tuple(out), len(canon), converged)

    @property
    def n(self) -> int:
        return len(self.labels)

    def members(self, c: int) -> np.ndarray:
        return np.flatnonzero(np.asarray(self.labels) == c)

    def sizes(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.k)


def affinity_propagation(d, damping: float = 0.9, max_iter: int = 500, convergence_iter: int = 25) -> ClusterAssignment:
    """Exemplar clustering on similarities ``-d`` with the median as preference."""
    d = np.asarray(getattr(d, "values", d), dtype=float)
    n = d.shape[0]
    if d.ndim != 2 or d.shape[1] != n or n == 0:
        raise StructuralError("distance matrix must be square and non-empty")
    if not np.all(np.isfinite(d)):
        raise StructuralError("distance matrix has non-finite entries")
    if not 0.5 <= damping < 1.0:
        raise StructuralError("damping must lie in [0.5, 1)")
    if n == 1:
        return ClusterAssignment((0,), 1)
    off = ~np.eye(n, dtype=bool)
    S = -d.copy()
    spread = float(np.ptp(S[off]))
    if spread == 0.0:
        # no structure at all: everyone is equally similar
        return ClusterAssignment((0,) * n, 1)
    S[np.diag_indices(n)] = np.median(S[off])
    # Deterministic jitter breaks exact ties (identical agents give identical
    # rows).  It scales with the spread, so a constant shift of the distances
    # leaves it unchanged, and it stays well below Monte Carlo resolution.
    S = S + spread * AP_JITTER * np.random.default_rng(0).standard_normal((n, n))

    R = np.zeros((n, n))
    A = np.zeros((n, n))
    rows = np.arange(n)
    stable, last, converged = 0, None, False
    for _ in range(max_iter):
        AS = A + S
        top = AS.argmax(axis=1)
        first = AS[rows, top]
        AS[rows, top] = -np.inf
        second = AS.max(axis=1)
        Rn = S - first[:, None]
        Rn[rows, top] = S[rows, top] - second
        R = damping * R + (1 - damping) * Rn

        Rp = np.maximum(R, 0)
        Rp[rows, rows] = R[rows, rows]
        An = Rp.sum(axis=0)[None, :] - Rp
        diag = An[rows, rows].copy()
        An = np.minimum(An, 0)
        An[rows, rows] = diag
        A = damping * A + (1 - damping) * An

        ex = (np.diag(A) + np.diag(R)) > 0
        if last is not None and np.array_equal(ex, last) and ex.any():
            stable += 1
            if stable >= convergence_iter:
                converged = True
                break
        else:
            stable = 0
        last = ex

    exemplars = np.flatnonzero(np.diag(A) + np.diag(R) > 0)
    if not converged:
        warnings.warn("affinity propagation did not converge; returning current labels", RuntimeWarning)
    if exemplars.size == 0:
        return ClusterAssignment((0,) * n, 1, converged)
    labels = exemplars[np.argmax(S[:, exemplars], axis=1)]
    labels[exemplars] = exemplars
    return ClusterAssignment.from_labels(labels, converged)


def overlap_matrix(old: ClusterAssignment, new: ClusterAssignment) -> np.ndarray:
    if old.n != new.n:
        raise StructuralError(f"clusterings cover {old.n} and {new.n} agents")
    m = np.zeros((old.k, new.k), dtype=int)
    np.add.at(m, (np.asarray(old.labels), np.asarray(new.labels)), 1)
    return m


def _solve_square(c: np.ndarray) -> np.ndarray:
    """Shortest-augmenting-path Hungarian with potentials, O(n^3)."""
    n = c.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=int)  # p[j]: row matched to column j (1-based, 0 = free)
    way = np.zeros(n + 1, dtype=int)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = c[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    rows_to_col = np.empty(n, dtype=int)
    rows_to_col[p[1:] - 1] = np.arange(n)
    return rows_to_col


def _opt_cost(c: np.ndarray) -> float:
    if c.size == 0:
        return 0.0
    return float(c[np.arange(len(c)), _solve_square(c)].sum())


def hungarian(cost) -> tuple[list[tuple[int, int]], float]:
    """Minimum-cost one-to-one assignment over ``min(rows, cols)`` pairs.

    Among equally cheap assignments the row-wise lexicographically smallest
    column choice wins, so ties resolve to the lowest index.
    """
    cost = np.asarray(cost, dtype=float)
    if cost.ndim != 2 or cost.size == 0:
        raise StructuralError("cost matrix must be a non-empty 2-D array")
    if not np.all(np.isfinite(cost)):
        raise StructuralError("cost matrix has non-finite entries")
    r, c = cost.shape
    n = max(r, c)
    big = float(np.abs(cost).max()) + 1.0
    sq = np.full((n, n), big)
    sq[:r, :c] = cost
    best = _opt_cost(sq)
    tol = 1e-9 * max(1.0, float(np.abs(sq).sum()))

    # lexicographic refinement: fix rows one by one to the lowest feasible column
    rows_left, cols_left = list(range(n)), list(range(n))
    fixed = {}
    remaining = best
    for i in range(n):
        rows_left.remove(i)
        for j in cols_left:
            sub_cols = [q for q in cols_left if q != j]
            rest = _opt_cost(sq[np.ix_(rows_left, sub_cols)])
            if sq[i, j] + rest <= remaining + tol:
                fixed[i] = j
                remaining -= sq[i, j]
                cols_left = sub_cols
                break
    pairs = [(i, fixed[i]) for i in range(r) if fixed[i] < c]
    total = float(sum(cost[i, j] for i, j in pairs))
    return pairs, total


def brute_force_assignment(cost) -> float:
    """Exhaustive minimum over all injections of the smaller side; test oracle."""
    cost = np.asarray(cost, dtype=float)
    r, c = cost.shape
    if r <= c:
        return min(sum(cost[i, p[i]] for i in range(r)) for p in itertools.permutations(range(c), r))
    return min(sum(cost[p[j], j] for j in range(c)) for p in itertools.permutations(range(r), c))


@dataclass(frozen=True)
class CopyOp:
    src: int
    dst: int

    def to_json(self) -> dict:
        return {"op": "copy", "src": self.src, "dst": self.dst}


@dataclass(frozen=True)
class MergeOp:
    srcs: tuple
    dst: int
    mode: MergeMode
    weights: tuple  # contributor old-cluster sizes, aligned with srcs
    pick: int | None = None  # chosen source for majority / random

    def to_json(self) -> dict:
        return {
            "op": "merge",
            "srcs": list(self.srcs),
            "dst": self.dst,
            "mode": self.mode.value,
            "weights": list(self.weights),
            "pick": self.pick,
        }


@dataclass
class NetworkAssignment:
    agent_net: tuple
    live: frozenset
    ops: tuple = ()
    next_id: int = 0

    def __post_init__(self):
        self.agent_net = tuple(int(v) for v in self.agent_net)
        self.live = frozenset(int(v) for v in self.live)
        self.ops = tuple(self.ops)
        if not set(self.agent_net) <= self.live:
            raise StructuralError("an agent maps to a network that is not live")
        if self.live and self.next_id <= max(self.live):
            self.next_id = max(self.live) + 1

    @classmethod
    def from_clusters(cls, clusters: ClusterAssignment) -> "NetworkAssignment":
        """Network id = cluster label; the natural starting point."""
        return cls(clusters.labels, frozenset(range(clusters.k)), (), clusters.k)

    @property
    def n(self) -> int:
        return len(self.agent_net)

    def network_of_cluster(self, clusters: ClusterAssignment) -> list[int]:
        out = []
        for c in range(clusters.k):
            nets = {self.agent_net[i] for i in clusters.members(c)}
            if len(nets) != 1:
                raise StructuralError(f"cluster {c} spans networks {sorted(nets)}")
            out.append(nets.pop())
        if len(set(out)) != len(out):
            raise StructuralError("two clusters share one network")
        return out

    def to_json(self) -> dict:
        return {
            "networks": list(self.agent_net),
            "live": sorted(self.live),
            "ops": [op.to_json() for op in self.ops],
            "next_id": self.next_id,
        }


def _mean_cross_distance(distance, a_members, b_members) -> float:
    if distance is None:
        return 0.0
    d = np.asarray(getattr(distance, "values", distance), dtype=float)
    return float(d[np.ix_(a_members, b_members)].mean())


def reconcile(
    old: NetworkAssignment,
    old_clusters: ClusterAssignment,
    new_clusters: ClusterAssignment,
    mode: MergeMode | str = MergeMode.MAJORITY,
    rng_seed=0,
    distance=None,
) -> NetworkAssignment:
    """Plan the network assignment for ``new_clusters``.

    ``distance`` (optional agent distance matrix) breaks overlap ties when an
    unmatched new cluster picks the old cluster to copy from.
    """
    mode = MergeMode(mode)
    if old.n != old_clusters.n or old.n != new_clusters.n:
        raise StructuralError("assignment and clusterings cover different agent counts")
    old_net = old.network_of_cluster(old_clusters)
    ov = overlap_matrix(old_clusters, new_clusters)
    pairs, _ = hungarian(-ov)
    match_new = {b: a for a, b in pairs}
    old_sizes = old_clusters.sizes()
    next_id = old.next_id
    ops = []
    new_net = [None] * new_clusters.k

    if new_clusters.k >= old_clusters.k:
        for b in range(new_clusters.k):
            if b in match_new:
                new_net[b] = old_net[match_new[b]]
                continue
            col = ov[:, b]
            cands = np.flatnonzero(col == col.max())
            if len(cands) > 1 and distance is not None:
                mem_b = new_clusters.members(b)
                dist = [_mean_cross_distance(distance, old_clusters.members(a), mem_b) for a in cands]
                cands = cands[np.flatnonzero(np.isclose(dist, min(dist), rtol=0, atol=1e-12))]
            src = int(cands[0])
            new_net[b] = next_id
            ops.append(CopyOp(old_net[src], next_id))
            next_id += 1
    else:
        contributors = {b: [a] for a, b in pairs}
        matched_old = {a for a, _ in pairs}
        for a in range(old_clusters.k):
            if a not in matched_old:
                b = int(np.argmax(ov[a]))  # lowest index on ties
                contributors[b].append(a)
        rng = np.random.default_rng(rng_seed)
        for b in range(new_clusters.k):
            srcs_c = sorted(contributors[b])
            if len(srcs_c) == 1:
                new_net[b] = old_net[srcs_c[0]]
                continue
            sizes = [int(old_sizes[a]) for a in srcs_c]
            nets = [old_net[a] for a in srcs_c]
            pick = None
            if mode is MergeMode.MAJORITY:
                pick = nets[int(np.argmax(sizes))]
            elif mode is MergeMode.RANDOM:
                pick = nets[int(rng.integers(len(nets)))]
            new_net[b] = next_id
            ops.append(MergeOp(tuple(nets), next_id, mode, tuple(sizes), pick))
            next_id += 1

    agent_net = tuple(new_net[c] for c in new_clusters.labels)
    return NetworkAssignment(agent_net, frozenset(new_net), tuple(ops), next_id)


def apply_ops(store: dict, assignment: NetworkAssignment) -> dict:
    """Run pending ops over ``store`` (net id -> object with ``flat``/``set_flat``/``copy``).

    Returns a new store holding exactly the live networks.  Values may also be
    tuples of such objects (e.g. policy and critic); ops then act elementwise.
    """
    out = dict(store)
    for op in assignment.ops:
        if isinstance(op, CopyOp):
            out[op.dst] = _map(lambda n: n.copy(), out[op.src])
        elif op.pick is not None:
            out[op.dst] = _map(lambda n: n.copy(), out[op.pick])
        else:
            w = np.ones(len(op.srcs)) if op.mode is MergeMode.AVERAGE else np.asarray(op.weights, dtype=float)
            w = w / w.sum()
            out[op.dst] = _blend([out[s] for s in op.srcs], w)
    missing = assignment.live - set(out)
    if missing:
        raise StructuralError(f"live networks {sorted(missing)} have no parameters")
    return {k: out[k] for k in sorted(assignment.live)}


def _map(fn, item):
    if isinstance(item, tuple):
        return tuple(fn(x) for x in item)
    return fn(item)


def _blend(items, w):
    if hasattr(type(items[0]), "blend"):
        return type(items[0]).blend(items, w)
    if isinstance(items[0], tuple):
        return tuple(_blend([it[k] for it in items], w) for k in range(len(items[0])))
    out = items[0].copy()
    out.set_flat(sum(wi * it.flat() for wi, it in zip(w, items)))
    return out


@dataclass
class PeriodSnapshot:
    period: int
    labels: tuple
    assignment: NetworkAssignment
    converged: bool = True
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        d = {"period": self.period, "labels": list(self.labels), "converged": self.converged}
        d.update(self.assignment.to_json())
        d.update(self.extra)
        return d
