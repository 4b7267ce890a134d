"""Coalition search: greedy reassignment with restarts, plus an exhaustive oracle."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .objective import ObjectiveParams, canonical, fedcollab_objective, n_coalitions


@dataclass(frozen=True)
class SolverConfig:
    restarts: int = 10
    max_outer_iters: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.restarts < 1 or self.max_outer_iters < 1:
            raise ValueError("restarts and max_outer_iters must be positive")


@dataclass
class RestartTrace:
    restart: int
    steps: list[tuple[int, float]] = field(default_factory=list)  # (inner_iter, objective)
    outer_iters: int = 0
    converged: bool = False
    partition: np.ndarray | None = None

    @property
    def objective(self) -> float:
        return self.steps[-1][1]

    @property
    def inner_iters(self) -> int:
        return self.steps[-1][0]


@dataclass
class SolverTrace:
    restarts: list[RestartTrace]
    best_restart: int
    partition: np.ndarray
    objective: float

    def rows(self):
        """(restart, inner_iter, objective) rows for CSV export."""
        for r in self.restarts:
            for it, val in r.steps:
                yield r.restart, it, val


def _greedy_run(params, D, max_outer_iters, rng, restart_id):
    n = params.n
    labels = np.arange(n)
    current = fedcollab_objective(labels, params, D)
    trace = RestartTrace(restart_id, [(0, current)])
    inner = 0
    for _ in range(max_outer_iters):
        trace.outer_iters += 1
        changed = False
        for k in rng.permutation(n):
            inner += 1
            own = labels[k]
            occupied = np.unique(labels)
            best_label, best_value = own, current
            alone = np.count_nonzero(labels == own) == 1
            # a fresh label is only a distinct option when k currently has company
            candidates = list(occupied) + ([] if alone else [labels.max() + 1])
            for c in candidates:
                if c == own:
                    continue
                trial = labels.copy()
                trial[k] = c
                value = fedcollab_objective(trial, params, D)
                if value < best_value:
                    best_label, best_value = c, value
            if best_label != own:
                labels[k] = best_label
                labels = canonical(labels)
                current = best_value
                changed = True
            trace.steps.append((inner, current))
        if not changed:
            trace.converged = True
            break
    trace.partition = canonical(labels)
    return trace


def greedy_solve(params: ObjectiveParams, D, config: SolverConfig = SolverConfig()):
    """Best-of-restarts greedy coalition assignment.

    Each restart starts from local training (all singletons) and visits clients
    in a fresh random order, moving each to whichever existing coalition, or a
    new one, strictly lowers the objective. A restart stops after a full pass
    without moves. Returns ``(partition, SolverTrace)``.
    """
    D = np.asarray(D, dtype=np.float64)
    if D.shape != (params.n, params.n):
        raise ValueError(f"distance matrix must be {params.n}x{params.n}")
    seeds = np.random.SeedSequence(config.seed).spawn(config.restarts)
    runs = [
        _greedy_run(params, D, config.max_outer_iters, np.random.default_rng(s), r)
        for r, s in enumerate(seeds)
    ]
    best = min(range(len(runs)), key=lambda r: (runs[r].objective, r))
    part = runs[best].partition
    return part, SolverTrace(runs, best, part, runs[best].objective)


# -- exhaustive oracle -----------------------------------------------------------

BRUTE_FORCE_MAX_N = 12


def set_partitions(n: int):
    """Yield every set partition of ``range(n)`` as a restricted-growth string."""
    if n == 0:
        yield []
        return
    a = [0] * n

    def rec(i, top):
        # top = max(a[:i])
        if i == n:
            yield list(a)
            return
        for v in range(top + 2):
            a[i] = v
            yield from rec(i + 1, max(top, v))

    yield from rec(1, 0)


def bell_number(n: int) -> int:
    row = [1]
    for _ in range(n):
        nxt = [row[-1]]
        for v in row:
            nxt.append(nxt[-1] + v)
        row = nxt
    return row[0]


def brute_force_solve(params: ObjectiveParams, D):
    """Exact minimiser over all set partitions (``N <= 12``).

    Scores blocks with the per-coalition closed form
    ``|S| * C / sqrt(m * beta_S) + sum_{i,j in S} beta_j D_ij / beta_S``,
    memoised by member bitmask, which keeps it independent of the
    matrix-based evaluation used by the greedy search.
    Returns ``(partition, objective, n_enumerated)``.
    """
    n = params.n
    if n > BRUTE_FORCE_MAX_N:
        raise ValueError(f"brute force is limited to N <= {BRUTE_FORCE_MAX_N}, got {n}")
    D = np.asarray(D, dtype=np.float64)
    if D.shape != (n, n):
        raise ValueError(f"distance matrix must be {n}x{n}")
    beta = [float(b) for b in params.beta]
    Dl = D.tolist()
    scale = params.C / math.sqrt(params.m)
    cache: dict[int, float] = {}

    def block_cost(mask):
        cost = cache.get(mask)
        if cost is None:
            members = [i for i in range(n) if mask >> i & 1]
            total = sum(beta[j] for j in members)
            cost = len(members) * scale / math.sqrt(total)
            for i in members:
                cost += sum(beta[j] * Dl[i][j] for j in members) / total
            cache[mask] = cost
        return cost

    best, best_value, count = None, math.inf, 0
    for rgs in set_partitions(n):
        count += 1
        masks: dict[int, int] = {}
        for i, lab in enumerate(rgs):
            masks[lab] = masks.get(lab, 0) | (1 << i)
        value = sum(block_cost(mk) for mk in masks.values())
        if value < best_value:
            best, best_value = rgs, value
    return np.asarray(best, dtype=np.int64), best_value, count


# -- newcomers and capacity sweeps -----------------------------------------------

def assign_new_client(existing_partition, new_distances, D_existing, params: ObjectiveParams):
    """Pick a coalition for one newcomer without moving anybody else.

    ``params`` covers all ``N + 1`` clients with the newcomer last;
    ``new_distances`` holds its distances to the ``N`` incumbents. Returns
    ``(label, scores)`` where ``label`` is an existing coalition label or
    ``max(label) + 1`` for a new singleton, and ``scores`` maps every option
    to its objective value.
    """
    labels = np.asarray(existing_partition)
    n = len(labels)
    d_new = np.asarray(new_distances, dtype=np.float64)
    D_old = np.asarray(D_existing, dtype=np.float64)
    if d_new.shape != (n,) or D_old.shape != (n, n) or params.n != n + 1:
        raise ValueError("newcomer distances, incumbent matrix and params disagree in size")
    D = np.zeros((n + 1, n + 1))
    D[:n, :n] = D_old
    D[n, :n] = d_new
    D[:n, n] = d_new
    fresh = int(labels.max()) + 1 if n else 0
    scores = {}
    for c in [int(v) for v in np.unique(labels)] + [fresh]:
        scores[c] = fedcollab_objective(np.append(labels, c), params, D)
    choice = min(scores, key=lambda c: (scores[c], c == fresh, c))
    return choice, scores


@dataclass
class SweepResult:
    C: float
    partition: np.ndarray
    objective: float

    @property
    def n_coalitions(self) -> int:
        return n_coalitions(self.partition)


def sweep_capacity(C_values, params: ObjectiveParams, D, config: SolverConfig = SolverConfig()):
    out = []
    for C in C_values:
        part, trace = greedy_solve(params.with_C(float(C)), D, config)
        out.append(SweepResult(float(C), part, trace.objective))
    return out
