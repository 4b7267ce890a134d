"""Greedy coalition search with restarts, checked against exhaustive enumeration."""

# %%
from __future__ import annotations

import math

import numpy as np

from fedcollab import solver
from fedcollab.objective import ObjectiveParams

rng = np.random.default_rng(4)
n = 7
beta = rng.uniform(size=n)
beta /= beta.sum()
D = np.triu(rng.uniform(size=(n, n)), 1)
D = D + D.T
params = ObjectiveParams(0.3 * math.sqrt(1000), 1000, beta)

# %%
part, trace = solver.greedy_solve(params, D)
print("greedy", part, round(trace.objective, 6), "best restart", trace.best_restart)
for r in trace.restarts[:3]:
    print(f"  restart {r.restart}: {r.outer_iters} passes, {r.inner_iters} client visits, {r.objective:.6f}")

best, value, count = solver.brute_force_solve(params, D)
print("exhaustive", best, round(value, 6), f"over {count} = Bell({n}) partitions")

# %% Granularity versus the capacity constant
for res in solver.sweep_capacity([0, 5, 10, 20, 100, 1e4], params, D):
    print(f"C={res.C:8g}: {res.n_coalitions} coalitions {res.partition}")

# %% A newcomer is placed without moving anybody else
existing = np.array([0, 0, 1, 1])
D_old = np.array([[0, 0, 1, 1], [0, 0, 1, 1], [1, 1, 0, 0], [1, 1, 0, 0]], float)
label, scores = solver.assign_new_client(existing, [1, 1, 0.05, 0.05], D_old,
                                         ObjectiveParams.from_counts([100] * 5, 5.0))
print("newcomer joins", label, {k: round(v, 4) for k, v in scores.items()})
