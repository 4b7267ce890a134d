"""The coalition score trades sample size against distribution distance."""

# %%
from __future__ import annotations

import numpy as np

from fedcollab import objective
from fedcollab.objective import ObjectiveParams

# %% Two equal clients at distance 0.3: merging wins when C is large enough
D = np.array([[0.0, 0.3], [0.3, 0.0]])
for C in (1.0, 5.0, 10.0):
    p = ObjectiveParams(C, 400, np.array([0.5, 0.5]))
    apart = objective.fedcollab_objective([0, 1], p, D)
    together = objective.fedcollab_objective([0, 0], p, D)
    print(f"C={C:4.1f}  apart {apart:.4f}  together {together:.4f}")

# %% Rows of the collaboration matrix are within-coalition quantity shares
print(objective.collab_matrix([0, 0, 1], [0.25, 0.25, 0.5]))

# %% Small clients tolerate more distant partners
p = ObjectiveParams.from_counts([100, 400, 1600], 10.0)
for i in range(3):
    print(f"client {i} with {int(p.beta[i] * p.m)} rows: threshold {objective.picky_threshold(i, p):.3f}")

# %% Per-client scores add up to twice the objective
labels = [0, 0, 1]
D3 = np.array([[0, 0.1, 0.8], [0.1, 0, 0.7], [0.8, 0.7, 0]])
scores = objective.client_error_scores(labels, p, D3)
print(scores, scores.sum() / 2, objective.fedcollab_objective(labels, p, D3))
