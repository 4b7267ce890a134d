"""How far apart are two clients? Train a discriminator and read off its balanced accuracy."""

# %%
from __future__ import annotations

import numpy as np

from fedcollab import datagen, distance
from fedcollab.datagen import ScenarioConfig

disc = distance.DiscriminatorConfig(seed=0)


def pair_distance(types, scenario="label_shift", **kw):
    cfg = ScenarioConfig(scenario, 2, types, [(1000, 1, 1)] * 2, seed=0, **kw)
    pop = datagen.generate(cfg)
    return distance.estimate_pair(pop.shards[0].train, pop.shards[1].train, 10, disc).distance


# %% Same distribution: the discriminator cannot beat a coin flip
print("same law      ", pair_distance([[0.1] * 10] * 2))
# %% Disjoint label supports: the one-hot block alone separates them
print("disjoint      ", pair_distance([[0.2] * 5 + [0] * 5, [0] * 5 + [0.2] * 5]))
# %% Rotation gaps produce graded distances
for gap in (50, 130, 180):
    print(f"rotation {gap:3d}  ", pair_distance([0.0, float(gap)], "feature_shift"))

# %% A whole population: N(N-1)/2 discriminators, symmetric matrix
small = ScenarioConfig("label_shift", 4, [[0.5, 0.5, 0, 0]] * 2 + [[0, 0, 0.5, 0.5]] * 2,
                       [(300, 60, 50)] * 4, n_classes=4, seed=1)
dm = distance.estimate_all(datagen.generate(small), disc)
print(dm.n_discriminators, "discriminators")
print(np.round(dm.values, 2))
