"""Federated training inside coalitions, and who gains over training alone."""

# %%
from __future__ import annotations

import numpy as np

from fedcollab import datagen, flsim
from fedcollab.datagen import ScenarioConfig
from fedcollab.flsim import FlConfig

perms = datagen.preset("concept20").client_types[::5]
types = [perms[0], perms[0], perms[1], perms[1]]
cfg = ScenarioConfig("concept_shift", 4, types, [(800, 100, 300), (40, 20, 300)] * 2,
                     feature_dim=8, n_classes=10, class_sep=1.5, seed=0)
pop = datagen.generate(cfg)
fl = FlConfig()

local = flsim.train_local_baselines(pop, fl).per_client_acc
print("local          ", np.round(local, 3))

# %% Everyone together mixes incompatible label maps
grand = flsim.train_coalitions(pop, [0, 0, 0, 0], fl).per_client_acc
r = flsim.compute_metrics(grand, local)
print("grand          ", np.round(grand, 3), f"ipr {r.ipr:.2f} rsd {r.rsd:.3f}")

# %% Grouping by concept helps the small clients and hurts nobody much
paired = flsim.train_coalitions(pop, [0, 0, 1, 1], fl).per_client_acc
r = flsim.compute_metrics(paired, local)
print("matched pairs  ", np.round(paired, 3), f"ipr {r.ipr:.2f} rsd {r.rsd:.3f}")

# %% FedProx and finetuning are drop-in variants
for algo, extra in (("fedprox", {"prox_mu": 0.1}), ("finetune", {"finetune_epochs": 1})):
    res = flsim.train_coalitions(pop, [0, 0, 1, 1], FlConfig(algorithm=algo, **extra))
    print(f"{algo:15s}", np.round(res.per_client_acc, 3))
