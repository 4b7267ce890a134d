"""A tiny numpy MLP: forward pass, backprop checked against finite differences, SGD."""

# %%
from __future__ import annotations

import numpy as np

from fedcollab import nn
from fedcollab.nn import Batch, MlpConfig

rng = np.random.default_rng(0)
cfg = MlpConfig((2, 8, 3), "tanh", "softmax")
model = nn.init_model(cfg, rng)
print(cfg, "parameters:", cfg.n_params)

# %% Backprop versus central differences on one parameter
x = rng.normal(size=(5, 2))
batch = Batch(x, rng.integers(0, 3, size=5))
grads = nn.backward(model, batch)
h = 1e-5
w = model.weights[0]
w[0, 0] += h
up = nn.loss(model, batch)
w[0, 0] -= 2 * h
down = nn.loss(model, batch)
w[0, 0] += h
print("analytic", grads.weights[0][0, 0], "numeric", (up - down) / (2 * h))

# %% Train on three Gaussian blobs
centers = np.array([[0.0, 3.0], [-3.0, -2.0], [3.0, -2.0]])
y = rng.integers(0, 3, size=600)
data = Batch(centers[y] + rng.normal(size=(600, 2)), y)
print("accuracy before", nn.accuracy(model, data))
model = nn.train_epochs(model, data, epochs=5, batch_size=32, lr=0.1, rng=rng)
print("accuracy after ", nn.accuracy(model, data))

# %% Averaging is how federated rounds combine client models
a, b = nn.init_model(cfg, 1), nn.init_model(cfg, 2)
avg = nn.average_models([a, b], [0.25, 0.75])
print("averaged first weight:", avg.weights[0][0, 0], "=", 0.25 * a.weights[0][0, 0] + 0.75 * b.weights[0][0, 0])
