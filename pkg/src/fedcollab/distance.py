"""Pairwise client distances from federated client discriminators.

For a pair of clients a small binary MLP is trained, federated between the
two of them, to tell which client a (features, one-hot label) row came from.
Its balanced accuracy on held-out rows turns into a distance
``clamp(2 * BalAcc - 1, 0, 1)``: 0 when the discriminator cannot beat a coin
flip, 1 when it separates the clients perfectly.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np

from . import nn
from .datagen import ClientPopulation, ClientShard
from .nn import Batch, MlpConfig, MlpModel


@dataclass(frozen=True)
class DiscriminatorConfig:
    hidden_size: int = 64
    rounds: int = 20
    local_epochs: int = 1
    batch_size: int = 32
    lr: float = 0.05
    train_fraction: float = 0.8
    min_local_steps: int = 10
    # multiplier on the one-hot block; None means sqrt(feature_dim) so the
    # label block is not drowned out by many noisy feature coordinates
    label_scale: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.hidden_size < 1 or self.local_epochs < 1 or self.batch_size < 1:
            raise ValueError("hidden_size, local_epochs and batch_size must be positive")
        if self.rounds < 0:
            raise ValueError("rounds must be nonnegative")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must lie in (0, 1)")
        if self.label_scale is not None and self.label_scale <= 0:
            raise ValueError("label_scale must be positive")

    def model_config(self, n_inputs: int) -> MlpConfig:
        return MlpConfig((n_inputs, self.hidden_size, 1), "relu", "binary_logistic")


class DegenerateShard(ValueError):
    """A client has too few samples to split into discriminator train/valid parts."""


@dataclass
class PairEstimate:
    i: int
    j: int
    distance: float
    balacc: float
    m_train: int
    n_valid: tuple[int, int]
    params_communicated: int


@dataclass
class DistanceMatrix:
    values: np.ndarray
    pairs: list[PairEstimate] = field(default_factory=list)
    config: DiscriminatorConfig | None = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ValueError("distance matrix must be square")
        if not np.allclose(v, v.T, rtol=0, atol=0):
            raise ValueError("distance matrix must be symmetric")
        if np.any(np.diag(v) != 0):
            raise ValueError("distance matrix must have a zero diagonal")
        if np.any(v < 0) or np.any(v > 1):
            raise ValueError("distances must lie in [0, 1]")
        self.values = v

    @property
    def n(self) -> int:
        return len(self.values)

    @property
    def n_discriminators(self) -> int:
        return len(self.pairs)

    @property
    def params_communicated(self) -> int:
        return sum(p.params_communicated for p in self.pairs)


def pair_input(shard_or_batch, n_classes: int, label_scale: float = 1.0) -> np.ndarray:
    """Rows ``[x, label_scale * one_hot(y)]`` fed to the discriminator."""
    batch = shard_or_batch.local_pool() if isinstance(shard_or_batch, ClientShard) else shard_or_batch
    x = np.asarray(batch.features, dtype=np.float64)
    y = np.asarray(batch.targets, dtype=np.int64).reshape(-1)
    if len(y) and (y.min() < 0 or y.max() >= n_classes):
        raise ValueError(f"label outside 0..{n_classes - 1}")
    onehot = np.zeros((len(y), n_classes))
    onehot[np.arange(len(y)), y] = label_scale
    return np.hstack([x, onehot])


def balanced_accuracy(model: MlpModel, pos_features, neg_features) -> float:
    """Mean of the hit rates on the positive (label 1) and negative (label 0) rows."""
    pos = np.asarray(pos_features, dtype=np.float64)
    neg = np.asarray(neg_features, dtype=np.float64)
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("balanced accuracy needs both classes")
    tpr = np.mean(nn.forward(model, pos) >= 0.5)
    tnr = np.mean(nn.forward(model, neg) < 0.5)
    return float(0.5 * (tpr + tnr))


def _split(n_pool, m_train, rng):
    order = rng.permutation(n_pool)
    return order[:m_train], order[m_train:]


def estimate_pair(client_i: Batch, client_j: Batch, n_classes: int,
                  config: DiscriminatorConfig = DiscriminatorConfig(),
                  init_model: MlpModel | None = None,
                  rng: np.random.Generator | None = None,
                  ids: tuple[int, int] = (0, 1)) -> PairEstimate:
    """Federated discriminator between two clients.

    ``client_i`` is labelled 1 and ``client_j`` 0. Both draw ``m_train`` rows
    (the same number on each side) for training; their remaining rows are the
    validation sets the balanced accuracy is measured on. Each of the
    ``config.rounds`` rounds broadcasts the shared model, runs local SGD on
    both clients and averages the two results with weight one half.
    If ``ids`` arrive in descending order the two clients are swapped first,
    so the lower id is always the positive side.
    """
    if ids[0] > ids[1]:
        client_i, client_j, ids = client_j, client_i, (ids[1], ids[0])
    client_i, client_j = (c.local_pool() if isinstance(c, ClientShard) else c
                          for c in (client_i, client_j))
    d = np.asarray(client_i.features).shape[1]
    scale = config.label_scale if config.label_scale is not None else float(np.sqrt(d))
    xi = pair_input(client_i, n_classes, scale)
    xj = pair_input(client_j, n_classes, scale)
    if len(xi) < 2 or len(xj) < 2:
        raise DegenerateShard(
            f"clients {ids} need at least 2 samples each, have {len(xi)} and {len(xj)}"
        )
    if rng is None:
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, *sorted(ids)]))
    m_train = max(1, int(np.floor(config.train_fraction * min(len(xi), len(xj)))))
    m_train = min(m_train, min(len(xi), len(xj)) - 1)
    tr_i, va_i = _split(len(xi), m_train, rng)
    tr_j, va_j = _split(len(xj), m_train, rng)
    cfg = config.model_config(xi.shape[1])
    model = init_model.copy() if init_model is not None else nn.init_model(cfg, rng)
    if model.config != cfg:
        raise ValueError("initial discriminator does not match the pair input width")
    local = [
        Batch(xi[tr_i], np.ones(m_train)),
        Batch(xj[tr_j], np.zeros(m_train)),
    ]
    client_rngs = rng.spawn(2)
    for _ in range(config.rounds):
        updates = [
            nn.train_epochs(model, data, config.local_epochs, config.batch_size, config.lr, crng,
                            min_steps=config.min_local_steps)
            for data, crng in zip(local, client_rngs)
        ]
        model = nn.average_models(updates, [0.5, 0.5])
    bal = balanced_accuracy(model, xi[va_i], xj[va_j])
    distance = float(np.clip(2.0 * bal - 1.0, 0.0, 1.0))
    # down and up link for both clients each round
    communicated = 4 * config.rounds * cfg.n_params
    return PairEstimate(ids[0], ids[1], distance, bal, m_train, (len(va_i), len(va_j)), communicated)


def _pair_job(args):
    a, b, pool_a, pool_b, n_classes, config = args
    return estimate_pair(pool_a, pool_b, n_classes, config, ids=(a, b))


def estimate_all(population: ClientPopulation,
                 config: DiscriminatorConfig = DiscriminatorConfig(),
                 n_jobs: int = 1) -> DistanceMatrix:
    """All ``N(N-1)/2`` pair estimates assembled into a symmetric matrix.

    The lower client index of every pair plays the positive side, and each
    pair is seeded from ``(seed, i, j)`` alone, so results do not depend on
    scheduling or on ``n_jobs``.
    """
    n = population.n_clients
    pools = [s.local_pool() for s in population.shards]
    jobs = [(a, b, pools[a], pools[b], population.n_classes, config)
            for a, b in combinations(range(n), 2)]
    if n_jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as ex:
            pairs = list(ex.map(_pair_job, jobs, chunksize=max(1, len(jobs) // (4 * n_jobs))))
    else:
        pairs = [_pair_job(job) for job in jobs]
    values = np.zeros((n, n))
    for p in pairs:
        values[p.i, p.j] = values[p.j, p.i] = p.distance
    return DistanceMatrix(values, pairs, config)


def estimate_newcomer(population: ClientPopulation, newcomer: ClientShard,
                      config: DiscriminatorConfig = DiscriminatorConfig()) -> DistanceMatrix:
    """Distances from one newcomer (index ``N``) to each of the ``N`` incumbents."""
    n = population.n_clients
    new_pool = newcomer.local_pool()
    pairs = [
        estimate_pair(population.shards[a].local_pool(), new_pool, population.n_classes,
                      config, ids=(a, n))
        for a in range(n)
    ]
    values = np.zeros((n + 1, n + 1))
    for p in pairs:
        values[p.i, p.j] = values[p.j, p.i] = p.distance
    return DistanceMatrix(values, pairs, config)


# -- persistence -------------------------------------------------------------------

def save_distances(dm: DistanceMatrix, csv_path) -> tuple[Path, Path]:
    """CSV matrix (9 significant digits) plus a JSON sidecar with per-pair details."""
    csv_path = Path(csv_path)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        for row in dm.values:
            w.writerow([f"{v:.9g}" for v in row])
    sidecar = csv_path.with_suffix(".json")
    doc = {
        "n": dm.n,
        "config": asdict(dm.config) if dm.config else None,
        "n_discriminators": dm.n_discriminators,
        "params_communicated": dm.params_communicated,
        "pairs": [
            {"i": p.i, "j": p.j, "distance": p.distance, "balacc": p.balacc,
             "m_train": p.m_train, "n_valid": list(p.n_valid),
             "params_communicated": p.params_communicated}
            for p in dm.pairs
        ],
    }
    sidecar.write_text(json.dumps(doc, indent=2))
    return csv_path, sidecar


def load_distances(csv_path) -> DistanceMatrix:
    csv_path = Path(csv_path)
    with open(csv_path, newline="") as fh:
        values = np.array([[float(v) for v in row] for row in csv.reader(fh) if row])
    values = values.reshape(len(values), -1) if values.size else np.zeros((0, 0))
    sidecar = csv_path.with_suffix(".json")
    pairs, config = [], None
    if sidecar.exists():
        doc = json.loads(sidecar.read_text())
        config = DiscriminatorConfig(**doc["config"]) if doc.get("config") else None
        pairs = [PairEstimate(p["i"], p["j"], p["distance"], p["balacc"], p["m_train"],
                              tuple(p["n_valid"]), p.get("params_communicated", 0))
                 for p in doc["pairs"]]
    return DistanceMatrix(values, pairs, config)
