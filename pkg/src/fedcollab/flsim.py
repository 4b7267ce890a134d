"""Federated training inside fixed coalitions, and the gain metrics.

Every coalition runs its own FedAvg-style loop with full participation.
Client randomness (minibatch order) is keyed on the client id and model
initialisation on the coalition's smallest member, so a coalition of one
reproduces that client's local training bit for bit.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .datagen import ClientPopulation
from .nn import MlpConfig, MlpModel
from .objective import coalitions

ALGORITHMS = ("fedavg", "fedprox", "local_only", "finetune")


@dataclass(frozen=True)
class FlConfig:
    algorithm: str = "fedavg"
    rounds: int = 20
    local_epochs: int = 1
    batch_size: int = 32
    lr: float = 0.1
    prox_mu: float = 0.0
    finetune_epochs: int = 0
    hidden_sizes: tuple[int, ...] = (32,)
    activation: str = "relu"
    seed: int = 0

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if self.rounds < 0 or self.local_epochs < 0 or self.finetune_epochs < 0:
            raise ValueError("rounds and epoch counts must be nonnegative")
        if self.batch_size < 1 or self.lr <= 0 or self.prox_mu < 0:
            raise ValueError("batch_size and lr must be positive, prox_mu nonnegative")
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))

    def model_config(self, n_inputs: int, n_classes: int) -> MlpConfig:
        return MlpConfig((n_inputs, *self.hidden_sizes, n_classes), self.activation, "softmax")

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["hidden_sizes"] = list(self.hidden_sizes)
        return doc


def _client_rng(seed, stream, cid):
    return np.random.default_rng(np.random.SeedSequence([seed, stream, cid]))


@dataclass
class CoalitionRun:
    members: list[int]
    model: MlpModel
    weights: np.ndarray
    params_communicated: int


@dataclass
class TrainResult:
    runs: list[CoalitionRun]
    per_client_acc: np.ndarray
    client_models: dict[int, MlpModel] = field(default_factory=dict)

    @property
    def params_communicated(self) -> int:
        return sum(r.params_communicated for r in self.runs)

    def coalition_of(self, cid: int) -> CoalitionRun:
        for r in self.runs:
            if cid in r.members:
                return r
        raise KeyError(cid)


def train_coalition(population: ClientPopulation, members, config: FlConfig) -> CoalitionRun:
    members = sorted(int(c) for c in members)
    cfg = config.model_config(population.feature_dim, population.n_classes)
    model = nn.init_model(cfg, _client_rng(config.seed, 0, members[0]))
    counts = np.array([len(population.shards[c].train) for c in members], dtype=np.float64)
    weights = counts / counts.sum()
    rngs = {c: _client_rng(config.seed, 1, c) for c in members}
    mu = config.prox_mu if config.algorithm == "fedprox" else 0.0
    for _ in range(config.rounds):
        updates = [
            nn.train_epochs(model, population.shards[c].train, config.local_epochs,
                            config.batch_size, config.lr, rngs[c], prox_mu=mu, anchor=model)
            for c in members
        ]
        model = nn.average_models(updates, weights)
    communicated = 2 * config.rounds * len(members) * cfg.n_params if len(members) > 1 else 0
    return CoalitionRun(members, model, weights, communicated)


def evaluate_runs(population: ClientPopulation, runs, config: FlConfig):
    """Per-client test accuracy under each client's coalition model (after finetuning, if any)."""
    acc = np.full(population.n_clients, np.nan)
    client_models = {}
    for run in runs:
        for c in run.members:
            model = run.model
            if config.algorithm == "finetune" and config.finetune_epochs > 0:
                model = nn.train_epochs(model, population.shards[c].train, config.finetune_epochs,
                                        config.batch_size, config.lr, _client_rng(config.seed, 2, c))
            client_models[c] = model
            acc[c] = nn.accuracy(model, population.shards[c].test)
    return acc, client_models


def train_coalitions(population: ClientPopulation, partition, config: FlConfig) -> TrainResult:
    """One model per coalition; each client scored on its own test split."""
    if len(partition) != population.n_clients:
        raise ValueError("partition length does not match the population")
    groups = coalitions(partition)
    if config.algorithm == "local_only":
        groups = [[c] for c in range(population.n_clients)]
    runs = [train_coalition(population, g, config) for g in groups]
    acc, models = evaluate_runs(population, runs, config)
    return TrainResult(runs, acc, models)


def train_local_baselines(population: ClientPopulation, config: FlConfig) -> TrainResult:
    """Every client alone on its own data, with the same budget as one FL run."""
    local = FlConfig(**{**asdict(config), "algorithm": "fedavg", "finetune_epochs": 0})
    return train_coalitions(population, np.arange(population.n_clients), local)


@dataclass
class MetricsReport:
    per_client_acc: np.ndarray
    per_client_local_acc: np.ndarray
    gains: np.ndarray
    acc_mean: float
    ipr: float
    rsd: float

    def to_dict(self) -> dict:
        return {
            "per_client_acc": self.per_client_acc.tolist(),
            "per_client_local_acc": self.per_client_local_acc.tolist(),
            "gains": self.gains.tolist(),
            "acc_mean": self.acc_mean,
            "ipr": self.ipr,
            "rsd": self.rsd,
        }


def compute_metrics(per_client_acc, per_client_local_acc) -> MetricsReport:
    """Mean accuracy, incentivized participation rate and reward SD."""
    acc = np.asarray(per_client_acc, dtype=np.float64)
    local = np.asarray(per_client_local_acc, dtype=np.float64)
    if acc.shape != local.shape or acc.ndim != 1:
        raise ValueError("accuracy vectors must have equal length")
    if len(acc) == 0:
        raise ValueError("no clients")
    gains = acc - local
    return MetricsReport(
        acc, local, gains,
        acc_mean=float(acc.mean()),
        ipr=float(np.mean(gains > 0)),
        rsd=float(np.std(gains)),  # population SD
    )


CSV_FIELDS = ("scenario", "algorithm", "partition_source", "seed", "acc", "ipr", "rsd")


def save_metrics(report: MetricsReport, json_path, row: dict | None = None,
                 extra: dict | None = None) -> tuple[Path, Path]:
    """Write the full report as JSON and a one-row summary CSV beside it."""
    json_path = Path(json_path)
    json_path.parent.mkdir(parents=True, exist_ok=True)
    doc = report.to_dict()
    if row:
        doc["run"] = row
    if extra:
        doc.update(extra)
    json_path.write_text(json.dumps(doc, indent=2))
    csv_path = json_path.with_suffix(".csv")
    write_metrics_rows(csv_path, [metrics_row(report, **(row or {}))])
    return json_path, csv_path


def metrics_row(report: MetricsReport, scenario="", algorithm="", partition_source="", seed="") -> dict:
    return {
        "scenario": scenario, "algorithm": algorithm, "partition_source": partition_source,
        "seed": seed, "acc": f"{report.acc_mean:.6f}", "ipr": f"{report.ipr:.6f}",
        "rsd": f"{report.rsd:.6f}",
    }


def write_metrics_rows(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow(r)
