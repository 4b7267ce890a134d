"""Synthetic non-IID client populations.

Every client draws from one shared Gaussian-mixture classification task (one
isotropic blob per class) and then applies its type's shift:

* ``label_shift``   type = class-proportion vector
* ``feature_shift`` type = rotation angle in degrees, applied to the first two
  feature coordinates
* ``concept_shift`` type = permutation of label indices

Quantity shift comes only from the per-client sample counts.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nn import Batch

SCENARIOS = ("label_shift", "feature_shift", "concept_shift")


@dataclass
class ScenarioConfig:
    scenario: str
    n_clients: int
    client_types: list
    quantities: list  # one (train, valid, test) triple per client
    feature_dim: int = 8
    n_classes: int = 10
    seed: int = 0
    class_sep: float = 1.0
    noise: float = 1.0

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}")
        if self.n_clients < 1:
            raise ValueError("n_clients must be positive")
        if len(self.client_types) != self.n_clients:
            raise ValueError("need exactly one type descriptor per client")
        if len(self.quantities) != self.n_clients:
            raise ValueError("need exactly one (train, valid, test) triple per client")
        self.quantities = [tuple(int(c) for c in q) for q in self.quantities]
        for q in self.quantities:
            if len(q) != 3 or min(q) < 1:
                raise ValueError(f"every split count must be >= 1, got {q}")
        if self.feature_dim < 1 or self.n_classes < 1:
            raise ValueError("feature_dim and n_classes must be positive")
        if self.scenario == "feature_shift" and self.feature_dim < 2:
            raise ValueError("feature_shift rotates two coordinates; feature_dim must be >= 2")
        self.client_types = [self._check_type(t) for t in self.client_types]

    def _check_type(self, t):
        k = self.n_classes
        if self.scenario == "label_shift":
            p = np.asarray(t, dtype=np.float64)
            if p.shape != (k,) or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
                raise ValueError(f"label proportions must be a length-{k} distribution, got {t!r}")
            return [float(v) for v in p]
        if self.scenario == "feature_shift":
            if isinstance(t, (list, tuple, dict)):
                raise ValueError(f"rotation angle must be a number, got {t!r}")
            angle = float(t)
            if not np.isfinite(angle):
                raise ValueError("rotation angle must be finite")
            return angle
        perm = [int(v) for v in t]
        if sorted(perm) != list(range(k)):
            raise ValueError(f"{t!r} is not a permutation of range({k})")
        return perm

    def type_ids(self) -> list[int]:
        """Index of each client's type, numbered by first appearance."""
        seen: list = []
        ids = []
        for t in self.client_types:
            if t not in seen:
                seen.append(t)
            ids.append(seen.index(t))
        return ids

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "n_clients": self.n_clients,
            "client_types": self.client_types,
            "quantities": [list(q) for q in self.quantities],
            "feature_dim": self.feature_dim,
            "n_classes": self.n_classes,
            "seed": self.seed,
            "class_sep": self.class_sep,
            "noise": self.noise,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> ScenarioConfig:
        return cls(**doc)


@dataclass
class ClientShard:
    client_id: int
    train: Batch
    valid: Batch
    test: Batch

    def local_pool(self) -> Batch:
        """Train and valid rows together; everything a client may use before testing."""
        return Batch(
            np.vstack([self.train.features, self.valid.features]),
            np.concatenate([self.train.targets, self.valid.targets]),
        )


@dataclass
class ClientPopulation:
    shards: list[ClientShard]
    n_classes: int
    config: ScenarioConfig | None = None
    m: int = field(init=False)
    beta: np.ndarray = field(init=False)

    def __post_init__(self):
        if not self.shards:
            raise ValueError("empty population")
        self.m, self.beta = quantity_profile(self)

    def __len__(self):
        return len(self.shards)

    @property
    def n_clients(self) -> int:
        return len(self.shards)

    @property
    def feature_dim(self) -> int:
        return self.shards[0].train.features.shape[1]

    @property
    def train_counts(self) -> np.ndarray:
        return np.array([len(s.train) for s in self.shards], dtype=np.int64)

    def subset(self, clients) -> ClientPopulation:
        return ClientPopulation([self.shards[i] for i in clients], self.n_classes, None)


def quantity_profile(population) -> tuple[int, np.ndarray]:
    """Total train count ``m`` and the quantity distribution ``beta = m_i / m``."""
    counts = np.array([len(s.train) for s in population.shards], dtype=np.int64)
    if len(counts) == 0:
        raise ValueError("empty population")
    m = int(counts.sum())
    return m, counts / m


def class_means(config: ScenarioConfig) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0]))
    return rng.normal(0.0, config.class_sep, size=(config.n_classes, config.feature_dim))


def rotate(features: np.ndarray, degrees: float) -> np.ndarray:
    theta = np.deg2rad(degrees)
    c, s = np.cos(theta), np.sin(theta)
    out = features.copy()
    x0, x1 = features[:, 0], features[:, 1]
    out[:, 0] = c * x0 - s * x1
    out[:, 1] = s * x0 + c * x1
    return out


def sample_client(config: ScenarioConfig, client_type, n: int, rng: np.random.Generator,
                  means: np.ndarray | None = None) -> Batch:
    """Draw ``n`` i.i.d. samples from the law of one client type."""
    if means is None:
        means = class_means(config)
    k, d = means.shape
    if config.scenario == "label_shift":
        y = rng.choice(k, size=n, p=np.asarray(client_type))
    else:
        y = rng.integers(0, k, size=n)
    x = means[y] + config.noise * rng.standard_normal((n, d))
    if config.scenario == "feature_shift":
        x = rotate(x, client_type)
    elif config.scenario == "concept_shift":
        y = np.asarray(client_type)[y]
    return Batch(x, y.astype(np.int64))


def _draw_shard(config: ScenarioConfig, cid: int, client_type, counts, means) -> ClientShard:
    n_tr, n_va, n_te = counts
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1, cid]))
    pool = sample_client(config, client_type, n_tr + n_va + n_te, rng, means)
    x, y = pool.features, pool.targets
    return ClientShard(
        cid,
        Batch(x[:n_tr], y[:n_tr]),
        Batch(x[n_tr:n_tr + n_va], y[n_tr:n_tr + n_va]),
        Batch(x[n_tr + n_va:], y[n_tr + n_va:]),
    )


def generate(config: ScenarioConfig) -> ClientPopulation:
    means = class_means(config)
    shards = [_draw_shard(config, cid, t, q, means)
              for cid, (t, q) in enumerate(zip(config.client_types, config.quantities))]
    return ClientPopulation(shards, config.n_classes, config)


def generate_newcomer(config: ScenarioConfig, like: int, client_id: int | None = None) -> ClientPopulation:
    """One extra client with the type and split sizes of client ``like``.

    Its samples come from the stream of ``client_id`` (default: the next free
    id), so it is a fresh draw from the same law, not a copy of ``like``.
    """
    if not 0 <= like < config.n_clients:
        raise ValueError(f"client {like} is not in a population of {config.n_clients}")
    cid = config.n_clients if client_id is None else int(client_id)
    single = ScenarioConfig(**{**config.to_dict(), "n_clients": 1,
                               "client_types": [config.client_types[like]],
                               "quantities": [config.quantities[like]]})
    shard = _draw_shard(config, cid, config.client_types[like], config.quantities[like],
                        class_means(config))
    return ClientPopulation([shard], config.n_classes, single)


# -- presets -----------------------------------------------------------------

def _grouped(values, sizes):
    out = []
    for v, s in zip(values, sizes):
        out.extend([v] * s)
    return out


# Four types, five clients each. The first two types are the "large" clients.
LABEL_TYPES = [
    [0.25, 0.25, 0.25, 0.25, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [0.0, 0.0, 0.25, 0.25, 0.25, 0.25, 0.0, 0.0, 0.0, 0.0],
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.35, 0.35, 0.15, 0.15],
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.15, 0.15, 0.35, 0.35],
]
FEATURE_ANGLES = [25.0, -25.0, 155.0, -155.0]
# identity; 7 of 10 labels aligned with it; two derangements sharing 7 labels
CONCEPT_PERMS = [
    [0, 1, 2, 3, 4, 5, 6, 7, 8, 9],
    [1, 2, 0, 3, 4, 5, 6, 7, 8, 9],
    [5, 6, 7, 8, 9, 0, 1, 2, 3, 4],
    [6, 7, 5, 8, 9, 0, 1, 2, 3, 4],
]

PRESET_QUANTITIES = {
    # (train, valid, test) for large clients 0-9 and small clients 10-19
    "label20": ((2100, 300, 350), (14, 46, 350)),
    "feature20": ((2500, 300, 500), (340, 60, 500)),
    "concept20": ((2500, 300, 500), (120, 30, 500)),
}

PRESET_TASK = {
    "label20": dict(feature_dim=64, class_sep=0.25),
    "feature20": dict(feature_dim=8, class_sep=1.0),
    "concept20": dict(feature_dim=8, class_sep=1.5),
}

PRESETS = tuple(PRESET_QUANTITIES)


def preset(name: str, seed: int = 0, **overrides) -> ScenarioConfig:
    """The 20-client, four-type layouts (clients 0-9 large, 10-19 small)."""
    if name not in PRESET_QUANTITIES:
        raise ValueError(f"unknown preset {name!r}; choose from {PRESETS}")
    large, small = PRESET_QUANTITIES[name]
    quantities = [large] * 10 + [small] * 10
    if name == "label20":
        scenario, types = "label_shift", LABEL_TYPES
    elif name == "feature20":
        scenario, types = "feature_shift", FEATURE_ANGLES
    else:
        scenario, types = "concept_shift", CONCEPT_PERMS
    kwargs = dict(
        scenario=scenario,
        n_clients=20,
        client_types=_grouped(types, [5, 5, 5, 5]),
        quantities=quantities,
        n_classes=10,
        seed=seed,
        **PRESET_TASK[name],
    )
    kwargs.update(overrides)
    return ScenarioConfig(**kwargs)


# -- serialization -------------------------------------------------------------

SPLITS = ("train", "valid", "test")


def _write_csv(path: Path, batch: Batch):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        d = batch.features.shape[1]
        w.writerow([f"x{k}" for k in range(d)] + ["y"])
        for row, label in zip(batch.features, batch.targets):
            w.writerow([repr(float(v)) for v in row] + [int(label)])


def _read_csv(path: Path) -> Batch:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    d = len(header) - 1
    if not body:
        return Batch(np.zeros((0, d)), np.zeros(0, dtype=np.int64))
    x = np.array([[float(v) for v in r[:d]] for r in body], dtype=np.float64)
    y = np.array([int(r[d]) for r in body], dtype=np.int64)
    return Batch(x, y)


def save_population(population: ClientPopulation, out_dir) -> Path:
    """Write ``manifest.json`` plus one CSV per client and split."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for shard in population.shards:
        entry = {"client_id": shard.client_id}
        for split in SPLITS:
            name = f"client_{shard.client_id:03d}_{split}.csv"
            _write_csv(out / name, getattr(shard, split))
            digest = hashlib.sha256((out / name).read_bytes()).hexdigest()
            entry[split] = {"path": name, "count": len(getattr(shard, split)), "sha256": digest}
        files.append(entry)
    manifest = {
        "config": population.config.to_dict() if population.config else None,
        "n_clients": population.n_clients,
        "n_classes": population.n_classes,
        "feature_dim": population.feature_dim,
        "m": population.m,
        "beta": population.beta.tolist(),
        "clients": files,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path


def load_population(path) -> ClientPopulation:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    manifest = json.loads(path.read_text())
    root = path.parent
    shards = []
    for entry in manifest["clients"]:
        splits = {s: _read_csv(root / entry[s]["path"]) for s in SPLITS}
        shards.append(ClientShard(entry["client_id"], **splits))
    cfg = manifest.get("config")
    return ClientPopulation(
        shards, manifest["n_classes"], ScenarioConfig.from_dict(cfg) if cfg else None
    )
