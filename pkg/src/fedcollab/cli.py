"""Command-line pipeline: generate data, estimate distances, solve, train, join.

Every stage reads and writes plain files, so stages can be rerun one at a
time. Outputs carry a ``.stamp`` file holding the digest of their inputs;
a stage whose stamp still matches (and whose outputs still hash to the
recorded digests) is skipped unless ``--force`` is given.

Exit codes: 0 ok, 2 invalid config, 3 I/O failure, 4 missing artifact,
5 inconsistent inputs.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import shutil
import sys
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import __version__, datagen, distance, flsim, objective, solver
from .datagen import ScenarioConfig
from .distance import DiscriminatorConfig
from .flsim import FlConfig
from .nn import TrainingDivergence
from .solver import SolverConfig

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_MISSING = 4
EXIT_INCONSISTENT = 5

SEED_ENV = "FEDCOLLAB_SEED"
DEFAULT_PRESET = "label20"
DEFAULT_C = 10.0


class CliError(Exception):
    code = 1


class ConfigError(CliError):
    code = EXIT_CONFIG


class IOFailure(CliError):
    code = EXIT_IO


class MissingArtifact(CliError):
    code = EXIT_MISSING


class InconsistentInputs(CliError):
    code = EXIT_INCONSISTENT


# -- configuration ------------------------------------------------------------------

@dataclass
class RunConfig:
    scenario: ScenarioConfig
    discriminator: DiscriminatorConfig
    C: float
    solver: SolverConfig
    fl: FlConfig
    seed: int
    preset: str | None = None

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "preset": self.preset,
            "scenario": self.scenario.to_dict(),
            "discriminator": asdict(self.discriminator),
            "objective": {"C": self.C},
            "solver": asdict(self.solver),
            "fl": self.fl.to_dict(),
        }


def _build(cls, section: dict, what: str):
    try:
        return cls(**section)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {what} section: {exc}") from exc


def resolve_seed(doc_seed, flag_seed=None) -> tuple[int, bool]:
    """Seed precedence: ``--seed`` flag, then ``FEDCOLLAB_SEED``, then the config file.

    The flag says whether the seed came from an override.
    """
    if flag_seed is not None:
        return int(flag_seed), True
    env = os.environ.get(SEED_ENV)
    if env not in (None, ""):
        try:
            return int(env), True
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV}={env!r} is not an integer") from exc
    try:
        return int(doc_seed if doc_seed is not None else 0), False
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config seed {doc_seed!r} is not an integer") from exc


def load_config(path=None, preset: str | None = None, seed: int | None = None) -> RunConfig:
    """Read a JSON config with sections scenario, discriminator, objective, solver, fl.

    Missing sections take defaults. A ``preset`` (flag, top-level key or key of
    the scenario section) builds the scenario from a named layout, with any
    other scenario keys applied as overrides. One run seed feeds every stage.
    """
    doc: dict = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise MissingArtifact(f"config file {path} not found")
        try:
            doc = json.loads(path.read_text())
        except OSError as exc:
            raise IOFailure(f"cannot read {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
    unknown = set(doc) - {"seed", "preset", "scenario", "discriminator", "objective", "solver", "fl"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    run_seed, overridden = resolve_seed(doc.get("seed"), seed)

    def section(name):
        sec = doc.get(name) or {}
        if not isinstance(sec, dict):
            raise ConfigError(f"section {name!r} must be an object")
        sec = dict(sec)
        if overridden or "seed" not in sec:
            sec["seed"] = run_seed
        return sec

    scen = section("scenario")
    name = preset or scen.pop("preset", None) or doc.get("preset")
    if name is None and "scenario" not in scen:
        name = DEFAULT_PRESET
    if name is not None:
        if name not in datagen.PRESETS:
            raise ConfigError(f"unknown preset {name!r}; choose from {list(datagen.PRESETS)}")
        try:
            scenario = datagen.preset(name, **scen)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid scenario overrides: {exc}") from exc
    else:
        scenario = _build(ScenarioConfig, scen, "scenario")

    obj = doc.get("objective") or {}
    try:
        C = float(obj.get("C", DEFAULT_C))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"objective.C must be a number: {exc}") from exc
    if not np.isfinite(C) or C < 0:
        raise ConfigError("objective.C must be a finite nonnegative number")

    fl_section = section("fl")
    if "hidden_sizes" in fl_section:
        fl_section["hidden_sizes"] = tuple(fl_section["hidden_sizes"])
    return RunConfig(
        scenario=scenario,
        discriminator=_build(DiscriminatorConfig, section("discriminator"), "discriminator"),
        C=C,
        solver=_build(SolverConfig, section("solver"), "solver"),
        fl=_build(FlConfig, fl_section, "fl"),
        seed=run_seed,
        preset=name,
    )


# -- digests and stage caching ------------------------------------------------------

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def digest_json(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


def _stamp_path(artifact: Path) -> Path:
    return artifact.with_name(artifact.name + ".stamp")


def _cache_hit(artifact: Path, key: str) -> bool:
    stamp = _stamp_path(artifact)
    if not stamp.exists():
        return False
    try:
        doc = json.loads(stamp.read_text())
    except (OSError, json.JSONDecodeError):
        return False
    if doc.get("inputs") != key:
        return False
    root = stamp.parent
    for rel, digest in doc.get("outputs", {}).items():
        p = root / rel
        if not p.exists() or sha256_file(p) != digest:
            return False
    return True


def _write_stamp(artifact: Path, key: str, outputs) -> None:
    stamp = _stamp_path(artifact)
    root = stamp.parent
    doc = {
        "inputs": key,
        "outputs": {os.path.relpath(p, root): sha256_file(p) for p in outputs},
    }
    stamp.write_text(json.dumps(doc, indent=2, sort_keys=True))


def _need(path: Path, what: str) -> Path:
    if not Path(path).exists():
        raise MissingArtifact(f"{what} not found at {path}")
    return Path(path)


def _population_manifest(population_dir) -> Path:
    p = Path(population_dir)
    return _need(p / "manifest.json" if p.is_dir() or not p.suffix else p, "population manifest")


def _read_json(path: Path, what: str) -> dict:
    _need(path, what)
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise InconsistentInputs(f"{what} at {path} is not valid JSON: {exc}") from exc


# -- stages ---------------------------------------------------------------------------

def cmd_gen_data(cfg: RunConfig, out_dir, force: bool = False, newcomer_of: int | None = None) -> dict:
    """Write a population (or a single newcomer cloned from client ``newcomer_of``'s type)."""
    out = Path(out_dir)
    manifest = out / "manifest.json"
    key = digest_json({"scenario": cfg.scenario.to_dict(), "newcomer_of": newcomer_of})
    cached = not force and _cache_hit(manifest, key)
    if not cached:
        try:
            if newcomer_of is None:
                pop = datagen.generate(cfg.scenario)
            else:
                pop = datagen.generate_newcomer(cfg.scenario, newcomer_of)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        datagen.save_population(pop, out)
        doc = json.loads(manifest.read_text())
        files = [manifest] + [out / e[s]["path"] for e in doc["clients"] for s in datagen.SPLITS]
        _write_stamp(manifest, key, files)
    doc = json.loads(manifest.read_text())
    return {"population": manifest, "sha256": sha256_file(manifest),
            "n_clients": doc["n_clients"], "cached": cached}


def cmd_estimate(population_dir, cfg: RunConfig, out_path, force: bool = False,
                 ablate_distances: bool = False, n_jobs: int = 1) -> dict:
    """Pairwise discriminator distances as a CSV matrix plus JSON sidecar."""
    manifest = _population_manifest(population_dir)
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    key = digest_json({"population": sha256_file(manifest),
                       "discriminator": asdict(cfg.discriminator),
                       "ablate_distances": ablate_distances})
    cached = not force and _cache_hit(out, key)
    ablated = out.with_name(out.stem + "_mean_filled.csv")
    if not cached:
        pop = datagen.load_population(manifest)
        dm = distance.estimate_all(pop, cfg.discriminator, n_jobs=n_jobs)
        outputs = list(distance.save_distances(dm, out))
        if ablate_distances:
            filled = distance.DistanceMatrix(objective.ignore_distances(dm.values), [], cfg.discriminator)
            outputs += list(distance.save_distances(filled, ablated))
        _write_stamp(out, key, outputs)
    dm = distance.load_distances(out)
    result = {"distances": out, "sidecar": out.with_suffix(".json"), "n": dm.n,
              "discriminators_trained": dm.n_discriminators,
              "params_communicated": dm.params_communicated, "cached": cached}
    if ablate_distances:
        result["mean_filled"] = ablated
    return result


def _quantities_from(population_dir=None, quantities=None) -> np.ndarray:
    if quantities is not None:
        q = np.asarray(quantities, dtype=np.float64)
    elif population_dir is not None:
        doc = _read_json(_population_manifest(population_dir), "population manifest")
        q = np.array([e["train"]["count"] for e in doc["clients"]], dtype=np.float64)
    else:
        raise ConfigError("solve needs client quantities (--population or --quantities)")
    if q.ndim != 1 or len(q) == 0 or np.any(q <= 0):
        raise InconsistentInputs("quantities must be a nonempty list of positive counts")
    return q


def _partition_doc(partition, params, D, trace, extra) -> dict:
    labels = objective.canonical(partition)
    return {
        "partition": labels.tolist(),
        "assignment": {str(i): int(k) for i, k in enumerate(labels)},
        "coalitions": objective.coalitions(partition),
        "n_coalitions": objective.n_coalitions(partition),
        "objective": trace.objective,
        "C": float(params.C),
        "per_client_scores": objective.client_error_scores(partition, params, D).tolist(),
        "best_restart": trace.best_restart,
        "restarts": [
            {"restart": r.restart, "objective": r.objective, "inner_iters": r.inner_iters,
             "outer_iters": r.outer_iters, "converged": r.converged}
            for r in trace.restarts
        ],
        **extra,
    }


def _write_trace(path: Path, trace) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["restart", "inner_iter", "objective"])
        for r, it, val in trace.rows():
            w.writerow([r, it, repr(float(val))])


def cmd_solve(distances_path, quantities, C: float, solver_config: SolverConfig, out_path,
              ignore_quantities: bool = False, sweep_C=None, oracle: bool = False) -> dict:
    """Greedy coalition structure, with optional capacity sweep and exhaustive check."""
    dm = distance.load_distances(_need(Path(distances_path), "distance matrix"))
    q = np.asarray(quantities, dtype=np.float64)
    if len(q) != dm.n:
        raise InconsistentInputs(f"{len(q)} quantities for a {dm.n}x{dm.n} distance matrix")
    if C < 0 or not np.isfinite(C):
        raise ConfigError("C must be a finite nonnegative number")
    params = objective.ObjectiveParams.from_counts(q, C)
    if ignore_quantities:
        params = objective.ignore_quantities(params)
    D = dm.values
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    partition, trace = solver.greedy_solve(params, D, solver_config)
    # relative to the partition file so run directories can be moved or compared
    extra = {"ignore_quantities": ignore_quantities, "quantities": q.tolist(),
             "solver": asdict(solver_config),
             "distances": os.path.relpath(Path(distances_path).resolve(), out.parent.resolve())}
    if oracle:
        if dm.n > solver.BRUTE_FORCE_MAX_N:
            raise InconsistentInputs(f"--oracle supports N <= {solver.BRUTE_FORCE_MAX_N}, got {dm.n}")
        best, value, count = solver.brute_force_solve(params, D)
        gap = (trace.objective - value) / abs(value) if value else trace.objective - value
        extra["oracle"] = {"partition": objective.canonical(best).tolist(), "objective": value,
                           "n_enumerated": count, "relative_gap": gap}
    doc = _partition_doc(partition, params, D, trace, extra)
    out.write_text(json.dumps(doc, indent=2))
    trace_path = out.with_name(out.stem + "_trace.csv")
    _write_trace(trace_path, trace)
    result = {"partition": out, "trace": trace_path, "doc": doc}
    if sweep_C:
        rows = solver.sweep_capacity(sweep_C, params, D, solver_config)
        sweep_path = out.with_name(out.stem + "_sweep.csv")
        with open(sweep_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["C", "n_coalitions", "objective", "partition"])
            for r in rows:
                w.writerow([repr(r.C), r.n_coalitions, repr(r.objective),
                            " ".join(str(v) for v in objective.canonical(r.partition))])
        sweep_json = out.with_name(out.stem + "_sweep.json")
        sweep_json.write_text(json.dumps([
            {"C": r.C, "n_coalitions": r.n_coalitions, "objective": r.objective,
             "partition": objective.canonical(r.partition).tolist()} for r in rows
        ], indent=2))
        result["sweep"] = sweep_path
        result["sweep_json"] = sweep_json
        result["sweep_rows"] = rows
    return result


def _load_partition(partition_path, n: int) -> tuple[np.ndarray, dict]:
    doc = _read_json(Path(partition_path), "partition")
    if "partition" not in doc:
        raise InconsistentInputs(f"{partition_path} has no 'partition' entry")
    part = np.asarray(doc["partition"], dtype=np.int64)
    if part.ndim != 1 or len(part) != n:
        raise InconsistentInputs(f"partition has {len(part)} entries for {n} clients")
    return part, doc


def _save_models(runs, labels, models_dir: Path) -> dict:
    models_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    for run in runs:
        k = int(labels[run.members[0]])
        p = models_dir / f"coalition_{k:03d}.json"
        p.write_text(run.model.to_json())
        paths[k] = p
    return paths


def _local_baseline(pop, manifest: Path, fl: FlConfig, path: Path, force: bool) -> np.ndarray:
    """Local accuracies, cached next to the metrics so several trainings share them."""
    local_cfg = FlConfig(**{**asdict(fl), "algorithm": "fedavg", "finetune_epochs": 0})
    key = digest_json({"population": sha256_file(manifest), "fl": local_cfg.to_dict()})
    if not force and _cache_hit(path, key):
        return np.asarray(json.loads(path.read_text())["per_client_local_acc"])
    res = flsim.train_local_baselines(pop, fl)
    path.write_text(json.dumps({"per_client_local_acc": res.per_client_acc.tolist(),
                                "fl": local_cfg.to_dict()}, indent=2))
    _write_stamp(path, key, [path])
    return res.per_client_acc


def cmd_train(population_dir, partition_path, fl: FlConfig, out_path, force: bool = False,
              partition_source: str = "file", scenario_name: str = "",
              local_path=None, models_dir=None) -> dict:
    """Train one model per coalition and score it against local training."""
    manifest = _population_manifest(population_dir)
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    local_path = Path(local_path) if local_path else out.parent / "local_baseline.json"
    models_dir = Path(models_dir) if models_dir else out.parent / "models"
    key = digest_json({"population": sha256_file(manifest),
                       "partition": sha256_file(_need(Path(partition_path), "partition")),
                       "fl": fl.to_dict(), "source": partition_source, "scenario": scenario_name})
    if not force and _cache_hit(out, key):
        return {"metrics": out, "metrics_csv": out.with_suffix(".csv"), "models_dir": models_dir,
                "doc": json.loads(out.read_text()), "cached": True}
    pop = datagen.load_population(manifest)
    part, _ = _load_partition(partition_path, pop.n_clients)
    try:
        local_acc = _local_baseline(pop, manifest, fl, local_path, force)
        result = flsim.train_coalitions(pop, part, fl)
    except TrainingDivergence as exc:
        raise CliError(f"training diverged: {exc}") from exc
    labels = objective.canonical(part)
    if fl.algorithm == "local_only":
        labels = np.arange(pop.n_clients)
    model_paths = _save_models(result.runs, labels, models_dir)
    report = flsim.compute_metrics(result.per_client_acc, local_acc)
    row = {"scenario": scenario_name, "algorithm": fl.algorithm,
           "partition_source": partition_source, "seed": fl.seed}
    extra = {
        "partition": labels.tolist(),
        "fl": fl.to_dict(),
        "params_communicated": result.params_communicated,
        "models": {str(k): str(p.relative_to(out.parent)) if p.is_relative_to(out.parent) else str(p)
                   for k, p in model_paths.items()},
    }
    json_path, csv_path = flsim.save_metrics(report, out, row, extra)
    _write_stamp(out, key, [json_path, csv_path, local_path, *model_paths.values()])
    return {"metrics": json_path, "metrics_csv": csv_path, "models_dir": models_dir,
            "doc": json.loads(json_path.read_text()), "cached": False}


def cmd_join(population_dir, new_client_dir, cfg: RunConfig, distances_path, partition_path,
             metrics_path, models_dir, out_dir) -> dict:
    """Place one newcomer into the solved structure and retrain only its coalition."""
    manifest = _population_manifest(population_dir)
    new_manifest = _population_manifest(new_client_dir)
    pop = datagen.load_population(manifest)
    newcomer_pop = datagen.load_population(new_manifest)
    if newcomer_pop.n_clients != 1:
        raise InconsistentInputs(f"newcomer directory holds {newcomer_pop.n_clients} clients, expected 1")
    if (newcomer_pop.feature_dim, newcomer_pop.n_classes) != (pop.feature_dim, pop.n_classes):
        raise InconsistentInputs("newcomer feature or label space differs from the population")
    dm = distance.load_distances(_need(Path(distances_path), "distance matrix"))
    if dm.n != pop.n_clients:
        raise InconsistentInputs(f"distance matrix is {dm.n}x{dm.n} for {pop.n_clients} clients")
    part, part_doc = _load_partition(partition_path, pop.n_clients)
    metrics = _read_json(Path(metrics_path), "metrics")
    models_dir = _need(Path(models_dir), "model directory")

    n = pop.n_clients
    src = newcomer_pop.shards[0]
    newcomer = datagen.ClientShard(n, src.train, src.valid, src.test)
    new_dm = distance.estimate_newcomer(pop, newcomer, cfg.discriminator)

    counts = np.append(pop.train_counts, len(newcomer.train)).astype(np.float64)
    C = float(part_doc.get("C", cfg.C))
    params = objective.ObjectiveParams.from_counts(counts, C)
    if part_doc.get("ignore_quantities"):
        params = objective.ignore_quantities(params)
    labels = objective.canonical(part)
    choice, scores = solver.assign_new_client(labels, new_dm.values[n, :n], dm.values, params)
    fresh = choice not in set(labels.tolist())

    extended = datagen.ClientPopulation(pop.shards + [newcomer], pop.n_classes, None)
    members = [i for i in range(n) if labels[i] == choice]
    fl = cfg.fl
    newcomer_run = flsim.train_coalition(extended, [n], fl)
    local_acc, _ = flsim.evaluate_runs(extended, [newcomer_run], fl)
    run = flsim.train_coalition(extended, members + [n], fl) if members else newcomer_run
    acc, _ = flsim.evaluate_runs(extended, [run], fl)

    out = Path(out_dir)
    out_models = out / "models"
    if out_models.exists():
        shutil.rmtree(out_models)
    shutil.copytree(models_dir, out_models)
    model_path = out_models / f"coalition_{choice:03d}.json"
    model_path.write_text(run.model.to_json())

    before = np.asarray(metrics["per_client_acc"], dtype=np.float64)
    inc_before = float(before[members].mean()) if members else None
    inc_after = float(acc[members].mean()) if members else None
    new_labels = np.append(labels, choice)
    doc = {
        "newcomer": n,
        "assigned": int(choice),
        "fresh_coalition": bool(fresh),
        "members": members + [n],
        "retrained": [] if fresh else [int(choice)],
        "scores": {str(k): v for k, v in scores.items()},
        "distances_to_incumbents": new_dm.values[n, :n].tolist(),
        "newcomer_acc": float(acc[n]),
        "newcomer_local_acc": float(local_acc[n]),
        "newcomer_gain": float(acc[n] - local_acc[n]),
        "incumbent_acc_before": inc_before,
        "incumbent_acc_after": inc_after,
        "incumbent_delta": None if inc_before is None else inc_after - inc_before,
        "partition": new_labels.tolist(),
        "discriminators_trained": new_dm.n_discriminators,
        "params_communicated": new_dm.params_communicated + run.params_communicated,
        "C": C,
    }
    dist_csv, _ = distance.save_distances(new_dm, out / "distances_newcomer.csv")
    (out / "partition.json").write_text(json.dumps(
        {"partition": new_labels.tolist(), "coalitions": objective.coalitions(new_labels),
         "n_coalitions": objective.n_coalitions(new_labels), "C": C}, indent=2))
    join_path = out / "join.json"
    join_path.write_text(json.dumps(doc, indent=2))
    return {"join": join_path, "models_dir": out_models, "doc": doc}


# -- full pipeline ------------------------------------------------------------------

COMPARE_SOURCES = ("grand", "local", "fedcollab")


def _artifact(path: Path, root: Path) -> dict:
    return {"path": str(path.relative_to(root)), "sha256": sha256_file(path)}


def cmd_run_all(cfg: RunConfig, out_dir, force: bool = False, compare=None, n_jobs: int = 1) -> dict:
    """gen-data, estimate, solve and train in one go; writes ``manifest.json``."""
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    timings: dict = {}
    arts: dict = {}

    t = time.perf_counter()
    gen = cmd_gen_data(cfg, root / "population", force=force)
    timings["gen_data"] = time.perf_counter() - t
    arts["population"] = _artifact(gen["population"], root)

    t = time.perf_counter()
    est = cmd_estimate(root / "population", cfg, root / "distances.csv", force=force, n_jobs=n_jobs)
    timings["estimate"] = time.perf_counter() - t
    arts["distances"] = _artifact(est["distances"], root)
    arts["distances_sidecar"] = _artifact(est["sidecar"], root)

    t = time.perf_counter()
    quantities = _quantities_from(root / "population")
    sol = cmd_solve(est["distances"], quantities, cfg.C, cfg.solver, root / "partition.json")
    timings["solve"] = time.perf_counter() - t
    arts["partition"] = _artifact(sol["partition"], root)
    arts["solver_trace"] = _artifact(sol["trace"], root)

    t = time.perf_counter()
    name = cfg.preset or cfg.scenario.scenario
    tr = cmd_train(root / "population", sol["partition"], cfg.fl, root / "metrics.json",
                   force=force, partition_source="fedcollab", scenario_name=name)
    timings["train"] = time.perf_counter() - t
    arts["metrics"] = _artifact(tr["metrics"], root)
    arts["metrics_csv"] = _artifact(tr["metrics_csv"], root)
    arts["local_baseline"] = _artifact(root / "local_baseline.json", root)
    for k, rel in sorted(tr["doc"]["models"].items(), key=lambda kv: int(kv[0])):
        arts[f"model_{int(k):03d}"] = _artifact(root / rel, root)

    fl_comm = tr["doc"]["params_communicated"]
    if compare:
        t = time.perf_counter()
        rows = []
        for source in compare:
            if source not in COMPARE_SOURCES:
                raise ConfigError(f"unknown comparison {source!r}; choose from {list(COMPARE_SOURCES)}")
            if source == "fedcollab":
                doc = tr["doc"]
            else:
                sub = root / "compare" / source
                sub.mkdir(parents=True, exist_ok=True)
                n = len(quantities)
                labels = np.zeros(n, dtype=np.int64) if source == "grand" else np.arange(n)
                ppath = sub / "partition.json"
                ppath.write_text(json.dumps({"partition": labels.tolist()}, indent=2))
                res = cmd_train(root / "population", ppath, cfg.fl, sub / "metrics.json", force=force,
                                partition_source=source, scenario_name=name,
                                local_path=root / "local_baseline.json")
                doc = res["doc"]
                arts[f"compare_{source}"] = _artifact(res["metrics"], root)
            rows.append({"scenario": name, "algorithm": cfg.fl.algorithm, "partition_source": source,
                         "seed": cfg.fl.seed, "acc": f"{doc['acc_mean']:.6f}",
                         "ipr": f"{doc['ipr']:.6f}", "rsd": f"{doc['rsd']:.6f}"})
        cmp_path = root / "comparison.csv"
        flsim.write_metrics_rows(cmp_path, rows)
        arts["comparison"] = _artifact(cmp_path, root)
        timings["compare"] = time.perf_counter() - t

    sol_doc = sol["doc"]
    manifest = {
        "tool": "fedcollab",
        "version": __version__,
        "config": cfg.to_dict(),
        "seeds": {"run": cfg.seed, "scenario": cfg.scenario.seed, "discriminator": cfg.discriminator.seed,
                  "solver": cfg.solver.seed, "fl": cfg.fl.seed},
        "artifacts": arts,
        "counters": {
            "discriminators_trained": est["discriminators_trained"],
            "discriminator_params_communicated": est["params_communicated"],
            "fl_params_communicated": fl_comm,
            "solver_restarts": len(sol_doc["restarts"]),
            "solver_inner_iterations": sum(r["inner_iters"] for r in sol_doc["restarts"]),
        },
        "summary": {"n_coalitions": sol_doc["n_coalitions"], "objective": sol_doc["objective"],
                    "acc": tr["doc"]["acc_mean"], "ipr": tr["doc"]["ipr"], "rsd": tr["doc"]["rsd"]},
        "timings": {k: round(v, 3) for k, v in timings.items()},
    }
    path = root / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2))
    return {"manifest": path, "doc": manifest}


def verify_manifest(path) -> list[str]:
    """Names of artifacts that are missing or no longer match their recorded digest."""
    path = Path(path)
    doc = json.loads(path.read_text())
    bad = []
    for name, art in doc["artifacts"].items():
        p = path.parent / art["path"]
        if not p.exists() or sha256_file(p) != art["sha256"]:
            bad.append(name)
    return bad


# -- argument parsing ---------------------------------------------------------------

def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _names(text: str) -> list[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


def _add_config_args(p, with_preset=True):
    p.add_argument("--config", type=Path, help="JSON config with scenario/discriminator/objective/solver/fl sections")
    if with_preset:
        p.add_argument("--preset", choices=datagen.PRESETS, help="named 20-client layout")
    p.add_argument("--seed", type=int, help=f"run seed (overrides {SEED_ENV} and the config)")


def _cfg(args) -> RunConfig:
    return load_config(args.config, getattr(args, "preset", None), args.seed)


def _run_gen_data(args):
    res = cmd_gen_data(_cfg(args), args.out, force=args.force, newcomer_of=args.newcomer_of)
    print(f"population: {res['population']} ({res['n_clients']} clients{', cached' if res['cached'] else ''})")


def _run_estimate(args):
    res = cmd_estimate(args.population, _cfg(args), args.out, force=args.force,
                       ablate_distances=args.ablate_distances, n_jobs=args.jobs)
    note = ", cached" if res["cached"] else ""
    print(f"distances: {res['distances']} ({res['discriminators_trained']} discriminators{note})")
    if "mean_filled" in res:
        print(f"mean-filled: {res['mean_filled']}")


def _run_solve(args):
    cfg = _cfg(args)
    C = cfg.C if args.C is None else args.C
    quantities = _quantities_from(args.population, args.quantities)
    res = cmd_solve(args.distances, quantities, C, cfg.solver, args.out,
                    ignore_quantities=args.ignore_quantities, sweep_C=args.sweep_C, oracle=args.oracle)
    doc = res["doc"]
    print(f"partition: {' '.join(map(str, doc['partition']))}")
    print(f"objective: {doc['objective']:.6g} ({doc['n_coalitions']} coalitions, C={doc['C']:g})")
    if "oracle" in doc:
        o = doc["oracle"]
        print(f"oracle: {o['objective']:.6g} over {o['n_enumerated']} partitions, gap {o['relative_gap']:.3g}")
    for r in res.get("sweep_rows", []):
        print(f"C={r.C:g}: {r.n_coalitions} coalitions, objective {r.objective:.6g}")


def _run_train(args):
    cfg = _cfg(args)
    fl = cfg.fl
    if args.algorithm:
        try:
            fl = FlConfig(**{**asdict(fl), "algorithm": args.algorithm})
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    res = cmd_train(args.population, args.partition, fl, args.out, force=args.force,
                    partition_source=args.source, scenario_name=cfg.preset or cfg.scenario.scenario)
    d = res["doc"]
    print(f"acc {d['acc_mean']:.4f}  ipr {d['ipr']:.3f}  rsd {d['rsd']:.4f}  -> {res['metrics']}")


def _run_join(args):
    cfg = _cfg(args)
    run = Path(args.run) if args.run else None

    def pick(value, default_name):
        if value is not None:
            return Path(value)
        if run is None:
            raise ConfigError(f"give --run or --{default_name.split('.')[0]}")
        return run / default_name

    res = cmd_join(args.population, args.newcomer, cfg,
                   pick(args.distances, "distances.csv"), pick(args.partition, "partition.json"),
                   pick(args.metrics, "metrics.json"), pick(args.models, "models"),
                   args.out or (run / "join" if run else Path("join")))
    d = res["doc"]
    where = "a new coalition" if d["fresh_coalition"] else f"coalition {d['assigned']}"
    print(f"newcomer {d['newcomer']} -> {where}; gain {d['newcomer_gain']:+.4f}")
    if d["incumbent_delta"] is not None:
        print(f"incumbents {d['incumbent_acc_before']:.4f} -> {d['incumbent_acc_after']:.4f}")


def _run_all(args):
    cfg = _cfg(args)
    if args.C is not None:
        cfg.C = args.C
    res = cmd_run_all(cfg, args.out, force=args.force, compare=args.compare, n_jobs=args.jobs)
    s = res["doc"]["summary"]
    print(f"{s['n_coalitions']} coalitions; acc {s['acc']:.4f} ipr {s['ipr']:.3f} rsd {s['rsd']:.4f}")
    print(f"manifest: {res['manifest']}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedcollab",
        description="Quantity- and distance-aware coalition formation for cross-silo federated learning.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic client population")
    _add_config_args(p)
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--newcomer-of", type=int, metavar="CLIENT",
                   help="write one new client drawn like CLIENT instead of the whole population")
    p.add_argument("--force", action="store_true", help="regenerate even if cached")
    p.set_defaults(func=_run_gen_data)

    p = sub.add_parser("estimate", help="train pairwise discriminators and write the distance matrix")
    p.add_argument("population", type=Path, help="population directory")
    _add_config_args(p, with_preset=False)
    p.add_argument("--out", type=Path, required=True, help="distance matrix CSV")
    p.add_argument("--ablate-distances", action="store_true",
                   help="also write the matrix with off-diagonal entries replaced by their mean")
    p.add_argument("--jobs", type=int, default=1, help="worker processes")
    p.add_argument("--force", action="store_true", help="recompute even if cached")
    p.set_defaults(func=_run_estimate)

    p = sub.add_parser("solve", help="search the coalition structure")
    p.add_argument("distances", type=Path, help="distance matrix CSV")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--population", type=Path, help="read train counts from this population")
    src.add_argument("--quantities", type=_floats, help="comma-separated train counts")
    _add_config_args(p, with_preset=False)
    p.add_argument("--C", type=float, help="capacity constant (overrides objective.C)")
    p.add_argument("--out", type=Path, required=True, help="partition JSON")
    p.add_argument("--ignore-quantities", action="store_true", help="treat all clients as equally sized")
    p.add_argument("--sweep-C", type=_floats, metavar="C1,C2,...", help="also solve for each listed C")
    p.add_argument("--oracle", action="store_true", help="check against exhaustive search (N <= 12)")
    p.set_defaults(func=_run_solve)

    p = sub.add_parser("train", help="train one FL model per coalition and report gains")
    p.add_argument("population", type=Path, help="population directory")
    p.add_argument("partition", type=Path, help="partition JSON")
    _add_config_args(p, with_preset=False)
    p.add_argument("--algorithm", choices=flsim.ALGORITHMS, help="overrides fl.algorithm")
    p.add_argument("--source", default="file", help="partition_source label for the metrics row")
    p.add_argument("--out", type=Path, required=True, help="metrics JSON")
    p.add_argument("--force", action="store_true", help="retrain even if cached")
    p.set_defaults(func=_run_train)

    p = sub.add_parser("join", help="assign a new client and retrain only its coalition")
    p.add_argument("population", type=Path, help="incumbent population directory")
    p.add_argument("newcomer", type=Path, help="single-client population directory")
    _add_config_args(p, with_preset=False)
    p.add_argument("--run", type=Path, help="run directory holding distances, partition, metrics and models")
    p.add_argument("--distances", type=Path)
    p.add_argument("--partition", type=Path)
    p.add_argument("--metrics", type=Path)
    p.add_argument("--models", type=Path)
    p.add_argument("--out", type=Path, help="output directory (default RUN/join)")
    p.set_defaults(func=_run_join)

    p = sub.add_parser("run-all", help="full pipeline with a manifest")
    _add_config_args(p)
    p.add_argument("--C", type=float, help="capacity constant (overrides objective.C)")
    p.add_argument("--out", type=Path, required=True, help="run directory")
    p.add_argument("--compare", type=_names, metavar="grand,local,fedcollab",
                   help="also train these partitions and write comparison.csv")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for distance estimation")
    p.add_argument("--force", action="store_true", help="ignore cached stages")
    p.set_defaults(func=_run_all)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except CliError as exc:
        print(f"fedcollab: error: {exc}", file=sys.stderr)
        return exc.code
    except OSError as exc:
        print(f"fedcollab: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
