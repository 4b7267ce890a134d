"""Acceptance gate: each test checks one numbered criterion and reports PASS/FAIL."""

from __future__ import annotations

import csv
import json
import math
import time
from itertools import combinations

import numpy as np
import pytest

from fedcollab import cli, datagen, distance, objective, solver
from fedcollab.objective import ObjectiveParams
from fedcollab.solver import SolverConfig

from test_nn import max_rel_error, random_net

SEEDS = range(5)
RESULTS: dict[int, str] = {}


def report(n: int, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    RESULTS[n] = line
    print(line)
    assert ok, line


def random_instance(rng, n):
    beta = rng.uniform(size=n)
    beta /= beta.sum()
    m = 1000.0
    D = np.triu(rng.uniform(size=(n, n)), 1)
    return ObjectiveParams(rng.uniform(0.05, 1.0) * math.sqrt(m), m, beta), D + D.T


# -- preset pipeline, built once ----------------------------------------------------

def _train_variant(root, cfg, name, distances_path, ignore_quantities=False):
    sub = root / "ablation" / name
    q = cli._quantities_from(root / "population")
    sol = cli.cmd_solve(distances_path, q, cfg.C, cfg.solver, sub / "partition.json",
                        ignore_quantities=ignore_quantities)
    tr = cli.cmd_train(root / "population", sol["partition"], cfg.fl, sub / "metrics.json",
                       partition_source=name, scenario_name="label20",
                       local_path=root / "local_baseline.json")
    return sol["doc"], tr["doc"]


@pytest.fixture(scope="module")
def preset_runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("preset")
    runs = []
    for seed in SEEDS:
        root = base / f"seed{seed}"
        cfg = cli.load_config(preset="label20", seed=seed)
        t = time.perf_counter()
        cli.cmd_run_all(cfg, root, compare=["grand", "local", "fedcollab"])
        pipeline_s = time.perf_counter() - t

        dm = distance.load_distances(root / "distances.csv")
        filled = distance.DistanceMatrix(objective.ignore_distances(dm.values), [], dm.config)
        filled_csv, _ = distance.save_distances(filled, root / "distances_mean_filled.csv")
        _, noq = _train_variant(root, cfg, "ignore_quantities", root / "distances.csv", True)
        _, nod = _train_variant(root, cfg, "ignore_distances", filled_csv)

        cli.cmd_gen_data(cfg, root / "newcomer", newcomer_of=0)
        join = cli.cmd_join(root / "population", root / "newcomer", cfg, root / "distances.csv",
                            root / "partition.json", root / "metrics.json", root / "models",
                            root / "join")["doc"]
        pop = json.loads((root / "population" / "manifest.json").read_text())
        runs.append({
            "seed": seed, "root": root, "cfg": cfg, "pipeline_s": pipeline_s,
            "D": dm.values,
            "quantities": np.array([c["train"]["count"] for c in pop["clients"]], dtype=np.float64),
            "partition": json.loads((root / "partition.json").read_text()),
            "fedcollab": json.loads((root / "metrics.json").read_text()),
            "grand": json.loads((root / "compare" / "grand" / "metrics.json").read_text()),
            "local": json.loads((root / "compare" / "local" / "metrics.json").read_text()),
            "ignore_quantities": noq, "ignore_distances": nod, "join": join,
        })
    return runs


# -- criteria ----------------------------------------------------------------------

def test_criterion_1_solver_optimality():
    rng = np.random.default_rng(0)
    t = time.perf_counter()
    gaps = []
    for _ in range(100):
        params, D = random_instance(rng, int(rng.integers(4, 9)))
        _, trace = solver.greedy_solve(params, D, SolverConfig(restarts=10))
        _, best, _ = solver.brute_force_solve(params, D)
        gaps.append((trace.objective - best) / best)
    elapsed = time.perf_counter() - t
    gaps = np.array(gaps)
    exact = int(np.sum(gaps <= 1e-12))
    within = int(np.sum(gaps <= 0.01))
    ok = exact >= 95 and within == 100 and elapsed < 10
    report(1, ok, f"exact {exact}/100 (need 95), within 1% {within}/100 (need 100), "
                  f"worst gap {gaps.max():.4f}, {elapsed:.1f}s")


def test_criterion_2_extreme_distance_cases():
    rng = np.random.default_rng(1)
    failures = 0
    for n in range(1, 11):
        for _ in range(3):
            counts = rng.integers(1, 3000, size=n)
            params = ObjectiveParams.from_counts(counts, float(rng.uniform(0.1, 50)))
            for seed in range(3):
                part, _ = solver.greedy_solve(params, np.zeros((n, n)), SolverConfig(seed=seed))
                failures += part.tolist() != [0] * n
            thr = max(objective.picky_threshold(i, params) for i in range(n))
            D = np.triu(rng.uniform(thr * 1.0001, thr * 3 + 1e-9, size=(n, n)), 1)
            D = D + D.T
            for seed in range(3):
                part, _ = solver.greedy_solve(params, D, SolverConfig(seed=seed))
                failures += part.tolist() != list(range(n))
    report(2, failures == 0, f"{failures} wrong partitions over 180 solves")


def test_criterion_3_picky_threshold():
    rng = np.random.default_rng(2)
    violations = 0
    for _ in range(50):
        n = int(rng.integers(2, 9))
        params, D = random_instance(rng, n)
        for i in range(n):
            others = [j for j in range(n) if j != i]
            best, best_val = (), math.inf
            for r in range(n):
                for extra in combinations(others, r):
                    labels = np.arange(n) + 1
                    labels[[i, *extra]] = 0
                    val = objective.client_error_score(i, labels, params, D)
                    if val < best_val:
                        best, best_val = extra, val
            thr = objective.picky_threshold(i, params)
            violations += sum(D[i, j] > thr for j in best)
    report(3, violations == 0, f"{violations} violations over 50 instances")


def test_criterion_4_gradients():
    rng = np.random.default_rng(3)
    worst = max(max_rel_error(*random_net(rng)) for _ in range(20))
    report(4, worst < 1e-4, f"max relative error {worst:.2e} over 20 nets")


def _pair(kind, seed, gap=0.0):
    if kind == "identical":
        cfg = datagen.ScenarioConfig("label_shift", 2, [[0.1] * 10] * 2, [(1000, 1, 1)] * 2, seed=seed)
    elif kind == "disjoint":
        cfg = datagen.ScenarioConfig("label_shift", 2, [[0.2] * 5 + [0] * 5, [0] * 5 + [0.2] * 5],
                                     [(1000, 1, 1)] * 2, seed=seed)
    else:
        cfg = datagen.ScenarioConfig("feature_shift", 2, [0.0, float(gap)], [(1000, 1, 1)] * 2, seed=seed)
    pop = datagen.generate(cfg)
    return distance.estimate_pair(pop.shards[0].train, pop.shards[1].train, 10,
                                  distance.DiscriminatorConfig(seed=seed)).distance


def test_criterion_5_distance_calibration():
    ident = float(np.median([_pair("identical", s) for s in SEEDS]))
    disjoint = float(np.median([_pair("disjoint", s) for s in SEEDS]))
    angle = {g: float(np.mean([_pair("feature", s, g) for s in SEEDS])) for g in (50, 130, 180)}
    ok = ident <= 0.1 and disjoint >= 0.85 and angle[50] < angle[130] <= angle[180]
    report(5, ok, f"identical {ident:.3f}, disjoint labels {disjoint:.3f}, "
                  f"angle gaps 50/130/180 -> {angle[50]:.3f}/{angle[130]:.3f}/{angle[180]:.3f}")


def test_criterion_6_end_to_end(preset_runs):
    med = {k: {m: float(np.median([r[k][m] for r in preset_runs])) for m in ("acc_mean", "ipr", "rsd")}
           for k in ("fedcollab", "grand", "local")}
    slowest = max(r["pipeline_s"] for r in preset_runs)
    fc, gr, lo = med["fedcollab"], med["grand"], med["local"]
    ok = (fc["acc_mean"] > gr["acc_mean"] and fc["acc_mean"] > lo["acc_mean"]
          and fc["ipr"] >= 0.95 and gr["ipr"] < 1.0 and fc["rsd"] < gr["rsd"] and slowest < 300)
    report(6, ok, f"acc fedcollab {fc['acc_mean']:.4f} / grand {gr['acc_mean']:.4f} / local "
                  f"{lo['acc_mean']:.4f}; ipr {fc['ipr']:.2f} vs {gr['ipr']:.2f}; rsd {fc['rsd']:.4f} "
                  f"vs {gr['rsd']:.4f}; slowest pipeline {slowest:.0f}s")


def test_criterion_7_capacity_sweep(preset_runs):
    grid = [0, 2, 4, 6, 8, 10, 1e3]
    problems, counts = [], []
    for r in preset_runs:
        params = ObjectiveParams.from_counts(r["quantities"], 0.0)
        cfg = SolverConfig(seed=r["seed"])
        sweep = solver.sweep_capacity(grid, params, r["D"], cfg)
        k = [s.n_coalitions for s in sweep]
        counts.append(k)
        n = len(r["quantities"])
        if sweep[0].partition.tolist() != list(range(n)):
            problems.append(f"seed {r['seed']}: C=0 not singletons")
        if any(b > a for a, b in zip(k, k[1:])):
            problems.append(f"seed {r['seed']}: counts {k} increase")
        (huge,) = solver.sweep_capacity([1e6], params, r["D"], cfg)
        if huge.partition.tolist() != [0] * n:
            problems.append(f"seed {r['seed']}: C=1e6 not grand")
    report(7, not problems, f"coalition counts per seed {counts}" + (f"; {problems}" if problems else ""))


def test_criterion_8_convergence_trace(preset_runs):
    worst_iters, bad = 0, 0
    for r in preset_runs:
        with open(r["root"] / "partition_trace.csv") as fh:
            rows = [(int(a["restart"]), int(a["inner_iter"]), float(a["objective"])) for a in csv.DictReader(fh)]
        by_restart: dict[int, list] = {}
        for restart, it, val in rows:
            by_restart.setdefault(restart, []).append((it, val))
        for steps in by_restart.values():
            vals = [v for _, v in steps]
            bad += sum(b > a for a, b in zip(vals, vals[1:]))
            worst_iters = max(worst_iters, steps[-1][0])
        bad += sum(not x["converged"] for x in r["partition"]["restarts"])
    ok = bad == 0 and worst_iters <= 100
    report(8, ok, f"{bad} increases or unconverged restarts; most inner iterations {worst_iters} (limit 100)")


def test_criterion_9_ablations(preset_runs):
    med = {k: float(np.median([r[k]["acc_mean"] for r in preset_runs]))
           for k in ("fedcollab", "ignore_quantities", "ignore_distances")}
    ok = med["ignore_quantities"] < med["fedcollab"] and med["ignore_distances"] < med["fedcollab"] \
        and med["ignore_distances"] < med["ignore_quantities"]
    report(9, ok, f"median acc full {med['fedcollab']:.4f}, ignore quantities "
                  f"{med['ignore_quantities']:.4f}, ignore distances {med['ignore_distances']:.4f}")


def test_criterion_10_newcomer(preset_runs):
    hits, deltas = 0, []
    for r in preset_runs:
        j = r["join"]
        home = r["partition"]["partition"][0]
        if j["assigned"] == home and not j["fresh_coalition"]:
            hits += 1
            deltas.append(j["incumbent_delta"])
    worst = min(deltas) if deltas else float("nan")
    ok = hits >= 4 and all(d >= -0.01 for d in deltas)
    report(10, ok, f"joined own type's coalition in {hits}/5 seeds; worst incumbent delta {worst:+.4f}")
