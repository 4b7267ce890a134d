"""The full pipeline through the command-line entry point (also `fedcollab ...` or `python -m fedcollab ...`)."""

# %%
from __future__ import annotations

import json
import sys
import tempfile
from pathlib import Path

from fedcollab import cli

seed = sys.argv[1] if len(sys.argv) > 1 else "0"
tmp = Path(tempfile.mkdtemp(prefix="fedcollab-"))
run = tmp / "run"

# %% Generate, estimate, solve and train in one go, with baselines alongside
cli.main(["run-all", "--preset", "label20", "--seed", seed, "--out", str(run),
          "--compare", "grand,local,fedcollab"])
print((run / "comparison.csv").read_text())

# %% How the structure changes with the capacity constant
cli.main(["solve", str(run / "distances.csv"), "--population", str(run / "population"),
          "--sweep-C", "0,2,4,6,8,10,1000", "--out", str(tmp / "sweep" / "partition.json")])

# %% A new client arrives
cli.main(["gen-data", "--preset", "label20", "--seed", seed, "--newcomer-of", "0", "--out", str(tmp / "new")])
cli.main(["join", str(run / "population"), str(tmp / "new"), "--seed", seed, "--run", str(run)])

manifest = json.loads((run / "manifest.json").read_text())
print("counters", manifest["counters"])
print("artifacts intact:", cli.verify_manifest(run / "manifest.json") == [])
print("outputs under", tmp)
