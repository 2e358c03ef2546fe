"""
Scoring and seeded grids
========================

ROUGE with max-matching across batch rows, and a small grid run written to
JSONL and re-scored from disk.
"""

import tempfile
from dataclasses import replace
from pathlib import Path

from textleak import harness
from textleak.metrics import rouge

# a reordered sentence keeps every unigram but only half the bigrams
rep = rouge([[2, 5, 6, 7, 3]], [[2, 7, 5, 6, 3]])
print(f"R-1 {rep.r1:.3f}  R-2 {rep.r2:.3f}  R-L {rep.rl:.3f}")

# batch rows are matched to whichever recovered row scores best
rep = rouge([[2, 5, 6, 3], [2, 8, 9, 3]], [[2, 8, 9, 3], [2, 5, 6, 3]])
print("swapped rows:", rep.as_dict(), rep.assignments)

# a deliberately small grid: two batch sizes, two seeds, two methods
cfg = harness.build_config(harness.parse_config_text("""
attack.rounds = 1
attack.cont.steps = 100
attack.methods = grab, tag
experiment.batch_sizes = 1, 2
experiment.num_seeds = 2
"""))
out = Path(tempfile.mkdtemp()) / "grid.jsonl"
record = harness.run_experiment(replace(cfg, output=str(out)))
for a in record.aggregates:
    print(a["method"], "b =", a["batch_size"], {k: round(v, 3) for k, v in a["mean"].items()})
for t in record.trends:
    print("trend", t["method"], t["from"], "->", t["to"], "ok" if t["ok"] else "violated")

# stored recoveries can be re-scored later without re-running anything
rescored = harness.rescore(harness.read_records(out))
print(len(rescored), "runs re-scored from", out.name)
