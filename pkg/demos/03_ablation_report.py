"""A small conditioning-mode ablation with a rendered comparison table.

Runs one train + infer + evaluate cycle per conditioning mode on the phantom
benchmark, stores each cell under ``runs/<config_hash>/``, then renders a
markdown table (best bold, second underlined) and metric-vs-axis plots.
Rerunning with the same store skips finished cells.

    python3 demos/03_ablation_report.py --store /tmp/refmar_demo03 --steps 60
"""
import argparse
from pathlib import Path

from refmar.harness import ResultsStore, RunConfig, TableSpec, render_report, run_ablation

parser = argparse.ArgumentParser()
parser.add_argument("--store", default="/tmp/refmar_demo03")
parser.add_argument("--steps", type=int, default=60)
parser.add_argument("--M", type=int, default=2)
args = parser.parse_args()

base = RunConfig(N=16, r=16, total_steps=args.steps, ensemble_M=args.M, step_count=8, test_limit=2,
                 phantom={"subjects_per_category": 5})
store = ResultsStore(args.store)
records = run_ablation({"conditioning_mode": ["none", "multi", "grid"]}, base, store)
for rec in records:
    print(rec["config"]["conditioning_mode"], rec["status"], rec["config_hash"])

spec = TableSpec(axis="conditioning_mode", where={"N": 16, "r": 16},
                 plots_dir=str(Path(args.store) / "plots"), title="Conditioning modes")
print(render_report(store, spec))
