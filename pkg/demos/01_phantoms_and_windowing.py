"""Phantom slices, HU windowing and reference-set assembly.

Generates a small seeded phantom benchmark, shows how Hounsfield units map to
8-bit codes, and assembles same-category clean references for one test slice.
Runs in a few seconds.

    python3 demos/01_phantoms_and_windowing.py --out /tmp/refmar_demo01
"""
import argparse
from pathlib import Path

import numpy as np

from refmar.data import (
    WINDOW_HI, WINDOW_LO, phantom_benchmark, repeat_count_for, save_png, subset_manifest, window_hu,
)
from refmar.harness import build_references

parser = argparse.ArgumentParser()
parser.add_argument("--out", default="/tmp/refmar_demo01")
args = parser.parse_args()
out = Path(args.out)

# The display window clips to [lo, hi] and rounds half away from zero.
hu = np.array([[-1000.0, WINDOW_LO, 0.0, 400.0, WINDOW_HI, 3000.0]])
print(f"window [{WINDOW_LO}, {WINDOW_HI}] HU")
for v, code in zip(hu[0], window_hu(hu).pixels[0]):
    print(f"  {v:7.1f} HU -> {code:3d}")

# Task pairs plus a disjoint donor population for references.
manifest, pairs = phantom_benchmark(subjects_per_category=3, test_count=4)
manifest = subset_manifest(manifest, 4, allow_any_N=True)
print("\nsplits:", {k: len(v) for k, v in manifest.splits.items()})
print("train categories:", manifest.category_counts("train"))
print("epochs for a 750-step budget at N=4:", repeat_count_for(4))

test_id = sorted(manifest.splits["test"])[0]
pair = pairs[test_id]
err = np.abs(pair.source.pixels.astype(int) - pair.target.pixels.astype(int))
print(f"\n{test_id} ({pair.category}): mean |corrupted - clean| = {err.mean():.2f} codes")

refs = build_references(manifest, pairs, [test_id], K=5, seed=0)[test_id]
print("reference donors:", refs.donor_ids)

save_png(pair.source, out / f"{test_id}_src.png")
save_png(pair.target, out / f"{test_id}_trg.png")
for i, r in enumerate(refs.references):
    save_png(r, out / f"{test_id}_ref{i}.png")
print(f"wrote images to {out}")
