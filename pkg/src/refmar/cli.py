"""Command-line entry point: ``refmar <subcommand>``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 training abort.
A YAML/JSON config document (``--config``) may supply any run field; flags win.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from .data import (
    build_manifest, ingest_raw_dir, phantom_benchmark, phantom_dataset, save_png, subset_manifest,
    write_layout,
)
from .errors import ConfigError, DataError, InjectionError, ShapeMismatchError, TrainingAbort
from .flowmatch import provenance, train
from .foundation import load_foundation
from .harness import (
    AXES, ResultsStore, RunConfig, TableSpec, build_references, load_config_document,
    load_data, render_report, run_ablation,
)
from .infer import SamplerConfig, ensemble_restore
from .lora import load_adapters, read_adapter_meta
from .metrics import evaluate_set, load_extractors

log = logging.getLogger("refmar")

# flag dest -> RunConfig field
RUN_FLAGS = {
    "N": "N", "r": "r", "mode": "conditioning_mode", "M": "ensemble_M", "seeds": "seeds", "K": "K",
    "steps": "total_steps", "lr": "learning_rate", "weight_decay": "weight_decay",
    "batch_size": "batch_size", "alpha": "alpha", "time_sampler": "time_sampler",
    "step_count": "step_count", "base_seed": "base_seed", "test_limit": "test_limit",
    "extractors": "extractor_manifest", "data_dir": "data_dir", "cache_dir": "cache_dir",
}


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("run configuration (override the config document)")
    g.add_argument("--config", help="YAML or JSON document with run fields")
    g.add_argument("--data-dir", help="prepared data layout (see prepare-data)")
    g.add_argument("--phantom-subjects", type=int, help="use an in-memory phantom benchmark with this many "
                                                        "subjects per category instead of --data-dir")
    g.add_argument("--N", type=int, help="training-set size")
    g.add_argument("--r", type=int, help="LoRA rank")
    g.add_argument("--mode", choices=("none", "multi", "grid"), help="conditioning mode")
    g.add_argument("--seeds", type=int, nargs="+", help="training seed(s)")
    g.add_argument("--K", type=int, help="references per sample")
    g.add_argument("--steps", type=int, help="optimizer step budget")
    g.add_argument("--lr", type=float, help="learning rate")
    g.add_argument("--weight-decay", type=float)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--alpha", type=float, help="LoRA scale (default: r)")
    g.add_argument("--time-sampler", help="uniform, logit_normal or fixed:<t>")
    g.add_argument("--M", type=int, help="ensemble size")
    g.add_argument("--base-seed", type=int, help="first inference seed")
    g.add_argument("--step-count", type=int, help="Euler steps at inference")
    g.add_argument("--test-limit", type=int, help="evaluate only the first k test ids")
    g.add_argument("--extractors", help="extractor manifest (YAML/JSON)")
    g.add_argument("--cache-dir", help="cache for the pretrained toy backbone")
    g.add_argument("--pretrain-steps", type=int, help="toy backbone pretraining steps")
    g.add_argument("--allow-any-N", action="store_true", default=None)


def run_config_from_args(args) -> tuple[RunConfig, dict]:
    doc = load_config_document(args.config) if getattr(args, "config", None) else {}
    grid = doc.pop("grid", {}) or {}
    for dest, fld in RUN_FLAGS.items():
        val = getattr(args, dest, None)
        if val is not None:
            doc[fld] = val
    if getattr(args, "allow_any_N", None):
        doc["allow_any_N"] = True
    if getattr(args, "phantom_subjects", None) is not None:
        doc["phantom"] = {"subjects_per_category": args.phantom_subjects}
        doc.pop("data_dir", None)
    if getattr(args, "pretrain_steps", None) is not None:
        doc["foundation"] = dict(doc.get("foundation") or {}, pretrain_steps=args.pretrain_steps)
    return RunConfig.from_mapping(doc), grid


# --------------------------------------------------------------------------- commands

def cmd_phantom_gen(args) -> int:
    out = Path(args.out)
    pairs = phantom_dataset(args.subjects_per_category, args.slices_per_subject, args.seed, args.severity)
    for p in pairs:
        d = out / p.category
        d.mkdir(parents=True, exist_ok=True)
        save_png(p.source, d / f"{p.pair_id}_src.png")
        save_png(p.target, d / f"{p.pair_id}_trg.png")
    print(f"wrote {len(pairs)} phantom pairs to {out}")
    return 0


def cmd_prepare_data(args) -> int:
    if (args.raw is None) == (args.phantom_subjects is None):
        raise ConfigError("give exactly one of --raw or --phantom-subjects")
    if args.raw is not None:
        pairs = ingest_raw_dir(args.raw)
        manifest = build_manifest(pairs, args.N, args.test_count, args.seed, args.reference_count,
                                  args.allow_any_N, args.references_from_train)
    else:
        manifest, by_id = phantom_benchmark(args.phantom_subjects, N=args.N, test_count=args.test_count,
                                            seed=args.phantom_seed, manifest_seed=args.seed,
                                            allow_any_N=args.allow_any_N)
        pairs = list(by_id.values())
    write_layout(args.out, manifest, pairs)
    counts = {s: len(v) for s, v in manifest.splits.items()}
    print(f"prepared {args.out}: {counts}, repeat_count={manifest.repeat_count}")
    return 0


def cmd_train(args) -> int:
    cfg, _ = run_config_from_args(args)
    data = load_data(cfg)
    chash = cfg.config_hash(data.fingerprint)
    manifest = subset_manifest(data.manifest, cfg.N, cfg.allow_any_N)
    refs = None
    if cfg.conditioning_mode != "none":
        refs = build_references(manifest, data.pairs, manifest.train_ids, cfg.K, cfg.seeds[0])
    model, codec = load_foundation(cfg.foundation_config(), cfg.cache_dir)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    ckpt, tlog = train(manifest, cfg.train_config(cfg.seeds[0]), model, codec, data.pairs, refs,
                       out / "train_log.jsonl")
    ckpt.save(out / "checkpoint.npz")
    record = {"config_hash": chash, "config": cfg.to_dict(), "provenance": provenance(),
              "train_config_hash": ckpt.config_hash, "steps": len(tlog.records),
              "loss_first50": float(np.mean(tlog.losses[:50])), "loss_last50": float(np.mean(tlog.losses[-50:])),
              "train_s": round(time.perf_counter() - t0, 3)}
    (out / "run.json").write_text(json.dumps(record, sort_keys=True, indent=2) + "\n")
    print(f"trained {chash}: loss {record['loss_first50']:.4f} -> {record['loss_last50']:.4f}; "
          f"checkpoint {out / 'checkpoint.npz'}")
    return 0


def cmd_infer(args) -> int:
    cfg, _ = run_config_from_args(args)
    meta = read_adapter_meta(args.checkpoint)
    trained = meta.get("train_config", {})
    if args.mode is None and trained.get("conditioning_mode"):
        cfg = cfg.replace(conditioning_mode=trained["conditioning_mode"])
    data = load_data(cfg)
    if args.split not in data.manifest.splits:
        raise ConfigError(f"unknown split {args.split!r}")
    ids = sorted(data.manifest.splits[args.split])
    if cfg.test_limit is not None:
        ids = ids[: cfg.test_limit]
    refs = None
    if cfg.conditioning_mode != "none":
        refs = build_references(data.manifest, data.pairs, ids, cfg.K, trained.get("seed", cfg.seeds[0]))
    model, codec = load_foundation(cfg.foundation_config(), cfg.cache_dir)
    adapted = load_adapters(model, args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sampler = SamplerConfig(cfg.step_count, cfg.base_seed, cfg.conditioning_mode, cfg.K)
    timings = {}
    seeds = None
    for pid in ids:
        t0 = time.perf_counter()
        ens = ensemble_restore(data.pairs[pid].source, refs[pid] if refs else None, adapted, codec,
                               cfg.ensemble_M, cfg.base_seed, sampler)
        save_png(ens.mean_image, out / f"{pid}_restored.png")
        if ens.M > 1:
            for k, m in enumerate(ens.members):
                save_png(m, out / f"{pid}_m{k}.png")
        timings[pid] = round(time.perf_counter() - t0, 3)
        seeds = ens.seeds
    record = {"checkpoint": str(args.checkpoint), "checkpoint_config_hash": meta.get("config_hash"),
              "config_hash": cfg.config_hash(data.fingerprint), "seeds": seeds, "split": args.split,
              "mode": cfg.conditioning_mode, "M": cfg.ensemble_M, "step_count": cfg.step_count,
              "timings_s": timings, "provenance": provenance()}
    (out / "infer_run.json").write_text(json.dumps(record, sort_keys=True, indent=2) + "\n")
    print(f"restored {len(ids)} slices into {out}")
    return 0


def cmd_evaluate(args) -> int:
    extractors, _ = load_extractors(args.extractors)
    report = evaluate_set(args.restored_dir, args.target_dir, extractors, args.allow_partial)
    text = report.to_csv_text()
    if args.out:
        report.save(args.out)
    print(text, end="")
    return 0


def cmd_ablate(args) -> int:
    cfg, grid = run_config_from_args(args)
    for axis, dest in (("N", "grid_N"), ("r", "grid_r"), ("conditioning_mode", "grid_mode")):
        if getattr(args, dest) is not None:
            grid[axis] = getattr(args, dest)
    store = ResultsStore(args.store)
    records = run_ablation(grid, cfg, store, rerun=args.rerun, parallel=args.parallel)
    failed = [r for r in records if r["status"] != "ok"]
    varied = [a for a in AXES if len(grid.get(a, [])) > 1]
    spec = TableSpec(axis=varied[0] if varied else "N", title="Ablation summary",
                     config_hashes=[r["config_hash"] for r in records])
    print(render_report(store, spec), end="")
    for r in failed:
        print(f"FAILED {r['config_hash']}: {r['error']}", file=sys.stderr)
    return 0


def cmd_report(args) -> int:
    where = {}
    for item in args.where or []:
        key, sep, val = item.partition("=")
        if not sep:
            raise ConfigError(f"--where expects key=value, got {item!r}")
        where[key] = yaml.safe_load(val)
    spec = TableSpec(axis=args.axis, where=where, baselines=args.baseline or [],
                     include_reference_points=not args.no_reference_points, plots_dir=args.plots_dir,
                     title=args.title)
    text = render_report(ResultsStore(args.store), spec)
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return 0


# --------------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="refmar", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom-gen", help="write seeded phantom slice pairs as a raw directory")
    p.add_argument("--out", required=True)
    p.add_argument("--subjects-per-category", type=int, default=5)
    p.add_argument("--slices-per-subject", type=int, default=1)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--severity", type=float, default=1.0)
    p.set_defaults(func=cmd_phantom_gen)

    p = sub.add_parser("prepare-data", help="ingest and split pairs into the on-disk layout")
    p.add_argument("--raw", help="raw directory <category>/<subject>_<slice>_{src,trg}.<ext>")
    p.add_argument("--phantom-subjects", type=int, help="generate a phantom benchmark instead")
    p.add_argument("--phantom-seed", type=int, default=1)
    p.add_argument("--out", required=True)
    p.add_argument("--N", type=int, default=None, help="train split size (phantoms: default all non-test)")
    p.add_argument("--test-count", type=int, default=1000)
    p.add_argument("--reference-count", type=int, default=0)
    p.add_argument("--references-from-train", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--allow-any-N", action="store_true")
    p.set_defaults(func=cmd_prepare_data)

    p = sub.add_parser("train", help="fine-tune adapters on one configuration")
    _add_run_flags(p)
    p.add_argument("--out", required=True, help="output directory for checkpoint and log")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="restore slices with a trained adapter checkpoint")
    _add_run_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("evaluate", help="compute the metric report for a restored directory")
    p.add_argument("--restored-dir", required=True)
    p.add_argument("--target-dir", required=True)
    p.add_argument("--extractors")
    p.add_argument("--allow-partial", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="run a rank x N x mode grid into a results store")
    _add_run_flags(p)
    p.add_argument("--store", required=True)
    p.add_argument("--grid-N", type=int, nargs="+")
    p.add_argument("--grid-r", type=int, nargs="+")
    p.add_argument("--grid-mode", nargs="+", choices=("none", "multi", "grid"))
    p.add_argument("--rerun", action="store_true", help="record new runs even for finished hashes")
    p.add_argument("--parallel", type=int, default=1, help="grid cells run concurrently")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="render comparison tables and plots from a results store")
    p.add_argument("--store", required=True)
    p.add_argument("--axis", default="N", choices=AXES)
    p.add_argument("--where", action="append", help="filter key=value on run config (repeatable)")
    p.add_argument("--baseline", action="append", help="external report/table CSV (repeatable)")
    p.add_argument("--plots-dir")
    p.add_argument("--no-reference-points", action="store_true")
    p.add_argument("--title", default="Results")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ShapeMismatchError, InjectionError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except TrainingAbort as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
