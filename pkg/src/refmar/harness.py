"""Run configuration, ablation grids, the on-disk results store and report rendering."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np
import yaml

from .conditioning import MODES
from .data import (
    DatasetManifest, ReferenceSet, TrainingPair, assemble_reference_set, donor_split,
    phantom_benchmark, read_layout, save_png, subset_manifest,
)
from .errors import ConfigError, DataError, RefmarError
from .flowmatch import TrainConfig, config_hash, provenance, train
from .foundation import FoundationConfig, load_foundation
from .infer import SamplerConfig, ensemble_restore
from .metrics import COLUMNS, FIELDS, MetricReport, evaluate_images, load_extractors

log = logging.getLogger(__name__)

PATH_FIELDS = ("data_dir", "cache_dir")
HIGHER_IS_BETTER = {"psnr_db": True, "ssim": True, "fid": False, "fid_rad": False,
                    "lpips": False, "lpips_rad": False}
AXES = ("N", "r", "conditioning_mode")


@dataclass
class RunConfig:
    """Everything that defines one train + infer + evaluate cycle.

    ``seeds`` lists training seeds; an ablation runs one cell per seed. Exactly
    one of ``data_dir`` (a prepared layout) or ``phantom`` (keyword arguments of
    :func:`refmar.data.phantom_benchmark`) selects the data.
    """

    N: int = 128
    r: int = 64
    conditioning_mode: str = "none"
    ensemble_M: int = 10
    seeds: list[int] = field(default_factory=lambda: [0])
    K: int = 5
    total_steps: int = 750
    learning_rate: float = 1e-4
    weight_decay: float = 0.01
    batch_size: int = 1
    alpha: float | None = None
    time_sampler: str = "uniform"
    step_count: int = 28
    base_seed: int = 0
    test_limit: int | None = None
    save_members: bool = False
    allow_any_N: bool = False
    extractor_manifest: str | dict | None = None
    foundation: dict = field(default_factory=dict)
    phantom: dict | None = None
    data_dir: str | None = None
    cache_dir: str | None = None

    def __post_init__(self):
        if self.conditioning_mode not in MODES:
            raise ConfigError(f"conditioning_mode must be one of {MODES}, got {self.conditioning_mode!r}")
        if self.ensemble_M < 1:
            raise ConfigError("ensemble_M must be >= 1")
        if isinstance(self.seeds, int):
            self.seeds = [self.seeds]
        self.seeds = [int(s) for s in self.seeds]
        if not self.seeds:
            raise ConfigError("at least one seed is required")

    @classmethod
    def from_mapping(cls, doc: Mapping[str, Any]) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown run-config keys: {sorted(unknown)}")
        return cls(**doc)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def foundation_config(self) -> FoundationConfig:
        return FoundationConfig(**self.foundation)

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(learning_rate=self.learning_rate, total_steps=self.total_steps,
                           weight_decay=self.weight_decay, r=self.r, alpha=self.alpha, N=self.N,
                           conditioning_mode=self.conditioning_mode, seed=seed,
                           batch_size=self.batch_size, K=self.K, time_sampler=self.time_sampler)

    def hash_payload(self, data_fingerprint: str = "") -> dict:
        payload = {k: v for k, v in self.to_dict().items() if k not in PATH_FIELDS}
        em = self.extractor_manifest
        if isinstance(em, (str, Path)):
            text = Path(em).read_text()
            em = yaml.safe_load(text) if str(em).endswith((".yaml", ".yml")) else json.loads(text)
        payload["extractor_manifest"] = em
        payload["foundation"] = self.foundation_config().hash()
        payload["data"] = data_fingerprint
        return payload

    def config_hash(self, data_fingerprint: str = "") -> str:
        """Stable under key order; ignores filesystem paths."""
        return config_hash(self.hash_payload(data_fingerprint))


def load_config_document(path: str | Path) -> dict:
    """Read a YAML or JSON config document into a plain mapping."""
    text = Path(path).read_text()
    doc = yaml.safe_load(text) if str(path).endswith((".yaml", ".yml")) else json.loads(text)
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config document must be a mapping")
    return doc


# --------------------------------------------------------------------------- data

@dataclass
class ExperimentData:
    manifest: DatasetManifest
    pairs: dict[str, TrainingPair]
    fingerprint: str


def load_data(cfg: RunConfig) -> ExperimentData:
    if (cfg.data_dir is None) == (cfg.phantom is None):
        raise ConfigError("set exactly one of data_dir or phantom")
    if cfg.data_dir is not None:
        root = Path(cfg.data_dir)
        if not (root / "manifest.jsonl").exists():
            raise DataError(f"{root} has no manifest.jsonl; run prepare-data first")
        manifest, pairs = read_layout(root)
        fp = config_hash({"manifest": (root / "manifest.jsonl").read_text()})
        return ExperimentData(manifest, pairs, fp)
    kwargs = dict(cfg.phantom)
    manifest, pairs = phantom_benchmark(**kwargs)
    return ExperimentData(manifest, pairs, config_hash({"phantom": kwargs}))


def build_references(manifest: DatasetManifest, pairs: Mapping[str, TrainingPair], ids: Iterable[str],
                     K: int, seed: int) -> dict[str, ReferenceSet]:
    pool = [pairs[pid].target for pid in manifest.splits[donor_split(manifest)]]
    return {pid: assemble_reference_set(pairs[pid], pool, K, seed) for pid in ids}


def evaluation_ids(manifest: DatasetManifest, limit: int | None) -> list[str]:
    ids = sorted(manifest.splits["test"])
    return ids if limit is None else ids[:limit]


# --------------------------------------------------------------------------- store

class ResultsStore:
    """Append-only results directory.

    ``runs/<config_hash>/`` holds checkpoint, train log, restored images,
    report and ``run.json``; a rerun of an existing hash goes to a timestamped
    sub-directory. ``index.jsonl`` lists every record ever written.
    """

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.runs = self.root / "runs"
        self.index = self.root / "index.jsonl"

    def run_dir_for(self, chash: str, rerun: bool = False) -> Path:
        d = self.runs / chash
        if not d.exists():
            return d
        if not rerun:
            raise ConfigError(f"run {chash} already exists; pass rerun to record another")
        stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S%fZ")
        return d / f"rerun-{stamp}"

    def append(self, record: dict) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        with open(self.index, "a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")

    def records(self) -> list[dict]:
        if not self.index.exists():
            return []
        return [json.loads(line) for line in self.index.read_text().splitlines() if line.strip()]

    def latest(self, chash: str) -> dict | None:
        found = [r for r in self.records() if r["config_hash"] == chash]
        return found[-1] if found else None

    def report(self, record: dict) -> MetricReport:
        return MetricReport.load(self.root / record["run_dir"] / "report.csv")


# --------------------------------------------------------------------------- cells

def reference_points(data: ExperimentData, cfg: RunConfig, extractors=None) -> dict[str, MetricReport]:
    """Corrupted input and codec round-trip ceiling on the evaluated test ids."""
    _, codec = load_foundation(cfg.foundation_config(), cfg.cache_dir)
    ids = evaluation_ids(data.manifest, cfg.test_limit)
    targets = {pid: data.pairs[pid].target for pid in ids}
    corrupted = {pid: data.pairs[pid].source for pid in ids}
    ceiling = {pid: codec.decode(codec.encode(data.pairs[pid].target)) for pid in ids}
    return {
        "Corrupted input": evaluate_images(corrupted, targets, extractors, "corrupted-input"),
        "Codec ceiling": evaluate_images(ceiling, targets, extractors, "codec-ceiling"),
    }


def execute_cell(cfg: RunConfig, run_dir: Path, data: ExperimentData | None = None) -> dict:
    """Train, restore the test split and evaluate one configuration; never raises."""
    data = data or load_data(cfg)
    seed = cfg.seeds[0]
    chash = cfg.config_hash(data.fingerprint)
    run_dir.mkdir(parents=True, exist_ok=True)
    record = {"config_hash": chash, "status": "failed", "config": cfg.to_dict(), "seed": seed,
              "provenance": provenance(), "metrics": None, "error": None, "timings": {}}
    t0 = time.perf_counter()
    try:
        manifest = subset_manifest(data.manifest, cfg.N, cfg.allow_any_N)
        ids = evaluation_ids(manifest, cfg.test_limit)
        refs = None
        if cfg.conditioning_mode != "none":
            refs = build_references(manifest, data.pairs, manifest.train_ids + ids, cfg.K, seed)
        model, codec = load_foundation(cfg.foundation_config(), cfg.cache_dir)
        extractors, _ = load_extractors(cfg.extractor_manifest)
        tc = cfg.train_config(seed)
        ckpt, tlog = train(manifest, tc, model, codec, data.pairs, refs, run_dir / "train_log.jsonl")
        ckpt.save(run_dir / "checkpoint.npz")
        record["timings"]["train_s"] = round(time.perf_counter() - t0, 3)
        record["train"] = {"steps": len(tlog.records), "epochs": tlog.epochs_touched(),
                           "loss_first50": float(np.mean(tlog.losses[:50])),
                           "loss_last50": float(np.mean(tlog.losses[-50:]))}
        t1 = time.perf_counter()
        restored = {}
        sampler = SamplerConfig(cfg.step_count, cfg.base_seed, cfg.conditioning_mode, cfg.K)
        for pid in ids:
            ens = ensemble_restore(data.pairs[pid].source, refs[pid] if refs else None, ckpt.model, codec,
                                   cfg.ensemble_M, cfg.base_seed, sampler)
            restored[pid] = ens.mean_image
            save_png(ens.mean_image, run_dir / "restored" / f"{pid}_restored.png")
            if cfg.save_members:
                for k, m in enumerate(ens.members):
                    save_png(m, run_dir / "restored" / f"{pid}_m{k}.png")
        record["timings"]["infer_s"] = round(time.perf_counter() - t1, 3)
        report = evaluate_images(restored, {pid: data.pairs[pid].target for pid in ids}, extractors, chash)
        report.save(run_dir / "report.csv")
        record["metrics"] = report.row()
        record["status"] = "ok"
    except Exception as exc:  # a failed cell must not stop the grid
        record["error"] = f"{type(exc).__name__}: {exc}"
        record["traceback"] = traceback.format_exc()
        log.error("cell %s failed: %s", chash, record["error"])
    record["timings"]["total_s"] = round(time.perf_counter() - t0, 3)
    (run_dir / "run.json").write_text(json.dumps(record, sort_keys=True, indent=2, default=str) + "\n")
    return record


def _cell_worker(cfg: RunConfig, run_dir: str) -> dict:
    import torch

    torch.set_num_threads(1)
    return execute_cell(cfg, Path(run_dir))


def expand_grid(grid: Mapping[str, Sequence], base: RunConfig) -> list[RunConfig]:
    """Cells ordered N, then r, then mode, then seed (the row order of the N tables)."""
    unknown = set(grid) - set(AXES)
    if unknown:
        raise ConfigError(f"unknown grid axes {sorted(unknown)}; allowed {AXES}")
    Ns = list(grid.get("N", [base.N]))
    rs = list(grid.get("r", [base.r]))
    modes = list(grid.get("conditioning_mode", [base.conditioning_mode]))
    return [base.replace(N=n, r=r, conditioning_mode=m, seeds=[s])
            for n in Ns for r in rs for m in modes for s in base.seeds]


def run_ablation(grid: Mapping[str, Sequence], base: RunConfig, store: ResultsStore,
                 data: ExperimentData | None = None, rerun: bool = False, parallel: int = 1) -> list[dict]:
    """Run every grid cell, appending one store record per cell.

    Cells whose hash already has a successful record are skipped unless
    ``rerun``; failures are recorded and the grid carries on.
    """
    cells = expand_grid(grid, base)
    data = data or load_data(base)
    records: list[dict | None] = [None] * len(cells)
    pending = []
    for i, cell in enumerate(cells):
        chash = cell.config_hash(data.fingerprint)
        prior = store.latest(chash)
        if prior and prior["status"] == "ok" and not rerun:
            log.info("cell %s already done, skipping", chash)
            records[i] = prior
            continue
        run_dir = store.run_dir_for(chash, rerun=prior is not None)
        pending.append((i, cell, run_dir))
    if parallel > 1 and len(pending) > 1:
        with ProcessPoolExecutor(parallel) as pool:
            futures = [(i, rd, pool.submit(_cell_worker, c, str(rd))) for i, c, rd in pending]
            results = [(i, rd, f.result()) for i, rd, f in futures]
    else:
        results = [(i, rd, execute_cell(c, rd, data)) for i, c, rd in pending]
    for i, rd, rec in results:
        rec = dict(rec, run_dir=str(rd.relative_to(store.root)),
                   recorded_at=datetime.now(timezone.utc).isoformat())
        store.append(rec)
        records[i] = rec
    _save_reference_points(store, base, data, cells)
    return [r for r in records if r is not None]


def _save_reference_points(store: ResultsStore, base: RunConfig, data: ExperimentData,
                           cells: Sequence[RunConfig]) -> None:
    key = config_hash({"data": data.fingerprint, "test_limit": base.test_limit,
                       "foundation": base.foundation_config().hash(),
                       "extractors": base.hash_payload()["extractor_manifest"]})
    out = store.root / "references" / key
    if out.exists():
        return
    try:
        extractors, _ = load_extractors(base.extractor_manifest)
        reports = reference_points(data, base, extractors)
    except RefmarError as exc:
        log.warning("reference points skipped: %s", exc)
        return
    for name, rep in reports.items():
        rep.save(out / f"{name}.csv")


# --------------------------------------------------------------------------- reports

@dataclass
class TableSpec:
    axis: str = "N"
    where: dict = field(default_factory=dict)
    metrics: tuple[str, ...] = FIELDS
    baselines: list[str] = field(default_factory=list)
    include_reference_points: bool = True
    plots_dir: str | None = None
    title: str = "Results"
    config_hashes: list[str] | None = None


def _fmt_metric(f: str, v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "n/a"
    if math.isinf(v):
        return "inf"
    return f"{v:.2f}" if f == "psnr_db" else f"{v:.4f}"


def rank_marks(values: Sequence[float | None], higher_is_better: bool) -> list[str]:
    """'best' / 'second' / '' per value; equal values share a mark."""
    finite = sorted({v for v in values if v is not None and not math.isnan(v)}, reverse=higher_is_better)
    best = finite[0] if finite else None
    second = finite[1] if len(finite) > 1 else None
    return ["best" if v is not None and v == best else "second" if v is not None and v == second else ""
            for v in values]


def trend(axis_values: Sequence, values: Sequence[float | None], higher_is_better: bool) -> str:
    pts = [(a, v) for a, v in zip(axis_values, values) if v is not None and not math.isnan(v)]
    if len(pts) < 2:
        return "single point"
    diffs = [b[1] - a[1] for a, b in zip(pts, pts[1:])]
    if all(d == 0 for d in diffs):
        return "flat"
    sign = 1 if higher_is_better else -1
    if all(sign * d >= 0 for d in diffs):
        return "improves monotonically"
    if all(sign * d <= 0 for d in diffs):
        return "worsens monotonically"
    breaks = [str(b[0]) for a, b, d in zip(pts, pts[1:], diffs) if sign * d < 0]
    return "non-monotone (flagged: worse at " + ", ".join(breaks) + ")"


def _read_baselines(path: str | Path) -> list[tuple[str, dict]]:
    """External rows: either a metric report (aggregate row used) or a table with a ``method`` column."""
    path = Path(path)
    first = next((ln for ln in path.read_text().splitlines() if not ln.startswith("#")), "")
    if first.startswith("pair_id"):
        rep = MetricReport.load(path)
        return [(path.stem, rep.row())]
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            name = rec.pop("method", None)
            if name is None:
                raise DataError(f"{path}: baseline table needs a 'method' column")
            rows.append((name, {f: (float(rec[c]) if rec.get(c) not in (None, "") else None)
                                for f, c in zip(FIELDS, COLUMNS)}))
    return rows


def _axis_key(axis: str, value):
    return MODES.index(value) if axis == "conditioning_mode" else value


def select_records(store: ResultsStore, where: Mapping[str, Any],
                   config_hashes: Sequence[str] | None = None) -> list[dict]:
    latest: dict[str, dict] = {}
    for rec in store.records():
        if rec["status"] != "ok" or (config_hashes is not None and rec["config_hash"] not in config_hashes):
            continue
        cfg = rec["config"]
        if all(cfg.get(k) == v for k, v in where.items()):
            latest[rec["config_hash"]] = rec
    return list(latest.values())


def render_report(store: ResultsStore, table_spec: TableSpec | Mapping | None = None) -> str:
    """Markdown comparison table (best bold, second-best underlined) plus trends and plots."""
    spec = table_spec if isinstance(table_spec, TableSpec) else TableSpec(**(table_spec or {}))
    if spec.axis not in AXES:
        raise ConfigError(f"axis must be one of {AXES}")
    records = select_records(store, spec.where, spec.config_hashes)
    lines = [f"# {spec.title}", ""]
    if not records:
        lines.append("_No stored runs match this selection; nothing to report._")
        return "\n".join(lines) + "\n"
    records.sort(key=lambda r: (_axis_key(spec.axis, r["config"][spec.axis]), r["seed"], r["config_hash"]))
    metrics = [f for f in spec.metrics if f in FIELDS]
    header = ["Method", spec.axis, "seed"] + [COLUMNS[FIELDS.index(f)] for f in metrics] + ["config_hash"]
    lines.append("| " + " | ".join(header) + " |")
    lines.append("|" + "---|" * len(header))
    extra_rows = []
    for path in spec.baselines:
        extra_rows.extend(_read_baselines(path))
    if spec.include_reference_points:
        ref_root = store.root / "references"
        for d in sorted(ref_root.glob("*")) if ref_root.exists() else []:
            for f in sorted(d.glob("*.csv")):
                extra_rows.append((f.stem, MetricReport.load(f).row()))
    for name, row in extra_rows:
        cells = [name, "", ""] + [_fmt_metric(f, row.get(f)) for f in metrics] + ["external"]
        lines.append("| " + " | ".join(cells) + " |")
    marks = {f: rank_marks([r["metrics"].get(f) for r in records], HIGHER_IS_BETTER[f]) for f in metrics}
    for i, rec in enumerate(records):
        cells = ["LoRA (ours)", str(rec["config"][spec.axis]), str(rec["seed"])]
        for f in metrics:
            text = _fmt_metric(f, rec["metrics"].get(f))
            mark = marks[f][i]
            cells.append(f"**{text}**" if mark == "best" else f"<u>{text}</u>" if mark == "second" else text)
        cells.append(f"`{rec['config_hash']}`")
        lines.append("| " + " | ".join(cells) + " |")
    lines += ["", "Bold: best among trained runs; underlined: second best; ties share the marking."]
    if spec.axis in ("N", "r"):
        lines += ["", f"Trends along {spec.axis}:"]
        axis_vals = [r["config"][spec.axis] for r in records]
        for f in metrics:
            vals = [r["metrics"].get(f) for r in records]
            lines.append(f"- {COLUMNS[FIELDS.index(f)]}: {trend(axis_vals, vals, HIGHER_IS_BETTER[f])}")
        if spec.plots_dir:
            for p in plot_metrics(records, spec.axis, metrics, spec.plots_dir):
                lines.append(f"- plot: `{p}`")
    return "\n".join(lines) + "\n"


def plot_metrics(records: Sequence[dict], axis: str, metrics: Sequence[str], out_dir: str | Path) -> list[str]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for f in metrics:
        pts = sorted((r["config"][axis], r["metrics"].get(f)) for r in records
                     if r["metrics"].get(f) is not None and math.isfinite(r["metrics"][f]))
        if not pts:
            continue
        fig, ax = plt.subplots(figsize=(4, 3))
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o")
        ax.set_xscale("log", base=2)
        ax.set_xlabel(axis)
        ax.set_ylabel(COLUMNS[FIELDS.index(f)])
        fig.tight_layout()
        path = out_dir / f"{f}_vs_{axis}.png"
        fig.savefig(path, dpi=100)
        plt.close(fig)
        paths.append(str(path))
    return paths
