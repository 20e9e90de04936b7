"""CT slice ingestion, HU windowing, reference sets, manifests and phantoms."""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .errors import ConfigError, DataError, IngestionError, InsufficientDonorsError

SLICE_SIZE = 512
WINDOW_LO = -500.0
WINDOW_HI = 1300.0
AIR_HU = -1000.0
STEP_BUDGET = 750
ALLOWED_N = (16, 32, 64, 128)
SPLITS = ("train", "test", "reference_pool")
MANIFEST_FORMAT_VERSION = 1


@dataclass
class HUSlice:
    pixels: np.ndarray
    subject_id: str
    category: str
    slice_index: int = 0
    has_metal: bool = False

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    @property
    def slice_id(self) -> str:
        return f"{self.subject_id}_{self.slice_index:04d}"


@dataclass
class WindowedImage:
    """8-bit slice plus the provenance needed for reference bookkeeping."""

    pixels: np.ndarray
    window_lo: float = WINDOW_LO
    window_hi: float = WINDOW_HI
    subject_id: str = ""
    category: str = ""
    slice_index: int = 0
    has_metal: bool = False

    def __post_init__(self):
        if self.pixels.dtype != np.uint8 or self.pixels.ndim != 2:
            raise IngestionError(
                f"WindowedImage needs a 2-D uint8 array, got {self.pixels.dtype} {self.pixels.shape}"
            )

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape

    @property
    def slice_id(self) -> str:
        return f"{self.subject_id}_{self.slice_index:04d}"

    def with_pixels(self, pixels: np.ndarray) -> "WindowedImage":
        return WindowedImage(
            pixels, self.window_lo, self.window_hi, self.subject_id, self.category,
            self.slice_index, self.has_metal,
        )


@dataclass
class TrainingPair:
    source: WindowedImage
    target: WindowedImage
    pair_id: str

    @property
    def subject_id(self) -> str:
        return self.target.subject_id

    @property
    def category(self) -> str:
        return self.target.category


@dataclass
class ReferenceSet:
    references: list[WindowedImage]
    donor_ids: list[str]

    @property
    def K(self) -> int:
        return len(self.references)


@dataclass
class DatasetManifest:
    N: int
    seed: int
    repeat_count: int
    test_count: int
    splits: dict[str, list[str]]
    categories: dict[str, str] = field(default_factory=dict)
    references_from_train: bool = False

    @property
    def train_ids(self) -> list[str]:
        return self.splits["train"]

    def category_counts(self, split: str) -> dict[str, int]:
        counts: dict[str, int] = {}
        for pid in self.splits[split]:
            cat = self.categories.get(pid, "")
            counts[cat] = counts.get(cat, 0) + 1
        return dict(sorted(counts.items()))


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def window_hu(
    slice: HUSlice | np.ndarray, lo: float = WINDOW_LO, hi: float = WINDOW_HI
) -> WindowedImage:
    """Clip to ``[lo, hi]`` and map linearly onto 0..255.

    Values above ``hi`` (metal implants) saturate at 255. Rounding is
    half-away-from-zero so that e.g. 400 HU lands on 128.
    """
    if not lo < hi:
        raise ConfigError(f"window bounds must satisfy lo < hi, got ({lo}, {hi})")
    if isinstance(slice, HUSlice):
        pixels = np.asarray(slice.pixels, dtype=np.float64)
        meta = dict(subject_id=slice.subject_id, category=slice.category,
                    slice_index=slice.slice_index, has_metal=slice.has_metal)
        name = slice.slice_id
    else:
        pixels = np.asarray(slice, dtype=np.float64)
        meta = {}
        name = "<array>"
    if not np.isfinite(pixels).all():
        raise IngestionError(f"slice {name} contains non-finite HU values")
    scaled = (np.clip(pixels, lo, hi) - lo) / (hi - lo) * 255.0
    out = round_half_away(scaled).astype(np.uint8)
    return WindowedImage(out, float(lo), float(hi), **meta)


def window_inverse(img: WindowedImage) -> np.ndarray:
    """HU value at the centre of each 8-bit code; ``window_hu`` maps it back exactly."""
    return img.window_lo + img.pixels.astype(np.float64) / 255.0 * (img.window_hi - img.window_lo)


def center_fit(arr: np.ndarray, size: int = SLICE_SIZE, fill: float = 0) -> np.ndarray:
    """Center-crop and/or pad to ``size x size`` without resampling."""
    out = np.full((size, size), fill, dtype=arr.dtype)
    h, w = arr.shape
    src_r0 = max(0, (h - size) // 2)
    src_c0 = max(0, (w - size) // 2)
    dst_r0 = max(0, (size - h) // 2)
    dst_c0 = max(0, (size - w) // 2)
    rh = min(h, size)
    rw = min(w, size)
    out[dst_r0:dst_r0 + rh, dst_c0:dst_c0 + rw] = arr[src_r0:src_r0 + rh, src_c0:src_c0 + rw]
    return out


# --------------------------------------------------------------------------- ingestion

def parse_slice_name(path: Path) -> tuple[str, int, str]:
    """``<subject>_<slice>_<role>.<ext>`` -> (subject, slice_index, role)."""
    stem = path.stem
    try:
        rest, role = stem.rsplit("_", 1)
        subject, idx = rest.rsplit("_", 1)
        return subject, int(idx), role
    except ValueError as exc:
        raise IngestionError(f"cannot parse slice file name {path.name!r}") from exc


def load_hu_slice(path: str | Path, category: str, has_metal: bool) -> HUSlice:
    """Read a signed HU raster (``.npy`` or 16-bit TIFF/PNG) and fit it to 512x512."""
    path = Path(path)
    subject, idx, _ = parse_slice_name(path)
    if path.suffix == ".npy":
        arr = np.load(path)
    else:
        with Image.open(path) as im:
            arr = np.asarray(im)
    if arr.ndim != 2:
        raise IngestionError(f"{path}: expected a 2-D slice, got shape {arr.shape}")
    arr = arr.astype(np.float64)
    if not np.isfinite(arr).all():
        raise IngestionError(f"slice {subject}_{idx:04d} ({path}) contains non-finite HU values")
    return HUSlice(center_fit(arr, SLICE_SIZE, AIR_HU), subject, category, idx, has_metal)


def load_png(path: str | Path, category: str = "", has_metal: bool = False) -> WindowedImage:
    path = Path(path)
    with Image.open(path) as im:
        if im.mode not in ("L", "I;16", "I"):
            im = im.convert("L")
        arr = np.asarray(im)
    if arr.dtype != np.uint8:
        raise IngestionError(f"{path}: expected an 8-bit grayscale PNG, got {arr.dtype}")
    try:
        subject, idx, _ = parse_slice_name(path)
    except IngestionError:
        subject, idx = path.stem, 0
    return WindowedImage(center_fit(arr, SLICE_SIZE, 0), subject_id=subject,
                         category=category, slice_index=idx, has_metal=has_metal)


def save_png(img: WindowedImage | np.ndarray, path: str | Path) -> None:
    pixels = img.pixels if isinstance(img, WindowedImage) else img
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(pixels, dtype=np.uint8), mode="L").save(path)


def make_pair(src: HUSlice, trg: HUSlice, lo: float = WINDOW_LO, hi: float = WINDOW_HI) -> TrainingPair:
    if (src.subject_id, src.slice_index) != (trg.subject_id, trg.slice_index):
        raise DataError(f"source {src.slice_id} and target {trg.slice_id} do not share provenance")
    return TrainingPair(window_hu(src, lo, hi), window_hu(trg, lo, hi), trg.slice_id)


def ingest_raw_dir(raw_dir: str | Path) -> list[TrainingPair]:
    """Read ``<raw>/<category>/<subject>_<slice>_{src,trg}.{npy,png,tif}`` into pairs.

    ``.npy``/16-bit rasters are HU and get windowed; 8-bit PNGs are taken as
    already windowed.
    """
    raw_dir = Path(raw_dir)
    pairs = []
    for cat_dir in sorted(p for p in raw_dir.iterdir() if p.is_dir()):
        files = sorted(f for f in cat_dir.iterdir() if f.suffix in (".npy", ".png", ".tif", ".tiff"))
        by_key: dict[tuple[str, int], dict[str, Path]] = {}
        for f in files:
            subject, idx, role = parse_slice_name(f)
            by_key.setdefault((subject, idx), {})[role] = f
        for (subject, idx), roles in sorted(by_key.items()):
            if set(roles) != {"src", "trg"}:
                raise IngestionError(f"{cat_dir.name}/{subject}_{idx:04d}: need both src and trg, found {sorted(roles)}")
            pairs.append(_ingest_pair(roles["src"], roles["trg"], cat_dir.name))
    return pairs


def _ingest_pair(src_path: Path, trg_path: Path, category: str) -> TrainingPair:
    def is_8bit_png(p: Path) -> bool:
        if p.suffix != ".png":
            return False
        with Image.open(p) as im:
            return im.mode == "L"

    if is_8bit_png(src_path):
        src = load_png(src_path, category, has_metal=True)
        trg = load_png(trg_path, category, has_metal=False)
        return TrainingPair(src, trg, trg.slice_id)
    return make_pair(load_hu_slice(src_path, category, True), load_hu_slice(trg_path, category, False))


# --------------------------------------------------------------------------- references

def _stable_seed(seed: int, key: str) -> np.random.Generator:
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, zlib.crc32(key.encode())])


def assemble_reference_set(
    sample: TrainingPair,
    pool: Sequence[HUSlice | WindowedImage],
    K: int = 5,
    seed: int = 0,
) -> ReferenceSet:
    """Pick ``K`` metal-free slices of the sample's category from other subjects.

    Selection is a seeded shuffle keyed on ``(seed, pair_id)``; distinct donor
    subjects are preferred before a donor contributes a second slice.
    """
    eligible = [
        p for p in pool
        if not p.has_metal and p.category == sample.category and p.subject_id != sample.subject_id
    ]
    if len(eligible) < K:
        raise InsufficientDonorsError(sample.category, K, len(eligible))
    eligible.sort(key=lambda p: (p.subject_id, p.slice_index))
    order = _stable_seed(seed, sample.pair_id).permutation(len(eligible))
    shuffled = [eligible[i] for i in order]
    chosen, seen = [], set()
    for p in shuffled:
        if p.subject_id not in seen:
            chosen.append(p)
            seen.add(p.subject_id)
        if len(chosen) == K:
            break
    for p in shuffled:
        if len(chosen) == K:
            break
        if not any(p is c for c in chosen):
            chosen.append(p)
    refs = [window_hu(p) if isinstance(p, HUSlice) else p for p in chosen]
    return ReferenceSet(refs, [p.subject_id for p in chosen])


def reference_pool_from_pairs(pairs: Iterable[TrainingPair]) -> list[WindowedImage]:
    """Clean targets double as donor slices."""
    return [p.target for p in pairs]


# --------------------------------------------------------------------------- manifests

def repeat_count_for(N: int, budget: int = STEP_BUDGET) -> int:
    return math.ceil(budget / N)


def build_manifest(
    all_pairs: Sequence[TrainingPair],
    N: int,
    test_count: int = 1000,
    seed: int = 0,
    reference_count: int = 0,
    allow_any_N: bool = False,
    references_from_train: bool = False,
) -> DatasetManifest:
    """Split pairs into test / reference_pool / train.

    The test and reference splits depend only on ``(seed, test_count,
    reference_count)``, so manifests built for different ``N`` share them.
    """
    if not allow_any_N and N not in ALLOWED_N:
        raise ConfigError(f"N={N} not in {ALLOWED_N}; pass allow_any_N to override")
    if N < 1:
        raise ConfigError("N must be positive")
    needed = N + test_count + reference_count
    if len(all_pairs) < needed:
        raise DataError(f"need at least {needed} pairs (N={N}, test={test_count}, "
                        f"reference_pool={reference_count}), have {len(all_pairs)}")
    ids = sorted(p.pair_id for p in all_pairs)
    if len(set(ids)) != len(ids):
        raise DataError("duplicate pair ids")
    perm = np.random.default_rng([seed, 0]).permutation(len(ids))
    shuffled = [ids[i] for i in perm]
    test = sorted(shuffled[:test_count])
    pool = sorted(shuffled[test_count:test_count + reference_count])
    rest = sorted(shuffled[test_count + reference_count:])
    pick = np.random.default_rng([seed, 1]).choice(len(rest), size=N, replace=False)
    train = sorted(rest[i] for i in pick)
    cats = {p.pair_id: p.category for p in all_pairs}
    return DatasetManifest(
        N=N, seed=seed, repeat_count=repeat_count_for(N), test_count=test_count,
        splits={"train": train, "test": test, "reference_pool": pool},
        categories={pid: cats[pid] for pid in train + test + pool},
        references_from_train=references_from_train,
    )


def subset_manifest(manifest: DatasetManifest, N: int, allow_any_N: bool = False) -> DatasetManifest:
    """Size-``N`` training subset of a prepared manifest; test and reference splits are kept.

    Subsets are nested: the ``N=16`` train ids are a prefix-selection of the
    ``N=32`` ones under the same seed, so N sweeps only ever add pairs.
    """
    if not allow_any_N and N not in ALLOWED_N:
        raise ConfigError(f"N={N} not in {ALLOWED_N}; pass allow_any_N to override")
    train = sorted(manifest.train_ids)
    if not 1 <= N <= len(train):
        raise DataError(f"prepared train split has {len(train)} pairs, cannot draw N={N}")
    order = np.random.default_rng([manifest.seed, 2]).permutation(len(train))
    chosen = sorted(train[i] for i in order[:N])
    splits = dict(manifest.splits, train=chosen)
    keep = set(chosen) | set(splits["test"]) | set(splits["reference_pool"])
    return DatasetManifest(N, manifest.seed, repeat_count_for(N), manifest.test_count, splits,
                           {k: v for k, v in manifest.categories.items() if k in keep},
                           manifest.references_from_train)


def donor_split(manifest: DatasetManifest) -> str:
    return "train" if manifest.references_from_train else "reference_pool"


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    """JSON-lines: one header record, then one record per pair."""
    header = {
        "kind": "header", "format_version": MANIFEST_FORMAT_VERSION, "N": manifest.N,
        "seed": manifest.seed, "repeat_count": manifest.repeat_count,
        "test_count": manifest.test_count, "references_from_train": manifest.references_from_train,
        "category_counts": {s: manifest.category_counts(s) for s in SPLITS},
    }
    lines = [json.dumps(header, sort_keys=True)]
    for split in SPLITS:
        for pid in manifest.splits[split]:
            lines.append(json.dumps({"kind": "pair", "pair_id": pid, "split": split,
                                     "category": manifest.categories.get(pid, "")}, sort_keys=True))
    Path(path).write_text("\n".join(lines) + "\n")


def load_manifest(path: str | Path) -> DatasetManifest:
    lines = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
    if not lines or lines[0].get("kind") != "header":
        raise DataError(f"{path}: missing manifest header")
    head = lines[0]
    if head.get("format_version") != MANIFEST_FORMAT_VERSION:
        raise DataError(f"{path}: unsupported manifest format {head.get('format_version')}")
    splits: dict[str, list[str]] = {s: [] for s in SPLITS}
    cats = {}
    for rec in lines[1:]:
        splits[rec["split"]].append(rec["pair_id"])
        cats[rec["pair_id"]] = rec["category"]
    return DatasetManifest(head["N"], head["seed"], head["repeat_count"], head["test_count"],
                           splits, cats, head.get("references_from_train", False))


def write_layout(root: str | Path, manifest: DatasetManifest, pairs: Sequence[TrainingPair]) -> None:
    """Write ``<root>/<split>/<category>/<subject>_<slice>_{src,trg}.png`` plus ``manifest.jsonl``."""
    root = Path(root)
    by_id = {p.pair_id: p for p in pairs}
    for split in SPLITS:
        for pid in manifest.splits[split]:
            pair = by_id[pid]
            d = root / split / pair.category
            save_png(pair.source, d / f"{pid}_src.png")
            save_png(pair.target, d / f"{pid}_trg.png")
    save_manifest(manifest, root / "manifest.jsonl")


def read_layout(root: str | Path) -> tuple[DatasetManifest, dict[str, TrainingPair]]:
    root = Path(root)
    manifest = load_manifest(root / "manifest.jsonl")
    pairs = {}
    for split in SPLITS:
        for pid in manifest.splits[split]:
            cat = manifest.categories[pid]
            d = root / split / cat
            src = load_png(d / f"{pid}_src.png", cat, has_metal=True)
            trg = load_png(d / f"{pid}_trg.png", cat, has_metal=False)
            pairs[pid] = TrainingPair(src, trg, pid)
    return manifest, pairs


# --------------------------------------------------------------------------- phantoms

@dataclass(frozen=True)
class PhantomConfig:
    """Constants of the procedural phantom; none of these come from real data."""

    categories: tuple[str, ...] = ("head", "chest", "abdomen", "pelvis")
    organ_count: int = 5
    bone_count: int = 2
    subject_jitter_px: float = 10.0
    subject_scale_jitter: float = 0.06
    hu_jitter: float = 15.0
    metal_count: tuple[int, int] = (1, 3)
    metal_radius_px: tuple[float, float] = (5.0, 12.0)
    metal_hu: float = 4000.0
    spoke_count: int = 18
    spoke_width_rad: float = 0.03
    streak_hu: float = 900.0
    shadow_hu: float = 450.0
    streak_falloff_px: float = 140.0


DEFAULT_PHANTOM = PhantomConfig()


def _ellipse(yy, xx, cy, cx, ry, rx, angle):
    c, s = math.cos(angle), math.sin(angle)
    dy, dx = yy - cy, xx - cx
    u = (dx * c + dy * s) / rx
    v = (-dx * s + dy * c) / ry
    return u * u + v * v <= 1.0


def _category_template(category: str, cfg: PhantomConfig) -> dict:
    """Anatomy shared by every subject of a category."""
    rng = np.random.default_rng(zlib.crc32(category.encode()))
    body = dict(ry=rng.uniform(150, 200), rx=rng.uniform(180, 230), angle=0.0)
    organs = []
    for _ in range(cfg.organ_count):
        organs.append(dict(
            cy=rng.uniform(-0.5, 0.5), cx=rng.uniform(-0.55, 0.55),
            ry=rng.uniform(0.12, 0.3), rx=rng.uniform(0.12, 0.3),
            angle=rng.uniform(0, math.pi), hu=rng.choice([-800.0, -90.0, 30.0, 60.0, 80.0]),
        ))
    bones = []
    for _ in range(cfg.bone_count):
        bones.append(dict(
            cy=rng.uniform(-0.6, 0.6), cx=rng.uniform(-0.6, 0.6),
            ry=rng.uniform(0.04, 0.1), rx=rng.uniform(0.04, 0.1),
            angle=rng.uniform(0, math.pi), hu=rng.uniform(600, 1200),
        ))
    return dict(body=body, organs=organs, bones=bones)


def phantom_clean_hu(
    category: str, subject_seed: int, slice_index: int = 0, cfg: PhantomConfig = DEFAULT_PHANTOM
) -> np.ndarray:
    """Metal-free HU slice: category template perturbed per subject and slice."""
    tpl = _category_template(category, cfg)
    rng = np.random.default_rng([subject_seed, zlib.crc32(category.encode())])
    yy, xx = np.mgrid[0:SLICE_SIZE, 0:SLICE_SIZE].astype(np.float64)
    scale = 1.0 + rng.uniform(-cfg.subject_scale_jitter, cfg.subject_scale_jitter)
    cy = SLICE_SIZE / 2 + rng.uniform(-cfg.subject_jitter_px, cfg.subject_jitter_px)
    cx = SLICE_SIZE / 2 + rng.uniform(-cfg.subject_jitter_px, cfg.subject_jitter_px)
    zscale = 1.0 - 0.04 * slice_index
    img = np.full((SLICE_SIZE, SLICE_SIZE), AIR_HU)
    b = tpl["body"]
    ry, rx = b["ry"] * scale * zscale, b["rx"] * scale * zscale
    img[_ellipse(yy, xx, cy, cx, ry, rx, 0.0)] = -100.0  # subcutaneous fat
    img[_ellipse(yy, xx, cy, cx, ry - 14, rx - 14, 0.0)] = 40.0
    for part in tpl["organs"] + tpl["bones"]:
        hu = part["hu"] + rng.normal(0, cfg.hu_jitter)
        mask = _ellipse(
            yy, xx,
            cy + part["cy"] * ry + rng.normal(0, 3), cx + part["cx"] * rx + rng.normal(0, 3),
            part["ry"] * ry, part["rx"] * rx, part["angle"] + rng.normal(0, 0.05),
        )
        img[mask] = hu
    # low-amplitude texture keeps soft tissue from being piecewise constant
    tex = rng.normal(0, 1, (SLICE_SIZE // 8, SLICE_SIZE // 8))
    tex = np.kron(tex, np.ones((8, 8)))
    body_mask = img > -950
    img[body_mask] += 8.0 * tex[body_mask]
    return img


def phantom_corruption_hu(
    clean: np.ndarray, seed: int, cfg: PhantomConfig = DEFAULT_PHANTOM
) -> np.ndarray:
    """Unit-severity additive corruption: saturated metal blobs plus streaks and shadows."""
    rng = np.random.default_rng([seed, 7])
    body = clean > -950
    ys, xs = np.nonzero(body)
    yy, xx = np.mgrid[0:SLICE_SIZE, 0:SLICE_SIZE].astype(np.float64)
    field = np.zeros_like(clean)
    n_metal = int(rng.integers(cfg.metal_count[0], cfg.metal_count[1] + 1))
    centers = []
    for _ in range(n_metal):
        k = int(rng.integers(len(ys)))
        cy, cx = float(ys[k]), float(xs[k])
        # keep implants away from the body edge
        cy = SLICE_SIZE / 2 + 0.6 * (cy - SLICE_SIZE / 2)
        cx = SLICE_SIZE / 2 + 0.6 * (cx - SLICE_SIZE / 2)
        r = rng.uniform(*cfg.metal_radius_px)
        centers.append((cy, cx, r))
        field[_ellipse(yy, xx, cy, cx, r, r * rng.uniform(0.6, 1.0), rng.uniform(0, math.pi))] += cfg.metal_hu
        dist = np.hypot(yy - cy, xx - cx)
        theta = np.arctan2(yy - cy, xx - cx)
        falloff = np.exp(-dist / cfg.streak_falloff_px)
        for _ in range(cfg.spoke_count):
            phi = rng.uniform(-math.pi, math.pi)
            d = np.mod(theta - phi + math.pi, 2 * math.pi) - math.pi
            sign = 1.0 if rng.random() < 0.5 else -1.0
            amp = cfg.streak_hu * rng.uniform(0.4, 1.0)
            field += sign * amp * falloff * np.exp(-0.5 * (d / cfg.spoke_width_rad) ** 2) * (dist > r)
    for i in range(len(centers)):
        for j in range(i + 1, len(centers)):
            (y0, x0, _), (y1, x1, _) = centers[i], centers[j]
            length = math.hypot(y1 - y0, x1 - x0) + 1e-9
            # distance from the segment joining two implants
            tt = np.clip(((yy - y0) * (y1 - y0) + (xx - x0) * (x1 - x0)) / length**2, 0, 1)
            dseg = np.hypot(yy - (y0 + tt * (y1 - y0)), xx - (x0 + tt * (x1 - x0)))
            field -= cfg.shadow_hu * np.exp(-0.5 * (dseg / 10.0) ** 2)
    field[~body] *= 0.3
    return field


def generate_phantom_hu(
    seed: int,
    severity: float,
    category: str | None = None,
    subject_seed: int | None = None,
    slice_index: int = 0,
    cfg: PhantomConfig = DEFAULT_PHANTOM,
) -> tuple[HUSlice, HUSlice]:
    """Return (corrupted, clean) HU slices; corruption scales linearly with ``severity``."""
    if not 0.0 <= severity <= 1.0:
        raise ConfigError(f"severity must lie in [0, 1], got {severity}")
    rng = np.random.default_rng([seed, 3])
    if category is None:
        category = cfg.categories[int(rng.integers(len(cfg.categories)))]
    if subject_seed is None:
        subject_seed = int(rng.integers(2**31))
    subject_id = f"{category}-{subject_seed}"
    clean = phantom_clean_hu(category, subject_seed, slice_index, cfg)
    corrupted = clean + severity * phantom_corruption_hu(clean, seed * 1009 + slice_index, cfg)
    return (
        HUSlice(corrupted, subject_id, category, slice_index, has_metal=severity > 0),
        HUSlice(clean, subject_id, category, slice_index, has_metal=False),
    )


def generate_phantom_pair(seed: int, severity: float = 1.0, **kwargs) -> TrainingPair:
    """Deterministic clean/corrupted phantom pair, windowed to 8 bits."""
    src, trg = generate_phantom_hu(seed, severity, **kwargs)
    return make_pair(src, trg)


def phantom_dataset(
    subjects_per_category: int,
    slices_per_subject: int = 1,
    seed: int = 0,
    severity: float = 1.0,
    cfg: PhantomConfig = DEFAULT_PHANTOM,
) -> list[TrainingPair]:
    pairs = []
    for ci, cat in enumerate(cfg.categories):
        for s in range(subjects_per_category):
            subject_seed = seed * 100_003 + ci * 1000 + s
            for k in range(slices_per_subject):
                pairs.append(generate_phantom_pair(
                    subject_seed, severity, category=cat, subject_seed=subject_seed,
                    slice_index=k, cfg=cfg))
    return pairs


def phantom_benchmark(
    subjects_per_category: int = 5,
    slices_per_subject: int = 1,
    N: int | None = None,
    test_count: int = 4,
    donor_subjects_per_category: int = 6,
    seed: int = 1,
    severity: float = 1.0,
    manifest_seed: int = 0,
    allow_any_N: bool = False,
) -> tuple[DatasetManifest, dict[str, TrainingPair]]:
    """Seeded phantom task with a separate clean donor population for references.

    Donors come from a disjoint set of phantom subjects and fill the
    ``reference_pool`` split, so every category has enough eligible donors.
    ``N=None`` puts every non-test pair in the train split, ready for
    :func:`subset_manifest`.
    """
    pairs = phantom_dataset(subjects_per_category, slices_per_subject, seed, severity)
    if N is None:
        N, allow_any_N = len(pairs) - test_count, True
    manifest = build_manifest(pairs, N, test_count, manifest_seed, allow_any_N=allow_any_N)
    donors = phantom_dataset(donor_subjects_per_category, 1, seed + 1, severity)
    task_ids = {p.pair_id for p in pairs}
    if task_ids & {p.pair_id for p in donors}:
        raise DataError("donor phantoms collide with task phantoms; choose another seed")
    manifest.splits["reference_pool"] = sorted(p.pair_id for p in donors)
    manifest.categories.update({p.pair_id: p.category for p in donors})
    by_id = {p.pair_id: p for p in pairs + donors}
    return manifest, by_id
