"""Pixel and feature-space fidelity metrics over paired image sets.

PSNR and SSIM work on the 8-bit windowed images directly. FID and LPIPS are
computed through pluggable feature extractors; the ``-Rad`` variants differ
only in which extractor the manifest assigns to them.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Protocol, Sequence

import numpy as np
import torch
import torch.nn.functional as F
import yaml
from scipy import ndimage

from .data import WindowedImage, load_png
from .errors import ConfigError, DataError, ShapeMismatchError

log = logging.getLogger(__name__)

PSNR_PEAK = 255.0
COLUMNS = ("PSNR (dB)", "SSIM", "FID", "FID-Rad", "LPIPS", "LPIPS-Rad")
FIELDS = ("psnr_db", "ssim", "fid", "fid_rad", "lpips", "lpips_rad")
VARIANTS = ("fid", "fid_rad", "lpips", "lpips_rad")


def _arr(img) -> np.ndarray:
    return img.pixels if isinstance(img, WindowedImage) else np.asarray(img)


def _same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"image shapes differ: {a.shape} vs {b.shape}")


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB with peak 255; identical images give ``inf``."""
    a, b = _arr(a).astype(np.float64), _arr(b).astype(np.float64)
    _same_shape(a, b)
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return math.inf
    return float(10.0 * np.log10(PSNR_PEAK**2 / mse))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def ssim_map(a, b, size: int = 11, sigma: float = 1.5, data_range: float = 255.0,
             k1: float = 0.01, k2: float = 0.03) -> np.ndarray:
    """Local SSIM on every fully-contained Gaussian window (no padding)."""
    a, b = _arr(a).astype(np.float64), _arr(b).astype(np.float64)
    _same_shape(a, b)
    if min(a.shape) < size:
        raise ShapeMismatchError(f"image {a.shape} smaller than the {size}x{size} window")
    g = gaussian_window(size, sigma)

    def filt(x):
        x = ndimage.correlate1d(x, g, axis=0, mode="constant")
        x = ndimage.correlate1d(x, g, axis=1, mode="constant")
        p = size // 2
        return x[p:x.shape[0] - p, p:x.shape[1] - p]

    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a * mu_a
    var_b = filt(b * b) - mu_b * mu_b
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b, size: int = 11, sigma: float = 1.5) -> float:
    return float(np.mean(ssim_map(a, b, size, sigma)))


def _sqrt_psd(m: np.ndarray, tol: float) -> np.ndarray:
    m = (m + m.T) / 2
    w, v = np.linalg.eigh(m)
    if w.min() < -tol * max(1.0, abs(w).max()):
        log.warning("matrix square root: clipping eigenvalue %.3g", w.min())
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def frechet_distance(set_a, set_b, tol: float = 1e-8) -> float:
    """Frechet distance between Gaussians fitted to two feature sets.

    The cross term ``tr((Sa Sb)^{1/2})`` is evaluated as
    ``tr((Sa^{1/2} Sb Sa^{1/2})^{1/2})``, whose argument is symmetric PSD,
    so eigendecomposition with clipping of round-off negatives suffices.
    """
    a = np.atleast_2d(np.asarray(set_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(set_b, dtype=np.float64))
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeMismatchError(f"feature sets disagree in dimension: {a.shape} vs {b.shape}")
    if len(a) < 2 or len(b) < 2:
        raise DataError("each feature set needs at least two vectors")
    if not (np.isfinite(a).all() and np.isfinite(b).all()):
        raise DataError("non-finite feature values")
    mu_a, mu_b = a.mean(0), b.mean(0)
    cov_a = np.atleast_2d(np.cov(a, rowvar=False))
    cov_b = np.atleast_2d(np.cov(b, rowvar=False))
    return frechet_from_moments(mu_a, cov_a, mu_b, cov_b, tol)


def frechet_from_moments(mu_a, cov_a, mu_b, cov_b, tol: float = 1e-8) -> float:
    root_a = _sqrt_psd(cov_a, tol)
    inner = root_a @ cov_b @ root_a
    inner = (inner + inner.T) / 2
    w = np.linalg.eigvalsh(inner)
    if w.min() < -tol * max(1.0, abs(w).max()):
        log.warning("frechet distance: clipping eigenvalue %.3g", w.min())
    tr_cross = np.sqrt(np.clip(w, 0, None)).sum()
    diff = mu_a - mu_b
    value = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2 * tr_cross)
    return max(value, 0.0)


# --------------------------------------------------------------------------- extractors

class FeatureExtractor(Protocol):
    provenance: str
    dim: int

    def taps(self, img) -> list[tuple[np.ndarray, bool]]:
        """Per-layer feature maps ``(C, H, W)`` with a flag telling whether the
        perceptual distance unit-normalises them along channels."""

    def embed(self, img) -> np.ndarray: ...


def _gray3(img) -> torch.Tensor:
    # grayscale replicated to three channels, scaled to [-1, 1]
    x = torch.from_numpy(_arr(img).astype(np.float32) / 127.5 - 1.0)
    return x[None, None].expand(1, 3, *x.shape).contiguous()


class IdentityExtractor:
    """Pixels as features; perceptual distance becomes MSE of [-1, 1]-scaled pixels."""

    provenance = "synthetic-test"
    grid = 16

    @property
    def dim(self) -> int:
        return self.grid * self.grid

    def taps(self, img):
        x = _arr(img).astype(np.float64) / 127.5 - 1.0
        return [(x[None], False)]

    def embed(self, img):
        x = _arr(img).astype(np.float64) / 127.5 - 1.0
        h, w = x.shape
        return x.reshape(self.grid, h // self.grid, self.grid, w // self.grid).mean(axis=(1, 3)).ravel()


class RandomConvExtractor:
    """Fixed random convolutional features, seeded; a deterministic offline stand-in
    for pretrained perceptual networks."""

    def __init__(self, seed: int = 0, channels: Sequence[int] = (16, 32, 64), provenance: str = "synthetic-test"):
        self.seed = seed
        self.provenance = provenance
        gen = torch.Generator().manual_seed(seed)
        specs = [(3, channels[0], 5, 4)] + [(channels[i], channels[i + 1], 3, 2) for i in range(len(channels) - 1)]
        self.layers = []
        for cin, cout, k, s in specs:
            w = torch.randn(cout, cin, k, k, generator=gen) / math.sqrt(cin * k * k)
            b = torch.randn(cout, generator=gen) * 0.1
            self.layers.append((w, b, s, k // 2))
        self.dim = 2 * sum(channels)

    @torch.no_grad()
    def _features(self, img) -> list[torch.Tensor]:
        x = _gray3(img)
        outs = []
        for w, b, s, p in self.layers:
            x = F.relu(F.conv2d(x, w, b, stride=s, padding=p))
            outs.append(x[0])
        return outs

    def taps(self, img):
        return [(f.double().numpy(), True) for f in self._features(img)]

    def embed(self, img):
        feats = self._features(img)
        return torch.cat([torch.cat([f.mean((1, 2)), f.std((1, 2))]) for f in feats]).double().numpy()


class TorchScriptExtractor:
    """External network exported with TorchScript.

    The module receives a ``(1, 3, H, W)`` tensor in [-1, 1] and must return a
    list/tuple of feature maps ``(1, C, h, w)``.
    """

    def __init__(self, path: str | Path, provenance: str):
        self.path = str(path)
        self.provenance = provenance
        self.module = torch.jit.load(self.path, map_location="cpu").eval()
        self.dim = int(self.embed(np.zeros((64, 64), dtype=np.uint8)).shape[0])

    @torch.no_grad()
    def _features(self, img):
        out = self.module(_gray3(img))
        return [o[0] for o in (out if isinstance(out, (list, tuple)) else [out])]

    def taps(self, img):
        return [(f.double().numpy(), f.shape[0] > 1) for f in self._features(img)]

    def embed(self, img):
        return torch.cat([f.mean((1, 2)) for f in self._features(img)]).double().numpy()


def _normalize_channels(f: np.ndarray, eps: float = 1e-10) -> np.ndarray:
    return f / (np.sqrt((f**2).sum(axis=0, keepdims=True)) + eps)


def perceptual_distance(a, b, extractor, weights: Sequence[float] | None = None) -> float:
    """Sum over layer taps of the spatially averaged squared feature difference."""
    if extractor is None:
        raise ConfigError("perceptual distance needs a feature extractor")
    _same_shape(_arr(a), _arr(b))
    ta, tb = extractor.taps(a), extractor.taps(b)
    weights = weights or [1.0] * len(ta)
    total = 0.0
    for w, (fa, norm), (fb, _) in zip(weights, ta, tb):
        if norm:
            fa, fb = _normalize_channels(fa), _normalize_channels(fb)
        total += w * float(np.mean(np.sum((fa - fb) ** 2, axis=0)))
    return total


BUILTIN_EXTRACTORS = {
    "identity": lambda spec: IdentityExtractor(),
    "random-conv": lambda spec: RandomConvExtractor(int(spec.get("seed", 0)),
                                                    provenance=spec.get("provenance", "synthetic-test")),
}

DEFAULT_EXTRACTOR_MANIFEST = {
    "fid": {"builtin": "random-conv", "seed": 0, "provenance": "synthetic-test"},
    "lpips": {"builtin": "random-conv", "seed": 0, "provenance": "synthetic-test"},
    "fid_rad": {"builtin": "random-conv", "seed": 1, "provenance": "synthetic-test"},
    "lpips_rad": {"builtin": "random-conv", "seed": 1, "provenance": "synthetic-test"},
}


def load_extractors(manifest: str | Path | Mapping | None = None) -> tuple[dict, dict]:
    """Resolve metric variant -> extractor.

    Entries name either a ``builtin`` extractor or a TorchScript ``path`` with a
    ``provenance`` tag. Missing weight files leave that variant ``None`` so the
    report shows the column as absent. Returns (extractors, resolved manifest).
    """
    if manifest is None:
        spec = dict(DEFAULT_EXTRACTOR_MANIFEST)
    elif isinstance(manifest, Mapping):
        spec = dict(manifest)
    else:
        text = Path(manifest).read_text()
        spec = yaml.safe_load(text) if str(manifest).endswith((".yaml", ".yml")) else json.loads(text)
    unknown = set(spec) - set(VARIANTS)
    if unknown:
        raise ConfigError(f"unknown metric variants in extractor manifest: {sorted(unknown)}")
    out = {}
    for variant in VARIANTS:
        entry = spec.get(variant)
        if entry is None:
            out[variant] = None
        elif "builtin" in entry:
            if entry["builtin"] not in BUILTIN_EXTRACTORS:
                raise ConfigError(f"unknown builtin extractor {entry['builtin']!r}")
            out[variant] = BUILTIN_EXTRACTORS[entry["builtin"]](entry)
        elif Path(entry["path"]).exists():
            out[variant] = TorchScriptExtractor(entry["path"], entry.get("provenance", "unspecified"))
        else:
            log.warning("extractor weights %s for %s not found; column left absent", entry["path"], variant)
            out[variant] = None
    return out, spec


# --------------------------------------------------------------------------- reports

@dataclass
class MetricReport:
    psnr_db: float | None = None
    ssim: float | None = None
    fid: float | None = None
    fid_rad: float | None = None
    lpips: float | None = None
    lpips_rad: float | None = None
    per_image: list[dict] = field(default_factory=list)
    n_images: int = 0
    config_hash: str = ""
    provenance: dict = field(default_factory=dict)

    def row(self) -> dict:
        return {f: getattr(self, f) for f in FIELDS}

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        buf.write(f"# config_hash: {self.config_hash}\n")
        buf.write(f"# n_images: {self.n_images}\n")
        buf.write(f"# extractors: {json.dumps(self.provenance, sort_keys=True)}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(("pair_id",) + COLUMNS)
        for r in self.per_image:
            writer.writerow([r["pair_id"]] + [_fmt(r.get(f)) for f in FIELDS])
        writer.writerow(["ALL"] + [_fmt(getattr(self, f)) for f in FIELDS])
        return buf.getvalue()

    def save(self, path: str | Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.to_csv_text())

    @classmethod
    def load(cls, path: str | Path) -> "MetricReport":
        lines = Path(path).read_text().splitlines()
        meta = {}
        body = []
        for line in lines:
            if line.startswith("# "):
                k, _, v = line[2:].partition(": ")
                meta[k] = v
            else:
                body.append(line)
        rows = list(csv.reader(body))
        header, data = rows[0], rows[1:]
        if tuple(header[1:]) != COLUMNS:
            raise DataError(f"{path}: unexpected report columns {header}")
        per_image = [{"pair_id": r[0], **{f: _parse(v) for f, v in zip(FIELDS, r[1:])}} for r in data if r[0] != "ALL"]
        agg = next(r for r in data if r[0] == "ALL")
        return cls(**{f: _parse(v) for f, v in zip(FIELDS, agg[1:])}, per_image=per_image,
                   n_images=int(meta.get("n_images", len(per_image))), config_hash=meta.get("config_hash", ""),
                   provenance=json.loads(meta.get("extractors", "{}")))


def _fmt(v) -> str:
    if v is None:
        return ""
    if math.isinf(v):
        return "inf"
    return format(v, ".10g")


def _parse(s: str):
    if s == "":
        return None
    return float(s)


def _mean(values: Sequence[float]) -> float:
    return float(np.mean(values)) if values else math.nan


def evaluate_images(
    restored: Mapping[str, WindowedImage],
    targets: Mapping[str, WindowedImage],
    extractors: Mapping | None = None,
    config_hash: str = "",
) -> MetricReport:
    """Per-pair PSNR/SSIM/LPIPS rows and set-level FID, in sorted pair-id order."""
    if set(restored) != set(targets):
        raise DataError("restored and target sets hold different pair ids")
    if extractors is None:
        extractors, _ = load_extractors()
    ids = sorted(restored)
    rows = []
    for pid in ids:
        a, b = restored[pid], targets[pid]
        row = {"pair_id": pid, "psnr_db": psnr(a, b), "ssim": ssim(a, b), "fid": None, "fid_rad": None}
        for variant in ("lpips", "lpips_rad"):
            ex = extractors.get(variant)
            row[variant] = perceptual_distance(a, b, ex) if ex is not None else None
        rows.append(row)
    report = MetricReport(per_image=rows, n_images=len(ids), config_hash=config_hash,
                          provenance={v: (e.provenance if e is not None else None) for v, e in extractors.items()})
    report.psnr_db = _mean([r["psnr_db"] for r in rows])
    report.ssim = _mean([r["ssim"] for r in rows])
    for variant in ("lpips", "lpips_rad"):
        vals = [r[variant] for r in rows if r[variant] is not None]
        setattr(report, variant, _mean(vals) if vals else None)
    for variant in ("fid", "fid_rad"):
        ex = extractors.get(variant)
        if ex is None or len(ids) < 2:
            continue
        fa = np.stack([ex.embed(restored[pid]) for pid in ids])
        fb = np.stack([ex.embed(targets[pid]) for pid in ids])
        setattr(report, variant, frechet_distance(fa, fb))
    return report


def _pair_id_from(path: Path, suffix: str) -> str | None:
    stem = path.stem
    return stem[: -len(suffix)] if stem.endswith(suffix) else None


def evaluate_set(restored_dir, target_dir, extractors: Mapping | None = None,
                 allow_partial: bool = False, config_hash: str = "") -> MetricReport:
    """Match ``<id>_restored.png`` against ``<id>_trg.png`` (searched recursively)."""
    restored = {}
    for p in sorted(Path(restored_dir).glob("*_restored.png")):
        restored[_pair_id_from(p, "_restored")] = load_png(p)
    targets = {}
    for p in sorted(Path(target_dir).rglob("*_trg.png")):
        targets[_pair_id_from(p, "_trg")] = load_png(p)
    missing = sorted(set(targets) - set(restored))
    orphans = sorted(set(restored) - set(targets))
    if orphans or (missing and not allow_partial):
        problems = []
        if orphans:
            problems.append(f"restored without target: {orphans}")
        if missing:
            problems.append(f"target without restoration: {missing}")
        if not allow_partial or orphans:
            raise DataError("unmatched pair ids; " + "; ".join(problems))
    common = sorted(set(restored) & set(targets))
    if not common:
        raise DataError("no matching pair ids to evaluate")
    return evaluate_images({k: restored[k] for k in common}, {k: targets[k] for k in common},
                           extractors, config_hash)
