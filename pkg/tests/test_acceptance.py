"""Exit criteria, one test each, each printing a PASS/FAIL line.

The training-based criteria (2, 5, 6) share cached benchmark runs; the first
of them to execute pays for the pretrained toy backbone (cached on disk under
``$REFMAR_CACHE`` or ``~/.cache/refmar``) and the training itself.
"""

from __future__ import annotations

import functools
import math
import time

import numpy as np
import pytest
import scipy.linalg
import torch

from refmar.backbone import IdentityCodec, ToyDiT, ToyDiTConfig, tokenize
from refmar.cli import main as cli_main
from refmar.conditioning import area_downsample, build_grid_condition
from refmar.data import (
    ALLOWED_N, ReferenceSet, TrainingPair, WindowedImage, build_manifest, phantom_benchmark,
    repeat_count_for, subset_manifest, window_hu,
)
from refmar.flowmatch import FlowMatchBatch, TrainConfig, encode_examples, fixed_draw_loss, flow_match_loss, train
from refmar.foundation import FoundationConfig, default_cache_dir, load_foundation
from refmar.harness import build_references
from refmar.infer import SamplerConfig, ensemble_mean, ensemble_restore, initial_noise, restore, sample_latent
from refmar.lora import inject_adapters
from refmar.metrics import IdentityExtractor, frechet_from_moments, perceptual_distance, psnr, ssim

from conftest import ACCEPTANCE

pytestmark = pytest.mark.acceptance

BENCH_N, BENCH_R, BENCH_M = 16, 16, 10

# Regression pins, measured once on the reference machine (see the decisions ledger).
PIN_LOSS_RATIO = 0.432         # fixed-draw training loss after / before, none mode
PIN_PSNR_GAIN_DB = 2.97        # mean held-out gain over the corrupted input, none mode
PIN_MODE_PSNR_DB = {"multi": 27.26, "none": 27.24, "grid": 22.48}
PIN_REL_TOL = 0.10
PIN_MODE_ABS_TOL_DB = 0.25


def criterion(n: int, title: str):
    """Record and print PASS/FAIL for one criterion; the test's return value is the detail line."""

    def deco(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            t0 = time.perf_counter()
            try:
                detail = fn(*args, **kwargs) or ""
            except BaseException as exc:
                msg = str(exc).splitlines()[0] if str(exc) else ""
                ACCEPTANCE[n] = (title, "FAIL", f"{type(exc).__name__}: {msg}")
                print(f"\nFAIL criterion {n} ({title}): {type(exc).__name__}: {msg}")
                raise
            detail = f"{detail} [{time.perf_counter() - t0:.1f} s]".strip()
            ACCEPTANCE[n] = (title, "PASS", detail)
            print(f"\nPASS criterion {n} ({title}): {detail}")

        return wrapper

    return deco


# --------------------------------------------------------------------------- shared benchmark runs

@functools.lru_cache(maxsize=None)
def foundation_config() -> FoundationConfig:
    return FoundationConfig()


@functools.lru_cache(maxsize=None)
def benchmark_run(mode: str) -> dict:
    """Train one adapter set on the fixed phantom benchmark and restore its test split."""
    manifest, pairs = phantom_benchmark()
    manifest = subset_manifest(manifest, BENCH_N)
    test_ids = sorted(manifest.splits["test"])
    refs = None
    if mode != "none":
        refs = build_references(manifest, pairs, manifest.train_ids + test_ids, 5, 0)
    model, codec = load_foundation(foundation_config())
    snapshot = {n: p.detach().clone() for n, p in model.named_parameters()}
    examples = encode_examples(manifest.train_ids, pairs, refs, mode, codec)
    loss_before = fixed_draw_loss(model, examples)
    t0 = time.perf_counter()
    ckpt, tlog = train(manifest, TrainConfig(r=BENCH_R, N=BENCH_N, conditioning_mode=mode), model, codec,
                       pairs, refs)
    train_s = time.perf_counter() - t0
    base_unchanged = all(torch.equal(p, snapshot[n.replace(".base.", ".")])
                         for n, p in ckpt.model.base_parameters().items())
    loss_after = fixed_draw_loss(ckpt.model, examples)
    corrupted, restored = [], []
    sampler = SamplerConfig(conditioning_mode=mode)
    for pid in test_ids:
        p = pairs[pid]
        ens = ensemble_restore(p.source, refs[pid] if refs else None, ckpt.model, codec, BENCH_M, 0, sampler)
        corrupted.append(psnr(p.source, p.target))
        restored.append(psnr(ens.mean_image, p.target))
    return {
        "steps": len(tlog.records),
        "train_s": train_s,
        "base_unchanged": base_unchanged,
        "base_count": len(snapshot),
        "nonzero_B": sum(int(ad.B.any()) for ad in ckpt.model.adapters.values()),
        "adapters": len(ckpt.model.adapters),
        "loss_before": loss_before,
        "loss_after": loss_after,
        "corrupted": np.array(corrupted),
        "restored": np.array(restored),
    }


def _within(value: float, pin: float | None, detail: str, rel: float | None = None,
            abs_: float | None = None) -> bool:
    assert pin is not None, f"regression pin not set: {detail}"
    tol = abs(pin) * rel if rel is not None else abs_
    return abs(value - pin) <= tol


# --------------------------------------------------------------------------- criteria

@criterion(1, "LoRA zero-init identity")
def test_c01_zero_init_identity():
    model, _ = load_foundation(foundation_config())
    gen = torch.Generator().manual_seed(0)
    cases = []
    for i in range(100):
        x = torch.randn(1, 1, 128, 128, generator=gen)
        kind = i % 3
        if kind == 0:
            conds = [torch.randn(1, 1, 128, 128, generator=gen)]
        elif kind == 1:
            conds = [torch.randn(1, 1, 128, 128, generator=gen) for _ in range(6)]
        else:
            conds = [torch.randn(1, 1, 128, 192, generator=gen)]
        tokens = torch.randint(1, 512, (1, 12), generator=gen)
        cases.append((x, torch.rand(1, generator=gen), conds, tokens))
    t0 = time.perf_counter()
    with torch.no_grad():
        before = [model.predict_velocity(*c) for c in cases]
        adapted = inject_adapters(model, r=16, seed=1)
        after = [adapted.predict_velocity(*c) for c in cases]
    elapsed = time.perf_counter() - t0
    mismatched = sum(not torch.equal(a, b) for a, b in zip(before, after))
    assert mismatched == 0, f"{mismatched}/100 forward passes differ"
    assert elapsed < 10.0, f"took {elapsed:.1f} s"
    return f"100/100 bitwise equal across none/multi/grid inputs, {len(adapted.adapters)} adapters"


@criterion(2, "frozen backbone after full training")
def test_c02_frozen_backbone():
    run = benchmark_run("none")
    assert run["steps"] == 750
    assert run["base_unchanged"], "a base parameter changed"
    assert run["nonzero_B"] >= 1
    assert run["train_s"] < 600, f"training took {run['train_s']:.0f} s"
    return (f"{run['base_count']} base tensors bitwise unchanged, {run['nonzero_B']}/{run['adapters']} "
            f"B matrices nonzero, 750 steps in {run['train_s']:.0f} s")


@criterion(3, "flow-matching gradient check")
def test_c03_gradient_check():
    cfg = ToyDiTConfig(width=32, heads=2, layers=1, patch=4, seed=3)
    adapted = inject_adapters(ToyDiT(cfg), r=2, seed=4).double()
    gen = torch.Generator().manual_seed(5)
    with torch.no_grad():
        for ad in adapted.adapters.values():
            ad.B.copy_(torch.randn(ad.B.shape, generator=gen, dtype=torch.float64) * 0.3)
    x0 = torch.randn(2, 1, 8, 8, generator=gen, dtype=torch.float64)
    x1 = torch.randn(2, 1, 8, 8, generator=gen, dtype=torch.float64)
    conds = [torch.randn(2, 1, 8, 8, generator=gen, dtype=torch.float64) for _ in range(2)]
    tokens = tokenize("remove metal artifacts")[None].repeat(2, 1)
    batch = FlowMatchBatch.build(x0, x1, torch.tensor([0.3, 0.8], dtype=torch.float64), conds, tokens)

    # the last block's text-stream outputs never reach the image head, so their adapters get no gradient
    params = list(adapted.trainable_parameters())
    loss = flow_match_loss(batch, adapted)
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    params, grads = zip(*[(p, g) for p, g in zip(params, grads) if g is not None])
    rng = np.random.default_rng(6)
    h, worst = 1e-3, 0.0
    for _ in range(32):
        k = int(rng.integers(len(params)))
        idx = tuple(int(rng.integers(s)) for s in params[k].shape)
        with torch.no_grad():
            orig = params[k][idx].item()
            params[k][idx] = orig + h
            up = flow_match_loss(batch, adapted).item()
            params[k][idx] = orig - h
            down = flow_match_loss(batch, adapted).item()
            params[k][idx] = orig
        fd = (up - down) / (2 * h)
        an = grads[k][idx].item()
        rel = abs(an - fd) / max(abs(an), abs(fd), 1e-12)
        worst = max(worst, rel)
    assert worst <= 1e-4, f"worst relative error {worst:.2e}"
    return f"32 A/B entries, worst relative error {worst:.1e} (h=1e-3, float64)"


class _LinearFlowOracle:
    def __init__(self, velocity):
        self.velocity = velocity

    def predict_velocity(self, x_t, t, conds, tokens):
        return self.velocity


@criterion(4, "linear-flow integration oracle")
def test_c04_linear_flow_oracle():
    codec = IdentityCodec()
    rng = np.random.default_rng(0)
    src = WindowedImage(rng.integers(0, 256, (512, 512), dtype=np.uint8))
    trg = WindowedImage(rng.integers(0, 256, (512, 512), dtype=np.uint8))
    x1 = codec.encode(trg)
    worst = 0.0
    for steps in (1, 4, 28):
        cfg = SamplerConfig(step_count=steps, seed=11)
        x0 = initial_noise(x1.shape, cfg.seed)
        oracle = _LinearFlowOracle((x1 - x0)[None])
        z = sample_latent(oracle, [codec.encode(src)], tokenize("x"), x1.shape, cfg)
        err = (z - x1).abs().max().item()
        worst = max(worst, err)
        assert err <= 1e-5, f"{steps} steps: max error {err:.2e}"
        out = restore(src, None, oracle, codec, cfg)
        assert np.array_equal(out.pixels, trg.pixels), f"{steps} steps: restored pixels differ"
    return f"step counts 1/4/28, worst latent error {worst:.1e}, restored pixels exact"


@criterion(5, "toy training efficacy")
def test_c05_training_efficacy():
    run = benchmark_run("none")
    ratio = run["loss_after"] / run["loss_before"]
    gain = float(run["restored"].mean() - run["corrupted"].mean())
    detail = (f"fixed-draw loss {run['loss_before']:.4f} -> {run['loss_after']:.4f} (ratio {ratio:.3f}); "
              f"PSNR {run['corrupted'].mean():.2f} -> {run['restored'].mean():.2f} dB (gain {gain:+.2f})")
    assert ratio <= 0.5, detail
    assert gain >= 2.0, detail
    assert _within(ratio, PIN_LOSS_RATIO, detail, rel=PIN_REL_TOL), f"loss ratio drifted from pin: {detail}"
    assert _within(gain, PIN_PSNR_GAIN_DB, detail, rel=PIN_REL_TOL), f"PSNR gain drifted from pin: {detail}"
    return detail


@criterion(6, "conditioning-mode ordering")
def test_c06_mode_ordering():
    psnrs = {m: float(benchmark_run(m)["restored"].mean()) for m in ("multi", "none", "grid")}
    detail = ", ".join(f"{m} {v:.2f} dB" for m, v in psnrs.items())
    assert psnrs["multi"] >= psnrs["none"] >= psnrs["grid"], detail
    for m, v in psnrs.items():
        assert _within(v, PIN_MODE_PSNR_DB[m], detail, abs_=PIN_MODE_ABS_TOL_DB), f"{m} drifted from pin: {detail}"
    return detail


@criterion(7, "ensemble variance reduction")
def test_c07_ensemble_statistics():
    rng = np.random.default_rng(0)
    sigma, M = 12.0, 10
    clean = rng.uniform(60, 195, (512, 512))
    members = [WindowedImage(np.clip(np.rint(clean + rng.normal(0, sigma, clean.shape)), 0, 255).astype(np.uint8))
               for _ in range(M)]
    t0 = time.perf_counter()
    mean = ensemble_mean(members)
    elapsed = time.perf_counter() - t0
    var = float(np.var(mean.pixels.astype(np.float64) - clean))
    expected = sigma**2 / M
    ratio = var / expected
    assert abs(ratio - 1) <= 0.2, f"residual variance {var:.3f} vs {expected:.3f}"
    assert elapsed < 5.0
    return f"residual variance {var:.2f} vs sigma^2/M = {expected:.2f} (ratio {ratio:.3f})"


@criterion(8, "metric oracles")
def test_c08_metric_oracles():
    a = np.zeros((64, 64), np.uint8)
    b = a.copy()
    b[::2] = 6  # MSE = 18
    assert abs(psnr(a, b) - 10 * math.log10(255**2 / 18)) <= 1e-6
    assert abs(psnr(a, a + 3) - 10 * math.log10(255**2 / 9)) <= 1e-6

    img = np.random.default_rng(1).integers(0, 256, (64, 64)).astype(np.uint8)
    assert ssim(img, img) == 1.0
    c1 = (0.01 * 255) ** 2
    const = ssim(np.full((32, 32), 200, np.uint8), np.full((32, 32), 80, np.uint8))
    assert abs(const - (2 * 200 * 80 + c1) / (200**2 + 80**2 + c1)) <= 1e-6

    rng = np.random.default_rng(2)
    d = 5
    L1, L2 = rng.normal(size=(d, d)), rng.normal(size=(d, d))
    cov_a, cov_b = L1 @ L1.T + 0.2 * np.eye(d), L2 @ L2.T + 0.2 * np.eye(d)
    mu_a, mu_b = rng.normal(size=d), rng.normal(size=d)
    analytic = (np.sum((mu_a - mu_b) ** 2) + np.trace(cov_a) + np.trace(cov_b)
                - 2 * np.trace(scipy.linalg.sqrtm(cov_a @ cov_b).real))
    fd = frechet_from_moments(mu_a, cov_a, mu_b, cov_b)
    assert abs(fd - analytic) <= 1e-4
    assert abs(frechet_from_moments(np.zeros(1), np.eye(1), np.ones(1), np.eye(1)) - 1.0) <= 1e-4

    x, y = (np.random.default_rng(s).integers(0, 256, (64, 64)).astype(np.uint8) for s in (3, 4))
    mse = np.mean(((x.astype(float) - y.astype(float)) / 127.5) ** 2)
    assert abs(perceptual_distance(x, y, IdentityExtractor()) - mse) <= 1e-6
    return f"PSNR/SSIM closed forms, Frechet |err| {abs(fd - analytic):.1e}, identity LPIPS = scaled MSE"


@criterion(9, "data pipeline bit-exactness")
def test_c09_data_pipeline():
    codes = window_hu(np.array([[-500.0, 1300.0, 3000.0]])).pixels[0].tolist()
    assert codes == [0, 255, 255], codes
    img = WindowedImage(np.zeros((4, 4), np.uint8), category="head")
    pairs = [TrainingPair(img, img, f"s{i:03d}_0000") for i in range(200)]
    for N in ALLOWED_N:
        assert repeat_count_for(N) == math.ceil(750 / N)
        assert build_manifest(pairs, N, test_count=10).repeat_count == math.ceil(750 / N)
    rng = np.random.default_rng(0)
    src = WindowedImage(rng.integers(0, 256, (512, 512), dtype=np.uint8))
    refs = ReferenceSet([WindowedImage(np.full((512, 512), 10 * k, np.uint8)) for k in range(1, 6)],
                        [f"d{k}" for k in range(5)])
    grid, _ = build_grid_condition(src, refs)
    assert grid.pixels.shape == (512, 768)
    assert grid.cell_map["source"] == (0, 0)
    assert np.array_equal(grid.pixels[:256, :256], area_downsample(src.pixels))
    return "window codes [0, 255, 255]; repeat counts " + ", ".join(
        f"N={N}:{repeat_count_for(N)}" for N in ALLOWED_N) + "; grid 512x768, source at (0, 0)"


@criterion(10, "end-to-end determinism")
def test_c10_determinism(tmp_path, capsys):
    load_foundation(foundation_config())  # ensure the cache is warm for both runs
    args = ["ablate", "--phantom-subjects", "5", "--N", "16", "--grid-r", "4", "8", "--steps", "30",
            "--M", "2", "--step-count", "4", "--test-limit", "2", "--cache-dir", str(default_cache_dir())]
    outputs = []
    for name in ("a", "b"):
        assert cli_main(args + ["--store", str(tmp_path / name)]) == 0
        outputs.append(capsys.readouterr().out)
    assert outputs[0] == outputs[1], "rendered reports differ"
    reports = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*.csv"))
    assert len(reports) == 4  # two cells plus two reference points
    for rel in reports:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), str(rel)
    return f"{len(reports)} metric reports and the rendered table byte-identical across two ablate runs"
