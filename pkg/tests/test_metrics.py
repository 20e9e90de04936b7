import math

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st
from skimage.metrics import structural_similarity

from refmar.data import WindowedImage, save_png
from refmar.errors import ConfigError, DataError, ShapeMismatchError
from refmar.metrics import (
    IdentityExtractor, MetricReport, RandomConvExtractor, evaluate_images, evaluate_set,
    frechet_distance, frechet_from_moments, load_extractors, perceptual_distance, psnr, ssim,
)

from conftest import random_image


def _scipy_frechet(mu_a, cov_a, mu_b, cov_b):
    covmean = scipy.linalg.sqrtm(cov_a @ cov_b).real
    return float(np.sum((mu_a - mu_b) ** 2) + np.trace(cov_a + cov_b - 2 * covmean))


# --------------------------------------------------------------------------- PSNR / SSIM

def test_psnr_closed_form():
    a = np.zeros((64, 64), np.uint8)
    assert psnr(a, a + 1) == pytest.approx(20 * math.log10(255), abs=1e-9)
    b = a.copy()
    b[:32, :32] = 10  # MSE = 100 / 4
    assert psnr(a, b) == pytest.approx(10 * math.log10(255**2 / 25), abs=1e-9)
    assert psnr(a, a) == math.inf
    with pytest.raises(ShapeMismatchError):
        psnr(a, np.zeros((3, 3)))


def test_ssim_identical_and_constant():
    img = random_image(0, (64, 64))
    assert ssim(img, img) == 1.0
    a, b = np.full((32, 32), 100, np.uint8), np.full((32, 32), 50, np.uint8)
    c1 = (0.01 * 255) ** 2
    assert ssim(a, b) == pytest.approx((2 * 100 * 50 + c1) / (100**2 + 50**2 + c1), abs=1e-6)


@pytest.mark.parametrize("seed", range(3))
def test_ssim_matches_skimage(seed):
    rng = np.random.default_rng(seed)
    a = rng.integers(0, 256, (96, 80)).astype(np.uint8)
    b = np.clip(a + rng.normal(0, 20, a.shape), 0, 255).astype(np.uint8)
    ref = structural_similarity(a, b, data_range=255, gaussian_weights=True, sigma=1.5,
                                use_sample_covariance=False)
    assert ssim(a, b) == pytest.approx(ref, abs=1e-9)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**16))
def test_ssim_symmetric_and_bounded(seed):
    rng = np.random.default_rng(seed)
    a, b = (rng.integers(0, 256, (24, 24)).astype(np.uint8) for _ in range(2))
    s = ssim(a, b)
    assert s == pytest.approx(ssim(b, a), abs=1e-12)
    assert -1 <= s <= 1


# --------------------------------------------------------------------------- Frechet

def test_frechet_planted_gaussians():
    rng = np.random.default_rng(0)
    d = 6
    L1, L2 = rng.normal(size=(d, d)), rng.normal(size=(d, d))
    cov_a, cov_b = L1 @ L1.T + 0.1 * np.eye(d), L2 @ L2.T + 0.1 * np.eye(d)
    mu_a, mu_b = rng.normal(size=d), rng.normal(size=d)
    ours = frechet_from_moments(mu_a, cov_a, mu_b, cov_b)
    assert ours == pytest.approx(_scipy_frechet(mu_a, cov_a, mu_b, cov_b), abs=1e-4)


def test_frechet_commuting_closed_form():
    sa, sb = np.array([1.0, 4.0, 9.0]), np.array([4.0, 1.0, 1.0])
    mu = np.array([1.0, 0.0, 2.0])
    expected = mu @ mu + np.sum((np.sqrt(sa) - np.sqrt(sb)) ** 2)
    assert frechet_from_moments(mu, np.diag(sa), np.zeros(3), np.diag(sb)) == pytest.approx(expected, abs=1e-10)


def test_frechet_one_dimensional_unit_shift():
    assert frechet_from_moments(np.zeros(1), np.eye(1), np.ones(1), np.eye(1)) == pytest.approx(1.0, abs=1e-12)


def test_frechet_from_samples_uses_sample_moments():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(50, 4)), rng.normal(1.0, 2.0, size=(60, 4))
    ref = _scipy_frechet(a.mean(0), np.cov(a, rowvar=False), b.mean(0), np.cov(b, rowvar=False))
    assert frechet_distance(a, b) == pytest.approx(ref, abs=1e-6)
    assert frechet_distance(a, a) == pytest.approx(0.0, abs=1e-9)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**16), st.integers(2, 5))
def test_frechet_symmetric_nonnegative(seed, d):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(12, d)), rng.normal(size=(9, d)) * 1.5
    fab = frechet_distance(a, b)
    assert fab >= 0
    assert fab == pytest.approx(frechet_distance(b, a), rel=1e-6, abs=1e-8)


def test_frechet_errors():
    with pytest.raises(DataError):
        frechet_distance(np.zeros((1, 3)), np.zeros((4, 3)))
    with pytest.raises(ShapeMismatchError):
        frechet_distance(np.zeros((4, 3)), np.zeros((4, 2)))
    with pytest.raises(DataError):
        frechet_distance(np.full((4, 3), np.nan), np.zeros((4, 3)))


# --------------------------------------------------------------------------- perceptual

def test_identity_lpips_is_scaled_pixel_mse():
    a, b = random_image(3, (64, 64)), random_image(4, (64, 64))
    expected = np.mean(((a.pixels.astype(float) - b.pixels.astype(float)) / 127.5) ** 2)
    assert perceptual_distance(a, b, IdentityExtractor()) == pytest.approx(expected, abs=1e-6)


def test_random_conv_extractor_properties():
    a, b = random_image(5, (64, 64)), random_image(6, (64, 64))
    ex, ex2 = RandomConvExtractor(0), RandomConvExtractor(0)
    assert perceptual_distance(a, a, ex) == 0.0
    d = perceptual_distance(a, b, ex)
    assert d > 0 and d == perceptual_distance(a, b, ex2)
    assert d == pytest.approx(perceptual_distance(b, a, ex), rel=1e-12)
    assert ex.embed(a).shape == (ex.dim,)
    assert not np.array_equal(RandomConvExtractor(1).embed(a), ex.embed(a))
    with pytest.raises(ConfigError):
        perceptual_distance(a, b, None)


def test_load_extractors(tmp_path, caplog):
    default, spec = load_extractors()
    assert set(default) == {"fid", "fid_rad", "lpips", "lpips_rad"}
    assert all(e.provenance == "synthetic-test" for e in default.values())
    exs, _ = load_extractors({"fid": {"path": str(tmp_path / "missing.pt"), "provenance": "x"},
                              "lpips": {"builtin": "identity"}})
    assert exs["fid"] is None and exs["fid_rad"] is None
    assert isinstance(exs["lpips"], IdentityExtractor)
    assert "missing.pt" in caplog.text
    with pytest.raises(ConfigError):
        load_extractors({"kid": {"builtin": "identity"}})
    with pytest.raises(ConfigError):
        load_extractors({"fid": {"builtin": "vgg"}})


# --------------------------------------------------------------------------- reports

def _set(n, offset):
    return {f"s{i}_0000": WindowedImage(np.clip(random_image(i, (64, 64)).pixels.astype(int) + offset, 0, 255)
                                        .astype(np.uint8)) for i in range(n)}


def test_evaluate_images_and_csv_roundtrip(tmp_path):
    targets, restored = _set(3, 0), _set(3, 4)
    exs, _ = load_extractors({"fid": {"builtin": "identity"}, "lpips": {"builtin": "identity"}})
    rep = evaluate_images(restored, targets, exs, "abc")
    assert rep.n_images == 3 and rep.fid_rad is None and rep.lpips_rad is None
    assert [r["pair_id"] for r in rep.per_image] == sorted(targets)
    assert rep.psnr_db == pytest.approx(np.mean([psnr(restored[k], targets[k]) for k in targets]))
    rep.save(tmp_path / "r.csv")
    back = MetricReport.load(tmp_path / "r.csv")
    assert back.to_csv_text() == rep.to_csv_text()
    assert back.config_hash == "abc" and back.provenance["fid"] == "synthetic-test"
    with pytest.raises(DataError):
        evaluate_images(restored, _set(2, 0), exs)


def test_single_image_has_no_fid():
    rep = evaluate_images(_set(1, 3), _set(1, 0))
    assert rep.fid is None and rep.lpips is not None


def test_evaluate_set_matching(tmp_path):
    targets, restored = _set(3, 0), _set(3, 2)
    for pid, img in targets.items():
        save_png(img, tmp_path / "t" / "test" / "head" / f"{pid}_trg.png")
    for pid in sorted(restored)[:2]:
        save_png(restored[pid], tmp_path / "r" / f"{pid}_restored.png")
    with pytest.raises(DataError, match="target without restoration"):
        evaluate_set(tmp_path / "r", tmp_path / "t")
    rep = evaluate_set(tmp_path / "r", tmp_path / "t", allow_partial=True)
    assert rep.n_images == 2
    save_png(restored["s0_0000"], tmp_path / "r" / "zz_0000_restored.png")
    with pytest.raises(DataError, match="restored without target"):
        evaluate_set(tmp_path / "r", tmp_path / "t", allow_partial=True)
