"""Shared fixtures: a micro foundation model and small phantom sets."""

from __future__ import annotations

import numpy as np
import pytest
import torch

from refmar.data import WindowedImage, phantom_benchmark, phantom_dataset
from refmar.foundation import FoundationConfig, load_foundation

torch.set_num_threads(1)

MICRO_FOUNDATION = {"model": {"width": 64, "heads": 2, "layers": 1}, "corpus_subjects": 1,
                    "pretrain_steps": 10}


@pytest.fixture(scope="session")
def micro_cache(tmp_path_factory):
    return tmp_path_factory.mktemp("foundation-cache")


@pytest.fixture(scope="session")
def micro_config() -> FoundationConfig:
    return FoundationConfig(**MICRO_FOUNDATION)


@pytest.fixture()
def micro_foundation(micro_config, micro_cache):
    """Fresh (model, codec) each test; pretraining happens once per session."""
    return load_foundation(micro_config, micro_cache)


@pytest.fixture(scope="session")
def small_pairs():
    return phantom_dataset(2, 1, seed=5)


@pytest.fixture(scope="session")
def micro_benchmark():
    return phantom_benchmark(subjects_per_category=2, test_count=2, donor_subjects_per_category=5)


def random_image(seed: int, shape=(512, 512)) -> WindowedImage:
    rng = np.random.default_rng(seed)
    return WindowedImage(rng.integers(0, 256, shape, dtype=np.uint8))


# criterion number -> (title, "PASS"/"FAIL", detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[str, str, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, status, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"{status} criterion {n:2d} ({title}): {detail}")
