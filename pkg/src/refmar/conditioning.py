"""Model inputs for the three conditioning modes: none, multi-image and 2x3 grid."""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path

import numpy as np
import torch

from .data import ReferenceSet, WindowedImage, round_half_away
from .errors import ConfigError, ShapeMismatchError

MODES = ("none", "multi", "grid")
GRID_CELL = 256
GRID_ROWS, GRID_COLS = 2, 3


@lru_cache(maxsize=None)
def _packaged_prompts() -> dict:
    return json.loads(resources.files("refmar").joinpath("prompts.json").read_text())


def load_prompts(path: str | Path | None = None) -> dict[str, str]:
    """Prompt text keyed by mode; ``path`` overrides the packaged file."""
    data = json.loads(Path(path).read_text()) if path else _packaged_prompts()
    missing = set(MODES) - set(data["prompts"])
    if missing:
        raise ConfigError(f"prompts file lacks modes {sorted(missing)}")
    return dict(data["prompts"])


@dataclass
class ConditioningPrompt:
    mode: str
    text: str
    image_roles: list[str]

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown conditioning mode {self.mode!r}")
        if self.mode == "multi" and len(self.image_roles) < 2:
            raise ConfigError("multi mode needs the source plus at least one reference")
        if self.mode in ("none", "grid") and len(self.image_roles) != 1:
            raise ConfigError(f"{self.mode} mode takes exactly one image")


@dataclass
class GridComposite:
    pixels: np.ndarray
    cell_map: dict[str, tuple[int, int]]
    cell_size: int = GRID_CELL

    def cell(self, role: str) -> np.ndarray:
        r, c = self.cell_map[role]
        s = self.cell_size
        return self.pixels[r * s:(r + 1) * s, c * s:(c + 1) * s]


def _check_refs(refs: ReferenceSet | None, K: int) -> ReferenceSet:
    if refs is None or refs.K == 0:
        raise ConfigError("reference-conditioned modes need a non-empty ReferenceSet")
    if refs.K != K:
        raise ConfigError(f"expected K={K} references, got {refs.K}")
    return refs


def area_downsample(pixels: np.ndarray, size: int = GRID_CELL) -> np.ndarray:
    """Integer-factor box average, rounded half-up back to 8 bits."""
    h, w = pixels.shape
    if h % size or w % size or h // size != w // size:
        raise ShapeMismatchError(f"cannot area-downsample {pixels.shape} to {size}x{size}")
    f = h // size
    mean = pixels.astype(np.float64).reshape(size, f, size, f).mean(axis=(1, 3))
    return round_half_away(mean).astype(np.uint8)


def build_none_condition(src: WindowedImage, codec, prompts: dict | None = None):
    prompts = prompts or load_prompts()
    return [codec.encode(src)], ConditioningPrompt("none", prompts["none"], ["source"])


def build_multi_condition(src: WindowedImage, refs: ReferenceSet, codec, K: int = 5,
                          prompts: dict | None = None):
    """Latents ordered ``[E(src), E(r1), ..., E(rK)]`` plus the role-labelling prompt."""
    refs = _check_refs(refs, K)
    prompts = prompts or load_prompts()
    latents = [codec.encode(src)] + [codec.encode(r) for r in refs.references]
    roles = ["source"] + [f"ref{i + 1}" for i in range(refs.K)]
    return latents, ConditioningPrompt("multi", prompts["multi"], roles)


def build_grid_condition(src: WindowedImage, refs: ReferenceSet, K: int = 5,
                         prompts: dict | None = None):
    """Tile source and references into a 512x768 composite, source top-left, row-major."""
    refs = _check_refs(refs, K)
    if refs.K != GRID_ROWS * GRID_COLS - 1:
        raise ConfigError(f"grid mode holds exactly {GRID_ROWS * GRID_COLS - 1} references")
    prompts = prompts or load_prompts()
    images = [src] + list(refs.references)
    roles = ["source"] + [f"ref{i + 1}" for i in range(refs.K)]
    s = GRID_CELL
    canvas = np.zeros((GRID_ROWS * s, GRID_COLS * s), dtype=np.uint8)
    cell_map = {}
    for idx, (role, img) in enumerate(zip(roles, images)):
        r, c = divmod(idx, GRID_COLS)
        canvas[r * s:(r + 1) * s, c * s:(c + 1) * s] = area_downsample(img.pixels, s)
        cell_map[role] = (r, c)
    return GridComposite(canvas, cell_map), ConditioningPrompt("grid", prompts["grid"], ["grid"])


def build_condition(mode: str, src: WindowedImage, refs: ReferenceSet | None, codec,
                    K: int = 5, prompts: dict | None = None):
    """Dispatch on ``mode``; always returns ``(latents, prompt)``."""
    if mode == "none":
        return build_none_condition(src, codec, prompts)
    if mode == "multi":
        return build_multi_condition(src, refs, codec, K, prompts)
    if mode == "grid":
        grid, prompt = build_grid_condition(src, refs, K, prompts)
        return [codec.encode(grid.pixels)], prompt
    raise ConfigError(f"unknown conditioning mode {mode!r}")


def stack_latents(latents: list[torch.Tensor]) -> list[torch.Tensor]:
    return [z[None] if z.dim() == 3 else z for z in latents]
