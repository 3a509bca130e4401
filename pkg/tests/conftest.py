from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from c2p.data import scan_dataset


def write_png(path: Path, array: np.ndarray) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(array).save(path)
    return path


def solid_image(value: int, size: int = 32) -> np.ndarray:
    return np.full((size, size, 3), value, dtype=np.uint8)


def noise_image(rng: np.random.Generator, low: int, high: int, size: int = 32) -> np.ndarray:
    return rng.integers(low, high, size=(size, size, 3), dtype=np.uint8)


def make_flat_tree(root: Path, n_real: int = 3, n_fake: int = 2, size: int = 32) -> Path:
    """Flat-layout fixture: `real/` and `fake/` directories of small PNGs."""
    rng = np.random.default_rng(7)
    for i in range(n_real):
        write_png(root / "real" / f"r{i}.png", noise_image(rng, 20, 80, size))
    for i in range(n_fake):
        write_png(root / "fake" / f"f{i}.png", noise_image(rng, 150, 230, size))
    return root


def make_separable_tree(
    root: Path,
    n_per_class: int = 64,
    size: int = 32,
    seed: int = 11,
) -> Path:
    """Two visually distinct classes: dark-noise real vs bright-noise fake.

    The toy encoder maps these tight input clusters to tight, linearly
    separable feature clusters, so a linear boundary exists by construction.
    """
    rng = np.random.default_rng(seed)
    for i in range(n_per_class):
        write_png(root / "real" / f"r{i:03d}.png", noise_image(rng, 10, 60, size))
    for i in range(n_per_class):
        write_png(root / "fake" / f"f{i:03d}.png", noise_image(rng, 190, 240, size))
    return root


@pytest.fixture
def flat_tree(tmp_path: Path) -> Path:
    return make_flat_tree(tmp_path / "flat")


@pytest.fixture
def flat_manifest(flat_tree: Path):
    return scan_dataset(flat_tree, "flat", "train")


@pytest.fixture
def separable_tree(tmp_path: Path) -> Path:
    return make_separable_tree(tmp_path / "separable")
