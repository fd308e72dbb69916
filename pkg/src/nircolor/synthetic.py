"""Synthetic registered NIR/RGB pairs for smoke tests and desk-scale experiments.

``affine_pairs`` maps NIR intensity through a fixed per-channel affine map,
so the colour of a pixel depends only on its absolute intensity.
``region_pairs`` builds textured regions whose colour follows the regional
mean intensity; the texture makes pixel intensities of neighbouring regions
overlap, which is what exposes colour bleeding under large spatial blur.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np
from scipy import ndimage

from .image import save_image

GAIN = (0.85, 0.6, 0.3)
OFFSET = (0.05, 0.2, 0.4)


def smooth_field(rng: np.random.Generator, size: int, sigma: float) -> np.ndarray:
    """Gaussian-filtered white noise rescaled to exactly [0, 1]."""
    f = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma, mode="wrap")
    return (f - f.min()) / (f.max() - f.min())


def affine_pairs(n: int, size: int = 64, seed: int = 0, smooth: float = 6.0,
                 gain=GAIN, offset=OFFSET) -> list[tuple[np.ndarray, np.ndarray]]:
    rng = np.random.default_rng(seed)
    gain = np.asarray(gain, dtype=np.float64)
    offset = np.asarray(offset, dtype=np.float64)
    pairs = []
    for _ in range(n):
        nir = 0.1 + 0.8 * smooth_field(rng, size, smooth)
        rgb = np.clip(nir[:, :, None] * gain + offset, 0.0, 1.0)
        pairs.append((nir.astype(np.float32), rgb.astype(np.float32)))
    return pairs


def region_pairs(n: int, size: int = 64, seed: int = 0, regions: int = 6,
                 texture: float = 0.12) -> list[tuple[np.ndarray, np.ndarray]]:
    """Voronoi regions of random mean level plus fine texture.

    RGB is a smooth colour ramp of the regional level with the NIR texture
    added on top, so a perfect colorizer plus detail transfer is exact.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size]
    pairs = []
    for _ in range(n):
        seeds = rng.uniform(0, size, size=(regions, 2))
        d = (yy[..., None] - seeds[:, 0]) ** 2 + (xx[..., None] - seeds[:, 1]) ** 2
        label = d.argmin(axis=-1)
        level = rng.uniform(0.25, 0.75, size=regions)[label]
        tex = texture * (2 * smooth_field(rng, size, 0.8) - 1)
        nir = np.clip(level + tex, 0.0, 1.0)
        hue = np.stack([level, 1.0 - level, 0.5 + 0.5 * (level - 0.5)], axis=-1)
        rgb = np.clip(0.15 + 0.7 * hue + tex[:, :, None], 0.0, 1.0)
        pairs.append((nir.astype(np.float32), rgb.astype(np.float32)))
    return pairs


def write_pairs(pairs, nir_dir: str | os.PathLike, rgb_dir: str | os.PathLike,
                prefix: str = "img", bits: int = 16) -> list[str]:
    nir_dir, rgb_dir = Path(nir_dir), Path(rgb_dir)
    nir_dir.mkdir(parents=True, exist_ok=True)
    rgb_dir.mkdir(parents=True, exist_ok=True)
    stems = []
    for i, (nir, rgb) in enumerate(pairs):
        stem = f"{prefix}{i:04d}"
        save_image(nir, nir_dir / f"{stem}.png", bits)
        save_image(rgb, rgb_dir / f"{stem}.png", bits)
        stems.append(stem)
    return stems
