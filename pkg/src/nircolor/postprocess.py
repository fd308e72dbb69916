"""Joint bilateral filtering on a bilateral grid, and detail re-injection.

The grid is a coarse 3-D histogram over (row, col, guide intensity).  Every
pixel of the source is splatted with trilinear weights, the grid is blurred
with a separable Gaussian, and each pixel reads its result back at its own
grid position (slice), dividing by the accumulated homogeneous weight.

Sampling: ``cells_per_sigma`` grid cells per standard deviation on each axis,
and a grid blur of ``sqrt(cells_per_sigma**2 - 1/3)`` cells so that blur plus
the two linear interpolation steps add up to the requested sigma.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .image import as_image, clamp_unit

log = logging.getLogger(__name__)

DEFAULT_SIGMA_G = 17.0
DEFAULT_SIGMA_F = 0.005
CELLS_PER_SIGMA = 3
TRUNCATE = 3.0
MAX_CELLS = 1 << 24


@dataclass(frozen=True)
class BilateralParams:
    sigma_g: float = DEFAULT_SIGMA_G
    sigma_f: float = DEFAULT_SIGMA_F

    def __post_init__(self):
        if not (self.sigma_g > 0 and self.sigma_f > 0):
            raise ValueError("sigma_g and sigma_f must be positive")


class BilateralGrid:
    """Splat/blur/slice grid for one guide image."""

    def __init__(self, guide: np.ndarray, sigma_g: float, sigma_f: float,
                 cells_per_sigma: float = CELLS_PER_SIGMA, max_cells: int = MAX_CELLS):
        BilateralParams(sigma_g, sigma_f)
        guide = np.asarray(guide, dtype=np.float64)
        if guide.ndim != 2:
            raise ValueError("guide must be single-channel")
        h, w = guide.shape
        lo, hi = float(guide.min()), float(guide.max())
        r_space = r_range = float(cells_per_sigma)
        while True:
            s_s, s_r = sigma_g / r_space, sigma_f / r_range
            dims = (int((h - 1) / s_s) + 3, int((w - 1) / s_s) + 3, int((hi - lo) / s_r) + 3)
            if np.prod(dims, dtype=np.int64) <= max_cells or r_space <= 1:
                break
            # coarsen the range axis first, it is the one that explodes for small sigma_f
            if r_range > 1:
                r_range = max(1.0, r_range - 1)
            else:
                r_space = max(1.0, r_space - 1)
        if (r_space, r_range) != (cells_per_sigma, cells_per_sigma):
            log.warning("bilateral grid coarsened to %.0f/%.0f cells per sigma to fit %d cells",
                        r_space, r_range, max_cells)
        self.dims = dims
        self.sampling = (s_s, s_r)
        self.blur_sigma = (np.sqrt(max(r_space ** 2 - 1 / 3, 0.25)),
                           np.sqrt(max(r_range ** 2 - 1 / 3, 0.25)))
        gy = np.arange(h, dtype=np.float64)[:, None] / s_s + 1 + np.zeros((1, w))
        gx = np.arange(w, dtype=np.float64)[None, :] / s_s + 1 + np.zeros((h, 1))
        gr = (guide - lo) / s_r + 1
        base = [np.floor(c).astype(np.intp) for c in (gy, gx, gr)]
        frac = [c - b for c, b in zip((gy, gx, gr), base)]
        self._corners = []
        for dy in (0, 1):
            for dx in (0, 1):
                for dr in (0, 1):
                    wgt = ((frac[0] if dy else 1 - frac[0]) * (frac[1] if dx else 1 - frac[1])
                           * (frac[2] if dr else 1 - frac[2])).ravel()
                    idx = np.ravel_multi_index((base[0] + dy, base[1] + dx, base[2] + dr),
                                               dims).ravel()
                    self._corners.append((idx, wgt))
        self.shape = (h, w)
        self.cells = None

    def splat(self, src: np.ndarray) -> None:
        """Accumulate (value * weight, ..., weight) per cell."""
        src = np.asarray(src, dtype=np.float64).reshape(self.shape[0] * self.shape[1], -1)
        nch = src.shape[1]
        size = int(np.prod(self.dims))
        cells = np.zeros((nch + 1, size))
        for idx, wgt in self._corners:
            for c in range(nch):
                cells[c] += np.bincount(idx, wgt * src[:, c], minlength=size)
            cells[nch] += np.bincount(idx, wgt, minlength=size)
        self.cells = cells.reshape(nch + 1, *self.dims)

    def blur(self) -> None:
        sig = (self.blur_sigma[0], self.blur_sigma[0], self.blur_sigma[1])
        for axis in range(3):
            self.cells = ndimage.gaussian_filter1d(self.cells, sig[axis], axis=axis + 1,
                                                   mode="constant", truncate=TRUNCATE)

    def slice(self, fallback: np.ndarray) -> tuple[np.ndarray, int]:
        """Read back normalized values; cells without weight keep ``fallback``."""
        nch = self.cells.shape[0] - 1
        flat = self.cells.reshape(nch + 1, -1)
        acc = np.zeros((nch + 1, self.shape[0] * self.shape[1]))
        for idx, wgt in self._corners:
            acc += flat[:, idx] * wgt
        fb = np.asarray(fallback, dtype=np.float64).reshape(-1, nch).T
        weight = acc[nch]
        ok = weight > 1e-12 * max(float(weight.max(initial=0.0)), 1e-300)
        out = np.where(ok, acc[:nch] / np.where(ok, weight, 1.0), fb)
        return out.T.reshape(*self.shape, nch), int(np.count_nonzero(~ok))


def joint_bilateral(src: np.ndarray, guide: np.ndarray, sigma_g: float = DEFAULT_SIGMA_G,
                    sigma_f: float = DEFAULT_SIGMA_F, cells_per_sigma: float = CELLS_PER_SIGMA,
                    max_cells: int = MAX_CELLS) -> np.ndarray:
    """Edge-preserving smoothing of ``src`` with range weights taken from ``guide``."""
    src = as_image(src)
    guide = as_image(guide)
    if guide.ndim != 2:
        raise ValueError("guide must be single-channel")
    if src.shape[:2] != guide.shape:
        raise ValueError(f"shape mismatch: {src.shape[:2]} vs {guide.shape}")
    grid = BilateralGrid(guide, sigma_g, sigma_f, cells_per_sigma, max_cells)
    grid.splat(src)
    grid.blur()
    out, fallbacks = grid.slice(src)
    if fallbacks:
        log.warning("joint_bilateral: %d pixels without grid weight kept their input", fallbacks)
    out = out.astype(src.dtype)
    return out[:, :, 0] if src.ndim == 2 else out


def add_details(filtered: np.ndarray, detail: np.ndarray, gain: float = 1.0) -> np.ndarray:
    """Add the single-channel detail layer to every channel and clamp to [0, 1]."""
    if filtered.shape[:2] != detail.shape[:2] or detail.ndim != 2:
        raise ValueError(f"shape mismatch: {filtered.shape} vs {detail.shape}")
    d = gain * detail
    return clamp_unit(filtered + (d[:, :, None] if filtered.ndim == 3 else d))
