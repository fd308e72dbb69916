"""Image pyramid, local mean/variance normalization and multi-scale patches."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

DEFAULT_WINDOW = 33
DEFAULT_EPSILON = 1e-4
MAX_LEVELS = 5


@dataclass(frozen=True)
class Decomposition:
    """Local normalization of one image.

    ``mean + texture * (std + epsilon)`` reconstructs the source and
    ``detail == texture * std`` is its high-frequency component.
    """

    mean: np.ndarray
    std: np.ndarray
    texture: np.ndarray
    detail: np.ndarray
    window: int
    epsilon: float


@dataclass(frozen=True)
class MultiScalePatch:
    patches: list[np.ndarray]
    bypass: np.ndarray
    center: tuple[int, int]


def compatible_size(height: int, width: int, n_l: int) -> tuple[int, int]:
    m = 1 << (n_l - 1)
    return height - height % m, width - width % m


def center_crop(img: np.ndarray, n_l: int) -> np.ndarray:
    """Crop ``img`` to the largest size divisible by ``2**(n_l-1)``."""
    h, w = img.shape[:2]
    ch, cw = compatible_size(h, w, n_l)
    top, left = (h - ch) // 2, (w - cw) // 2
    return img[top:top + ch, left:left + cw]


def build_pyramid(img: np.ndarray, n_l: int) -> list[np.ndarray]:
    """Return ``n_l`` levels, each the 2x2 block average of the previous one."""
    if not 1 <= n_l <= MAX_LEVELS:
        raise ValueError(f"n_l must be in 1..{MAX_LEVELS}, got {n_l}")
    h, w = img.shape[:2]
    m = 1 << (n_l - 1)
    if h % m or w % m:
        raise ValueError(
            f"{w}x{h} image is not divisible by {m} for {n_l} levels; "
            "crop it with center_crop() first")
    levels = [img]
    for _ in range(n_l - 1):
        cur = levels[-1]
        h, w = cur.shape[:2]
        blocks = cur.reshape(h // 2, 2, w // 2, 2, *cur.shape[2:])
        levels.append(blocks.mean(axis=(1, 3), dtype=np.float64).astype(cur.dtype))
    return levels


def box_mean(x: np.ndarray, window: int) -> np.ndarray:
    size = (window, window) + (1,) * (x.ndim - 2)
    return ndimage.uniform_filter(x, size=size, mode="mirror")


def decompose(img: np.ndarray, window: int = DEFAULT_WINDOW,
              epsilon: float = DEFAULT_EPSILON) -> Decomposition:
    """Split ``img`` into local mean, local std, normalized texture and detail.

    Moments are box averages over a ``window`` x ``window`` neighbourhood with
    reflected borders, computed in double precision.
    """
    if window < 3 or window % 2 == 0:
        raise ValueError(f"window must be odd and >= 3, got {window}")
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    h, w = img.shape[:2]
    if window > h or window > w:
        raise ValueError(f"window {window} larger than {w}x{h} image")
    src = np.asarray(img, dtype=np.float64)
    # centring on the global mean keeps E[x^2] - E[x]^2 free of cancellation
    offset = src.mean()
    x = src - offset
    m = box_mean(x, window)
    var = np.maximum(box_mean(x * x, window) - m * m, 0.0)
    std = np.sqrt(var)
    texture = (x - m) / (std + epsilon)
    mean = m + offset
    dtype = img.dtype if np.issubdtype(img.dtype, np.floating) else np.float64
    return Decomposition(
        mean=mean.astype(dtype), std=std.astype(dtype),
        texture=texture.astype(dtype), detail=(texture * std).astype(dtype),
        window=window, epsilon=epsilon)


def decompose_pyramid(img: np.ndarray, n_l: int, window: int = DEFAULT_WINDOW,
                      epsilon: float = DEFAULT_EPSILON) -> list[Decomposition]:
    """Decompose every pyramid level independently with the same window."""
    return [decompose(level, window, epsilon) for level in build_pyramid(img, n_l)]


def level_center(center: tuple[int, int], level: int) -> tuple[int, int]:
    return center[0] >> level, center[1] >> level


@dataclass
class PatchSource:
    """Reflect-padded texture pyramid for fast patch extraction.

    A patch of side ``roi`` centred at level pixel ``c`` covers rows
    ``c - roi//2 .. c - roi//2 + roi - 1`` of the level, i.e. rows
    ``c .. c + roi - 1`` of the padded array.  With ``bypass_all_levels``
    off only level 0 feeds the bypass; the other bypass inputs are zero.
    """

    levels: list[Decomposition]
    roi: int
    bypass_all_levels: bool = True
    padded: list[np.ndarray] = field(init=False, repr=False)

    def __post_init__(self):
        pad = self.roi // 2
        self.padded = [np.pad(d.texture, pad, mode="reflect") for d in self.levels]

    @classmethod
    def from_image(cls, img, n_l, roi, window=DEFAULT_WINDOW, epsilon=DEFAULT_EPSILON,
                   bypass_all_levels=True):
        return cls(decompose_pyramid(img, n_l, window, epsilon), roi, bypass_all_levels)

    @property
    def shape(self) -> tuple[int, int]:
        return self.levels[0].mean.shape[:2]

    def extract(self, centers: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
        """Batched extraction for an ``(N, 2)`` array of level-0 (row, col) centers.

        Returns per-level patch stacks of shape ``(N, roi, roi)`` and the
        bypass matrix ``(N, n_l)`` of Īmean samples at the mapped centers.
        """
        centers = np.asarray(centers, dtype=np.intp).reshape(-1, 2)
        roi = self.roi
        offs = np.arange(roi)
        patches, bypass = [], []
        for lvl, (dec, pad) in enumerate(zip(self.levels, self.padded)):
            rows = centers[:, 0] >> lvl
            cols = centers[:, 1] >> lvl
            ri = rows[:, None, None] + offs[None, :, None]
            ci = cols[:, None, None] + offs[None, None, :]
            patches.append(pad[ri, ci])
            if lvl == 0 or self.bypass_all_levels:
                bypass.append(dec.mean[rows, cols])
            else:
                bypass.append(np.zeros(len(rows), dtype=dec.mean.dtype))
        return patches, np.stack(bypass, axis=1)


def extract_patch(levels: list[Decomposition], center: tuple[int, int],
                  roi: int) -> MultiScalePatch:
    """Single multi-scale patch at level-0 pixel ``center`` = (row, col)."""
    src = PatchSource(levels, roi)
    patches, bypass = src.extract(np.array([center]))
    return MultiScalePatch([p[0] for p in patches], bypass[0], tuple(center))
