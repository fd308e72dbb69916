"""RMSE and S-CIELAB image quality measures.

S-CIELAB constants (Zhang & Wandell, "A spatial extension of CIELAB for
digital color image reproduction", SID Digest 1996):

opponent transform from CIE XYZ::

    O1 (luminance)   =  0.279 X + 0.720 Y - 0.107 Z
    O2 (red-green)   = -0.449 X + 0.290 Y - 0.077 Z
    O3 (blue-yellow) =  0.086 X - 0.590 Y + 0.501 Z

spatial kernels, ``sum_i w_i * E_i`` with ``E_i ~ exp(-(x^2 + y^2) / s_i^2)``
normalized to unit sum and ``s_i`` in degrees of visual angle:

    ============  ===========================  =========================
    channel       weights w_i                  spreads s_i (deg)
    ============  ===========================  =========================
    luminance     0.921, 0.105, -0.108         0.0283, 0.133, 4.336
    red-green     0.531, 0.330                 0.0392, 0.494
    blue-yellow   0.488, 0.371                 0.0536, 0.386
    ============  ===========================  =========================

The weights of each channel are rescaled to sum to one so that uniform
fields pass unchanged.  Input RGB is treated as sRGB (D65).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from skimage.color import rgb2xyz, xyz2lab

DEFAULT_SPD = 23.0

OPPONENT = np.array([[0.279, 0.720, -0.107],
                     [-0.449, 0.290, -0.077],
                     [0.086, -0.590, 0.501]])

KERNELS = (
    ((0.921, 0.105, -0.108), (0.0283, 0.133, 4.336)),
    ((0.531, 0.330), (0.0392, 0.494)),
    ((0.488, 0.371), (0.0536, 0.386)),
)


def normalized_weights(weights) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    return w / w.sum()


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def rmse(a: np.ndarray, b: np.ndarray) -> float:
    """Root mean square difference over all samples (channels pooled)."""
    a, b = _check_pair(a, b)
    return float(np.sqrt(np.mean((a - b) ** 2)))


def spatial_filter(channel: np.ndarray, weights, spreads, spd: float) -> np.ndarray:
    """Sum-of-Gaussians filtering of one opponent channel.

    A spread ``s`` degrees becomes a Gaussian of standard deviation
    ``s * spd / sqrt(2)`` pixels.
    """
    out = np.zeros_like(channel)
    for w, s in zip(normalized_weights(weights), spreads):
        sigma = s * spd / np.sqrt(2.0)
        out += w * ndimage.gaussian_filter(channel, sigma, mode="reflect")
    return out


def scielab_lab(rgb: np.ndarray, spd: float = DEFAULT_SPD) -> np.ndarray:
    """Spatially filtered CIELAB representation of an sRGB image."""
    if spd <= 0:
        raise ValueError("samples_per_degree must be positive")
    rgb = np.clip(np.asarray(rgb, dtype=np.float64), 0.0, 1.0)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError("S-CIELAB needs an RGB image")
    opp = rgb2xyz(rgb) @ OPPONENT.T
    filt = np.stack([spatial_filter(opp[..., i], w, s, spd)
                     for i, (w, s) in enumerate(KERNELS)], axis=-1)
    xyz = filt @ np.linalg.inv(OPPONENT).T
    return xyz2lab(xyz, illuminant="D65", observer="2")


def scielab_map(a: np.ndarray, b: np.ndarray, spd: float = DEFAULT_SPD) -> np.ndarray:
    a, b = _check_pair(a, b)
    return np.sqrt(np.sum((scielab_lab(a, spd) - scielab_lab(b, spd)) ** 2, axis=-1))


def scielab(a: np.ndarray, b: np.ndarray, spd: float = DEFAULT_SPD) -> float:
    """Mean per-pixel S-CIELAB Delta E*ab between two RGB images."""
    return float(scielab_map(a, b, spd).mean())


@dataclass
class MetricReport:
    names: list[str]
    scores: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.scores))

    @property
    def std(self) -> float:
        # population deviation over the evaluated set
        return float(np.std(self.scores))

    def rows(self):
        yield from zip(self.names, self.scores)
