"""Dense full-resolution colorization.

:func:`colorize_raw` evaluates the network on one extracted multi-scale patch
per pixel; it is slow and serves as the reference.  :func:`colorize_raw_fast`
runs each branch convolutionally over the whole (reflect-padded) texture
level.  Because the pools subsample by ``gap = 2**n_p`` in total, a single
dense pass only yields every ``gap``-th pixel; ``gap**2`` passes over shifted
crops are interleaved to fill the grid.  Neighbouring output pixels therefore
come from different passes, which is where the checkerboard in the raw
estimate originates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .image import as_image
from .postprocess import DEFAULT_SIGMA_F, DEFAULT_SIGMA_G, add_details, joint_bilateral
from .preprocess import DEFAULT_EPSILON, Decomposition, PatchSource, decompose_pyramid
from .topology import Model, TopologySpec, branch_forward


@dataclass
class RawEstimate:
    image: np.ndarray
    spec: TopologySpec
    gap: int
    levels: list[Decomposition] = field(default_factory=list, repr=False)
    passes: int = 0


def _prepare(model: Model, nir, window, epsilon) -> list[Decomposition]:
    nir = as_image(nir)
    if nir.ndim != 2:
        raise ValueError("NIR input must be single-channel")
    h, w = nir.shape
    m = 1 << (model.spec.n_l - 1)
    if h % m or w % m:
        raise ValueError(f"{w}x{h} input not divisible by {m}; crop it first")
    window = model.window if window is None else window
    return decompose_pyramid(nir, model.spec.n_l, window, epsilon)


def colorize_raw(model: Model, nir, window: int | None = None,
                 epsilon: float = DEFAULT_EPSILON, bypass_all_levels: bool = True,
                 batch: int = 512) -> RawEstimate:
    """Per-pixel sliding-window evaluation (reference path)."""
    levels = _prepare(model, nir, window, epsilon)
    src = PatchSource(levels, model.spec.roi, bypass_all_levels)
    h, w = src.shape
    rr, cc = np.mgrid[0:h, 0:w]
    centers = np.stack([rr.ravel(), cc.ravel()], axis=1)
    out = np.empty((h * w, 3), dtype=model.dtype)
    for start in range(0, len(centers), batch):
        patches, bypass = src.extract(centers[start:start + batch])
        out[start:start + batch] = model.forward(patches, bypass)
    return RawEstimate(out.reshape(h, w, 3), model.spec, model.spec.gap, levels,
                       passes=h * w)


def dense_branch(texture: np.ndarray, layers, spec: TopologySpec, dtype=np.float32):
    """Branch features at every pixel of one level via shift-and-stitch.

    Returns the ``(h, w, F)`` feature map and the number of passes run.
    """
    roi, s = spec.roi, spec.gap
    pad = np.pad(texture.astype(dtype), roi // 2, mode="reflect")
    h, w = texture.shape
    feats = np.empty((h, w, spec.branch_features), dtype=dtype)
    passes = 0
    for dy in range(s):
        ny = -(-(h - dy) // s)
        for dx in range(s):
            nx = -(-(w - dx) // s)
            if ny <= 0 or nx <= 0:
                continue
            crop = pad[dy:dy + roi + s * (ny - 1), dx:dx + roi + s * (nx - 1)]
            out = branch_forward(crop[None], layers, spec)
            feats[dy::s, dx::s] = out[0]
            passes += 1
    return feats, passes


def colorize_raw_fast(model: Model, nir, window: int | None = None,
                      epsilon: float = DEFAULT_EPSILON, bypass_all_levels: bool = True,
                      rows: int = 64) -> RawEstimate:
    """Interleaved dense evaluation; equals :func:`colorize_raw` up to rounding."""
    levels = _prepare(model, nir, window, epsilon)
    spec = model.spec
    feats, passes = [], 0
    for dec, layers in zip(levels, model.branches):
        f, n = dense_branch(dec.texture, layers, spec, model.dtype)
        feats.append(f)
        passes += n
    h, w = levels[0].mean.shape
    out = np.empty((h, w, 3), dtype=model.dtype)
    cols = np.arange(w)
    for r0 in range(0, h, rows):
        r = np.arange(r0, min(r0 + rows, h))
        parts, bypass = [], []
        for lvl, (f, dec) in enumerate(zip(feats, levels)):
            ri, ci = np.ix_(r >> lvl, cols >> lvl)
            parts.append(f[ri, ci].reshape(-1, f.shape[-1]))
            if lvl == 0 or bypass_all_levels:
                bypass.append(dec.mean[ri, ci].ravel())
            else:
                bypass.append(np.zeros(ri.size * ci.size, dtype=dec.mean.dtype))
        z = model.fusion_input(parts, np.stack(bypass, axis=1))
        out[r0:r0 + len(r)] = nn.fc_forward(z, model.fusion).reshape(len(r), w, 3)
    return RawEstimate(out, spec, spec.gap, levels, passes)


def colorize(model: Model, nir, sigma_g: float = DEFAULT_SIGMA_G,
             sigma_f: float = DEFAULT_SIGMA_F, gain: float = 1.0,
             window: int | None = None, epsilon: float = DEFAULT_EPSILON,
             bypass_all_levels: bool = True, naive: bool = False):
    """Full chain: raw estimate, joint bilateral filter guided by ``nir``, details.

    Returns ``(final, raw)``.
    """
    nir = as_image(nir)
    raw = (colorize_raw if naive else colorize_raw_fast)(model, nir, window, epsilon,
                                                          bypass_all_levels)
    filtered = joint_bilateral(raw.image, nir, sigma_g, sigma_f)
    final = add_details(filtered, raw.levels[0].detail, gain)
    return final, raw
