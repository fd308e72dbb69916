"""Multi-scale network family: specs, patch-size arithmetic, model and file format."""

from __future__ import annotations

import os
import re
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nn
from .preprocess import DEFAULT_WINDOW, MAX_LEVELS

MAGIC = b"NIRC"
VERSION = 1
HEADER_SIZE = 64
_NAME_RE = re.compile(r"^net-(\d+)-(\d+)-(\d+)(-bp)?$")


class ModelFormatError(ValueError):
    """Raised when a model file is corrupt or does not match the expected spec."""


@dataclass(frozen=True)
class TopologySpec:
    n_l: int
    n_c: int
    n_p: int
    bypass: bool = False
    n_k: int = 3
    n_f1: int = 16

    def __post_init__(self):
        if not 1 <= self.n_l <= MAX_LEVELS:
            raise ValueError(f"n_l must be in 1..{MAX_LEVELS}, got {self.n_l}")
        if self.n_p < 0 or self.n_c < self.n_p + 1:
            raise ValueError(f"need at least one conv layer per block (n_c={self.n_c}, n_p={self.n_p})")
        if self.n_c % (self.n_p + 1):
            raise ValueError(f"n_c={self.n_c} not divisible into {self.n_p + 1} equal blocks")
        if self.n_k < 1 or self.n_f1 < 1:
            raise ValueError("n_k and n_f1 must be positive")
        required_roi(self.n_c, self.n_p, self.n_k)

    @classmethod
    def parse(cls, name: str, n_f1: int = 16) -> "TopologySpec":
        m = _NAME_RE.match(name.strip())
        if not m:
            raise ValueError(f"cannot parse topology name {name!r} (expected net-L-C-P[-bp])")
        return cls(int(m[1]), int(m[2]), int(m[3]), bool(m[4]), n_f1=n_f1)

    @property
    def name(self) -> str:
        return f"net-{self.n_l}-{self.n_c}-{self.n_p}" + ("-bp" if self.bypass else "")

    @property
    def convs_per_block(self) -> int:
        return self.n_c // (self.n_p + 1)

    @property
    def roi(self) -> int:
        return required_roi(self.n_c, self.n_p, self.n_k)

    @property
    def gap(self) -> int:
        return coherence_gap(self)

    @property
    def branch_features(self) -> int:
        return self.n_f1 << self.n_p

    @property
    def fusion_inputs(self) -> int:
        return self.n_l * self.branch_features + (self.n_l if self.bypass else 0)


def required_roi(n_c: int, n_p: int, n_k: int = 3) -> int:
    """Smallest patch side that a branch reduces to exactly 1x1.

    Walks the layer chain backwards from a 1x1 output: each valid conv adds
    ``n_k - 1`` pixels, each 2x2 pool doubles the size.
    """
    if n_p < 0 or n_c < n_p + 1 or n_c % (n_p + 1):
        raise ValueError(f"invalid block structure n_c={n_c}, n_p={n_p}")
    per_block = n_c // (n_p + 1)
    size = 1
    for block in range(n_p + 1):
        size += per_block * (n_k - 1)
        if block < n_p:
            size *= 2
    if branch_output_size(size, n_c, n_p, n_k) != 1:
        raise ValueError(f"no integer patch size for n_c={n_c}, n_p={n_p}, n_k={n_k}")
    return size


def branch_output_size(size: int, n_c: int, n_p: int, n_k: int = 3) -> int | None:
    """Forward size recursion; ``None`` if a pool would see an odd size."""
    per_block = n_c // (n_p + 1)
    for block in range(n_p + 1):
        size -= per_block * (n_k - 1)
        if size < 1:
            return None
        if block < n_p:
            if size % 2:
                return None
            size //= 2
    return size


def coherence_gap(spec: TopologySpec) -> int:
    """Product of all layer strides in one branch (only the pools stride)."""
    strides = [2] * spec.n_p + [1] * spec.n_c
    return int(np.prod(strides, dtype=np.int64))


NAMED_TOPOLOGIES = [TopologySpec.parse(f"net-{l}-{c}-{p}{bp}")
           for l in (1, 3) for c, p in ((9, 2), (8, 3), (12, 3)) for bp in ("", "-bp")]


# -- model ------------------------------------------------------------------------

def branch_forward(x, layers, spec: TopologySpec, keep: bool = False, crop: bool = False):
    """Run one branch on ``(N, H, W)`` or ``(N, H, W, 1)`` input.

    With ``crop`` an odd size in front of a pool is trimmed by one trailing
    row/column (used by dense evaluation; patch evaluation never needs it).
    Returns the output map and, with ``keep``, the cache for backprop.
    """
    h = x[..., None] if x.ndim == 3 else x
    cache = []
    it = iter(layers)
    for block in range(spec.n_p + 1):
        for _ in range(spec.convs_per_block):
            p = next(it)
            z = nn.conv_forward(h, p)
            if keep:
                cache.append(("conv", h, z))
            h = nn.relu(z)
        if block < spec.n_p:
            if crop:
                h = h[:, :h.shape[1] & ~1, :h.shape[2] & ~1]
            h, idx = nn.maxpool2(h)
            if keep:
                cache.append(("pool", idx))
    return (h, cache) if keep else h


def branch_backward(dout, cache, layers):
    grads = []
    it = reversed(layers)
    d = dout
    for entry in reversed(cache):
        if entry[0] == "pool":
            d = nn.maxpool2_backward(d, entry[1])
        else:
            _, h, z = entry
            d = nn.relu_backward(d, z)
            d, gw, gb = nn.conv_backward(d, h, next(it))
            grads.append((gw, gb))
    grads.reverse()
    return grads


@dataclass
class Model:
    spec: TopologySpec
    branches: list[list[nn.LayerParams]]
    fusion: nn.LayerParams
    window: int = DEFAULT_WINDOW

    def __post_init__(self):
        check_shapes(self.spec, self.branches, self.fusion)

    @property
    def dtype(self):
        return self.fusion.weights.dtype

    def params(self) -> list[nn.LayerParams]:
        return [p for branch in self.branches for p in branch] + [self.fusion]

    def astype(self, dtype) -> "Model":
        return Model(self.spec, [[p.astype(dtype) for p in b] for b in self.branches],
                     self.fusion.astype(dtype), self.window)

    def copy(self) -> "Model":
        return self.astype(self.dtype)

    def fusion_input(self, features: list[np.ndarray], bypass: np.ndarray) -> np.ndarray:
        """Concatenate per-scale features, then bypass scalars in scale order."""
        parts = [f.reshape(f.shape[0], -1) for f in features]
        if self.spec.bypass:
            parts.append(np.asarray(bypass, dtype=self.dtype).reshape(len(parts[0]), -1))
        return np.concatenate(parts, axis=1)

    def forward(self, patches: list[np.ndarray], bypass: np.ndarray, keep: bool = False):
        """Predict RGB for a batch of multi-scale patches.

        ``patches[l]`` has shape ``(N, roi, roi)``; ``bypass`` is ``(N, n_l)``.
        """
        if len(patches) != self.spec.n_l:
            raise ValueError(f"expected {self.spec.n_l} scales, got {len(patches)}")
        feats, caches = [], []
        for x, layers in zip(patches, self.branches):
            out = branch_forward(np.asarray(x, dtype=self.dtype), layers, self.spec, keep=keep)
            if keep:
                out, cache = out
                caches.append(cache)
            if out.shape[1:3] != (1, 1):
                raise ValueError(f"patch side must be {self.spec.roi}")
            feats.append(out)
        z = self.fusion_input(feats, bypass)
        pred = nn.fc_forward(z, self.fusion)
        if keep:
            return pred, (caches, z)
        return pred

    def backward(self, cache, dpred):
        """Gradients for :meth:`params`, as ``(dweights, dbias)`` pairs."""
        caches, z = cache
        dz, gw, gb = nn.fc_backward(dpred, z, self.fusion)
        nf = self.spec.branch_features
        grads = []
        for i, (c, layers) in enumerate(zip(caches, self.branches)):
            d = dz[:, i * nf:(i + 1) * nf].reshape(-1, 1, 1, nf)
            grads.extend(branch_backward(d, c, layers))
        grads.append((gw, gb))
        return grads


def _branch_shapes(spec: TopologySpec):
    shapes, in_ch = [], 1
    for block in range(spec.n_p + 1):
        out_ch = spec.n_f1 << block
        for _ in range(spec.convs_per_block):
            shapes.append((out_ch, in_ch, spec.n_k, spec.n_k))
            in_ch = out_ch
    return shapes


def check_shapes(spec, branches, fusion) -> None:
    expected = _branch_shapes(spec)
    if len(branches) != spec.n_l:
        raise ValueError(f"{spec.name} needs {spec.n_l} branches, got {len(branches)}")
    for branch in branches:
        got = [p.weights.shape for p in branch]
        if got != expected:
            raise ValueError(f"branch layer shapes {got} do not match {spec.name}")
    if fusion.weights.shape != (3, spec.fusion_inputs):
        raise ValueError(f"fusion shape {fusion.weights.shape} != (3, {spec.fusion_inputs})")


def build_model(spec: TopologySpec, seed=0, init_std=nn.HE, window: int = DEFAULT_WINDOW,
                dtype=np.float32) -> Model:
    rng = np.random.default_rng(seed)
    branches = [[nn.gaussian_init("conv", s, rng, init_std, dtype) for s in _branch_shapes(spec)]
                for _ in range(spec.n_l)]
    fusion = nn.gaussian_init("fc", (3, spec.fusion_inputs), rng, init_std, dtype)
    return Model(spec, branches, fusion, window)


# -- serialization ---------------------------------------------------------------

def _header(spec: TopologySpec, window: int) -> bytes:
    head = MAGIC + struct.pack("<H7H", VERSION, spec.n_l, spec.n_c, spec.n_p,
                               int(spec.bypass), spec.n_k, spec.n_f1, window)
    return head.ljust(HEADER_SIZE, b"\0")


def save_model(model: Model, path: str | os.PathLike) -> None:
    chunks = [_header(model.spec, model.window)]
    for p in model.params():
        chunks.append(np.ascontiguousarray(p.weights, dtype="<f4").tobytes())
        chunks.append(np.ascontiguousarray(p.bias, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_model(path: str | os.PathLike, spec: TopologySpec | None = None) -> Model:
    """Read a model file; with ``spec`` the stored topology must match it."""
    raw = Path(path).read_bytes()
    if len(raw) < HEADER_SIZE:
        raise ModelFormatError(f"{path}: truncated header")
    if raw[:4] != MAGIC:
        raise ModelFormatError(f"{path}: bad magic {raw[:4]!r}")
    version, *fields = struct.unpack_from("<H7H", raw, 4)
    if version != VERSION:
        raise ModelFormatError(f"{path}: unsupported version {version}")
    n_l, n_c, n_p, bp, n_k, n_f1, window = fields
    try:
        stored = TopologySpec(n_l, n_c, n_p, bool(bp), n_k, n_f1)
    except ValueError as exc:
        raise ModelFormatError(f"{path}: invalid stored topology ({exc})") from exc
    if spec is not None and spec != stored:
        raise ModelFormatError(f"{path}: holds {stored} but {spec} was requested")
    shapes = [s for _ in range(n_l) for s in _branch_shapes(stored)]
    shapes.append((3, stored.fusion_inputs))
    need = sum(int(np.prod(s)) + s[0] for s in shapes) * 4
    body = raw[HEADER_SIZE:]
    if len(body) != need:
        raise ModelFormatError(f"{path}: expected {need} parameter bytes, found {len(body)}")
    flat = np.frombuffer(body, dtype="<f4").astype(np.float32)
    pos, layers = 0, []
    for s in shapes:
        n = int(np.prod(s))
        w = flat[pos:pos + n].reshape(s)
        b = flat[pos + n:pos + n + s[0]]
        pos += n + s[0]
        layers.append(nn.LayerParams("conv" if len(s) == 4 else "fc", w.copy(), b.copy()))
    per = len(_branch_shapes(stored))
    branches = [layers[i * per:(i + 1) * per] for i in range(n_l)]
    return Model(stored, branches, layers[-1], window)
