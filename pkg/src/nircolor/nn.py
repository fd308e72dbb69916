"""Small set of trainable layers with hand-written backpropagation.

Activations are batched and channel-last, ``(N, H, W, C)``, matching the
interleaved layout of images.  Convolution weights are stored as
``(out_ch, in_ch, k, k)`` and applied as valid cross-correlation.  Each
forward function is pure; the matching backward function takes the forward
input again and returns input and parameter gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

HE = "he"
FIXED_STD = 0.01


@dataclass
class LayerParams:
    kind: str  # "conv" or "fc"
    weights: np.ndarray
    bias: np.ndarray
    vel_weights: np.ndarray = field(default=None, repr=False)
    vel_bias: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in ("conv", "fc"):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv" and self.weights.ndim != 4:
            raise ValueError("conv weights must be (out_ch, in_ch, k, k)")
        if self.kind == "fc" and self.weights.ndim != 2:
            raise ValueError("fc weights must be (out, in)")
        if self.bias.shape != (self.weights.shape[0],):
            raise ValueError("bias length must equal the output dimension")
        if self.vel_weights is None:
            self.vel_weights = np.zeros_like(self.weights)
        if self.vel_bias is None:
            self.vel_bias = np.zeros_like(self.bias)

    @property
    def kernel(self) -> int:
        return self.weights.shape[-1]

    def astype(self, dtype) -> "LayerParams":
        return LayerParams(self.kind, self.weights.astype(dtype), self.bias.astype(dtype),
                           self.vel_weights.astype(dtype), self.vel_bias.astype(dtype))


def gaussian_init(kind: str, shape: tuple[int, ...], rng, std: float | str = HE,
                  dtype=np.float32) -> LayerParams:
    """Gaussian weights, zero biases.

    ``std="he"`` draws from N(0, 2/fan_in); a number gives a fixed deviation.
    ``rng`` may be a seed or a ``numpy.random.Generator``.
    """
    rng = np.random.default_rng(rng)
    fan_in = int(np.prod(shape[1:]))
    scale = np.sqrt(2.0 / fan_in) if std == HE else float(std)
    weights = (rng.standard_normal(shape) * scale).astype(dtype)
    return LayerParams(kind, weights, np.zeros(shape[0], dtype=dtype))


# -- convolution ---------------------------------------------------------------

def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """Patch matrix with columns ordered (kernel row, kernel col, channel)."""
    n, h, w, c = x.shape
    ho, wo = h - k + 1, w - k + 1
    cols = np.concatenate([x[:, a:a + ho, b:b + wo, :] for a in range(k) for b in range(k)],
                          axis=-1)
    return cols.reshape(n * ho * wo, k * k * c)


def _weight_matrix(p: LayerParams) -> np.ndarray:
    out_ch = p.weights.shape[0]
    return p.weights.transpose(0, 2, 3, 1).reshape(out_ch, -1)


def conv_forward(x: np.ndarray, p: LayerParams) -> np.ndarray:
    n, h, w, c = x.shape
    out_ch, in_ch, k, _ = p.weights.shape
    if c != in_ch:
        raise ValueError(f"expected {in_ch} input channels, got {c}")
    if h < k or w < k:
        raise ValueError(f"input {h}x{w} smaller than kernel {k}x{k}")
    ho, wo = h - k + 1, w - k + 1
    out = _im2col(x, k) @ _weight_matrix(p).T
    out += p.bias
    return out.reshape(n, ho, wo, out_ch)


def conv_backward(dout: np.ndarray, x: np.ndarray, p: LayerParams):
    """Return ``(dx, dweights, dbias)`` for :func:`conv_forward`."""
    n, h, w, c = x.shape
    out_ch, in_ch, k, _ = p.weights.shape
    ho, wo = h - k + 1, w - k + 1
    d2 = dout.reshape(-1, out_ch)
    dweights = (d2.T @ _im2col(x, k)).reshape(out_ch, k, k, in_ch).transpose(0, 3, 1, 2)
    dbias = d2.sum(axis=0)
    dcols = (d2 @ _weight_matrix(p)).reshape(n, ho, wo, k * k, c)
    dx = np.zeros_like(x)
    for a in range(k):
        for b in range(k):
            dx[:, a:a + ho, b:b + wo, :] += dcols[:, :, :, a * k + b, :]
    return dx, np.ascontiguousarray(dweights), dbias


# -- activation / pooling --------------------------------------------------------

def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(dout: np.ndarray, x: np.ndarray) -> np.ndarray:
    return dout * (x > 0)


def maxpool2(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Non-overlapping 2x2 max pool with stride 2.

    Returns the pooled tensor and the winning position (0..3, row-major
    within the window) of every output; ties go to the first position.
    """
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2 needs even spatial dimensions, got {h}x{w}")
    win = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4)
    win = win.reshape(n, h // 2, w // 2, c, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, idx


def maxpool2_backward(dout: np.ndarray, idx: np.ndarray) -> np.ndarray:
    n, hp, wp, c = dout.shape
    win = np.zeros((n, hp, wp, c, 4), dtype=dout.dtype)
    np.put_along_axis(win, idx[..., None], dout[..., None], axis=-1)
    win = win.reshape(n, hp, wp, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
    return win.reshape(n, hp * 2, wp * 2, c)


# -- dense layer and loss --------------------------------------------------------

def fc_forward(x: np.ndarray, p: LayerParams) -> np.ndarray:
    if x.shape[-1] != p.weights.shape[1]:
        raise ValueError(f"expected input length {p.weights.shape[1]}, got {x.shape[-1]}")
    return x @ p.weights.T + p.bias


def fc_backward(dout: np.ndarray, x: np.ndarray, p: LayerParams):
    return dout @ p.weights, dout.T @ x, dout.sum(axis=0)


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean over samples of the squared Euclidean error, and its gradient."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred - target
    d = diff.shape[0] if diff.ndim > 1 else 1
    loss = float(np.sum(diff.astype(np.float64) ** 2) / d)
    return loss, (2.0 / d) * diff


def sgd_step(params: list[LayerParams], grads: list[tuple[np.ndarray, np.ndarray]],
             lr: float, momentum: float) -> None:
    """In-place momentum SGD: ``v = momentum*v - lr*g``, ``theta += v``."""
    if len(params) != len(grads):
        raise ValueError("one gradient pair per layer required")
    for p, (gw, gb) in zip(params, grads):
        if gw.shape != p.weights.shape or gb.shape != p.bias.shape:
            raise ValueError("gradient shape does not match parameters")
        p.vel_weights *= momentum
        p.vel_weights -= lr * gw
        p.weights += p.vel_weights
        p.vel_bias *= momentum
        p.vel_bias -= lr * gb
        p.bias += p.vel_bias
