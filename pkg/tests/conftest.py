import numpy as np
import pytest


def numeric_grad(f, x, h=1e-4):
    """Central finite differences of scalar ``f()`` w.r.t. array ``x`` (modified in place)."""
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_error(analytic, numeric, floor=1e-8):
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def brute_joint_bilateral(src, guide, sigma_g, sigma_f):
    """Direct double sum with Gaussian spatial and range kernels over the whole image."""
    src = np.asarray(src, dtype=np.float64)
    guide = np.asarray(guide, dtype=np.float64)
    flat = src.reshape(guide.shape[0], guide.shape[1], -1)
    h, w = guide.shape
    yy, xx = np.mgrid[0:h, 0:w]
    out = np.empty_like(flat)
    for y in range(h):
        for x in range(w):
            wgt = np.exp(-((yy - y) ** 2 + (xx - x) ** 2) / (2 * sigma_g ** 2)
                         - (guide - guide[y, x]) ** 2 / (2 * sigma_f ** 2))
            out[y, x] = np.tensordot(wgt, flat, axes=([0, 1], [0, 1])) / wgt.sum()
    return out.reshape(src.shape)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
