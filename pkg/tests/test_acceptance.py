"""Acceptance suite: one printed PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -v``; the verdict lines are
printed even when output capture is on.
"""

import csv
import time

import numpy as np
import pytest

from conftest import brute_joint_bilateral, numeric_grad, rel_error
from nircolor import nn
from nircolor.cli import main
from nircolor.inference import colorize_raw, colorize_raw_fast
from nircolor.metrics import rmse, scielab
from nircolor.postprocess import joint_bilateral
from nircolor.preprocess import decompose
from nircolor.synthetic import affine_pairs, write_pairs
from nircolor.topology import (NAMED_TOPOLOGIES, TopologySpec, branch_forward, build_model,
                               coherence_gap, required_roi, save_model)
from nircolor.trainer import TrainConfig, prepare_pair, train

TOY_WINDOW = 9
TOY_SIZE = 64


def report(capsys, number, ok, detail):
    with capsys.disabled():
        print(f"\n[criterion {number:2d}] {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, detail


# -- 1, 2: structural arithmetic -------------------------------------------------------

def test_criterion_01_topology_arithmetic(capsys):
    models = [build_model(spec, seed=0) for spec in NAMED_TOPOLOGIES]
    rng = np.random.default_rng(0)
    start = time.perf_counter()
    shapes = []
    for model in models:
        spec = model.spec
        patch = rng.standard_normal((1, spec.roi, spec.roi)).astype(np.float32)
        for branch in model.branches:
            shapes.append(branch_forward(patch, branch, spec).shape[1:3])
    elapsed = time.perf_counter() - start
    ok = required_roi(12, 3, 3) == 98 and all(s == (1, 1) for s in shapes) and elapsed < 1.0
    report(capsys, 1, ok, f"required_roi(12,3,3)={required_roi(12, 3, 3)}, "
                          f"{len(shapes)} branches of 12 topologies all 1x1: "
                          f"{all(s == (1, 1) for s in shapes)}, {elapsed:.2f}s")


def test_criterion_02_coherence_gap(capsys):
    gaps = {spec.name: coherence_gap(spec) for spec in NAMED_TOPOLOGIES}
    ok = all(g == 2 ** s.n_p for s, g in zip(NAMED_TOPOLOGIES, gaps.values()))
    ok &= all(gaps[s.name] == 8 for s in NAMED_TOPOLOGIES if s.n_p == 3)
    report(capsys, 2, ok, f"gaps {sorted(set(gaps.values()))}, 3-pool topologies -> 8")


# -- 3: gradients ---------------------------------------------------------------------

def _grad_instances():
    """Yield (label, analytic, numeric) triples in double precision."""
    for seed in range(6):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((2, 5, 5, 2))
        p = nn.gaussian_init("conv", (3, 2, 3, 3), rng, std=0.5, dtype=np.float64)
        proj = rng.standard_normal((2, 3, 3, 3))
        f = lambda: float(np.sum(nn.conv_forward(x, p) * proj))
        dx, dw, db = nn.conv_backward(proj, x, p)
        yield "conv", np.concatenate([dx.ravel(), dw.ravel(), db.ravel()]), np.concatenate(
            [numeric_grad(f, x).ravel(), numeric_grad(f, p.weights).ravel(),
             numeric_grad(f, p.bias).ravel()])
    for seed in range(4):
        rng = np.random.default_rng(10 + seed)
        x = rng.standard_normal((2, 4, 4, 3))
        x[np.abs(x) < 0.05] = 0.1
        proj = rng.standard_normal(x.shape)
        yield "relu", nn.relu_backward(proj, x), numeric_grad(
            lambda: float(np.sum(nn.relu(x) * proj)), x)
    for seed in range(4):
        rng = np.random.default_rng(20 + seed)
        x = rng.permutation(64).reshape(1, 4, 4, 4) * 0.1
        proj = rng.standard_normal((1, 2, 2, 4))
        _, idx = nn.maxpool2(x)
        yield "maxpool", nn.maxpool2_backward(proj, idx), numeric_grad(
            lambda: float(np.sum(nn.maxpool2(x)[0] * proj)), x, h=1e-3)
    for seed in range(4):
        rng = np.random.default_rng(30 + seed)
        x, t = rng.standard_normal((4, 6)), rng.standard_normal((4, 3))
        p = nn.gaussian_init("fc", (3, 6), rng, std=0.4, dtype=np.float64)
        f = lambda: nn.mse_loss(nn.fc_forward(x, p), t)[0]
        dx, dw, db = nn.fc_backward(nn.mse_loss(nn.fc_forward(x, p), t)[1], x, p)
        yield "fc+mse", np.concatenate([dx.ravel(), dw.ravel(), db.ravel()]), np.concatenate(
            [numeric_grad(f, x).ravel(), numeric_grad(f, p.weights).ravel(),
             numeric_grad(f, p.bias).ravel()])
    for seed in range(6):
        rng = np.random.default_rng(40 + seed)
        spec = TopologySpec(1 + seed % 2, 2, 1, bypass=bool(seed % 2), n_f1=2)
        model = build_model(spec, seed=seed, dtype=np.float64)
        patches = [rng.standard_normal((3, spec.roi, spec.roi)) for _ in range(spec.n_l)]
        bypass, target = rng.random((3, spec.n_l)), rng.random((3, 3))
        f = lambda: nn.mse_loss(model.forward(patches, bypass), target)[0]
        pred, cache = model.forward(patches, bypass, keep=True)
        grads = model.backward(cache, nn.mse_loss(pred, target)[1])
        analytic, numeric = [], []
        for p, (gw, gb) in zip(model.params(), grads):
            analytic += [gw.ravel(), gb.ravel()]
            numeric += [numeric_grad(f, p.weights, h=1e-6).ravel(),
                        numeric_grad(f, p.bias, h=1e-6).ravel()]
        yield "end-to-end", np.concatenate(analytic), np.concatenate(numeric)


def test_criterion_03_gradients(capsys):
    start = time.perf_counter()
    errors = [(label, rel_error(a, n)) for label, a, n in _grad_instances()]
    elapsed = time.perf_counter() - start
    worst = max(e for _, e in errors)
    ok = len(errors) >= 20 and worst < 1e-3 and elapsed < 30
    report(capsys, 3, ok, f"{len(errors)} instances (conv/relu/maxpool/fc+mse/end-to-end), "
                          f"worst relative error {worst:.2e}, {elapsed:.1f}s")


# -- 4: decomposition -----------------------------------------------------------------

def test_criterion_04_reconstruction(capsys):
    rng = np.random.default_rng(4)
    yy, xx = np.mgrid[0:48, 0:48]
    images = [rng.random((48, 48)) for _ in range(10)]
    images += [np.full((48, 48), 0.6), (xx >= 24) * 0.8 + 0.1, ((yy + xx) % 2).astype(float)]
    start = time.perf_counter()
    worst = 0.0
    for i, img in enumerate(images):
        for window in (3, 9, 33):
            d = decompose(img.astype(np.float32), window)
            worst = max(worst, float(np.abs(d.mean.astype(np.float64) + d.texture.astype(
                np.float64) * (d.std.astype(np.float64) + d.epsilon) - img.astype(
                np.float32)).max()))
    elapsed = time.perf_counter() - start
    ok = worst < 1e-6 and elapsed < 5
    report(capsys, 4, ok, f"13 images x 3 windows, worst reconstruction error {worst:.2e}, "
                          f"{elapsed:.2f}s")


# -- 5: bilateral grid ----------------------------------------------------------------

def test_criterion_05_bilateral_fidelity(capsys):
    rng = np.random.default_rng(5)
    src, guide = rng.random((32, 32, 3)), rng.random((32, 32))
    start = time.perf_counter()
    worst = {}
    for sg in (2, 5, 9):
        for sf in (0.01, 0.05, 0.2):
            diff = joint_bilateral(src, guide, sg, sf) - brute_joint_bilateral(src, guide, sg, sf)
            worst[(sg, sf)] = float(np.abs(diff).max())
    elapsed = time.perf_counter() - start
    top = max(worst, key=worst.get)
    ok = max(worst.values()) < 2e-2 and elapsed < 60
    report(capsys, 5, ok, f"max abs diff {worst[top]:.4f} at (sg, sf)={top} over 9 settings, "
                          f"{elapsed:.1f}s")


# -- 6: inference paths ---------------------------------------------------------------

def test_criterion_06_inference_equivalence(capsys):
    model = build_model(TopologySpec.parse("net-1-9-2"), seed=6)
    nir = np.random.default_rng(6).random((64, 64)).astype(np.float32)
    start = time.perf_counter()
    diff = float(np.abs(colorize_raw_fast(model, nir).image - colorize_raw(model, nir).image).max())
    elapsed = time.perf_counter() - start
    ok = diff < 1e-5 and elapsed < 60
    report(capsys, 6, ok, f"net-1-9-2 on 64x64: max abs diff {diff:.2e}, {elapsed:.1f}s")


# -- 7, 10: toy training and sweep ---------------------------------------------------

def toy_config(**kw):
    base = dict(topology="net-1-9-2-bp", epochs=300, lr=0.03, patches_per_epoch=32,
                images_per_epoch=8, window=TOY_WINDOW, seed=0, val_every=100)
    return TrainConfig(**{**base, **kw})


def toy_set(n, seed, spec):
    return [prepare_pair(nir, rgb, spec, TOY_WINDOW)
            for nir, rgb in affine_pairs(n, TOY_SIZE, seed=seed)]


@pytest.fixture(scope="module")
def toy_model():
    cfg = toy_config()
    pairs = toy_set(50, 1, cfg.spec)
    start = time.perf_counter()
    model, history = train(cfg, pairs)
    elapsed = time.perf_counter() - start
    return cfg, pairs, model, history, elapsed


def test_criterion_07_toy_training(capsys, toy_model):
    cfg, pairs, model, history, first_time = toy_model
    start = time.perf_counter()
    again, history2 = train(cfg, pairs)
    elapsed = first_time + time.perf_counter() - start
    same = [r.train_mse for r in history] == [r.train_mse for r in history2] and all(
        np.array_equal(p.weights, q.weights) and np.array_equal(p.bias, q.bias)
        for p, q in zip(model.params(), again.params()))
    held = affine_pairs(5, TOY_SIZE, seed=2)
    errors = [rmse(colorize_raw_fast(model, nir).image, rgb) for nir, rgb in held]
    ok = max(errors) < 0.05 and same and cfg.epochs <= 2000 and elapsed < 600
    report(capsys, 7, ok, f"net-1-9-2-bp, {cfg.epochs} epochs: held-out raw RMSE mean "
                          f"{np.mean(errors):.4f} max {max(errors):.4f}; two runs bitwise "
                          f"identical: {same}; {elapsed:.0f}s for both runs")


def test_criterion_10_sweep(capsys, toy_model, tmp_path):
    _, _, model, _, _ = toy_model
    save_model(model, tmp_path / "toy.nirc")
    write_pairs(affine_pairs(10, TOY_SIZE, seed=5), tmp_path / "nir", tmp_path / "rgb")
    start = time.perf_counter()
    code = main(["sweep", "--model", str(tmp_path / "toy.nirc"),
                 "--nir-dir", str(tmp_path / "nir"), "--rgb-dir", str(tmp_path / "rgb"),
                 "--sigma-g", "5,17,65", "--sigma-f", "0.0003,0.005,0.08",
                 "--output", str(tmp_path / "sweep.csv")])
    elapsed = time.perf_counter() - start
    with open(tmp_path / "sweep.csv") as fh:
        rows = list(csv.DictReader(fh))
    score = {(float(r["sigma_g"]), float(r["sigma_f"])): float(r["scielab_mean"]) for r in rows}
    pairs = [(score[(65.0, sf)], score[(17.0, sf)]) for sf in (0.0003, 0.005, 0.08)]
    worse = all(a > b for a, b in pairs)
    ok = code == 0 and len(rows) == 9 and worse and elapsed < 600
    detail = ", ".join(f"sf={sf:g}: {a:.3f} vs {b:.3f}"
                       for sf, (a, b) in zip((0.0003, 0.005, 0.08), pairs))
    report(capsys, 10, ok, f"{len(rows)}-row CSV; S-CIELAB sg=65 vs sg=17 ({detail}); "
                           f"{elapsed:.0f}s")


# -- 8: bypass trend ------------------------------------------------------------------

def test_criterion_08_bypass_trend(capsys):
    start = time.perf_counter()
    results = []
    for seed in (0, 1, 2):
        mse = {}
        for name in ("net-1-9-2-bp", "net-1-9-2"):
            cfg = toy_config(topology=name, epochs=200, lr=0.01, seed=seed, val_every=200,
                             val_patches=1024)
            pairs = toy_set(30, 100 + seed, cfg.spec)
            val = toy_set(5, 200 + seed, cfg.spec)
            _, history = train(cfg, pairs, val)
            mse[name] = history[-1].val_mse
        results.append((seed, mse["net-1-9-2-bp"], mse["net-1-9-2"]))
    elapsed = time.perf_counter() - start
    ok = all(bp <= plain for _, bp, plain in results) and elapsed < 900
    detail = "; ".join(f"seed {s}: bp {bp:.5f} vs no-bp {plain:.5f}" for s, bp, plain in results)
    report(capsys, 8, ok, f"held-out MSE after 200 epochs, {detail}; {elapsed:.0f}s")


# -- 9: metrics -----------------------------------------------------------------------

def test_criterion_09_metric_sanity(capsys):
    from test_metrics import lab_oracle, uniform

    start = time.perf_counter()
    rng = np.random.default_rng(9)
    img = rng.random((32, 32, 3))
    zero = rmse(img, img) == 0 and scielab(img, img) == 0
    deviations = []
    for _ in range(5):
        c1, c2 = rng.random(3), rng.random(3)
        expect = float(np.linalg.norm(lab_oracle(c1) - lab_oracle(c2)))
        deviations.append(abs(scielab(uniform(c1), uniform(c2)) - expect))
    bw = scielab(uniform([0, 0, 0], 32), uniform([1, 1, 1], 32))
    elapsed = time.perf_counter() - start
    ok = zero and max(deviations) < 0.1 and abs(bw - 100) < 0.5 and elapsed < 5
    report(capsys, 9, ok, f"identical -> 0: {zero}; uniform-field deviation from CIELAB "
                          f"{max(deviations):.2e}; black vs white {bw:.3f}; {elapsed:.2f}s")
