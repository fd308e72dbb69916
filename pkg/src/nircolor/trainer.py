"""Training on registered NIR/RGB pairs.

Each epoch draws a random subset of images and random pixel centres,
regresses the network output onto the mean-filtered RGB target at those
centres (mean squared error) and takes one momentum SGD step with a linearly
annealed learning rate.  All randomness derives from ``config.seed``: the
weights from the seed itself and epoch ``e`` from ``(seed, 0, e)``, so a
resumed run follows exactly the same sample sequence.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .image import as_image, load_image, read_size
from .preprocess import (DEFAULT_EPSILON, DEFAULT_WINDOW, PatchSource, box_mean,
                         center_crop, decompose_pyramid)
from .topology import Model, TopologySpec, build_model, load_model, save_model

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".pgm", ".ppm", ".pnm"}
DIVERGENCE_FACTOR = 10.0
DIVERGENCE_PATIENCE = 50


class DatasetError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, lr: float, loss: float, reason: str):
        super().__init__(f"training diverged at epoch {epoch} (lr={lr:g}, loss={loss:g}): {reason}")
        self.epoch, self.lr, self.loss = epoch, lr, loss


@dataclass
class TrainConfig:
    topology: str = "net-3-12-3-bp"
    n_f1: int = 16
    epochs: int = 10000
    lr: float = 0.01
    momentum: float = 0.9
    annealing: str = "linear"
    patches_per_epoch: int = 256
    images_per_epoch: int = 8
    seed: int = 0
    window: int = DEFAULT_WINDOW
    epsilon: float = DEFAULT_EPSILON
    init_std: str = "he"
    bypass_all_levels: bool = True
    sensor_bits: int | None = None
    nir_dir: str | None = None
    rgb_dir: str | None = None
    val_nir_dir: str | None = None
    val_rgb_dir: str | None = None
    val_every: int = 100
    val_patches: int = 1024
    checkpoint_dir: str | None = None
    checkpoint_every: int = 500
    keep_checkpoints: int = 3
    lr_candidates: tuple[float, ...] = (1e-4, 1e-3, 1e-2, 1e-1)
    mini_epochs: int = 100

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.annealing not in ("linear", "none"):
            raise ValueError(f"unknown annealing {self.annealing!r}")
        self.spec  # validates the topology name

    @property
    def spec(self) -> TopologySpec:
        return TopologySpec.parse(self.topology, n_f1=self.n_f1)

    def lr_at(self, epoch: int) -> float:
        if self.annealing == "none":
            return self.lr
        return self.lr * (1.0 - epoch / self.epochs)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


def _coerce(value: str, kind):
    text = value.strip()
    if kind in (bool, "bool"):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if kind in (int, "int"):
        return int(text)
    if kind in (float, "float"):
        return float(text)
    return text


def parse_config_text(text: str) -> dict[str, str]:
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def config_from_dict(values: dict, base: TrainConfig | None = None) -> TrainConfig:
    base = base or TrainConfig()
    hints = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    changes = {}
    for key, value in values.items():
        if key not in hints:
            raise ValueError(f"unknown config key {key!r}")
        if not isinstance(value, str):
            changes[key] = value
            continue
        hint = str(hints[key])
        if value.lower() in ("none", "") and "None" in hint:
            changes[key] = None
        elif key == "lr_candidates":
            changes[key] = tuple(float(v) for v in value.replace(",", " ").split())
        elif hint.startswith("int"):
            changes[key] = _coerce(value, int)
        elif hint.startswith("float"):
            changes[key] = _coerce(value, float)
        elif hint.startswith("bool"):
            changes[key] = _coerce(value, bool)
        else:
            changes[key] = value
    return base.replace(**changes)


def load_config(path: str | os.PathLike, base: TrainConfig | None = None) -> TrainConfig:
    return config_from_dict(parse_config_text(Path(path).read_text()), base)


# -- data ---------------------------------------------------------------------------

@dataclass
class PairFiles:
    stem: str
    nir: Path
    rgb: Path


def _list_images(directory: Path) -> dict[str, Path]:
    if not directory.is_dir():
        raise DatasetError(f"{directory}: not a directory")
    return {p.stem: p for p in sorted(directory.iterdir())
            if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES}


def scan_dataset(nir_dir, rgb_dir, check_sizes: bool = True) -> list[PairFiles]:
    """Pair files of both directories by identical stem, in lexicographic order."""
    nir = _list_images(Path(nir_dir))
    rgb = _list_images(Path(rgb_dir))
    common = sorted(nir.keys() & rgb.keys())
    orphans = sorted((nir.keys() ^ rgb.keys()))
    if not common:
        raise DatasetError(f"no paired files; orphans: {', '.join(orphans) or 'none'}")
    if orphans:
        log.warning("%d unpaired files ignored: %s", len(orphans), ", ".join(orphans))
    pairs = [PairFiles(s, nir[s], rgb[s]) for s in common]
    if check_sizes:
        for p in pairs:
            if read_size(p.nir) != read_size(p.rgb):
                raise DatasetError(f"{p.stem}: NIR {read_size(p.nir)} and RGB "
                                   f"{read_size(p.rgb)} sizes differ")
    return pairs


@dataclass
class TrainingPair:
    nir: np.ndarray
    rgb: np.ndarray
    target_mean: np.ndarray
    source: PatchSource = field(repr=False)
    name: str = ""


def prepare_pair(nir, rgb, spec: TopologySpec, window: int = DEFAULT_WINDOW,
                 epsilon: float = DEFAULT_EPSILON, bypass_all_levels: bool = True,
                 name: str = "") -> TrainingPair:
    nir, rgb = as_image(nir), as_image(rgb)
    if nir.ndim != 2 or rgb.ndim != 3:
        raise DatasetError(f"{name}: expected 1-channel NIR and 3-channel RGB")
    if nir.shape != rgb.shape[:2]:
        raise DatasetError(f"{name}: NIR {nir.shape} and RGB {rgb.shape[:2]} sizes differ")
    nir = center_crop(nir, spec.n_l)
    rgb = center_crop(rgb, spec.n_l)
    target = box_mean(rgb.astype(np.float64), window).astype(np.float32)
    levels = decompose_pyramid(nir, spec.n_l, window, epsilon)
    return TrainingPair(nir, rgb, target, PatchSource(levels, spec.roi, bypass_all_levels), name)


def load_pairs(files: list[PairFiles], config: TrainConfig) -> list[TrainingPair]:
    return [prepare_pair(load_image(f.nir, config.sensor_bits),
                         load_image(f.rgb, config.sensor_bits),
                         config.spec, config.window, config.epsilon,
                         config.bypass_all_levels, f.stem) for f in files]


def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, 0, epoch])


def sample_centers(pairs, n_images: int, n_patches: int, rng) -> tuple[np.ndarray, np.ndarray]:
    """Image indices and (row, col) centres for one batch."""
    subset = rng.choice(len(pairs), size=min(n_images, len(pairs)), replace=False)
    which = subset[rng.integers(0, len(subset), size=n_patches)]
    centers = np.empty((n_patches, 2), dtype=np.intp)
    for i in np.unique(which):
        sel = which == i
        h, w = pairs[i].nir.shape
        flat = rng.integers(0, h * w, size=int(sel.sum()))
        centers[sel, 0], centers[sel, 1] = np.divmod(flat, w)
    return which, centers


def gather(pairs, which, centers):
    """Patches, bypass values and targets for the given image/centre lists."""
    n_l = len(pairs[0].source.levels)
    roi = pairs[0].source.roi
    patches = [np.empty((len(which), roi, roi), dtype=np.float32) for _ in range(n_l)]
    bypass = np.empty((len(which), n_l), dtype=np.float32)
    targets = np.empty((len(which), 3), dtype=np.float32)
    for i in np.unique(which):
        sel = np.flatnonzero(which == i)
        p, b = pairs[i].source.extract(centers[sel])
        for lvl in range(n_l):
            patches[lvl][sel] = p[lvl]
        bypass[sel] = b
        targets[sel] = pairs[i].target_mean[centers[sel, 0], centers[sel, 1]]
    return patches, bypass, targets


def sample_batch(pairs, config: TrainConfig, epoch: int, rng=None):
    """Random multi-scale patch batch and mean-filtered RGB targets for one epoch."""
    if not pairs:
        raise DatasetError("no training pairs")
    rng = epoch_rng(config.seed, epoch) if rng is None else rng
    which, centers = sample_centers(pairs, config.images_per_epoch,
                                    config.patches_per_epoch, rng)
    return gather(pairs, which, centers)


def evaluate_mse(model: Model, batch) -> float:
    patches, bypass, targets = batch
    pred = model.forward(patches, bypass)
    return nn.mse_loss(pred.astype(np.float64), targets.astype(np.float64))[0]


# -- training loop ----------------------------------------------------------------------

@dataclass
class HistoryRow:
    epoch: int
    lr: float
    train_mse: float
    val_mse: float | None = None


def write_history(history: list[HistoryRow], path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "lr", "train_mse", "val_mse"])
        for row in history:
            w.writerow([row.epoch, repr(row.lr), repr(row.train_mse),
                        "" if row.val_mse is None else repr(row.val_mse)])


def read_history(path: str | os.PathLike) -> list[HistoryRow]:
    with open(path, newline="") as fh:
        return [HistoryRow(int(r["epoch"]), float(r["lr"]), float(r["train_mse"]),
                           float(r["val_mse"]) if r["val_mse"] else None)
                for r in csv.DictReader(fh)]


def _state_path(ckpt: Path) -> Path:
    return ckpt.with_suffix(".state.npz")


def save_checkpoint(model: Model, history: list[HistoryRow], epoch: int, path: Path) -> None:
    save_model(model, path)
    arrays = {}
    for i, p in enumerate(model.params()):
        arrays[f"vw{i}"] = p.vel_weights
        arrays[f"vb{i}"] = p.vel_bias
    hist = np.array([(r.epoch, r.lr, r.train_mse, np.nan if r.val_mse is None else r.val_mse)
                     for r in history], dtype=np.float64).reshape(-1, 4)
    np.savez(_state_path(path), epoch=epoch, history=hist, **arrays)


def load_checkpoint(path, spec: TopologySpec | None = None):
    """Return ``(model, history, next_epoch)`` from a checkpoint written by :func:`train`."""
    path = Path(path)
    model = load_model(path, spec)
    with np.load(_state_path(path)) as state:
        for i, p in enumerate(model.params()):
            p.vel_weights[...] = state[f"vw{i}"]
            p.vel_bias[...] = state[f"vb{i}"]
        history = [HistoryRow(int(e), float(lr), float(t), None if np.isnan(v) else float(v))
                   for e, lr, t, v in state["history"]]
        epoch = int(state["epoch"])
    return model, history, epoch + 1


class _Checkpointer:
    def __init__(self, config: TrainConfig):
        self.dir = Path(config.checkpoint_dir) if config.checkpoint_dir else None
        self.every = config.checkpoint_every
        self.keep = config.keep_checkpoints
        self.best = np.inf
        self.written: list[Path] = []
        if self.dir:
            self.dir.mkdir(parents=True, exist_ok=True)

    def __call__(self, model, history, epoch, final=False):
        if not self.dir:
            return
        row = history[-1]
        if row.val_mse is not None and row.val_mse < self.best:
            self.best = row.val_mse
            save_checkpoint(model, history, epoch, self.dir / "best.nirc")
        if not final and (epoch + 1) % self.every:
            return
        path = self.dir / f"ckpt-{epoch + 1:06d}.nirc"
        save_checkpoint(model, history, epoch, path)
        self.written.append(path)
        while len(self.written) > self.keep:
            old = self.written.pop(0)
            old.unlink(missing_ok=True)
            _state_path(old).unlink(missing_ok=True)


def train(config: TrainConfig, pairs: list[TrainingPair],
          val_pairs: list[TrainingPair] | None = None,
          model: Model | None = None, resume: str | os.PathLike | None = None,
          progress=None):
    """Minimize the patch MSE with annealed momentum SGD.

    Returns ``(model, history)``.  Raises :class:`TrainingDiverged` when the
    loss becomes non-finite or stays above ``10x`` the first loss for 50
    consecutive epochs.
    """
    if not pairs:
        raise DatasetError("no training pairs")
    spec = config.spec
    start, history = 0, []
    if resume is not None:
        model, history, start = load_checkpoint(resume, spec)
        if model.window != config.window:
            raise ValueError(f"checkpoint window {model.window} != config window {config.window}")
    elif model is None:
        model = build_model(spec, config.seed,
                            nn.HE if config.init_std == "he" else float(config.init_std),
                            config.window)
    params = model.params()
    val_batch = None
    if val_pairs:
        vrng = np.random.default_rng([config.seed, 1])
        which, centers = sample_centers(val_pairs, len(val_pairs), config.val_patches, vrng)
        val_batch = gather(val_pairs, which, centers)
    ckpt = _Checkpointer(config)
    first = history[0].train_mse if history else None
    strikes = 0
    for epoch in range(start, config.epochs):
        lr = config.lr_at(epoch)
        patches, bypass, targets = sample_batch(pairs, config, epoch)
        # overflow shows up as a non-finite loss, handled below
        with np.errstate(over="ignore", invalid="ignore"):
            pred, cache = model.forward(patches, bypass, keep=True)
            loss, dpred = nn.mse_loss(pred, targets)
        if not np.isfinite(loss):
            raise TrainingDiverged(epoch, lr, loss, "non-finite loss")
        if first is None:
            first = loss
        strikes = strikes + 1 if loss > DIVERGENCE_FACTOR * first else 0
        if strikes >= DIVERGENCE_PATIENCE:
            raise TrainingDiverged(epoch, lr, loss,
                                   f"loss above {DIVERGENCE_FACTOR:g}x initial for "
                                   f"{DIVERGENCE_PATIENCE} epochs")
        with np.errstate(over="ignore", invalid="ignore"):
            grads = model.backward(cache, dpred)
            nn.sgd_step(params, grads, lr, config.momentum)
        last = epoch == config.epochs - 1
        val = None
        if val_batch is not None and ((epoch + 1) % config.val_every == 0 or last):
            val = evaluate_mse(model, val_batch)
        history.append(HistoryRow(epoch, lr, loss, val))
        ckpt(model, history, epoch, final=last)
        if progress is not None:
            progress(history[-1])
    return model, history


def smoothed_loss(history: list[HistoryRow], tail: int = 10) -> float:
    return float(np.mean([r.train_mse for r in history[-tail:]]))


def lr_search(candidates, mini_epochs: int, config: TrainConfig,
              pairs: list[TrainingPair]) -> tuple[float, dict[float, float]]:
    """Short trainings from identical seeds; the lowest smoothed final loss wins.

    Returns the best rate and the score of every candidate (``inf`` for
    diverged runs).  Ties go to the smaller rate.
    """
    candidates = sorted(float(c) for c in candidates)
    if not candidates:
        raise ValueError("no learning-rate candidates")
    mini = config.replace(epochs=mini_epochs, checkpoint_dir=None)
    scores = {}
    for eta in candidates:
        try:
            _, hist = train(mini.replace(lr=eta), pairs)
            scores[eta] = smoothed_loss(hist)
        except TrainingDiverged as exc:
            log.info("lr %g diverged: %s", eta, exc)
            scores[eta] = np.inf
        if not np.isfinite(scores[eta]):
            scores[eta] = np.inf
    finite = [c for c in candidates if np.isfinite(scores[c])]
    if not finite:
        raise TrainingDiverged(mini_epochs, candidates[-1], np.inf, "all candidates diverged")
    best = min(finite, key=lambda c: (scores[c], c))
    return best, scores

