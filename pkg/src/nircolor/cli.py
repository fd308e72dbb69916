"""Command-line front end: ``nircolor <subcommand> ...``.

Exit status is 0 on success, 1 for usage errors, 2 for I/O or format
problems and 3 for numeric failures.  Failures print a single line
``nircolor: error=<kind> message=<text>`` on stderr.  Every subcommand that
writes files also writes ``<output>.manifest.txt`` with the resolved
arguments, the exact argv, tool version and wall-clock time.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import shlex
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .image import ImageFormatError, load_image, save_image
from .inference import colorize_raw, colorize_raw_fast
from .metrics import DEFAULT_SPD, MetricReport, rmse, scielab
from .postprocess import DEFAULT_SIGMA_F, DEFAULT_SIGMA_G, add_details, joint_bilateral
from .preprocess import DEFAULT_EPSILON, DEFAULT_WINDOW, center_crop, decompose_pyramid
from .topology import (ModelFormatError, TopologySpec, coherence_gap, load_model, required_roi,
                       save_model)
from .trainer import (IMAGE_SUFFIXES, DatasetError, TrainConfig, TrainingDiverged,
                      config_from_dict, load_config, load_pairs, lr_search, parse_config_text,
                      scan_dataset, train, write_history)

log = logging.getLogger("nircolor")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3
TEXTURE_SCALE = 0.1
DETAIL_SCALE = 0.5


class UsageError(Exception):
    pass


class NumericError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# -- helpers ------------------------------------------------------------------------

def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a list of numbers: {text!r}") from None


def _images(path: Path) -> list[Path]:
    """A single image file or every image of a directory, sorted by name."""
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise FileNotFoundError(f"{path}: no images")
        return files
    if not path.exists():
        raise FileNotFoundError(f"{path}: no such file")
    return [path]


def _output_for(src: Path, out: Path, many: bool) -> Path:
    return out / f"{src.stem}.png" if many else out


def _check_finite(img: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(img)):
        raise NumericError(f"{what} contains non-finite values")


def write_manifest(path: Path, args: argparse.Namespace, argv: list[str], started: float,
                   extra: dict | None = None) -> Path:
    target = Path(f"{path}.manifest.txt")
    lines = [f"subcommand = {args.command}",
             f"tool_version = {__version__}",
             f"argv = {shlex.join(argv)}",
             f"started_utc = {datetime.fromtimestamp(started, timezone.utc).isoformat()}",
             f"wall_clock_s = {time.time() - started:.3f}"]
    for key, value in sorted(vars(args).items()):
        if key in ("command", "func"):
            continue
        lines.append(f"arg.{key} = {value}")
    for key, value in (extra or {}).items():
        lines.append(f"{key} = {value}")
    target.write_text("\n".join(lines) + "\n")
    return target


def read_manifest(path: str | os.PathLike) -> dict[str, str]:
    return parse_config_text(Path(path).read_text())


def _prepare_nir(path: Path, n_l: int, sensor_bits) -> np.ndarray:
    nir = load_image(path, sensor_bits)
    if nir.ndim != 2:
        raise ImageFormatError(f"{path}: NIR input must be single-channel")
    cropped = center_crop(nir, n_l)
    if cropped.shape != nir.shape:
        log.info("%s: cropped %s to %s", path.name, nir.shape, cropped.shape)
    return cropped


def _pair_by_stem(pred: Path, target: Path) -> list[tuple[str, Path, Path]]:
    if pred.is_dir() != target.is_dir():
        raise UsageError("--pred and --target must both be files or both be directories")
    if not pred.is_dir():
        return [(pred.stem, _images(pred)[0], _images(target)[0])]
    p = {f.stem: f for f in _images(pred)}
    t = {f.stem: f for f in _images(target)}
    common = sorted(p.keys() & t.keys())
    if not common:
        raise FileNotFoundError("no prediction/target pairs with matching names")
    missing = sorted(p.keys() ^ t.keys())
    if missing:
        log.warning("unpaired files ignored: %s", ", ".join(missing))
    return [(s, p[s], t[s]) for s in common]


def _score(metric: str, a: np.ndarray, b: np.ndarray, spd: float) -> float:
    if a.shape != b.shape:
        # predictions may be centre-cropped to a pyramid-compatible size
        b = _crop_to(b, a.shape)
    return rmse(a, b) if metric == "rmse" else scielab(a, b, spd)


def _crop_to(img: np.ndarray, shape) -> np.ndarray:
    h, w = shape[:2]
    top, left = (img.shape[0] - h) // 2, (img.shape[1] - w) // 2
    if top < 0 or left < 0:
        raise ImageFormatError(f"cannot match sizes {img.shape[:2]} and {(h, w)}")
    return img[top:top + h, left:left + w]


# -- subcommands --------------------------------------------------------------------

def cmd_roi(args, out):
    if args.topology:
        spec = TopologySpec.parse(args.topology)
        print(spec.roi, file=out)
    else:
        print(required_roi(args.nc, args.np, args.nk), file=out)


def cmd_gap(args, out):
    if args.topology:
        print(coherence_gap(TopologySpec.parse(args.topology)), file=out)
    else:
        if args.np < 0:
            raise UsageError("--np must be non-negative")
        print(1 << args.np, file=out)


def cmd_decompose(args, out):
    img = load_image(args.input, args.sensor_bits)
    if img.ndim != 2:
        raise ImageFormatError(f"{args.input}: decompose expects a single-channel image")
    img = center_crop(img, args.levels)
    prefix = Path(args.output)
    written = []
    arrays = {}
    for lvl, dec in enumerate(decompose_pyramid(img, args.levels, args.window, args.epsilon)):
        tag = "" if args.levels == 1 else f".l{lvl}"
        views = {"mean": dec.mean, "std": dec.std,
                 "tex": 0.5 + TEXTURE_SCALE * dec.texture,
                 "det": 0.5 + DETAIL_SCALE * dec.detail}
        for name, view in views.items():
            path = Path(f"{prefix}{tag}.{name}.png")
            save_image(view, path, args.bits)
            written.append(path)
        for name in ("mean", "std", "texture", "detail"):
            arrays[f"{name}{tag}"] = getattr(dec, name)
    np.savez(f"{prefix}.npz", **arrays)
    sidecar = Path(f"{prefix}.decompose.txt")
    sidecar.write_text(
        f"window = {args.window}\nepsilon = {args.epsilon:g}\nlevels = {args.levels}\n"
        f"tex_png = 0.5 + {TEXTURE_SCALE:g} * texture\n"
        f"det_png = 0.5 + {DETAIL_SCALE:g} * detail\n"
        "mean_png = mean\nstd_png = std\nexact_values = npz\n")
    for path in written:
        print(path, file=out)
    return prefix


def _train_config(args) -> TrainConfig:
    cfg = load_config(args.config) if args.config else TrainConfig()
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip().replace("-", "_")] = value.strip()
    for key in ("topology", "epochs", "lr", "seed", "nir_dir", "rgb_dir", "val_nir_dir",
                "val_rgb_dir", "checkpoint_dir", "window", "patches_per_epoch"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    try:
        return config_from_dict(overrides, cfg)
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from None


def _load_sets(cfg: TrainConfig):
    if not cfg.nir_dir or not cfg.rgb_dir:
        raise UsageError("nir_dir and rgb_dir must be set (config or flags)")
    pairs = load_pairs(scan_dataset(cfg.nir_dir, cfg.rgb_dir), cfg)
    val = None
    if cfg.val_nir_dir and cfg.val_rgb_dir:
        val = load_pairs(scan_dataset(cfg.val_nir_dir, cfg.val_rgb_dir), cfg)
    return pairs, val


def _config_lines(cfg: TrainConfig) -> dict:
    return {f"config.{k}": v for k, v in vars(cfg).items()}


def cmd_train(args, out):
    cfg = _train_config(args)
    pairs, val = _load_sets(cfg)
    every = max(1, cfg.epochs // 20)

    def progress(row):
        if row.epoch % every == 0 or row.val_mse is not None:
            log.info("epoch %d lr %.3g train %.6g val %s", row.epoch, row.lr, row.train_mse,
                     "-" if row.val_mse is None else f"{row.val_mse:.6g}")

    model, history = train(cfg, pairs, val, resume=args.resume, progress=progress)
    save_model(model, args.output)
    write_history(history, f"{args.output}.history.csv")
    last = history[-1]
    print(f"model={args.output} epochs={len(history)} train_mse={last.train_mse:.6g}", file=out)
    return Path(args.output), _config_lines(cfg)


def cmd_lr_search(args, out):
    cfg = _train_config(args)
    pairs, _ = _load_sets(cfg)
    candidates = args.candidates or cfg.lr_candidates
    mini = args.mini_epochs or cfg.mini_epochs
    best, scores = lr_search(candidates, mini, cfg, pairs)
    if args.output:
        with open(args.output, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["lr", "smoothed_loss"])
            for eta in sorted(scores):
                w.writerow([repr(eta), repr(scores[eta])])
    for eta in sorted(scores):
        log.info("lr %g smoothed loss %g", eta, scores[eta])
    print(f"best_lr={best!r}", file=out)
    return (Path(args.output) if args.output else None), {**_config_lines(cfg),
                                                         "best_lr": best}


def _raw(model, nir, args):
    fn = colorize_raw if args.naive else colorize_raw_fast
    raw = fn(model, nir, args.window, args.epsilon, not args.bypass_level0_only)
    _check_finite(raw.image, "raw estimate")
    return raw


def cmd_colorize(args, out):
    model = load_model(args.model)
    inputs = _images(Path(args.input))
    many = Path(args.input).is_dir()
    dest = Path(args.output)
    raw_dest = Path(args.raw_output) if args.raw_output else None
    if many:
        dest.mkdir(parents=True, exist_ok=True)
        if raw_dest:
            raw_dest.mkdir(parents=True, exist_ok=True)
    for src in inputs:
        nir = _prepare_nir(src, model.spec.n_l, args.sensor_bits)
        raw = _raw(model, nir, args)
        filtered = joint_bilateral(raw.image, nir, args.sigma_g, args.sigma_f)
        final = add_details(filtered, raw.levels[0].detail, args.gain)
        _check_finite(final, "output")
        target = _output_for(src, dest, many)
        save_image(final, target, args.bits)
        if raw_dest:
            save_image(raw.image, _output_for(src, raw_dest, many), args.bits)
        print(target, file=out)
    return dest


def cmd_filter(args, out):
    src = load_image(args.input)
    guide = load_image(args.guide, args.sensor_bits)
    if guide.ndim != 2:
        raise ImageFormatError(f"{args.guide}: guide must be single-channel")
    if src.shape[:2] != guide.shape:
        raise ImageFormatError(f"input {src.shape[:2]} and guide {guide.shape} sizes differ")
    result = joint_bilateral(src, guide, args.sigma_g, args.sigma_f)
    _check_finite(result, "filtered image")
    save_image(result, args.output, args.bits)
    print(args.output, file=out)
    return Path(args.output)


def evaluate(metric: str, pred: Path, target: Path, spd: float = DEFAULT_SPD) -> MetricReport:
    names, scores = [], []
    for stem, p, t in _pair_by_stem(pred, target):
        names.append(stem)
        scores.append(_score(metric, load_image(p), load_image(t), spd))
    return MetricReport(names, scores)


def _write_report(report: MetricReport, metric: str, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image", metric])
        for name, score in report.rows():
            w.writerow([name, repr(score)])


def cmd_eval(args, out):
    report = evaluate(args.metric, Path(args.pred), Path(args.target), args.spd)
    if not np.all(np.isfinite(report.scores)):
        raise NumericError("non-finite score")
    if args.output:
        _write_report(report, args.metric, args.output)
    else:
        for name, score in report.rows():
            print(f"{name},{score!r}", file=out)
    print(f"{args.metric} mean={report.mean:.6g} std={report.std:.6g} n={len(report.scores)}",
          file=out)
    return Path(args.output) if args.output else None


def sweep(model, pairs, sigma_gs, sigma_fs, spd=DEFAULT_SPD, window=None,
          epsilon=DEFAULT_EPSILON, bypass_all_levels=True, gain=1.0):
    """Mean and std S-CIELAB of the full chain for every (sigma_g, sigma_f) pair.

    The raw estimate is computed once per image and reused for every filter setting.
    """
    raws = []
    for nir, rgb in pairs:
        raw = colorize_raw_fast(model, nir, window, epsilon, bypass_all_levels)
        _check_finite(raw.image, "raw estimate")
        raws.append((nir, rgb, raw))
    rows = []
    for sg in sigma_gs:
        for sf in sigma_fs:
            scores = []
            for nir, rgb, raw in raws:
                final = add_details(joint_bilateral(raw.image, nir, sg, sf),
                                    raw.levels[0].detail, gain)
                scores.append(scielab(final, rgb, spd))
            rows.append((sg, sf, float(np.mean(scores)), float(np.std(scores))))
    return rows


def cmd_sweep(args, out):
    model = load_model(args.model)
    files = scan_dataset(args.nir_dir, args.rgb_dir)
    pairs = []
    for f in files:
        nir = _prepare_nir(f.nir, model.spec.n_l, args.sensor_bits)
        rgb = center_crop(load_image(f.rgb, args.sensor_bits), model.spec.n_l)
        pairs.append((nir, rgb))
    rows = sweep(model, pairs, args.sigma_g, args.sigma_f, args.spd, args.window, args.epsilon)
    with open(args.output, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sigma_g", "sigma_f", "scielab_mean", "scielab_std"])
        for sg, sf, m, s in rows:
            w.writerow([repr(sg), repr(sf), repr(m), repr(s)])
    best = min(rows, key=lambda r: r[2])
    print(f"best sigma_g={best[0]:g} sigma_f={best[1]:g} scielab={best[2]:.6g}", file=out)
    return Path(args.output)


# -- parser -------------------------------------------------------------------------

def _add_decomp(p, window=None):
    p.add_argument("--window", type=int, default=window,
                   help="normalization window (odd); default: model's own")
    p.add_argument("--epsilon", type=float, default=DEFAULT_EPSILON)


def _add_train_flags(p):
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any config key (repeatable)")
    p.add_argument("--topology")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--window", type=int)
    p.add_argument("--patches-per-epoch", type=int)
    p.add_argument("--nir-dir")
    p.add_argument("--rgb-dir")
    p.add_argument("--val-nir-dir")
    p.add_argument("--val-rgb-dir")
    p.add_argument("--checkpoint-dir")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="nircolor", description="NIR to RGB colorization toolkit")
    parser.add_argument("--version", action="version", version=f"nircolor {__version__}")
    parser.add_argument("--threads", type=int, default=None,
                        help="worker threads for numeric kernels (default: all cores)")
    parser.add_argument("--log-level", default="WARNING",
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    p = sub.add_parser("roi", help="input patch side a topology needs")
    p.add_argument("--nc", type=int, default=12)
    p.add_argument("--np", type=int, default=3)
    p.add_argument("--nk", type=int, default=3)
    p.add_argument("--topology", help="name like net-3-12-3-bp (overrides --nc/--np)")
    p.set_defaults(func=cmd_roi, writes=False)

    p = sub.add_parser("gap", help="coherence gap of dense evaluation")
    p.add_argument("--np", type=int, default=3)
    p.add_argument("--topology")
    p.set_defaults(func=cmd_gap, writes=False)

    p = sub.add_parser("decompose", help="write mean/std/texture/detail components")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True, help="output path prefix")
    p.add_argument("--levels", type=int, default=1)
    p.add_argument("--bits", type=int, default=16, choices=[8, 16])
    p.add_argument("--sensor-bits", type=int)
    _add_decomp(p, DEFAULT_WINDOW)
    p.set_defaults(func=cmd_decompose, writes=True)

    p = sub.add_parser("train", help="train a model")
    _add_train_flags(p)
    p.add_argument("--output", required=True, help="model file to write")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train, writes=True)

    p = sub.add_parser("lr-search", help="pick a learning rate by short trainings")
    _add_train_flags(p)
    p.add_argument("--candidates", type=_floats)
    p.add_argument("--mini-epochs", type=int)
    p.add_argument("--output", help="CSV of candidate scores")
    p.set_defaults(func=cmd_lr_search, writes=True)

    p = sub.add_parser("colorize", help="NIR image(s) to RGB")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True, help="NIR image or directory")
    p.add_argument("--output", required=True, help="output image or directory")
    p.add_argument("--raw-output", help="also write the unfiltered estimate")
    p.add_argument("--sigma-g", type=float, default=DEFAULT_SIGMA_G)
    p.add_argument("--sigma-f", type=float, default=DEFAULT_SIGMA_F)
    p.add_argument("--gain", type=float, default=1.0, help="detail gain")
    p.add_argument("--naive", action="store_true", help="per-pixel reference inference")
    p.add_argument("--bypass-level0-only", action="store_true")
    p.add_argument("--bits", type=int, default=16, choices=[8, 16])
    p.add_argument("--sensor-bits", type=int)
    _add_decomp(p)
    p.set_defaults(func=cmd_colorize, writes=True)

    p = sub.add_parser("filter", help="joint bilateral filter guided by an image")
    p.add_argument("--input", required=True)
    p.add_argument("--guide", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--sigma-g", type=float, default=DEFAULT_SIGMA_G)
    p.add_argument("--sigma-f", type=float, default=DEFAULT_SIGMA_F)
    p.add_argument("--bits", type=int, default=16, choices=[8, 16])
    p.add_argument("--sensor-bits", type=int)
    p.set_defaults(func=cmd_filter, writes=True)

    p = sub.add_parser("eval", help="score predictions against targets")
    p.add_argument("--metric", choices=["rmse", "scielab"], default="rmse")
    p.add_argument("--pred", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--spd", type=float, default=DEFAULT_SPD, help="samples per degree")
    p.add_argument("--output", help="per-image CSV")
    p.set_defaults(func=cmd_eval, writes=True)

    p = sub.add_parser("sweep", help="S-CIELAB over a grid of filter parameters")
    p.add_argument("--model", required=True)
    p.add_argument("--nir-dir", required=True)
    p.add_argument("--rgb-dir", required=True)
    p.add_argument("--sigma-g", type=_floats, default=[5.0, 17.0, 65.0])
    p.add_argument("--sigma-f", type=_floats, default=[0.0003, 0.005, 0.08])
    p.add_argument("--spd", type=float, default=DEFAULT_SPD)
    p.add_argument("--output", required=True, help="CSV path")
    p.add_argument("--sensor-bits", type=int)
    _add_decomp(p)
    p.set_defaults(func=cmd_sweep, writes=True)
    return parser


def _fail(kind: str, code: int, message) -> int:
    text = " ".join(str(message).split())
    print(f"nircolor: error={kind} message={text}", file=sys.stderr)
    return code


def main(argv: list[str] | None = None, out=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    out = sys.stdout if out is None else out
    started = time.time()
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail("usage", EXIT_USAGE, exc)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None and args.threads < 1:
        return _fail("usage", EXIT_USAGE, "--threads must be >= 1")
    threads = args.threads or os.cpu_count() or 1
    try:
        with threadpool_limits(limits=threads), np.errstate(all="ignore"):
            result = args.func(args, out)
        if args.writes:
            target, extra = result if isinstance(result, tuple) else (result, None)
            if target is not None:
                write_manifest(target, args, argv, started, extra)
    except UsageError as exc:
        return _fail("usage", EXIT_USAGE, exc)
    except (TrainingDiverged, NumericError, FloatingPointError) as exc:
        return _fail("numeric", EXIT_NUMERIC, exc)
    except (OSError, ImageFormatError, ModelFormatError, DatasetError) as exc:
        return _fail("io", EXIT_IO, exc)
    except ValueError as exc:
        return _fail("usage", EXIT_USAGE, exc)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
