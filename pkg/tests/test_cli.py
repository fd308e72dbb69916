import csv
import io
import shlex
import subprocess
import sys

import numpy as np
import pytest

from nircolor.cli import main, read_manifest
from nircolor.image import load_image, save_image
from nircolor.inference import colorize
from nircolor.metrics import rmse, scielab
from nircolor.synthetic import affine_pairs, write_pairs
from nircolor.topology import load_model


def run(*argv):
    out = io.StringIO()
    code = main([str(a) for a in argv], out)
    return code, out.getvalue()


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    write_pairs(affine_pairs(3, 24, seed=1), root / "nir", root / "rgb")
    cfg = root / "train.cfg"
    cfg.write_text(f"topology = net-1-2-1-bp\nn_f1 = 4\nwindow = 5\nepochs = 15\nlr = 0.01\n"
                   f"patches_per_epoch = 16\nimages_per_epoch = 2\n"
                   f"nir_dir = {root / 'nir'}\nrgb_dir = {root / 'rgb'}\n")
    code, _ = run("train", "--config", cfg, "--output", root / "model.nirc")
    assert code == 0
    return root


def test_roi_and_gap():
    assert run("roi", "--nc", 12, "--np", 3) == (0, "98\n")
    assert run("roi", "--nc", 9, "--np", 2) == (0, "46\n")
    assert run("gap", "--np", 3) == (0, "8\n")
    assert run("gap", "--topology", "net-3-9-2-bp") == (0, "4\n")


def test_usage_errors(capsys):
    assert run("roi", "--bogus")[0] == 1
    err = capsys.readouterr().err
    assert "usage:" in err and "error=usage" in err
    assert run()[0] == 1
    assert run("roi", "--nc", 10, "--np", 3)[0] == 1
    assert run("--threads", 0, "gap")[0] == 1


def test_io_error_exit_code(tmp_path, capsys):
    assert run("eval", "--pred", tmp_path / "x.png", "--target", tmp_path / "y.png")[0] == 2
    line = capsys.readouterr().err.strip().splitlines()[-1]
    assert line.startswith("nircolor: error=io message=")


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "nircolor", "gap", "--np", "2"],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout == "4\n"


def test_decompose_outputs(tmp_path, rng):
    img = rng.random((20, 20)).astype(np.float32)
    save_image(img, tmp_path / "in.png", 16)
    code, out = run("decompose", "--input", tmp_path / "in.png", "--output", tmp_path / "d",
                    "--window", 5)
    assert code == 0
    for suffix in ("mean", "std", "tex", "det"):
        assert (tmp_path / f"d.{suffix}.png").exists()
    assert "0.5 + 0.1 * texture" in (tmp_path / "d.decompose.txt").read_text()
    arrays = np.load(tmp_path / "d.npz")
    back = arrays["mean"] + arrays["texture"] * (arrays["std"] + 1e-4)
    assert np.abs(back - load_image(tmp_path / "in.png")).max() < 1e-6
    assert read_manifest(tmp_path / "d.manifest.txt")["subcommand"] == "decompose"


def test_train_outputs(workspace):
    model = load_model(workspace / "model.nirc")
    assert model.spec.name == "net-1-2-1-bp" and model.window == 5
    with open(workspace / "model.nirc.history.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 15 and list(rows[0]) == ["epoch", "lr", "train_mse", "val_mse"]
    manifest = read_manifest(workspace / "model.nirc.manifest.txt")
    assert manifest["config.seed"] == "0"
    assert {"tool_version", "wall_clock_s", "argv"} <= manifest.keys()


def test_train_replay_is_bitwise(workspace, tmp_path):
    argv = shlex.split(read_manifest(workspace / "model.nirc.manifest.txt")["argv"])
    argv[argv.index("--output") + 1] = str(tmp_path / "again.nirc")
    assert run(*argv)[0] == 0
    assert (tmp_path / "again.nirc").read_bytes() == (workspace / "model.nirc").read_bytes()


def test_train_overrides_and_resume(workspace, tmp_path):
    code, out = run("train", "--config", workspace / "train.cfg", "--epochs", 8,
                    "--set", "checkpoint_every=4", "--checkpoint-dir", tmp_path / "ck",
                    "--output", tmp_path / "m8.nirc")
    assert code == 0 and "epochs=8" in out
    code, _ = run("train", "--config", workspace / "train.cfg", "--epochs", 8,
                  "--resume", tmp_path / "ck" / "ckpt-000004.nirc", "--output",
                  tmp_path / "r8.nirc")
    assert code == 0
    assert (tmp_path / "m8.nirc").read_bytes() == (tmp_path / "r8.nirc").read_bytes()
    assert run("train", "--config", workspace / "train.cfg", "--set", "bogus=1",
               "--output", tmp_path / "x.nirc")[0] == 1


def test_train_divergence_exit_code(workspace, tmp_path, capsys):
    code, _ = run("train", "--config", workspace / "train.cfg", "--lr", 1e6, "--epochs", 100,
                  "--set", "annealing=none", "--output", tmp_path / "bad.nirc")
    assert code == 3
    assert "error=numeric" in capsys.readouterr().err


def test_lr_search(workspace, tmp_path):
    code, out = run("lr-search", "--config", workspace / "train.cfg", "--candidates",
                    "0.001,0.01", "--mini-epochs", 5, "--output", tmp_path / "lr.csv")
    assert code == 0 and out.startswith("best_lr=")
    with open(tmp_path / "lr.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 2


def test_colorize_then_eval_matches_library(workspace, tmp_path):
    code, _ = run("colorize", "--model", workspace / "model.nirc", "--input", workspace / "nir",
                  "--output", tmp_path / "out", "--raw-output", tmp_path / "raw")
    assert code == 0
    files = sorted((tmp_path / "out").iterdir())
    assert [f.name for f in files] == ["img0000.png", "img0001.png", "img0002.png"]
    assert len(list((tmp_path / "raw").iterdir())) == 3
    model = load_model(workspace / "model.nirc")
    direct, _ = colorize(model, load_image(workspace / "nir" / "img0000.png"))
    assert np.abs(load_image(files[0]) - direct).max() <= 1 / 65535

    for metric, fn in (("rmse", rmse), ("scielab", scielab)):
        code, out = run("eval", "--metric", metric, "--pred", tmp_path / "out", "--target",
                        workspace / "rgb", "--output", tmp_path / f"{metric}.csv")
        assert code == 0 and f"{metric} mean=" in out
        with open(tmp_path / f"{metric}.csv") as fh:
            rows = list(csv.DictReader(fh))
        for row in rows:
            expect = fn(load_image(tmp_path / "out" / f"{row['image']}.png"),
                        load_image(workspace / "rgb" / f"{row['image']}.png"))
            assert float(row[metric]) == expect


def test_threads_do_not_change_outputs(workspace, tmp_path):
    for n in (1, 2):
        assert run("--threads", n, "colorize", "--model", workspace / "model.nirc", "--input",
                   workspace / "nir" / "img0001.png", "--output", tmp_path / f"t{n}.png")[0] == 0
    assert (tmp_path / "t1.png").read_bytes() == (tmp_path / "t2.png").read_bytes()


def test_filter(tmp_path, rng):
    save_image(np.full((16, 16, 3), 0.4), tmp_path / "raw.png", 16)
    save_image(rng.random((16, 16)), tmp_path / "g.png", 16)
    code, _ = run("filter", "--input", tmp_path / "raw.png", "--guide", tmp_path / "g.png",
                  "--output", tmp_path / "f.png", "--sigma-g", 3, "--sigma-f", 0.05)
    assert code == 0
    assert np.abs(load_image(tmp_path / "f.png") - 0.4).max() < 1e-4
    save_image(rng.random((8, 8)), tmp_path / "small.png", 16)
    assert run("filter", "--input", tmp_path / "raw.png", "--guide", tmp_path / "small.png",
               "--output", tmp_path / "f2.png")[0] == 2


def test_sweep_csv(workspace, tmp_path):
    code, out = run("sweep", "--model", workspace / "model.nirc", "--nir-dir", workspace / "nir",
                    "--rgb-dir", workspace / "rgb", "--sigma-g", "2,5", "--sigma-f",
                    "0.01,0.1", "--output", tmp_path / "s.csv")
    assert code == 0 and out.startswith("best ")
    with open(tmp_path / "s.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [(r["sigma_g"], r["sigma_f"]) for r in rows] == [
        ("2.0", "0.01"), ("2.0", "0.1"), ("5.0", "0.01"), ("5.0", "0.1")]
    assert all(float(r["scielab_mean"]) >= 0 for r in rows)
