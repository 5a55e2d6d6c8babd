import json
import math
import subprocess
import sys

import numpy as np
import pytest
import torch

from occ4d.cli import main
from occ4d.core import read_clip, read_ppm
from occ4d.diffusion import load_denoiser, save_denoiser

TINY = """\
seed: 5
world: {dims: [4, 8, 8, 4], clips_per_kind: 2, n_static_obstacles: 6, n_dynamic_cars: 1}
tokenizer: {latent_channels: 8, codebook_size: 16, attn_groups: 4}
diffusion: {width: 32, depth: 1, heads: 2}
schedule: {train_steps: 100, sample_steps: 10}
train_tokenizer: {steps: 20, batch_size: 2, eval_interval: 10}
train_diffusion: {steps: 20, batch_size: 4, eval_interval: 10}
"""


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    """A tiny configuration taken through make-data and both training verbs."""
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "cfg.yaml"
    cfg.write_text(TINY)
    assert main(["make-data", str(cfg)]) == 0
    assert main(["train-tokenizer", str(cfg)]) == 0
    assert main(["train-diffusion", str(cfg)]) == 0
    return root, cfg


def test_training_outputs(run):
    root, _ = run
    ck = root / "checkpoints"
    assert (ck / "tokenizer.otk").exists() and (ck / "denoiser.odm").exists()
    assert len((ck / "tokenizer_loss.csv").read_text().splitlines()) == 21
    assert len((ck / "diffusion_loss.csv").read_text().splitlines()) == 21
    assert len(list((root / "data").glob("*.occv"))) == 8


def test_dry_run(run, capsys):
    _, cfg = run
    assert main(["train-tokenizer", str(cfg), "--dry-run"]) == 0
    assert main(["train-diffusion", str(cfg), "--dry-run"]) == 0
    assert capsys.readouterr().out.count("dry run ok") == 2


def test_generate_deterministic(run):
    root, cfg = run
    paths = []
    for name in ("a", "b"):
        out = root / f"{name}.occv"
        assert main(["generate", "--config", str(cfg), "--trajectory", "straight", "--seed", "3", "--out",
                     str(out)]) == 0
        paths.append(out)
    assert paths[0].read_bytes() == paths[1].read_bytes()
    seq, traj = read_clip(paths[0])
    assert seq.dims == (4, 8, 8, 4) and traj.positions.shape == (4, 2)


def test_generate_trajectory_file_and_render(run):
    root, cfg = run
    csv = root / "traj.csv"
    csv.write_text("x,y\n0,0\n0.5,0\n1,0.1\n1.5,0.2\n")
    out = root / "f.occv"
    assert main(["generate", "--config", str(cfg), "--trajectory-file", str(csv), "--ratio", "0.5", "--render",
                 "--out", str(out)]) == 0
    _, traj = read_clip(out)
    np.testing.assert_allclose(traj.positions[2], [1, 0.1], rtol=1e-6)
    frames = sorted((root / "f").glob("*.ppm"))
    assert len(frames) == 4 and read_ppm(frames[0]).shape == (8, 8, 3)


def test_render_verb(run):
    root, _ = run
    clip = sorted((root / "data").glob("*.occv"))[0]
    assert main(["render", str(clip), "--out", str(root / "frames")]) == 0
    assert len(list((root / "frames").glob("*.ppm"))) == 4


def test_eval_report(run):
    root, cfg = run
    out = root / "eval.json"
    assert main(["eval", "--config", str(cfg), "--n-gen", "4", "--sweep-ratio", "0.5,1.0", "--sweep-steps", "5,10",
                 "--out", str(out)]) == 0
    rep = json.loads(out.read_text())
    assert {"iou", "miou", "per_class", "fid_proxy", "n_real", "n_gen", "sweep"} <= set(rep)
    assert 0 <= rep["iou"] <= 1 and rep["n_real"] == 8 and math.isfinite(rep["fid_proxy"])
    assert [(r["steps"], r["ratio"]) for r in rep["sweep"]] == [(5, 0.5), (5, 1.0), (10, 0.5), (10, 1.0)]


def test_eval_single_clip(run, tmp_path):
    root, cfg = run
    data = tmp_path / "one"
    data.mkdir()
    clip = sorted((root / "data").glob("*.occv"))[0]
    (data / clip.name).write_bytes(clip.read_bytes())
    (data / "manifest.csv").write_text(f"file,kind,seed\n{clip.name},straight,0\n")
    out = tmp_path / "e.json"
    assert main(["eval", "--config", str(cfg), "--data", str(data), "--n-gen", "2", "--out", str(out)]) == 0
    assert json.loads(out.read_text())["fid_proxy"] is None


@pytest.mark.parametrize("argv", [
    ["generate", "--trajectory", "straight", "--out", "x.occv"],
    ["generate", "--config", "{cfg}", "--trajectory", "backwards", "--out", "x.occv"],
    ["generate", "--config", "{cfg}", "--trajectory", "straight", "--ratio", "0", "--out", "x.occv"],
    ["eval", "--config", "{cfg}", "--n-gen", "1", "--out", "x.json"],
    ["train-tokenizer", "{root}/missing.yaml"],
])
def test_config_errors(run, argv, capsys):
    root, cfg = run
    argv = [a.format(cfg=cfg, root=root) for a in argv]
    assert main(argv) == 2
    assert "config error" in capsys.readouterr().err


def test_bad_config_field(tmp_path, capsys):
    p = tmp_path / "c.yaml"
    p.write_text("seed: 1\nworld: {dims: [8, 15, 16, 4]}\n")
    assert main(["make-data", str(p)]) == 2
    assert "world.dims[1]" in capsys.readouterr().err


def test_data_errors(run, tmp_path):
    root, cfg = run
    csv = tmp_path / "t.csv"
    csv.write_text("0,0\n1,1\n")
    assert main(["generate", "--config", str(cfg), "--trajectory-file", str(csv), "--out", str(tmp_path / "x")]) == 3
    bad = tmp_path / "bad.occv"
    bad.write_bytes(b"NOPE" + bytes(40))
    assert main(["render", str(bad), "--out", str(tmp_path / "r")]) == 3
    assert main(["render", str(tmp_path / "missing.occv"), "--out", str(tmp_path / "r")]) == 3
    p = tmp_path / "c.yaml"
    p.write_text(f"seed: 1\npaths: {{data_dir: {tmp_path / 'nodata'}}}\n")
    assert main(["train-tokenizer", str(p)]) == 3
    ck = root / "checkpoints"
    assert main(["generate", "--tokenizer", str(ck / "tokenizer.otk"), "--denoiser", str(ck / "tokenizer.otk"),
                 "--trajectory", "straight", "--out", str(tmp_path / "y")]) == 3


def test_numeric_failure(run, tmp_path, capsys):
    root, cfg = run
    ck = root / "checkpoints"
    den, meta, _ = load_denoiser(ck / "denoiser.odm")
    with torch.no_grad():
        den.inp.weight[0, 0] = float("nan")
    extra = {k: v for k, v in meta.items() if k not in ("config", "step")}
    save_denoiser(tmp_path / "nan.odm", den, extra=extra)
    assert main(["generate", "--tokenizer", str(ck / "tokenizer.otk"), "--denoiser", str(tmp_path / "nan.odm"),
                 "--trajectory", "straight", "--out", str(tmp_path / "n.occv")]) == 4
    assert "numerical failure" in capsys.readouterr().err


def test_console_entry_help():
    res = subprocess.run([sys.executable, "-m", "occ4d.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for verb in ("make-data", "train-tokenizer", "train-diffusion", "generate", "eval", "render"):
        assert verb in res.stdout
