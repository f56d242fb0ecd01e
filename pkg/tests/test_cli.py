import filecmp
import time

import numpy as np
import pytest

from fishbev.cli import main
from fishbev.config import DESK, ConfigError, RunConfig, parse_config
from fishbev.dataset import Dataset, read_manifest
from fishbev.geometry import BEVGrid
from fishbev.images import read_pnm
from fishbev.model import FishBEVModel
from fishbev.optim import AdamW
from fishbev.tensor_core import ParamStore
from fishbev.train import TrainingError, evaluate, train

TINY = ["--set", "data.train_scenes=2", "--set", "data.eval_scenes=1"]


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    assert main(["synth", "--out", str(root)] + TINY) == 0
    return root


# ------------------------------------------------------------ config


def test_every_key_has_default_and_unknown_rejected():
    cfg = RunConfig("desk")
    for k in DESK:
        assert cfg[k] == DESK[k]
    with pytest.raises(ConfigError):
        cfg.set("encoder.nope", 1)
    with pytest.raises(ConfigError):
        parse_config("grid.bogus = 3\n")


def test_full_profile_values():
    cfg = RunConfig("full")
    assert cfg["optim.lr"] == 3e-5
    assert cfg["optim.lr_decay"] == 0.99
    assert (cfg["grid.height"], cfg["grid.width"]) == (50, 50)
    assert (cfg["gating.kappa"], cfg["gating.delta"]) == (10.0, 0.8)
    assert (cfg["train.batch"], cfg["train.epochs"], cfg["data.frames"]) == (2, 50, 3)


def test_config_round_trip_idempotent():
    text = "# run\nprofile = full\nencoder.dim = 48\nfusion.xi = 1e-7\nencoder.distance_gating = off\n"
    once = parse_config(text).format()
    assert parse_config(once).format() == once
    cfg = parse_config(once)
    assert cfg.profile == "full" and cfg["encoder.dim"] == 48 and cfg["fusion.xi"] == 1e-7


def test_config_errors_carry_line():
    with pytest.raises(ConfigError, match="cfg.txt:2"):
        parse_config("grid.height = 8\nthis is not an assignment\n", source="cfg.txt")
    with pytest.raises(ConfigError):
        parse_config("grid.height = eight\n")


# ------------------------------------------------------------ optimizer


def test_zero_gradient_is_pure_weight_decay():
    p = ParamStore(0)
    p.add("w", (3, 4))
    before = p["w"].data.copy()
    opt = AdamW(p, lr=3e-5, weight_decay=0.01)
    p.zero_grad()
    opt.step()
    np.testing.assert_array_equal(p["w"].data, before * (1 - 3e-5 * 0.01))
    assert all(opt.m[k].shape == p[k].shape for k in p.names())


def test_lr_after_two_epochs():
    opt = AdamW(ParamStore(0), lr=3e-5, lr_decay=0.99)
    opt.end_epoch()
    opt.end_epoch()
    assert opt.lr == pytest.approx(2.94030e-5, rel=1e-6)


# ------------------------------------------------------------ training / evaluation


def short_cfg(**extra):
    cfg = RunConfig("desk").override(["train.steps=10", "encoder.dim=16", "drme.dim=16"])
    for k, v in extra.items():
        cfg.set(k, v)
    return cfg


def test_training_log_bit_identical(tiny_data, tmp_path):
    ds = Dataset(tiny_data / "train")
    for run in ("a", "b"):
        train(FishBEVModel.from_config(short_cfg(), ds.rig), ds, short_cfg(), tmp_path / run)
    a = (tmp_path / "a" / "loss.csv").read_bytes()
    assert a == (tmp_path / "b" / "loss.csv").read_bytes()
    assert len(a.decode().splitlines()) == 11
    assert (tmp_path / "a" / "checkpoint" / "manifest.txt").exists()


def test_checkpoint_each_epoch(tiny_data, tmp_path):
    ds = Dataset(tiny_data / "train")
    cfg = short_cfg(**{"train.steps": 0, "train.epochs": 2})
    seen = []
    res = train(FishBEVModel.from_config(cfg, ds.rig), ds, cfg, tmp_path,
                on_step=lambda row: seen.append((tmp_path / "checkpoint").exists()))
    assert len(res.log) == 12  # 2 epochs of 2 scenes x 3 frames
    # saved after step 6 closes the first epoch
    assert seen == [False] * 6 + [True] * 6
    assert [row[2] for row in res.log[5:7]] == [2e-3, 2e-3 * 0.99]


def test_non_finite_loss_names_step(tiny_data):
    ds = Dataset(tiny_data / "train")
    model = FishBEVModel.from_config(short_cfg(), ds.rig)
    model.params["dec.proj.b"].data[:] = np.nan
    with pytest.raises(TrainingError) as err:
        train(model, ds, short_cfg())
    assert err.value.step == 1


class GroundTruthModel:
    def predict(self, frames, rng, samples=None):
        return frames[-1].bev_gt.astype(np.int64), [None]


def test_ground_truth_scores_one(tiny_data):
    assert evaluate(GroundTruthModel(), Dataset(tiny_data / "eval")).miou == 1.0


def test_untrained_model_near_chance(tmp_path):
    assert main(["synth", "--out", str(tmp_path), "--set", "data.train_scenes=0",
                 "--set", "data.eval_scenes=5"]) == 0
    ds = Dataset(tmp_path / "eval")
    assert evaluate(FishBEVModel.from_config(RunConfig("desk"), ds.rig), ds).miou < 0.3


# ------------------------------------------------------------ command line


def test_synth_empty_and_deterministic(tmp_path):
    assert main(["synth", "--out", str(tmp_path / "e"), "--set", "data.train_scenes=0",
                 "--set", "data.eval_scenes=0"]) == 0
    assert read_manifest(tmp_path / "e" / "train")["scenes"] == "0"
    for d in ("a", "b"):
        assert main(["synth", "--out", str(tmp_path / d), "--seed", "7"] + TINY) == 0
    cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")
    assert not cmp.diff_files and not cmp.left_only and not cmp.right_only


def test_synth_desk_runtime(tmp_path):
    t0 = time.perf_counter()
    assert main(["synth", "--out", str(tmp_path), "--set", "data.eval_scenes=0"]) == 0
    assert time.perf_counter() - t0 < 60
    assert len(Dataset(tmp_path / "train")) == 40


def test_usage_and_config_errors_exit_one(tmp_path, capsys):
    assert main(["frobnicate"]) == 1
    assert main(["synth", "--out", str(tmp_path), "--set", "nope.key=1"]) == 1
    assert main(["synth", "--out", str(tmp_path), "--set", "grid.height"]) == 1


def test_missing_data_exits_two(tmp_path):
    assert main(["train", "--data", str(tmp_path / "absent"), "--out", str(tmp_path / "run")]) == 2


def test_train_eval_and_mismatch(tiny_data, tmp_path, capsys):
    s = ["--set", "train.steps=2"]
    assert main(["train", "--data", str(tiny_data), "--out", str(tmp_path / "run")] + s) == 0
    assert (tmp_path / "run" / "loss.csv").read_text().splitlines()[0] == "step,epoch,lr,focal,kl,total"
    assert main(["eval", "--data", str(tiny_data), "--run", str(tmp_path / "run"), "--out", str(tmp_path / "ev")]) == 0
    rows = (tmp_path / "ev" / "metrics.csv").read_text().splitlines()
    assert rows[0] == "row,road,sidewalk,vegetation,vehicle,ego,miou"
    grid = BEVGrid(32, 32, 0.5)
    assert read_pnm(tmp_path / "ev" / "pred_scene0000_frame02.pgm").shape == (grid.height, grid.width)
    assert read_pnm(tmp_path / "ev" / "pred_scene0000_frame02.ppm").shape == (32, 32, 3)
    assert read_pnm(tmp_path / "ev" / "conf_scene0000_frame02.pgm").shape == (32, 32)
    capsys.readouterr()
    assert main(["eval", "--data", str(tiny_data), "--run", str(tmp_path / "run"), "--out", str(tmp_path / "ev2"),
                 "--set", "encoder.dim=32"]) == 2
    err = capsys.readouterr().err
    assert "drme.lateral0.k: checkpoint (64, 32, 1, 1) vs model (32, 32, 1, 1)" in err


def test_ablation_row_order(tiny_data, tmp_path):
    s = ["--set", "train.steps=1", "--set", "encoder.dim=16", "--set", "drme.dim=16"]
    assert main(["train", "--ablation", "--data", str(tiny_data), "--out", str(tmp_path / "abl")] + s) == 0
    assert main(["eval", "--data", str(tiny_data), "--ablation", str(tmp_path / "abl"),
                 "--out", str(tmp_path / "ev")]) == 0
    rows = [r.split(",")[0] for r in (tmp_path / "ev" / "metrics.csv").read_text().splitlines()[1:]]
    assert rows == ["baseline", "+gating", "+uncertainty", "+both"]
    cfg = parse_config((tmp_path / "abl" / "gating" / "config.txt").read_text())
    assert cfg["encoder.uncertainty_fusion"] == "uniform" and cfg["encoder.distance_gating"] == "on"


def test_gradcheck_passes_and_flags_corruption(capsys):
    t0 = time.perf_counter()
    assert main(["gradcheck"]) == 0
    assert time.perf_counter() - t0 < 120
    assert capsys.readouterr().out.count("PASS") == 6
    assert main(["gradcheck", "--corrupt", "0.01"]) == 3
    assert "FAIL" in capsys.readouterr().out


def test_project_debug_outputs(tmp_path):
    assert main(["project-debug", "--out", str(tmp_path)]) == 0
    names = {p.name for p in tmp_path.iterdir()}
    expect = {f"grid_overlay_cam{c}.ppm" for c in range(4)} | {f"visibility_cam{c}.pgm" for c in range(4)}
    assert expect | {"anisotropy_cam0.pgm", "anisotropy_cam0.csv"} == names
    # front camera: every cell ahead of its mount is visible, nothing behind the ego origin
    grid = BEVGrid(32, 32, 0.5)
    vis = read_pnm(tmp_path / "visibility_cam0.pgm").reshape(-1) > 0
    x = grid.cell_to_ego(grid.positions())[:, 0]
    assert vis[x > 2.5].all() and not vis[x < 0].any()
    heat = np.loadtxt(tmp_path / "anisotropy_cam0.csv", delimiter=",")
    assert np.nanmin(np.abs(heat)) < 1e-3
