"""Command-line entry point: synth, train, eval, gradcheck, project-debug.

Exit codes: 0 ok, 1 usage or configuration error, 2 data error, 3 check failure.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, load_config, parse_config
from .dataset import Dataset, DatasetError, synthesize
from .decoder import CLASS_NAMES
from .geometry import BEVGrid, GeometryError, anisotropy_at, anisotropy_heatmap, bev_reference_points, project_points, read_rig
from .images import to_uint8, write_class_map, write_pgm, write_ppm
from .model import FishBEVModel, rig_from_config, scene_params_from_config
from .synth import PALETTE, generate_scene, render_rig
from .tensor_core import CheckpointError, FBTError
from .train import TrainingError, evaluate, gradcheck_components, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CHECK = 0, 1, 2, 3
GRADCHECK_TOL = 1e-4
EVAL_OFFSET = 1_000_000  # scene-seed index offset keeping eval scenes disjoint from train

# ablation rows: name -> (uncertainty_fusion, distance_gating)
ABLATIONS = {
    "baseline": ("uniform", "off"),
    "gating": ("uniform", "on"),
    "uncertainty": ("on", "off"),
    "both": ("on", "on"),
}
ABLATION_LABELS = {"baseline": "baseline", "gating": "+gating", "uncertainty": "+uncertainty", "both": "+both"}


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_config(args) -> RunConfig:
    if args.config:
        cfg = load_config(args.config, args.profile)
    else:
        cfg = RunConfig(args.profile or "desk")
    cfg.override(args.set)
    if args.seed is not None:
        cfg.set("run.seed", args.seed)
    return cfg


def write_config(path, cfg: RunConfig) -> None:
    Path(path).write_text(cfg.format(), encoding="utf-8")


# ------------------------------------------------------------ subcommands


def cmd_synth(cfg: RunConfig, out: Path) -> int:
    rig = rig_from_config(cfg)
    grid = BEVGrid(cfg["grid.height"], cfg["grid.width"], cfg["grid.cell"])
    params = scene_params_from_config(cfg)
    seed = cfg["run.seed"]
    t0 = time.perf_counter()
    hist = synthesize(out / "train", cfg["data.train_scenes"], seed, rig, grid, params)
    hist += synthesize(out / "eval", cfg["data.eval_scenes"], seed, rig, grid, params, first_index=EVAL_OFFSET)
    write_config(out / "config.txt", cfg)
    total = max(int(hist.sum()), 1)
    print(f"wrote {cfg['data.train_scenes']} train / {cfg['data.eval_scenes']} eval scenes "
          f"to {out} in {time.perf_counter() - t0:.1f}s")
    print("class histogram (BEV cells):")
    for name, n in zip(CLASS_NAMES, hist):
        print(f"  {name:<11} {int(n):>9}  {n / total:6.3f}")
    return EXIT_OK


def run_training(cfg: RunConfig, data: Path, out: Path, verbose: bool = True):
    ds = Dataset(data / "train")
    model = FishBEVModel.from_config(cfg, ds.rig)
    out.mkdir(parents=True, exist_ok=True)
    write_config(out / "config.txt", cfg)

    def report(row):
        step, epoch, lr, foc, kl, tot = row
        if verbose and (step == 1 or step % 25 == 0):
            print(f"step {step:5d} epoch {epoch:3d} lr {lr:.3e} focal {foc:.5f} kl {kl:.5f} total {tot:.5f}",
                  flush=True)

    res = train(model, ds, cfg, out, on_step=report)
    return model, res


def cmd_train(cfg: RunConfig, data: Path, out: Path, ablation: bool) -> int:
    variants = ABLATIONS if ablation else {None: None}
    for name, flags in variants.items():
        c = cfg.copy()
        dest = out
        if name is not None:
            c.set("encoder.uncertainty_fusion", flags[0])
            c.set("encoder.distance_gating", flags[1])
            dest = out / name
            print(f"== {ABLATION_LABELS[name]} ==")
        _, res = run_training(c, data, dest)
        f = res.focal()
        k = min(10, len(f))
        print(f"done: {len(f)} steps in {res.seconds:.1f}s; focal first-{k} {f[:k].mean():.5f} "
              f"last-{k} {f[-k:].mean():.5f}; checkpoint {dest / 'checkpoint'}")
    return EXIT_OK


def eval_run(run_dir: Path, data: Path, out: Path | None, seed: int, export: bool, overrides=()):
    cfg = load_config(run_dir / "config.txt").override(list(overrides))
    ds = Dataset(data / "eval")
    model = FishBEVModel.from_config(cfg, ds.rig)
    model.params.load(run_dir / "checkpoint")
    res = evaluate(model, ds, seed=seed, keep=export, samples=cfg["fusion.mc_samples_diag"])
    if export and out is not None:
        out.mkdir(parents=True, exist_ok=True)
        g = model.spec.grid
        for (i, t), pred in res.predictions:
            write_class_map(out / f"pred_scene{i:04d}_frame{t:02d}", pred)
        for (i, t), conf in res.confs:
            if conf is not None:
                write_pgm(out / f"conf_scene{i:04d}_frame{t:02d}.pgm", to_uint8(conf.reshape(g.height, g.width)))
    return res


def cmd_eval(args, data: Path, out: Path) -> int:
    rows = []
    if args.ablation:
        root = Path(args.ablation)
        for name in ABLATIONS:
            if not (root / name / "checkpoint").exists():
                raise DatasetError(root / name / "checkpoint", "missing ablation checkpoint")
            res = eval_run(root / name, data, out / name, args.seed or 0, export=False, overrides=args.set)
            rows.append((ABLATION_LABELS[name], res))
    else:
        run = Path(args.run)
        res = eval_run(run, data, out, args.seed or 0, export=True, overrides=args.set)
        rows.append(("model", res))
    out.mkdir(parents=True, exist_ok=True)
    names = [CLASS_NAMES[c] for c in range(1, len(CLASS_NAMES))]
    header = "row," + ",".join(names) + ",miou"
    lines = [header]
    for label, res in rows:
        vals = [v for _, v in res.table()]
        lines.append(",".join([label] + [repr(float(v)) for v in vals] + [repr(res.miou)]))
    (out / "metrics.csv").write_text("\n".join(lines) + "\n")
    print(f"{'row':<14}" + "".join(f"{n:>11}" for n in names) + f"{'mIoU':>9}")
    for label, res in rows:
        vals = [v for _, v in res.table()]
        print(f"{label:<14}" + "".join(f"{v:11.4f}" for v in vals) + f"{res.miou:9.4f}")
    return EXIT_OK


def cmd_gradcheck(corrupt: float, seed: int) -> int:
    t0 = time.perf_counter()
    errs = gradcheck_components(h=1e-5, corrupt=corrupt, seed=seed)
    ok = True
    for name, err in errs.items():
        status = "PASS" if err < GRADCHECK_TOL else "FAIL"
        ok &= err < GRADCHECK_TOL
        print(f"{name:<24} max rel err {err:.3e}  {status}")
    print(f"runtime {time.perf_counter() - t0:.1f}s")
    return EXIT_OK if ok else EXIT_CHECK


def cmd_project_debug(cfg: RunConfig, out: Path, rig_path: str | None) -> int:
    rig = read_rig(rig_path) if rig_path else rig_from_config(cfg)
    grid = BEVGrid(cfg["grid.height"], cfg["grid.width"], cfg["grid.cell"])
    out.mkdir(parents=True, exist_ok=True)
    scene = generate_scene(cfg["run.seed"], scene_params_from_config(cfg))
    pose = tuple(float(v) for v in scene.poses[0])
    imgs = render_rig(scene, rig, pose)
    # metric ground grid (1 m spacing) projected on top of the render
    ticks = np.arange(-12.0, 12.0 + 1e-9, 1.0)
    fine = np.linspace(-12.0, 12.0, 481)
    pts = np.concatenate([np.stack(np.meshgrid(ticks, fine, indexing="ij"), -1).reshape(-1, 2),
                          np.stack(np.meshgrid(fine, ticks, indexing="ij"), -1).reshape(-1, 2)])
    pts3 = np.concatenate([pts, np.zeros((len(pts), 1))], axis=1)
    for c, (cam, img) in enumerate(zip(rig, imgs)):
        rgb = np.round(img.transpose(1, 2, 0) * 255).astype(np.uint8)
        uv, vis = project_points(cam, pts3)
        px = np.round(uv[vis]).astype(int)
        H, W = rgb.shape[:2]
        ok = (px[:, 0] >= 0) & (px[:, 0] < W) & (px[:, 1] >= 0) & (px[:, 1] < H)
        rgb[px[ok, 1], px[ok, 0]] = 255
        write_ppm(out / f"grid_overlay_cam{c}.ppm", rgb)
    heat = anisotropy_heatmap(rig[0].intrinsics)
    write_pgm(out / "anisotropy_cam0.pgm", to_uint8(heat, lo=0.0))
    np.savetxt(out / "anisotropy_cam0.csv", heat, delimiter=",", fmt="%.6e")
    refs = bev_reference_points(grid, rig)
    for c in range(len(rig)):
        mask = refs.mask[:, c].reshape(grid.height, grid.width)
        write_pgm(out / f"visibility_cam{c}.pgm", (mask * 255).astype(np.uint8))
    intr = rig[0].intrinsics
    centre = float(anisotropy_at(intr, np.array([[intr.cx, intr.cy]]))[0])
    print(f"anisotropy near principal point: {centre:.2e} (log10 ratio)")
    print(f"wrote grid_overlay_cam{{0..{len(rig) - 1}}}.ppm, anisotropy_cam0.pgm/.csv, "
          f"visibility_cam{{0..{len(rig) - 1}}}.pgm to {out}")
    return EXIT_OK


# ------------------------------------------------------------ entry point


def make_parser() -> Parser:
    common = Parser(add_help=False)
    common.add_argument("--config", help="config file of 'section.key = value' lines")
    common.add_argument("--seed", type=int, help="run seed (overrides run.seed)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--profile", choices=["desk", "full"], help="default profile")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")

    p = Parser(prog="fishbev", description="Fisheye BEV segmentation toolkit")
    sub = p.add_subparsers(dest="command", required=True, parser_class=Parser)
    s = sub.add_parser("synth", parents=[common], help="render a synthetic dataset")
    s = sub.add_parser("train", parents=[common], help="train on <data>/train")
    s.add_argument("--data", required=True, help="dataset directory written by synth")
    s.add_argument("--ablation", action="store_true", help="train baseline/+gating/+uncertainty/+both variants")
    s = sub.add_parser("eval", parents=[common], help="evaluate on <data>/eval")
    s.add_argument("--data", required=True)
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--run", help="training output directory (config.txt + checkpoint/)")
    g.add_argument("--ablation", help="directory holding the four ablation runs")
    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every component")
    s.add_argument("--corrupt", type=float, default=0.0, help=argparse.SUPPRESS)
    s = sub.add_parser("project-debug", parents=[common], help="export geometry diagnostics")
    s.add_argument("--rig", help="rig file (default: rig from the config)")
    return p


def main(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        cfg = build_config(args)
        out = Path(args.out) if args.out else Path("fishbev_out")
        if args.command == "synth":
            return cmd_synth(cfg, out)
        if args.command == "train":
            return cmd_train(cfg, Path(args.data), out, args.ablation)
        if args.command == "eval":
            return cmd_eval(args, Path(args.data), out)
        if args.command == "gradcheck":
            return cmd_gradcheck(args.corrupt, args.seed or 0)
        if args.command == "project-debug":
            return cmd_project_debug(cfg, out, args.rig)
    except (ConfigError, GeometryError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, FBTError, CheckpointError, FileNotFoundError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except TrainingError as e:
        print(f"training aborted: {e}", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
