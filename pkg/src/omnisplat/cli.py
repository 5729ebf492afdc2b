"""Command-line driver: train, render, gradcheck, eval and synth.

Exit codes are 0 on success, 1 when a verification fails (gradcheck
tolerance, training divergence) and 2 on usage or I/O errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_USAGE = 2

log = logging.getLogger("omnisplat")


class UsageError(Exception):
    pass


def _add_common(p):
    p.add_argument("--seed", type=int, default=None, help="random seed")
    p.add_argument("--threads", type=int, default=None, help="worker threads for the kernels")
    p.add_argument("-v", "--verbose", action="store_true")


def _add_render_opts(p):
    p.add_argument("--near", type=float, default=None, help="inner shell radius")
    p.add_argument("--far", type=float, default=None, help="outer shell radius")
    p.add_argument("--tile-size", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="omnisplat", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="optimize Gaussians against a scene manifest")
    p.add_argument("manifest", type=Path)
    p.add_argument("out_dir", type=Path)
    p.add_argument("--config", type=Path, help="YAML or JSON file of training keys")
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--max-minutes", type=float, default=None, help="wall-clock budget")
    p.add_argument("--lambda-ssim", type=float, default=None)
    p.add_argument("--checkpoint-every", type=int, default=None)
    p.add_argument("--log-every", type=int, default=100)
    p.add_argument("--no-plots", action="store_true")
    _add_render_opts(p)
    _add_common(p)

    p = sub.add_parser("render", help="render one ERP view of a checkpoint")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("out", type=Path, help="output PNG")
    p.add_argument("--pose", nargs="+", required=True, metavar="X",
                   help="12 numbers: row-major world-to-camera rotation, then translation")
    p.add_argument("--width", type=int, required=True)
    p.add_argument("--height", type=int, default=None, help="defaults to width / 2")
    _add_render_opts(p)
    _add_common(p)

    p = sub.add_parser("gradcheck", help="finite-difference check of the backward pass")
    p.add_argument("--n-gaussians", type=int, default=10)
    p.add_argument("--width", type=int, default=64, help="image width; height is width / 2")
    p.add_argument("--scenes", type=int, default=20)
    p.add_argument("--tolerance", type=float, default=None)
    p.add_argument("--lambda-ssim", type=float, default=0.2)
    p.add_argument("--mutate", type=int, default=None, metavar="K",
                   help="flip the sign of covariance-gradient term K (0-11)")
    p.add_argument("--mutations", action="store_true", help="also require every single sign flip to be caught")
    p.add_argument("--out", type=Path, default=None, help="directory for CSV and figure")
    _add_common(p)

    p = sub.add_parser("eval", help="PSNR and SSIM of a checkpoint over manifest views")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("manifest", type=Path)
    p.add_argument("--split", default="test", choices=["train", "test", "all"])
    p.add_argument("--out", type=Path, default=None, help="directory for eval.csv and figure")
    p.add_argument("--no-plots", action="store_true")
    _add_render_opts(p)
    _add_common(p)

    p = sub.add_parser("synth", help="write a deterministic synthetic scene")
    p.add_argument("preset", help="overfit or small")
    p.add_argument("out_dir", type=Path)
    _add_common(p)
    return parser


def _set_threads(n):
    if n is None:
        return
    import numba

    if not 1 <= n <= numba.config.NUMBA_NUM_THREADS:
        raise UsageError(f"--threads must lie in [1, {numba.config.NUMBA_NUM_THREADS}]")
    numba.set_num_threads(n)


def load_config(path) -> dict:
    import yaml

    try:
        values = yaml.safe_load(Path(path).read_text()) or {}
    except yaml.YAMLError as exc:
        raise UsageError(f"{path}: {exc}") from None
    if not isinstance(values, dict):
        raise UsageError(f"{path}: expected a mapping of keys to values")
    return values


def _render_kwargs(args):
    from omnisplat.rasterizer import FAR, NEAR, TILE_SIZE

    return {
        "near": NEAR if args.near is None else args.near,
        "far": FAR if args.far is None else args.far,
        "tile_size": TILE_SIZE if args.tile_size is None else args.tile_size,
    }


def _load_views(entries):
    from omnisplat.io import load_image

    views = []
    for e in entries:
        img = load_image(e.image_path)
        if img.shape[:2] != (e.camera.height, e.camera.width):
            raise UsageError(f"{e.image_path}: image is {img.shape[1]}x{img.shape[0]}, "
                             f"manifest says {e.camera.width}x{e.camera.height}")
        views.append((e.camera, img))
    return views


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def cmd_train(args) -> int:
    from omnisplat.io import cloud_from_points, load_manifest, load_pointcloud, save_checkpoint
    from omnisplat.metrics import psnr, ssim
    from omnisplat.optimizer import TrainConfig, Trainer, TrainingDiverged, scene_extent
    from omnisplat.rasterizer import render

    values = load_config(args.config) if args.config else {}
    flags = {
        "iterations": args.iterations,
        "max_minutes": args.max_minutes,
        "lambda_dssim": args.lambda_ssim,
        "checkpoint_every": args.checkpoint_every,
        "near": args.near,
        "far": args.far,
        "tile_size": args.tile_size,
        "seed": args.seed,
    }
    values.update({k: v for k, v in flags.items() if v is not None})
    try:
        cfg = TrainConfig.from_dict(values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad configuration: {exc}") from None

    manifest = load_manifest(args.manifest)
    if manifest.pointcloud_path is None:
        raise UsageError(f"{args.manifest}: no pointcloud record")
    entries = manifest.split("train")
    if not entries:
        raise UsageError(f"{args.manifest}: no training views")
    views = _load_views(entries)
    xyz, rgb = load_pointcloud(manifest.pointcloud_path)
    cloud = cloud_from_points(xyz, rgb)

    out = args.out_dir
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    trainer = Trainer(cloud, views, cfg, extent=scene_extent(xyz))

    def on_checkpoint(c, it):
        save_checkpoint(c, out / "checkpoints" / f"iter_{it:06d}.ply")

    def on_diverge(c, it):
        save_checkpoint(c, out / "diverged.ply")
        log.error("training diverged at iteration %d; state written to %s", it, out / "diverged.ply")

    status = EXIT_OK
    try:
        cloud = trainer.run(on_checkpoint, on_diverge, log_every=args.log_every)
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        cloud = trainer.cloud
        status = EXIT_FAIL
    rows = trainer.history
    _write_csv(out / "train_log.csv", ["iteration", "wall_seconds", "loss", "n_gaussians"],
               [[r.iteration, f"{r.wall_seconds:.4f}", f"{r.loss:.8g}", r.n_gaussians] for r in rows])
    if status != EXIT_OK:
        return status
    save_checkpoint(cloud, out / "final.ply")
    if rows and not args.no_plots:
        from omnisplat.plotting import plot_training

        plot_training(rows, out / "train_log.png")
    scores = []
    for cam, img in views:
        res = render(cloud, cam, cfg.near, cfg.far, cfg.tile_size)
        scores.append((psnr(res.image, img), ssim(res.image, img)))
    mean = np.mean(scores, axis=0)
    it = rows[-1].iteration if rows else 0
    print(f"trained {it} iterations, {len(cloud)} Gaussians; train views PSNR {mean[0]:.2f} dB SSIM {mean[1]:.4f}")
    return EXIT_OK


def cmd_render(args) -> int:
    from omnisplat.io import load_checkpoint, parse_pose, save_image
    from omnisplat.rasterizer import render

    height = args.width // 2 if args.height is None else args.height
    camera = parse_pose(args.pose, args.width, height)
    cloud = load_checkpoint(args.checkpoint)
    kw = _render_kwargs(args)
    start = time.perf_counter()
    result = render(cloud, camera, kw["near"], kw["far"], kw["tile_size"])
    seconds = time.perf_counter() - start
    args.out.parent.mkdir(parents=True, exist_ok=True)
    save_image(args.out, result.image)
    print(f"rendered {len(cloud)} Gaussians at {args.width}x{height} in {seconds:.4f} s")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from omnisplat.gradcheck import N_TERMS, TOLERANCE, run_suite

    if args.n_gaussians < 0 or args.scenes < 0:
        raise UsageError("--n-gaussians and --scenes must be non-negative")
    if args.width < 22 or args.width % 2:
        raise UsageError("--width must be even and at least 22 for the SSIM window")
    signs = None
    if args.mutate is not None:
        if not 0 <= args.mutate < N_TERMS:
            raise UsageError(f"--mutate must lie in [0, {N_TERMS - 1}]")
        signs = np.ones(N_TERMS)
        signs[args.mutate] = -1.0
        signs = signs.reshape(2, 3, 2)
    tol = TOLERANCE if args.tolerance is None else args.tolerance
    seed = 0 if args.seed is None else args.seed
    result = run_suite(seed, args.scenes, args.n_gaussians, args.width, args.lambda_ssim, tol,
                       eq_signs=signs, mutations=args.mutations)
    worst = result.worst_by_group()
    for name, err in worst.items():
        print(f"{name:14s} max rel error {err:.3e}  {'ok' if err < tol else 'FAIL'}")
    ok = result.passed
    if args.mutations:
        missed = [k for k, hit in result.caught.items() if not hit]
        print(f"sign mutations caught: {N_TERMS - len(missed)}/{N_TERMS}")
        ok = ok and not missed
    if args.out is not None:
        from omnisplat.plotting import plot_gradcheck

        args.out.mkdir(parents=True, exist_ok=True)
        _write_csv(args.out / "gradcheck.csv", ["group", "max_rel_error", "tolerance"],
                   [[k, f"{v:.6e}", tol] for k, v in worst.items()])
        if worst:
            plot_gradcheck(worst, tol, args.out / "gradcheck.png")
    print("gradcheck passed" if ok else "gradcheck FAILED")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_eval(args) -> int:
    from omnisplat.io import load_checkpoint, load_manifest
    from omnisplat.metrics import psnr, ssim
    from omnisplat.rasterizer import render

    manifest = load_manifest(args.manifest)
    entries = manifest.split(args.split)
    if not entries:
        raise UsageError(f"{args.manifest}: no views in split {args.split!r}")
    cloud = load_checkpoint(args.checkpoint)
    kw = _render_kwargs(args)
    names, ps, ss = [], [], []
    for e, (cam, img) in zip(entries, _load_views(entries)):
        res = render(cloud, cam, kw["near"], kw["far"], kw["tile_size"])
        names.append(Path(e.image_path).name)
        ps.append(psnr(res.image, img))
        ss.append(ssim(res.image, img))
    rows = [[n, f"{p:.4f}", f"{s:.6f}"] for n, p, s in zip(names, ps, ss)]
    rows.append(["mean", f"{np.mean(ps):.4f}", f"{np.mean(ss):.6f}"])
    for r in rows:
        print(f"{r[0]:24s} PSNR {r[1]:>8s} dB  SSIM {r[2]}")
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        _write_csv(args.out / "eval.csv", ["image", "psnr", "ssim"], rows)
        if not args.no_plots:
            from omnisplat.plotting import plot_eval

            plot_eval(names, ps, ss, args.out / "eval.png")
    return EXIT_OK


def cmd_synth(args) -> int:
    from omnisplat.synth import PRESETS, make_scene, write_scene

    if args.preset not in PRESETS:
        raise UsageError(f"unknown preset {args.preset!r}; choose from {sorted(PRESETS)}")
    scene = make_scene(args.preset, 0 if args.seed is None else args.seed)
    manifest = write_scene(scene, args.out_dir)
    print(json.dumps({"manifest": str(manifest), "views": len(scene.cameras), "gaussians": len(scene.gt)}))
    return EXIT_OK


COMMANDS = {"train": cmd_train, "render": cmd_render, "gradcheck": cmd_gradcheck, "eval": cmd_eval, "synth": cmd_synth}


def main(argv=None) -> int:
    from omnisplat.io import CheckpointVersionError, ManifestError, PlyError

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        _set_threads(args.threads)
        return COMMANDS[args.command](args)
    except (UsageError, ManifestError, PlyError, CheckpointVersionError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
