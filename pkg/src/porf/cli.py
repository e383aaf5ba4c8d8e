"""Command-line entry point: ``porf {synth,refine,eval,ablate,render}``.

Exit codes: 0 success, 2 configuration error, 3 data or parse error,
4 training divergence.
"""

import argparse
import csv
import logging
import os
import sys

import numpy as np

from . import autodiff as ad
from . import render
from .config import dump_config, load_config, with_overrides
from .epipolar import read_matches, write_matches
from .errors import ConfigError, DegenerateGeometry, DivergenceError, InvalidArgument, ParseError
from .geometry import Intrinsics
from .harness import (Dataset, evaluate, orbit_trajectory, perturb_poses, pixel_grid, psnr, read_poses,
                      render_gt_image, synth_correspondences, write_poses)
from .trainer import MODES, ablate, background_colour, format_ablation, train, write_ablation_csv

log = logging.getLogger("porf")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4
FRAME_PATTERN = "frame_{:04d}.ppm"


def _setup_logging():
    level = os.environ.get("PORF_LOG", "info").strip().lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        raise ConfigError(f"PORF_LOG must be one of error, info, debug (got {level!r})", "PORF_LOG")
    logging.basicConfig(level=levels[level], format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def intrinsics_of(cfg):
    t = cfg.trajectory
    return Intrinsics.from_fov(t.width, t.height, t.fov_deg)


def _makedirs(path):
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {path}: {exc.strerror}", "paths.out_dir") from None
    if not os.access(path, os.W_OK):
        raise ConfigError(f"output directory {path} is not writable", "paths.out_dir")


# ---- synth -------------------------------------------------------------------------


def cmd_synth(cfg, out=None):
    """Write a benchmark to ``out`` (default: the configured data directory)."""
    out = os.path.abspath(out) if out else cfg.path("data_dir")
    scene = cfg.scene.build()
    K = intrinsics_of(cfg)
    t = cfg.trajectory
    gt = orbit_trajectory(t.n_frames, t.radius, t.elevation_deg, K)
    init = perturb_poses(gt, cfg.noise)
    c = cfg.correspondences
    _makedirs(os.path.join(out, "frames"))
    matches = synth_correspondences(scene, gt, c.per_pair_count, c.noise_px, c.outlier_rate, c.seed,
                                    c.max_angle_deg)
    write_poses(os.path.join(out, "gt_poses.txt"), gt)
    write_poses(os.path.join(out, "init_poses.txt"), init)
    write_matches(os.path.join(out, "matches.txt"), matches)
    for k, pose in enumerate(gt.poses):
        render.write_ppm(os.path.join(out, "frames", FRAME_PATTERN.format(k)), render_gt_image(scene, pose, K))
    with open(os.path.join(out, "manifest.txt"), "w", encoding="utf-8") as fh:
        fh.write(dump_config(cfg))
    log.info("wrote %d frames and %d matched pairs to %s", len(gt), len(matches), out)
    print(f"synth: {len(gt)} frames, {len(matches)} pairs -> {out}")
    return EXIT_OK


# ---- refine / ablate -------------------------------------------------------------------


def load_dataset(cfg, need_matches):
    data = cfg.path("data_dir")
    K = intrinsics_of(cfg)
    init_path = os.path.join(data, "init_poses.txt")
    if not os.path.exists(init_path):
        raise ConfigError(f"missing {init_path}; run 'porf synth' first", "paths.data_dir")
    match_path = os.path.join(data, "matches.txt")
    if need_matches and not os.path.exists(match_path):
        raise ConfigError(f"mode {cfg.train.mode} needs correspondences but {match_path} is missing",
                          "paths.data_dir")
    init = read_poses(init_path, K)
    images = []
    for k in range(len(init)):
        path = os.path.join(data, "frames", FRAME_PATTERN.format(k))
        if not os.path.exists(path):
            raise ConfigError(f"missing image {path}", "paths.data_dir")
        images.append(render.read_ppm(path))
    matches = read_matches(match_path, K) if os.path.exists(match_path) else []
    gt_path = os.path.join(data, "gt_poses.txt")
    gt = read_poses(gt_path, K) if os.path.exists(gt_path) else None
    return Dataset(images, init, K, matches, gt)


def cmd_refine(cfg):
    ds = load_dataset(cfg, cfg.train.mode in ("baseline_eg", "full"))
    out = cfg.path("out_dir")
    _makedirs(out)
    ckpt = cfg.checkpoint_path
    res = train(cfg.train, ds, checkpoint_path=ckpt)
    res.poses.intrinsics = ds.intrinsics
    write_poses(os.path.join(out, "refined_poses.txt"), res.poses)
    res.log.write_csv(os.path.join(out, "runlog.csv"))
    last = res.log.rows[-1] if res.log.rows else None
    if last is not None and np.isfinite(last["rot_err_deg"]):
        print(f"refine[{cfg.train.mode}]: rot {res.log.initial_rot:.4f} -> {last['rot_err_deg']:.4f} deg, "
              f"trans {res.log.initial_trans:.3f} -> {last['trans_err']:.3f}")
    else:
        print(f"refine[{cfg.train.mode}]: {cfg.train.iterations} iterations -> {out}")
    return EXIT_OK


def cmd_ablate(cfg):
    ds = load_dataset(cfg, True)
    out = cfg.path("out_dir")
    _makedirs(out)
    rows = ablate(cfg.train, ds)
    text = format_ablation(rows, cfg.train)
    with open(os.path.join(out, "ablation.txt"), "w", encoding="utf-8") as fh:
        fh.write(text)
    write_ablation_csv(os.path.join(out, "ablation.csv"), rows)
    for r in rows:
        if r.log is not None:
            r.log.write_csv(os.path.join(out, f"runlog_{r.mode}.csv"))
    print(text, end="")
    return EXIT_DIVERGED if any(r.diverged for r in rows) else EXIT_OK


# ---- eval --------------------------------------------------------------------------------


def cmd_eval(est_path, gt_path, out_dir=None):
    est = read_poses(est_path)
    gt = read_poses(gt_path)
    if sorted(est.ids.tolist()) != sorted(gt.ids.tolist()):
        raise InvalidArgument(f"{est_path} and {gt_path} cover different frames")
    rep = evaluate(est, gt)
    out_dir = out_dir or os.path.dirname(os.path.abspath(est_path))
    _makedirs(out_dir)
    with open(os.path.join(out_dir, "eval.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame", "rot_err_deg", "trans_err"])
        for fid, r, t in zip(rep.ids, rep.rot_err_deg, rep.trans_err):
            w.writerow([int(fid), format(float(r), ".17g"), format(float(t), ".17g")])
    print(f"mean rotation error: {rep.mean_rot:.6f} deg")
    print(f"mean translation error: {rep.mean_trans:.6f} (scene units x1000)")
    return EXIT_OK


# ---- render ------------------------------------------------------------------------------


def render_image(sdf, colour, params, pose, K, near, far, samples, chunk=4096):
    """Render a full frame with bin-midpoint samples (deterministic)."""
    pix = pixel_grid(K)
    out = np.empty((len(pix), 3))
    for a in range(0, len(pix), chunk):
        b = min(a + chunk, len(pix))
        tape = ad.Tape()
        o, d = render.camera_rays(pose.r.reshape(1, 3), pose.t.reshape(1, 3), K, pix[a:b])
        t = render.stratified_samples(near, far, samples, None, size=b - a)
        res = render.render_rays(sdf, colour, params, o, d, t, tape, background_colour(params, tape))
        out[a:b] = res.rgb.value
    return out.reshape(K.height, K.width, 3)


def cmd_render(cfg, poses_path, out_dir):
    ckpt = cfg.checkpoint_path
    if not os.path.exists(ckpt):
        raise ConfigError(f"missing checkpoint {ckpt}; run 'porf refine' first", "paths.checkpoint")
    params = ad.load_checkpoint(ckpt)
    K = intrinsics_of(cfg)
    poses = read_poses(poses_path, K)
    sdf, colour = render.make_fields(cfg.train.preset, precision="float64")
    for seg in (sdf.segment, sdf.log_s_segment, colour.segment):
        if seg not in params.segments:
            raise ConfigError(f"checkpoint {ckpt} lacks segment {seg!r}", "paths.checkpoint")
    _makedirs(out_dir)
    data = cfg.path("data_dir")
    rows = []
    for fid, pose in zip(poses.ids, poses.poses):
        img = render_image(sdf, colour, params, pose, K, cfg.train.near, cfg.train.far, cfg.train.samples)
        render.write_ppm(os.path.join(out_dir, FRAME_PATTERN.format(int(fid))), img)
        ref_path = os.path.join(data, "frames", FRAME_PATTERN.format(int(fid)))
        value = psnr(img, render.read_ppm(ref_path)) if os.path.exists(ref_path) else float("nan")
        rows.append((int(fid), value))
    finite = [v for _, v in rows if np.isfinite(v)]
    mean = float(np.mean(finite)) if finite else float("nan")
    with open(os.path.join(out_dir, "psnr.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame", "psnr_db"])
        for fid, v in rows:
            w.writerow([fid, format(v, ".17g")])
        w.writerow(["mean", format(mean, ".17g")])
    print(f"render: {len(rows)} frames, mean PSNR {mean:.3f} dB -> {out_dir}")
    return EXIT_OK


# ---- argument handling ---------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="porf", description="Pose refinement with a pose residual field.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, mode=True):
        sp.add_argument("--config", required=True, metavar="PATH")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--threads", type=int)
        sp.add_argument("--out", metavar="DIR")
        if mode:
            sp.add_argument("--mode", choices=MODES)
            sp.add_argument("--iterations", type=int)

    common(sub.add_parser("synth", help="generate a synthetic benchmark"), mode=False)
    common(sub.add_parser("refine", help="jointly optimise poses and the surface"))
    common(sub.add_parser("ablate", help="run all four training modes"))
    sp = sub.add_parser("render", help="render frames with a trained model and report PSNR")
    common(sp)
    sp.add_argument("--poses", required=True, metavar="PATH")
    sp = sub.add_parser("eval", help="align an estimated trajectory and report errors")
    sp.add_argument("est", metavar="EST_POSES")
    sp.add_argument("gt", metavar="GT_POSES")
    sp.add_argument("--out", metavar="DIR")
    sp.add_argument("--config", metavar="PATH", help="accepted for symmetry; unused")
    return p


def _resolved(args, require=()):
    cfg = load_config(args.config, require)
    threads = args.threads
    if threads is not None and threads < 1:
        raise ConfigError("--threads must be at least 1", "threads")
    return with_overrides(cfg, mode=getattr(args, "mode", None), iterations=getattr(args, "iterations", None),
                          seed=args.seed, threads=threads, out=args.out)


def run(argv=None):
    args = build_parser().parse_args(argv)
    try:
        _setup_logging()
        if args.command == "synth":
            cfg = _resolved(args, require=("scene", "trajectory", "noise"))
            return cmd_synth(cfg, args.out)
        if args.command == "refine":
            return cmd_refine(_resolved(args))
        if args.command == "ablate":
            return cmd_ablate(_resolved(args))
        if args.command == "render":
            cfg = _resolved(args)
            return cmd_render(cfg, args.poses, cfg.path("out_dir"))
        if args.command == "eval":
            return cmd_eval(args.est, args.gt, args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        where = f" (last good parameters in {exc.checkpoint})" if exc.checkpoint else ""
        print(f"diverged: {exc}{where}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ParseError, InvalidArgument, DegenerateGeometry, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_CONFIG


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
