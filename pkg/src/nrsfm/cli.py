"""Command line: ``nrsfm synth | reconstruct | eval | sweep``.

Exit codes: 0 success, 2 usage, 3 I/O or malformed/inconsistent input
files, 4 solvability, 5 degeneracy, 6 over-rejection.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import asdict

import numpy as np

from . import __version__
from .errors import NRSFMError
from .evaluation import METHODS, MetricsReport, detection_scores, format_sweep_csv, reprojection_rms, reprojection_variance, shape_error, sweep
from .factor import SolverConfig
from .robust import RobustConfig, robust_reconstruct
from .serialize import (
    audit_to_dict,
    format_xyz,
    ground_truth_from_dict,
    ground_truth_to_dict,
    read_json,
    reconstruction_to_dict,
    rle_decode,
    write_json,
    write_manifest,
)
from .synth import SceneConfig, corrupt, generate_scene
from .tracking import TrackingMatrix, atomic_write_text, load_tracking, save_tracking
from .upgrade import UpgradeConfig

EXIT_USAGE = 2
EXIT_IO = 3


class InputMismatch(Exception):
    """Input files that do not belong together."""


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {text}")
    return v


def _nonneg_float(text):
    v = float(text)
    if not v >= 0:
        raise argparse.ArgumentTypeError(f"must be non-negative, got {text}")
    return v


def _range(text):
    """``start:stop:step`` (inclusive) or a comma list."""
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise argparse.ArgumentTypeError(f"expected start:stop:step, got {text!r}")
        a, b, s = (float(p) for p in parts)
        if s <= 0 or b < a:
            raise argparse.ArgumentTypeError(f"empty or invalid range {text!r}")
        n = int(np.floor((b - a) / s + 1e-9)) + 1
        return [round(a + i * s, 12) for i in range(n)]
    return _list(text)


def _list(text):
    try:
        vals = [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _add_scene_flags(p, sweep_mode=False):
    p.add_argument("--frames", type=_positive_int, default=100)
    p.add_argument("--side-points", type=_positive_int, default=21)
    p.add_argument("--dynamic-sets", type=int, nargs=2, default=[3, 33], metavar=("SETS", "SIZE"))
    p.add_argument("--image-size", type=_positive_int, default=800)
    p.add_argument("--amplitude", type=_nonneg_float, default=0.5)
    if not sweep_mode:
        p.add_argument("--noise", "--noise-sigma", dest="noise_sigma", type=_nonneg_float, default=0.0)
        p.add_argument("--outliers", "--outlier-ratio", dest="outlier_ratio", type=_nonneg_float, default=0.0)
        p.add_argument("--seed", type=int, default=0)


def _add_robust_flags(p):
    d = RobustConfig()
    s = SolverConfig()
    p.add_argument("--threshold-multiplier", type=float, default=d.threshold_multiplier)
    p.add_argument("--rejection-rounds", type=_positive_int, default=d.rejection_rounds)
    p.add_argument("--weight-floor", type=_nonneg_float, default=d.weight_floor)
    p.add_argument("--residual-floor", type=_nonneg_float, default=d.residual_floor)
    p.add_argument("--anneal", type=_nonneg_float, default=d.anneal)
    p.add_argument("--kernel-divisor", type=_nonneg_float, default=d.kernel_divisor)
    p.add_argument("--tol", type=_nonneg_float, default=s.tol)
    p.add_argument("--max-iters", type=_positive_int, default=s.max_iters)


def _add_upgrade_flags(p):
    d = UpgradeConfig()
    p.add_argument("--degenerate-tol", type=_nonneg_float, default=d.degenerate_tol)
    p.add_argument("--n-starts", type=_positive_int, default=d.n_starts)
    p.add_argument("--max-refinements", type=_positive_int, default=d.max_refinements)
    p.add_argument("--upgrade-seed", type=int, default=d.seed)


def _scene_config(args, **over):
    kw = dict(
        frames=args.frames,
        side_points=args.side_points,
        dynamic_sets=tuple(args.dynamic_sets),
        image_size=args.image_size,
        amplitude=args.amplitude,
    )
    for key in ("noise_sigma", "outlier_ratio", "seed"):
        if hasattr(args, key):
            kw[key] = getattr(args, key)
    kw.update(over)
    return SceneConfig(**kw)


def _robust_config(args):
    return RobustConfig(
        threshold_multiplier=args.threshold_multiplier,
        rejection_rounds=args.rejection_rounds,
        weight_floor=args.weight_floor,
        residual_floor=args.residual_floor,
        anneal=args.anneal,
        kernel_divisor=args.kernel_divisor,
        solver=SolverConfig(tol=args.tol, max_iters=args.max_iters),
    )


def _upgrade_config(args):
    return UpgradeConfig(
        degenerate_tol=args.degenerate_tol,
        n_starts=args.n_starts,
        max_refinements=args.max_refinements,
        seed=args.upgrade_seed,
    )


def _echo(args, skip=("func", "jobs")):
    """Canonical command echo: subcommand plus every resolved option, in a
    fixed order. Execution-only options that cannot change results are left
    out so that reruns with different parallelism match."""
    out = [args.command]
    for key in sorted(vars(args)):
        if key in skip or key == "command":
            continue
        out.append(f"--{key.replace('_', '-')}={getattr(args, key)}")
    return out


def _make_dir(path):
    os.makedirs(path, exist_ok=True)
    return path


def cmd_synth(args):
    cfg = _scene_config(args)
    out = _make_dir(args.out_dir)
    gt = generate_scene(cfg)
    W, gt = corrupt(gt, cfg)
    paths = [os.path.join(out, name) for name in ("clean.trk", "corrupted.trk", "ground_truth.json")]
    save_tracking(gt.clean_tracking, paths[0])
    save_tracking(W, paths[1])
    write_json(paths[2], ground_truth_to_dict(gt))
    write_manifest(
        os.path.join(out, "manifest.json"), _echo(args), cfg.to_dict(), [cfg.seed], __version__, outputs=paths
    )
    print(f"wrote {cfg.frames} frames x {cfg.points} points to {out}")
    return 0


def cmd_reconstruct(args):
    W = load_tracking(args.input)
    cfg = _robust_config(args)
    ucfg = _upgrade_config(args)
    out = _make_dir(args.out_dir)
    rec = robust_reconstruct(
        W, args.bases, cfg, augmented=not args.registered, upgrade=not args.no_upgrade,
        upgrade_cfg=ucfg, reject=(args.mode == "robust"),
    )
    paths = []
    p = os.path.join(out, "reconstruction.json")
    write_json(p, reconstruction_to_dict(rec, args.bases))
    paths.append(p)
    p = os.path.join(out, "reprojection.trk")
    P = rec.reproject()
    save_tracking(TrackingMatrix(P, np.ones((W.frames, W.points), dtype=bool)), p)
    paths.append(p)
    p = os.path.join(out, "audit.json")
    write_json(p, audit_to_dict(rec.audit))
    paths.append(p)
    if rec.euclidean is not None:
        sdir = _make_dir(os.path.join(out, "shapes"))
        for i, S in enumerate(rec.euclidean.shapes):
            p = os.path.join(sdir, f"frame_{i:04d}.xyz")
            atomic_write_text(p, format_xyz(S))
            paths.append(p)
    config = {"robust": _config_dict(cfg), "upgrade": asdict(ucfg), "bases": args.bases, "mode": args.mode}
    write_manifest(os.path.join(out, "manifest.json"), _echo(args), config, [ucfg.seed], __version__,
                   inputs=[args.input], outputs=paths)
    rejected = int(np.sum(W.mask & ~rec.inlier_mask))
    print(f"{args.mode}: {rejected} cells rejected, rms {reprojection_rms(W, rec, rec.inlier_mask):.6g}")
    return 0


def _config_dict(cfg):
    d = asdict(cfg)
    return d


def cmd_eval(args):
    gt = ground_truth_from_dict(read_json(args.gt))
    doc = read_json(os.path.join(args.recon, "reconstruction.json"))
    P = load_tracking(os.path.join(args.recon, "reprojection.trk"))
    if (doc["frames"], doc["points"]) != (gt.frames, gt.points) or P.values.shape != gt.clean_tracking.values.shape:
        raise InputMismatch(
            f"reconstruction is {doc['frames']}x{doc['points']}, ground truth {gt.frames}x{gt.points}"
        )
    inliers = rle_decode(doc["inlier_mask"])
    W = load_tracking(args.tracking) if args.tracking else gt.clean_tracking
    if W.values.shape != P.values.shape:
        raise InputMismatch("tracking file does not match the reconstruction")
    rep = MetricsReport(
        reproj_variance_inliers=reprojection_variance(gt, P.values),
        reproj_rms=reprojection_rms(W, P.values, inliers),
        audit=read_json(os.path.join(args.recon, "audit.json"))["rounds"],
    )
    if "shapes" in doc:
        shapes = np.asarray(doc["shapes"], dtype=float).reshape(gt.frames, 3, gt.points)
        rep.shape_error, rep.shape_mirrored = shape_error(shapes, gt.shapes)
    sc = detection_scores(inliers, gt.outlier_mask)
    rep.detection_precision, rep.detection_recall, rep.precision_defined = sc.precision, sc.recall, sc.precision_defined
    out = args.out or os.path.join(args.recon, "metrics.json")
    write_json(out, rep.to_dict())
    print(f"reprojection variance (inliers): {rep.reproj_variance_inliers:.6g}")
    print(f"reprojection rms: {rep.reproj_rms:.6g}")
    if rep.shape_error is not None:
        print(f"shape error (fraction of diameter): {rep.shape_error:.6g}" + (" [mirrored]" if rep.shape_mirrored else ""))
    prec = "n/a (nothing rejected)" if not sc.precision_defined else f"{sc.precision:.4f}"
    rec = "n/a (no outliers)" if np.isnan(sc.recall) else f"{sc.recall:.4f}"
    print(f"detection precision: {prec}")
    print(f"detection recall: {rec}")
    return 0


def cmd_sweep(args):
    scene = _scene_config(args)
    cfg = _robust_config(args)
    seeds = [args.seed + i for i in range(args.trials)]
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    bad = [m for m in methods if m not in METHODS]
    if bad or not methods:
        raise argparse.ArgumentTypeError(f"unknown methods {bad}; choose from {','.join(METHODS)}")
    out = _make_dir(args.out_dir)
    rows, code = sweep(args.noise, args.ratios, seeds, methods, k=args.bases, scene=scene, cfg=cfg, jobs=args.jobs)
    p = os.path.join(out, "sweep.csv")
    atomic_write_text(p, format_sweep_csv(rows))
    config = {"scene": scene.to_dict(), "robust": _config_dict(cfg), "noise": args.noise, "ratios": args.ratios,
              "methods": methods, "bases": args.bases}
    write_manifest(os.path.join(out, "manifest.json"), _echo(args), config, seeds, __version__, outputs=[p])
    failed = sum(r.failures for r in rows)
    print(f"wrote {len(rows)} rows to {p} ({failed} failed trials)")
    if failed == sum(r.trials for r in rows):
        return code or 5
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="nrsfm", description="Robust nonrigid factorization toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a deformable-cube benchmark")
    _add_scene_flags(p)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("reconstruct", help="reconstruct structure and motion from a TRK file")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--bases", type=_positive_int, required=True)
    p.add_argument("--mode", choices=["direct", "robust"], default="robust")
    p.add_argument("--registered", action="store_true", help="centroid-registered rank-3k pipeline")
    p.add_argument("--no-upgrade", action="store_true", help="skip the metric upgrade")
    _add_robust_flags(p)
    _add_upgrade_flags(p)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("eval", help="score a reconstruction against ground truth")
    p.add_argument("--recon", required=True, help="reconstruction output directory")
    p.add_argument("--gt", required=True, help="ground-truth JSON")
    p.add_argument("--tracking", help="observed TRK for the RMS (default: clean tracks)")
    p.add_argument("--out", help="metrics JSON path (default: <recon>/metrics.json)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="noise/outlier sweep to CSV")
    p.add_argument("--noise", type=_range, default=[1.0, 2.0, 3.0, 4.0, 5.0])
    p.add_argument("--ratios", type=_list, default=[0.05, 0.20])
    p.add_argument("--trials", type=_positive_int, default=100)
    p.add_argument("--seed", type=int, default=0, help="first seed; trials use seed, seed+1, ...")
    p.add_argument("--methods", default="direct,robust")
    p.add_argument("--bases", type=_positive_int, default=2)
    p.add_argument("--jobs", type=_positive_int, default=1)
    _add_scene_flags(p, sweep_mode=True)
    _add_robust_flags(p)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except argparse.ArgumentTypeError as exc:
        print(f"nrsfm: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NRSFMError as exc:
        print(f"nrsfm: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, InputMismatch, KeyError) as exc:
        print(f"nrsfm: error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"nrsfm: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
