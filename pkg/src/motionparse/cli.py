"""Command line interface.

Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numerical failure.
Reports are ``key=value`` lines (or JSON with ``--json``) headed by
``report`` and ``report_version``.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import (
    DegeneracyError, DimensionError, DomainError, EmptyDomainError, FormatError,
    IllConditionedError, MotionParseError, NoSignalError,
)
from .fileio import (
    atomic_write_text, read_flow, read_grid, read_image, read_mask, read_pose, write_flow,
    write_grid, write_image, write_mask, write_pose,
)
from .geometry import Intrinsics, PoseSE3, se3_log
from .hmp import DEFAULT_ALPHA1, DEFAULT_ALPHA2, parse
from .losses import LossWeights, MonoInputs, StereoInputs, loss_mono, loss_mono_stereo
from .metrics import eval_depth, eval_scene_flow, eval_segmentation, median_scale
from .pose_optim import OptimSettings, estimate_pose, pose_error
from .scene import SceneSpec, random_scene_spec, synthesize_scene
from .segmentation import SegmentParams, segment_moving_objects
from .viz import flow_to_color, motion_to_color

REPORT_VERSION = 1

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

# file names inside a bundle directory written by ``synth``
BUNDLE_FILES = {
    "image_t": "image_t.pgm", "image_s": "image_s.pgm", "image_c": "image_c.pgm",
    "depth_t": "depth_t", "depth_s": "depth_s", "depth_c": "depth_c",
    "flow_fwd": "flow_fwd", "flow_bwd": "flow_bwd", "flow_fwd_png": "flow_fwd.png",
    "pose_ts": "pose_ts.txt", "pose_tc": "pose_tc.txt", "intrinsics": "intrinsics.txt",
    "segment": "segment.pgm", "visibility": "visibility.pgm", "dynamic_motion": "dynamic_motion",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _fmt(value) -> str:
    if value is None:
        return "absent"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _emit(report: dict, args):
    """Print the report and optionally store it with ``--report``."""
    doc = {"report": args.command, "report_version": REPORT_VERSION, **report}
    if args.json:
        text = json.dumps(doc, indent=2, sort_keys=False, allow_nan=True) + "\n"
    else:
        text = "".join(f"{k}={_fmt(v)}\n" for k, v in doc.items())
    sys.stdout.write(text)
    if args.report:
        atomic_write_text(args.report, text)


def _flatten(prefix: str, d: dict) -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(key + ".", v))
        else:
            out[key] = v
    return out


def _bundle_path(args, name: str, explicit: str | None = None):
    """Explicit file if given, else the matching file in ``--bundle`` (grids: any supported extension)."""
    if explicit:
        return explicit
    if not getattr(args, "bundle", None):
        raise UsageError(f"missing input {name}: pass it explicitly or use --bundle")
    base = Path(args.bundle) / BUNDLE_FILES[name]
    if base.suffix:
        return str(base)
    for ext in (".npy", ".pfm"):
        if base.with_suffix(ext).exists():
            return str(base.with_suffix(ext))
    return str(base.with_suffix(".pfm"))


def _intrinsics(args) -> Intrinsics:
    path = _bundle_path(args, "intrinsics", args.intrinsics)
    try:
        return Intrinsics.load(path)
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc.strerror or exc}") from None


def _pose_twist_report(prefix: str, T: PoseSE3) -> dict:
    xi = se3_log(T)
    return {f"{prefix}.twist": " ".join(repr(float(x)) for x in xi)}


# ---- subcommands -----------------------------------------------------------------

def cmd_synth(args):
    if args.spec:
        try:
            text = Path(args.spec).read_text()
        except OSError as exc:
            raise FormatError(f"cannot read {args.spec}: {exc.strerror or exc}") from None
        spec = SceneSpec.from_text(text)
        if args.seed is not None:
            spec.texture_seed = args.seed
    else:
        if args.seed is None:
            raise UsageError("synth needs a scene spec file or --seed")
        spec = random_scene_spec(args.seed, max_translation=args.max_translation, max_rotation_deg=args.max_rotation_deg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / "scene.txt", spec.to_text())
    ext = "." + args.grid_format
    bundles = synthesize_scene(spec)
    for b in bundles:
        d = out / f"pair_{b.frame_index:03d}" if len(bundles) > 1 else out
        d.mkdir(parents=True, exist_ok=True)
        write_image(d / BUNDLE_FILES["image_t"], b.image_t, bits=16)
        write_image(d / BUNDLE_FILES["image_s"], b.image_s, bits=16)
        write_grid(d / (BUNDLE_FILES["depth_t"] + ext), b.depth_t)
        write_grid(d / (BUNDLE_FILES["depth_s"] + ext), b.depth_s)
        write_flow(d / (BUNDLE_FILES["flow_fwd"] + ext), b.flow_fwd, b.flow_fwd_valid)
        write_flow(d / (BUNDLE_FILES["flow_bwd"] + ext), b.flow_bwd, b.flow_bwd_valid)
        flow_png = np.where(np.abs(np.nan_to_num(b.flow_fwd)) < 500, np.nan_to_num(b.flow_fwd), 0.0)
        write_flow(d / BUNDLE_FILES["flow_fwd_png"], flow_png, b.flow_fwd_valid)
        write_pose(d / BUNDLE_FILES["pose_ts"], b.pose_ts)
        atomic_write_text(d / BUNDLE_FILES["intrinsics"], b.intrinsics.to_text())
        write_mask(d / BUNDLE_FILES["segment"], b.segment)
        write_mask(d / BUNDLE_FILES["visibility"], b.visibility)
        write_grid(d / (BUNDLE_FILES["dynamic_motion"] + ext), b.extras["dynamic_motion"])
        if b.image_c is not None:
            write_image(d / BUNDLE_FILES["image_c"], b.image_c, bits=16)
            write_grid(d / (BUNDLE_FILES["depth_c"] + ext), b.depth_c)
            write_pose(d / BUNDLE_FILES["pose_tc"], b.pose_tc)
    _emit({"out": str(out), "pairs": len(bundles), "grid_format": args.grid_format, "texture_seed": spec.texture_seed}, args)


def _parse_inputs(args):
    K = _intrinsics(args)
    D_t = read_grid(_bundle_path(args, "depth_t", args.depth_t))
    D_s = read_grid(_bundle_path(args, "depth_s", args.depth_s))
    F_fwd, _ = read_flow(_bundle_path(args, "flow_fwd", args.flow_fwd))
    F_bwd, _ = read_flow(_bundle_path(args, "flow_bwd", args.flow_bwd))
    T = read_pose(_bundle_path(args, "pose_ts", args.pose))
    return K, D_t, D_s, F_fwd, F_bwd, T


def _hmp(args, K, D_t, D_s, F_fwd, F_bwd, T):
    S = read_grid(args.segment) if args.segment else np.zeros(D_t.shape)
    V = read_mask(args.visibility).astype(np.float64) if args.visibility else None
    return parse(D_t, D_s, F_fwd, F_bwd, T, S, K, args.alpha1, args.alpha2, visibility=V)


def cmd_parse(args):
    K, D_t, D_s, F_fwd, F_bwd, T = _parse_inputs(args)
    out = _hmp(args, K, D_t, D_s, F_fwd, F_bwd, T)
    report = {
        "max_rigid_residual": out.max_rigid_residual(),
        "visible_fraction": float(out.visibility.mean()),
        "binary_segment": out.binary_segment,
    }
    if args.segment and args.dynamic_motion:
        truth = read_grid(args.dynamic_motion)
        on = (read_mask(args.segment) > 0) & (out.visibility > 0)
        report["max_dynamic_error"] = float(np.max(np.abs(out.dynamic[on] - truth[on]), initial=0.0))
    if args.out:
        d = Path(args.out)
        d.mkdir(parents=True, exist_ok=True)
        ext = "." + args.grid_format
        write_grid(d / ("M_b" + ext), out.rigid)
        write_grid(d / ("M_d" + ext), out.dynamic)
        write_grid(d / ("M_b_hat" + ext), out.flow_background)
        write_mask(d / "V.pgm", out.visibility)
    _emit(report, args)


def cmd_loss(args):
    K, D_t, D_s, F_fwd, F_bwd, T = _parse_inputs(args)
    weights = LossWeights.load(args.weights) if args.weights else LossWeights()
    I_t = read_image(_bundle_path(args, "image_t", args.image_t))
    I_s = read_image(_bundle_path(args, "image_s", args.image_s))
    S = read_grid(args.segment) if args.segment else np.zeros(D_t.shape)
    inputs = MonoInputs(I_t, I_s, D_t, D_s, T, K, _hmp(args, K, D_t, D_s, F_fwd, F_bwd, T), S)
    if args.stereo:
        stereo = StereoInputs(
            read_image(_bundle_path(args, "image_c")),
            read_grid(_bundle_path(args, "depth_c")),
            read_pose(_bundle_path(args, "pose_tc")),
        )
        br = loss_mono_stereo(inputs, stereo, weights)
    else:
        br = loss_mono(inputs, weights)
    _emit(br.as_report(), args)


def cmd_optimize_pose(args):
    K = _intrinsics(args)
    I_t = read_image(_bundle_path(args, "image_t", args.image_t))
    I_s = read_image(_bundle_path(args, "image_s", args.image_s))
    D_t = read_grid(_bundle_path(args, "depth_t", args.depth_t))
    init = read_pose(args.init) if args.init else None
    weight = read_grid(args.weight) if args.weight else None
    settings = OptimSettings(max_iters=args.max_iters, n_levels=args.levels, beta=args.beta, method=args.method)
    est = estimate_pose(I_t, I_s, D_t, K, init, settings, weight)
    report = {"final_loss": est.final_loss, "iterations": est.iterations, **_pose_twist_report("pose", est.pose)}
    report["levels"] = len(est.trace)
    for i, tr in enumerate(est.trace):
        report[f"level.{i}.steps"] = len(tr) - 1
        report[f"level.{i}.loss"] = tr[-1]
    if args.truth:
        rot, trans = pose_error(est.pose, read_pose(args.truth))
        report["rot_error"] = rot
        report["trans_error"] = trans
    if args.out:
        write_pose(args.out, est.pose)
    _emit(report, args)


def cmd_segment(args):
    K, D_t, D_s, F_fwd, F_bwd, T = _parse_inputs(args)
    V = read_mask(args.visibility).astype(np.float64) if args.visibility else None
    params = SegmentParams(gamma=args.gamma, min_motion=args.min_motion, alpha1=args.alpha1, alpha2=args.alpha2, seed=args.seed)
    mask = segment_moving_objects(D_t, D_s, F_fwd, F_bwd, T, K, params, visibility=V)
    write_mask(args.out, mask)
    _emit({"out": args.out, "foreground_pixels": int(mask.sum()), "seed": args.seed}, args)


def cmd_eval_depth(args):
    pred = read_grid(args.pred)
    gt = read_grid(args.gt)
    valid = read_mask(args.valid) > 0 if args.valid else gt > 0
    report = {}
    if args.median_scale:
        pred, factor = median_scale(pred, gt, valid)
        report["scale_factor"] = factor
    res = eval_depth(pred, gt, valid, cap=args.cap)
    report.update(res.as_dict())
    _emit(report, args)


def cmd_eval_sceneflow(args):
    d1p, d1g = read_grid(args.d1_pred), read_grid(args.d1_gt)
    d2p, d2g = read_grid(args.d2_pred), read_grid(args.d2_gt)
    fp, fp_ok = read_flow(args.flow_pred)
    fg_, fg_ok = read_flow(args.flow_gt)
    fg = read_mask(args.fg) > 0
    valid = fg_ok & (read_mask(args.valid) > 0 if args.valid else True)
    res = eval_scene_flow(d1p, d1g, d2p, d2g, fp, fg_, fg, valid, mode=args.mode)
    _emit(_flatten("", res.as_dict()), args)


def cmd_eval_seg(args):
    res = eval_segmentation(read_mask(args.pred), read_mask(args.gt))
    _emit(res.as_dict(), args)


def cmd_viz(args):
    if args.kind == "flow":
        flow, valid = read_flow(args.input)
        img = flow_to_color(flow, valid, args.scale)
    else:
        m = read_grid(args.input)
        if m.ndim != 3 or m.shape[2] != 3:
            raise DimensionError("motion visualisation needs an (H, W, 3) grid")
        img = motion_to_color(m, args.scale)
    write_image(args.out, img)
    _emit({"out": args.out, "kind": args.kind}, args)


# ---- argument parsing ------------------------------------------------------------

def _add_common(p):
    p.add_argument("--report", help="also write the report to this file")
    p.add_argument("--json", action="store_true", help="emit JSON instead of key=value lines")


def _add_parse_inputs(p):
    p.add_argument("--bundle", help="directory written by synth; supplies any input not given explicitly")
    p.add_argument("--intrinsics")
    p.add_argument("--depth-t")
    p.add_argument("--depth-s")
    p.add_argument("--flow-fwd")
    p.add_argument("--flow-bwd")
    p.add_argument("--pose", help="T_{t->s} pose file")
    p.add_argument("--visibility", help="visibility mask overriding the flow consistency check")
    p.add_argument("--alpha1", type=float, default=DEFAULT_ALPHA1)
    p.add_argument("--alpha2", type=float, default=DEFAULT_ALPHA2)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="motionparse", description="3D motion parsing toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("synth", help="render an oracle scene to files")
    p.add_argument("spec", nargs="?", help="scene spec key=value file (omit for a seeded random scene)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, help="texture seed, or random-scene seed without a spec")
    p.add_argument("--max-translation", type=float, default=0.1)
    p.add_argument("--max-rotation-deg", type=float, default=2.0)
    p.add_argument("--grid-format", choices=("pfm", "npy"), default="pfm")
    _add_common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("parse", help="decompose 3D motion into rigid and dynamic parts")
    _add_parse_inputs(p)
    p.add_argument("--segment", help="moving-object mask S")
    p.add_argument("--dynamic-motion", help="ground-truth dynamic motion grid to compare M_d against")
    p.add_argument("--out", help="directory for M_b, M_d, M_b_hat and V")
    p.add_argument("--grid-format", choices=("pfm", "npy"), default="pfm")
    _add_common(p)
    p.set_defaults(func=cmd_parse)

    p = sub.add_parser("loss", help="per-term training loss breakdown")
    _add_parse_inputs(p)
    p.add_argument("--image-t")
    p.add_argument("--image-s")
    p.add_argument("--segment")
    p.add_argument("--weights", help="loss weights key=value file")
    p.add_argument("--stereo", action="store_true", help="add stereo terms from the bundle's image_c/depth_c/pose_tc")
    _add_common(p)
    p.set_defaults(func=cmd_loss)

    p = sub.add_parser("optimize-pose", help="recover T_{t->s} by direct alignment")
    p.add_argument("--bundle")
    p.add_argument("--intrinsics")
    p.add_argument("--image-t")
    p.add_argument("--image-s")
    p.add_argument("--depth-t")
    p.add_argument("--init", help="initial pose file (default identity)")
    p.add_argument("--weight", help="per-pixel weight grid")
    p.add_argument("--truth", help="reference pose file; adds pose errors to the report")
    p.add_argument("--max-iters", type=int, default=100)
    p.add_argument("--levels", type=int, default=4)
    p.add_argument("--beta", type=float, default=0.0)
    p.add_argument("--method", choices=("lbfgs", "gd"), default="lbfgs")
    p.add_argument("--out", help="write the estimated pose here")
    _add_common(p)
    p.set_defaults(func=cmd_optimize_pose)

    p = sub.add_parser("segment", help="moving-object mask from residual flow")
    _add_parse_inputs(p)
    p.add_argument("--out", required=True, help="mask image (0/255)")
    p.add_argument("--gamma", type=float, default=SegmentParams.gamma)
    p.add_argument("--min-motion", type=float, default=SegmentParams.min_motion)
    p.add_argument("--seed", type=int, default=0)
    _add_common(p)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("eval-depth", help="depth error metrics")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--valid", help="mask of evaluated pixels (default: gt > 0)")
    p.add_argument("--cap", type=float, default=80.0)
    p.add_argument("--median-scale", action="store_true")
    _add_common(p)
    p.set_defaults(func=cmd_eval_depth)

    p = sub.add_parser("eval-sceneflow", help="D1/D2/FL errors split by foreground")
    for name in ("d1-pred", "d1-gt", "d2-pred", "d2-gt", "flow-pred", "flow-gt", "fg"):
        p.add_argument(f"--{name}", required=True)
    p.add_argument("--valid")
    p.add_argument("--mode", choices=("mean", "outlier"), default="mean")
    _add_common(p)
    p.set_defaults(func=cmd_eval_sceneflow)

    p = sub.add_parser("eval-seg", help="segmentation accuracy and IoU")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_eval_seg)

    p = sub.add_parser("viz", help="colour-code a flow or motion grid")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True, help="image file (.ppm or .png)")
    p.add_argument("--kind", choices=("flow", "motion"), default="flow")
    p.add_argument("--scale", type=float, help="magnitude mapped to full saturation")
    _add_common(p)
    p.set_defaults(func=cmd_viz)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args.func(args)
        return EXIT_OK
    except SystemExit as exc:  # --help and --version
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (IllConditionedError, NoSignalError, DegeneracyError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, DimensionError, DomainError, EmptyDomainError, MotionParseError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
