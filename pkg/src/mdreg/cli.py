"""Command-line interface.

Exit codes: 0 success, 2 usage or configuration error, 3 bad or missing data,
4 numerical abort.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import evalsynth, plot
from .engine import DEFAULT_LAMBDAS, NumericalAbort, RegistrationConfig, lambda_sweep, register, train
from .evalsynth import dice, warp_labels
from .fields import ConfigurationError, GeometryError, warp
from .io import FormatError, atomic_write, load_checkpoint, read_header, read_volume, save_checkpoint, write_volume
from .objective import ncc
from .transform import DeformationField, count_nonpositive_jacobian, jacobian_determinant

log = logging.getLogger("mdreg")

METRICS_SCHEMA = "mdreg-metrics"
METRICS_VERSION = 1


class UsageError(Exception):
    pass


def _int_list(text):
    try:
        out = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not out:
        raise argparse.ArgumentTypeError("empty list")
    return out


def _float_list(text):
    try:
        out = [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if not out:
        raise argparse.ArgumentTypeError("empty list")
    return out


def _num(x):
    """Locale-independent number text."""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".6f")


def _load_config(args):
    d = {}
    if getattr(args, "config", None):
        try:
            d = json.loads(Path(args.config).read_text())
        except (json.JSONDecodeError, UnicodeDecodeError) as e:
            raise UsageError(f"cannot parse config {args.config}: {e}") from None
        if not isinstance(d, dict):
            raise UsageError(f"config {args.config} must be a JSON object")
    try:
        cfg = RegistrationConfig.from_dict(d)
    except TypeError as e:
        raise UsageError(f"bad config: {e}") from None
    over = {}
    for key in ("iterations", "lam", "levels", "seed", "width"):
        v = getattr(args, key, None)
        if v is not None:
            over[key] = v
    if getattr(args, "no_smoothing", False):
        over["smoothing_enabled"] = False
    return cfg.replace(**over) if over else cfg


def _scalar(path):
    arr, header = read_volume(path, with_header=True)
    if header["kind"] != "scalar":
        raise FormatError(f"expected a scalar volume, found {header['kind']}", path, 0)
    return arr.astype(np.float64)


def _field(path):
    arr, header = read_volume(path, with_header=True)
    if header["kind"] != "vector":
        raise FormatError(f"expected a vector field, found {header['kind']}", path, 0)
    return arr.astype(np.float64)


def _labels(path):
    arr, header = read_volume(path, with_header=True)
    if header["kind"] != "labels":
        raise FormatError(f"expected a label volume, found {header['kind']}", path, 0)
    return arr


def _write_pair(pair, out, prov):
    write_volume(pair.fixed, out / "fixed", provenance=prov)
    write_volume(pair.moving, out / "moving", provenance=prov)
    write_volume(pair.fixed_labels, out / "fixed_labels", kind="labels", provenance=prov)
    write_volume(pair.moving_labels, out / "moving_labels", kind="labels", provenance=prov)
    write_volume(pair.svf, out / "svf", kind="vector", provenance=prov)
    write_volume(pair.disp, out / "disp", kind="vector", provenance=prov)


def cmd_synth(args):
    out = Path(args.out)
    kw = dict(dims=tuple(args.dims), magnitude=args.mag, blobs=args.blobs, noise=args.noise)
    if args.count == 1:
        pair = evalsynth.synth_pair(args.seed, **kw)
        _write_pair(pair, out, {"seed": args.seed})
        print(f"wrote pair to {out}")
        return 0
    pairs = evalsynth.synth_suite(args.count, args.seed, shared_template=True, **kw)
    write_volume(pairs[0].moving, out / "template", provenance={"seed": args.seed})
    write_volume(pairs[0].moving_labels, out / "template_labels", kind="labels", provenance={"seed": args.seed})
    for i, pair in enumerate(pairs):
        _write_pair(pair, out / f"pair_{i:03d}", {"seed": pair.seed})
    print(f"wrote {len(pairs)} pairs to {out}")
    return 0


def _scalar_volumes(data_dir):
    root = Path(data_dir)
    if not root.is_dir():
        raise FileNotFoundError(f"no such directory: {data_dir}")
    paths = []
    for p in sorted(root.rglob("*.json")):
        try:
            if read_header(p)["kind"] == "scalar":
                paths.append(p)
        except FormatError:
            continue
    if not paths:
        raise FormatError("no scalar volumes found", root, 0)
    return paths


def cmd_train(args):
    cfg = _load_config(args).replace(mode="network")
    paths = _scalar_volumes(args.data_dir)
    images = [_scalar(p) for p in paths]
    lines = ["iteration,loss"]

    def cb(it, lb):
        lines.append(f"{it},{lb.value:.10f}")
        if args.history is None:
            print(lines[-1], flush=True)

    if args.history is None:
        print(lines[0])
    params, _ = train(images, cfg, cb)
    save_checkpoint(params, cfg, args.out_checkpoint)
    if args.history is not None:
        atomic_write(args.history, ("\n".join(lines) + "\n").encode())
    log.info("trained on %d images, checkpoint %s", len(images), args.out_checkpoint)
    return 0


def cmd_register(args):
    if args.checkpoint:
        params, cfg = load_checkpoint(args.checkpoint)
        if args.config or args.iterations is not None or args.lam is not None:
            log.warning("network mode uses the checkpoint's config; overrides ignored")
    else:
        params, cfg = None, _load_config(args).replace(mode="direct")
    fixed = _scalar(args.fixed)
    moving = _scalar(args.moving)
    if fixed.shape != moving.shape:
        raise GeometryError(f"fixed {fixed.shape} vs moving {moving.shape}")
    res = register(params, fixed, moving, cfg)
    out = Path(args.out_dir)
    prov = {"config_digest": cfg.digest(), "seed": cfg.seed}
    write_volume(res.svf, out / "svf", kind="vector", provenance=prov)
    write_volume(res.forward.disp, out / "forward", kind="vector", provenance=prov)
    write_volume(res.inverse.disp, out / "inverse", kind="vector", provenance=prov)
    # warp with the field exactly as stored so `warp` reproduces this image
    fwd = res.forward.disp.astype(np.float32).astype(np.float64)
    warped = warp(moving, fwd)
    write_volume(warped, out / "warped", provenance=prov)
    metrics = {
        "schema": METRICS_SCHEMA,
        "version": METRICS_VERSION,
        "mode": cfg.mode,
        "config_digest": cfg.digest(),
        "ncc_before": float(ncc(fixed, moving)),
        "ncc_after": float(ncc(fixed, warped)),
        "folds": count_nonpositive_jacobian(DeformationField(fwd)),
        "seconds": res.seconds,
        "loss": res.loss.value,
        "iterations": len(res.history),
    }
    atomic_write(out / "metrics.json", (json.dumps(metrics, indent=1) + "\n").encode())
    print(f"ncc {_num(metrics['ncc_before'])} -> {_num(metrics['ncc_after'])}, folds {metrics['folds']}")
    return 0


def cmd_warp(args):
    disp = _field(args.field)
    if args.image:
        out = warp(_scalar(args.image), disp)
        write_volume(out, args.out)
    else:
        out = warp_labels(_labels(args.labels), disp)
        write_volume(out, args.out, kind="labels")
    return 0


def cmd_jacobian(args):
    det = jacobian_determinant(DeformationField(_field(args.field)))
    if args.out:
        write_volume(det, args.out)
    print(f"folds {int(np.count_nonzero(det <= 0))}")
    return 0


def cmd_dice(args):
    a, b = _labels(args.a), _labels(args.b)
    scores, mean = dice(a, b, args.labels)
    print("label,dice")
    for lab, s in scores.items():
        print(f"{lab},{_num(s)}")
    print(f"mean,{_num(mean)}")
    return 0


def _suite_from_dir(root):
    root = Path(root)
    template = _scalar(root / "template")
    template_labels = _labels(root / "template_labels")
    pair_dirs = sorted(p for p in root.iterdir() if p.is_dir() and (p / "fixed.json").exists())
    if not pair_dirs:
        raise FormatError("no pair directories found", root, 0)
    images = [_scalar(p / "fixed") for p in pair_dirs]
    labels = [_labels(p / "fixed_labels") for p in pair_dirs]
    return template, template_labels, images, labels


def cmd_sweep(args):
    cfg = _load_config(args)
    if args.direct:
        cfg = cfg.replace(mode="direct")
    if args.data_dir:
        template, template_labels, images, labels = _suite_from_dir(args.data_dir)
    else:
        pairs = evalsynth.synth_suite(args.pairs, args.seed or 0, shared_template=True,
                                      dims=tuple(args.dims), magnitude=args.mag)
        template, template_labels = pairs[0].moving, pairs[0].moving_labels
        images = [p.fixed for p in pairs]
        labels = [p.fixed_labels for p in pairs]
    if cfg.mode == "network":
        if len(images) < 2:
            raise UsageError("network-mode sweep needs at least two pairs (train and validation halves)")
        half = len(images) // 2
        train_images, val_images, val_labels = images[:half], images[half:], labels[half:]
    else:
        train_images, val_images, val_labels = [], images, labels
    res = lambda_sweep(train_images, val_images, val_labels, template, template_labels, cfg, args.lambdas)
    rows = ["lambda,mean_dice,mean_folds,total_folds,selected"]
    for r in res.rows:
        rows.append(f"{r.lam:g},{_num(r.dice)},{_num(r.folds)},{r.total_folds},{int(r.lam == res.selected)}")
    atomic_write(args.out_table, ("\n".join(rows) + "\n").encode())
    flag = " (no fold-free lambda; fewest folds chosen)" if res.flagged else ""
    print(f"selected lambda {res.selected:g}{flag}")
    return 0


def cmd_plot(args):
    if args.field:
        disp = _field(args.field)
        d2 = plot.take_slice(disp, args.slice_axis, args.slice_index)
        rgb = plot.grid_image(d2, spacing=args.spacing, scale=args.scale)
    else:
        arr, header = read_volume(args.jacobian, with_header=True)
        if header["kind"] == "vector":
            arr = jacobian_determinant(DeformationField(arr.astype(np.float64)))
        elif header["kind"] != "scalar":
            raise FormatError(f"cannot plot a {header['kind']} volume as a determinant map", args.jacobian, 0)
        rgb = plot.jacobian_image(plot.take_scalar_slice(arr, args.slice_axis, args.slice_index), scale=args.scale)
    plot.write_ppm(rgb, args.out)
    return 0


def build_parser():
    ap = argparse.ArgumentParser(prog="mdreg", description="Multi-resolution diffeomorphic registration.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def cfg_flags(p):
        p.add_argument("--config", help="JSON file of configuration overrides")
        p.add_argument("--iterations", type=int, help="optimizer steps")
        p.add_argument("--lam", type=float, help="TV-L1 weight")
        p.add_argument("--levels", type=int, help="pyramid levels")
        p.add_argument("--width", type=float, help="channel width multiplier")
        p.add_argument("--no-smoothing", action="store_true", help="drop the final Gaussian smoothing layer")
        p.add_argument("--seed", type=int, help="weight initialization seed")

    p = sub.add_parser("synth", help="write a synthetic pair (or a shared-template suite)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dims", type=_int_list, default=[32, 32, 32], help="comma-separated grid size")
    p.add_argument("--mag", type=float, default=4.0, help="max velocity norm in voxels")
    p.add_argument("--blobs", type=int, default=40, help="blobs in the template")
    p.add_argument("--noise", type=float, default=0.0, help="additive Gaussian noise std")
    p.add_argument("--count", type=int, default=1, help="pairs; above 1 writes a shared-template suite")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the sub-network cascade")
    p.add_argument("--data-dir", required=True, help="pair or suite directory written by synth")
    p.add_argument("--out-checkpoint", required=True)
    p.add_argument("--history", help="write the loss history here instead of stdout")
    cfg_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("register", help="register moving onto fixed")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--checkpoint", help="trained network checkpoint")
    g.add_argument("--direct", action="store_true", help="optimize the velocities of this pair directly")
    p.add_argument("--fixed", required=True)
    p.add_argument("--moving", required=True)
    p.add_argument("--out-dir", required=True, help="receives svf, forward, inverse, warped and metrics.json")
    cfg_flags(p)
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("warp", help="pull back an image or label volume through a displacement field")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--image")
    g.add_argument("--labels")
    p.add_argument("--field", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_warp)

    p = sub.add_parser("jacobian", help="Jacobian determinant and fold count")
    p.add_argument("--field", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_jacobian)

    p = sub.add_parser("dice", help="per-label Dice between two label volumes")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--labels", type=_int_list, help="restrict to these labels")
    p.set_defaults(func=cmd_dice)

    p = sub.add_parser("sweep", help="lambda selection by validation Dice")
    p.add_argument("--lambdas", type=_float_list, default=list(DEFAULT_LAMBDAS))
    p.add_argument("--out-table", required=True)
    p.add_argument("--data-dir", help="suite written by `synth --count N`")
    p.add_argument("--pairs", type=int, default=8, help="synthetic pairs when no --data-dir is given")
    p.add_argument("--dims", type=_int_list, default=[32, 32, 32], help="comma-separated grid size")
    p.add_argument("--mag", type=float, default=4.0, help="max velocity norm in voxels")
    p.add_argument("--direct", action="store_true")
    cfg_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("plot", help="PPM slice of deformed grid lines or determinant map")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--field")
    g.add_argument("--jacobian", help="determinant volume, or a field to differentiate")
    p.add_argument("--slice-axis", type=int, default=0, help="axis to slice 3-D volumes along")
    p.add_argument("--slice-index", type=int, default=0)
    p.add_argument("--spacing", type=int, default=4, help="grid line spacing in voxels")
    p.add_argument("--scale", type=int, default=8, help="pixels per voxel")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)
    return ap


def main(argv=None):
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigurationError) as e:
        print(f"mdreg: error: {e}", file=sys.stderr)
        return 2
    except (NumericalAbort, FloatingPointError) as e:
        print(f"mdreg: numerical abort: {e}", file=sys.stderr)
        return 4
    except (FileNotFoundError, IsADirectoryError) as e:
        print(f"mdreg: error: missing file: {e.filename or e}", file=sys.stderr)
        return 3
    except (FormatError, GeometryError, IndexError, ValueError, evalsynth.GenerationError) as e:
        print(f"mdreg: error: {e}", file=sys.stderr)
        return 3


def entry():
    sys.exit(main())
