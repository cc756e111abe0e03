"""Command-line entry point: ``msdsnet <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import subprocess
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__

log = logging.getLogger("msdsnet")


def _floats(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _ints(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _code_version():
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True,
                             cwd=Path(__file__).parent, timeout=5)
        if rev.returncode == 0:
            return f"{__version__}+{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


# ------------------------------------------------------------------ commands

def cmd_synth(args):
    from .data import SynthSpec, generate_synthetic

    spec = SynthSpec(num_images=args.n, image_size=args.size, num_keypoints=args.k,
                     blob_radius_range=(args.radius_min, args.radius_max),
                     noise_level=args.noise, rng_seed=args.seed)
    generate_synthetic(spec, args.out)
    log.info("wrote %d images to %s", args.n, args.out)


def cmd_validate(args):
    from .data import load_dataset, load_image

    records = load_dataset(args.dataset)
    for rec in records:
        load_image(rec, (rec.keypoints.image_height, rec.keypoints.image_width))
    log.info("%s: %d records, K=%d, all images decodable", args.dataset, len(records),
             records[0].keypoints.num_keypoints if records else 0)


def _run_config(args):
    from .config import RunConfig, load_run_config

    rc = load_run_config(args.config) if args.config else RunConfig()
    net, tr = rc.network, rc.train
    net_over = {}
    if args.variant:
        net_over["variant"] = args.variant
    if args.stages is not None:
        net_over["num_stages"] = args.stages
    if args.keypoints is not None:
        net_over["num_keypoints"] = args.keypoints
    if args.scales is not None:
        from .network import DEFAULT_CHANNELS, DEFAULT_STRIDES

        net_over.update(num_scales=args.scales, strides=DEFAULT_STRIDES[:args.scales],
                        channels_per_scale=DEFAULT_CHANNELS[:args.scales],
                        supervised_scales=[s for s in net.supervised_scales if s <= args.scales])
    if args.channels is not None:
        net_over["channels_per_scale"] = args.channels
    if args.input_size is not None:
        net_over.update(input_h=args.input_size, input_w=args.input_size)
    if net_over:
        d = net.to_dict()
        d.update(net_over)
        net = type(net).from_dict(d)
    tr_over = {k: v for k, v in (("epochs", args.epochs), ("seed", args.seed), ("learning_rate", args.lr),
                                 ("batch_size", args.batch_size)) if v is not None}
    if args.alpha is not None:
        tr_over["loss_weights"] = replace(tr.loss_weights, alpha=args.alpha)
    tr = replace(tr, **tr_over)
    data = args.data or rc.data_root
    out = args.out or rc.out_dir
    if not data:
        raise ValueError("no dataset given (--data or data.root in the config)")
    if not out:
        raise ValueError("no output directory given (--out or data.out_dir in the config)")
    return net, tr, data, out


def _check_dataset_k(net, data):
    from .data import load_dataset

    k = load_dataset(data)[0].keypoints.num_keypoints
    if k != net.num_keypoints:
        log.info("setting num_keypoints=%d from dataset", k)
        d = net.to_dict()
        d["num_keypoints"] = k
        net = type(net).from_dict(d)
    return net


def _train_one(net_cfg, tr_cfg, data, out, argv):
    from .trainer import train

    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    res = train(tr_cfg, net_cfg, data, out_dir=out)
    manifest = {
        "argv": argv,
        "alpha": tr_cfg.loss_weights.alpha,
        "seed": tr_cfg.seed,
        "code_version": _code_version(),
        "network": net_cfg.to_dict(),
        "train": tr_cfg.to_dict(),
        "dataset": str(data),
        "best_epoch": res.best_epoch,
        "best_val_pck": res.best_val_pck,
        "checkpoint": res.checkpoint_path.name,
        "checkpoint_sha256": res.checkpoint_sha256,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return res


def cmd_train(args):
    net, tr, data, out = _run_config(args)
    net = _check_dataset_k(net, data)
    logging.getLogger("msdsnet.trainer").setLevel(logging.INFO)
    res = _train_one(net, tr, data, out, sys.argv[1:] if args.argv is None else args.argv)
    log.info("best val PCK@%g = %.4f at epoch %d; checkpoint %s", tr.val_threshold,
             res.best_val_pck, res.best_epoch, res.checkpoint_path)


def cmd_eval(args):
    from .svg import line_plot
    from .trainer import evaluate

    report = evaluate(args.checkpoint, args.data, args.thresholds, split=args.split)
    Path(args.out).write_text(report.to_csv())
    if args.plot:
        Path(args.plot).write_text(line_plot([("PCK", report.thresholds, report.pck)],
                                             "PCK curve", "threshold (px)", "PCK", ylim=(0, 1)))


def _load_images(paths, net):
    import torch
    from PIL import Image

    arrs, sizes = [], []
    for p in paths:
        with Image.open(p) as im:
            im = im.convert("RGB")
            sizes.append(im.size)
            im = im.resize((net.cfg.input_w, net.cfg.input_h), Image.BILINEAR) \
                if im.size != (net.cfg.input_w, net.cfg.input_h) else im
            arrs.append(np.asarray(im, dtype=np.float32).transpose(2, 0, 1) / 255.0)
    return torch.from_numpy(np.stack(arrs)), sizes


def cmd_infer(args):
    from .checkpoint import load_checkpoint
    from .trainer import predict

    net, _ = load_checkpoint(args.checkpoint)
    images, sizes = _load_images(args.images, net)
    coords = predict(net, images)
    lines = ["image,keypoint,x,y"]
    for path, (w, h), xy in zip(args.images, sizes, coords):
        sx, sy = w / net.cfg.input_w, h / net.cfg.input_h
        for j, (x, y) in enumerate(xy):
            lines.append(f"{path},{j},{x * sx:.6g},{y * sy:.6g}")
    Path(args.out).write_text("\n".join(lines) + "\n")


def cmd_dump_attention(args):
    import torch
    from PIL import Image

    from .checkpoint import load_checkpoint

    net, _ = load_checkpoint(args.checkpoint)
    if not net.cfg.supervised:
        raise ValueError("checkpoint has no deep supervision, so it has no attention maps to dump")
    images, _ = _load_images([args.image], net)
    with torch.no_grad():
        out = net(images)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for (s, m), a in sorted(out.attentions.items()):
        px = np.clip(np.rint(a[0].numpy().astype(np.float64) * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(px, mode="L").save(out_dir / f"attn_s{s}_m{m}.png", format="PNG")


ABLATION_VARIANTS = ("full", "upscale_only", "downscale_only", "no_deep_supervision")


def cmd_ablate(args):
    from .trainer import evaluate

    net, tr, data, out = _run_config(args)
    net = _check_dataset_k(net, data)
    out = Path(out)
    rows = ["variant,best_val_pck,threshold,pck,mpjpe,correct_count"]
    for variant in ABLATION_VARIANTS:
        d = net.to_dict()
        d["variant"] = variant
        cfg = type(net).from_dict(d)
        log.info("ablation: training %s", variant)
        res = _train_one(cfg, tr, data, out / variant, args.argv)
        report = evaluate((res.net, {"train_config": tr.to_dict()}), data, args.thresholds, split=args.split)
        for line in report.to_csv().splitlines()[1:]:
            rows.append(f"{variant},{res.best_val_pck:.6g},{line}")
    (out / "ablation.csv").write_text("\n".join(rows) + "\n")


def cmd_tap(args):
    from .svg import line_plot
    from .tapping import analyze_trajectory, read_trajectory_csv

    traj = read_trajectory_csv(args.csv, args.fps)
    report = analyze_trajectory(traj, args.method)
    Path(args.out).write_text(report.to_csv())
    if args.plot:
        t = [i / args.fps for i in range(len(report.distance_signal))]
        marks = [(t[i], report.distance_signal[i]) for i in report.peak_indices]
        Path(args.plot).write_text(line_plot([("thumb-index distance", t, report.distance_signal)],
                                             f"{report.frequency_hz:.2f} Hz ({report.num_taps} taps)",
                                             "time (s)", "distance (px)", markers=marks))


# -------------------------------------------------------------------- parser

def _add_train_args(p):
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument("--data", help="dataset root (overrides data.root)")
    p.add_argument("--out", help="output directory (overrides data.out_dir)")
    p.add_argument("--variant", choices=["full", "upscale_only", "downscale_only", "no_ds",
                                         "no_deep_supervision"])
    p.add_argument("--alpha", type=float, help="deep-supervision loss weight")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--stages", type=int)
    p.add_argument("--scales", type=int)
    p.add_argument("--keypoints", type=int)
    p.add_argument("--channels", type=_ints, help="comma-separated widths per scale")
    p.add_argument("--input-size", type=int)
    p.set_defaults(argv=None)


def build_parser():
    parser = argparse.ArgumentParser(prog="msdsnet", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic blob dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--radius-min", type=float, default=4.0)
    p.add_argument("--radius-max", type=float, default=7.0)
    p.add_argument("--noise", type=float, default=0.05)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("validate", help="check a dataset directory")
    p.add_argument("dataset")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("train", help="train a network")
    _add_train_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="PCK/MPJPE report for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--thresholds", type=_floats, default=[5.0, 10.0, 20.0])
    p.add_argument("--split", default="test", choices=["train", "val", "test", "all"])
    p.add_argument("--out", required=True, help="CSV report path")
    p.add_argument("--plot", help="optional SVG PCK curve")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="predict keypoints for images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="CSV of predictions")
    p.add_argument("images", nargs="+")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("dump-attention", help="write per-stage attention maps as PNG")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_dump_attention)

    p = sub.add_parser("ablate", help="train and compare the four fusion/supervision variants")
    _add_train_args(p)
    p.add_argument("--thresholds", type=_floats, default=[5.0, 10.0, 20.0])
    p.add_argument("--split", default="test", choices=["train", "val", "test", "all"])
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("tap", help="finger-tapping frequency from a trajectory CSV")
    p.add_argument("--csv", required=True)
    p.add_argument("--fps", type=float, default=30.0)
    p.add_argument("--method", choices=["peak_count", "spectral"], default="peak_count")
    p.add_argument("--out", required=True, help="CSV report path")
    p.add_argument("--plot", help="optional SVG plot of the distance signal")
    p.set_defaults(func=cmd_tap)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "argv", "unset") is None:
        args.argv = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        args.func(args)
    except Exception as exc:  # noqa: BLE001 - every failure becomes exit 1 with a message
        if args.verbose:
            raise
        print(f"msdsnet {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
