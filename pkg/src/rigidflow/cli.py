"""Command-line front end: estimate, eval, synth, train, viz."""

import argparse
import os
import sys
from dataclasses import replace

import numpy as np

from . import imgproc, pipeline, synth, viz
from .epigeo import DegenerateGeometryError
from .imgproc import CodecError
from .matchnet import (
    CheckpointError,
    NetSpec,
    TrainingConfig,
    argmax_accuracy,
    draw_training_set,
    save_checkpoint,
    train,
)
from .pipeline import ConfigError


def _load_instances(path: str | None, shape) -> imgproc.InstanceMap:
    if path is None:
        return imgproc.InstanceMap(np.zeros(shape, dtype=np.int64))
    return imgproc.load_instance_map(path)


def cmd_estimate(args: argparse.Namespace) -> int:
    config = pipeline.load_config(args.config)
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    img1 = imgproc.load_image(args.image1)
    img2 = imgproc.load_image(args.image2)
    instances = _load_instances(args.instances, img1.shape)
    flow, report = pipeline.run(img1, img2, instances, config)
    imgproc.write_flow_png(args.out, flow)
    report_path = args.report or args.out + ".report.txt"
    with open(report_path, "w") as fh:
        fh.write(report)
    print(f"wrote {args.out} and {report_path}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    est = imgproc.read_flow_png(args.est)
    gt = imgproc.read_flow_png(args.gt)
    noc = imgproc.read_flow_png(args.gt_noc).valid
    instances = _load_instances(args.instances, gt.shape)
    report = pipeline.evaluate_fl(est, gt, noc, instances)
    print(report.table())
    return 0


def cmd_synth(args: argparse.Namespace) -> int:
    spec = synth.SceneSpec(
        width=args.width, height=args.height, n_objects=args.objects
    )
    scene = synth.make_scene(args.seed, spec)
    os.makedirs(args.out_dir, exist_ok=True)
    join = lambda name: os.path.join(args.out_dir, name)
    imgproc.write_image_png(join("img1.png"), scene.img1)
    imgproc.write_image_png(join("img2.png"), scene.img2)
    imgproc.write_flow_png(join("flow.png"), scene.flow)
    imgproc.write_instance_png(join("instances.png"), scene.instances.labels)
    imgproc.write_mask_png(join("occlusion.png"), scene.occluded)
    print(f"wrote scene {args.seed} to {args.out_dir}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    spec = NetSpec.desk_scale(width=args.filters, n_layers=args.layers)
    rng = np.random.default_rng(args.seed)
    frames = []
    for i in range(args.scenes):
        scene = synth.make_scene(args.seed + i)
        frames.append((scene.img1, scene.img2, scene.flow))
    dataset = draw_training_set(
        rng, frames, args.pixels, args.span, spec.receptive_field
    )
    config = TrainingConfig(iterations=args.iterations, seed=args.seed)
    params, _ = train(dataset, spec, config)
    save_checkpoint(args.out, params)
    acc = argmax_accuracy(params, dataset)
    print(f"wrote {args.out} (training argmax accuracy {acc:.3f})")
    return 0


def cmd_viz(args: argparse.Namespace) -> int:
    flow = imgproc.read_flow_png(args.flow)
    viz.write_color_png(args.out, viz.flow_to_color(flow))
    wrote = [args.out]
    if args.gt is not None:
        if args.error_out is None:
            raise ConfigError("--gt needs --error-out")
        gt = imgproc.read_flow_png(args.gt)
        viz.write_color_png(args.error_out, viz.error_to_color(flow, gt))
        wrote.append(args.error_out)
    print("wrote " + " and ".join(wrote))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flow",
        description="Per-rigid-body epipolar optical flow",
    )
    parser.add_argument(
        "--threads",
        type=int,
        default=1,
        help="worker count; results do not depend on it",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    est = sub.add_parser("estimate", help="dense flow for an image pair")
    est.add_argument("--image1", required=True)
    est.add_argument("--image2", required=True)
    est.add_argument("--instances", help="instance PNG; default all background")
    est.add_argument("--config", help=f"TOML path; default ${pipeline.CONFIG_ENV}")
    est.add_argument("--out", required=True, help="output flow PNG")
    est.add_argument("--report", help="report path; default <out>.report.txt")
    est.add_argument("--seed", type=int)
    est.set_defaults(func=cmd_estimate)

    ev = sub.add_parser("eval", help="Fl metrics of an estimate against truth")
    ev.add_argument("--est", required=True)
    ev.add_argument("--gt", required=True)
    ev.add_argument("--gt-noc", required=True, help="flow PNG valid only off-occlusion")
    ev.add_argument("--instances")
    ev.set_defaults(func=cmd_eval)

    sy = sub.add_parser("synth", help="render a synthetic scene bundle")
    sy.add_argument("--seed", type=int, default=0)
    sy.add_argument("--out-dir", required=True)
    sy.add_argument("--width", type=int, default=256)
    sy.add_argument("--height", type=int, default=128)
    sy.add_argument("--objects", type=int, default=2)
    sy.set_defaults(func=cmd_synth)

    tr = sub.add_parser("train", help="train a matcher on synthetic scenes")
    tr.add_argument("--out", required=True, help="checkpoint path (.npz)")
    tr.add_argument("--scenes", type=int, default=8)
    tr.add_argument("--pixels", type=int, default=1500)
    tr.add_argument("--iterations", type=int, default=3000)
    tr.add_argument("--span", type=int, default=30)
    tr.add_argument("--layers", type=int, default=2)
    tr.add_argument("--filters", type=int, default=8)
    tr.add_argument("--seed", type=int, default=0)
    tr.set_defaults(func=cmd_train)

    vz = sub.add_parser("viz", help="render flow and error PNGs")
    vz.add_argument("--flow", required=True)
    vz.add_argument("--out", required=True)
    vz.add_argument("--gt")
    vz.add_argument("--error-out")
    vz.set_defaults(func=cmd_viz)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (
        ConfigError,
        CodecError,
        CheckpointError,
        DegenerateGeometryError,
        ValueError,
        RuntimeError,
        OSError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
