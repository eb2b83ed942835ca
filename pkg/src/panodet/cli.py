"""Command-line entry point: gen, train, eval, flops, infer.

Every command exits 0 on success and 1 with a single `panodet: error: ...`
line on stderr otherwise. All randomness flows from the config seed; gen
and eval accept --jobs for scene-level parallelism (results are identical
to the sequential run).
"""

import argparse
import multiprocessing
import os
import sys
import types

from .boxes import save_boxes_csv
from .config import load_config
from .dataio import load_dataset, write_dataset
from .evaluate import dump_images, evaluate, predict_scene, write_metrics_csv
from .model import build_model
from .sc2d import backbone_cost, count_cost, reduction_vs_conv
from .scenegen import generate_scene
from .serial import load_checkpoint, save_labels
from .train import train

COMPARISON_WIDTHS = (8, 16, 32, 64, 128)

_GEN_CFG = None


def _gen_scene(i):
    return generate_scene(_GEN_CFG.scene_spec(i))


def _config_from(args):
    overrides = list(args.overrides)
    for flag in ("no_ifr", "no_dual_task", "no_sc"):
        if getattr(args, flag):
            overrides.append(f"{flag}=true")
    return load_config(args.config, overrides)


def cmd_gen(args):
    global _GEN_CFG
    cfg = _config_from(args)
    if args.scenes < 0:
        raise ValueError("--scenes must be >= 0")
    if args.jobs > 1 and args.scenes > 1:
        _GEN_CFG = cfg
        ctx = multiprocessing.get_context("fork")
        with ctx.Pool(args.jobs) as pool:
            samples = pool.map(_gen_scene, range(args.scenes))
    else:
        samples = [generate_scene(cfg.scene_spec(i))
                   for i in range(args.scenes)]
    write_dataset(args.out, samples)
    print(f"wrote {args.scenes} scene(s) to {args.out}")
    return 0


def cmd_train(args):
    cfg = _config_from(args)
    samples = load_dataset(args.data)
    log_path = args.log or os.path.join(args.out, "training_log.csv")
    model, rows = train(cfg, samples, args.out, resume_from=args.resume,
                        log_path=log_path)
    if rows:
        print(f"trained steps {rows[0][0]}..{rows[-1][0]} "
              f"(loss {rows[0][2]:.4f} -> {rows[-1][2]:.4f}); "
              f"checkpoint in {args.out}")
    else:
        print(f"nothing to do (checkpoint already at step {cfg.steps}); "
              f"checkpoint in {args.out}")
    return 0


def cmd_eval(args):
    cfg = _config_from(args)
    samples = load_dataset(args.data)
    pan, det = evaluate(cfg, samples, args.checkpoint, jobs=args.jobs,
                        dump_dir=args.dump_images)
    write_metrics_csv(args.out, pan, det)
    print(f"pq={pan.pq:.2f} rq={pan.rq:.2f} sq={pan.sq:.2f} "
          f"miou={pan.miou:.2f} map={det.mean_ap:.4f} -> {args.out}")
    return 0


def _flops_csv(cfg):
    header = ("section,name,c,params,macs_per_pos,act_per_pos,"
              "param_reduction_pct,mac_reduction_pct")
    lines = [header]
    for c in COMPARISON_WIDTHS:
        for kind in ("conv3x3", "convmlp_block", "sc_block"):
            rep = count_cost(kind, c, ratio=cfg.sc_ratio)
            dp, dm = reduction_vs_conv(rep, c)
            lines.append(f"comparison,{kind},{c},{rep.params},"
                         f"{rep.macs_per_pos},{rep.act_per_pos},"
                         f"{100.0 * dp!r},{100.0 * dm!r}")
    cin = cfg.c2 * (cfg.grid_z // 16)
    rows, total = backbone_cost(cin, cfg.sc_width1, cfg.sc_width2,
                                cfg.sc_n0, cfg.sc_n1, cfg.sc_n2,
                                ratio=cfg.sc_ratio)
    for name, rep in rows:
        lines.append(f"backbone,{name},,{rep.params},{rep.macs_per_pos},"
                     f"{rep.act_per_pos},,")
    lines.append(f"backbone,total,,{total.params},{total.macs_per_pos},"
                 f"{total.act_per_pos},,")
    return "\n".join(lines) + "\n"


def cmd_flops(args):
    cfg = _config_from(args)
    text = _flops_csv(cfg)
    if args.out:
        with open(args.out, "w") as f:
            f.write(text)
        print(f"cost table -> {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def cmd_infer(args):
    from .serial import load_points

    cfg = _config_from(args)
    model = build_model(cfg)
    load_checkpoint(args.checkpoint, model)
    pts = load_points(args.points)
    sample = types.SimpleNamespace(points=pts)
    pred = predict_scene(model, sample, cfg.score_thresh, cfg.max_dets)
    os.makedirs(args.out, exist_ok=True)
    save_boxes_csv(os.path.join(args.out, "boxes.csv"),
                   [("scene_0000", b) for b in pred.boxes])
    save_labels(os.path.join(args.out, "scene_0000.aopl"),
                pred.semantic, pred.instance)
    if args.dump_images:
        dump_images(args.dump_images, model, [sample], [pred])
    print(f"{len(pred.boxes)} box(es) -> {args.out}")
    return 0


def _add_config_args(p):
    p.add_argument("--config", default=None,
                   help="key=value config file (defaults apply without)")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE", help="override one config value "
                   "(repeatable)")
    p.add_argument("--no-ifr", action="store_true",
                   help="ablation: drop instance feature retrieval")
    p.add_argument("--no-dual-task", action="store_true",
                   help="ablation: drop cross-task fusion")
    p.add_argument("--no-sc", action="store_true",
                   help="ablation: plain conv instead of the 2D backbone")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="panodet",
        description="Joint 3D detection and panoptic segmentation on "
                    "synthetic LiDAR scenes.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    _add_config_args(p)
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--scenes", type=int, default=10)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a model on a dataset")
    _add_config_args(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--resume", default=None,
                   help="checkpoint directory to continue from")
    p.add_argument("--log", default=None,
                   help="loss log path (default: <out>/training_log.csv)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    _add_config_args(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", default="metrics.csv")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--dump-images", default=None, metavar="DIR",
                   help="write qualitative PGMs here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("flops", help="analytic layer cost table")
    _add_config_args(p)
    p.add_argument("--out", default=None, help="CSV path (default: stdout)")
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("infer", help="run one point cloud through a "
                       "checkpoint")
    _add_config_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--points", required=True, help="input .aopc file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--dump-images", default=None, metavar="DIR")
    p.set_defaults(func=cmd_infer)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as e:
        print(f"panodet: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
