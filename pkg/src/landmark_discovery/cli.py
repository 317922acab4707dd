"""Command-line entry point: ``landmarks <command> ...``.

Exit codes: 0 success, 1 runtime error, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import ConfigError, __version__
from .config import parse_config

log = logging.getLogger("landmark_discovery")

COMMANDS = ("toydata", "train", "detect", "fit-regressor", "eval", "sweep", "visualize")
MEMORY_LIMIT_BYTES = 2 << 30


def _common(p):
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    p.add_argument("--seed", type=int, help="shorthand for --set train.seed=N")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="landmarks", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(COMMANDS) + "}")

    p = sub.add_parser("toydata", help="write a synthetic face-sprite dataset")
    _common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--clutter", type=int, default=5)

    p = sub.add_parser("train", help="train the landmark model")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="checkpoint to continue from")

    p = sub.add_parser("detect", help="write discovered landmarks to CSV")
    _common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("fit-regressor", help="fit the linear probe")
    _common(p)
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ridge", help="ridge penalty (default: eval.ridge)")

    p = sub.add_parser("eval", help="print the inter-ocular normalized error")
    _common(p)
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--regressor", help="probe JSON; omit when pred already has the gt points")

    p = sub.add_parser("sweep", help="probe error versus number of supervised images")
    _common(p)
    p.add_argument("--pred-train", required=True)
    p.add_argument("--gt-train", required=True)
    p.add_argument("--pred-test", required=True)
    p.add_argument("--gt-test", required=True)
    p.add_argument("--ns", default="1,5,10,100,500,1000,5000,all")
    p.add_argument("--seeds", type=int, default=5)

    p = sub.add_parser("visualize", help="draw landmarks onto images")
    _common(p)
    p.add_argument("--images", required=True)
    p.add_argument("--out", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--ckpt")
    src.add_argument("--pred", help="landmark CSV to draw instead of running a model")
    p.add_argument("--limit", type=int, default=0)
    p.add_argument("--min-side", type=int, default=256, help="upscale small images to this side")
    return parser


def _config(args):
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"train.seed={args.seed}")
    return parse_config(args.config, overrides)


def _aligned(pred_table, gt_table, pred_path):
    missing = [k for k in gt_table if k not in pred_table]
    if missing:
        raise ValueError(f"{pred_path} has no landmarks for image {missing[0]}")
    ids = list(gt_table)
    return ids, np.stack([pred_table[i] for i in ids]), np.stack([gt_table[i] for i in ids])


def cmd_toydata(args, cfg):
    from .data_io import ToyConfig, synthesize_toy_dataset, write_dataset

    toy = ToyConfig(count=args.n, image_size=args.size, seed=cfg["train.seed"] if args.seed is None else args.seed,
                    clutter=args.clutter)
    out = write_dataset(synthesize_toy_dataset(toy), args.out)
    print(f"wrote {args.n} sprites to {out}")


def cmd_train(args, cfg):
    from .data_io import load_image_dataset
    from .training import run_training

    tcfg = cfg.train_config()
    data = load_image_dataset(args.data, tcfg.model.detector.in_size, crop=cfg["data.crop"])
    if cfg["data.limit"]:
        data = data.subset(range(min(cfg["data.limit"], len(data))))
    if len(data) * data.size**2 * 12 <= MEMORY_LIMIT_BYTES:
        data.materialize()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out)
    ckpt, rows = run_training(tcfg, data, out, resume=args.resume)
    print(f"checkpoint: {ckpt}")
    if rows:
        print(f"final total loss: {rows[-1]['total']:.6f}")


def cmd_detect(args, cfg):
    from .data_io import load_image_dataset, write_landmarks
    from .evaluation import predict_dataset
    from .training import load_model

    model = load_model(args.ckpt)
    data = load_image_dataset(args.images, model.config.detector.in_size, crop=cfg["data.crop"])
    pts = data.to_source_coords(predict_dataset(model, data, cfg["eval.batch_size"]))
    write_landmarks(args.out, dict(zip(data.ids, pts)))
    print(f"wrote {len(data)} x {pts.shape[1]} landmarks to {args.out}")


def cmd_fit_regressor(args, cfg):
    from .data_io import read_landmarks
    from .evaluation import fit_linear_regressor

    ids, pred, gt = _aligned(read_landmarks(args.pred), read_landmarks(args.gt), args.pred)
    ridge = cfg["eval.ridge"] if args.ridge is None else float(args.ridge)
    reg = fit_linear_regressor(pred, gt, ridge)
    Path(args.out).write_text(json.dumps(reg.to_json()))
    print(f"fitted {reg.n_inputs} -> {reg.n_outputs} point regressor on {len(ids)} images")


def cmd_eval(args, cfg):
    from .data_io import read_landmarks
    from .evaluation import RegressorWeights, compute_nme

    _, pred, gt = _aligned(read_landmarks(args.pred), read_landmarks(args.gt), args.pred)
    if args.regressor:
        reg = RegressorWeights.from_json(json.loads(Path(args.regressor).read_text()))
        pred = reg.predict(pred).reshape(gt.shape)
    elif pred.shape != gt.shape:
        raise ValueError("prediction and ground truth differ in point count; pass --regressor")
    report = compute_nme(pred, gt, cfg["eval.interocular"])
    print(f"NME={report.nme_percent:.4f}%")


def cmd_sweep(args, cfg):
    from .data_io import read_landmarks
    from .evaluation import format_sweep, limited_supervision_sweep

    _, ptr, gtr = _aligned(read_landmarks(args.pred_train), read_landmarks(args.gt_train), args.pred_train)
    _, pte, gte = _aligned(read_landmarks(args.pred_test), read_landmarks(args.gt_test), args.pred_test)
    ns = [n.strip() if n.strip() == "all" else int(n) for n in args.ns.split(",")]
    seeds = list(range(cfg["train.seed"], cfg["train.seed"] + args.seeds))
    rows = limited_supervision_sweep(ptr, gtr, pte, gte, ns, seeds, cfg["eval.interocular"],
                                     cfg["eval.ridge"])
    print(format_sweep(rows))


def cmd_visualize(args, cfg):
    from .data_io import load_image_dataset, read_landmarks
    from .visualize import draw_landmarks

    if args.ckpt:
        from .evaluation import predict_dataset
        from .training import load_model

        model = load_model(args.ckpt)
        data = load_image_dataset(args.images, model.config.detector.in_size, crop=cfg["data.crop"])
        if args.limit:
            data = data.subset(range(min(args.limit, len(data))))
        table = dict(zip(data.ids, predict_dataset(model, data)))
    else:
        table = read_landmarks(args.pred)
        data = None
    written = draw_landmarks(args.images, table, args.out, data=data, limit=args.limit,
                             min_side=args.min_side)
    print(f"wrote {len(written)} overlay image(s) to {args.out}")


HANDLERS = {
    "toydata": cmd_toydata, "train": cmd_train, "detect": cmd_detect,
    "fit-regressor": cmd_fit_regressor, "eval": cmd_eval, "sweep": cmd_sweep,
    "visualize": cmd_visualize,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        HANDLERS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # surfaced as a runtime failure
        log.debug("command failed", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
