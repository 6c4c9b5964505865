"""Command-line entry points: voxelize, train, detect, eval, bench, bench-kernels."""

import argparse
import configparser
import dataclasses
import json
import logging
import os
import sys

import numpy as np

from . import network as netio
from .bench import benchmark_detection, kernel_benchmark, write_bench_csv
from .detector import DEFAULT_NMS_IOU, frame_scores, select_detections
from .evaluation import DIFFICULTIES, evaluate, write_pr_csv, write_results_json
from .kitti_io import (
    KittiLayout,
    detections_to_labels,
    load_frame,
    read_labels,
    write_labels,
)
from .synthetic import SYNTHETIC_CLASS, SceneParams, synthetic_grid_config, write_dataset
from .trainer import TrainConfig, fit, validation_ap
from .voxel_grid import GridConfig, discretize

_TRAIN_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}
_EXTRA_KEYS = {"model": str, "class": str, "hidden": int}


class CliError(Exception):
    pass


# ----------------------------------------------------------------------------
# helpers


def _grid_config(args, base=None):
    base = base or GridConfig()
    return GridConfig(
        args.cell_size if args.cell_size is not None else base.cell_size,
        tuple(args.origin) if args.origin is not None else base.origin,
        tuple(args.extents) if args.extents is not None else base.extents,
        args.bins if args.bins is not None else base.angular_bins,
    )


def _add_grid_flags(p):
    p.add_argument("--cell-size", type=float, help="cell edge in meters")
    p.add_argument("--origin", type=float, nargs=3, metavar=("X", "Y", "Z"))
    p.add_argument("--extents", type=int, nargs=3, metavar=("L", "M", "N"))
    p.add_argument("--bins", type=int, help="orientation bins over [0, pi)")


def _frame_ids(layout, args):
    if getattr(args, "frames", None):
        return list(args.frames)
    if getattr(args, "split", None):
        return layout.split(args.split)
    return layout.frame_ids()


def _require_dir(path):
    if not os.path.isdir(path):
        raise FileNotFoundError(f"no such directory: {path}")


def _parse_bool(text):
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _coerce(name, value):
    if name in _EXTRA_KEYS:
        return _EXTRA_KEYS[name](value)
    ftype = _TRAIN_FIELDS[name].type
    if ftype in (bool, "bool"):
        return _parse_bool(value)
    if ftype in (int, "int"):
        return int(value)
    if ftype in (float, "float"):
        return float(value)
    if name == "workers":
        return None if str(value).lower() in ("", "none", "auto") else int(value)
    return str(value)


def read_config(path):
    """``key = value`` lines (``#`` comments) naming TrainConfig fields."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
    with open(path) as fh:
        parser.read_string("[train]\n" + fh.read())
    out = {}
    for key, value in parser["train"].items():
        name = key.replace("-", "_")
        if name not in _TRAIN_FIELDS and name not in _EXTRA_KEYS:
            raise CliError(f"{path}: unknown config key {key!r}")
        out[name] = _coerce(name, value)
    return out


def _emit(obj):
    print(json.dumps(obj, sort_keys=True))


# ----------------------------------------------------------------------------
# commands


def cmd_voxelize(args):
    layout = KittiLayout(args.root)
    frame = load_frame(layout, args.frame, with_labels=False)
    grid = discretize(frame.cloud, _grid_config(args))
    feats = grid.features
    names = ["occupancy", "mean_reflectance", "var_reflectance", "linearity", "planarity",
             "sphericity"]
    summary = {}
    for i, name in enumerate(names[:grid.num_channels]):
        col = feats[:, i] if grid.num_occupied else np.zeros(1)
        summary[name] = {"mean": float(col.mean()), "min": float(col.min()),
                         "max": float(col.max())}
    stats = {
        "frame": args.frame,
        "points": len(frame.cloud),
        "occupied_cells": grid.num_occupied,
        "total_cells": grid.num_cells,
        "occupancy_fraction": grid.num_occupied / grid.num_cells,
        "features": summary,
    }
    if args.dump:
        np.savez(args.dump, coords=grid.coords, features=grid.features,
                 shape=np.asarray(grid.shape))
        stats["dump"] = args.dump
    _emit(stats)
    return 0


def _train_settings(args):
    settings = read_config(args.config) if args.config else {}
    for name in list(_TRAIN_FIELDS) + list(_EXTRA_KEYS):
        value = getattr(args, "cls" if name == "class" else name, None)
        if value is not None:
            settings[name] = value
    return settings


def cmd_train(args):
    settings = _train_settings(args)
    model = settings.pop("model", "D")
    hidden = settings.pop("hidden", 8)
    class_name = settings.pop("class", None)
    if args.synthetic:
        if not os.path.isdir(os.path.join(args.root, "velodyne")):
            write_dataset(args.root, args.synthetic_train, args.synthetic_val,
                          seed=args.synthetic_seed)
        class_name = class_name or SYNTHETIC_CLASS
        base_grid = synthetic_grid_config(SceneParams())
    else:
        base_grid = GridConfig()
    if class_name is None:
        raise CliError("no class given (use --class or a 'class' config key)")
    config = TrainConfig(**settings)
    layout = KittiLayout(args.root)
    _require_dir(args.root)
    train_frames = [load_frame(layout, f) for f in layout.split(args.split)]
    val_frames = ([load_frame(layout, f) for f in layout.split(args.val_split)]
                  if args.val_split else [])
    start = netio.load(args.resume) if args.resume else None
    grid = start.grid_config if start is not None and start.grid_config else _grid_config(args, base_grid)
    result = fit(train_frames, class_name, model, config, grid, val_frames,
                 net=start, hidden=hidden, log_path=args.log)
    chosen = result.final if args.keep_final else result.best
    netio.save(chosen, args.out)
    report = {"model": args.out, "class": class_name, "epochs": config.epochs,
              "best_epoch": result.best_epoch}
    if val_frames:
        report["validation_ap"] = validation_ap(chosen, val_frames, config.difficulty,
                                                config.eval_threshold, config.workers)
    _emit(report)
    return 0


def _write_detections(out_dir, frames, dets_by_frame):
    os.makedirs(out_dir, exist_ok=True)
    payload = {}
    for frame, dets in zip(frames, dets_by_frame):
        write_labels(os.path.join(out_dir, f"{frame.frame_id}.txt"),
                     detections_to_labels(dets, frame.calib))
        payload[frame.frame_id] = [d.to_dict() for d in dets]
    with open(os.path.join(out_dir, "detections.json"), "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)


def cmd_detect(args):
    net = netio.load(args.model)
    if net.class_box is None or net.grid_config is None:
        raise CliError(f"{args.model}: model has no class box or grid configuration")
    layout = KittiLayout(args.root)
    config = net.grid_config
    if args.bins is not None:
        config = dataclasses.replace(config, angular_bins=args.bins)
    frames = [load_frame(layout, f, with_labels=False) for f in _frame_ids(layout, args)]
    thresholds = args.sweep or [args.threshold]
    if any(t < 0 for t in thresholds):
        raise CliError("thresholds must be non-negative")
    runs = {t: [] for t in thresholds}
    for frame in frames:
        # score once, threshold many times
        scores = frame_scores(net, frame.cloud, config, args.workers) if len(frame.cloud) else []
        for t in thresholds:
            runs[t].append(select_detections(scores, config, net.class_box, t, args.nms_iou))
    outputs = {}
    for t in thresholds:
        out = args.out if not args.sweep else os.path.join(args.out, f"threshold_{t:g}")
        _write_detections(out, frames, runs[t])
        outputs[f"{t:g}"] = {"dir": out, "detections": sum(len(d) for d in runs[t])}
    _emit({"frames": len(frames), "outputs": outputs})
    return 0


def cmd_eval(args):
    _require_dir(args.detections)
    _require_dir(args.labels)
    if args.calib:
        _require_dir(args.calib)
    if args.frames:
        ids = list(args.frames)
    else:
        ids = sorted(os.path.splitext(f)[0] for f in os.listdir(args.labels) if f.endswith(".txt"))
    dets, gts = [], []
    for fid in ids:
        path = os.path.join(args.detections, f"{fid}.txt")
        dets.append(read_labels(path) if os.path.exists(path) else [])
        gts.append(read_labels(os.path.join(args.labels, f"{fid}.txt")))
    classes = args.classes or sorted({lb.type for g in gts for lb in g if not lb.is_dontcare})
    difficulties = [args.difficulty] if args.difficulty != "all" else list(DIFFICULTIES)
    results = {}
    table = []
    for cls in classes:
        for diff in difficulties:
            res = evaluate(dets, gts, cls, diff, args.iou)
            results[(cls, diff)] = res
            table.append({"class": cls, "difficulty": diff, "ap": res.ap,
                          "positives": res.num_positives})
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        for (cls, diff), res in results.items():
            write_pr_csv(os.path.join(args.out, f"pr_{cls}_{diff}.csv"), res)
        write_results_json(os.path.join(args.out, "results.json"), results)
    _emit({"frames": len(ids), "results": table})
    return 0


def cmd_bench(args):
    net = netio.load(args.model)
    layout = KittiLayout(args.root)
    ids = _frame_ids(layout, args)
    if args.limit:
        ids = ids[:args.limit]
    if not ids:
        raise CliError("bench needs at least one frame")
    clouds = [load_frame(layout, f, with_labels=False).cloud for f in ids]
    report = benchmark_detection(net, clouds, args.repetitions, args.threshold, args.workers)
    penalty = net.meta.get("train_config", {}).get("l1_sparsity_penalty")
    report.meta = {"model": args.model, "l1_penalty": penalty}
    if args.csv:
        write_bench_csv(args.csv, [{"model": args.model, "penalty": penalty, "report": report,
                                    "ap": args.ap}])
    _emit(report.to_dict())
    return 0


def cmd_bench_kernels(args):
    rows = kernel_benchmark(tuple(args.shape), tuple(args.occupancy), repeats=args.repeats,
                            f_in=args.channels, f_out=args.channels)
    if args.csv:
        with open(args.csv, "w") as fh:
            fh.write("backend,occupancy,occupied,seconds\n")
            for r in rows:
                fh.write(f"{r['backend']},{r['occupancy']},{r['occupied']},{r['seconds']:.6g}\n")
    _emit({"kernels": rows})
    return 0


# ----------------------------------------------------------------------------
# parser


def build_parser():
    parser = argparse.ArgumentParser(prog="sparsevote",
                                     description="Sparse voting 3D detector for lidar scans.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("voxelize", help="grid statistics for one frame")
    p.add_argument("--root", required=True)
    p.add_argument("--frame", required=True)
    p.add_argument("--dump", help="write the sparse grid as .npz")
    _add_grid_flags(p)
    p.set_defaults(func=cmd_voxelize)

    p = sub.add_parser("train", help="train a class detector")
    p.add_argument("--root", required=True, help="dataset root in KITTI layout")
    p.add_argument("--out", required=True, help="output model path")
    p.add_argument("--config", help="key = value file; flags override it")
    p.add_argument("--class", dest="cls")
    p.add_argument("--model", choices=["A", "B", "C", "D", "E"])
    p.add_argument("--hidden", type=int)
    p.add_argument("--split", default="train")
    p.add_argument("--val-split", default=None)
    p.add_argument("--resume", help="start from this model file")
    p.add_argument("--log", help="append per-epoch JSON lines here")
    p.add_argument("--keep-final", action="store_true",
                   help="save the last epoch instead of the validation-best one")
    p.add_argument("--synthetic", action="store_true",
                   help="generate a synthetic dataset in --root if it is empty")
    p.add_argument("--synthetic-train", type=int, default=60)
    p.add_argument("--synthetic-val", type=int, default=50)
    p.add_argument("--synthetic-seed", type=int, default=0)
    for name, f in _TRAIN_FIELDS.items():
        flag = "--" + name.replace("_", "-")
        if f.type in (bool, "bool"):
            p.add_argument(flag, type=_parse_bool, metavar="BOOL")
        elif name == "workers":
            p.add_argument(flag, type=int)
        else:
            kind = {"int": int, "float": float}.get(f.type if isinstance(f.type, str)
                                                     else f.type.__name__, str)
            p.add_argument(flag, type=kind)
    _add_grid_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("detect", help="run a model over frames")
    p.add_argument("--model", required=True)
    p.add_argument("--root", required=True)
    p.add_argument("--out", required=True, help="directory for label files and JSON")
    p.add_argument("--split")
    p.add_argument("--frames", nargs="+")
    p.add_argument("--threshold", type=float, default=0.0)
    p.add_argument("--sweep", type=float, nargs="+", help="one output set per threshold")
    p.add_argument("--bins", type=int)
    p.add_argument("--nms-iou", type=float, default=DEFAULT_NMS_IOU)
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("eval", help="AP of label-format detections")
    p.add_argument("--detections", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--calib")
    p.add_argument("--frames", nargs="+")
    p.add_argument("--classes", nargs="+")
    p.add_argument("--difficulty", default="all", choices=["all", *DIFFICULTIES])
    p.add_argument("--iou", type=float, help="override the per-class IoU threshold")
    p.add_argument("--out", help="directory for PR CSVs and results.json")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="detection timing and layer occupancy")
    p.add_argument("--model", required=True)
    p.add_argument("--root", required=True)
    p.add_argument("--split")
    p.add_argument("--frames", nargs="+")
    p.add_argument("--limit", type=int)
    p.add_argument("--repetitions", type=int, default=1)
    p.add_argument("--threshold", type=float, default=0.0)
    p.add_argument("--workers", type=int)
    p.add_argument("--ap", type=float, help="AP value to record in the CSV row")
    p.add_argument("--csv")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("bench-kernels", help="compiled vs numpy voting kernels")
    p.add_argument("--shape", type=int, nargs=3, default=[100, 100, 20])
    p.add_argument("--occupancy", type=float, nargs="+", default=[0.01, 0.05, 0.1])
    p.add_argument("--channels", type=int, default=8)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--csv")
    p.set_defaults(func=cmd_bench_kernels)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CliError, OSError, ValueError, FloatingPointError) as exc:
        print(json.dumps({"status": "error", "command": args.command,
                          "type": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
