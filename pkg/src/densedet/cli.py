"""Command-line interface.

Subcommands: gen-data, split, train-supervised, train-dsl, eval, infer,
export-labels, ablate, plot.  Training config comes from an optional
``key = value`` file plus ``--key value`` overrides for any config field.

Exit codes: 0 success; 2 usage or configuration error; 3 missing or
malformed data; 4 numeric failure (non-finite loss guard).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import ConfigError, SEED_ENV_VAR, TrainConfig, load_config
from .data import (CATEGORY_NAMES, DataFormatError, SceneConfig,
                   generate_dataset, load_dataset, load_image_file,
                   split_dataset)
from .metanet import MissingCategoryError
from .model import PyramidGeometry, decode, forward
from .tensorio import TensorFormatError
from .train import (NumericFailure, evaluate_params, load_checkpoint,
                    run_ablation, train_dsl, train_supervised)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _add_config_args(sub):
    sub.add_argument("--data", required=True, help="training dataset directory")
    sub.add_argument("--eval", default="", help="held-out dataset for final scoring")
    sub.add_argument("--out", required=True, help="run output directory")
    sub.add_argument("--config", default=None, help="key = value config file")


def _build_config(args, extras):
    overrides = dict(_pair_overrides(extras))
    overrides["data_dir"] = args.data
    overrides["eval_dir"] = args.eval
    return load_config(args.config, overrides)


def _pair_overrides(extras):
    """Turn leftover ['--alpha', '3', ...] argv into (key, value) pairs."""
    i = 0
    while i < len(extras):
        tok = extras[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r} (overrides look like --key value)")
        if "=" in tok:
            key, val = tok[2:].split("=", 1)
            yield key, val
            i += 1
            continue
        if i + 1 >= len(extras):
            raise ConfigError(f"override {tok} is missing a value")
        yield tok[2:], extras[i + 1]
        i += 2


def _cmd_gen_data(args, extras):
    cfg = SceneConfig(image_size=args.image_size, min_objects=args.min_objects,
                      max_objects=args.max_objects, min_size=args.min_size,
                      max_size=args.max_size,
                      category_weights=tuple(args.weights))
    ds = generate_dataset(args.out, args.count, args.seed, cfg, fmt=args.format)
    n_objects = sum(len(v) for v in ds.annotations.values())
    print(f"wrote {len(ds)} images ({n_objects} objects) to {args.out}")
    return EXIT_OK


def _cmd_split(args, extras):
    ds = load_dataset(args.data)
    labeled, unlabeled = split_dataset(len(ds), args.fraction, args.seed)
    ids = [r.id for r in ds.images]
    doc = {"labeled": [ids[i] for i in labeled], "unlabeled": [ids[i] for i in unlabeled],
           "fraction": args.fraction, "seed": args.seed}
    text = json.dumps(doc, indent=1)
    if args.out:
        Path(args.out).write_text(text)
    else:
        print(text)
    return EXIT_OK


def _cmd_train_supervised(args, extras):
    summary = train_supervised(_build_config(args, extras), args.out)
    _print_summary(summary)
    return EXIT_OK


def _cmd_train_dsl(args, extras):
    cfg = _build_config(args, extras)
    summary = train_dsl(cfg, args.out, resume_from=args.resume)
    _print_summary(summary)
    return EXIT_OK


def _print_summary(summary):
    line = f"done: {summary['kind']} steps={summary['steps']}"
    if "map" in summary:
        line += f" mAP={summary['map']:.4f} AP50={summary['ap50']:.4f}"
    print(line)


def _load_ckpt_arrays(path, use_teacher=True):
    state = load_checkpoint(path)
    if use_teacher and state.teacher is not None:
        return state.teacher.params
    return {k: v.data for k, v in state.params.items()}


def _cmd_eval(args, extras):
    arrays = _load_ckpt_arrays(args.checkpoint, use_teacher=not args.student)
    result = evaluate_params(arrays, load_dataset(args.data), use_rla=not args.no_rla,
                             score_thresh=args.thresh, nms_iou=args.nms_iou)
    print(result.summary())
    if args.out:
        Path(args.out).write_text(json.dumps(
            {"map": result.map, "ap50": result.ap50,
             "per_category": result.per_category,
             "num_images": result.num_images}, indent=1))
    return EXIT_OK


def _cmd_infer(args, extras):
    arrays = _load_ckpt_arrays(args.checkpoint, use_teacher=not args.student)
    img = load_image_file(args.image)
    if img.shape[1] != img.shape[2]:
        raise DataFormatError(f"{args.image}: inference expects square images, got {img.shape}")
    geometry = PyramidGeometry.build(img.shape[1])
    params = {k: T.Tensor(v) for k, v in arrays.items()}
    with T.no_grad():
        out = forward(img[None], params, use_rla=not args.no_rla)
    dets = decode(out, geometry, score_thresh=args.thresh, nms_iou=args.nms_iou)[0]
    doc = {"image": str(args.image),
           "instances": [{"category": d.category, "name": CATEGORY_NAMES[d.category],
                          "box": [round(v, 2) for v in d.box],
                          "score": round(d.score, 4)} for d in dets]}
    text = json.dumps(doc, indent=1)
    if args.out:
        Path(args.out).write_text(text)
    else:
        print(text)
    return EXIT_OK


def _cmd_export_labels(args, extras):
    from .pseudo import CategoryStats, adaptive_thresholds, partition_instances
    from .teacher import TeacherState, teacher_infer
    from . import metanet as M

    state = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data)
    sizes = {(r.width, r.height) for r in ds.images}
    if len(sizes) != 1:
        raise DataFormatError("export-labels needs images of one shared size")
    geometry = PyramidGeometry.build(sizes.pop()[0])
    teacher = state.teacher or TeacherState({k: v.data for k, v in state.params.items()})
    stats = state.stats or CategoryStats.fresh()
    tau2 = adaptive_thresholds(stats)
    entries = []
    for rec in sorted(ds.images, key=lambda r: r.id):
        img = ds.load_image(rec)
        dets = teacher_infer(teacher, img[None], geometry, score_thresh=args.thresh)[0]
        instances = partition_instances(dets, args.tau1, tau2)
        if state.proxies is not None and state.embedder is not None:
            instances = M.refine(instances, img, state.proxies, state.embedder)
        entries.append({"image_id": rec.id,
                        "instances": [{"category": i.category,
                                       "box": [round(v, 2) for v in i.box],
                                       "score": round(i.score, 4),
                                       "region": i.region} for i in instances]})
    doc = {"tau1": args.tau1, "tau2": [float(v) for v in tau2], "images": entries}
    Path(args.out).write_text(json.dumps(doc, indent=1))
    kept = sum(1 for e in entries for i in e["instances"] if i["region"] == "foreground")
    print(f"exported pseudo-labels for {len(entries)} images ({kept} foreground)")
    return EXIT_OK


def _cmd_ablate(args, extras):
    cfg = _build_config(args, extras)
    table = run_ablation(cfg, args.out, folds=args.folds)
    print(table["markdown"])
    return EXIT_OK


def _cmd_plot(args, extras):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    run = Path(args.run)
    out = Path(args.out or run)
    out.mkdir(parents=True, exist_ok=True)
    metrics = run / "metrics.csv"
    made = []
    if metrics.is_file():
        rows = np.genfromtxt(metrics, delimiter=",", names=True)
        rows = np.atleast_1d(rows)
        fig, ax = plt.subplots(figsize=(7, 4))
        ax.plot(rows["step"], rows["L_s"], label="L_s")
        ax.plot(rows["step"], rows["L_u"], label="L_u")
        ax.plot(rows["step"], rows["L_scale"], label="L_scale")
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax2 = ax.twinx()
        ax2.plot(rows["step"], rows["lr"], color="gray", linestyle=":", label="lr")
        ax2.set_ylabel("lr")
        ax.legend(loc="upper right")
        fig.tight_layout()
        fig.savefig(out / "losses.png", dpi=120)
        plt.close(fig)
        fig, ax = plt.subplots(figsize=(7, 3))
        ax.plot(rows["step"], rows["N_pos"])
        ax.set_xlabel("step")
        ax.set_ylabel("N_pos")
        fig.tight_layout()
        fig.savefig(out / "npos.png", dpi=120)
        plt.close(fig)
        made += ["losses.png", "npos.png"]
    eval_file = run / "eval.json"
    if eval_file.is_file():
        doc = json.loads(eval_file.read_text())
        cats = list(doc.get("per_category", {}).items())
        if cats:
            fig, ax = plt.subplots(figsize=(5, 3))
            ax.bar([c for c, _ in cats], [v for _, v in cats])
            ax.axhline(doc.get("map", 0.0), color="k", linestyle="--", label="mAP")
            ax.set_ylabel("AP")
            ax.legend()
            fig.tight_layout()
            fig.savefig(out / "ap.png", dpi=120)
            plt.close(fig)
            made.append("ap.png")
    if not made:
        raise DataFormatError(f"{run}: no metrics.csv or eval.json to plot")
    print(f"wrote {', '.join(made)} to {out}")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(
        prog="densedet",
        description="semi-supervised anchor-free shape detector "
                    f"(seed fallback: ${SEED_ENV_VAR})")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--image-size", type=int, default=128)
    g.add_argument("--min-objects", type=int, default=0)
    g.add_argument("--max-objects", type=int, default=6)
    g.add_argument("--min-size", type=int, default=12)
    g.add_argument("--max-size", type=int, default=48)
    g.add_argument("--weights", type=float, nargs=len(CATEGORY_NAMES),
                   default=list(SceneConfig().category_weights),
                   help="category sampling weights")
    g.add_argument("--format", choices=("dslt", "ppm"), default="dslt")
    g.set_defaults(func=_cmd_gen_data)

    s = sub.add_parser("split", help="print or save a labeled/unlabeled split")
    s.add_argument("--data", required=True)
    s.add_argument("--fraction", type=float, default=0.05)
    s.add_argument("--seed", type=int, default=7)
    s.add_argument("--out", default="")
    s.set_defaults(func=_cmd_split)

    t = sub.add_parser("train-supervised", help="labeled-only baseline")
    _add_config_args(t)
    t.set_defaults(func=_cmd_train_supervised)

    d = sub.add_parser("train-dsl", help="semi-supervised teacher-student run")
    _add_config_args(d)
    d.add_argument("--resume", default=None, help="checkpoint directory to resume")
    d.set_defaults(func=_cmd_train_dsl)

    e = sub.add_parser("eval", help="score a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", default="")
    e.add_argument("--student", action="store_true", help="score the student weights")
    e.add_argument("--no-rla", action="store_true")
    e.add_argument("--thresh", type=float, default=0.05)
    e.add_argument("--nms-iou", type=float, default=0.5)
    e.set_defaults(func=_cmd_eval)

    i = sub.add_parser("infer", help="detect objects in one image")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--image", required=True)
    i.add_argument("--out", default="")
    i.add_argument("--student", action="store_true")
    i.add_argument("--no-rla", action="store_true")
    i.add_argument("--thresh", type=float, default=0.3)
    i.add_argument("--nms-iou", type=float, default=0.5)
    i.set_defaults(func=_cmd_infer)

    x = sub.add_parser("export-labels", help="dump teacher pseudo-labels with region kinds")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--data", required=True)
    x.add_argument("--out", required=True)
    x.add_argument("--thresh", type=float, default=0.05)
    x.add_argument("--tau1", type=float, default=0.1)
    x.set_defaults(func=_cmd_export_labels)

    a = sub.add_parser("ablate", help="run the component-ablation lattice")
    _add_config_args(a)
    a.add_argument("--folds", type=int, default=1)
    a.set_defaults(func=_cmd_ablate)

    pl = sub.add_parser("plot", help="render loss curves and AP bars for a run")
    pl.add_argument("--run", required=True)
    pl.add_argument("--out", default="")
    pl.set_defaults(func=_cmd_plot)
    return p


def main(argv=None):
    parser = build_parser()
    args, extras = parser.parse_known_args(argv)
    try:
        return args.func(args, extras)
    except NumericFailure as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataFormatError, TensorFormatError, MissingCategoryError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigError, ValueError) as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
