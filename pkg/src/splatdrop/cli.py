"""Command-line entry point: training, rendering, evaluation, and the
diagnostic subcommands that emit plot-ready CSV/PNG artifacts."""

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import ess as ess_mod
from . import metrics
from . import rdr as rdr_mod
from . import scene_io, trainer
from .config import ConfigError, TrainConfig
from .rasterizer import gradient_map, render, render_backward


class CliError(Exception):
    """User-facing error: bad flags, missing files, malformed inputs."""


def _coerce(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _load_config(args) -> TrainConfig:
    cfg = TrainConfig()
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise CliError(f"config file not found: {path}")
        cfg = TrainConfig.from_json(path.read_text())
    overrides = {}
    for item in getattr(args, "override", []) or []:
        if "=" not in item:
            raise CliError(f"override must look like key=value: {item!r}")
        key, value = item.split("=", 1)
        overrides[key] = _coerce(value)
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "iterations", None) is not None:
        overrides["iterations"] = args.iterations
    if getattr(args, "rdr_rate", None) is not None:
        overrides["rdr.rate"] = args.rdr_rate
    if getattr(args, "rdr_lambda", None) is not None:
        overrides["rdr.weight"] = args.rdr_lambda
    try:
        return cfg.with_overrides(overrides) if overrides else cfg
    except ConfigError as exc:
        raise CliError(str(exc)) from exc


def _load_dataset(args, background=(0.0, 0.0, 0.0)) -> scene_io.Dataset:
    if getattr(args, "data", None):
        try:
            ds = scene_io.load_blender_transforms(args.data,
                                                  background=background)
        except (scene_io.SceneIOError, OSError) as exc:
            raise CliError(str(exc)) from exc
    elif getattr(args, "synthetic", None) is not None:
        try:
            spec = scene_io.parse_synthetic_spec(args.synthetic)
            ds, _ = scene_io.generate_synthetic_scene(spec)
        except scene_io.SceneIOError as exc:
            raise CliError(str(exc)) from exc
    else:
        raise CliError("provide --data DIR or --synthetic SPEC")
    if getattr(args, "views", None) is not None:
        if args.views < 1 or args.views > len(ds.train):
            raise CliError(f"--views must be in [1, {len(ds.train)}]")
        ds = scene_io.Dataset(train=ds.train[:args.views], test=ds.test,
                              scene_extent=ds.scene_extent)
    return ds


def _write_csv(path, rows, columns):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if row.get(k) is None else row.get(k))
                             for k in columns})


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_train(args) -> int:
    cfg = _load_config(args)
    ds = _load_dataset(args, background=cfg.background)
    out = _out_dir(args)
    tr = trainer.Trainer(config=cfg, dataset=ds)
    loss_rows = []
    metric_rows = []

    def on_iter(t, breakdown):
        loss_rows.append({"iteration": t.iteration, "l_gs": breakdown.l_gs,
                          "l_depth": breakdown.l_depth,
                          "l_rdr": breakdown.l_rdr,
                          "total": breakdown.total,
                          "primitives": t.cloud.count})
        if t.iteration % cfg.eval_interval == 0 or \
                t.iteration == cfg.iterations:
            metric_rows.extend(t.evaluate("test"))

    tr.train(callback=on_iter)
    _write_csv(out / "losses.csv", loss_rows,
               ("iteration", "l_gs", "l_depth", "l_rdr", "total",
                "primitives"))
    _write_csv(out / "metrics.csv", metric_rows, trainer.EVAL_COLUMNS)
    trainer.checkpoint_save(tr, out / "checkpoint.bin")
    scene_io.ply_write(tr.cloud, out / "model.ply")
    counts, edges = trainer.scale_histogram(tr.cloud)
    _write_csv(out / "scale_histogram.csv",
               [{"bin_low": edges[i], "bin_high": edges[i + 1],
                 "count": int(counts[i])} for i in range(len(counts))],
               ("bin_low", "bin_high", "count"))
    print(f"trained {tr.iteration} iterations, {tr.cloud.count} primitives "
          f"-> {out}")
    return 0


def _load_checkpoint(args, ds) -> trainer.Trainer:
    path = Path(args.checkpoint)
    if not path.exists():
        raise CliError(f"checkpoint not found: {path}")
    try:
        return trainer.checkpoint_load(path, ds)
    except trainer.TrainerError as exc:
        raise CliError(str(exc)) from exc


def cmd_render(args) -> int:
    ds = _load_dataset(args)
    tr = _load_checkpoint(args, ds)
    out = _out_dir(args)
    views = ds.test if args.split == "test" else ds.train
    for i, view in enumerate(views):
        result = render(tr.cloud, view.camera,
                        background=tr.config.background)
        scene_io.save_image(out / f"{args.split}_{i:03d}.png",
                            np.clip(result.color, 0.0, 1.0))
    print(f"rendered {len(views)} {args.split} views -> {out}")
    return 0


def cmd_eval(args) -> int:
    ds = _load_dataset(args)
    tr = _load_checkpoint(args, ds)
    out = _out_dir(args)
    rows = tr.evaluate(args.split)
    _write_csv(out / "eval.csv", rows, trainer.EVAL_COLUMNS)
    for row in rows:
        print(f"view {row['view']:3d}  psnr {row['psnr']:7.3f}  "
              f"ssim {row['ssim']:.4f}  l1 {row['l1']:.5f}")
    if rows:
        print(f"mean psnr {np.mean([r['psnr'] for r in rows]):.3f}  "
              f"mean ssim {np.mean([r['ssim'] for r in rows]):.4f}")
    return 0


def cmd_pilot(args) -> int:
    ds = _load_dataset(args)
    out = _out_dir(args)
    view_counts = [int(v) for v in args.pilot_views.split(",")]
    counts = [int(v) for v in args.counts.split(",")]
    rows = trainer.pilot_sweep(ds, view_counts, counts,
                               iterations=args.iterations or 3000,
                               seed=args.seed or 0)
    _write_csv(out / "pilot.csv", rows,
               ("views", "primitives", "iteration", "seed", "train_loss",
                "test_loss"))
    print(f"pilot grid {view_counts} x {counts} -> {out / 'pilot.csv'}")
    return 0


def cmd_ensemble(args) -> int:
    ds = _load_dataset(args)
    tr = _load_checkpoint(args, ds)
    out = _out_dir(args)
    view = ds.test[args.view] if args.split == "test" else ds.train[args.view]
    ks = [int(k) for k in args.k.split(",")]
    rows = []
    for k in ks:
        img = rdr_mod.ensemble_render(tr.cloud, view.camera, k=k,
                                      rate=args.rate,
                                      seed=tr.config.seed,
                                      background=tr.config.background)
        scene_io.save_image(out / f"ensemble_k{k}.png", np.clip(img, 0, 1))
        full = render(tr.cloud, view.camera,
                      background=tr.config.background)
        rows.append({"k": k, "rate": args.rate,
                     "mse_vs_full": metrics.mse(img, np.asarray(full.color,
                                                                dtype=np.float64))})
    _write_csv(out / "ensemble.csv", rows, ("k", "rate", "mse_vs_full"))
    print(f"ensemble renders for k={ks} -> {out}")
    return 0


def cmd_edges(args) -> int:
    out = _out_dir(args)
    if args.image:
        img = scene_io.load_image(args.image)
    else:
        ds = _load_dataset(args)
        img = ds.train[args.view].image
    edge = ess_mod.sobel_edge_map(img)
    scene_io.save_image(out / "edges.png", edge)
    print(f"edge map -> {out / 'edges.png'}")
    return 0


def cmd_gradmap(args) -> int:
    ds = _load_dataset(args)
    tr = _load_checkpoint(args, ds)
    out = _out_dir(args)
    view = ds.train[args.view]
    result, record = render(tr.cloud, view.camera,
                            background=tr.config.background,
                            want_record=True)
    _, g_img = metrics.gs_loss(result.color, view.image, grad=True)
    grads = render_backward(tr.cloud, view.camera, record, g_img)
    mags = np.linalg.norm(grads["mean2d"], axis=1)
    gmap = gradient_map(record, mags)
    scene_io.save_image(out / "gradmap.png", gmap)
    print(f"gradient map -> {out / 'gradmap.png'}")
    return 0


def cmd_export_ply(args) -> int:
    ds = _load_dataset(args)
    tr = _load_checkpoint(args, ds)
    scene_io.ply_write(tr.cloud, args.ply_out)
    print(f"wrote {tr.cloud.count} primitives -> {args.ply_out}")
    return 0


def _add_common(p, checkpoint=False):
    p.add_argument("--data", help="blender-style dataset directory")
    p.add_argument("--synthetic", nargs="?", const="", default=None,
                   help="synthetic scene spec, e.g. "
                        "'kind=gaussian-soup,n_primitives=100,seed=1'")
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--views", type=int, default=None,
                   help="limit training views to the first K")
    p.add_argument("--threads", type=int, default=None,
                   help="worker-thread cap (results are identical for any "
                        "value; kernels are sequential by design)")
    if checkpoint:
        p.add_argument("--checkpoint", required=True)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="splatdrop",
        description="CPU Gaussian-splatting trainer with dropout "
                    "regularization and edge-guided splitting")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="optimize a scene")
    _add_common(p)
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--rdr.rate", dest="rdr_rate", type=float, default=None)
    p.add_argument("--rdr.lambda", dest="rdr_lambda", type=float,
                   default=None)
    p.add_argument("--override", action="append", default=[],
                   metavar="KEY=VALUE", help="dotted config override")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("render", help="render views from a checkpoint")
    _add_common(p, checkpoint=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.set_defaults(fn=cmd_render)

    p = sub.add_parser("eval", help="metrics table for a checkpoint")
    _add_common(p, checkpoint=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("pilot", help="fixed-complexity loss-curve sweep")
    _add_common(p)
    p.add_argument("--pilot-views", default="3", help="comma list, e.g. 3,6,9")
    p.add_argument("--counts", default="1000,10000",
                   help="comma list of primitive counts")
    p.add_argument("--iterations", type=int, default=None)
    p.set_defaults(fn=cmd_pilot)

    p = sub.add_parser("ensemble", help="averaged dropout sub-model renders")
    _add_common(p, checkpoint=True)
    p.add_argument("--k", default="1,8,64", help="comma list of ensemble sizes")
    p.add_argument("--rate", type=float, default=0.3)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--view", type=int, default=0)
    p.set_defaults(fn=cmd_ensemble)

    p = sub.add_parser("edges", help="Sobel edge map of an image or view")
    _add_common(p)
    p.add_argument("--image", help="standalone image instead of a dataset view")
    p.add_argument("--view", type=int, default=0)
    p.set_defaults(fn=cmd_edges)

    p = sub.add_parser("gradmap", help="screen-space gradient magnitude map")
    _add_common(p, checkpoint=True)
    p.add_argument("--view", type=int, default=0)
    p.set_defaults(fn=cmd_gradmap)

    p = sub.add_parser("export-ply", help="write the cloud as interchange PLY")
    _add_common(p, checkpoint=True)
    p.add_argument("--ply-out", default="model.ply")
    p.set_defaults(fn=cmd_export_ply)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse already printed help/usage; bad flags are a user error
        return 0 if exc.code == 0 else 1
    threads = args.threads
    if threads is None and os.environ.get("SPLATDROP_THREADS"):
        try:
            threads = int(os.environ["SPLATDROP_THREADS"])
        except ValueError:
            print("error: SPLATDROP_THREADS must be an integer",
                  file=sys.stderr)
            return 1
    if threads is not None and threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return 1
    # compositing kernels are sequential for reproducibility; the cap only
    # bounds auxiliary numpy/numba parallelism
    try:
        return args.fn(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (scene_io.SceneIOError, ConfigError, trainer.TrainerError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # internal fault -> exit 2
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
