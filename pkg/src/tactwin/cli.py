"""Command-line entry points for the sensor twin.

Commands: mesh | skeleton | assign | simulate | render | train | eval |
ablate | posture | slide | report. All are driven by a flat key=value config
(`--config`); every run writes the fully resolved config and artifact hashes
next to its outputs. Exit codes: 0 success, 2 config error, 3 data error,
4 numeric failure; errors go to stderr as "E:<code>: message".
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from tactwin import binio
from tactwin.config import ConfigError, RunConfig, load_config, write_resolved
from tactwin.contact import DomainError, generate_sliding_trajectory
from tactwin.datastore import (
    DataError,
    dataset_hash,
    load_dataset,
    save_dataset,
    write_hashes,
)
from tactwin.deform import SolverError
from tactwin.geometry import InvalidGeometryError, save_mesh
from tactwin.inference import TrainingError, load_model, save_model
from tactwin.optics import save_image, save_ppm
from tactwin.pipeline import build_assets, posture_dataset, simulate_dataset, train_task

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _fail(code: int, message: str) -> int:
    print(f"E:{code}: {message}", file=sys.stderr)
    return code


def _load_cfg(args) -> RunConfig:
    cfg = RunConfig()
    if args.config:
        cfg = load_config(args.config, cfg)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _dataset_cfg(args) -> RunConfig:
    """Prefer the dataset's own resolved config so artifacts stay consistent."""
    if args.config:
        return _load_cfg(args)
    resolved = Path(args.dataset) / "resolved.cfg" if args.dataset else None
    if resolved and resolved.exists():
        cfg = load_config(resolved)
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        return cfg
    return _load_cfg(args)


def cmd_mesh(args) -> int:
    cfg = _load_cfg(args)
    assets = build_assets(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_mesh(out / "mesh.imsh", assets.mesh)
    write_resolved(cfg, out)
    write_hashes(out)
    print(f"mesh: {assets.mesh.node_count} nodes -> {out / 'mesh.imsh'}")
    return EXIT_OK


def cmd_skeleton(args) -> int:
    cfg = _load_cfg(args)
    assets = build_assets(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lat = assets.lattice
    rows = ["ax\tay\taz\tbx\tby\tbz\tradius"]
    for a, b in zip(lat.segments_a, lat.segments_b):
        rows.append("\t".join(f"{v:.6g}" for v in (*a, *b, lat.beam_radius)))
    (out / "skeleton.tsv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    write_resolved(cfg, out)
    write_hashes(out)
    print(f"skeleton: {len(lat.segments_a)} segments, {lat.window_count} windows")
    return EXIT_OK


def cmd_assign(args) -> int:
    cfg = _load_cfg(args)
    assets = build_assets(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    from tactwin.assignment import save_assignment

    save_assignment(out / "assignment.iasn", assets.assignment)
    write_resolved(cfg, out)
    write_hashes(out)
    print(
        f"assignment: {assets.assignment.node_count} nodes -> {cfg.grid_width}x{cfg.grid_height}"
        f" grid, cost {assets.assignment.total_cost:.2f},"
        f" {assets.assignment.out_of_view_nodes} nodes clamped from outside the view"
    )
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = _load_cfg(args)
    assets = build_assets(cfg)
    ds = simulate_dataset(assets)
    out = save_dataset(args.out, ds, assets)
    write_resolved(cfg, out)
    write_hashes(out)
    print(f"simulate: {len(ds)} samples -> {out} (hash {dataset_hash(out)[:16]})")
    return EXIT_OK


def cmd_render(args) -> int:
    cfg = _load_cfg(args)
    assets = build_assets(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_image(out / "reference.iimg", assets.reference)
    save_ppm(out / "reference.ppm", assets.reference)
    save_image(out / "skeleton.iimg", assets.skeleton_image)
    save_ppm(out / "skeleton.ppm", assets.skeleton_image)
    write_resolved(cfg, out)
    write_hashes(out)
    print(f"render: reference and skeleton images -> {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _dataset_cfg(args)
    ds, _ = load_dataset(args.dataset)
    assets = build_assets(cfg)
    fraction = args.fraction if args.fraction is not None else cfg.fraction
    variant = args.variant if args.variant else cfg.variant
    task = train_task(assets, ds, args.task, variant=variant, fraction=fraction)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model_path = Path(args.model) if args.model else out / "model.imdl"
    save_model(model_path, task.model)
    rows = ["epoch\ttrain_loss\tval_loss"]
    for e, (tr, vl) in enumerate(zip(task.history.train_loss, task.history.val_loss)):
        rows.append(f"{e}\t{tr:.9g}\t{vl:.9g}")
    (out / "loss.tsv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    write_resolved(cfg, out)
    write_hashes(out)
    print(
        f"train[{args.task}/{variant}]: best epoch {task.history.best_epoch},"
        f" val loss {min(task.history.val_loss):.6g} -> {model_path}"
    )
    return EXIT_OK


def cmd_eval(args) -> int:
    from tactwin import evaluation
    from tactwin.charts import half_violin_chart
    from tactwin.pipeline import dataset_stacks, posture_stacks, posture_targets, split_by_location
    from tactwin.inference import forward_posture, predict

    cfg = _dataset_cfg(args)
    ds, _ = load_dataset(args.dataset)
    assets = build_assets(cfg)
    model = load_model(args.model)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    split = split_by_location([s.loc_id for s in ds.samples], seed=cfg.seed)

    class _Shim:
        pass

    task = _Shim()
    task.model = model
    task.split = split
    task.variant = args.variant or cfg.variant
    if model.head == "direct":
        report = evaluation.eval_direct(assets, ds, task)
        name = "direct"
    elif model.head == "map":
        report = evaluation.eval_map(assets, ds, task)
        name = "map"
    elif model.head == "posture":
        x = posture_stacks(ds)[split["test"]]
        truths = np.array([(ds.samples[i].yaw, ds.samples[i].roll) for i in split["test"]])
        preds = np.array([forward_posture(model, xi) for xi in x])
        result = evaluation.posture_eval(truths, preds)
        rows = ["yaw_true\troll_true\tyaw_pred\troll_pred\tyaw_error\troll_error"]
        for t, p, ye, re_ in zip(truths, preds, result["yaw_error"], result["roll_error"]):
            rows.append(f"{t[0]:.6g}\t{t[1]:.6g}\t{p[0]:.6g}\t{p[1]:.6g}\t{ye:.6g}\t{re_:.6g}")
        (out / "posture_samples.tsv").write_text("\n".join(rows) + "\n", encoding="utf-8")
        summary = [
            f"yaw_median\t{result['yaw_median']:.6g}",
            f"roll_median\t{result['roll_median']:.6g}",
        ]
        for b in result["roll_by_yaw"]:
            summary.append(f"roll_median_yaw_{b['lo']:g}_{b['hi']:g}\t{b['roll_median']:.6g}")
        (out / "posture_summary.tsv").write_text("\n".join(summary) + "\n", encoding="utf-8")
        write_resolved(cfg, out)
        write_hashes(out)
        print(f"eval[posture]: yaw median {result['yaw_median']:.2f} deg -> {out}")
        return EXIT_OK
    else:
        raise DataError(f"unknown model head {model.head!r}")
    evaluation.write_report(out, name, report)
    half_violin_chart(report, "position_error", out / f"{name}_position_error.svg")
    write_resolved(cfg, out)
    write_hashes(out)
    print(
        f"eval[{name}]: median position error "
        f"{report.median('position_error'):.3f} mm over {len(split['test'])} test samples -> {out}"
    )
    return EXIT_OK


def cmd_ablate(args) -> int:
    from tactwin import evaluation
    from tactwin.charts import median_curve_chart

    cfg = _dataset_cfg(args)
    ds, _ = load_dataset(args.dataset)
    assets = build_assets(cfg)
    fractions = (args.fraction, 1.0) if args.fraction else (0.2, 1.0)
    runs = evaluation.ablation_suite(
        assets, ds, fractions=fractions, seeds=(0, 1, 2), epochs=max(4, cfg.epochs // 3)
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = ["fraction\tvariant\tseed\tposition_error\tforce_error"]
    for r in runs:
        rows.append(
            f"{r['fraction']:g}\t{r['variant']}\t{r['seed']}\t"
            f"{r['position_error']:.9g}\t{r['force_error']:.9g}"
        )
    (out / "ablation.tsv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    median_curve_chart(
        [r for r in runs if r["variant"] == "diff_skel"],
        "fraction", "position_error", out / "ablation_fraction.svg",
    )
    write_resolved(cfg, out)
    write_hashes(out)
    print(f"ablate: {len(runs)} runs -> {out / 'ablation.tsv'}")
    return EXIT_OK


def cmd_posture(args) -> int:
    cfg = _load_cfg(args)
    assets = build_assets(cfg)
    ds = posture_dataset(assets)
    out = save_dataset(args.out, ds, assets)
    write_resolved(cfg, out)
    write_hashes(out)
    print(f"posture: {len(ds)} gravity renders -> {out}")
    return EXIT_OK


def cmd_slide(args) -> int:
    from tactwin import evaluation

    cfg = _load_cfg(args)
    assets = build_assets(cfg)
    model = load_model(args.model)
    if model.head != "direct":
        raise DataError("slide evaluation needs a direct-head model")
    start = int(np.argmin(np.linalg.norm(
        assets.mesh.node_positions - np.array([assets.geometry.base_radius * 0.7, 0.0, 30.0]),
        axis=1,
    )))
    frames = generate_sliding_trajectory(
        assets.mesh, assets.geometry, start,
        depth=cfg.slide_depth, slide_length=cfg.slide_length,
        motion_step=cfg.slide_motion_step, pause_frames=cfg.slide_pause_frames,
        indenter=assets.indenter, law=assets.law,
    )
    series = evaluation.sliding_eval(assets, model, frames, variant=args.variant or cfg.variant)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    keys = list(series.keys())
    rows = ["\t".join(keys)]
    for i in range(len(series["arc"])):
        rows.append("\t".join(f"{series[k][i]:.9g}" for k in keys))
    (out / "slide.tsv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    write_resolved(cfg, out)
    write_hashes(out)
    print(f"slide: {len(frames)} frames -> {out / 'slide.tsv'}")
    return EXIT_OK


def cmd_report(args) -> int:
    from tactwin import evaluation

    out = Path(args.out)
    found = sorted(out.glob("*_samples.tsv"))
    if not found:
        raise DataError(f"no *_samples.tsv under {out}")
    for samples_path in found:
        name = samples_path.name.replace("_samples.tsv", "")
        if name == "posture":
            continue  # posture summaries are regenerated by eval
        report = evaluation.report_from_samples_tsv(samples_path)
        (out / f"{name}_summary.tsv").write_text(report.summary_tsv(), encoding="utf-8")
        print(f"report: regenerated {name}_summary.tsv")
    write_hashes(out)
    return EXIT_OK


COMMANDS = {
    "mesh": cmd_mesh,
    "skeleton": cmd_skeleton,
    "assign": cmd_assign,
    "simulate": cmd_simulate,
    "render": cmd_render,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "posture": cmd_posture,
    "slide": cmd_slide,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tactwin", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=str, default=None, help="key=value config file")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", type=str, default="out", help="output directory")
        p.add_argument("--dataset", type=str, default=None, help="dataset directory")
        p.add_argument("--model", type=str, default=None, help="model file (IMDL)")
        p.add_argument("--fraction", type=float, default=None, help="training-data fraction")
        p.add_argument("--variant", type=str, default=None, help="network input variant")
        if name == "train":
            p.add_argument("--task", type=str, default="direct",
                           choices=("direct", "map", "posture"))
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command in ("train", "eval", "ablate") and not args.dataset:
            raise DataError(f"{args.command} needs --dataset")
        if args.command in ("eval", "slide") and not args.model:
            raise DataError(f"{args.command} needs --model")
        if args.dataset and args.command in ("train", "eval", "ablate"):
            if not Path(args.dataset).exists():
                raise DataError(f"dataset directory not found: {args.dataset}")
        return COMMANDS[args.command](args)
    except (ConfigError, InvalidGeometryError) as exc:
        return _fail(EXIT_CONFIG, str(exc))
    except (DataError, binio.FormatError, FileNotFoundError) as exc:
        return _fail(EXIT_DATA, str(exc))
    except (SolverError, TrainingError, DomainError, FloatingPointError) as exc:
        return _fail(EXIT_NUMERIC, str(exc))


if __name__ == "__main__":
    sys.exit(main())
