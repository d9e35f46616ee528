"""Evaluation metrics, grouped reports, posture/sliding protocols, ablations.

Reports are plain data: a per-sample table plus per-force-bin summaries with
medians and quartiles, reproducible from the persisted sample table alone.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from tactwin.assignment import image_to_map
from tactwin.contact import SlideFrame, generate_sliding_trajectory
from tactwin.forcemap import ForceMap, contact_area, localize
from tactwin.inference import forward_direct, forward_map, forward_posture, predict
from tactwin.pipeline import (
    DIRECT_OUT_SCALE,
    TwinAssets,
    TwinDataset,
    build_stack,
    dataset_stacks,
    direct_targets,
    posture_stacks,
    posture_targets,
    train_task,
)

DEFAULT_BIN_EDGES = (0.0, 0.4, 0.8, 1.2, 1.6, 2.0)


class UndefinedDirectionError(ValueError):
    """Direction error is undefined for a zero-length force vector."""


def direction_error(f_true: np.ndarray, f_pred: np.ndarray) -> float:
    """Angle between two force vectors, degrees."""
    a = np.asarray(f_true, dtype=float)
    b = np.asarray(f_pred, dtype=float)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise UndefinedDirectionError("zero force vector has no direction")
    cos = np.clip(a @ b / (na * nb), -1.0, 1.0)
    return float(np.rad2deg(np.arccos(cos)))


def circular_error_deg(true_deg: float, pred_deg: float) -> float:
    """Smallest angular distance on the circle, degrees."""
    d = abs((float(pred_deg) - float(true_deg)) % 360.0)
    return min(d, 360.0 - d)


@dataclass
class BinStats:
    lo: float
    hi: float
    values: dict[str, np.ndarray] = field(default_factory=dict)

    def median(self, key: str) -> float:
        v = self.values.get(key)
        return float(np.median(v)) if v is not None and len(v) else float("nan")

    def quartiles(self, key: str) -> tuple[float, float]:
        v = self.values.get(key)
        if v is None or not len(v):
            return float("nan"), float("nan")
        return float(np.quantile(v, 0.25)), float(np.quantile(v, 0.75))

    @property
    def count(self) -> int:
        first = next(iter(self.values.values()), np.zeros(0))
        return len(first)


@dataclass
class EvalReport:
    """Per-sample error table plus per-force-bin summaries."""

    table: dict[str, np.ndarray]  # column name -> per-sample values
    bins: list[BinStats]
    bin_edges: tuple[float, ...]
    metadata: dict[str, str] = field(default_factory=dict)

    def median(self, key: str) -> float:
        return float(np.median(self.table[key]))

    def to_tsv(self) -> str:
        keys = list(self.table.keys())
        lines = ["\t".join(keys)]
        n = len(next(iter(self.table.values())))
        for i in range(n):
            lines.append("\t".join(f"{self.table[k][i]:.9g}" for k in keys))
        return "\n".join(lines) + "\n"

    def summary_tsv(self) -> str:
        metric_keys = [k for k in self.table.keys() if k not in ("force_magnitude",)]
        lines = ["bin_lo\tbin_hi\tcount\t" + "\t".join(f"{k}_median\t{k}_q1\t{k}_q3" for k in metric_keys)]
        for b in self.bins:
            cells = [f"{b.lo:.3g}", f"{b.hi:.3g}", str(b.count)]
            for k in metric_keys:
                q1, q3 = b.quartiles(k)
                cells.extend([f"{b.median(k):.9g}", f"{q1:.9g}", f"{q3:.9g}"])
            lines.append("\t".join(cells))
        meta = [f"# {k} = {v}" for k, v in self.metadata.items()]
        return "\n".join(meta + lines) + "\n"


def binned_stats(
    table: dict[str, np.ndarray],
    bin_key: str = "force_magnitude",
    bin_edges=DEFAULT_BIN_EDGES,
    metadata: dict[str, str] | None = None,
) -> EvalReport:
    """Group a per-sample table into force bins; every sample lands in one bin.

    Values at or above the last edge join the final bin so the bins partition
    the observed range.
    """
    edges = tuple(bin_edges)
    if any(b <= a for a, b in zip(edges, edges[1:])):
        raise ValueError("bin edges must be strictly increasing")
    magnitudes = np.asarray(table[bin_key])
    idx = np.clip(np.searchsorted(edges, magnitudes, side="right") - 1, 0, len(edges) - 2)
    bins = []
    for b in range(len(edges) - 1):
        mask = idx == b
        bins.append(
            BinStats(
                lo=edges[b],
                hi=edges[b + 1],
                values={k: np.asarray(v)[mask] for k, v in table.items()},
            )
        )
    return EvalReport(table=table, bins=bins, bin_edges=edges, metadata=metadata or {})


def eval_direct(assets: TwinAssets, ds: TwinDataset, task, indices=None) -> EvalReport:
    """Direct-head errors on selected samples (defaults to the test split)."""
    indices = task.split["test"] if indices is None else indices
    x = dataset_stacks(ds, task.variant)[indices]
    y = direct_targets(ds)[indices]
    preds = predict(task.model, x) * task.model.out_scale
    pos_err = np.linalg.norm(preds[:, :3] - y[:, :3], axis=1)
    per_axis = np.abs(preds[:, :3] - y[:, :3])
    force_err = np.abs(preds[:, 3:] - y[:, 3:])
    mag_true = np.linalg.norm(y[:, 3:], axis=1)
    mag_err = np.abs(np.linalg.norm(preds[:, 3:], axis=1) - mag_true)
    dir_err = np.array(
        [
            direction_error(t, p) if np.linalg.norm(p) > 0 else 180.0
            for t, p in zip(y[:, 3:], preds[:, 3:])
        ]
    )
    table = {
        "force_magnitude": mag_true,
        "position_error": pos_err,
        "position_error_x": per_axis[:, 0],
        "position_error_y": per_axis[:, 1],
        "position_error_z": per_axis[:, 2],
        "force_error_n": force_err[:, 0],
        "force_error_s1": force_err[:, 1],
        "force_error_s2": force_err[:, 2],
        "force_magnitude_error": mag_err,
        "direction_error": dir_err,
    }
    return binned_stats(table, metadata={"head": "direct", "samples": str(len(indices))})


def eval_map(assets: TwinAssets, ds: TwinDataset, task, indices=None) -> EvalReport:
    """Map-head errors: total force, localization, direction, contact area."""
    indices = task.split["test"] if indices is None else indices
    x = dataset_stacks(ds, task.variant)
    rows = {
        "force_magnitude": [],
        "total_force_error": [],
        "position_error": [],
        "direction_error": [],
        "area_diameter": [],
        "argmax_pixel_error": [],
    }
    for i in indices:
        s = ds.samples[i]
        pred_img = forward_map(task.model, x[i])
        pred_map = image_to_map(pred_img, assets.assignment)
        true_total = s.force_global
        pred_total = pred_map.nodal_forces.sum(axis=0)
        rows["force_magnitude"].append(np.linalg.norm(true_total))
        rows["total_force_error"].append(
            abs(np.linalg.norm(pred_total) - np.linalg.norm(true_total))
        )
        loc = localize(_safe_map(pred_map), assets.mesh)
        rows["position_error"].append(np.linalg.norm(loc - s.contact_point))
        try:
            rows["direction_error"].append(direction_error(true_total, pred_total))
        except UndefinedDirectionError:
            rows["direction_error"].append(180.0)
        rows["area_diameter"].append(contact_area(pred_map, assets.mesh))
        true_img = np.linalg.norm(
            _map_image_mags(ForceMap(s.force_map), assets), axis=-1
        )
        pred_mag_img = np.linalg.norm(pred_img, axis=-1)
        ty, tx = np.unravel_index(np.argmax(true_img), true_img.shape)
        py, px = np.unravel_index(np.argmax(pred_mag_img), pred_mag_img.shape)
        rows["argmax_pixel_error"].append(float(np.hypot(px - tx, py - ty)))
    table = {k: np.asarray(v) for k, v in rows.items()}
    return binned_stats(table, metadata={"head": "map", "samples": str(len(indices))})


def _map_image_mags(fmap: ForceMap, assets: TwinAssets) -> np.ndarray:
    from tactwin.assignment import map_to_image

    return map_to_image(fmap, assets.assignment)


def _safe_map(fmap: ForceMap) -> ForceMap:
    # The learned map is never exactly zero, but guard the localize call.
    if np.count_nonzero(np.linalg.norm(fmap.nodal_forces, axis=1)) == 0:
        forces = fmap.nodal_forces.copy()
        forces[0, 2] = 1e-12
        return ForceMap(forces)
    return fmap


def posture_eval(
    truths: np.ndarray, predictions: np.ndarray, yaw_bin_edges=(-90.0, -60.0, -30.0, 30.0, 60.0, 90.0)
) -> dict:
    """Yaw and circular roll errors, with roll errors grouped by true yaw."""
    truths = np.asarray(truths, dtype=float)
    predictions = np.asarray(predictions, dtype=float)
    if np.any(np.abs(truths[:, 0]) > 90.0):
        raise ValueError("yaw must lie in [-90, 90]")
    yaw_err = np.abs(predictions[:, 0] - truths[:, 0])
    roll_err = np.array(
        [circular_error_deg(t, p) for t, p in zip(truths[:, 1], predictions[:, 1])]
    )
    by_yaw = []
    for lo, hi in zip(yaw_bin_edges, yaw_bin_edges[1:]):
        mask = (truths[:, 0] >= lo) & (truths[:, 0] < hi)
        by_yaw.append(
            {
                "lo": lo,
                "hi": hi,
                "count": int(mask.sum()),
                "roll_median": float(np.median(roll_err[mask])) if mask.any() else float("nan"),
            }
        )
    return {
        "yaw_error": yaw_err,
        "roll_error": roll_err,
        "yaw_median": float(np.median(yaw_err)),
        "roll_median": float(np.median(roll_err)),
        "roll_by_yaw": by_yaw,
    }


def sliding_eval(
    assets: TwinAssets, model, frames: list[SlideFrame], variant: str = "diff_skel"
) -> dict[str, np.ndarray]:
    """Per-frame direct estimates along a sliding trajectory.

    Returns a time series of true/estimated positions and the angle between
    the estimated force vector and the surface normal at the estimated
    contact.
    """
    from tactwin.deform import apply_deformation, solve_deformation
    from tactwin.forcemap import distribute_force
    from tactwin.geometry import to_global
    from tactwin.optics import render

    cfg = assets.config
    ref = assets.reference.pixels
    skel = assets.skeleton_image.pixels
    rows = {k: [] for k in (
        "arc", "paused", "true_x", "true_y", "true_z", "est_x", "est_y", "est_z",
        "position_error", "force_angle_to_normal",
    )}
    for frame in frames:
        ev = frame.event
        fmap = distribute_force(assets.mesh, ev, assets.force_profile)
        field = solve_deformation(assets.mesh, None, -fmap.nodal_forces, operator=assets.operator)
        pos, nrm = apply_deformation(assets.mesh, field)
        img = render(
            pos, nrm, assets.mesh.triangles, assets.lights, assets.camera,
            exposure=cfg.exposure, divergence_deg=cfg.cone_divergence_deg,
        )
        stack = build_stack(img.pixels, ref, skel, variant)
        pred = forward_direct(model, stack)
        est_pos = pred[:3]
        est_force_local = pred[3:]
        nearest = int(np.argmin(np.linalg.norm(assets.mesh.node_positions - est_pos, axis=1)))
        est_force_global = to_global(assets.mesh, nearest, est_force_local)
        normal = assets.mesh.node_normals[nearest]
        try:
            angle = direction_error(normal, est_force_global)
        except UndefinedDirectionError:
            angle = 180.0
        rows["arc"].append(frame.arc_position)
        rows["paused"].append(float(frame.paused))
        for k, v in zip(("true_x", "true_y", "true_z"), ev.contact_point):
            rows[k].append(v)
        for k, v in zip(("est_x", "est_y", "est_z"), est_pos):
            rows[k].append(v)
        rows["position_error"].append(float(np.linalg.norm(est_pos - ev.contact_point)))
        rows["force_angle_to_normal"].append(angle)
    return {k: np.asarray(v) for k, v in rows.items()}


def ablation_suite(
    assets: TwinAssets,
    ds: TwinDataset,
    fractions=(0.2, 1.0),
    variants=("raw", "diff", "diff_skel", "gray"),
    seeds=(0, 1, 2),
    epochs: int | None = None,
) -> list[dict]:
    """Train/evaluate the direct head per (fraction, variant, seed).

    Fractions sweep at the default variant; variants sweep at fraction 1.0.
    Returns one row per run with median position and force errors.
    """
    runs = []
    jobs = []
    for fr in fractions:
        jobs.append((fr, "diff_skel"))
    for variant in variants:
        if (1.0, variant) not in jobs:
            jobs.append((1.0, variant))
    for fraction, variant in jobs:
        for seed in seeds:
            task = train_task(
                assets, ds, "direct", seed=seed, variant=variant, fraction=fraction, epochs=epochs
            )
            report = eval_direct(assets, ds, task)
            runs.append(
                {
                    "fraction": fraction,
                    "variant": variant,
                    "seed": seed,
                    "position_error": report.median("position_error"),
                    "force_error": report.median("force_magnitude_error"),
                }
            )
    return runs


def ablation_median(runs: list[dict], fraction: float, variant: str, key: str) -> float:
    vals = [r[key] for r in runs if r["fraction"] == fraction and r["variant"] == variant]
    return float(np.median(vals))


def write_report(out_dir, name: str, report: EvalReport) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    samples_path = out / f"{name}_samples.tsv"
    summary_path = out / f"{name}_summary.tsv"
    samples_path.write_text(report.to_tsv(), encoding="utf-8")
    summary_path.write_text(report.summary_tsv(), encoding="utf-8")
    return samples_path, summary_path


def report_from_samples_tsv(path) -> EvalReport:
    """Regenerate a report from its persisted per-sample table."""
    lines = Path(path).read_text(encoding="utf-8").strip().splitlines()
    keys = lines[0].split("\t")
    data = np.array([[float(v) for v in line.split("\t")] for line in lines[1:]])
    table = {k: data[:, i] for i, k in enumerate(keys)}
    return binned_stats(table)
