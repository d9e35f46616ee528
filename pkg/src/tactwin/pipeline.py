"""End-to-end wiring: assets, dataset simulation, input stacks, task training.

A `TwinAssets` bundle holds everything derived from a RunConfig: geometry,
mesh, lattice, optics, the assembled stiffness operator, the static reference
and skeleton images, and the pixel-node assignment. Datasets are lists of
samples (probe contacts or gravity postures) with rendered raw images and
ground-truth force maps; training prepares input stacks per network-input
variant and hands numpy arrays to the from-scratch regressor.
"""

from __future__ import annotations

import multiprocessing
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from tactwin.assignment import PixelNodeAssignment, build_assignment, map_to_image
from tactwin.config import RunConfig
from tactwin.contact import (
    ContactEvent,
    ForceLaw,
    Indenter,
    ProbeProtocol,
    generate_probe_dataset,
    gravity_load,
)
from tactwin.deform import StiffnessConfig, StiffnessOperator, apply_deformation, solve_deformation
from tactwin.forcemap import ForceMap, distribute_force, named_profile
from tactwin.geometry import (
    SensorGeometry,
    SkeletonLattice,
    SurfaceMesh,
    SurfaceProfile,
    build_mesh,
    build_skeleton,
    thickness_field,
)
from tactwin.inference import (
    Regressor,
    TrainConfig,
    TrainHistory,
    build_direct_model,
    build_map_model,
    build_posture_model,
    posture_target,
    train,
)
from tactwin.optics import (
    CameraModel,
    SensorImage,
    add_sensor_noise,
    default_light_ring,
    render,
    render_mesh,
    render_skeleton_image,
)

VARIANTS = ("raw", "diff", "diff_skel", "gray")
LUMA = np.array([0.299, 0.587, 0.114])
POSITION_SCALE = 50.0  # mm, keeps direct targets O(1)
MAP_TARGET_SCALE = 5.0  # per-pixel forces are small; scale for training
POSTURE_SCALE = np.array([90.0, 1.0, 1.0])


@dataclass(frozen=True)
class TwinAssets:
    config: RunConfig
    geometry: SensorGeometry
    profile: SurfaceProfile
    lattice: SkeletonLattice
    mesh: SurfaceMesh
    camera: CameraModel
    lights: list
    operator: StiffnessOperator
    assignment: PixelNodeAssignment
    reference: SensorImage
    skeleton_image: SensorImage
    indenter: Indenter
    law: ForceLaw
    thickness: np.ndarray

    @property
    def force_profile(self):
        return named_profile(self.config.profile, self.indenter.tip_radius)


def build_assets(cfg: RunConfig) -> TwinAssets:
    geometry = SensorGeometry(
        base_diameter=cfg.base_diameter,
        height=cfg.height,
        tip_radius=cfg.tip_radius,
        shell_thickness=cfg.shell_thickness,
        skeleton_inner_offset=cfg.skeleton_inner_offset,
        fovea_extent=(cfg.fovea_width, cfg.fovea_height),
        fovea_thickness=cfg.fovea_thickness,
        fovea_azimuth_deg=cfg.fovea_azimuth_deg,
        fovea_center_z=cfg.fovea_center_z,
    )
    lattice = build_skeleton(
        geometry,
        n_longitudinal_beams=cfg.n_meridians,
        n_rings=cfg.n_rings,
        beam_radius=cfg.beam_radius,
        cap_margin=cfg.cap_margin,
    )
    mesh = build_mesh(
        geometry, target_spacing=cfg.mesh_spacing, seed=cfg.seed, lattice=lattice,
        lloyd_passes=cfg.lloyd_passes,
    )
    camera = CameraModel(
        fov_deg=(cfg.fov_width_deg, cfg.fov_height_deg),
        position=np.array([0.0, 0.0, cfg.camera_z]),
        downsample=(cfg.image_width, cfg.image_height),
    )
    lights = default_light_ring(
        ring_radius=cfg.led_ring_radius,
        ring_z=cfg.led_ring_z,
        collimator_diameter=cfg.collimator_diameter,
        tilt_deg=cfg.collimator_tilt_deg,
        brightness_rgb=(cfg.brightness_r, cfg.brightness_g, cfg.brightness_b),
    )
    operator = StiffnessOperator(
        mesh,
        StiffnessConfig(
            edge_stiffness=cfg.edge_stiffness,
            anchor_base=cfg.anchor_base,
            anchor_skeleton=cfg.anchor_skeleton,
            anchor_scale=cfg.anchor_scale,
            cg_tol=cfg.cg_tol,
        ),
    )
    assignment = build_assignment(mesh, camera, (cfg.grid_width, cfg.grid_height))
    reference = render_mesh(
        mesh, lights, camera, exposure=cfg.exposure,
        divergence_deg=cfg.cone_divergence_deg, kind="reference",
    )
    skeleton_image = render_skeleton_image(lattice, camera)
    law = ForceLaw(
        youngs_modulus_kpa=cfg.youngs_modulus_kpa,
        poisson_ratio=cfg.poisson_ratio,
        stiffen_gain=cfg.stiffen_gain,
        stiffen_scale=cfg.stiffen_scale,
        friction_cap=cfg.friction_cap,
        slip_distance=cfg.slip_distance,
    )
    return TwinAssets(
        config=cfg,
        geometry=geometry,
        profile=SurfaceProfile(geometry),
        lattice=lattice,
        mesh=mesh,
        camera=camera,
        lights=lights,
        operator=operator,
        assignment=assignment,
        reference=reference,
        skeleton_image=skeleton_image,
        indenter=Indenter(tip_radius=cfg.probe_diameter / 2),
        law=law,
        thickness=thickness_field(mesh, geometry),
    )


@dataclass
class Sample:
    index: int
    loc_id: int  # grouping key for the location-wise split
    node: int  # -1 for posture samples
    contact_point: np.ndarray
    depth: float
    force_global: np.ndarray
    force_local: np.ndarray
    yaw: float
    roll: float
    raw: np.ndarray  # (H, W, 3)
    force_map: np.ndarray | None  # (N, 3) or None for posture samples


@dataclass
class TwinDataset:
    kind: str  # probe | posture
    samples: list[Sample]
    reference: SensorImage
    skeleton_image: SensorImage

    def __len__(self) -> int:
        return len(self.samples)


def render_contact(
    assets: TwinAssets, events: list[ContactEvent], noise_rng: np.random.Generator | None = None
) -> tuple[SensorImage, ForceMap]:
    """Raw image and ground-truth map for one or more superposed contacts."""
    total = np.zeros((assets.mesh.node_count, 3))
    for ev in events:
        total += distribute_force(assets.mesh, ev, assets.force_profile).nodal_forces
    fmap = ForceMap(total)
    field = solve_deformation(assets.mesh, None, -fmap.nodal_forces, operator=assets.operator)
    pos, nrm = apply_deformation(assets.mesh, field)
    img = render(
        pos, nrm, assets.mesh.triangles, assets.lights, assets.camera,
        exposure=assets.config.exposure, divergence_deg=assets.config.cone_divergence_deg,
    )
    if noise_rng is not None and assets.config.noise_sigma > 0:
        img = add_sensor_noise(img, noise_rng, assets.config.noise_sigma)
    return img, fmap


_POOL_STATE: dict = {}


def _render_sample_worker(args):
    index, event_idx = args
    assets: TwinAssets = _POOL_STATE["assets"]
    events: list[ContactEvent] = _POOL_STATE["events"]
    seed = _POOL_STATE["seed"]
    ev = events[event_idx]
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(999, index)))
    img, fmap = render_contact(assets, [ev], noise_rng=rng)
    return index, img.pixels, fmap.nodal_forces


def simulate_dataset(
    assets: TwinAssets, n_locations: int | None = None, seed: int | None = None, workers: int | None = None
) -> TwinDataset:
    """Probe dataset: contacts from the protocol, rendered with sensor noise.

    Per-sample noise streams are seeded by sample index, so worker count does
    not change the result; samples are merged in index order.
    """
    cfg = assets.config
    seed = cfg.seed if seed is None else seed
    n_locations = cfg.n_locations if n_locations is None else n_locations
    workers = cfg.workers if workers is None else workers
    protocol = ProbeProtocol(
        normal_step=cfg.normal_step,
        shear_ratio=cfg.shear_ratio,
        force_cutoff=cfg.force_cutoff,
        shear_directions=cfg.shear_directions,
    )
    events = generate_probe_dataset(
        assets.mesh, None, protocol, n_locations, seed=seed,
        indenter=assets.indenter, law=assets.law,
    )
    jobs = [(i, i) for i in range(len(events))]
    _POOL_STATE.update(assets=assets, events=events, seed=seed)
    if workers and workers > 1:
        with multiprocessing.get_context("fork").Pool(workers) as pool:
            results = pool.map(_render_sample_worker, jobs, chunksize=16)
    else:
        results = [_render_sample_worker(job) for job in jobs]
    results.sort(key=lambda r: r[0])
    samples = []
    for (index, pixels, nodal), ev in zip(results, events):
        samples.append(
            Sample(
                index=index,
                loc_id=ev.node,
                node=ev.node,
                contact_point=ev.contact_point,
                depth=ev.depth,
                force_global=ev.force_global,
                force_local=ev.force_local,
                yaw=0.0,
                roll=0.0,
                raw=pixels,
                force_map=nodal,
            )
        )
    return TwinDataset(
        kind="probe", samples=samples, reference=assets.reference,
        skeleton_image=assets.skeleton_image,
    )


def posture_dataset(
    assets: TwinAssets, n_samples: int | None = None, seed: int | None = None
) -> TwinDataset:
    """Gravity-only renders over random postures; noiseless (dark-room twin)."""
    cfg = assets.config
    seed = cfg.seed if seed is None else seed
    n_samples = cfg.posture_samples if n_samples is None else n_samples
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(55,)))
    samples = []
    for i in range(n_samples):
        yaw = float(rng.uniform(-90.0, 90.0))
        roll = float(rng.uniform(0.0, 360.0))
        loads = gravity_load(
            assets.mesh, (yaw, roll), cfg.shell_density, thickness=assets.thickness
        )
        field = solve_deformation(assets.mesh, None, loads, operator=assets.operator)
        pos, nrm = apply_deformation(assets.mesh, field)
        img = render(
            pos, nrm, assets.mesh.triangles, assets.lights, assets.camera,
            exposure=cfg.exposure, divergence_deg=cfg.cone_divergence_deg,
        )
        samples.append(
            Sample(
                index=i,
                loc_id=i,
                node=-1,
                contact_point=np.zeros(3),
                depth=0.0,
                force_global=np.zeros(3),
                force_local=np.zeros(3),
                yaw=yaw,
                roll=roll,
                raw=img.pixels,
                force_map=None,
            )
        )
    return TwinDataset(
        kind="posture", samples=samples, reference=assets.reference,
        skeleton_image=assets.skeleton_image,
    )


def variant_channels(variant: str) -> int:
    return {"raw": 3, "diff": 3, "diff_skel": 6, "gray": 2}[variant]


def build_stack(
    raw: np.ndarray, reference: np.ndarray, skeleton: np.ndarray, variant: str
) -> np.ndarray:
    """Network input (C, H, W) for one sample under an input variant."""
    if variant == "raw":
        return raw.transpose(2, 0, 1)
    diff = raw - reference
    if variant == "diff":
        return diff.transpose(2, 0, 1)
    if variant == "diff_skel":
        return np.concatenate([diff.transpose(2, 0, 1), skeleton.transpose(2, 0, 1)])
    if variant == "gray":
        return np.stack([diff @ LUMA, skeleton @ LUMA])
    raise ValueError(f"unknown variant {variant!r}")


def dataset_stacks(ds: TwinDataset, variant: str = "diff_skel") -> np.ndarray:
    ref = ds.reference.pixels
    skel = ds.skeleton_image.pixels
    return np.stack([build_stack(s.raw, ref, skel, variant) for s in ds.samples])


def posture_stacks(ds: TwinDataset) -> np.ndarray:
    """Posture input: 3-channel difference image."""
    ref = ds.reference.pixels
    return np.stack([(s.raw - ref).transpose(2, 0, 1) for s in ds.samples])


def channel_gains(x_train: np.ndarray, variant: str) -> np.ndarray:
    """Per-channel input gains: difference channels are amplified so their
    99.9th-percentile magnitude maps to ~1; raw and skeleton channels pass
    through."""
    c = x_train.shape[1]
    gains = np.ones(c)
    if variant == "raw":
        return gains
    diff_channels = {"diff": range(3), "diff_skel": range(3), "gray": range(1)}[variant]
    for ch in diff_channels:
        q = np.quantile(np.abs(x_train[:, ch]), 0.999)
        gains[ch] = float(np.clip(1.0 / max(q, 1e-9), 1.0, 1e6))
    return gains


def split_by_location(loc_ids, seed: int, ratios=(3, 1, 1)) -> dict[str, np.ndarray]:
    """Disjoint train/val/test sample indices, split by contact location."""
    loc_ids = np.asarray(loc_ids)
    locations = np.unique(loc_ids)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(31,)))
    order = rng.permutation(len(locations))
    total = sum(ratios)
    n_train = max(1, int(round(len(locations) * ratios[0] / total)))
    n_val = max(1, int(round(len(locations) * ratios[1] / total)))
    train_locs = set(locations[order[:n_train]].tolist())
    val_locs = set(locations[order[n_train : n_train + n_val]].tolist())
    test_locs = set(locations[order[n_train + n_val :]].tolist())
    if not test_locs:  # tiny datasets: steal one validation location
        test_locs = {val_locs.pop()} if len(val_locs) > 1 else {next(iter(train_locs))}
    assert train_locs.isdisjoint(val_locs) and train_locs.isdisjoint(test_locs)
    assert val_locs.isdisjoint(test_locs)
    split = {
        "train": np.flatnonzero([l in train_locs for l in loc_ids]),
        "val": np.flatnonzero([l in val_locs for l in loc_ids]),
        "test": np.flatnonzero([l in test_locs for l in loc_ids]),
    }
    return split


def direct_targets(ds: TwinDataset) -> np.ndarray:
    return np.array(
        [np.concatenate([s.contact_point, s.force_local]) for s in ds.samples]
    )


def map_targets(ds: TwinDataset, assignment: PixelNodeAssignment) -> np.ndarray:
    out = []
    for s in ds.samples:
        image = map_to_image(ForceMap(s.force_map), assignment)
        out.append(image.transpose(2, 0, 1))
    return np.array(out)


def posture_targets(ds: TwinDataset) -> np.ndarray:
    return np.array([posture_target(s.yaw, s.roll) for s in ds.samples])


DIRECT_OUT_SCALE = np.array([POSITION_SCALE] * 3 + [1.0, 1.0, 1.0])


@dataclass
class TrainedTask:
    model: Regressor
    history: TrainHistory
    split: dict[str, np.ndarray]
    variant: str


def _apply_fraction(idx: np.ndarray, fraction: float, seed: int) -> np.ndarray:
    if fraction >= 1.0:
        return idx
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(77,)))
    keep = max(1, int(round(len(idx) * fraction)))
    return idx[np.sort(rng.permutation(len(idx))[:keep])]


def train_task(
    assets: TwinAssets,
    ds: TwinDataset,
    task: str,
    seed: int | None = None,
    variant: str | None = None,
    fraction: float = 1.0,
    epochs: int | None = None,
) -> TrainedTask:
    """Train one head on a dataset with the paper-regime hyperparameters."""
    cfg = assets.config
    seed = cfg.seed if seed is None else seed
    variant = cfg.variant if variant is None else variant
    epochs = cfg.epochs if epochs is None else epochs
    h, w = cfg.image_height, cfg.image_width
    widths = (cfg.conv_width1, cfg.conv_width2)

    if task == "posture":
        x = posture_stacks(ds)
        y = posture_targets(ds) / POSTURE_SCALE
    else:
        x = dataset_stacks(ds, variant)
        if task == "direct":
            y = direct_targets(ds) / DIRECT_OUT_SCALE
        elif task == "map":
            y = map_targets(ds, assets.assignment) * MAP_TARGET_SCALE
        else:
            raise ValueError(f"unknown task {task!r}")

    split = split_by_location([s.loc_id for s in ds.samples], seed=seed)
    train_idx = _apply_fraction(split["train"], fraction, seed)
    gains = channel_gains(x[train_idx], variant if task != "posture" else "diff")

    c = x.shape[1]
    if task == "direct":
        model = build_direct_model((c, h, w), seed=seed, widths=widths, input_gain=gains)
        model.out_scale = DIRECT_OUT_SCALE.copy()
    elif task == "map":
        model = build_map_model(
            (c, h, w), grid=assets.assignment.grid, seed=seed, widths=widths, input_gain=gains
        )
        model.out_scale = np.array([1.0 / MAP_TARGET_SCALE])
    else:
        model = build_posture_model((c, h, w), seed=seed, widths=widths, input_gain=gains)
        model.out_scale = POSTURE_SCALE.copy()

    tc = TrainConfig(
        batch_size=cfg.batch_size, epochs=epochs, learning_rate=cfg.learning_rate, seed=seed
    )
    history = train(model, x[train_idx], y[train_idx], x[split["val"]], y[split["val"]], tc)
    return TrainedTask(model=model, history=history, split=split, variant=variant)
