"""Probing protocol of the 5-DoF test bed: indentation, shear, gravity, sliding.

The forward force law is a stand-in the real test bed does not need (it
measures forces): Hertz indentation against an effective elastic half-space,
multiplied by an exponential stiffening term near the embedded lattice, plus
a friction-capped shear force driven by lateral indenter displacement.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from tactwin.geometry import (
    SensorGeometry,
    SkeletonLattice,
    SurfaceMesh,
    SurfaceProfile,
    _t_from_positions,
    skeleton_distance_field,
    thickness_field,
    to_global,
)

GRAVITY = 9.81  # m/s^2


class DomainError(ValueError):
    """Raised when a physical quantity is outside its valid domain."""


@dataclass(frozen=True)
class Indenter:
    """Hemispherically tipped probe; tip_radius is the hemisphere radius in mm."""

    tip_radius: float = 2.0

    def __post_init__(self):
        if self.tip_radius <= 0:
            raise DomainError("indenter tip_radius must be positive")


@dataclass(frozen=True)
class ForceLaw:
    """Constants of the depth-to-force stand-in law."""

    youngs_modulus_kpa: float = 70.0
    poisson_ratio: float = 0.4999
    stiffen_gain: float = 2.0  # kappa
    stiffen_scale: float = 2.0  # d0, mm
    friction_cap: float = 0.5  # mu_cap
    slip_distance: float = 1.0  # mm of lateral motion to reach the cap

    @property
    def effective_modulus(self) -> float:
        """Contact modulus E* in N/mm^2 for a rigid indenter."""
        e = self.youngs_modulus_kpa * 1e-3  # kPa -> N/mm^2
        return e / (1.0 - self.poisson_ratio**2)

    def stiffen(self, skeleton_distance) -> np.ndarray:
        d = np.asarray(skeleton_distance, dtype=float)
        return 1.0 + self.stiffen_gain * np.exp(-d / self.stiffen_scale)


@dataclass(frozen=True)
class ProbeProtocol:
    """Test-bed motion plan for one contact location."""

    normal_step: float = 0.2  # mm per indentation increment
    shear_ratio: float = 0.5  # lateral travel per unit normal travel (2:1)
    force_cutoff: float = 1.6  # N, terminate the location once exceeded
    shear_directions: int = 4  # lateral directions probed per depth
    dwell_policy: str = "quasi-static"  # transients are not simulated

    def __post_init__(self):
        if self.normal_step <= 0:
            raise DomainError("normal_step must be positive")
        if self.force_cutoff <= 0:
            raise DomainError("force_cutoff must be positive")


@dataclass(frozen=True)
class ContactEvent:
    """One probe sample: where, how deep, and the resulting force."""

    node: int
    contact_point: np.ndarray  # (3,) mm, sensor frame
    depth: float  # mm along the outward normal
    force_global: np.ndarray  # (3,) N, sensor frame
    force_local: np.ndarray  # (Fn, Fs1, Fs2) N
    indenter: Indenter
    shear_displacement: np.ndarray = field(default_factory=lambda: np.zeros(2))


def contact_force(
    depth: float,
    tip_radius: float,
    skeleton_distance: float,
    shear_displacement=(0.0, 0.0),
    law: ForceLaw = ForceLaw(),
) -> np.ndarray:
    """Local (Fn, Fs1, Fs2) in N for an indentation of `depth` mm.

    Normal force follows Hertz for a sphere of radius `tip_radius`, stiffened
    near the lattice; shear force points along the lateral displacement and is
    capped at friction_cap * Fn.
    """
    if depth < 0:
        raise DomainError("indentation depth must be non-negative")
    if depth == 0:
        return np.zeros(3)
    fn = (4.0 / 3.0) * law.effective_modulus * np.sqrt(tip_radius) * depth**1.5
    fn *= float(law.stiffen(skeleton_distance))
    u = np.asarray(shear_displacement, dtype=float)
    u_norm = float(np.linalg.norm(u))
    if u_norm == 0.0:
        return np.array([fn, 0.0, 0.0])
    mu = law.friction_cap * min(1.0, u_norm / law.slip_distance)
    fs = mu * fn * (u / u_norm)
    return np.array([fn, fs[0], fs[1]])


def make_event(
    mesh: SurfaceMesh,
    node: int,
    depth: float,
    shear_displacement,
    indenter: Indenter,
    law: ForceLaw = ForceLaw(),
) -> ContactEvent:
    local = contact_force(
        depth, indenter.tip_radius, mesh.skeleton_distance[node], shear_displacement, law
    )
    return ContactEvent(
        node=int(node),
        contact_point=mesh.node_positions[node].copy(),
        depth=float(depth),
        force_global=to_global(mesh, int(node), local),
        force_local=local,
        indenter=indenter,
        shear_displacement=np.asarray(shear_displacement, dtype=float),
    )


def generate_probe_dataset(
    mesh: SurfaceMesh,
    lattice: SkeletonLattice | None,
    protocol: ProbeProtocol,
    n_locations: int,
    seed: int = 0,
    indenter: Indenter = Indenter(),
    law: ForceLaw = ForceLaw(),
) -> list[ContactEvent]:
    """Probe `n_locations` random nodes with depth ramps and lateral offsets.

    Each location is generated by a pure function of (mesh, protocol,
    per-location seed) and the results are concatenated in location order, so
    parallel and serial generation agree bitwise. A location terminates with
    the first depth family whose peak force exceeds the cutoff.
    """
    if n_locations < 1:
        raise DomainError("need at least one probe location")
    if lattice is not None and not np.all(np.isfinite(mesh.skeleton_distance)):
        mesh = mesh.with_skeleton_distance(skeleton_distance_field(mesh, lattice))
    if not np.all(np.isfinite(mesh.skeleton_distance)):
        raise DomainError("mesh has no skeleton distance field and no lattice was given")

    picker = np.random.default_rng(np.random.SeedSequence(entropy=seed))
    replace = n_locations > mesh.node_count
    nodes = picker.choice(mesh.node_count, size=n_locations, replace=replace)

    events: list[ContactEvent] = []
    for loc_index, node in enumerate(nodes):
        events.extend(
            _probe_location(mesh, int(node), protocol, indenter, law, seed, loc_index)
        )
    return events


def _probe_location(
    mesh: SurfaceMesh,
    node: int,
    protocol: ProbeProtocol,
    indenter: Indenter,
    law: ForceLaw,
    seed: int,
    loc_index: int,
) -> list[ContactEvent]:
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(loc_index,)))
    base_angle = rng.uniform(0.0, 2 * np.pi)
    out: list[ContactEvent] = []
    depth = protocol.normal_step
    while True:
        family = [make_event(mesh, node, depth, (0.0, 0.0), indenter, law)]
        lateral = depth * protocol.shear_ratio
        for k in range(protocol.shear_directions):
            angle = base_angle + 2 * np.pi * k / max(1, protocol.shear_directions)
            shear = lateral * np.array([np.cos(angle), np.sin(angle)])
            family.append(make_event(mesh, node, depth, shear, indenter, law))
        out.extend(family)
        peak = max(float(np.linalg.norm(ev.force_global)) for ev in family)
        if peak > protocol.force_cutoff:
            break
        depth += protocol.normal_step
    return out


def posture_gravity_direction(yaw_deg: float, roll_deg: float) -> np.ndarray:
    """Unit gravity direction in the sensor frame after yaw then roll.

    At yaw 0 the sensor axis is parallel to gravity, so the direction is
    independent of roll; that degeneracy is what limits roll estimation.
    """
    yaw = np.deg2rad(yaw_deg)
    roll = np.deg2rad(roll_deg)
    cy, sy = np.cos(yaw), np.sin(yaw)
    cr, sr = np.cos(roll), np.sin(roll)
    g_lab = np.array([0.0, 0.0, -1.0])
    ry_t = np.array([[cy, 0, -sy], [0, 1, 0], [sy, 0, cy]])
    rz_t = np.array([[cr, sr, 0], [-sr, cr, 0], [0, 0, 1]])
    return rz_t @ (ry_t @ g_lab)


def gravity_load(
    mesh: SurfaceMesh,
    posture: tuple[float, float],
    shell_density: float = 1.07,  # g/cm^3
    thickness: np.ndarray | None = None,
    geometry: SensorGeometry | None = None,
) -> np.ndarray:
    """Per-node weight vectors (N) in the sensor frame for a (yaw, roll) posture."""
    yaw, roll = posture
    if not -90.0 <= yaw <= 90.0:
        raise DomainError("yaw must be in [-90, 90] degrees")
    if thickness is None:
        if geometry is None:
            raise DomainError("gravity_load needs a thickness field or a geometry")
        thickness = thickness_field(mesh, geometry)
    mass_kg = shell_density * 1e-6 * thickness * mesh.node_areas  # g/cm^3 * mm^3 -> kg
    g_dir = posture_gravity_direction(yaw, roll % 360.0)
    return (mass_kg * GRAVITY)[:, None] * g_dir[None, :]


def shell_mass_kg(
    mesh: SurfaceMesh, shell_density: float = 1.07, thickness: np.ndarray | None = None,
    geometry: SensorGeometry | None = None,
) -> float:
    if thickness is None:
        thickness = thickness_field(mesh, geometry)
    return float(np.sum(shell_density * 1e-6 * thickness * mesh.node_areas))


@dataclass(frozen=True)
class SlideFrame:
    """One time step of a sliding-indenter trajectory."""

    event: ContactEvent
    arc_position: float  # signed mm along the slide path
    paused: bool
    slide_index: int  # which slide segment the frame belongs to, -1 for pauses
    direction: int  # +1 toward the tip, -1 back toward the base


def generate_sliding_trajectory(
    mesh: SurfaceMesh,
    geometry: SensorGeometry,
    start_node: int,
    depth: float = 1.5,
    slide_length: float = 4.0,
    motion_step: float = 0.5,
    slides_per_direction: int = 5,
    pause_frames: int = 5,
    paused_cycles: int = 2,
    continuous_cycles: int = 2,
    indenter: Indenter = Indenter(),
    law: ForceLaw = ForceLaw(),
) -> list[SlideFrame]:
    """Slide the indenter along the meridian with and without pauses.

    Each cycle is `slides_per_direction` slides of `slide_length` toward the
    tip followed by the same count back. Paused cycles insert stationary
    frames after every slide, during which the accumulated shear relaxes.
    """
    profile = SurfaceProfile(geometry)
    tree = cKDTree(mesh.node_positions)
    t0 = float(_t_from_positions(profile, mesh.node_positions[start_node : start_node + 1])[0])
    phi0 = float(
        np.arctan2(mesh.node_positions[start_node, 1], mesh.node_positions[start_node, 0])
    )

    frames: list[SlideFrame] = []
    t = t0
    shear = np.zeros(2)  # local (t1, t2) lateral displacement state
    arc = 0.0
    relax = np.exp(-1.0 / 2.0)  # shear decay per paused frame
    slide_counter = 0

    def emit(paused: bool, direction: int, slide_idx: int) -> None:
        point = profile.point(t, phi0).reshape(3)
        node = int(tree.query(point)[1])
        local = contact_force(depth, indenter.tip_radius, mesh.skeleton_distance[node], shear, law)
        ev = ContactEvent(
            node=node,
            contact_point=point,
            depth=depth,
            force_global=to_global(mesh, node, local),
            force_local=local,
            indenter=indenter,
            shear_displacement=shear.copy(),
        )
        frames.append(
            SlideFrame(event=ev, arc_position=arc, paused=paused, slide_index=slide_idx, direction=direction)
        )

    def one_slide(direction: int, paused_cycle: bool) -> None:
        nonlocal t, arc, shear, slide_counter
        n_steps = max(1, int(round(slide_length / motion_step)))
        for _ in range(n_steps):
            # Moving toward the tip decreases t; t2 points toward the tip.
            t_new = float(np.clip(t - direction * motion_step, 0.0, profile.total_arc))
            moved = t - t_new
            t = t_new
            arc += direction * motion_step
            shear = shear + np.array([0.0, moved])
            norm = np.linalg.norm(shear)
            if norm > law.slip_distance:
                shear *= law.slip_distance / norm
            emit(False, direction, slide_counter)
        if paused_cycle:
            for _ in range(pause_frames):
                shear = shear * relax
                emit(True, direction, -1)
        slide_counter += 1

    emit(True, 0, -1)  # initial stationary contact
    for cycle in range(paused_cycles + continuous_cycles):
        paused_cycle = cycle < paused_cycles
        for _ in range(slides_per_direction):
            one_slide(+1, paused_cycle)
        for _ in range(slides_per_direction):
            one_slide(-1, paused_cycle)
    return frames
