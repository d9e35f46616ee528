"""Parametric sensor surface, node mesh, local frames, and stiff lattice.

The sensing surface is a cone (base diameter 40 mm, height 70 mm by default)
whose tip is rounded by a sphere tangent to the flank; the sphere top is at
z = height. Everything lives in the sensor frame: z along the axis, base rim
in the z = 0 plane, x toward azimuth 0.

Surface points are addressed by (t, phi): t is arc length along the meridian
measured from the apex (t = 0) down to the base rim (t = T), phi is azimuth.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import BinaryIO

import numpy as np
from scipy.spatial import Delaunay, cKDTree

from tactwin import binio

# Node budget per unit area: the spiral generator packs round(PACKING * A / s^2)
# nodes for target spacing s, which lands the default 1 mm mesh at ~3800 nodes
# with mean nearest-neighbor spacing within a few percent of s.
PACKING = 0.7755


class InvalidGeometryError(ValueError):
    """Raised for degenerate or out-of-range sensor geometry."""


@dataclass(frozen=True)
class SensorGeometry:
    """Shape parameters of the conical shell, all lengths in mm."""

    base_diameter: float = 40.0
    height: float = 70.0
    tip_radius: float = 2.0
    shell_thickness: float = 4.0
    skeleton_inner_offset: float = 0.8
    fovea_extent: tuple[float, float] = (13.0, 11.0)  # azimuthal x meridional, mm
    fovea_thickness: float = 1.2
    fovea_azimuth_deg: float = 0.0
    fovea_center_z: float = 52.0

    def __post_init__(self):
        if self.base_diameter <= 0:
            raise InvalidGeometryError("base_diameter must be positive")
        if self.height <= self.base_diameter / 2:
            raise InvalidGeometryError("height must exceed base radius")
        if not 0 < self.tip_radius <= self.base_diameter / 2:
            raise InvalidGeometryError("tip_radius must be in (0, base_diameter/2]")
        if self.height <= self.tip_radius:
            raise InvalidGeometryError("height must exceed tip_radius")
        if self.skeleton_inner_offset >= self.shell_thickness:
            raise InvalidGeometryError("skeleton_inner_offset must be below shell_thickness")
        if self.fovea_thickness >= self.shell_thickness:
            raise InvalidGeometryError("fovea_thickness must be below shell_thickness")

    @property
    def base_radius(self) -> float:
        return self.base_diameter / 2


class SurfaceProfile:
    """Meridian profile of the rounded cone and its area parametrization."""

    def __init__(self, geometry: SensorGeometry):
        self.geometry = geometry
        R = geometry.base_radius
        H = geometry.height
        rt = geometry.tip_radius
        zc = H - rt  # tip sphere center height
        # Virtual apex z_a: the flank through (R, 0) is tangent to the tip sphere.
        a = R * R - rt * rt
        b = -2 * R * R * zc
        c = R * R * zc * zc - rt * rt * R * R
        disc = b * b - 4 * a * c
        if a <= 0 or disc < 0:
            raise InvalidGeometryError("tip sphere cannot be made tangent to the flank")
        za = (-b + np.sqrt(disc)) / (2 * a)
        L = float(np.hypot(za, R))
        self.apex_z = float(za)
        self.sphere_center_z = float(zc)
        # Outward flank normal in the (rho, z) half-plane.
        self.flank_normal = (za / L, R / L)
        self.tangency_rho = rt * self.flank_normal[0]
        self.tangency_z = zc + rt * self.flank_normal[1]
        self.flank_length = float(np.hypot(R - self.tangency_rho, self.tangency_z))
        self.cap_arc = rt * float(np.arctan2(self.tangency_rho, self.tangency_z - zc))
        self.total_arc = self.cap_arc + self.flank_length
        # Cumulative area S(t) from the apex, by trapezoid quadrature of 2*pi*rho.
        tt = np.linspace(0.0, self.total_arc, 8193)
        rho = self.evaluate(tt)[0]
        ring = 2 * np.pi * rho
        self._area_t = tt
        self._area_s = np.concatenate([[0.0], np.cumsum((ring[1:] + ring[:-1]) / 2 * np.diff(tt))])
        self.area = float(self._area_s[-1])

    def evaluate(self, t) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Profile at meridian arc length t from the apex.

        Returns (rho, z, n_rho, n_z) with (n_rho, n_z) the outward surface
        normal in the meridian half-plane.
        """
        t = np.atleast_1d(np.asarray(t, dtype=float))
        geom = self.geometry
        rho = np.empty_like(t)
        z = np.empty_like(t)
        n_rho = np.empty_like(t)
        n_z = np.empty_like(t)
        on_cap = t <= self.cap_arc
        theta = t[on_cap] / geom.tip_radius
        rho[on_cap] = geom.tip_radius * np.sin(theta)
        z[on_cap] = self.sphere_center_z + geom.tip_radius * np.cos(theta)
        n_rho[on_cap] = np.sin(theta)
        n_z[on_cap] = np.cos(theta)
        s = (t[~on_cap] - self.cap_arc) / self.flank_length
        rho[~on_cap] = self.tangency_rho + (geom.base_radius - self.tangency_rho) * s
        z[~on_cap] = self.tangency_z * (1 - s)
        n_rho[~on_cap] = self.flank_normal[0]
        n_z[~on_cap] = self.flank_normal[1]
        return rho, z, n_rho, n_z

    def t_of_area(self, s) -> np.ndarray:
        """Inverse of the cumulative-area map (area from apex -> arc length)."""
        return np.interp(np.asarray(s, dtype=float), self._area_s, self._area_t)

    def point(self, t, phi) -> np.ndarray:
        """3-D surface points for meridian arc t and azimuth phi."""
        rho, z, _, _ = self.evaluate(t)
        return np.stack([rho * np.cos(phi), rho * np.sin(phi), z], axis=-1)

    def normal(self, t, phi) -> np.ndarray:
        _, _, n_rho, n_z = self.evaluate(t)
        return np.stack([n_rho * np.cos(phi), n_rho * np.sin(phi), n_z], axis=-1)

    def surface_depth(self, points: np.ndarray, samples: int = 4096) -> np.ndarray:
        """Distance from interior points to the outer surface (revolved profile)."""
        pts = np.atleast_2d(points)
        rho = np.hypot(pts[:, 0], pts[:, 1])
        tt = np.linspace(0.0, self.total_arc, samples)
        prho, pz, _, _ = self.evaluate(tt)
        d2 = (rho[:, None] - prho[None, :]) ** 2 + (pts[:, 2, None] - pz[None, :]) ** 2
        return np.sqrt(d2.min(axis=1))


@dataclass(frozen=True)
class SurfaceMesh:
    """Immutable node mesh over the sensing surface."""

    node_positions: np.ndarray  # (N, 3) mm
    node_normals: np.ndarray  # (N, 3) outward unit
    node_tangents: np.ndarray  # (N, 2, 3) unit, (t1, t2)
    node_areas: np.ndarray  # (N,) mm^2
    triangles: np.ndarray  # (T, 3) int
    adjacency: tuple[tuple[int, ...], ...]  # per-node neighbor indices
    skeleton_distance: np.ndarray  # (N,) mm, inf until a lattice is attached
    fovea_mask: np.ndarray  # (N,) bool
    target_spacing: float
    seed: int

    @property
    def node_count(self) -> int:
        return len(self.node_positions)

    def with_skeleton_distance(self, distance: np.ndarray) -> "SurfaceMesh":
        if len(distance) != self.node_count:
            raise ValueError("skeleton distance length mismatch")
        return replace(self, skeleton_distance=np.asarray(distance, dtype=float))


@dataclass(frozen=True)
class SkeletonLattice:
    """Stiff beam lattice embedded in the shell: meridians, rings, tip cap."""

    segments_a: np.ndarray  # (M, 3) segment start points, mm
    segments_b: np.ndarray  # (M, 3) segment end points, mm
    beam_radius: float
    ring_levels: np.ndarray  # surface z of the horizontal rings, mm
    n_meridians: int
    n_rings: int
    meridian_azimuths: np.ndarray  # radians

    @property
    def window_count(self) -> int:
        """Soft windows enclosed by meridians and rings (tip cap is closed)."""
        return self.n_meridians * self.n_rings

    def window_centers(self, profile: SurfaceProfile) -> np.ndarray:
        """Surface points at the center of every enclosed window."""
        levels = np.concatenate([[0.0], np.sort(self.ring_levels)])
        centers = []
        sector = 2 * np.pi / self.n_meridians
        for k in range(self.n_rings):
            z_mid = (levels[k] + levels[k + 1]) / 2
            t = _t_of_z(profile, z_mid)
            for m in range(self.n_meridians):
                phi = self.meridian_azimuths[m] + sector / 2
                centers.append(profile.point(t, phi)[0])
        return np.asarray(centers)


def _t_of_z(profile: SurfaceProfile, z: float) -> float:
    """Meridian arc length whose surface point sits at axial height z."""
    tt = np.linspace(0.0, profile.total_arc, 4096)
    zz = profile.evaluate(tt)[1]
    # z decreases monotonically with t (apex at top), so interpolate reversed.
    return float(np.interp(z, zz[::-1], tt[::-1]))


def build_mesh(
    geometry: SensorGeometry,
    target_spacing: float = 1.0,
    seed: int = 0,
    lattice: "SkeletonLattice | None" = None,
    lloyd_passes: int = 1,
) -> SurfaceMesh:
    """Build a near-uniform node mesh by spiral placement plus Lloyd smoothing.

    Nodes are laid out with a golden-angle spiral in an equal-area disk
    parametrization of the surface (apex at the disk center, base rim at the
    unit circle), jittered by the seed, relaxed toward Delaunay-neighbor
    centroids, and mapped back to 3-D. Triangles come from the disk Delaunay
    triangulation, so the mesh is a 2-manifold whose only boundary is the
    base rim.
    """
    if target_spacing <= 0:
        raise InvalidGeometryError("target_spacing must be positive")
    profile = SurfaceProfile(geometry)
    n_nodes = max(4, int(round(PACKING * profile.area / target_spacing**2)))

    rng = np.random.default_rng(seed)
    k = np.arange(n_nodes)
    golden = (np.sqrt(5.0) - 1) / 2
    phi = 2 * np.pi * ((k * golden + rng.uniform()) % 1.0)
    disk_r = np.sqrt((k + 0.5) / n_nodes)
    pts = np.stack([disk_r * np.cos(phi), disk_r * np.sin(phi)], axis=1)
    pts += rng.normal(0.0, 0.002, pts.shape)
    _clip_to_disk(pts)

    tri = None
    for _ in range(max(0, lloyd_passes)):
        tri = Delaunay(pts)
        indptr, idx = tri.vertex_neighbor_vertices
        smoothed = pts.copy()
        for i in range(n_nodes):
            nb = idx[indptr[i] : indptr[i + 1]]
            if len(nb):
                smoothed[i] = 0.5 * pts[i] + 0.5 * pts[nb].mean(axis=0)
        # Rim nodes stay on their radius so the boundary does not collapse inward.
        r_old = np.linalg.norm(pts, axis=1)
        r_new = np.linalg.norm(smoothed, axis=1)
        rim = r_old > 0.985
        smoothed[rim] *= (r_old[rim] / np.maximum(r_new[rim], 1e-12))[:, None]
        _clip_to_disk(smoothed)
        pts = smoothed
    tri = Delaunay(pts)

    disk_r = np.clip(np.linalg.norm(pts, axis=1), 0.0, 1.0)
    azimuth = np.arctan2(pts[:, 1], pts[:, 0])
    t = profile.t_of_area(disk_r**2 * profile.area)
    positions = profile.point(t, azimuth)
    normals = profile.normal(t, azimuth)
    tangents = _azimuthal_frames(positions, normals)

    triangles = _orient_outward(tri.simplices, positions, normals)
    adjacency = _adjacency_from_triangles(n_nodes, triangles)

    # Area share: uniform split corrected by local spacing squared.
    nn = cKDTree(positions).query(positions, k=2)[0][:, 1]
    weights = nn**2
    areas = profile.area * weights / weights.sum()

    fovea = _fovea_mask(geometry, profile, t, azimuth)

    mesh = SurfaceMesh(
        node_positions=positions,
        node_normals=normals,
        node_tangents=tangents,
        node_areas=areas,
        triangles=triangles,
        adjacency=adjacency,
        skeleton_distance=np.full(n_nodes, np.inf),
        fovea_mask=fovea,
        target_spacing=float(target_spacing),
        seed=int(seed),
    )
    if lattice is not None:
        mesh = mesh.with_skeleton_distance(skeleton_distance_field(mesh, lattice))
    return mesh


def _clip_to_disk(pts: np.ndarray) -> None:
    r = np.linalg.norm(pts, axis=1)
    over = r > 1.0
    pts[over] /= r[over, None]


def _azimuthal_frames(positions: np.ndarray, normals: np.ndarray) -> np.ndarray:
    """Per-node (t1, t2): t1 azimuthal (+x at the apex), t2 = n x t1."""
    rho = np.hypot(positions[:, 0], positions[:, 1])
    phi = np.arctan2(positions[:, 1], positions[:, 0])
    t1 = np.stack([-np.sin(phi), np.cos(phi), np.zeros_like(phi)], axis=1)
    t1[rho < 1e-9] = (1.0, 0.0, 0.0)
    t2 = np.cross(normals, t1)
    t2 /= np.linalg.norm(t2, axis=1, keepdims=True)
    # Re-orthogonalize t1 against the normal for nodes where float error creeps in.
    t1 = np.cross(t2, normals)
    t1 /= np.linalg.norm(t1, axis=1, keepdims=True)
    return np.stack([t1, t2], axis=1)


def _orient_outward(simplices: np.ndarray, positions: np.ndarray, normals: np.ndarray) -> np.ndarray:
    tris = simplices.copy()
    p0, p1, p2 = positions[tris[:, 0]], positions[tris[:, 1]], positions[tris[:, 2]]
    face_n = np.cross(p1 - p0, p2 - p0)
    mean_n = (normals[tris[:, 0]] + normals[tris[:, 1]] + normals[tris[:, 2]]) / 3
    flip = np.einsum("ij,ij->i", face_n, mean_n) < 0
    tris[flip] = tris[flip][:, [0, 2, 1]]
    return tris


def _adjacency_from_triangles(n_nodes: int, triangles: np.ndarray) -> tuple[tuple[int, ...], ...]:
    neighbors: list[set[int]] = [set() for _ in range(n_nodes)]
    for a, b, c in triangles:
        neighbors[a].update((b, c))
        neighbors[b].update((a, c))
        neighbors[c].update((a, b))
    return tuple(tuple(sorted(s)) for s in neighbors)


def _fovea_mask(
    geometry: SensorGeometry, profile: SurfaceProfile, t: np.ndarray, azimuth: np.ndarray
) -> np.ndarray:
    """Nodes inside the geodesic rectangle of the thin high-sensitivity patch."""
    width, height = geometry.fovea_extent
    t_center = _t_of_z(profile, geometry.fovea_center_z)
    phi_center = np.deg2rad(geometry.fovea_azimuth_deg)
    rho = profile.evaluate(t)[0]
    dphi = np.angle(np.exp(1j * (azimuth - phi_center)))
    return (np.abs(t - t_center) <= height / 2) & (np.abs(rho * dphi) <= width / 2)


def build_skeleton(
    geometry: SensorGeometry,
    n_longitudinal_beams: int = 8,
    n_rings: int = 2,
    beam_radius: float = 0.8,
    cap_margin: float = 12.0,
    segment_length: float = 1.5,
) -> SkeletonLattice:
    """Build the stiff lattice: meridian beams, horizontal rings, closed tip cap.

    Beam axes run at depth shell_thickness - skeleton_inner_offset - beam_radius
    below the outer surface. The topmost ring sits at the rim of the closed tip
    cap, so meridians and rings enclose n_longitudinal_beams * n_rings soft
    windows; the cap itself is covered by concentric ringlets.
    """
    if n_longitudinal_beams < 3:
        raise InvalidGeometryError("need at least 3 longitudinal beams")
    if n_rings < 1:
        raise InvalidGeometryError("need at least 1 ring")
    profile = SurfaceProfile(geometry)
    depth = geometry.shell_thickness - geometry.skeleton_inner_offset - beam_radius
    if depth <= 0:
        raise InvalidGeometryError("shell too thin for the skeleton depth")
    cap_z = geometry.height - cap_margin
    if cap_z <= 0:
        raise InvalidGeometryError("cap_margin leaves no room for windows")
    t_cap = _t_of_z(profile, cap_z)

    seg_a: list[np.ndarray] = []
    seg_b: list[np.ndarray] = []

    def offset_point(t: float, phi: float) -> np.ndarray:
        p = profile.point(t, phi)[0]
        n = profile.normal(t, phi)[0]
        return p - depth * n

    sector = 2 * np.pi / n_longitudinal_beams
    azimuths = sector * (np.arange(n_longitudinal_beams) + 0.5)
    # Meridians: base rim up to the cap rim.
    n_steps = max(2, int(np.ceil((profile.total_arc - t_cap) / segment_length)))
    t_samples = np.linspace(profile.total_arc, t_cap, n_steps + 1)
    for phi in azimuths:
        pts = np.array([offset_point(t, phi) for t in t_samples])
        seg_a.append(pts[:-1])
        seg_b.append(pts[1:])

    def add_ring(t: float) -> None:
        rho = profile.evaluate(t)[0][0]
        n_seg = max(8, int(np.ceil(2 * np.pi * rho / segment_length)))
        ring_phi = np.linspace(0, 2 * np.pi, n_seg + 1)
        pts = np.array([offset_point(t, p) for p in ring_phi])
        seg_a.append(pts[:-1])
        seg_b.append(pts[1:])

    ring_levels = np.array([cap_z * k / n_rings for k in range(1, n_rings + 1)])
    for z in ring_levels:
        add_ring(_t_of_z(profile, z))

    # Closed tip cap: concentric ringlets from the cap rim toward the apex.
    t = t_cap - segment_length * 2
    while t > 0:
        rho = profile.evaluate(t)[0][0]
        p = offset_point(t, 0.0)
        if np.hypot(p[0], p[1]) < 0.3 or rho < 0.3:
            break
        add_ring(t)
        t -= segment_length * 2
    # Center plug on the axis (short vertical stub).
    apex_plug = profile.point(0.0, 0.0)[0] - np.array([0.0, 0.0, 1.0]) * min(
        depth, geometry.tip_radius
    )
    seg_a.append(apex_plug[None, :] - [0, 0, 0.1])
    seg_b.append(apex_plug[None, :] + [0, 0, 0.1])

    return SkeletonLattice(
        segments_a=np.vstack(seg_a),
        segments_b=np.vstack(seg_b),
        beam_radius=float(beam_radius),
        ring_levels=ring_levels,
        n_meridians=int(n_longitudinal_beams),
        n_rings=int(n_rings),
        meridian_azimuths=azimuths,
    )


def skeleton_distance_field(mesh_or_points, lattice: SkeletonLattice) -> np.ndarray:
    """Minimum distance from each node to the beam material (axis minus radius)."""
    if isinstance(mesh_or_points, SurfaceMesh):
        points = mesh_or_points.node_positions
    else:
        points = np.atleast_2d(np.asarray(mesh_or_points, dtype=float))
    a = lattice.segments_a
    ab = lattice.segments_b - a
    ab_len2 = np.maximum(np.einsum("ij,ij->i", ab, ab), 1e-18)
    # Clamped projection of every point onto every segment.
    ap = points[:, None, :] - a[None, :, :]
    s = np.clip(np.einsum("nmj,mj->nm", ap, ab) / ab_len2[None, :], 0.0, 1.0)
    closest = a[None, :, :] + s[:, :, None] * ab[None, :, :]
    d = np.linalg.norm(points[:, None, :] - closest, axis=2).min(axis=1)
    return np.maximum(0.0, d - lattice.beam_radius)


def local_frame(mesh: SurfaceMesh, node: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Orthonormal (t1, t2, n) triad at a node; t1 azimuthal, n outward."""
    if not 0 <= node < mesh.node_count:
        raise IndexError(f"node {node} out of range")
    t1, t2 = mesh.node_tangents[node]
    return t1, t2, mesh.node_normals[node]


def to_local(mesh: SurfaceMesh, node: int, vec: np.ndarray) -> np.ndarray:
    """Express a sensor-frame vector in the node's (t1, t2, n) frame as (n, t1, t2).

    Component order is (normal, shear1, shear2) to match force conventions.
    """
    t1, t2, n = local_frame(mesh, node)
    v = np.asarray(vec, dtype=float)
    return np.array([v @ n, v @ t1, v @ t2])


def to_global(mesh: SurfaceMesh, node: int, local: np.ndarray) -> np.ndarray:
    """Inverse of :func:`to_local`."""
    t1, t2, n = local_frame(mesh, node)
    fn, fs1, fs2 = np.asarray(local, dtype=float)
    return fn * n + fs1 * t1 + fs2 * t2


def thickness_field(mesh: SurfaceMesh, geometry: SensorGeometry) -> np.ndarray:
    """Per-node shell thickness: nominal everywhere, thinner over the fovea."""
    t = np.full(mesh.node_count, geometry.shell_thickness)
    t[mesh.fovea_mask] = geometry.fovea_thickness
    return t


MESH_MAGIC = "IMSH"


def save_mesh(path, mesh: SurfaceMesh) -> None:
    with open(path, "wb") as f:
        _write_mesh(f, mesh)


def _write_mesh(f: BinaryIO, mesh: SurfaceMesh) -> None:
    binio.write_magic(f, MESH_MAGIC, 1)
    binio.write_u32(f, mesh.node_count)
    binio.write_u32(f, len(mesh.triangles))
    binio.write_f32_array(f, mesh.node_positions)
    binio.write_f32_array(f, mesh.node_normals)
    binio.write_f32_array(f, mesh.node_tangents)
    binio.write_f32_array(f, mesh.node_areas)
    skel = np.where(np.isfinite(mesh.skeleton_distance), mesh.skeleton_distance, 3.4e38)
    binio.write_f32_array(f, skel)
    binio.write_u32_array(f, mesh.triangles)


def load_mesh(path, geometry: SensorGeometry | None = None) -> SurfaceMesh:
    with open(path, "rb") as f:
        version = binio.read_magic(f, MESH_MAGIC)
        if version != 1:
            raise binio.FormatError(f"unsupported mesh version {version}")
        n = binio.read_u32(f)
        t = binio.read_u32(f)
        positions = binio.read_f32_array(f, (n, 3))
        normals = binio.read_f32_array(f, (n, 3))
        tangents = binio.read_f32_array(f, (n, 2, 3))
        areas = binio.read_f32_array(f, (n,))
        skel = binio.read_f32_array(f, (n,))
        triangles = binio.read_u32_array(f, (t, 3))
    skel[skel > 1e38] = np.inf
    if geometry is not None:
        profile = SurfaceProfile(geometry)
        depth = profile.surface_depth(positions)
        # Positions are on the surface; recover (t, phi) for the fovea flag.
        del depth
        azimuth = np.arctan2(positions[:, 1], positions[:, 0])
        t_arc = _t_from_positions(profile, positions)
        fovea = _fovea_mask(geometry, profile, t_arc, azimuth)
    else:
        fovea = np.zeros(n, dtype=bool)
    return SurfaceMesh(
        node_positions=positions,
        node_normals=normals,
        node_tangents=tangents,
        node_areas=areas,
        triangles=triangles,
        adjacency=_adjacency_from_triangles(n, triangles),
        skeleton_distance=skel,
        fovea_mask=fovea,
        target_spacing=float("nan"),
        seed=-1,
    )


def _t_from_positions(profile: SurfaceProfile, positions: np.ndarray) -> np.ndarray:
    tt = np.linspace(0.0, profile.total_arc, 8192)
    prho, pz, _, _ = profile.evaluate(tt)
    rho = np.hypot(positions[:, 0], positions[:, 1])
    tree = cKDTree(np.stack([prho, pz], axis=1))
    idx = tree.query(np.stack([rho, positions[:, 2]], axis=1))[1]
    return tt[idx]
