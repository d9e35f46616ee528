import numpy as np
import pytest
from scipy.spatial import cKDTree

from tactwin.geometry import (
    InvalidGeometryError,
    SensorGeometry,
    SurfaceProfile,
    build_mesh,
    build_skeleton,
    local_frame,
    load_mesh,
    save_mesh,
    skeleton_distance_field,
    thickness_field,
    to_global,
    to_local,
)


class TestSensorGeometry:
    def test_defaults_valid(self):
        SensorGeometry()

    @pytest.mark.parametrize(
        "kwargs",
        [
            dict(base_diameter=-1.0),
            dict(height=15.0),  # below base radius
            dict(tip_radius=0.0),
            dict(tip_radius=25.0),
            dict(skeleton_inner_offset=5.0),
            dict(fovea_thickness=4.5),
        ],
    )
    def test_invalid_parameters_rejected(self, kwargs):
        with pytest.raises(InvalidGeometryError):
            SensorGeometry(**kwargs)

    def test_degenerate_height_below_tip(self):
        with pytest.raises(InvalidGeometryError):
            SensorGeometry(base_diameter=4.0, height=1.9, tip_radius=2.0)


class TestProfile:
    def test_analytic_area_matches_quadrature(self, geometry, profile):
        # Independent oracle: closed-form frustum + spherical cap areas.
        R = geometry.base_radius
        rt = geometry.tip_radius
        za = profile.apex_z
        L = np.hypot(za, R)
        full_cone = np.pi * R * L
        small_slant = np.hypot(profile.tangency_rho, za - profile.tangency_z)
        small_cone = np.pi * profile.tangency_rho * small_slant
        cap_h = (profile.sphere_center_z + rt) - profile.tangency_z
        cap = 2 * np.pi * rt * cap_h
        analytic = full_cone - small_cone + cap
        assert profile.area == pytest.approx(analytic, rel=1e-6)

    def test_profile_endpoints(self, geometry, profile):
        rho0, z0, _, nz0 = (v[0] for v in profile.evaluate(0.0))
        assert rho0 == pytest.approx(0.0, abs=1e-12)
        assert z0 == pytest.approx(geometry.height)
        assert nz0 == pytest.approx(1.0)
        rhoT, zT, _, _ = (v[0] for v in profile.evaluate(profile.total_arc))
        assert rhoT == pytest.approx(geometry.base_radius)
        assert zT == pytest.approx(0.0, abs=1e-9)


class TestBuildMesh:
    def test_default_node_count_near_3800(self, mesh_1mm):
        assert abs(mesh_1mm.node_count - 3800) <= 380

    def test_2mm_count_quarter_of_1mm(self, mesh_1mm, mesh_2mm):
        assert mesh_2mm.node_count == pytest.approx(mesh_1mm.node_count / 4, rel=0.15)

    def test_seed_changes_placement_not_count(self, geometry):
        a = build_mesh(geometry, 2.0, seed=1)
        b = build_mesh(geometry, 2.0, seed=2)
        assert a.node_count == b.node_count
        assert not np.allclose(a.node_positions, b.node_positions)
        for m in (a, b):
            _check_mesh_invariants(m, geometry)

    def test_deterministic_for_fixed_seed(self, geometry):
        a = build_mesh(geometry, 2.0, seed=7)
        b = build_mesh(geometry, 2.0, seed=7)
        assert np.array_equal(a.node_positions, b.node_positions)
        assert np.array_equal(a.triangles, b.triangles)

    def test_invalid_spacing(self, geometry):
        with pytest.raises(InvalidGeometryError):
            build_mesh(geometry, 0.0)

    def test_mesh_invariants_default(self, mesh_2mm, geometry):
        _check_mesh_invariants(mesh_2mm, geometry)

    def test_mesh_invariants_fine(self, mesh_1mm, geometry):
        _check_mesh_invariants(mesh_1mm, geometry)

    def test_fovea_nodes_flagged(self, mesh_1mm, geometry):
        n_fovea = int(mesh_1mm.fovea_mask.sum())
        # 13 x 11 mm patch at ~0.78 nodes/mm^2.
        expected = 13 * 11 * 0.7755
        assert 0.5 * expected < n_fovea < 1.6 * expected
        th = thickness_field(mesh_1mm, geometry)
        assert set(np.unique(th)) == {geometry.fovea_thickness, geometry.shell_thickness}


def _check_mesh_invariants(mesh, geometry):
    n = mesh.node_count
    # Orthonormal right-handed triads.
    t1 = mesh.node_tangents[:, 0]
    t2 = mesh.node_tangents[:, 1]
    nn = mesh.node_normals
    for a, b in [(t1, t1), (t2, t2), (nn, nn)]:
        assert np.allclose(np.einsum("ij,ij->i", a, b), 1.0, atol=1e-9)
    for a, b in [(t1, t2), (t1, nn), (t2, nn)]:
        assert np.max(np.abs(np.einsum("ij,ij->i", a, b))) < 1e-9
    assert np.allclose(np.cross(t1, t2), nn, atol=1e-9)
    # Outward normals.
    radial = mesh.node_positions.copy()
    radial[:, 2] = 0.0
    rho = np.linalg.norm(radial, axis=1)
    dots = np.einsum("ij,ij->i", nn, radial)
    assert np.all(dots[rho > 1e-9] > 0)
    # Mean nearest-neighbor spacing within 10% of target.
    d = cKDTree(mesh.node_positions).query(mesh.node_positions, k=2)[0][:, 1]
    assert abs(d.mean() - mesh.target_spacing) <= 0.1 * mesh.target_spacing
    # Area closure within 5%.
    analytic = SurfaceProfile(geometry).area
    assert abs(mesh.node_areas.sum() - analytic) <= 0.05 * analytic
    # 2-manifold except at the base rim.
    edges = {}
    for tri in mesh.triangles:
        for e in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
            key = (min(e), max(e))
            edges[key] = edges.get(key, 0) + 1
    counts = np.array(list(edges.values()))
    assert np.all(counts <= 2)
    boundary_nodes = {v for e, c in edges.items() if c == 1 for v in e}
    z_boundary = mesh.node_positions[list(boundary_nodes), 2]
    assert np.all(z_boundary < 3 * mesh.target_spacing)


class TestSkeleton:
    def test_default_window_count(self, lattice):
        assert lattice.window_count == 16

    def test_minimal_lattice_windows(self, geometry):
        lat = build_skeleton(geometry, 3, 1)
        assert lat.window_count == 3
        assert len(lat.ring_levels) == 1

    def test_preconditions(self, geometry):
        with pytest.raises(InvalidGeometryError):
            build_skeleton(geometry, 2, 2)
        with pytest.raises(InvalidGeometryError):
            build_skeleton(geometry, 8, 0)

    def test_beams_inside_depth_band(self, geometry, profile, lattice):
        pts = np.vstack([lattice.segments_a, lattice.segments_b])
        depth = profile.surface_depth(pts, samples=8192)
        assert np.all(depth >= geometry.skeleton_inner_offset - 1e-6)
        assert np.all(depth <= geometry.shell_thickness + 1e-6)

    def test_window_centers_on_surface(self, profile, lattice):
        centers = lattice.window_centers(profile)
        assert centers.shape == (16, 3)
        # surface_depth samples the profile, so allow its quantization error
        assert np.all(profile.surface_depth(centers, samples=16384) < 5e-3)


class TestSkeletonDistance:
    def test_node_over_beam_distance(self, mesh_1mm, lattice):
        # Pick the node closest (laterally) to a mid-height meridian beam point.
        mid = lattice.segments_a[10]  # a meridian sample away from base and rings
        idx = np.argmin(np.linalg.norm(mesh_1mm.node_positions - mid, axis=1))
        d = mesh_1mm.skeleton_distance[idx]
        assert 1.4 < d < 1.9  # beam material sits ~1.6 mm below the surface

    def test_window_center_farther_than_beam(self, mesh_1mm, lattice, profile):
        centers = lattice.window_centers(profile)
        tree = cKDTree(mesh_1mm.node_positions)
        window_nodes = tree.query(centers)[1]
        beam_mid = lattice.segments_a[10]
        beam_node = np.argmin(np.linalg.norm(mesh_1mm.node_positions - beam_mid, axis=1))
        d_beam = mesh_1mm.skeleton_distance[beam_node]
        assert np.all(mesh_1mm.skeleton_distance[window_nodes] > d_beam)

    def test_dense_sampling_oracle(self, mesh_2mm, lattice):
        # Oracle: min over densely sampled beam axis points, minus the radius.
        step = 2e-3
        samples = []
        for a, b in zip(lattice.segments_a, lattice.segments_b):
            length = np.linalg.norm(b - a)
            n = max(2, int(np.ceil(length / step)) + 1)
            s = np.linspace(0.0, 1.0, n)[:, None]
            samples.append(a[None, :] * (1 - s) + b[None, :] * s)
        cloud = np.vstack(samples)
        oracle = cKDTree(cloud).query(mesh_2mm.node_positions)[0] - lattice.beam_radius
        field = skeleton_distance_field(mesh_2mm, lattice)
        assert np.max(np.abs(field - np.maximum(0.0, oracle))) < 1e-6


class TestLocalFrames:
    def test_apex_normal_up(self, geometry):
        from tactwin.geometry import _azimuthal_frames

        pos = np.array([[0.0, 0.0, geometry.height]])
        nrm = np.array([[0.0, 0.0, 1.0]])
        frames = _azimuthal_frames(pos, nrm)
        assert np.allclose(frames[0, 0], [1, 0, 0], atol=1e-12)
        assert np.allclose(np.cross(frames[0, 0], frames[0, 1]), [0, 0, 1], atol=1e-12)

    def test_tangent1_is_azimuthal(self, mesh_2mm):
        t1 = mesh_2mm.node_tangents[:, 0]
        assert np.max(np.abs(t1[:, 2])) < 1e-9

    def test_round_trip_identity(self, mesh_2mm, rng):
        for node in rng.integers(0, mesh_2mm.node_count, 20):
            v = rng.normal(size=3)
            back = to_global(mesh_2mm, int(node), to_local(mesh_2mm, int(node), v))
            assert np.allclose(back, v, atol=1e-12)

    def test_invalid_node(self, mesh_2mm):
        with pytest.raises(IndexError):
            local_frame(mesh_2mm, mesh_2mm.node_count)


class TestMeshIO:
    def test_round_trip(self, tmp_path, mesh_2mm, geometry):
        path = tmp_path / "mesh.imsh"
        save_mesh(path, mesh_2mm)
        loaded = load_mesh(path, geometry)
        assert loaded.node_count == mesh_2mm.node_count
        assert np.allclose(loaded.node_positions, mesh_2mm.node_positions, atol=1e-4)
        assert np.allclose(loaded.skeleton_distance, mesh_2mm.skeleton_distance, atol=1e-4)
        assert np.array_equal(loaded.triangles, mesh_2mm.triangles)
        assert np.array_equal(loaded.fovea_mask, mesh_2mm.fovea_mask)

    def test_magic_enforced(self, tmp_path, mesh_2mm):
        path = tmp_path / "mesh.imsh"
        save_mesh(path, mesh_2mm)
        raw = bytearray(path.read_bytes())
        raw[0] = ord("X")
        path.write_bytes(bytes(raw))
        from tactwin.binio import FormatError

        with pytest.raises(FormatError):
            load_mesh(path)
