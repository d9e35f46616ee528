import numpy as np
import pytest
from scipy.spatial import cKDTree

from tactwin.contact import gravity_load
from tactwin.deform import (
    DeformationField,
    SolverError,
    StiffnessConfig,
    StiffnessOperator,
    apply_deformation,
    solve_deformation,
)
from tactwin.geometry import SurfaceProfile, build_mesh, thickness_field


@pytest.fixture(scope="module")
def coarse_mesh(geometry, lattice):
    # <= 300 nodes so the dense oracle stays cheap.
    mesh = build_mesh(geometry, target_spacing=4.0, seed=0, lattice=lattice)
    assert mesh.node_count <= 300
    return mesh


@pytest.fixture(scope="module")
def operator(mesh_2mm):
    return StiffnessOperator(mesh_2mm)


def _point_load(mesh, node, magnitude=1.0):
    loads = np.zeros((mesh.node_count, 3))
    loads[node] = -magnitude * mesh.node_normals[node]
    return loads


class TestSolve:
    def test_zero_loads_zero_displacement(self, mesh_2mm, operator):
        field = solve_deformation(mesh_2mm, None, np.zeros((mesh_2mm.node_count, 3)), operator=operator)
        assert np.array_equal(field.displacements, 0 * field.displacements)

    def test_linearity(self, mesh_2mm, operator):
        loads = _point_load(mesh_2mm, 50, 0.7)
        u1 = solve_deformation(mesh_2mm, None, loads, operator=operator).displacements
        u2 = solve_deformation(mesh_2mm, None, 2 * loads, operator=operator).displacements
        assert np.linalg.norm(u2 - 2 * u1) <= 1e-8 * np.linalg.norm(u2)

    def test_superposition(self, mesh_2mm, operator, rng):
        fa = rng.normal(size=(mesh_2mm.node_count, 3)) * 0.1
        fb = rng.normal(size=(mesh_2mm.node_count, 3)) * 0.1
        ua = solve_deformation(mesh_2mm, None, fa, operator=operator).displacements
        ub = solve_deformation(mesh_2mm, None, fb, operator=operator).displacements
        uab = solve_deformation(mesh_2mm, None, fa + fb, operator=operator).displacements
        assert np.linalg.norm(uab - (ua + ub)) <= 1e-8 * max(1e-12, np.linalg.norm(uab))

    def test_cg_matches_dense_solve(self, coarse_mesh, rng):
        # Independent oracle: dense direct solve of the assembled system.
        op = StiffnessOperator(coarse_mesh)
        dense = op.matrix.toarray()
        f = rng.normal(size=coarse_mesh.node_count)
        x_cg = op.solve(f)
        x_direct = np.linalg.solve(dense, f)
        rel = np.linalg.norm(x_cg - x_direct) / np.linalg.norm(x_direct)
        assert rel <= 1e-6

    def test_window_displaces_more_than_beam(self, coarse_mesh, geometry, lattice):
        profile = SurfaceProfile(geometry)
        op = StiffnessOperator(coarse_mesh)
        tree = cKDTree(coarse_mesh.node_positions)
        window_nodes = tree.query(lattice.window_centers(profile))[1]
        for magnitude in (0.2, 0.5, 1.0, 2.0):
            for wn in window_nodes[:4]:
                beam_node = int(
                    np.argmin(np.linalg.norm(coarse_mesh.node_positions - lattice.segments_a[10], axis=1))
                )
                uw = solve_deformation(
                    coarse_mesh, None, _point_load(coarse_mesh, int(wn), magnitude), operator=op
                ).displacements
                ub = solve_deformation(
                    coarse_mesh, None, _point_load(coarse_mesh, beam_node, magnitude), operator=op
                ).displacements
                assert np.abs(uw).max() > np.abs(ub).max()

    def test_reciprocity(self, coarse_mesh):
        op = StiffnessOperator(coarse_mesh)
        i = 10
        for j in coarse_mesh.adjacency[i][:2] + (150,):
            fi = np.zeros(coarse_mesh.node_count)
            fi[i] = 1.0
            fj = np.zeros(coarse_mesh.node_count)
            fj[j] = 1.0
            ui = op.solve(fi)
            uj = op.solve(fj)
            assert ui[j] == pytest.approx(uj[i], rel=1e-6)

    def test_locality(self, mesh_2mm, operator):
        node = 123
        u = solve_deformation(mesh_2mm, None, _point_load(mesh_2mm, node, 1.0), operator=operator).displacements
        mags = np.linalg.norm(u, axis=1)
        dist = np.linalg.norm(mesh_2mm.node_positions - mesh_2mm.node_positions[node], axis=1)
        far = dist > 25.0
        assert mags[far].max() <= 1e-3 * mags.max()

    def test_gravity_sag_below_one_percent_of_height(self, mesh_2mm, geometry, operator):
        loads = gravity_load(mesh_2mm, (90.0, 45.0), 1.07, thickness_field(mesh_2mm, geometry))
        u = solve_deformation(mesh_2mm, None, loads, operator=operator).displacements
        assert np.linalg.norm(u, axis=1).max() < 0.01 * geometry.height

    def test_nonconvergence_raises(self, mesh_2mm):
        op = StiffnessOperator(mesh_2mm, StiffnessConfig(cg_max_factor=0))
        f = np.zeros(mesh_2mm.node_count)
        f[0] = 1.0
        with pytest.raises(SolverError, match="residual"):
            op.solve(f)

    def test_load_validation(self, mesh_2mm, operator):
        with pytest.raises(ValueError):
            solve_deformation(mesh_2mm, None, np.zeros((3, 3)), operator=operator)
        bad = np.zeros((mesh_2mm.node_count, 3))
        bad[0, 0] = np.nan
        with pytest.raises(ValueError):
            solve_deformation(mesh_2mm, None, bad, operator=operator)


class TestApply:
    def test_zero_field_identity(self, mesh_2mm):
        field = DeformationField(np.zeros((mesh_2mm.node_count, 3)))
        pos, nrm = apply_deformation(mesh_2mm, field)
        assert np.allclose(pos, mesh_2mm.node_positions)
        # Recomputed triangle normals agree with the analytic ones to mesh accuracy.
        dots = np.einsum("ij,ij->i", nrm, mesh_2mm.node_normals)
        assert dots.min() > 0.9

    def test_uniform_translation_keeps_normals(self, mesh_2mm):
        zero = DeformationField(np.zeros((mesh_2mm.node_count, 3)))
        _, nrm0 = apply_deformation(mesh_2mm, zero)
        shift = DeformationField(np.tile([1.5, -2.0, 0.7], (mesh_2mm.node_count, 1)))
        pos, nrm = apply_deformation(mesh_2mm, shift)
        assert np.allclose(pos, mesh_2mm.node_positions + [1.5, -2.0, 0.7])
        assert np.allclose(nrm, nrm0, atol=1e-9)

    def test_single_node_push_tilts_neighbors(self, mesh_2mm):
        node = 321
        zero = DeformationField(np.zeros((mesh_2mm.node_count, 3)))
        _, nrm0 = apply_deformation(mesh_2mm, zero)
        u = np.zeros((mesh_2mm.node_count, 3))
        u[node] = -0.8 * mesh_2mm.node_normals[node]
        _, nrm = apply_deformation(mesh_2mm, DeformationField(u))
        neighbors = list(mesh_2mm.adjacency[node])
        dots = np.einsum("ij,ij->i", nrm[neighbors], nrm0[neighbors])
        assert np.all(dots < 1.0 - 1e-6)

    def test_original_mesh_untouched(self, mesh_2mm):
        before = mesh_2mm.node_positions.copy()
        u = np.zeros((mesh_2mm.node_count, 3))
        u[5] = [1.0, 0.0, 0.0]
        apply_deformation(mesh_2mm, DeformationField(u))
        assert np.array_equal(mesh_2mm.node_positions, before)

    def test_field_size_checked(self, mesh_2mm):
        with pytest.raises(ValueError):
            apply_deformation(mesh_2mm, DeformationField(np.zeros((4, 3))))
