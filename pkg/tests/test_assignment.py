import itertools

import numpy as np
import pytest

from tactwin.assignment import (
    PixelNodeAssignment,
    _grid_costs,
    build_assignment,
    greedy_assignment_cost,
    image_to_map,
    load_assignment,
    map_to_image,
    save_assignment,
    solve,
)
from tactwin.contact import Indenter, make_event
from tactwin.forcemap import ForceMap, distribute_force, named_profile, total_force
from tactwin.optics import CameraModel


def brute_force_min(cost):
    n = cost.shape[0]
    return min(
        sum(cost[i, p[i]] for i in range(n)) for p in itertools.permutations(range(n))
    )


class TestSolver:
    def test_two_by_two_diagonal(self):
        col_of, total = solve(np.array([[1.0, 2.0], [2.0, 1.0]]))
        assert list(col_of) == [0, 1]
        assert total == 2.0

    def test_permutation_equivariance(self, rng):
        cost = rng.uniform(0, 10, (6, 6))
        base_cols, base_total = solve(cost)
        perm = rng.permutation(6)
        permuted = cost[perm]
        cols, tot = solve(permuted)
        assert tot == pytest.approx(base_total, abs=1e-12)
        assert np.array_equal(cols, base_cols[perm])

    def test_hundred_random_7x7_vs_brute_force(self):
        rng = np.random.default_rng(99)
        for _ in range(100):
            cost = rng.integers(0, 50, (7, 7)).astype(float)
            _, total = solve(cost)
            assert total == pytest.approx(brute_force_min(cost), abs=1e-9)

    def test_small_exhaustive_up_to_8(self, rng):
        for n in range(2, 9):
            cost = rng.uniform(0, 1, (n, n))
            _, total = solve(cost)
            assert total == pytest.approx(brute_force_min(cost), abs=1e-12)

    def test_empty_matrix(self):
        col_of, total = solve(np.zeros((0, 0)))
        assert len(col_of) == 0
        assert total == 0.0

    def test_rectangular_rows_less_than_cols(self, rng):
        cost = rng.uniform(0, 5, (4, 9))
        col_of, total = solve(cost)
        assert len(set(col_of.tolist())) == 4
        # Oracle: brute force over column subsets.
        best = min(
            sum(cost[i, p[i]] for i in range(4))
            for p in itertools.permutations(range(9), 4)
        )
        assert total == pytest.approx(best, abs=1e-12)

    def test_tie_break_lowest_column(self):
        col_of, total = solve(np.zeros((3, 3)))
        assert list(col_of) == [0, 1, 2]
        assert total == 0.0

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            solve(np.array([[1.0, np.inf], [0.0, 1.0]]))

    def test_rejects_more_rows_than_cols(self):
        with pytest.raises(ValueError):
            solve(np.zeros((3, 2)))


@pytest.fixture(scope="module")
def camera():
    return CameraModel()


@pytest.fixture(scope="module")
def assignment_32(mesh_2mm, camera):
    return build_assignment(mesh_2mm, camera, grid=(32, 32))


class TestBuildAssignment:
    def test_identity_when_nodes_hit_pixel_centers(self):
        # Synthetic projections exactly on distinct pixel centers.
        grid = (4, 4)
        points = np.array([[c + 0.5, r + 0.5] for r in range(4) for c in range(4)])
        cost = _grid_costs(points, grid)
        col_of, total = solve(cost)
        assert np.array_equal(col_of, np.arange(16))
        assert total == pytest.approx(0.0, abs=1e-12)

    def test_every_node_assigned_injectively(self, mesh_2mm, assignment_32):
        assert assignment_32.node_count == mesh_2mm.node_count
        assert len(np.unique(assignment_32.node_to_pixel)) == mesh_2mm.node_count
        unassigned = np.count_nonzero(assignment_32.pixel_to_node < 0)
        assert unassigned == 32 * 32 - mesh_2mm.node_count

    def test_deterministic(self, mesh_2mm, camera, assignment_32):
        again = build_assignment(mesh_2mm, camera, grid=(32, 32))
        assert np.array_equal(again.node_to_pixel, assignment_32.node_to_pixel)

    def test_not_worse_than_greedy(self, mesh_2mm, camera, assignment_32):
        greedy = greedy_assignment_cost(mesh_2mm, camera, (32, 32))
        assert assignment_32.total_cost <= greedy + 1e-9

    def test_grid_too_small_rejected(self, mesh_2mm, camera):
        with pytest.raises(ValueError):
            build_assignment(mesh_2mm, camera, grid=(16, 16))

    def test_out_of_view_nodes_reported(self, mesh_2mm, assignment_32):
        # The 4:3 sensor cannot see two opposite areas at the base.
        assert 0 < assignment_32.out_of_view_nodes < mesh_2mm.node_count // 4


class TestConversions:
    def test_round_trip(self, mesh_2mm, assignment_32):
        ev = make_event(mesh_2mm, 77, 1.5, (0.2, 0.0), Indenter())
        fmap = distribute_force(mesh_2mm, ev, named_profile("laplacian1"))
        image = map_to_image(fmap, assignment_32)
        back = image_to_map(image, assignment_32)
        assert np.array_equal(back.nodal_forces, fmap.nodal_forces)

    def test_zero_map_zero_image(self, mesh_2mm, assignment_32):
        image = map_to_image(ForceMap(np.zeros((mesh_2mm.node_count, 3))), assignment_32)
        assert np.array_equal(image, np.zeros_like(image))

    def test_pixel_sum_equals_total_force(self, mesh_2mm, assignment_32):
        ev = make_event(mesh_2mm, 555, 2.0, (0.1, -0.3), Indenter())
        fmap = distribute_force(mesh_2mm, ev, named_profile("laplacian1"))
        image = map_to_image(fmap, assignment_32)
        assert np.allclose(image.sum(axis=(0, 1)), total_force(fmap), atol=1e-9)

    def test_size_mismatch_errors(self, mesh_2mm, assignment_32):
        with pytest.raises(ValueError):
            map_to_image(ForceMap(np.zeros((5, 3))), assignment_32)
        with pytest.raises(ValueError):
            image_to_map(np.zeros((8, 8, 3)), assignment_32)


class TestAssignmentIO:
    def test_round_trip(self, tmp_path, assignment_32):
        path = tmp_path / "a.iasn"
        save_assignment(path, assignment_32)
        loaded = load_assignment(path)
        assert loaded.grid == assignment_32.grid
        assert np.array_equal(loaded.node_to_pixel, assignment_32.node_to_pixel)
        assert np.array_equal(loaded.pixel_to_node, assignment_32.pixel_to_node)
