"""Optimal pixel-to-node binding for force-map images.

Force maps are learned as small images, so every mesh node must own exactly
one pixel. The binding minimizes the total squared distance between each
node's fisheye projection (rescaled to the force grid) and its pixel center,
solved as a linear assignment problem with a shortest-augmenting-path solver
(Jonker-Volgenant style, O(n^3), deterministic).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import BinaryIO

import numpy as np

from tactwin import binio
from tactwin.forcemap import ForceMap
from tactwin.geometry import SurfaceMesh
from tactwin.optics import CameraModel, project


def solve(cost: np.ndarray) -> tuple[np.ndarray, float]:
    """Minimum-cost row-to-column assignment.

    Accepts a rectangular matrix with n_rows <= n_cols; the matrix is padded
    with zero-cost dummy rows to square form. Ties break toward the lowest
    column index. Returns (column per row, total cost over the real rows).
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.size == 0:
        return np.zeros(0, dtype=np.int64), 0.0
    if cost.ndim != 2:
        raise ValueError("cost must be a 2-D matrix")
    if not np.all(np.isfinite(cost)):
        raise ValueError("costs must be finite")
    n_rows, n_cols = cost.shape
    if n_rows > n_cols:
        raise ValueError("need n_rows <= n_cols")
    if n_rows < n_cols:
        padded = np.zeros((n_cols, n_cols))
        padded[:n_rows] = cost
        full = _solve_square(padded)
        col_of = full[:n_rows]
    else:
        col_of = _solve_square(cost)
    total = float(cost[np.arange(n_rows), col_of].sum())
    return col_of, total


def _solve_square(cost: np.ndarray) -> np.ndarray:
    """Shortest augmenting paths with dual potentials on a square matrix."""
    n = cost.shape[0]
    u = np.zeros(n)
    v = cost.min(axis=0).astype(np.float64).copy()  # column reduction
    row_of = np.full(n, -1, dtype=np.int64)  # column -> row
    col_of = np.full(n, -1, dtype=np.int64)  # row -> column
    for i in range(n):
        d = cost[i] - u[i] - v
        pred = np.full(n, i, dtype=np.int64)
        done = np.zeros(n, dtype=bool)
        while True:
            j = int(np.argmin(np.where(done, np.inf, d)))  # lowest index wins ties
            done[j] = True
            if row_of[j] == -1:
                sink = j
                break
            i2 = row_of[j]
            reduced = cost[i2] - u[i2] - v
            candidate = d[j] + reduced - reduced[j]
            improve = (~done) & (candidate < d)
            pred[improve] = i2
            d[improve] = candidate[improve]
        delta = d[sink]
        settled = done.copy()
        settled[sink] = False
        u[i] += delta
        u[row_of[settled]] += delta - d[settled]
        v[settled] += d[settled] - delta
        j = sink
        while True:
            i2 = pred[j]
            row_of[j] = i2
            col_of[i2], j = j, col_of[i2]
            if i2 == i:
                break
    return col_of


@dataclass(frozen=True)
class PixelNodeAssignment:
    """Bijection between mesh nodes and pixels of a (grid_w x grid_h) image."""

    grid: tuple[int, int]  # (Wf, Hf)
    node_to_pixel: np.ndarray  # (N,) flat pixel index per node
    pixel_to_node: np.ndarray  # (Wf*Hf,) node index or -1
    out_of_view_nodes: int = 0
    total_cost: float = 0.0

    @property
    def node_count(self) -> int:
        return len(self.node_to_pixel)

    def __post_init__(self):
        w, h = self.grid
        if len(self.pixel_to_node) != w * h:
            raise ValueError("pixel table does not match the grid")
        pix = np.asarray(self.node_to_pixel)
        if len(np.unique(pix)) != len(pix):
            raise ValueError("node_to_pixel must be injective")


def grid_positions(mesh: SurfaceMesh, camera: CameraModel, grid: tuple[int, int]):
    """Node projections rescaled to force-grid units, clamped into the grid.

    Nodes outside the camera view are clamped to the nearest image-boundary
    point so that every node still owns a pixel; returns (positions, n_out).
    """
    wf, hf = grid
    w, h = camera.render_size
    uv, in_view, _ = project(camera, mesh.node_positions)
    n_out = int(np.count_nonzero(~in_view))
    clamped = np.stack([np.clip(uv[:, 0], 0.0, w), np.clip(uv[:, 1], 0.0, h)], axis=1)
    return clamped * np.array([wf / w, hf / h]), n_out


def _grid_costs(points: np.ndarray, grid: tuple[int, int]) -> np.ndarray:
    wf, hf = grid
    cols, rows = np.meshgrid(np.arange(wf) + 0.5, np.arange(hf) + 0.5)
    centers = np.stack([cols.ravel(), rows.ravel()], axis=1)  # flat index = r*wf + c
    diff = points[:, None, :] - centers[None, :, :]
    return np.einsum("npk,npk->np", diff, diff)


def build_assignment(
    mesh: SurfaceMesh, camera: CameraModel, grid: tuple[int, int] = (64, 64)
) -> PixelNodeAssignment:
    """Optimal node-to-pixel binding for a mesh/camera pair."""
    wf, hf = grid
    if wf * hf < mesh.node_count:
        raise ValueError(
            f"grid {wf}x{hf} has fewer pixels than the mesh has nodes ({mesh.node_count})"
        )
    points, n_out = grid_positions(mesh, camera, grid)
    cost = _grid_costs(points, grid)
    col_of, total = solve(cost)
    pixel_to_node = np.full(wf * hf, -1, dtype=np.int64)
    pixel_to_node[col_of] = np.arange(mesh.node_count)
    return PixelNodeAssignment(
        grid=grid,
        node_to_pixel=col_of,
        pixel_to_node=pixel_to_node,
        out_of_view_nodes=n_out,
        total_cost=total,
    )


def greedy_assignment_cost(mesh: SurfaceMesh, camera: CameraModel, grid: tuple[int, int]) -> float:
    """Baseline: each node takes its nearest still-free pixel, in node order."""
    points, _ = grid_positions(mesh, camera, grid)
    cost = _grid_costs(points, grid)
    taken = np.zeros(cost.shape[1], dtype=bool)
    total = 0.0
    for i in range(cost.shape[0]):
        row = np.where(taken, np.inf, cost[i])
        j = int(np.argmin(row))
        taken[j] = True
        total += cost[i, j]
    return total


def map_to_image(force_map: ForceMap, assignment: PixelNodeAssignment) -> np.ndarray:
    """Force image (Hf, Wf, 3): each pixel holds its node's (Fx, Fy, Fz)."""
    if force_map.node_count != assignment.node_count:
        raise ValueError("force map does not match the assignment")
    wf, hf = assignment.grid
    image = np.zeros((hf * wf, 3))
    image[assignment.node_to_pixel] = force_map.nodal_forces
    return image.reshape(hf, wf, 3)


def image_to_map(image: np.ndarray, assignment: PixelNodeAssignment) -> ForceMap:
    """Inverse of :func:`map_to_image`; unassigned pixels are ignored."""
    wf, hf = assignment.grid
    if image.shape != (hf, wf, 3):
        raise ValueError(f"image shape {image.shape} does not match grid {assignment.grid}")
    flat = image.reshape(hf * wf, 3)
    return ForceMap(nodal_forces=flat[assignment.node_to_pixel].copy())


ASSIGNMENT_MAGIC = "IASN"


def save_assignment(path, assignment: PixelNodeAssignment) -> None:
    with open(path, "wb") as f:
        binio.write_magic(f, ASSIGNMENT_MAGIC, 1)
        binio.write_u32(f, assignment.grid[0])
        binio.write_u32(f, assignment.grid[1])
        binio.write_u32(f, assignment.node_count)
        binio.write_u32_array(f, assignment.node_to_pixel)


def load_assignment(path) -> PixelNodeAssignment:
    with open(path, "rb") as f:
        version = binio.read_magic(f, ASSIGNMENT_MAGIC)
        if version != 1:
            raise binio.FormatError(f"unsupported assignment version {version}")
        wf = binio.read_u32(f)
        hf = binio.read_u32(f)
        n = binio.read_u32(f)
        node_to_pixel = binio.read_u32_array(f, (n,))
    pixel_to_node = np.full(wf * hf, -1, dtype=np.int64)
    pixel_to_node[node_to_pixel] = np.arange(n)
    return PixelNodeAssignment(grid=(wf, hf), node_to_pixel=node_to_pixel, pixel_to_node=pixel_to_node)
