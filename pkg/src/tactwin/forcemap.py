"""Ground-truth force-distribution maps and their summary statistics.

A force map assigns a 3-vector of force (N, sensor frame) to every mesh node.
Single contacts are turned into maps by revolving a radial weight profile
around the contact point and normalizing the discrete weights so the map sums
exactly to the measured force vector. The map stores the same force the test
bed measures (the reaction on the probe); deformation loads are its negation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import BinaryIO, Iterable

import numpy as np

from tactwin import binio
from tactwin.contact import ContactEvent
from tactwin.geometry import SurfaceMesh


class NoSupportError(ValueError):
    """Contact point has no mesh nodes inside the profile cutoff."""


@dataclass(frozen=True)
class ForceProfile:
    """Radial weight profile with a hard cutoff.

    kinds: uniform (1 for x <= sigma), hertz ((1 - x^2/sigma^2)^1/2 for
    x <= sigma), gaussian (exp(-x^2 / (0.8 sigma^2)) for x <= 2 sigma),
    laplacian (exp(-x/lambda) for x <= 2 sigma).
    """

    kind: str
    sigma: float
    lam: float | None = None

    def __post_init__(self):
        if self.kind not in ("uniform", "hertz", "gaussian", "laplacian"):
            raise ValueError(f"unknown profile kind {self.kind!r}")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.kind == "laplacian" and (self.lam is None or self.lam <= 0):
            raise ValueError("laplacian profile needs a positive lambda")

    @property
    def cutoff(self) -> float:
        return self.sigma if self.kind in ("uniform", "hertz") else 2 * self.sigma


def named_profile(name: str, sigma: float = 2.0) -> ForceProfile:
    """The five evaluated profiles; laplacian1 is the selected default."""
    name = name.lower()
    if name == "uniform":
        return ForceProfile("uniform", sigma)
    if name == "hertz":
        return ForceProfile("hertz", sigma)
    if name == "gaussian":
        return ForceProfile("gaussian", sigma)
    if name == "laplacian1":
        return ForceProfile("laplacian", sigma, lam=0.87 * sigma)
    if name == "laplacian2":
        return ForceProfile("laplacian", sigma, lam=0.5 * sigma)
    raise ValueError(f"unknown profile name {name!r}")


PROFILE_NAMES = ("uniform", "hertz", "gaussian", "laplacian1", "laplacian2")


def profile_weight(profile: ForceProfile, x) -> np.ndarray:
    """Unnormalized profile value at radial distance x >= 0 (mm)."""
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise ValueError("radial distance must be non-negative")
    inside = x <= profile.cutoff
    if profile.kind == "uniform":
        w = np.ones_like(x)
    elif profile.kind == "hertz":
        w = np.sqrt(np.clip(1.0 - (x / profile.sigma) ** 2, 0.0, None))
    elif profile.kind == "gaussian":
        w = np.exp(-(x**2) / (0.8 * profile.sigma**2))
    else:  # laplacian
        w = np.exp(-x / profile.lam)
    return np.where(inside, w, 0.0)


@dataclass(frozen=True)
class ForceMap:
    """Per-node force vectors in the sensor frame."""

    nodal_forces: np.ndarray  # (N, 3) N

    def __post_init__(self):
        if not np.all(np.isfinite(self.nodal_forces)):
            raise ValueError("nodal forces must be finite")

    @property
    def node_count(self) -> int:
        return len(self.nodal_forces)

    def __add__(self, other: "ForceMap") -> "ForceMap":
        return ForceMap(self.nodal_forces + other.nodal_forces)


def distribute_force(mesh: SurfaceMesh, contact: ContactEvent, profile: ForceProfile) -> ForceMap:
    """Spread a contact's measured force over nearby nodes with the profile.

    Discrete normalization: weights over nodes within the cutoff are divided
    by their sum, so the vector sum of the map equals the measured force
    exactly.
    """
    dist = np.linalg.norm(mesh.node_positions - contact.contact_point, axis=1)
    weights = profile_weight(profile, dist)
    total = weights.sum()
    if total <= 0.0:
        raise NoSupportError("no mesh nodes inside the profile cutoff")
    forces = np.outer(weights / total, contact.force_global)
    return ForceMap(nodal_forces=forces)


def total_force(force_map: ForceMap) -> np.ndarray:
    return force_map.nodal_forces.sum(axis=0)


def localize(force_map: ForceMap, mesh: SurfaceMesh, k: int = 20) -> np.ndarray:
    """Mean position of the k nodes with the largest force amplitudes.

    Ties break toward lower node indices. If fewer than k nodes carry force,
    all nonzero nodes are used.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    mags = np.linalg.norm(force_map.nodal_forces, axis=1)
    nonzero = int(np.count_nonzero(mags))
    if nonzero == 0:
        raise NoSupportError("cannot localize an all-zero force map")
    use = min(k, nonzero)
    order = np.argsort(-mags, kind="stable")[:use]
    return mesh.node_positions[order].mean(axis=0)


def contact_area(force_map: ForceMap, mesh: SurfaceMesh, threshold: float = 0.02) -> float:
    """Equivalent contact diameter (mm) from nodes above the force threshold."""
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    mags = np.linalg.norm(force_map.nodal_forces, axis=1)
    area = mesh.node_areas[mags > threshold].sum()
    return float(2.0 * np.sqrt(area / np.pi))


@dataclass(frozen=True)
class ContactComponent:
    sub_map: ForceMap
    centroid: np.ndarray  # (3,) mm
    force: np.ndarray  # (3,) N
    nodes: tuple[int, ...]


def split_contacts(
    force_map: ForceMap, mesh: SurfaceMesh, threshold: float = 0.02
) -> list[ContactComponent]:
    """Connected components of supra-threshold nodes under mesh adjacency."""
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    mags = np.linalg.norm(force_map.nodal_forces, axis=1)
    active = mags > threshold
    seen = np.zeros(mesh.node_count, dtype=bool)
    components: list[ContactComponent] = []
    for start in range(mesh.node_count):
        if not active[start] or seen[start]:
            continue
        stack = [start]
        seen[start] = True
        members = []
        while stack:
            node = stack.pop()
            members.append(node)
            for nb in mesh.adjacency[node]:
                if active[nb] and not seen[nb]:
                    seen[nb] = True
                    stack.append(nb)
        members.sort()
        sub = np.zeros_like(force_map.nodal_forces)
        sub[members] = force_map.nodal_forces[members]
        components.append(
            ContactComponent(
                sub_map=ForceMap(sub),
                centroid=mesh.node_positions[members].mean(axis=0),
                force=force_map.nodal_forces[members].sum(axis=0),
                nodes=tuple(members),
            )
        )
    return components


FORCEMAP_MAGIC = "IFMP"


def save_forcemap(path, force_map: ForceMap) -> None:
    with open(path, "wb") as f:
        write_forcemap(f, force_map)


def write_forcemap(f: BinaryIO, force_map: ForceMap) -> None:
    binio.write_magic(f, FORCEMAP_MAGIC, 1)
    binio.write_u32(f, force_map.node_count)
    binio.write_f32_array(f, force_map.nodal_forces)


def load_forcemap(path) -> ForceMap:
    with open(path, "rb") as f:
        return read_forcemap(f)


def read_forcemap(f: BinaryIO) -> ForceMap:
    version = binio.read_magic(f, FORCEMAP_MAGIC)
    if version != 1:
        raise binio.FormatError(f"unsupported force map version {version}")
    n = binio.read_u32(f)
    return ForceMap(nodal_forces=binio.read_f32_array(f, (n, 3)))
