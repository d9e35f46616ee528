"""Synthetic interior imaging: fisheye camera, collimated LED cones, rasterizer.

The camera sits on the sensor axis below the base and looks up the axis with
an equidistant fisheye projection. Eight color LEDs on a ring around it shine
collimated cones up the shell; each cone's cross-section is a Gaussian whose
full width at half maximum equals the footprint diameter D + 2 Z tan(beta),
and the received intensity falls off with the inverse square of the axial
range and a Lambertian factor toward the light.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import BinaryIO, Sequence

import numpy as np

from tactwin import binio
from tactwin.geometry import SkeletonLattice, SurfaceMesh

# Overall gain mapping raw irradiance (mm^-2) to pixel units; calibrated so the
# default reference image peaks just below saturation.
DEFAULT_EXPOSURE = 900.0
# Per-pixel additive noise, calibrated so two noisy captures of the default
# reference image differ by an RMS of ~0.012 (the measured noise floor) after
# clipping to [0, 1]; clipping eats variance in the dark regions, hence the
# value sits above 0.012/sqrt(2).
DEFAULT_NOISE_SIGMA = 0.0108
CHANNEL_SENSITIVITY = {"R": 1.0, "G": 1.0, "B": 2.0}
CHANNEL_INDEX = {"R": 0, "G": 1, "B": 2}
RING_CHANNEL_ORDER = "RGBRGRBG"


@dataclass(frozen=True)
class CameraModel:
    """Equidistant fisheye camera on the sensor axis."""

    resolution: tuple[int, int] = (1640, 1232)  # native (W, H)
    fov_deg: tuple[float, float] = (123.8, 91.0)
    position: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -10.0]))
    downsample: tuple[int, int] = (64, 48)  # working render size (W, H)

    def __post_init__(self):
        for f in self.fov_deg:
            if not 0.0 < f < 180.0:
                raise ValueError("field of view must be within (0, 180) degrees per axis")

    @property
    def render_size(self) -> tuple[int, int]:
        return self.downsample


@dataclass(frozen=True)
class LightSource:
    """One collimated LED: a colored cone of light tilted radially outward."""

    ring_position: np.ndarray
    channel: str
    brightness: float
    collimator_diameter: float = 2.5  # D, mm
    tilt_deg: float = 3.0  # alpha, radial tilt
    axis: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))

    def __post_init__(self):
        if self.channel not in CHANNEL_INDEX:
            raise ValueError(f"channel must be one of R, G, B, got {self.channel!r}")
        if self.collimator_diameter <= 0:
            raise ValueError("collimator diameter must be positive")
        if self.tilt_deg < 0:
            raise ValueError("tilt must be non-negative")


@dataclass(frozen=True)
class SensorImage:
    """H x W x 3 intensities in [0, 1]."""

    pixels: np.ndarray
    kind: str = "raw"  # raw | reference | skeleton

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError("pixels must be H x W x 3")

    @property
    def size(self) -> tuple[int, int]:
        return self.pixels.shape[1], self.pixels.shape[0]


def default_light_ring(
    ring_radius: float = 13.0,
    ring_z: float = -4.0,
    collimator_diameter: float = 2.5,
    tilt_deg: float = 3.0,
    brightness_rgb: tuple[float, float, float] = (1.0, 1.0, 0.5),
) -> list[LightSource]:
    """Eight LEDs in circumferential order R, G, B, R, G, R, B, G."""
    lights = []
    for k, channel in enumerate(RING_CHANNEL_ORDER):
        phi = 2 * np.pi * k / 8
        radial = np.array([np.cos(phi), np.sin(phi), 0.0])
        pos = ring_radius * radial + np.array([0.0, 0.0, ring_z])
        tilt = np.deg2rad(tilt_deg)
        axis = np.array([0.0, 0.0, np.cos(tilt)]) + np.sin(tilt) * radial
        axis /= np.linalg.norm(axis)
        lights.append(
            LightSource(
                ring_position=pos,
                channel=channel,
                brightness=brightness_rgb["RGB".index(channel)],
                collimator_diameter=collimator_diameter,
                tilt_deg=tilt_deg,
                axis=axis,
            )
        )
    return lights


def focal_px_per_rad(camera: CameraModel, size: tuple[int, int] | None = None) -> float:
    """Isotropic equidistant focal length with the width FoV on the borders."""
    w = (size or camera.render_size)[0]
    return (w / 2) / np.deg2rad(camera.fov_deg[0] / 2)


def project(
    camera: CameraModel, points: np.ndarray, size: tuple[int, int] | None = None
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Fisheye projection to continuous pixel coordinates.

    Returns (uv, in_view, theta): uv is (N, 2) with u rightward and v downward,
    in_view flags points landing inside the image rectangle, theta is the
    angle from the optical axis. The model is r = f * theta with a single f
    chosen so the configured horizontal FoV spans the image width; rings of
    equal theta therefore project to circles.
    """
    size = size or camera.render_size
    w, h = size
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    d = pts - camera.position
    rho = np.hypot(d[:, 0], d[:, 1])
    theta = np.arctan2(rho, d[:, 2])
    phi = np.arctan2(d[:, 1], d[:, 0])
    r = focal_px_per_rad(camera, size) * theta
    u = w / 2 + r * np.cos(phi)
    v = h / 2 + r * np.sin(phi)
    uv = np.stack([u, v], axis=1)
    in_view = (u >= 0) & (u <= w) & (v >= 0) & (v <= h) & (theta < np.pi * 0.999)
    return uv, in_view, theta


def cone_footprint(diameter: float, z: float, divergence_deg: float = 7.0) -> float:
    """Footprint diameter of a collimated cone at axial range z (both mm)."""
    if diameter <= 0 or z <= 0:
        raise ValueError("cone footprint needs positive diameter and range")
    return diameter + 2.0 * z * np.tan(np.deg2rad(divergence_deg))


def irradiance(
    light: LightSource,
    surface_point: np.ndarray,
    surface_normal: np.ndarray,
    divergence_deg: float = 7.0,
) -> np.ndarray:
    """Per-channel intensity received at a surface point from one light.

    intensity = brightness * G(rho) / Z^2 * max(0, cos angle-to-light) *
    channel sensitivity, where Z is the axial range along the cone axis, rho
    the radial distance from the axis, and G a Gaussian whose FWHM equals the
    cone footprint at Z.
    """
    pts = np.atleast_2d(np.asarray(surface_point, dtype=float))
    nrm = np.atleast_2d(np.asarray(surface_normal, dtype=float))
    out = np.zeros((len(pts), 3))
    d = pts - light.ring_position
    z_axial = d @ light.axis
    front = z_axial > 1e-9
    if not np.any(front):
        return out if surface_point.ndim > 1 else out[0]
    radial = d[front] - np.outer(z_axial[front], light.axis)
    rho = np.linalg.norm(radial, axis=1)
    fwhm = light.collimator_diameter + 2.0 * z_axial[front] * np.tan(np.deg2rad(divergence_deg))
    gauss = np.exp(-4.0 * np.log(2.0) * (rho / fwhm) ** 2)
    to_light = light.ring_position - pts[front]
    dist = np.linalg.norm(to_light, axis=1)
    cos_l = np.maximum(0.0, np.einsum("ij,ij->i", nrm[front], to_light) / np.maximum(dist, 1e-12))
    value = (
        light.brightness
        * CHANNEL_SENSITIVITY[light.channel]
        * gauss
        / z_axial[front] ** 2
        * cos_l
    )
    out[front, CHANNEL_INDEX[light.channel]] = value
    return out if np.asarray(surface_point).ndim > 1 else out[0]


def render(
    positions: np.ndarray,
    normals: np.ndarray,
    triangles: np.ndarray,
    lights: Sequence[LightSource],
    camera: CameraModel,
    albedo_field: np.ndarray | None = None,
    exposure: float = DEFAULT_EXPOSURE,
    divergence_deg: float = 7.0,
    clamp: bool = True,
    kind: str = "raw",
) -> SensorImage:
    """Rasterize the surface into a fisheye image under all lights.

    Triangles are projected and scan-converted with image-space barycentric
    interpolation of position and normal; the nearest surface wins a per-pixel
    depth test on camera range. Entirely deterministic for fixed inputs.
    """
    w, h = camera.render_size
    uv, _, theta = project(camera, positions)
    rng_depth = np.linalg.norm(positions - camera.position, axis=1)

    zbuf = np.full((h, w), np.inf)
    pos_buf = np.zeros((h, w, 3))
    nrm_buf = np.zeros((h, w, 3))
    alb_buf = np.ones((h, w))
    covered = np.zeros((h, w), dtype=bool)

    for tri in triangles:
        ia, ib, ic = int(tri[0]), int(tri[1]), int(tri[2])
        if theta[ia] > 2.9 or theta[ib] > 2.9 or theta[ic] > 2.9:
            continue
        ua, va = uv[ia]
        ub, vb = uv[ib]
        uc, vc = uv[ic]
        x0 = max(0, int(np.floor(min(ua, ub, uc))))
        x1 = min(w - 1, int(np.ceil(max(ua, ub, uc))))
        y0 = max(0, int(np.floor(min(va, vb, vc))))
        y1 = min(h - 1, int(np.ceil(max(va, vb, vc))))
        if x1 < x0 or y1 < y0:
            continue
        denom = (ub - ua) * (vc - va) - (uc - ua) * (vb - va)
        if abs(denom) < 1e-12:
            continue
        xs = np.arange(x0, x1 + 1) + 0.5
        ys = np.arange(y0, y1 + 1) + 0.5
        px, py = np.meshgrid(xs, ys)
        w1 = ((px - ua) * (vc - va) - (uc - ua) * (py - va)) / denom
        w2 = ((ub - ua) * (py - va) - (px - ua) * (vb - va)) / denom
        w0 = 1.0 - w1 - w2
        inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
        if not inside.any():
            continue
        depth = w0 * rng_depth[ia] + w1 * rng_depth[ib] + w2 * rng_depth[ic]
        block = zbuf[y0 : y1 + 1, x0 : x1 + 1]
        win = inside & (depth < block)
        if not win.any():
            continue
        block[win] = depth[win]
        ww0, ww1, ww2 = w0[win, None], w1[win, None], w2[win, None]
        patch_pos = ww0 * positions[ia] + ww1 * positions[ib] + ww2 * positions[ic]
        patch_nrm = ww0 * normals[ia] + ww1 * normals[ib] + ww2 * normals[ic]
        pos_buf[y0 : y1 + 1, x0 : x1 + 1][win] = patch_pos
        nrm_buf[y0 : y1 + 1, x0 : x1 + 1][win] = patch_nrm
        if albedo_field is not None:
            alb = (
                w0[win] * albedo_field[ia]
                + w1[win] * albedo_field[ib]
                + w2[win] * albedo_field[ic]
            )
            alb_buf[y0 : y1 + 1, x0 : x1 + 1][win] = alb
        covered[y0 : y1 + 1, x0 : x1 + 1] |= win

    image = np.zeros((h, w, 3))
    if covered.any() and lights:
        pts = pos_buf[covered]
        nrm = nrm_buf[covered]
        nrm = nrm / np.maximum(np.linalg.norm(nrm, axis=1, keepdims=True), 1e-12)
        shade = np.zeros((len(pts), 3))
        for light in lights:
            # The camera views the interior wall, so shade its inward face.
            shade += irradiance(light, pts, -nrm, divergence_deg)
        shade *= exposure * alb_buf[covered][:, None]
        image[covered] = shade
    if clamp:
        image = np.clip(image, 0.0, 1.0)
    return SensorImage(pixels=image, kind=kind)


def render_mesh(mesh: SurfaceMesh, lights, camera, **kwargs) -> SensorImage:
    """Render an undeformed mesh (the reference image has kind='reference')."""
    return render(mesh.node_positions, mesh.node_normals, mesh.triangles, lights, camera, **kwargs)


def render_skeleton_image(
    lattice: SkeletonLattice,
    camera: CameraModel,
    lights: Sequence[LightSource] | None = None,
    sample_step: float = 0.4,
) -> SensorImage:
    """Bright beam geometry on a dark background, as captured before molding.

    Beam segments are sampled and splatted as small discs; brightness falls
    with camera range. Lights are not needed (the capture is effectively of
    the bare frame), but the argument is accepted for interface symmetry.
    """
    del lights
    w, h = camera.render_size
    image = np.zeros((h, w, 3))
    f = focal_px_per_rad(camera)
    for a, b in zip(lattice.segments_a, lattice.segments_b):
        length = np.linalg.norm(b - a)
        n = max(2, int(np.ceil(length / sample_step)) + 1)
        s = np.linspace(0.0, 1.0, n)[:, None]
        pts = a[None, :] * (1 - s) + b[None, :] * s
        uv, in_view, _ = project(camera, pts)
        rng_depth = np.linalg.norm(pts - camera.position, axis=1)
        for (u, v), ok, rr in zip(uv, in_view, rng_depth):
            if not ok:
                continue
            # Splat radius follows the projected beam radius, at least one pixel.
            rad = max(1.0, f * lattice.beam_radius / rr)
            value = min(1.0, (25.0 / rr) ** 2)
            x0, x1 = int(np.floor(u - rad)), int(np.ceil(u + rad))
            y0, y1 = int(np.floor(v - rad)), int(np.ceil(v + rad))
            x0, x1 = max(0, x0), min(w - 1, x1)
            y0, y1 = max(0, y0), min(h - 1, y1)
            if x1 < x0 or y1 < y0:
                continue
            xs = np.arange(x0, x1 + 1) + 0.5
            ys = np.arange(y0, y1 + 1) + 0.5
            px, py = np.meshgrid(xs, ys)
            disc = (px - u) ** 2 + (py - v) ** 2 <= rad**2
            block = image[y0 : y1 + 1, x0 : x1 + 1]
            block[disc] = np.maximum(block[disc], value)
    return SensorImage(pixels=image, kind="skeleton")


def add_sensor_noise(
    image: SensorImage, rng: np.random.Generator, sigma: float = DEFAULT_NOISE_SIGMA
) -> SensorImage:
    """Additive Gaussian pixel noise, clipped back into [0, 1]."""
    noisy = np.clip(image.pixels + rng.normal(0.0, sigma, image.pixels.shape), 0.0, 1.0)
    return SensorImage(pixels=noisy, kind=image.kind)


IMAGE_MAGIC = "IIMG"


def save_image(path, image: SensorImage) -> None:
    with open(path, "wb") as f:
        write_image(f, image)


def write_image(f: BinaryIO, image: SensorImage) -> None:
    h, w, c = image.pixels.shape
    binio.write_magic(f, IMAGE_MAGIC, 1)
    binio.write_u32(f, w)
    binio.write_u32(f, h)
    binio.write_u32(f, c)
    binio.write_f32_array(f, image.pixels)


def load_image(path) -> SensorImage:
    with open(path, "rb") as f:
        return read_image(f)


def read_image(f: BinaryIO) -> SensorImage:
    version = binio.read_magic(f, IMAGE_MAGIC)
    if version != 1:
        raise binio.FormatError(f"unsupported image version {version}")
    w = binio.read_u32(f)
    h = binio.read_u32(f)
    c = binio.read_u32(f)
    if c != 3:
        raise binio.FormatError(f"expected 3 channels, got {c}")
    return SensorImage(pixels=binio.read_f32_array(f, (h, w, c)))


def save_ppm(path, image: SensorImage) -> None:
    """Lossless-enough debug export: plain-text portable pixmap (P3, 16-bit)."""
    h, w, _ = image.pixels.shape
    quant = np.clip(np.round(image.pixels * 65535), 0, 65535).astype(int)
    with open(path, "w", encoding="ascii") as f:
        f.write(f"P3\n{w} {h}\n65535\n")
        for row in quant:
            f.write(" ".join(str(v) for px in row for v in px))
            f.write("\n")
