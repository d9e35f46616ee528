"""Flat key=value run configuration shared by every CLI command.

The file format is UTF-8 text, one `key = value` per line, `#` comments and
blank lines allowed. Unknown keys are rejected so typos fail loudly. Every
command writes the fully resolved configuration next to its outputs.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path


class ConfigError(ValueError):
    """Bad key, bad value, or malformed config file."""


@dataclass(frozen=True)
class RunConfig:
    # geometry (mm)
    base_diameter: float = 40.0
    height: float = 70.0
    tip_radius: float = 2.0
    shell_thickness: float = 4.0
    skeleton_inner_offset: float = 0.8
    fovea_width: float = 13.0
    fovea_height: float = 11.0
    fovea_thickness: float = 1.2
    fovea_azimuth_deg: float = 0.0
    fovea_center_z: float = 52.0
    # mesh
    mesh_spacing: float = 2.0
    lloyd_passes: int = 1
    # skeleton lattice
    n_meridians: int = 8
    n_rings: int = 2
    beam_radius: float = 0.8
    cap_margin: float = 12.0
    # optics
    image_width: int = 64
    image_height: int = 48
    fov_width_deg: float = 123.8
    fov_height_deg: float = 91.0
    camera_z: float = -10.0
    led_ring_radius: float = 13.0
    led_ring_z: float = -4.0
    collimator_diameter: float = 2.5
    collimator_tilt_deg: float = 3.0
    cone_divergence_deg: float = 7.0
    brightness_r: float = 1.0
    brightness_g: float = 1.0
    brightness_b: float = 0.5
    exposure: float = 900.0
    noise_sigma: float = 0.0108
    # forward force law
    youngs_modulus_kpa: float = 70.0
    poisson_ratio: float = 0.4999
    stiffen_gain: float = 2.0
    stiffen_scale: float = 2.0
    friction_cap: float = 0.5
    slip_distance: float = 1.0
    shell_density: float = 1.07
    # deformation surrogate
    edge_stiffness: float = 0.1
    anchor_base: float = 0.008
    anchor_skeleton: float = 1.2
    anchor_scale: float = 2.0
    cg_tol: float = 1e-12
    # probe protocol
    probe_diameter: float = 4.0
    normal_step: float = 0.5
    shear_ratio: float = 0.5
    force_cutoff: float = 1.6
    shear_directions: int = 2
    n_locations: int = 110
    # ground-truth profile and force grid
    profile: str = "laplacian1"
    grid_width: int = 32
    grid_height: int = 32
    # training
    batch_size: int = 64
    epochs: int = 32
    learning_rate: float = 0.001
    conv_width1: int = 16
    conv_width2: int = 32
    variant: str = "diff_skel"
    fraction: float = 1.0
    # posture experiment
    posture_samples: int = 400
    # sliding experiment
    slide_depth: float = 1.5
    slide_length: float = 4.0
    slide_motion_step: float = 0.5
    slide_pause_frames: int = 5
    # reproducibility / execution
    seed: int = 0
    workers: int = 1


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    cfg = base or RunConfig()
    overrides = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        overrides[key] = _coerce(key, value, lineno)
    return replace(cfg, **overrides)


def _coerce(key: str, value: str, lineno: int):
    current = getattr(RunConfig(), key)
    try:
        if isinstance(current, bool):
            return value.lower() in ("1", "true", "yes")
        if isinstance(current, int):
            return int(value)
        if isinstance(current, float):
            return float(value)
        return value
    except ValueError as exc:
        raise ConfigError(f"line {lineno}: bad value for {key}: {value!r}") from exc


def load_config(path, base: RunConfig | None = None) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text(encoding="utf-8"), base)


def dump_config(cfg: RunConfig) -> str:
    lines = [f"{key} = {value}" for key, value in asdict(cfg).items()]
    return "\n".join(lines) + "\n"


def write_resolved(cfg: RunConfig, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "resolved.cfg"
    path.write_text(dump_config(cfg), encoding="utf-8")
    return path
