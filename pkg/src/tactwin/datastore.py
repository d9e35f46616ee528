"""On-disk dataset layout: manifest.tsv plus one record file per sample.

A dataset directory is self-describing: the resolved config, the mesh, the
static reference/skeleton images, the pixel assignment, a manifest row per
sample (contact location, depth, forces, posture, file offsets), and one
record file holding the raw image ("IIMG") followed by the ground-truth force
map ("IFMP"). A hashes.tsv records the SHA-256 of every artifact.
"""

from __future__ import annotations

import hashlib
import io
from pathlib import Path

import numpy as np

from tactwin.assignment import load_assignment, save_assignment
from tactwin.forcemap import ForceMap, read_forcemap, write_forcemap
from tactwin.geometry import load_mesh, save_mesh
from tactwin.optics import SensorImage, load_image, read_image, save_image, write_image
from tactwin.pipeline import Sample, TwinAssets, TwinDataset

MANIFEST_COLUMNS = (
    "id", "loc_id", "node", "cx", "cy", "cz", "depth",
    "fgx", "fgy", "fgz", "fn", "fs1", "fs2", "yaw", "roll",
    "file", "img_offset", "map_offset",
)


class DataError(RuntimeError):
    """Missing or malformed dataset artifacts."""


def save_dataset(out_dir, ds: TwinDataset, assets: TwinAssets) -> Path:
    out = Path(out_dir)
    (out / "records").mkdir(parents=True, exist_ok=True)
    save_mesh(out / "mesh.imsh", assets.mesh)
    save_image(out / "reference.iimg", ds.reference)
    save_image(out / "skeleton.iimg", ds.skeleton_image)
    save_assignment(out / "assignment.iasn", assets.assignment)
    rows = ["\t".join(MANIFEST_COLUMNS)]
    for s in ds.samples:
        rec = out / "records" / f"{s.index:05d}.bin"
        with open(rec, "wb") as f:
            img_offset = f.tell()
            write_image(f, SensorImage(pixels=s.raw, kind="raw"))
            if s.force_map is not None:
                map_offset = f.tell()
                write_forcemap(f, ForceMap(s.force_map))
            else:
                map_offset = -1
        rows.append(
            "\t".join(
                str(v)
                for v in (
                    s.index, s.loc_id, s.node,
                    f"{s.contact_point[0]:.9g}", f"{s.contact_point[1]:.9g}", f"{s.contact_point[2]:.9g}",
                    f"{s.depth:.9g}",
                    f"{s.force_global[0]:.9g}", f"{s.force_global[1]:.9g}", f"{s.force_global[2]:.9g}",
                    f"{s.force_local[0]:.9g}", f"{s.force_local[1]:.9g}", f"{s.force_local[2]:.9g}",
                    f"{s.yaw:.9g}", f"{s.roll:.9g}",
                    f"records/{s.index:05d}.bin", img_offset, map_offset,
                )
            )
        )
    (out / "manifest.tsv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    write_hashes(out)
    return out


def load_dataset(path) -> tuple[TwinDataset, "np.ndarray | None"]:
    """Read a dataset directory back; returns (dataset, mesh)."""
    root = Path(path)
    manifest = root / "manifest.tsv"
    if not manifest.exists():
        raise DataError(f"no manifest.tsv under {root}")
    reference = load_image(root / "reference.iimg")
    skeleton = load_image(root / "skeleton.iimg")
    samples = []
    lines = manifest.read_text(encoding="utf-8").strip().splitlines()
    header = lines[0].split("\t")
    if tuple(header) != MANIFEST_COLUMNS:
        raise DataError("manifest columns do not match the expected schema")
    kind = "probe"
    for line in lines[1:]:
        parts = line.split("\t")
        row = dict(zip(MANIFEST_COLUMNS, parts))
        rec = root / row["file"]
        if not rec.exists():
            raise DataError(f"missing record file {rec}")
        with open(rec, "rb") as f:
            f.seek(int(row["img_offset"]))
            img = read_image(f)
            map_offset = int(row["map_offset"])
            if map_offset >= 0:
                f.seek(map_offset)
                fmap = read_forcemap(f).nodal_forces
            else:
                fmap = None
                kind = "posture"
        samples.append(
            Sample(
                index=int(row["id"]),
                loc_id=int(row["loc_id"]),
                node=int(row["node"]),
                contact_point=np.array([float(row["cx"]), float(row["cy"]), float(row["cz"])]),
                depth=float(row["depth"]),
                force_global=np.array([float(row["fgx"]), float(row["fgy"]), float(row["fgz"])]),
                force_local=np.array([float(row["fn"]), float(row["fs1"]), float(row["fs2"])]),
                yaw=float(row["yaw"]),
                roll=float(row["roll"]),
                raw=img.pixels,
                force_map=fmap,
            )
        )
    ds = TwinDataset(kind=kind, samples=samples, reference=reference, skeleton_image=skeleton)
    mesh = load_mesh(root / "mesh.imsh") if (root / "mesh.imsh").exists() else None
    return ds, mesh


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_hashes(run_dir) -> Path:
    """Record the SHA-256 of every artifact in a run directory."""
    root = Path(run_dir)
    rows = []
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name != "hashes.tsv":
            rows.append(f"{p.relative_to(root)}\t{file_sha256(p)}")
    out = root / "hashes.tsv"
    out.write_text("\n".join(rows) + "\n", encoding="utf-8")
    return out


def dataset_hash(path) -> str:
    """Single digest over the manifest and all record files."""
    root = Path(path)
    h = hashlib.sha256()
    h.update((root / "manifest.tsv").read_bytes())
    for rec in sorted((root / "records").glob("*.bin")):
        h.update(rec.read_bytes())
    return h.hexdigest()
