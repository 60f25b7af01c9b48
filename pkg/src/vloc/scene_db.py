"""Persistent store of posed RGB-D keyframes and their features.

On-disk layout, one directory per scene:

  manifest.json     format_version, scene metadata, shared intrinsics,
                    keyframe table (id, pose string, file names) and a
                    CRC32 per data file
  images/<id>.ppm   binary P6
  depth/<id>.f32    little-endian float32 z-depth, 0 = invalid
  features/<id>.feat  see features module (written once computed)

The database is immutable after build/load; concurrent readers are
fine, ingestion is single-writer.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import fileio
from .errors import (ChecksumMismatchError, DimensionMismatchError,
                     EmptyDatabaseError, FormatVersionMismatchError)
from .features import (LocalFeatureSet, descriptor_grid, extract_local,
                       image_global_descriptor, load_feat, save_feat)
from .geometry import Intrinsics, Pose, pose_error, pose_from_string, pose_to_string

FORMAT_VERSION = 1


@dataclass
class Keyframe:
    """Posed RGB-D frame; features are populated lazily."""

    id: str
    image: np.ndarray      # (H, W, 3) uint8
    depth: np.ndarray      # (H, W) float32, 0 where invalid
    pose: Pose
    intrinsics: Intrinsics
    local_features: LocalFeatureSet | None = None
    global_feature: np.ndarray | None = None
    _desc_grid: np.ndarray | None = None

    def descriptor_grid(self) -> np.ndarray:
        """Dense stride-8 descriptor field, computed on first use."""
        if self._desc_grid is None:
            self._desc_grid = descriptor_grid(self.image)
        return self._desc_grid


@dataclass
class SceneDatabase:
    keyframes: list[Keyframe] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.keyframes)

    def __getitem__(self, kf_id: str) -> Keyframe:
        for kf in self.keyframes:
            if kf.id == kf_id:
                return kf
        raise KeyError(kf_id)

    def ids(self) -> list[str]:
        return [kf.id for kf in self.keyframes]


def ingest_keyframe(db: SceneDatabase, image, depth, pose: Pose,
                    intrinsics: Intrinsics) -> str:
    image = np.asarray(image, dtype=np.uint8)
    depth = np.asarray(depth, dtype=np.float32)
    if image.shape[:2] != depth.shape:
        raise DimensionMismatchError(
            f"image {image.shape[:2]} vs depth {depth.shape}")
    if (image.shape[0], image.shape[1]) != (intrinsics.height, intrinsics.width):
        raise DimensionMismatchError("image does not match intrinsics size")
    if (depth < 0).any():
        raise DimensionMismatchError("negative depth values")
    kf_id = f"kf{len(db.keyframes):04d}"
    db.keyframes.append(Keyframe(kf_id, image, depth, pose, intrinsics))
    return kf_id


def nearest_keyframes(db: SceneDatabase, target: Pose, k: int,
                      rotation_weight: float = 0.0,
                      exclude: set[str] | frozenset[str] = frozenset()) -> list[str]:
    """Ids of the k keyframes closest to `target` by camera center.

    With rotation_weight > 0 the angular distance in radians is added
    to the metric.  Ties break by ascending id.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if not db.keyframes:
        raise EmptyDatabaseError("no keyframes")
    scored = []
    for kf in db.keyframes:
        if kf.id in exclude:
            continue
        d = float(np.linalg.norm(kf.pose.camera_center - target.camera_center))
        if rotation_weight > 0.0:
            d += rotation_weight * np.radians(pose_error(kf.pose, target).rotation_error)
        scored.append((d, kf.id))
    scored.sort()
    return [kf_id for _, kf_id in scored[:k]]


def compute_features(db: SceneDatabase, max_keypoints: int = 1024,
                     gem_p: float = 3.0) -> None:
    """Fill in local and global features for every keyframe."""
    for kf in db.keyframes:
        if kf.local_features is None:
            kf.local_features = extract_local(kf.image, max_keypoints=max_keypoints)
        if kf.global_feature is None:
            kf.global_feature = image_global_descriptor(
                kf.image, p=gem_p, desc_grid=kf.descriptor_grid())


# -- persistence ----------------------------------------------------------

def save(db: SceneDatabase, path) -> None:
    root = Path(path)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "depth").mkdir(exist_ok=True)
    (root / "features").mkdir(exist_ok=True)

    table = []
    crcs: dict[str, int] = {}
    intrinsics = None
    for kf in db.keyframes:
        intrinsics = kf.intrinsics
        img_rel = f"images/{kf.id}.ppm"
        dep_rel = f"depth/{kf.id}.f32"
        fileio.write_ppm(root / img_rel, kf.image)
        fileio.write_f32_grid(root / dep_rel, kf.depth)
        crcs[img_rel] = fileio.file_crc32(root / img_rel)
        crcs[dep_rel] = fileio.file_crc32(root / dep_rel)
        entry = {"id": kf.id, "pose": pose_to_string(kf.pose),
                 "image": img_rel, "depth": dep_rel}
        if kf.local_features is not None and kf.global_feature is not None:
            feat_rel = f"features/{kf.id}.feat"
            save_feat(root / feat_rel, kf.local_features, kf.global_feature)
            crcs[feat_rel] = fileio.file_crc32(root / feat_rel)
            entry["features"] = feat_rel
        table.append(entry)

    manifest = {
        "format_version": FORMAT_VERSION,
        "metadata": db.metadata,
        "intrinsics": None if intrinsics is None else {
            "fx": intrinsics.fx, "fy": intrinsics.fy,
            "cx": intrinsics.cx, "cy": intrinsics.cy,
            "width": intrinsics.width, "height": intrinsics.height},
        "keyframes": table,
        "crc32": crcs,
    }
    with open(root / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load(path) -> SceneDatabase:
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise OSError(f"no manifest.json under {root}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise FormatVersionMismatchError(
            f"manifest declares version {version}, this reader supports {FORMAT_VERSION}")

    crcs = manifest.get("crc32", {})
    for rel, expected in crcs.items():
        target = root / rel
        if not target.is_file() or fileio.file_crc32(target) != expected:
            raise ChecksumMismatchError(f"CRC mismatch for {rel}")

    intr = manifest.get("intrinsics")
    intrinsics = Intrinsics(**intr) if intr else None
    db = SceneDatabase(metadata=manifest.get("metadata", {}))
    for entry in manifest["keyframes"]:
        image = fileio.read_ppm(root / entry["image"])
        depth = fileio.read_f32_grid(root / entry["depth"])
        kf = Keyframe(entry["id"], image, depth,
                      pose_from_string(entry["pose"]), intrinsics)
        if "features" in entry:
            kf.local_features, kf.global_feature = load_feat(root / entry["features"])
        db.keyframes.append(kf)
    return db
