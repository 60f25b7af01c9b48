"""Two-stage localization: offline view augmentation, online coarse
retrieval + PnP, and an optional virtual-view pose refinement.

Offline, the database is enriched with virtual views at manually
defined poses: every keyframe seeds 4 horizontally offset camera
centers, each spun through a ring of yaw steps.  Valid views (enough
coverage and keypoints) enter the retrieval index next to the real
keyframes, whitened jointly.

Online, a query retrieves its top-k entries, matches local features
against each, pools every lifted 2D-3D correspondence into one robust
solve, and can then re-render a virtual view at the coarse pose and
solve again; the refinement falls back to the coarse estimate rather
than ever reporting fewer inliers.
"""

from __future__ import annotations

import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyFeatureSetError, NoModelFoundError, NoSourcesError, \
    TooFewCorrespondencesError
from .features import LocalFeatureSet, extract_local, global_descriptor
from .geometry import (WORLD_UP, Pose, axis_angle_matrix, pose_error,
                       pose_to_string)
from .matching import Correspondence2D3D, lift_correspondences, match_descriptors
from .pose_solver import PoseEstimate, RansacParams, ransac_pnp
from .retrieval import (KIND_REAL, KIND_VIRTUAL, RetrievalIndex, build_index,
                        query_topk)
from .scene_db import SceneDatabase, nearest_keyframes
from .virtual_view import (VirtualFeatures, render_features,
                           render_projection, validity)

DEFAULT_OFFSETS = ("front", "back", "left", "right")


@dataclass
class AugmentationParams:
    offsets: tuple[str, ...] = DEFAULT_OFFSETS
    offset_distance: float = 2.5          # m
    yaw_steps: int = 12
    yaw_increment_deg: float = 30.0
    min_coverage: float = 0.2
    min_keypoints: int = 50
    tau_occ: float = 0.05
    num_sources: int = 4
    # Weight of angular distance (radians) when picking source views;
    # 0 selects purely by camera-center distance.  Orientation-aware
    # selection keeps sources pointed at what the virtual view sees.
    source_rotation_weight: float = 3.0

    def __post_init__(self):
        if self.yaw_steps * self.yaw_increment_deg > 360.0 + 1e-9:
            raise ValueError("yaw steps sweep past a full turn")
        if self.offset_distance < 0:
            raise ValueError("offset distance must be >= 0")


@dataclass
class PipelineConfig:
    retrieval_k: int = 10
    match_ratio: float = 0.8
    # References contributing fewer matches than this are skipped when
    # pooling correspondences; weak pairs are usually all spurious.
    min_matches_per_view: int = 0
    ransac: RansacParams = field(default_factory=RansacParams)
    gem_p: float = 3.0
    max_keypoints: int = 1024
    feature_mode: str = "deterministic"   # or "distilled"
    student: object | None = None
    refine: bool = True
    refine_iters: int = 1
    augmentation: AugmentationParams = field(default_factory=AugmentationParams)
    threads: int = 1


@dataclass
class LocalizationResult:
    query_id: str
    coarse: PoseEstimate
    refined: PoseEstimate | None
    retrieved: list[tuple[str, str]]      # (id, kind)
    timings_ms: dict[str, float] = field(default_factory=dict)

    @property
    def final(self) -> PoseEstimate:
        if self.refined is not None and self.refined.ok:
            return self.refined
        return self.coarse


_OFFSET_SIGNS = {"front": (1, 0), "back": (-1, 0), "left": (0, 1),
                 "right": (0, -1)}


def _horizontal_axes(pose: Pose) -> tuple[np.ndarray, np.ndarray]:
    """Unit forward/left directions of a camera, flattened to the floor."""
    forward = pose.rotation[2]            # camera z in world coords
    fh = forward - (forward @ WORLD_UP) * WORLD_UP
    if np.linalg.norm(fh) < 1e-6:
        # Camera looks straight up/down; fall back to its x axis.
        fh = pose.rotation[0] - (pose.rotation[0] @ WORLD_UP) * WORLD_UP
    fh = fh / np.linalg.norm(fh)
    left = np.cross(WORLD_UP, fh)
    return fh, left


def generate_augmentation_grid(db: SceneDatabase,
                               params: AugmentationParams) -> list[Pose]:
    """Virtual poses: per keyframe, horizontally offset centers with a
    ring of yaw steps each; near-duplicates collapse at (1 cm, 1 deg).
    """
    poses: list[Pose] = []
    for kf in db.keyframes:
        center = kf.pose.camera_center
        fh, left = _horizontal_axes(kf.pose)
        for name in params.offsets:
            f_sign, l_sign = _OFFSET_SIGNS[name]
            new_center = center + params.offset_distance * (
                f_sign * fh + l_sign * left)
            for step in range(params.yaw_steps):
                angle = math.radians(step * params.yaw_increment_deg)
                rot = kf.pose.rotation @ axis_angle_matrix(WORLD_UP, angle).T
                poses.append(Pose(rot, -rot @ new_center))

    deduped: list[Pose] = []
    for pose in poses:
        dup = False
        for kept in deduped:
            if np.linalg.norm(pose.camera_center - kept.camera_center) < 0.01:
                if pose_error(pose, kept).rotation_error < 1.0:
                    dup = True
                    break
        if not dup:
            deduped.append(pose)
    return deduped


@dataclass
class VirtualEntry:
    id: str
    pose: Pose
    features: VirtualFeatures


def benchmark_config(threads: int = 1) -> PipelineConfig:
    """Settings used for the low-overlap benchmark and ablation runs."""
    return PipelineConfig(
        retrieval_k=40, match_ratio=0.7, min_matches_per_view=8,
        augmentation=AugmentationParams(min_keypoints=15), threads=threads)


@dataclass
class PreparedScene:
    """Everything the online stage needs: db, index, virtual store."""

    db: SceneDatabase
    index: RetrievalIndex
    virtuals: dict[str, VirtualEntry]


def augment_database(db: SceneDatabase, grid: list[Pose],
                     config: PipelineConfig) -> PreparedScene:
    """Render the grid, keep valid views, build the joint index."""
    aug = config.augmentation
    k = db.keyframes[0].intrinsics

    def render_one(pose: Pose) -> VirtualFeatures | None:
        sources = nearest_keyframes(db, pose, aug.num_sources,
                                    rotation_weight=aug.source_rotation_weight)
        view = render_projection(db, pose, k, sources, tau_occ=aug.tau_occ)
        ok, _ = validity(view, aug.min_coverage, aug.min_keypoints)
        if not ok:
            return None
        return render_features(view, mode=config.feature_mode,
                               student=config.student, p=config.gem_p)

    if config.threads > 1 and len(grid) > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            rendered = list(pool.map(render_one, grid))
    else:
        rendered = [render_one(p) for p in grid]

    virtuals: dict[str, VirtualEntry] = {}
    virtual_rows = []
    for pose, feats in zip(grid, rendered):
        if feats is None:
            continue
        vid = f"virt{len(virtuals):04d}"
        virtuals[vid] = VirtualEntry(vid, pose, feats)
        virtual_rows.append((vid, pose, feats.global_desc))

    real_rows = [(kf.id, kf.pose, kf.global_feature) for kf in db.keyframes]
    index = build_index(real_rows, virtual_rows)
    return PreparedScene(db, index, virtuals)


def prepare_reals_only(db: SceneDatabase) -> PreparedScene:
    real_rows = [(kf.id, kf.pose, kf.global_feature) for kf in db.keyframes]
    return PreparedScene(db, build_index(real_rows, []), {})


def _pool_correspondences(query_local: LocalFeatureSet,
                          prepared: PreparedScene,
                          retrieved: list[tuple[str, float]],
                          ratio: float,
                          min_matches: int = 0) -> list[Correspondence2D3D]:
    pooled: list[Correspondence2D3D] = []
    for rid, _dist in retrieved:
        if rid in prepared.virtuals:
            ref_feats = prepared.virtuals[rid].features
            ref_local = ref_feats.local
            reference = ref_feats
        else:
            kf = prepared.db[rid]
            ref_local = kf.local_features
            reference = kf
        if ref_local is None or len(ref_local) == 0:
            continue
        try:
            matches = match_descriptors(query_local, ref_local, ratio, rid)
        except EmptyFeatureSetError:
            continue
        if len(matches) < min_matches:
            continue
        pooled.extend(lift_correspondences(matches, reference,
                                           query_local.keypoints))
    # One correspondence per query keypoint: overlapping references see
    # the same corners, and duplicates would concentrate solver weight
    # on the overlap regions.  Keep the most confident match.
    best: dict[int, Correspondence2D3D] = {}
    for c in pooled:
        prev = best.get(c.query_index)
        if prev is None or c.distance < prev.distance:
            best[c.query_index] = c
    return [best[qi] for qi in sorted(best)]


def localize_coarse(query_image: np.ndarray, prepared: PreparedScene,
                    config: PipelineConfig,
                    query_features: tuple[LocalFeatureSet, np.ndarray] | None = None,
                    seed: int | None = None):
    """Retrieval + pooled matching + RANSAC; the first stage.

    Returns (PoseEstimate, retrieved (id, kind) list, pooled count).
    """
    k = prepared.db.keyframes[0].intrinsics
    if query_features is None:
        local = extract_local(query_image, max_keypoints=config.max_keypoints)
        g = global_descriptor_of_image(query_image, config.gem_p)
    else:
        local, g = query_features

    retrieved = query_topk(prepared.index, g, config.retrieval_k)
    kinds = [(rid, KIND_VIRTUAL if rid in prepared.virtuals else KIND_REAL)
             for rid, _ in retrieved]
    pooled = _pool_correspondences(local, prepared, retrieved,
                                   config.match_ratio,
                                   config.min_matches_per_view)
    params = config.ransac if seed is None else RansacParams(
        config.ransac.max_iterations, config.ransac.inlier_threshold,
        config.ransac.confidence, seed)
    if len(pooled) < 4:
        est = PoseEstimate(Pose.identity(), status="failed",
                           reason="no_matches",
                           num_correspondences=len(pooled))
        return est, kinds, len(pooled)
    try:
        est = ransac_pnp(pooled, k, params)
    except (NoModelFoundError, TooFewCorrespondencesError) as exc:
        est = PoseEstimate(Pose.identity(), status="failed",
                           reason=type(exc).__name__,
                           num_correspondences=len(pooled))
    return est, kinds, len(pooled)


def global_descriptor_of_image(image: np.ndarray, p: float) -> np.ndarray:
    from .features import image_global_descriptor
    return image_global_descriptor(image, p=p)


def refine_with_virtual_view(query_local: LocalFeatureSet,
                             coarse: PoseEstimate, db: SceneDatabase,
                             config: PipelineConfig,
                             seed: int | None = None) -> PoseEstimate:
    """Re-localize against a virtual view rendered at the coarse pose.

    Only local features are produced for this view.  Falls back to the
    coarse estimate whenever the virtual view is unusable or the new
    solve does not reach the coarse inlier count.
    """
    if not coarse.ok:
        return coarse
    aug = config.augmentation
    k = db.keyframes[0].intrinsics
    try:
        sources = nearest_keyframes(db, coarse.pose, aug.num_sources,
                                    rotation_weight=aug.source_rotation_weight)
        view = render_projection(db, coarse.pose, k, sources,
                                 tau_occ=aug.tau_occ)
        ok, _ = validity(view, aug.min_coverage, aug.min_keypoints)
        if not ok:
            return coarse
        feats = render_features(view, mode=config.feature_mode,
                                student=config.student, p=config.gem_p)
        matches = match_descriptors(query_local, feats.local,
                                    config.match_ratio, "refine")
        pooled = lift_correspondences(matches, feats, query_local.keypoints)
        if len(pooled) < 4:
            return coarse
        params = config.ransac if seed is None else RansacParams(
            config.ransac.max_iterations, config.ransac.inlier_threshold,
            config.ransac.confidence, seed)
        est = ransac_pnp(pooled, k, params)
    except (NoSourcesError, NoModelFoundError, TooFewCorrespondencesError,
            EmptyFeatureSetError):
        return coarse
    if est.num_inliers < coarse.num_inliers:
        return coarse
    est.stage = "refined"
    return est


def localize(query_id: str, query_image: np.ndarray,
             prepared: PreparedScene, config: PipelineConfig,
             seed: int = 0) -> LocalizationResult:
    """Full per-query pipeline with timings; never raises per-query."""
    timings: dict[str, float] = {}
    t0 = time.perf_counter()
    local = extract_local(query_image, max_keypoints=config.max_keypoints)
    g = global_descriptor_of_image(query_image, config.gem_p)
    timings["features"] = (time.perf_counter() - t0) * 1000

    t0 = time.perf_counter()
    coarse, retrieved, _ = localize_coarse(query_image, prepared, config,
                                           query_features=(local, g),
                                           seed=seed)
    timings["coarse"] = (time.perf_counter() - t0) * 1000

    refined = None
    if config.refine and coarse.ok:
        t0 = time.perf_counter()
        refined = coarse
        for i in range(config.refine_iters):
            refined = refine_with_virtual_view(local, refined, prepared.db,
                                               config, seed=seed + 1 + i)
        timings["refine"] = (time.perf_counter() - t0) * 1000
    return LocalizationResult(query_id, coarse, refined, retrieved, timings)


def localize_batch(queries: list[tuple[str, np.ndarray]],
                   prepared: PreparedScene, config: PipelineConfig,
                   seed: int = 0) -> list[LocalizationResult]:
    """Order-preserving batch localization; per-query seeds derive from
    the base seed and the query position so thread count cannot change
    any result."""
    def run(item):
        i, (qid, image) = item
        return localize(qid, image, prepared, config, seed=seed + 1000 * i)

    items = list(enumerate(queries))
    if config.threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            return list(pool.map(run, items))
    return [run(it) for it in items]


# -- virtual feature store ---------------------------------------------------
#
# Single little-endian file holding every valid virtual view's pose,
# keypoints (with exact world points), descriptors and global vector,
# so `augment` and `localize` can run as separate processes.

_VIRT_MAGIC = b"VLVF"


def save_virtuals(path, virtuals: dict[str, VirtualEntry]) -> None:
    import struct

    with open(path, "wb") as fh:
        fh.write(_VIRT_MAGIC)
        fh.write(struct.pack("<I", len(virtuals)))
        for vid, entry in virtuals.items():
            feats = entry.features
            local = feats.local
            n = local.descriptors.shape[1] if len(local) else 128
            m = len(feats.global_desc)
            ident = vid.encode("utf-8")
            pose_txt = pose_to_string(entry.pose).encode("ascii")
            tag = feats.renderer_tag.encode("ascii")
            fh.write(struct.pack("<HHIIIB", len(ident), len(pose_txt),
                                 n, m, len(local), len(tag)))
            fh.write(ident)
            fh.write(pose_txt)
            fh.write(tag)
            fh.write(local.keypoints.astype("<f4").tobytes())
            fh.write(local.scores.astype("<f4").tobytes())
            fh.write(local.descriptors.astype("<f4").tobytes())
            fh.write(np.asarray(feats.world_points, dtype="<f8").tobytes())
            fh.write(feats.global_desc.astype("<f4").tobytes())


def load_virtuals(path) -> dict[str, VirtualEntry]:
    import struct
    from pathlib import Path

    from .geometry import pose_from_string

    data = Path(path).read_bytes()
    if data[:4] != _VIRT_MAGIC:
        raise ValueError(f"not a virtual feature store: {path}")
    (count,) = struct.unpack_from("<I", data, 4)
    pos = 8
    out: dict[str, VirtualEntry] = {}
    for _ in range(count):
        id_len, pose_len, n, m, num_kp, tag_len = struct.unpack_from(
            "<HHIIIB", data, pos)
        pos += 17
        vid = data[pos:pos + id_len].decode("utf-8")
        pos += id_len
        pose = pose_from_string(data[pos:pos + pose_len].decode("ascii"))
        pos += pose_len
        tag = data[pos:pos + tag_len].decode("ascii")
        pos += tag_len

        def take(dtype, count_, shape):
            nonlocal pos
            itemsize = np.dtype(dtype).itemsize
            arr = np.frombuffer(data, dtype=dtype, count=count_, offset=pos)
            pos += count_ * itemsize
            return arr.reshape(shape).copy()

        kps = take("<f4", num_kp * 2, (num_kp, 2))
        scores = take("<f4", num_kp, (num_kp,))
        desc = take("<f4", num_kp * n, (num_kp, n))
        world = take("<f8", num_kp * 3, (num_kp, 3))
        gvec = take("<f4", m, (m,))
        feats = VirtualFeatures(gvec, LocalFeatureSet(kps, scores, desc),
                                world, tag)
        out[vid] = VirtualEntry(vid, pose, feats)
    return out


# -- results file ----------------------------------------------------------

def result_record(res: LocalizationResult) -> dict:
    final = res.final
    return {
        "query_id": res.query_id,
        "status": final.status,
        "stage": final.stage,
        "pose": pose_to_string(final.pose),
        "num_inliers": final.num_inliers,
        "num_correspondences": final.num_correspondences,
        "mean_reprojection_error": (round(final.mean_reprojection_error, 6)
                                    if math.isfinite(final.mean_reprojection_error)
                                    else None),
        "retrieved": [{"id": rid, "kind": kind} for rid, kind in res.retrieved],
        "timings_ms": {k: round(v, 3) for k, v in res.timings_ms.items()},
    }


def write_results_jsonl(path, results: list[LocalizationResult]) -> None:
    with open(path, "w") as fh:
        for res in results:
            fh.write(json.dumps(result_record(res), sort_keys=True) + "\n")


def read_results_jsonl(path) -> list[dict]:
    records = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records
