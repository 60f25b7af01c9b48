"""Rendering of virtual viewpoints by projection from real keyframes.

A virtual view never has a captured image.  Its input bundle is built
by backprojecting every valid-depth pixel of a few source keyframes to
3D and forward-projecting into the target camera: a z-buffer resolves
occlusion (smallest depth wins, ties by source order then raster
order), and a candidate survives only if its target depth agrees with
the z-buffer within tau_occ.  Source keypoints and stride-8 descriptor
cells travel the same way, so the view carries local features with
exact 3D attachments and a sparse descriptor grid, zero-padded where
nothing projects.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import fileio
from .errors import EmptyMaskError, MissingStudentError, NoSourcesError
from .features import (GRID_STRIDE, LocalFeatureSet, combined_global,
                       gem_pool, grid_cell_centers)
from .geometry import Intrinsics, Pose, backproject_many, project_many
from .scene_db import SceneDatabase

DEFAULT_TAU_OCC = 0.05  # m


@dataclass
class ProjectedKeypoint:
    source_id: str
    kp_index: int
    pixel: np.ndarray       # (2,) target-image position
    world: np.ndarray       # (3,)
    descriptor: np.ndarray  # (d,) float32
    score: float
    depth: float            # target-camera z


@dataclass
class ProjectedView:
    pose: Pose
    intrinsics: Intrinsics
    color_grid: np.ndarray       # (H, W, 3) uint8, zeros where empty
    feature_grid: np.ndarray     # (H/8, W/8, d) float32, zeros where empty
    zbuffer: np.ndarray          # (H, W) float64, +inf where empty
    projected_keypoints: list[ProjectedKeypoint]
    mask: np.ndarray             # (H/8, W/8) bool
    source_ids: list[str]

    def coverage(self) -> float:
        return float(np.isfinite(self.zbuffer).mean())


@dataclass
class VirtualFeatures:
    """Features of a virtual view; every keypoint knows its 3D point."""

    global_desc: np.ndarray
    local: LocalFeatureSet
    world_points: np.ndarray     # (N, 3)
    renderer_tag: str            # "deterministic" | "distilled"


def _candidates_from_source(kf, target_pose: Pose, target_k: Intrinsics,
                            pixels: np.ndarray, depths: np.ndarray):
    """Project source samples into the target; returns surviving rows.

    Output: (target int pixel (N,2), target depth (N,), world (N,3),
    subpixel target position (N,2), keep mask into the input rows).
    """
    world = backproject_many(kf.intrinsics, kf.pose, pixels, depths)
    tpix, tz, in_front = project_many(target_k, target_pose, world)
    ix = np.rint(np.where(in_front, tpix[:, 0], -1)).astype(np.int64)
    iy = np.rint(np.where(in_front, tpix[:, 1], -1)).astype(np.int64)
    keep = (in_front & (ix >= 0) & (ix < target_k.width)
            & (iy >= 0) & (iy < target_k.height))
    return (np.stack([ix, iy], axis=1)[keep], tz[keep], world[keep],
            tpix[keep], keep)


def render_projection(db: SceneDatabase, target_pose: Pose,
                      target_k: Intrinsics, sources: list[str],
                      tau_occ: float = DEFAULT_TAU_OCC) -> ProjectedView:
    """Build the projection bundle for a target viewpoint.

    A disjoint target simply comes back all-zero (validity() reports it
    invalid); only an empty source list is an error.
    """
    if not sources:
        raise NoSourcesError("render_projection needs at least one source id")
    kfs = [db[sid] for sid in sources]

    h, w = target_k.height, target_k.width
    gh, gw = h // GRID_STRIDE, w // GRID_STRIDE
    dim = kfs[0].descriptor_grid().shape[-1]

    color = np.zeros((h, w, 3), np.uint8)
    zbuf = np.full((h, w), np.inf)
    fgrid = np.zeros((gh, gw, dim), np.float32)
    mask = np.zeros((gh, gw), bool)

    # Depth ties resolve by ascending source id, then raster order.
    id_rank = {sid: r for r, sid in enumerate(sorted(set(sources)))}

    # Pass 1: dense pixels -> z-buffer + color.
    all_pix, all_depth, all_src, all_color = [], [], [], []
    for kf in kfs:
        vy, vx = np.nonzero(kf.depth > 0)
        pix = np.stack([vx, vy], axis=1).astype(np.float64)
        dep = kf.depth[vy, vx].astype(np.float64)
        tpix_i, tz, world, _, keep = _candidates_from_source(
            kf, target_pose, target_k, pix, dep)
        all_pix.append(tpix_i)
        all_depth.append(tz)
        all_src.append(np.full(len(tz), id_rank[kf.id]))
        all_color.append(kf.image[vy, vx][keep])

    if all_pix and sum(len(a) for a in all_pix):
        pix = np.concatenate(all_pix)
        dep = np.concatenate(all_depth)
        src = np.concatenate(all_src)
        col = np.concatenate(all_color)
        flat = pix[:, 1] * w + pix[:, 0]
        # Winner per pixel: smallest depth, then source order, then the
        # candidate's position in its source's raster order.
        order = np.lexsort((np.arange(len(flat)), src, dep))
        flat_sorted = flat[order]
        uniq, first = np.unique(flat_sorted, return_index=True)
        winners = order[first]
        zbuf.ravel()[uniq] = dep[winners]
        color.reshape(-1, 3)[uniq] = col[winners]

    # Pass 2: keypoints, occlusion-tested against the z-buffer.
    projected: list[ProjectedKeypoint] = []
    for kf in kfs:
        lf = kf.local_features
        if lf is None or len(lf) == 0:
            continue
        kx = lf.keypoints[:, 0].astype(np.float64)
        ky = lf.keypoints[:, 1].astype(np.float64)
        sx = np.clip(np.rint(kx).astype(np.int64), 0, kf.intrinsics.width - 1)
        sy = np.clip(np.rint(ky).astype(np.int64), 0, kf.intrinsics.height - 1)
        dep = kf.depth[sy, sx].astype(np.float64)
        valid = dep > 0
        idx = np.nonzero(valid)[0]
        if len(idx) == 0:
            continue
        tpix_i, tz, world, tpix, keep = _candidates_from_source(
            kf, target_pose, target_k,
            np.stack([kx[idx], ky[idx]], axis=1), dep[idx])
        kept_idx = idx[keep]
        zb = zbuf[tpix_i[:, 1], tpix_i[:, 0]]
        # Occluded iff something else sits in front; an empty z-buffer
        # cell (splat hole) cannot occlude anything.
        ok = tz <= zb + tau_occ
        for j in np.nonzero(ok)[0]:
            i = int(kept_idx[j])
            projected.append(ProjectedKeypoint(
                kf.id, i, tpix[j], world[j], lf.descriptors[i],
                float(lf.scores[i]), float(tz[j])))

    # Adjacent sources project the same physical corners to nearly the
    # same spot; keeping all copies would sabotage ratio-test matching
    # (nearest and second-nearest become twins).  Keep the nearest-depth
    # copy per 2 px neighbourhood, deterministically.
    projected.sort(key=lambda kp: (kp.depth, id_rank[kp.source_id], kp.kp_index))
    kept: list[ProjectedKeypoint] = []
    for kp in projected:
        if all((kp.pixel[0] - other.pixel[0]) ** 2
               + (kp.pixel[1] - other.pixel[1]) ** 2 > 4.0 for other in kept):
            kept.append(kp)
    projected = kept

    # Pass 3: stride-8 descriptor cells, winner-take-all per target cell.
    # Sources iterate in id order so strict < keeps the smaller id on ties.
    cell_best = np.full((gh, gw), np.inf)
    for kf in sorted(kfs, key=lambda f: f.id):
        grid = kf.descriptor_grid()
        centers = grid_cell_centers(kf.intrinsics.height, kf.intrinsics.width)
        dep = kf.depth[centers[:, 1], centers[:, 0]].astype(np.float64)
        valid = dep > 0
        idx = np.nonzero(valid)[0]
        if len(idx) == 0:
            continue
        tpix_i, tz, _, _, keep = _candidates_from_source(
            kf, target_pose, target_k, centers[idx].astype(np.float64), dep[idx])
        kept_idx = idx[keep]
        zb = zbuf[tpix_i[:, 1], tpix_i[:, 0]]
        ok = tz <= zb + tau_occ
        sgh = kf.intrinsics.height // GRID_STRIDE
        sgw = kf.intrinsics.width // GRID_STRIDE
        for j in np.nonzero(ok)[0]:
            ci, cj = tpix_i[j, 1] // GRID_STRIDE, tpix_i[j, 0] // GRID_STRIDE
            if tz[j] < cell_best[ci, cj]:
                cell_best[ci, cj] = tz[j]
                si, sj = divmod(int(kept_idx[j]), sgw)
                fgrid[ci, cj] = grid[si, sj]
                mask[ci, cj] = True

    return ProjectedView(target_pose, target_k, color, fgrid, zbuf,
                         projected, mask, list(sources))


def validity(view: ProjectedView, min_coverage: float = 0.2,
             min_keypoints: int = 50) -> tuple[bool, float]:
    cov = view.coverage()
    return (cov >= min_coverage
            and len(view.projected_keypoints) >= min_keypoints), cov


def cell_color_means(view: ProjectedView) -> np.ndarray:
    """Mean RGB in [0, 1] per stride-8 cell over projected pixels only.

    Averaging over splat holes would darken the statistics relative to
    a real image of the same content, so holes are left out; cells with
    no projected pixel come out zero.
    """
    h, w, _ = view.color_grid.shape
    gh, gw = h // GRID_STRIDE, w // GRID_STRIDE
    c = view.color_grid[:gh * GRID_STRIDE, :gw * GRID_STRIDE].astype(np.float64)
    valid = np.isfinite(view.zbuffer[:gh * GRID_STRIDE, :gw * GRID_STRIDE])
    c = c.reshape(gh, GRID_STRIDE, gw, GRID_STRIDE, 3)
    v = valid.reshape(gh, GRID_STRIDE, gw, GRID_STRIDE, 1)
    sums = (c * v).sum(axis=(1, 3))
    counts = np.maximum(v.sum(axis=(1, 3)), 1)
    return sums / counts / 255.0


def global_student_input(view: ProjectedView, p: float = 3.0) -> np.ndarray:
    """GeM-pooled descriptor + color statistics over populated cells."""
    if not view.mask.any():
        raise EmptyMaskError("virtual view has no populated feature cells")
    feats = view.feature_grid[view.mask].astype(np.float64)
    colors = cell_color_means(view)[view.mask]
    return np.concatenate([gem_pool(feats, p=p, normalize=False),
                           gem_pool(colors, p=p, normalize=False)])


def local_student_inputs(view: ProjectedView):
    """Per populated cell: its descriptor plus its color statistics.

    Returns (inputs (M, d+3), cell row indices, cell col indices).
    """
    if not view.mask.any():
        raise EmptyMaskError("virtual view has no populated feature cells")
    ci, cj = np.nonzero(view.mask)
    feats = view.feature_grid[ci, cj].astype(np.float64)
    colors = cell_color_means(view)[ci, cj]
    return np.concatenate([feats, colors], axis=1), ci, cj


def _interpolate_cells(cell_map: np.ndarray, pixels: np.ndarray) -> np.ndarray:
    """Bilinear lookup of a (gh, gw, d) map at image pixel positions.

    Cell (i, j) is anchored at pixel (8j+4, 8i+4); lookups clamp to the
    map border.
    """
    gh, gw, _ = cell_map.shape
    gx = np.clip((pixels[:, 0] - GRID_STRIDE // 2) / GRID_STRIDE, 0, gw - 1)
    gy = np.clip((pixels[:, 1] - GRID_STRIDE // 2) / GRID_STRIDE, 0, gh - 1)
    x0 = np.floor(gx).astype(np.int64)
    y0 = np.floor(gy).astype(np.int64)
    x1 = np.minimum(x0 + 1, gw - 1)
    y1 = np.minimum(y0 + 1, gh - 1)
    fx = (gx - x0)[:, None]
    fy = (gy - y0)[:, None]
    return (cell_map[y0, x0] * (1 - fx) * (1 - fy)
            + cell_map[y0, x1] * fx * (1 - fy)
            + cell_map[y1, x0] * (1 - fx) * fy
            + cell_map[y1, x1] * fx * fy)


def render_features(view: ProjectedView, mode: str = "deterministic",
                    student=None, p: float = 3.0) -> VirtualFeatures:
    """Turn a ProjectedView into retrieval/matching features.

    deterministic: GeM over the populated feature-grid cells for the
    global vector; projected keypoints keep their projected descriptors.
    distilled: the student revises both, but keypoint positions are
    still the projected ones, with descriptors sampled from the revised
    cell map at those positions.
    """
    if not view.mask.any():
        raise EmptyMaskError("virtual view has no populated feature cells")
    kps = view.projected_keypoints
    positions = (np.stack([kp.pixel for kp in kps]).astype(np.float32)
                 if kps else np.zeros((0, 2), np.float32))
    scores = np.array([kp.score for kp in kps], np.float32)
    world = (np.stack([kp.world for kp in kps])
             if kps else np.zeros((0, 3)))

    if mode == "deterministic":
        g = combined_global(view.feature_grid[view.mask].astype(np.float64),
                            cell_color_means(view)[view.mask], p=p)
        desc = (np.stack([kp.descriptor for kp in kps]).astype(np.float64)
                if kps else np.zeros((0, view.feature_grid.shape[-1])))
    elif mode == "distilled":
        if student is None:
            raise MissingStudentError("distilled rendering needs a student")
        g = student.global_from_view(view)
        n = np.linalg.norm(g)
        g = (g / n if n > 0 else g).astype(np.float32)
        cell_map = student.local_map(view)
        desc = _interpolate_cells(cell_map, positions.astype(np.float64))
        # Cells without projected content interpolate toward zero; fall
        # back to the projected descriptor there.
        weak = np.linalg.norm(desc, axis=1) < 1e-6
        for i in np.nonzero(weak)[0]:
            desc[i] = kps[i].descriptor
    else:
        raise ValueError(f"unknown feature mode {mode!r}")

    if len(desc):
        norms = np.linalg.norm(desc, axis=1, keepdims=True)
        desc = np.divide(desc, norms, out=np.zeros_like(desc),
                         where=norms > 1e-12)
    local = LocalFeatureSet(positions, scores, desc.astype(np.float32))
    return VirtualFeatures(g, local, world, mode)


def dump_debug(view: ProjectedView, directory) -> None:
    """Optional inspection dump: PPM color, f32 z-buffer, keypoint CSV."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    fileio.write_ppm(out / "color.ppm", view.color_grid)
    zb = np.where(np.isfinite(view.zbuffer), view.zbuffer, 0.0)
    fileio.write_f32_grid(out / "zbuffer.f32", zb.astype(np.float32))
    with open(out / "keypoints.csv", "w") as fh:
        fh.write("source_id,kp_index,x,y,X,Y,Z\n")
        for kp in view.projected_keypoints:
            fh.write(f"{kp.source_id},{kp.kp_index},"
                     f"{kp.pixel[0]:.4f},{kp.pixel[1]:.4f},"
                     f"{kp.world[0]:.6f},{kp.world[1]:.6f},{kp.world[2]:.6f}\n")
