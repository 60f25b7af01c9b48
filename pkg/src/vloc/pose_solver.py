"""Absolute pose from 2D-3D correspondences: P3P + RANSAC + Gauss-Newton.

The minimal solver follows Grunert's classical formulation: the three
law-of-cosines constraints between the camera-to-point distances reduce
to a quartic in the distance ratio s3/s1.  Each real root is polished
with a few Newton steps on the distance system and turned into a pose
by absolute orientation, so returned candidates reproject the three
input points to well below 1e-6 px.

RANSAC draws its samples from a splitmix64 stream (indices by rejection
sampling), which makes every run reproducible from the 64-bit seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (DegenerateConfigurationError, NoModelFoundError,
                     TooFewCorrespondencesError)
from .geometry import Intrinsics, Pose, exp_so3, orthonormalize
from .matching import Correspondence2D3D
from .rng import SplitMix64

_RESIDUAL_TOL = 1e-6  # px; P3P candidates must reproject this well


@dataclass
class RansacParams:
    max_iterations: int = 10000
    inlier_threshold: float = 3.0   # px
    confidence: float = 0.999
    seed: int = 0

    def __post_init__(self):
        if self.inlier_threshold <= 0:
            raise ValueError("inlier threshold must be positive")
        if not 0 < self.confidence < 1:
            raise ValueError("confidence must be in (0, 1)")


@dataclass
class PoseEstimate:
    pose: Pose
    inliers: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    num_correspondences: int = 0
    mean_reprojection_error: float = float("inf")
    stage: str = "coarse"            # "coarse" | "refined"
    status: str = "ok"               # "ok" | "failed"
    reason: str = ""

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    @property
    def num_inliers(self) -> int:
        return int(len(self.inliers))


def reprojection_errors(pose: Pose, pixels: np.ndarray, world: np.ndarray,
                        k: Intrinsics):
    """Per-point pixel error and camera depth under a pose."""
    pc = world @ pose.rotation.T + pose.translation
    z = pc[:, 2]
    safe = np.where(z > 1e-12, z, 1.0)
    px = k.fx * pc[:, 0] / safe + k.cx
    py = k.fy * pc[:, 1] / safe + k.cy
    err = np.hypot(px - pixels[:, 0], py - pixels[:, 1])
    err = np.where(z > 1e-12, err, np.inf)
    return err, z


def _absolute_orientation(world: np.ndarray, cam: np.ndarray) -> Pose:
    """Rigid transform with cam_i = R @ world_i + t (Kabsch)."""
    cw = world.mean(axis=0)
    cc = cam.mean(axis=0)
    h = (world - cw).T @ (cam - cc)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return Pose(r, cc - r @ cw)


def _polish_distances(s: np.ndarray, cos_ab, cos_ac, cos_bc,
                      d_ab2, d_ac2, d_bc2) -> np.ndarray:
    """Newton iterations on the three law-of-cosines residuals."""
    for _ in range(6):
        s1, s2, s3 = s
        f = np.array([
            s1 * s1 + s2 * s2 - 2 * s1 * s2 * cos_ab - d_ab2,
            s1 * s1 + s3 * s3 - 2 * s1 * s3 * cos_ac - d_ac2,
            s2 * s2 + s3 * s3 - 2 * s2 * s3 * cos_bc - d_bc2,
        ])
        j = np.array([
            [2 * s1 - 2 * s2 * cos_ab, 2 * s2 - 2 * s1 * cos_ab, 0.0],
            [2 * s1 - 2 * s3 * cos_ac, 0.0, 2 * s3 - 2 * s1 * cos_ac],
            [0.0, 2 * s2 - 2 * s3 * cos_bc, 2 * s3 - 2 * s2 * cos_bc],
        ])
        try:
            step = np.linalg.solve(j, -f)
        except np.linalg.LinAlgError:
            break
        s = s + step
        if np.abs(step).max() < 1e-14:
            break
    return s


def p3p(correspondences: list[Correspondence2D3D],
        k: Intrinsics) -> list[Pose]:
    """Up to 4 poses fitting exactly 3 correspondences.

    Raises DegenerateConfigurationError for collinear world points
    (triangle area <= 1e-9 m^2).
    """
    if len(correspondences) != 3:
        raise ValueError("p3p needs exactly 3 correspondences")
    world = np.stack([c.world for c in correspondences]).astype(np.float64)
    pixels = np.stack([c.pixel for c in correspondences]).astype(np.float64)

    area = 0.5 * np.linalg.norm(np.cross(world[1] - world[0],
                                         world[2] - world[0]))
    if area <= 1e-9:
        raise DegenerateConfigurationError(f"triangle area {area:.3g} m^2")

    rays = np.stack([(pixels[:, 0] - k.cx) / k.fx,
                     (pixels[:, 1] - k.cy) / k.fy,
                     np.ones(3)], axis=1)
    rays /= np.linalg.norm(rays, axis=1, keepdims=True)
    for i in range(3):
        if rays[i] @ rays[(i + 1) % 3] > 1.0 - 1e-12:
            raise DegenerateConfigurationError("two viewing rays coincide")

    # Distances between world points and cosines between viewing rays.
    # Naming: points 1,2,3; u = s2/s1, v = s3/s1.
    a2 = float(((world[1] - world[2]) ** 2).sum())   # opposite point 1
    b2 = float(((world[0] - world[2]) ** 2).sum())   # opposite point 2
    c2 = float(((world[0] - world[1]) ** 2).sum())   # opposite point 3
    cos_bc = float(rays[1] @ rays[2])  # alpha
    cos_ac = float(rays[0] @ rays[2])  # beta
    cos_ab = float(rays[0] @ rays[1])  # gamma

    # u eliminated via the difference of the two constraint quadrics:
    # u = N(v) / D(v) with N quadratic, D linear (ascending coeffs).
    poly = np.polynomial.polynomial
    n_poly = np.array([a2 + b2 - c2, -2.0 * (a2 - c2) * cos_ac, a2 - b2 - c2])
    d_poly = np.array([2.0 * b2 * cos_ab, -2.0 * b2 * cos_bc])

    # Substitute into  b2*u^2 - 2 b2 cos_ab u + (b2 - c2 + 2 c2 cos_ac v
    # - c2 v^2) = 0  and clear D(v)^2 to get a quartic in v.
    q_poly = np.array([b2 - c2, 2.0 * c2 * cos_ac, -c2])
    quartic = poly.polyadd(
        poly.polyadd(b2 * poly.polymul(n_poly, n_poly),
                     -2.0 * b2 * cos_ab * poly.polymul(n_poly, d_poly)),
        poly.polymul(poly.polymul(d_poly, d_poly), q_poly))

    roots = poly.polyroots(quartic)
    poses: list[Pose] = []
    for root in roots:
        if abs(root.imag) > 1e-6:
            continue
        v = float(root.real)
        if v <= 0:
            continue
        denom = 2.0 * b2 * (cos_ab - v * cos_bc)
        if abs(denom) < 1e-12:
            continue
        u = ((a2 - b2 - c2) * v * v - 2.0 * (a2 - c2) * cos_ac * v
             + (a2 + b2 - c2)) / denom
        if u <= 0:
            continue
        denom2 = 1.0 + v * v - 2.0 * v * cos_ac
        if denom2 <= 1e-12:
            continue
        s1_sq = b2 / denom2
        s1 = math.sqrt(s1_sq)
        s = _polish_distances(np.array([s1, u * s1, v * s1]),
                              cos_ab, cos_ac, cos_bc, c2, b2, a2)
        if (s <= 0).any() or not np.isfinite(s).all():
            continue
        cam = rays * s[:, None]
        pose = _absolute_orientation(world, cam)
        err, _ = reprojection_errors(pose, pixels, world, k)
        if err.max() < _RESIDUAL_TOL:
            # Drop duplicates from repeated quartic roots.
            if not any(np.allclose(pose.matrix(), p.matrix(), atol=1e-9)
                       for p in poses):
                poses.append(pose)
    return poses


def refine_gn(initial: Pose, correspondences: list[Correspondence2D3D],
              k: Intrinsics, max_iters: int = 50) -> Pose:
    """Levenberg-damped Gauss-Newton on the reprojection cost.

    The local parameterization is a left-multiplied se(3) increment:
    R <- exp(w)R, t <- exp(w)t + tau.  Accepted steps never increase
    the cost; the loop stops once the step norm drops below 1e-10.
    """
    world = np.stack([c.world for c in correspondences]).astype(np.float64)
    pixels = np.stack([c.pixel for c in correspondences]).astype(np.float64)
    rot = initial.rotation.copy()
    t = initial.translation.copy()
    lam = 1e-6

    def cost(r, tt):
        pc = world @ r.T + tt
        z = np.maximum(pc[:, 2], 1e-12)
        px = k.fx * pc[:, 0] / z + k.cx
        py = k.fy * pc[:, 1] / z + k.cy
        res = np.stack([px - pixels[:, 0], py - pixels[:, 1]], axis=1)
        return res, pc, float((res ** 2).sum())

    res, pc, best_cost = cost(rot, t)
    for _ in range(max_iters):
        z = np.maximum(pc[:, 2], 1e-12)
        # d(pixel)/d(camera point)
        du = np.stack([k.fx / z, np.zeros_like(z), -k.fx * pc[:, 0] / z ** 2],
                      axis=1)
        dv = np.stack([np.zeros_like(z), k.fy / z, -k.fy * pc[:, 1] / z ** 2],
                      axis=1)
        # d(camera point)/d(w, tau): [-[p]x | I]
        n = len(world)
        jac = np.zeros((2 * n, 6))
        px_skew = np.zeros((n, 3, 3))
        px_skew[:, 0, 1] = -pc[:, 2]
        px_skew[:, 0, 2] = pc[:, 1]
        px_skew[:, 1, 0] = pc[:, 2]
        px_skew[:, 1, 2] = -pc[:, 0]
        px_skew[:, 2, 0] = -pc[:, 1]
        px_skew[:, 2, 1] = pc[:, 0]
        jac[0::2, :3] = -np.einsum("ni,nij->nj", du, px_skew)
        jac[1::2, :3] = -np.einsum("ni,nij->nj", dv, px_skew)
        jac[0::2, 3:] = du
        jac[1::2, 3:] = dv

        g = jac.T @ res.reshape(-1)
        h = jac.T @ jac
        stepped = False
        for _attempt in range(8):
            try:
                delta = np.linalg.solve(h + lam * np.eye(6), -g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            r_new = orthonormalize(exp_so3(delta[:3]) @ rot)
            t_new = exp_so3(delta[:3]) @ t + delta[3:]
            res_new, pc_new, cost_new = cost(r_new, t_new)
            if cost_new <= best_cost:
                rot, t = r_new, t_new
                res, pc, best_cost = res_new, pc_new, cost_new
                lam = max(lam * 0.3, 1e-12)
                stepped = True
                break
            lam *= 10.0
        if not stepped or np.linalg.norm(delta) < 1e-10:
            break
    return Pose(rot, t)


def ransac_pnp(correspondences: list[Correspondence2D3D], k: Intrinsics,
               params: RansacParams | None = None) -> PoseEstimate:
    """Robust pose from pooled correspondences.

    Scores candidates by inlier count (cheirality-checked), breaks ties
    by mean inlier residual, stops early at the adaptive confidence
    bound, and polishes the winner with Gauss-Newton on its inliers.
    """
    params = params or RansacParams()
    n = len(correspondences)
    if n < 4:
        raise TooFewCorrespondencesError(f"{n} < 4 correspondences")
    world = np.stack([c.world for c in correspondences]).astype(np.float64)
    pixels = np.stack([c.pixel for c in correspondences]).astype(np.float64)

    rng = SplitMix64(params.seed)
    best_inliers = np.zeros(0, np.int64)
    best_pose = None
    best_mean = np.inf
    bound = params.max_iterations
    it = 0
    while it < min(bound, params.max_iterations):
        it += 1
        idx = rng.sample_distinct(n, 3)
        try:
            candidates = p3p([correspondences[i] for i in idx], k)
        except DegenerateConfigurationError:
            continue
        for cand in candidates:
            err, z = reprojection_errors(cand, pixels, world, k)
            ok = (err <= params.inlier_threshold) & (z > 1e-9)
            cnt = int(ok.sum())
            if cnt < 4:
                continue
            mean_err = float(err[ok].mean())
            if cnt > len(best_inliers) or (cnt == len(best_inliers)
                                           and mean_err < best_mean):
                best_inliers = np.nonzero(ok)[0]
                best_pose = cand
                best_mean = mean_err
                w = cnt / n
                if w >= 1.0:
                    bound = it
                else:
                    denom = math.log(max(1.0 - w ** 3, 1e-15))
                    bound = min(params.max_iterations,
                                math.ceil(math.log(1.0 - params.confidence)
                                          / denom))
    if best_pose is None:
        raise NoModelFoundError("no candidate reached 4 inliers")

    polished = refine_gn(best_pose,
                         [correspondences[i] for i in best_inliers], k)
    err, z = reprojection_errors(polished, pixels, world, k)
    ok = (err <= params.inlier_threshold) & (z > 1e-9)
    if int(ok.sum()) >= len(best_inliers):
        final_pose = polished
        final_inliers = np.nonzero(ok)[0]
        final_mean = float(err[ok].mean())
    else:
        final_pose, final_inliers, final_mean = best_pose, best_inliers, best_mean
    return PoseEstimate(final_pose, final_inliers, n, final_mean)
