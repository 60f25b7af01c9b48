"""Procedural indoor scenes with exact ray-cast ground truth.

A scene is a closed axis-aligned room plus a few boxes, every face a
textured rectangle.  Textures are seeded multi-scale value noise with
painted rectangles on top, which gives the corner detector plenty to
work with while keeping depth analytically exact.

The same pinhole model as the geometry module is used for rendering:
the ray of pixel (x, y) has camera-frame direction
((x-cx)/fx, (y-cy)/fy, 1), so the ray parameter t equals the z-depth.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import InvalidParamsError
from .geometry import Intrinsics, Pose, look_pose, project_many
from .rng import hash_unit_floats
from .scene_db import SceneDatabase, ingest_keyframe

_EPS_T = 1e-9
_NOISE_OCTAVES = ((0.5, 0.55), (0.25, 0.30), (0.125, 0.15))  # (spacing m, amplitude)
_AMBIENT = 0.45
_LIGHT = np.array([0.30, 0.45, 0.84])  # direction toward the light
_LIGHT_DIR = _LIGHT / np.linalg.norm(_LIGHT)


@dataclass
class SceneParams:
    room: tuple[float, float, float] = (10.0, 10.0, 3.0)
    num_db: int = 50
    num_queries: int = 20
    overlap: str = "high"            # "high" | "low"
    width: int = 128
    height: int = 96
    focal: float = 110.0
    num_boxes: int = 3
    texture_rects: int = 45          # painted rectangles per 30 m^2 of surface
    rect_size: tuple[float, float] = (0.18, 0.8)   # painted rect side, m
    low_max_overlap: float = 0.40
    high_min_overlap: float = 0.50
    overlap_samples: int = 1000


def low_benchmark_params(num_db: int = 50, num_queries: int = 40,
                         width: int = 128, height: int = 96) -> SceneParams:
    """Scene parameters used for the low-overlap benchmark runs.

    A narrow field of view plus sparse wall coverage keeps the best
    database view of every query below 40% frustum overlap while the
    union of views still covers the content.
    """
    return SceneParams(room=(16.0, 16.0, 3.0), num_db=num_db,
                       num_queries=num_queries, overlap="low",
                       width=width, height=height, focal=170.0 * width / 128,
                       num_boxes=2, texture_rects=140,
                       rect_size=(0.15, 0.55))


@dataclass
class _Rect:
    """Axis-aligned textured rectangle, visible from its normal side."""

    axis: int            # normal axis
    coord: float
    sign: float          # normal = sign * e_axis
    u_axis: int
    v_axis: int
    u_range: tuple[float, float]
    v_range: tuple[float, float]
    tex_id: int

    @property
    def normal(self) -> np.ndarray:
        n = np.zeros(3)
        n[self.axis] = self.sign
        return n


@dataclass
class _Texture:
    noise_seed: int
    rects: np.ndarray    # (K, 4) u0, v0, u1, v1
    colors: np.ndarray   # (K, 3) in [0, 1]
    stripe_angle: float = 0.0     # rad, direction of the stripe family
    stripe_period: float = 0.0    # m, 0 disables stripes
    stripe_color: np.ndarray | None = None
    tint: np.ndarray | None = None  # per-surface base color


@dataclass
class QueryView:
    id: str
    image: np.ndarray
    depth: np.ndarray
    pose: Pose
    intrinsics: Intrinsics
    best_overlap: float


@dataclass
class SyntheticScene:
    seed: int
    params: SceneParams
    database: SceneDatabase
    queries: list[QueryView]
    rects: list[_Rect] = field(default_factory=list, repr=False)
    textures: list[_Texture] = field(default_factory=list, repr=False)

    def render(self, pose: Pose, intrinsics: Intrinsics | None = None):
        k = intrinsics or self.database.keyframes[0].intrinsics
        return render_view(self.rects, self.textures, pose, k)

    def first_hit(self, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        return first_hit_t(self.rects, origin, dirs)

    def point_visible_from(self, center: np.ndarray, points: np.ndarray,
                           rel_tol: float = 1e-6) -> np.ndarray:
        """True where no scene surface blocks the segment center->point."""
        dirs = points - center[None, :]
        t = first_hit_t(self.rects, center, dirs)
        return t >= 1.0 - rel_tol


# -- ray casting ----------------------------------------------------------

def _intersect_rect(rect: _Rect, origin: np.ndarray, dirs: np.ndarray):
    """Ray parameter t per direction, +inf where the rect is missed."""
    d_axis = dirs[:, rect.axis]
    facing = rect.sign * d_axis < 0
    denom = np.where(np.abs(d_axis) > 1e-15, d_axis, 1.0)
    t = (rect.coord - origin[rect.axis]) / denom
    u = origin[rect.u_axis] + t * dirs[:, rect.u_axis]
    v = origin[rect.v_axis] + t * dirs[:, rect.v_axis]
    ok = (facing & (np.abs(d_axis) > 1e-15) & (t > _EPS_T)
          & (u >= rect.u_range[0]) & (u <= rect.u_range[1])
          & (v >= rect.v_range[0]) & (v <= rect.v_range[1]))
    return np.where(ok, t, np.inf)


def first_hit_t(rects: list[_Rect], origin: np.ndarray,
                dirs: np.ndarray) -> np.ndarray:
    origin = np.asarray(origin, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    best = np.full(len(dirs), np.inf)
    for rect in rects:
        best = np.minimum(best, _intersect_rect(rect, origin, dirs))
    return best


def _cast_all(rects, origin, dirs):
    best = np.full(len(dirs), np.inf)
    idx = np.full(len(dirs), -1, dtype=np.int64)
    for i, rect in enumerate(rects):
        t = _intersect_rect(rect, origin, dirs)
        closer = t < best
        best = np.where(closer, t, best)
        idx = np.where(closer, i, idx)
    return best, idx


def _value_noise(seed: int, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Multi-octave bilinear value noise in [0, 1]."""
    out = np.zeros_like(u)
    for octave, (spacing, amp) in enumerate(_NOISE_OCTAVES):
        su, sv = u / spacing, v / spacing
        iu, iv = np.floor(su).astype(np.int64), np.floor(sv).astype(np.int64)
        fu, fv = su - iu, sv - iv
        fu = fu * fu * (3.0 - 2.0 * fu)
        fv = fv * fv * (3.0 - 2.0 * fv)
        oseed = seed * 131 + octave
        n00 = hash_unit_floats(oseed, iu, iv)
        n10 = hash_unit_floats(oseed, iu + 1, iv)
        n01 = hash_unit_floats(oseed, iu, iv + 1)
        n11 = hash_unit_floats(oseed, iu + 1, iv + 1)
        val = (n00 * (1 - fu) * (1 - fv) + n10 * fu * (1 - fv)
               + n01 * (1 - fu) * fv + n11 * fu * fv)
        out += amp * val
    return out


def _texture_albedo(tex: _Texture, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    rgb = np.empty((len(u), 3))
    base = tex.tint if tex.tint is not None else np.ones(3)
    # The base tint drifts every ~2.2 m along the surface, so pooled
    # color statistics encode which part of the surface is in view,
    # the way real rooms vary locally.
    seg = np.floor(u / 2.2).astype(np.int64)
    for ch in range(3):
        seg_tint = 0.35 + 0.65 * hash_unit_floats(
            tex.noise_seed * 7 + 1000 + ch, seg)
        tint = 0.5 * base[ch] + 0.5 * seg_tint
        rgb[:, ch] = tint * (0.30 + 0.70
                             * _value_noise(tex.noise_seed * 3 + ch, u, v))
    luma = rgb.mean(axis=1)
    if tex.stripe_period > 0:
        # Stripe families whose angle changes per ~2.2 m segment: the
        # dominant gradient orientation becomes a strong location code
        # in pooled descriptor statistics, strong enough to survive
        # whitening, while rectangle corners keep matching unambiguous.
        seg_angle = math.pi * hash_unit_floats(tex.noise_seed * 13 + 7, seg)
        phase = (u * np.cos(seg_angle)
                 + v * np.sin(seg_angle)) / tex.stripe_period
        frac = phase - np.floor(phase)
        on = frac < 0.30
        rgb[on] = tex.stripe_color[None, :] * (0.55 + 0.6 * luma[on, None])
    for (u0, v0, u1, v1), color in zip(tex.rects, tex.colors):
        inside = (u >= u0) & (u < u1) & (v >= v0) & (v < v1)
        # Painted patches keep the underlying noise as shading so their
        # interiors stay textured while the borders give sharp corners.
        rgb[inside] = color[None, :] * (0.55 + 0.6 * luma[inside, None])
    return np.clip(rgb, 0.0, 1.0)


def render_view(rects, textures, pose: Pose, k: Intrinsics):
    """Ray-cast an (image uint8, depth float64) pair; depth 0 on miss."""
    xs = np.arange(k.width, dtype=np.float64)
    ys = np.arange(k.height, dtype=np.float64)
    px, py = np.meshgrid(xs, ys)
    dirs_cam = np.stack([(px.ravel() - k.cx) / k.fx,
                         (py.ravel() - k.cy) / k.fy,
                         np.ones(px.size)], axis=1)
    dirs_world = dirs_cam @ pose.rotation
    center = pose.camera_center

    t, idx = _cast_all(rects, center, dirs_world)
    image = np.zeros((px.size, 3))
    for i, rect in enumerate(rects):
        mask = idx == i
        if not mask.any():
            continue
        hit = center[None, :] + t[mask, None] * dirs_world[mask]
        albedo = _texture_albedo(textures[rect.tex_id],
                                 hit[:, rect.u_axis], hit[:, rect.v_axis])
        shade = _AMBIENT + (1 - _AMBIENT) * max(0.0, float(rect.normal @ _LIGHT_DIR))
        image[mask] = albedo * shade
    image = (np.clip(image, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    depth = np.where(np.isfinite(t), t, 0.0)
    return (image.reshape(k.height, k.width, 3),
            depth.reshape(k.height, k.width))


# -- scene construction ---------------------------------------------------

def _room_rects(w: float, d: float, h: float) -> list[_Rect]:
    return [
        _Rect(2, 0.0, +1, 0, 1, (0, w), (0, d), 0),   # floor
        _Rect(2, h, -1, 0, 1, (0, w), (0, d), 1),     # ceiling
        _Rect(0, 0.0, +1, 1, 2, (0, d), (0, h), 2),   # wall x=0
        _Rect(0, w, -1, 1, 2, (0, d), (0, h), 3),     # wall x=w
        _Rect(1, 0.0, +1, 0, 2, (0, w), (0, h), 4),   # wall y=0
        _Rect(1, d, -1, 0, 2, (0, w), (0, h), 5),     # wall y=d
    ]


def box_rects(lo, hi, tex_start: int) -> list[_Rect]:
    """Outward faces of an axis-aligned box (bottom face omitted)."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    rects = []
    tex = tex_start
    for axis in range(3):
        ua, va = (axis + 1) % 3, (axis + 2) % 3
        for coord, sign in ((lo[axis], -1), (hi[axis], +1)):
            if axis == 2 and sign == -1:
                continue  # resting on the floor
            rects.append(_Rect(axis, float(coord), sign, ua, va,
                               (float(lo[ua]), float(hi[ua])),
                               (float(lo[va]), float(hi[va])), tex))
            tex += 1
    return rects


def _make_textures(surfaces: list[_Rect], rng: np.random.Generator, seed: int,
                   rect_density: float,
                   rect_size: tuple[float, float] = (0.18, 0.8)) -> list[_Texture]:
    """One texture per surface; painted patches cover its (u, v) span."""
    textures = []
    for t, surf in enumerate(surfaces):
        u_lo, u_hi = surf.u_range
        v_lo, v_hi = surf.v_range
        area = (u_hi - u_lo) * (v_hi - v_lo)
        count = max(6, int(round(rect_density * area)))
        u0 = rng.uniform(u_lo - 0.3, u_hi, count)
        v0 = rng.uniform(v_lo - 0.3, v_hi, count)
        du = rng.uniform(rect_size[0], rect_size[1], count)
        dv = rng.uniform(rect_size[0], rect_size[1], count)
        rects = np.stack([u0, v0, u0 + du, v0 + dv], axis=1)
        colors = rng.uniform(0.05, 0.95, (count, 3))
        textures.append(_Texture(seed * 1009 + t, rects, colors,
                                 stripe_angle=rng.uniform(0, math.pi),
                                 stripe_period=rng.uniform(0.55, 1.1),
                                 stripe_color=rng.uniform(0.05, 0.95, 3),
                                 tint=0.35 + 0.65 * rng.uniform(0, 1, 3)))
    return textures


def frustum_overlap(scene_rects, query_pose: Pose, query_depth: np.ndarray,
                    query_k: Intrinsics, ref_pose: Pose, ref_k: Intrinsics,
                    samples: int = 1000, seed: int = 0) -> float:
    """Fraction of sampled query pixels visible in the reference view.

    Visibility is occlusion-checked by casting a ray from the reference
    camera toward each backprojected query point.
    """
    rng = np.random.default_rng(seed)
    valid_y, valid_x = np.nonzero(query_depth > 0)
    if len(valid_y) == 0:
        return 0.0
    pick = rng.integers(0, len(valid_y), size=samples)
    xs, ys = valid_x[pick], valid_y[pick]
    d = query_depth[ys, xs].astype(np.float64)
    pc = np.stack([(xs - query_k.cx) / query_k.fx * d,
                   (ys - query_k.cy) / query_k.fy * d, d], axis=1)
    points = (pc - query_pose.translation) @ query_pose.rotation

    pixels, _, in_front = project_many(ref_k, ref_pose, points)
    inside = (in_front & (pixels[:, 0] >= 0) & (pixels[:, 0] <= ref_k.width - 1)
              & (pixels[:, 1] >= 0) & (pixels[:, 1] <= ref_k.height - 1))
    if not inside.any():
        return 0.0
    center = ref_pose.camera_center
    dirs = points[inside] - center[None, :]
    t = first_hit_t(scene_rects, center, dirs)
    visible = t >= 1.0 - 1e-6
    return float(visible.sum()) / samples


def _best_overlap(scene: "SyntheticScene", pose: Pose, depth: np.ndarray,
                  k: Intrinsics, samples: int, seed: int) -> float:
    """Exact best frustum overlap against all database views.

    The in-frustum fraction bounds the visible fraction from above, so
    expensive occlusion casts only run while the bound beats the best
    exact value found so far.
    """
    rng = np.random.default_rng(seed)
    valid_y, valid_x = np.nonzero(depth > 0)
    pick = rng.integers(0, len(valid_y), size=samples)
    xs, ys = valid_x[pick], valid_y[pick]
    d = depth[ys, xs].astype(np.float64)
    pc = np.stack([(xs - k.cx) / k.fx * d, (ys - k.cy) / k.fy * d, d], axis=1)
    points = (pc - pose.translation) @ pose.rotation

    bounds = []
    for kf in scene.database.keyframes:
        pixels, _, in_front = project_many(kf.intrinsics, kf.pose, points)
        inside = (in_front & (pixels[:, 0] >= 0)
                  & (pixels[:, 0] <= kf.intrinsics.width - 1)
                  & (pixels[:, 1] >= 0)
                  & (pixels[:, 1] <= kf.intrinsics.height - 1))
        bounds.append((float(inside.sum()) / samples, kf, inside))
    bounds.sort(key=lambda b: -b[0])

    best = 0.0
    for bound, kf, inside in bounds:
        if bound <= best:
            break
        center = kf.pose.camera_center
        dirs = points[inside] - center[None, :]
        t = first_hit_t(scene.rects, center, dirs)
        best = max(best, float((t >= 1.0 - 1e-6).sum()) / samples)
    return best


def generate_scene(seed: int, params: SceneParams | None = None) -> SyntheticScene:
    """Deterministically build a scene, its database and its queries."""
    params = params or SceneParams()
    w, d, h = params.room
    if w < 4.0 or d < 4.0 or h < 2.5:
        raise InvalidParamsError("room must be at least 4 x 4 x 2.5 m")
    if params.overlap not in ("high", "low"):
        raise InvalidParamsError(f"unknown overlap regime {params.overlap!r}")

    rng = np.random.default_rng(seed)
    rects = _room_rects(w, d, h)

    if params.overlap == "low":
        # A full-height central pillar blocks cross-room visibility, so
        # a view can only overlap views working the same wall.
        px, py = w / 2.0, d / 2.0
        hx, hy = w / 8.0, d / 8.0
        rects.extend(box_rects((px - hx, py - hy, 0.0),
                               (px + hx, py + hy, h),
                               max(r.tex_id for r in rects) + 1))
        box_anchors = [(0.25, 0.08), (0.92, 0.72)]
        # Furniture boxes spaced along every wall, about 1.5 m in front
        # of it: their faces give queries off-plane points, which keeps
        # pose solving well conditioned, and they occlude wall texture.
        for wall in range(4):
            span = d if wall % 2 == 0 else w
            for li in np.arange(2.8, span - 2.8, 2.6):
                lat = li + rng.uniform(-0.4, 0.4)
                t = 1.5 + rng.uniform(-0.2, 0.2)
                cx_, cy_ = {0: (w - t, lat), 1: (lat, d - t),
                            2: (t, lat), 3: (lat, t)}[wall]
                half = rng.uniform(0.18, 0.32, size=2)
                height = rng.uniform(0.9, 1.3)
                rects.extend(box_rects(
                    (cx_ - half[0], cy_ - half[1], 0.0),
                    (cx_ + half[0], cy_ + half[1], height),
                    max(r.tex_id for r in rects) + 1))
    else:
        box_anchors = [(0.14, 0.32), (0.86, 0.68), (0.52, 0.12), (0.48, 0.88)]

    # Small boxes sit close to the walls, outside every camera band, so
    # they occlude wall texture without swallowing a camera.
    for b in range(min(params.num_boxes, len(box_anchors))):
        ax, ay = box_anchors[b]
        cx = ax * w + rng.uniform(-0.15, 0.15)
        cy = ay * d + rng.uniform(-0.15, 0.15)
        half = rng.uniform(0.35, 0.6, size=2)
        height = rng.uniform(0.8, 1.4)
        lo = (cx - half[0], cy - half[1], 0.0)
        hi = (cx + half[0], cy + half[1], height)
        rects.extend(box_rects(lo, hi, max(r.tex_id for r in rects) + 1))

    surfaces = sorted(rects, key=lambda r: r.tex_id)
    textures = _make_textures(surfaces, rng, seed,
                              rect_density=params.texture_rects / 30.0,
                              rect_size=params.rect_size)

    k = Intrinsics(params.focal, params.focal, params.width / 2.0,
                   params.height / 2.0, params.width, params.height)

    scene = SyntheticScene(seed, params,
                           SceneDatabase(metadata={
                               "scene": f"synth-{seed}-{params.overlap}",
                               "seed": seed, "overlap": params.overlap}),
                           [], rects, textures)

    if params.overlap == "low":
        db_specs, query_spots = _low_layout(params, rng)
        for pos, yaw, pitch in db_specs:
            pose = look_pose(pos, yaw, pitch)
            image, depth = render_view(rects, textures, pose, k)
            ingest_keyframe(scene.database, image, depth.astype(np.float32),
                            pose, k)
    else:
        for i in range(params.num_db):
            pos = np.array([rng.uniform(0.3 * w, 0.7 * w),
                            rng.uniform(0.3 * d, 0.7 * d),
                            1.4 + rng.uniform(-0.15, 0.15)])
            yaw = math.radians(i * 360.0 / params.num_db + rng.uniform(-5, 5))
            pitch = math.radians(rng.uniform(-3, 3))
            pose = look_pose(pos, yaw, pitch)
            image, depth = render_view(rects, textures, pose, k)
            ingest_keyframe(scene.database, image, depth.astype(np.float32),
                            pose, k)

    for q in range(params.num_queries):
        accepted = None
        for attempt in range(200):
            if params.overlap == "low":
                spot_pos, spot_yaw = query_spots[(q + attempt) % len(query_spots)]
                pos = spot_pos + np.array([rng.uniform(-0.25, 0.25),
                                           rng.uniform(-0.25, 0.25),
                                           rng.uniform(-0.1, 0.1)])
                yaw = spot_yaw + math.radians(rng.uniform(-8, 8))
            else:
                anchor = scene.database.keyframes[q % params.num_db]
                pos = anchor.pose.camera_center + np.array(
                    [rng.uniform(-0.6, 0.6), rng.uniform(-0.6, 0.6),
                     rng.uniform(-0.1, 0.1)])
                pos[0] = np.clip(pos[0], 0.3 * w, 0.7 * w)
                pos[1] = np.clip(pos[1], 0.3 * d, 0.7 * d)
                yaw = math.radians(
                    math.degrees(math.atan2(anchor.pose.rotation[2, 1],
                                            anchor.pose.rotation[2, 0]))
                    + rng.uniform(-10, 10))
            pitch = math.radians(rng.uniform(-3, 3))
            pose = look_pose(pos, yaw, pitch)
            image, depth = render_view(rects, textures, pose, k)
            best = _best_overlap(scene, pose, depth, k,
                                 params.overlap_samples, seed * 977 + q)
            if params.overlap == "low":
                ok = 0.02 < best < params.low_max_overlap
            else:
                ok = best >= params.high_min_overlap
            if ok:
                accepted = (pose, image, depth, best)
                break
        if accepted is None:
            raise InvalidParamsError(
                f"could not place query {q} under the {params.overlap} regime")
        pose, image, depth, best = accepted
        scene.queries.append(QueryView(f"q{q:03d}", image,
                                       depth.astype(np.float32), pose, k, best))
    return scene


def _low_layout(params: SceneParams, rng: np.random.Generator):
    """Database poses and query spots for the low-overlap regime.

    Walls are tiled sparsely by level views so that adjacent coverage
    windows barely touch; queries sit over the coverage gaps, where no
    single view sees much of their content but the two flanking views
    together do.  Leftover database views pitch up or down at the
    wall/ceiling and wall/floor bands, which level queries never see;
    they act as retrieval distractors.
    """
    w, d, h = params.room
    # (outward yaw deg, lateral+distance -> position, lateral span)
    walls = [
        (0.0, lambda l, t: (w - t, l), d),       # +x wall
        (90.0, lambda l, t: (l, d - t), w),      # +y wall
        (180.0, lambda l, t: (t, l), d),         # -x wall
        (270.0, lambda l, t: (l, t), w),         # -y wall
    ]
    spacing = 2.6
    view_dist = 3.0
    specs: list[tuple[np.ndarray, float, float]] = []
    spots: list[tuple[np.ndarray, float]] = []
    for yaw_deg, place, span in walls:
        lo, hi = 2.2, span - 2.2
        count = max(2, int((hi - lo) / spacing) + 1)
        lateral = np.linspace(lo, hi, count)
        for li in lateral:
            x, y = place(li + rng.uniform(-0.15, 0.15),
                         view_dist + rng.uniform(-0.25, 0.25))
            pos = np.array([x, y, 1.4 + rng.uniform(-0.12, 0.12)])
            yaw = math.radians(yaw_deg + rng.uniform(-4, 4))
            pitch = math.radians(rng.uniform(-2, 2))
            specs.append((pos, yaw, pitch))
        for gi in range(count - 1):
            mid = 0.5 * (lateral[gi] + lateral[gi + 1])
            x, y = place(mid, view_dist - 0.2)
            spots.append((np.array([x, y, 1.45]), math.radians(yaw_deg)))

    # Pitched distractors fill up the requested database size.
    level_count = len(specs)
    for i in range(max(0, params.num_db - level_count)):
        yaw_deg, place, span = walls[i % 4]
        x, y = place(rng.uniform(2.2, span - 2.2),
                     view_dist + rng.uniform(-0.4, 0.4))
        pos = np.array([x, y, 1.4 + rng.uniform(-0.12, 0.12)])
        pitch = math.radians(24.0 + rng.uniform(-4, 4))
        if i % 2 == 1:
            pitch = -pitch
        specs.append((pos, math.radians(yaw_deg + rng.uniform(-15, 15)), pitch))
    if len(specs) > params.num_db:
        specs = specs[:params.num_db]
    return specs, spots
