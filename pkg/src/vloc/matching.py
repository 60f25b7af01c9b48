"""Mutual-nearest-neighbor descriptor matching and 2D-3D lifting."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyFeatureSetError
from .features import LocalFeatureSet
from .geometry import backproject_many
from .scene_db import Keyframe
from .virtual_view import VirtualFeatures

DEFAULT_RATIO = 0.8


@dataclass
class MatchSet:
    """One-to-one descriptor matches; pairs are (query idx, ref idx, dist)."""

    pairs: list[tuple[int, int, float]]
    reference_id: str = ""

    def __len__(self) -> int:
        return len(self.pairs)


@dataclass
class Correspondence2D3D:
    pixel: np.ndarray       # (2,) query image position
    world: np.ndarray       # (3,)
    reference_id: str = ""
    query_index: int = -1
    distance: float = 0.0   # descriptor distance of the source match


def match_descriptors(a: LocalFeatureSet, b: LocalFeatureSet,
                      ratio: float = DEFAULT_RATIO,
                      reference_id: str = "") -> MatchSet:
    """Mutual nearest neighbors passing Lowe's ratio test.

    A pair (i, j) is kept iff j is i's nearest neighbor in b, i is j's
    nearest in a, and dist(i, j) <= ratio * dist(i, second nearest).
    argmin resolves ties toward the lower index.
    """
    if len(a) == 0 or len(b) == 0:
        raise EmptyFeatureSetError("cannot match empty feature sets")
    da = a.descriptors.astype(np.float64)
    db = b.descriptors.astype(np.float64)
    dist = np.sqrt(np.maximum(
        (da * da).sum(1)[:, None] + (db * db).sum(1)[None, :]
        - 2.0 * (da @ db.T), 0.0))
    nn_ab = dist.argmin(axis=1)
    nn_ba = dist.argmin(axis=0)

    pairs = []
    for i in range(len(a)):
        j = int(nn_ab[i])
        if int(nn_ba[j]) != i:
            continue
        d1 = dist[i, j]
        if len(b) > 1:
            row = dist[i].copy()
            row[j] = np.inf
            d2 = row.min()
            if d1 > ratio * d2:
                continue
        pairs.append((i, j, float(d1)))
    return MatchSet(pairs, reference_id)


def lift_correspondences(matches: MatchSet,
                         reference: Keyframe | VirtualFeatures,
                         query_keypoints: np.ndarray) -> list[Correspondence2D3D]:
    """Attach a 3D world point to every match that has one.

    Keyframe references backproject through their depth map (invalid
    depth drops the match); virtual references carry exact world points
    from projection, so nothing is recomputed.
    """
    out: list[Correspondence2D3D] = []
    if isinstance(reference, VirtualFeatures):
        for qi, ri, dist in matches.pairs:
            world = reference.world_points[ri]
            if np.isfinite(world).all():
                out.append(Correspondence2D3D(
                    np.asarray(query_keypoints[qi], dtype=np.float64),
                    world, matches.reference_id, qi, dist))
        return out

    kf = reference
    lf = kf.local_features
    for qi, ri, dist in matches.pairs:
        x, y = lf.keypoints[ri]
        ix = int(np.clip(round(float(x)), 0, kf.intrinsics.width - 1))
        iy = int(np.clip(round(float(y)), 0, kf.intrinsics.height - 1))
        depth = float(kf.depth[iy, ix])
        if depth <= 0:
            continue
        world = backproject_many(kf.intrinsics, kf.pose,
                                 np.array([[float(x), float(y)]]),
                                 np.array([depth]))[0]
        out.append(Correspondence2D3D(
            np.asarray(query_keypoints[qi], dtype=np.float64),
            world, matches.reference_id, qi, dist))
    return out


def dump_matches_csv(path, correspondences: list[Correspondence2D3D],
                     distances: list[float] | None = None) -> None:
    with open(path, "w") as fh:
        fh.write("query_x,query_y,X,Y,Z,ref_id,distance\n")
        for i, c in enumerate(correspondences):
            d = distances[i] if distances else 0.0
            fh.write(f"{c.pixel[0]:.4f},{c.pixel[1]:.4f},"
                     f"{c.world[0]:.6f},{c.world[1]:.6f},{c.world[2]:.6f},"
                     f"{c.reference_id},{d:.6f}\n")
