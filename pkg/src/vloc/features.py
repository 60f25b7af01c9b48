"""Deterministic local features and GeM global descriptors.

Local features: Harris corners (k=0.04, Gaussian sigma=1.0, non-maximum
suppression radius 4 px, quadratic sub-pixel refinement) described by a
SIFT-like 4x4-cell, 8-bin gradient-orientation histogram over a 16x16
patch (128-d, L2-normalized with 0.2 clamping + renormalization).

Global descriptors: generalized-mean pooling of dense patch descriptors
computed on a stride-8 grid, optionally PCA-whitened.

Everything here is pure and deterministic; float32 is the storage dtype
so that on-disk roundtrips are bit-exact.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import EmptySetError, ImageTooSmallError, TooFewSamplesError

DESCRIPTOR_DIM = 128
GRID_STRIDE = 8
# The global vector pools the descriptor field and per-cell color
# statistics side by side, so both texture and color drive retrieval.
GLOBAL_DIM = DESCRIPTOR_DIM + 3
_PATCH = 16          # descriptor window side, pixels
_CELLS = 4           # histogram cells per side
_BINS = 8            # orientation bins
_CLAMP = 0.2         # SIFT-style magnitude clamp after normalization

_FEAT_MAGIC = b"VLFT"


@dataclass
class LocalFeatureSet:
    """Sub-pixel keypoints with scores and unit-norm descriptors."""

    keypoints: np.ndarray    # (N, 2) float32, (x, y)
    scores: np.ndarray       # (N,) float32
    descriptors: np.ndarray  # (N, d) float32

    def __len__(self) -> int:
        return len(self.keypoints)

    @classmethod
    def empty(cls, dim: int = DESCRIPTOR_DIM) -> "LocalFeatureSet":
        return cls(np.zeros((0, 2), np.float32), np.zeros(0, np.float32),
                   np.zeros((0, dim), np.float32))


@dataclass
class WhiteningTransform:
    """PCA whitening: x -> projection @ (x - mean)."""

    mean: np.ndarray        # (m,) float64
    projection: np.ndarray  # (m, m) float64

    def apply(self, v: np.ndarray) -> np.ndarray:
        arr = np.asarray(v, dtype=np.float64)
        return (arr - self.mean) @ self.projection.T


def to_gray(image: np.ndarray) -> np.ndarray:
    """uint8 RGB (or gray) image -> float64 luminance in [0, 1]."""
    img = np.asarray(image)
    if img.ndim == 3:
        g = (0.299 * img[..., 0] + 0.587 * img[..., 1] + 0.114 * img[..., 2])
    else:
        g = img.astype(np.float64)
    return g / 255.0


def _smoothed_gradients(gray: np.ndarray, sigma: float = 1.0):
    smooth = ndimage.gaussian_filter(gray, sigma, mode="nearest")
    gy, gx = np.gradient(smooth)
    return gx, gy


def harris_response(gray: np.ndarray, sigma: float = 1.0,
                    k: float = 0.04) -> np.ndarray:
    gx, gy = _smoothed_gradients(gray, sigma)
    ixx = ndimage.gaussian_filter(gx * gx, sigma, mode="nearest")
    iyy = ndimage.gaussian_filter(gy * gy, sigma, mode="nearest")
    ixy = ndimage.gaussian_filter(gx * gy, sigma, mode="nearest")
    return ixx * iyy - ixy * ixy - k * (ixx + iyy) ** 2


def _orientation_terms(gray: np.ndarray, sigma: float = 1.0):
    """Per-pixel soft orientation binning.

    Returns (bin_lo, w_lo, w_hi) where each pixel's gradient magnitude
    splits linearly between bins bin_lo and (bin_lo + 1) % 8.
    """
    gx, gy = _smoothed_gradients(gray, sigma)
    mag = np.hypot(gx, gy)
    ang = np.arctan2(gy, gx)                       # (-pi, pi]
    f = (ang + np.pi) / (2.0 * np.pi) * _BINS      # [0, 8]
    lo = np.floor(f).astype(np.int64) % _BINS
    frac = f - np.floor(f)
    return lo, (1.0 - frac) * mag, frac * mag


def _descriptors_at(bin_lo, w_lo, w_hi, centers: np.ndarray) -> np.ndarray:
    """128-d histograms for 16x16 windows around integer centers.

    The window of center c spans [c-8, c+8); inputs must already be
    padded by 8 on every side and `centers` expressed in padded coords.
    """
    n = len(centers)
    if n == 0:
        return np.zeros((0, DESCRIPTOR_DIM), np.float32)
    offs = np.arange(-_PATCH // 2, _PATCH // 2)
    rows = centers[:, 1][:, None, None] + offs[None, :, None]  # (n, 16, 1)
    cols = centers[:, 0][:, None, None] + offs[None, None, :]  # (n, 1, 16)
    lo = bin_lo[rows, cols]
    wl = w_lo[rows, cols]
    wh = w_hi[rows, cols]
    hi = (lo + 1) % _BINS
    hist = np.empty((n, _CELLS, _CELLS, _BINS))
    for b in range(_BINS):
        wb = np.where(lo == b, wl, 0.0) + np.where(hi == b, wh, 0.0)
        hist[..., b] = wb.reshape(n, _CELLS, 4, _CELLS, 4).sum(axis=(2, 4))
    desc = hist.reshape(n, DESCRIPTOR_DIM)
    norms = np.linalg.norm(desc, axis=1, keepdims=True)
    desc = np.divide(desc, norms, out=np.zeros_like(desc), where=norms > 1e-12)
    desc = np.minimum(desc, _CLAMP)
    norms = np.linalg.norm(desc, axis=1, keepdims=True)
    desc = np.divide(desc, norms, out=np.zeros_like(desc), where=norms > 1e-12)
    return desc.astype(np.float32)


def _pad8(arr: np.ndarray) -> np.ndarray:
    return np.pad(arr, _PATCH // 2, mode="edge")


def extract_local(image: np.ndarray, max_keypoints: int = 1024,
                  sigma: float = 1.0, k: float = 0.04,
                  nms_radius: int = 4,
                  rel_threshold: float = 2e-5) -> LocalFeatureSet:
    """Detect and describe up to max_keypoints Harris corners.

    Keypoints are sorted by descending score (ties in raster order) and
    kept at least 8 px away from the borders so the descriptor window
    stays inside the image.
    """
    img = np.asarray(image)
    if img.shape[0] < 32 or img.shape[1] < 32:
        raise ImageTooSmallError(f"image {img.shape[1]}x{img.shape[0]} < 32x32")
    gray = to_gray(img)
    h, w = gray.shape
    resp = harris_response(gray, sigma=sigma, k=k)

    size = 2 * nms_radius + 1
    is_max = resp == ndimage.maximum_filter(resp, size=size, mode="nearest")
    thresh = max(1e-12, rel_threshold * float(resp.max()))
    cand = is_max & (resp > thresh)
    margin = _PATCH // 2
    cand[:margin, :] = False
    cand[-margin:, :] = False
    cand[:, :margin] = False
    cand[:, -margin:] = False

    ys, xs = np.nonzero(cand)
    if len(ys) == 0:
        return LocalFeatureSet.empty()
    scores = resp[ys, xs]
    order = np.lexsort((xs, ys, -scores))[:max_keypoints]
    ys, xs, scores = ys[order], xs[order], scores[order]

    # Quadratic sub-pixel refinement on the response surface.
    dx = 0.5 * (resp[ys, xs + 1] - resp[ys, xs - 1])
    dy = 0.5 * (resp[ys + 1, xs] - resp[ys - 1, xs])
    dxx = resp[ys, xs + 1] - 2 * scores + resp[ys, xs - 1]
    dyy = resp[ys + 1, xs] - 2 * scores + resp[ys - 1, xs]
    dxy = 0.25 * (resp[ys + 1, xs + 1] - resp[ys + 1, xs - 1]
                  - resp[ys - 1, xs + 1] + resp[ys - 1, xs - 1])
    det = dxx * dyy - dxy * dxy
    ok = np.abs(det) > 1e-18
    off_x = np.where(ok, -(dyy * dx - dxy * dy) / np.where(ok, det, 1.0), 0.0)
    off_y = np.where(ok, -(dxx * dy - dxy * dx) / np.where(ok, det, 1.0), 0.0)
    off_x = np.clip(off_x, -0.5, 0.5)
    off_y = np.clip(off_y, -0.5, 0.5)

    bin_lo, w_lo, w_hi = _orientation_terms(gray, sigma)
    centers = np.stack([xs, ys], axis=1) + _PATCH // 2  # padded coords
    desc = _descriptors_at(_pad8(bin_lo), _pad8(w_lo), _pad8(w_hi), centers)

    keep = np.linalg.norm(desc, axis=1) > 0.5  # drop flat patches
    kps = np.stack([xs + off_x, ys + off_y], axis=1)[keep]
    return LocalFeatureSet(kps.astype(np.float32),
                           scores[keep].astype(np.float32), desc[keep])


def grid_cell_centers(height: int, width: int) -> np.ndarray:
    """Representative pixel per stride-8 cell, shape (H/8 * W/8, 2)."""
    gh, gw = height // GRID_STRIDE, width // GRID_STRIDE
    jj, ii = np.meshgrid(np.arange(gw), np.arange(gh))
    cx = jj * GRID_STRIDE + GRID_STRIDE // 2
    cy = ii * GRID_STRIDE + GRID_STRIDE // 2
    return np.stack([cx.ravel(), cy.ravel()], axis=1)


def descriptor_grid(image: np.ndarray, sigma: float = 1.0) -> np.ndarray:
    """Dense descriptor field on a stride-8 grid, (H/8, W/8, 128) float32."""
    gray = to_gray(image)
    h, w = gray.shape
    gh, gw = h // GRID_STRIDE, w // GRID_STRIDE
    bin_lo, w_lo, w_hi = _orientation_terms(gray, sigma)
    centers = grid_cell_centers(h, w) + _PATCH // 2
    desc = _descriptors_at(_pad8(bin_lo), _pad8(w_lo), _pad8(w_hi), centers)
    return desc.reshape(gh, gw, DESCRIPTOR_DIM)


def gem_pool(vectors: np.ndarray, p: float = 3.0,
             normalize: bool = True) -> np.ndarray:
    """Component-wise generalized mean ((1/N) sum v^p)^(1/p).

    Inputs must be non-negative (they are clipped defensively).  The
    computation factors out the per-component maximum so that large p
    does not underflow.
    """
    v = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
    if v.shape[0] == 0:
        raise EmptySetError("gem_pool needs at least one vector")
    if p < 1:
        raise ValueError("GeM exponent must be >= 1")
    v = np.maximum(v, 0.0)
    mx = v.max(axis=0)
    safe = np.where(mx > 0, mx, 1.0)
    pooled = safe * ((v / safe) ** p).mean(axis=0) ** (1.0 / p)
    pooled = np.where(mx > 0, pooled, 0.0)
    if normalize:
        n = np.linalg.norm(pooled)
        if n > 0:
            pooled = pooled / n
    return pooled


def global_descriptor(features, p: float = 3.0,
                      whitening: WhiteningTransform | None = None) -> np.ndarray:
    """GeM-pool local descriptors into one unit-norm global vector.

    `features` may be a LocalFeatureSet, a dense (gh, gw, d) grid, or a
    plain (N, d) array.  Components are rectified before pooling.
    """
    if isinstance(features, LocalFeatureSet):
        vecs = features.descriptors
    else:
        vecs = np.asarray(features)
        if vecs.ndim == 3:
            vecs = vecs.reshape(-1, vecs.shape[-1])
    if vecs.shape[0] == 0:
        raise EmptySetError("no descriptors to pool")
    g = gem_pool(vecs, p=p, normalize=True)
    if whitening is not None:
        g = whitening.apply(g)
        n = np.linalg.norm(g)
        if n > 0:
            g = g / n
    return g.astype(np.float32)


def cell_color_stats(image: np.ndarray) -> np.ndarray:
    """Mean RGB in [0, 1] per stride-8 cell, shape (H/8, W/8, 3)."""
    img = np.asarray(image, dtype=np.float64)
    gh, gw = img.shape[0] // GRID_STRIDE, img.shape[1] // GRID_STRIDE
    c = img[:gh * GRID_STRIDE, :gw * GRID_STRIDE]
    c = c.reshape(gh, GRID_STRIDE, gw, GRID_STRIDE, 3).mean(axis=(1, 3))
    return c / 255.0


def combined_global(desc_vectors: np.ndarray, color_vectors: np.ndarray,
                    p: float = 3.0,
                    whitening: WhiteningTransform | None = None) -> np.ndarray:
    """Unit-norm global vector from matched descriptor and color pools.

    Each modality is GeM-pooled and normalized on its own, then the two
    halves concatenate with equal weight; whitening applies at the end.
    """
    if len(desc_vectors) == 0:
        raise EmptySetError("no cells to pool")
    g = np.concatenate([gem_pool(desc_vectors, p=p, normalize=True),
                        gem_pool(color_vectors, p=p, normalize=True)])
    g /= np.linalg.norm(g)
    if whitening is not None:
        g = whitening.apply(g)
        n = np.linalg.norm(g)
        if n > 0:
            g = g / n
    return g.astype(np.float32)


def image_global_descriptor(image: np.ndarray, p: float = 3.0,
                            whitening: WhiteningTransform | None = None,
                            desc_grid: np.ndarray | None = None) -> np.ndarray:
    """Retrieval vector of a real image: descriptor field + cell colors."""
    grid = descriptor_grid(image) if desc_grid is None else desc_grid
    colors = cell_color_stats(image)
    return combined_global(grid.reshape(-1, grid.shape[-1]),
                           colors.reshape(-1, 3), p=p, whitening=whitening)


def fit_whitening(globals_: np.ndarray, eps: float = 1e-8) -> WhiteningTransform:
    """Fit PCA whitening on (N, m) sample vectors.

    Dimensions whose standard deviation does not exceed `eps` are
    treated as degenerate and mapped to zero; all others come out with
    unit variance on the fitted set.
    """
    x = np.asarray(globals_, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise TooFewSamplesError("whitening needs at least 2 samples")
    n, m = x.shape
    mean = x.mean(axis=0)
    centered = x - mean
    _, s, vt = np.linalg.svd(centered, full_matrices=True)
    std = np.zeros(m)
    std[:len(s)] = s / np.sqrt(n - 1)
    scale = np.where(std > eps, 1.0 / np.maximum(std, eps), 0.0)
    projection = scale[:, None] * vt
    return WhiteningTransform(mean, projection)


def apply_whitening(t: WhiteningTransform, v: np.ndarray) -> np.ndarray:
    return t.apply(v)


# -- .feat container -----------------------------------------------------
#
# Layout (little-endian): magic "VLFT", u32 n, u32 m, u32 num_kp, then
# per keypoint (f32 x, f32 y, f32 score, n x f32 descriptor), then the
# m x f32 global descriptor.  Externally computed features in the same
# container are accepted by load_feat unchanged.

def save_feat(path, local: LocalFeatureSet, global_vec: np.ndarray) -> None:
    n = local.descriptors.shape[1] if len(local) else DESCRIPTOR_DIM
    g = np.asarray(global_vec, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_FEAT_MAGIC)
        fh.write(struct.pack("<III", n, len(g), len(local)))
        if len(local):
            rec = np.concatenate(
                [local.keypoints.astype("<f4"),
                 local.scores.astype("<f4")[:, None],
                 local.descriptors.astype("<f4")], axis=1)
            fh.write(rec.tobytes())
        fh.write(g.tobytes())


def load_feat(path) -> tuple[LocalFeatureSet, np.ndarray]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _FEAT_MAGIC:
            raise ValueError(f"not a feature file: {path}")
        n, m, num_kp = struct.unpack("<III", fh.read(12))
        rec = np.frombuffer(fh.read(num_kp * (3 + n) * 4), dtype="<f4")
        rec = rec.reshape(num_kp, 3 + n)
        g = np.frombuffer(fh.read(m * 4), dtype="<f4").copy()
    local = LocalFeatureSet(rec[:, :2].copy(), rec[:, 2].copy(),
                            rec[:, 3:].copy())
    return local, g
