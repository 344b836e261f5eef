"""Triangulation of ring point clouds and hard / soft rasterization.

The soft rasterizer follows the silhouette-compositing scheme of soft
renderers: each triangle contributes a per-pixel occupancy probability
sigmoid(d / tau), where d is the signed Euclidean distance from the pixel
center to the triangle boundary (positive inside), and the pixel value is

    m(p) = 1 - prod_f (1 - sigmoid(d_f(p) / tau)).

The sigmoid is saturated to exactly 0 / 1 once |d| exceeds SUPPORT_SIGMAS
* tau, so pixel gradients vanish identically away from triangle
boundaries and far triangles can be skipped without changing the result.

Pixel centers sit at integer coordinates: the pixel at row r, column c
covers [c - 0.5, c + 0.5] x [r - 0.5, r + 0.5].
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import PointCloud, as_point_array

# Saturation half-width of the sigmoid in units of tau.  Beyond this the
# occupancy is exactly 0 or 1 and the gradient is exactly zero.
SUPPORT_SIGMAS = 6.0


@dataclass(frozen=True)
class FaceList:
    """Triangles over a ring cloud: (T - 2) index triples."""

    faces: np.ndarray  # (F, 3) int
    num_points: int

    def __post_init__(self):
        f = np.array(self.faces, dtype=int)
        if f.ndim != 2 or f.shape[1] != 3:
            raise ValueError("faces must be an (F, 3) index array")
        if f.shape[0] != self.num_points - 2:
            raise ValueError("a ring triangulation must have T - 2 faces")
        if f.min() < 0 or f.max() >= self.num_points:
            raise ValueError("face index out of range")
        f.setflags(write=False)
        object.__setattr__(self, "faces", f)


@dataclass(frozen=True)
class BinaryMask:
    """Hard segmentation mask; data is (H, W) bool, spacing in mm/pixel."""

    data: np.ndarray
    spacing_mm: float = 1.0

    def __post_init__(self):
        d = np.asarray(self.data)
        if d.ndim != 2:
            raise ValueError("mask data must be 2-D")
        if d.dtype != np.bool_:
            if not np.isin(d, (0, 1)).all():
                raise ValueError("binary mask values must be 0 or 1")
            d = d.astype(bool)
        else:
            d = d.copy()
        if not (np.isfinite(self.spacing_mm) and self.spacing_mm > 0):
            raise ValueError("spacing must be positive")
        d.setflags(write=False)
        object.__setattr__(self, "data", d)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class RasterMask:
    """Soft occupancy image; data is (H, W) float64 in [0, 1]."""

    data: np.ndarray
    spacing_mm: float = 1.0

    def __post_init__(self):
        d = np.array(self.data, dtype=float)
        if d.ndim != 2:
            raise ValueError("mask data must be 2-D")
        if not np.all(np.isfinite(d)):
            raise ValueError("raster mask has non-finite values")
        if not (np.isfinite(self.spacing_mm) and self.spacing_mm > 0):
            raise ValueError("spacing must be positive")
        d.setflags(write=False)
        object.__setattr__(self, "data", d)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def threshold(self, level: float = 0.5) -> BinaryMask:
        return BinaryMask(self.data >= level, self.spacing_mm)


@dataclass(frozen=True)
class RasterConfig:
    width: int
    height: int
    spacing_mm: float = 1.0
    tau: float = 0.5


def build_faces(num_points: int) -> FaceList:
    """Triangle strip over a two-chain ring cloud of T points.

    Strip 1 connects each inner edge to its corresponding outer point,
    strip 2 each outer edge to the next inner point:

        {i, i+1, T/2 + i}           for i = 0 .. T/2 - 2
        {T/2 + i, T/2 + i + 1, i+1} for i = 0 .. T/2 - 2

    which tiles the ring band with exactly T - 2 triangles.
    """
    t = num_points
    if t < 6 or t % 2 != 0:
        raise ValueError("T must be even and >= 6")
    half = t // 2
    strip1 = [(i, i + 1, half + i) for i in range(half - 1)]
    strip2 = [(half + i, half + i + 1, i + 1) for i in range(half - 1)]
    return FaceList(np.array(strip1 + strip2, dtype=int), t)


def _faces_array(faces, n_vertices: int) -> np.ndarray:
    f = faces.faces if isinstance(faces, FaceList) else np.asarray(faces, dtype=int)
    f = np.asarray(f, dtype=int)
    if f.ndim != 2 or f.shape[1] != 3:
        raise ValueError("faces must be an (F, 3) index array")
    if f.size and (f.min() < 0 or f.max() >= n_vertices):
        raise ValueError("face index out of range")
    return f


def _ccw_faces(pts: np.ndarray, f: np.ndarray):
    """Per-face CCW vertex arrays with degenerate faces dropped.

    Returns (verts, order): verts is (3, F, 2) with verts[k] the k-th
    vertex of each counter-clockwise (positive shoelace) face, and order
    the matching (F, 3) vertex indices.
    """
    order = np.array(f, dtype=int)
    tri = pts[order]                                            # (F, 3, 2)
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    area2 = ((b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1])
             - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0]))
    keep = area2 != 0.0
    swap = area2 < 0.0
    order[swap] = order[swap][:, [0, 2, 1]]
    tri[swap] = tri[swap][:, [0, 2, 1]]
    tri = tri[keep]
    return np.moveaxis(tri, 1, 0), order[keep]


def _face_pixel_pairs(verts: np.ndarray, width: int, height: int,
                      reach: float):
    """Flattened (face, pixel) candidate pairs within `reach` of each
    face's bounding box.

    Returns (fidx, px, py, pix) — face index, pixel center coordinates,
    and flat pixel index (py * width + px) — for every candidate pair.
    """
    xs = verts[:, :, 0]
    ys = verts[:, :, 1]
    x0 = np.maximum(np.ceil(xs.min(axis=0) - reach).astype(int), 0)
    x1 = np.minimum(np.floor(xs.max(axis=0) + reach).astype(int), width - 1)
    y0 = np.maximum(np.ceil(ys.min(axis=0) - reach).astype(int), 0)
    y1 = np.minimum(np.floor(ys.max(axis=0) + reach).astype(int), height - 1)
    nx = np.maximum(x1 - x0 + 1, 0)
    ny = np.maximum(y1 - y0 + 1, 0)
    counts = np.where((nx > 0) & (ny > 0), nx * ny, 0)
    total = int(counts.sum())
    fidx = np.repeat(np.arange(counts.size), counts)
    starts = np.repeat(np.cumsum(counts) - counts, counts)
    local = np.arange(total) - starts
    px = x0[fidx] + local % np.maximum(nx[fidx], 1)
    py = y0[fidx] + local // np.maximum(nx[fidx], 1)
    return fidx, px.astype(float), py.astype(float), py * width + px


def rasterize_hard(cloud, faces, width: int, height: int,
                   spacing_mm: float = 1.0) -> BinaryMask:
    """Exact coverage test of pixel centers against the union of faces.

    A pixel center exactly on an edge shared by two faces is claimed by
    exactly one of them: each face applies an inclusive test only on
    directed edges satisfying (ey < 0 or (ey == 0 and ex > 0)), which
    holds for exactly one direction of every edge.  Zero-area faces
    contribute nothing.
    """
    pts = as_point_array(cloud)
    f = _faces_array(faces, pts.shape[0])
    if not np.all(np.isfinite(pts)):
        raise ValueError("invalid point cloud: non-finite coordinates")
    out = np.zeros(height * width, dtype=bool)
    verts, _ = _ccw_faces(pts, f)
    if verts.shape[1]:
        fidx, px, py, pix = _face_pixel_pairs(verts, width, height, 0.0)
        inside = np.ones(fidx.shape, dtype=bool)
        for k in range(3):
            u = verts[k][fidx]
            v = verts[(k + 1) % 3][fidx]
            ex = v[:, 0] - u[:, 0]
            ey = v[:, 1] - u[:, 1]
            cross = ex * (py - u[:, 1]) - ey * (px - u[:, 0])
            inclusive = (ey < 0.0) | ((ey == 0.0) & (ex > 0.0))
            inside &= np.where(inclusive, cross >= 0.0, cross > 0.0)
        out[pix[inside]] = True
    return BinaryMask(out.reshape(height, width), spacing_mm)


def _sigmoid_saturated(u: np.ndarray):
    """Logistic sigmoid clamped to exactly 0 / 1 beyond +-SUPPORT_SIGMAS.

    Returns (value, derivative); the derivative is exactly zero wherever
    the value is clamped.
    """
    uc = np.clip(u, -SUPPORT_SIGMAS, SUPPORT_SIGMAS)
    s = 1.0 / (1.0 + np.exp(-uc))
    lo = u <= -SUPPORT_SIGMAS
    hi = u >= SUPPORT_SIGMAS
    s[lo] = 0.0
    s[hi] = 1.0
    ds = s * (1.0 - s)
    ds[lo | hi] = 0.0
    return s, ds


def _signed_distance_pairs(verts: np.ndarray, fidx: np.ndarray,
                           px: np.ndarray, py: np.ndarray,
                           want_grad: bool):
    """Signed distance from pixel centers to CCW triangle boundaries,
    evaluated for (face, pixel) pairs.  Positive inside.

    verts is (3, F, 2); fidx selects the face of each pair.  Returns
    (d, extras); with want_grad, extras = (t_sel, kmin, nvec) describing
    the nearest boundary feature: the nearest edge kmin, the foot
    parameter t_sel along it, and the unit direction nvec such that the
    distance gradients are -(1 - t) * nvec and -t * nvec with respect to
    the edge's start and end vertex.  On the boundary (zero distance)
    both one-sided limits equal the inward edge normal, which is
    substituted directly.
    """
    p = np.stack([px, py], axis=-1)                             # (N, 2)
    n = p.shape[0]
    tri = verts[:, fidx, :]                                     # (3, N, 2)
    dists = np.empty((3, n))
    ts = np.empty((3, n))
    feet = np.empty((3, n, 2))
    inside = np.ones(n, dtype=bool)
    for k in range(3):
        u = tri[k]
        e = tri[(k + 1) % 3] - u
        w = p - u
        ee = np.sum(e * e, axis=-1)
        t = np.clip(np.sum(w * e, axis=-1) / ee, 0.0, 1.0)
        foot = u + t[:, None] * e
        diff = p - foot
        dists[k] = np.sqrt(np.sum(diff * diff, axis=-1))
        ts[k] = t
        feet[k] = foot
        # CCW orientation: interior on the left of each directed edge.
        inside &= (e[:, 0] * w[:, 1] - e[:, 1] * w[:, 0]) >= 0.0
    kmin = np.argmin(dists, axis=0)
    idx = np.arange(n)
    dmin = dists[kmin, idx]
    sign = np.where(inside, 1.0, -1.0)
    d = sign * dmin
    if not want_grad:
        return d, None

    t_sel = ts[kmin, idx]
    diff = p - feet[kmin, idx]
    with np.errstate(invalid="ignore", divide="ignore"):
        nvec = sign[:, None] * diff / dmin[:, None]
    degenerate = dmin <= 1e-12
    if np.any(degenerate):
        u = tri[kmin[degenerate], degenerate]
        v = tri[(kmin[degenerate] + 1) % 3, degenerate]
        e = v - u
        norm = np.hypot(e[:, 0], e[:, 1])
        nvec[degenerate] = np.stack([-e[:, 1], e[:, 0]], axis=-1) / norm[:, None]
    return d, (t_sel, kmin, nvec)


def _check_raster_args(cloud, faces, width, height, spacing_mm, tau):
    pts = as_point_array(cloud)
    if not np.all(np.isfinite(pts)):
        raise ValueError("invalid point cloud: non-finite coordinates")
    f = _faces_array(faces, pts.shape[0])
    if width < 1 or height < 1:
        raise ValueError("raster size must be positive")
    if not (np.isfinite(tau) and tau > 0):
        raise ValueError("tau must be positive")
    if not (np.isfinite(spacing_mm) and spacing_mm > 0):
        raise ValueError("spacing must be positive")
    return pts, f


def rasterize_soft(cloud, faces, width: int, height: int,
                   spacing_mm: float = 1.0, tau: float = 0.5) -> RasterMask:
    """Differentiable occupancy image of the triangulated ring."""
    pts, f = _check_raster_args(cloud, faces, width, height, spacing_mm, tau)
    # Accumulate the product of (1 - sigma_f) per pixel; faces outside
    # their saturation reach contribute a factor of exactly 1.
    survive = np.ones(height * width)
    verts, _ = _ccw_faces(pts, f)
    if verts.shape[1]:
        fidx, px, py, pix = _face_pixel_pairs(verts, width, height,
                                              SUPPORT_SIGMAS * tau)
        d, _ = _signed_distance_pairs(verts, fidx, px, py, want_grad=False)
        s, _ = _sigmoid_saturated(d / tau)
        np.multiply.at(survive, pix, 1.0 - s)
    return RasterMask(1.0 - survive.reshape(height, width), spacing_mm)


def rasterize_soft_backward(cloud, faces, width: int, height: int,
                            spacing_mm: float = 1.0, tau: float = 0.5,
                            upstream: np.ndarray | None = None) -> np.ndarray:
    """Gradient of sum(upstream * soft_mask) with respect to the vertices.

    Accumulation uses index-ordered scatter adds, so the result is
    bit-reproducible for identical inputs.  Returns a (T, 2) array.
    """
    pts, f = _check_raster_args(cloud, faces, width, height, spacing_mm, tau)
    if upstream is None:
        raise ValueError("upstream gradient is required")
    up = np.asarray(upstream, dtype=float)
    if up.shape != (height, width):
        raise ValueError("upstream gradient shape must match the raster size")

    grad = np.zeros_like(pts)
    verts, order = _ccw_faces(pts, f)
    if not verts.shape[1]:
        return grad
    fidx, px, py, pix = _face_pixel_pairs(verts, width, height,
                                          SUPPORT_SIGMAS * tau)
    d, (t_sel, kmin, nvec) = _signed_distance_pairs(verts, fidx, px, py,
                                                    want_grad=True)
    s, ds = _sigmoid_saturated(d / tau)
    survive = np.ones(height * width)
    np.multiply.at(survive, pix, 1.0 - s)

    # d m / d sigma_f = prod_{g != f} (1 - sigma_g).  Where sigma_f is
    # saturated at 1 its own derivative is zero, so the quotient form is
    # only needed on 1 - sigma_f >= sigmoid(-SUPPORT_SIGMAS) > 0.
    one_minus = 1.0 - s
    loo = np.zeros_like(s)
    ok = one_minus > 0.0
    loo[ok] = survive[pix[ok]] / one_minus[ok]
    coeff = up.reshape(-1)[pix] * loo * ds / tau

    # Each pair contributes to the two vertices of its nearest edge with
    # the nearest-feature subgradient d d / d u = -(1 - t) nvec,
    # d d / d v = -t nvec.
    start = order[fidx, kmin]
    end = order[fidx, (kmin + 1) % 3]
    gu = (coeff * -(1.0 - t_sel))[:, None] * nvec
    gv = (coeff * -t_sel)[:, None] * nvec
    np.add.at(grad, start, gu)
    np.add.at(grad, end, gv)
    return grad


def render_soft(cloud, faces, cfg: RasterConfig) -> RasterMask:
    return rasterize_soft(cloud, faces, cfg.width, cfg.height,
                          cfg.spacing_mm, cfg.tau)


def render_hard(cloud, faces, cfg: RasterConfig) -> BinaryMask:
    return rasterize_hard(cloud, faces, cfg.width, cfg.height, cfg.spacing_mm)


def render_soft_backward(cloud, faces, cfg: RasterConfig,
                         upstream: np.ndarray) -> np.ndarray:
    return rasterize_soft_backward(cloud, faces, cfg.width, cfg.height,
                                   cfg.spacing_mm, cfg.tau, upstream)
