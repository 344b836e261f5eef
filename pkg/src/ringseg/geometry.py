"""Point clouds, planar affine maps, and least-squares similarity estimation.

Coordinates are (x, y) pairs in pixel units; an image pixel at row r,
column c has its center at (x, y) = (c, r).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def as_point_array(obj) -> np.ndarray:
    """Coerce a PointCloud or array-like to an (N, 2) float64 array."""
    pts = obj.points if isinstance(obj, PointCloud) else np.asarray(obj, dtype=float)
    pts = np.asarray(pts, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError(f"expected (N, 2) points, got shape {pts.shape}")
    return pts


@dataclass(frozen=True)
class PointCloud:
    """Ordered boundary points of a ring: inner chain first, then outer chain.

    Parameters
    ----------
    points : ndarray, shape (T, 2)
        T is even and >= 6.  Indices 0 .. T/2-1 trace the inner boundary,
        T/2 .. T-1 the outer boundary.  Both chains run in the same
        direction, so inner point i corresponds to outer point i + T/2
        across the wall thickness.
    inner_count : int
        Length of the inner chain; must equal T // 2.
    """

    points: np.ndarray
    inner_count: int

    def __post_init__(self):
        pts = np.array(self.points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise ValueError("invalid point cloud: expected a (T, 2) array")
        n = pts.shape[0]
        if n < 6 or n % 2 != 0:
            raise ValueError("invalid point cloud: T must be even and >= 6")
        if self.inner_count != n // 2:
            raise ValueError("invalid point cloud: inner_count must equal T/2")
        if not np.all(np.isfinite(pts)):
            raise ValueError("invalid point cloud: non-finite coordinates")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @classmethod
    def from_chains(cls, inner, outer) -> "PointCloud":
        inner = np.asarray(inner, dtype=float)
        outer = np.asarray(outer, dtype=float)
        if inner.shape != outer.shape:
            raise ValueError("invalid point cloud: chain lengths differ")
        return cls(np.concatenate([inner, outer], axis=0), inner.shape[0])

    @property
    def num_points(self) -> int:
        return self.points.shape[0]

    @property
    def inner(self) -> np.ndarray:
        return self.points[: self.inner_count]

    @property
    def outer(self) -> np.ndarray:
        return self.points[self.inner_count :]

    def centroid(self) -> np.ndarray:
        return self.points.mean(axis=0)


@dataclass(frozen=True)
class SimilarityParams:
    """Scale + rotation + translation; scale > 0, no reflection."""

    scale: float
    rotation: float          # radians, counter-clockwise
    translation: np.ndarray  # (2,)

    def __post_init__(self):
        t = np.array(self.translation, dtype=float).reshape(2)
        if not (np.isfinite(self.scale) and self.scale > 0.0):
            raise ValueError("similarity scale must be positive and finite")
        if not (np.isfinite(self.rotation) and np.all(np.isfinite(t))):
            raise ValueError("similarity parameters must be finite")
        t.setflags(write=False)
        object.__setattr__(self, "translation", t)


def check_affine(affine) -> np.ndarray:
    """Validate a (2, 3) affine matrix [A | t] and return it as float64."""
    m = np.asarray(affine, dtype=float)
    if m.shape != (2, 3):
        raise ValueError(f"affine must have shape (2, 3), got {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("affine has non-finite entries")
    return m


def apply_affine(affine, cloud: PointCloud) -> PointCloud:
    """Map every point through p -> A p + t, preserving chain order."""
    m = check_affine(affine)
    pts = cloud.points @ m[:, :2].T + m[:, 2]
    return PointCloud(pts, cloud.inner_count)


def apply_affine_to_points(affine, pts) -> np.ndarray:
    m = check_affine(affine)
    return np.asarray(pts, dtype=float) @ m[:, :2].T + m[:, 2]


def invert_affine(affine) -> np.ndarray:
    m = check_affine(affine)
    a = m[:, :2]
    det = a[0, 0] * a[1, 1] - a[0, 1] * a[1, 0]
    if abs(det) <= 1e-12:
        raise ValueError("degenerate affine: linear part is singular")
    ainv = np.array([[a[1, 1], -a[0, 1]], [-a[1, 0], a[0, 0]]]) / det
    out = np.empty((2, 3))
    out[:, :2] = ainv
    out[:, 2] = -ainv @ m[:, 2]
    return out


def compose_affine(second, first) -> np.ndarray:
    """Affine equal to applying `first`, then `second`."""
    m2 = check_affine(second)
    m1 = check_affine(first)
    out = np.empty((2, 3))
    out[:, :2] = m2[:, :2] @ m1[:, :2]
    out[:, 2] = m2[:, :2] @ m1[:, 2] + m2[:, 2]
    return out


def identity_affine() -> np.ndarray:
    return np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])


def similarity_to_affine(sim: SimilarityParams) -> np.ndarray:
    c = sim.scale * np.cos(sim.rotation)
    s = sim.scale * np.sin(sim.rotation)
    return np.array([[c, -s, sim.translation[0]], [s, c, sim.translation[1]]])


def apply_similarity(sim: SimilarityParams, pts) -> np.ndarray:
    return apply_affine_to_points(similarity_to_affine(sim), pts)


def estimate_similarity(src, dst) -> SimilarityParams:
    """Least-squares similarity (scale, rotation, translation) mapping src onto dst.

    Closed-form solution of  min over (s, R, t) of  sum_i ||s R x_i + t - y_i||^2
    with s > 0 and R a proper rotation; reflections are never returned.
    Point correspondence is positional: src[i] maps toward dst[i].

    Raises
    ------
    ValueError
        If fewer than 2 points are given, the point sets differ in length,
        or either configuration is degenerate (all points coincident).
    """
    x = as_point_array(src)
    y = as_point_array(dst)
    if x.shape != y.shape:
        raise ValueError("point sets must have matching shapes")
    if x.shape[0] < 2:
        raise ValueError("need at least 2 points to estimate a similarity")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("non-finite coordinates")

    xc = x.mean(axis=0)
    yc = y.mean(axis=0)
    xd = x - xc
    yd = y - yc
    sx2 = float(np.sum(xd * xd))
    if sx2 <= 1e-24:
        raise ValueError("degenerate configuration: source points coincide")
    # Cross-covariance terms: a = sum x.y (dot), b = sum x cross y.
    a = float(np.sum(xd * yd))
    b = float(np.sum(xd[:, 0] * yd[:, 1] - xd[:, 1] * yd[:, 0]))
    mag = float(np.hypot(a, b))
    if mag <= 1e-24:
        raise ValueError("degenerate configuration: target points coincide")
    rot = float(np.arctan2(b, a))
    scale = mag / sx2
    cr, sr = np.cos(rot), np.sin(rot)
    r = np.array([[cr, -sr], [sr, cr]])
    t = yc - scale * (r @ xc)
    return SimilarityParams(scale=scale, rotation=rot, translation=t)
