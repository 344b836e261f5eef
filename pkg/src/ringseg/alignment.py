"""From masks to corresponding point clouds: contour tracing, landmark-guided
resampling, and generalized Procrustes alignment.

Contour vertices live on the pixel-corner lattice (half-integer
coordinates), since a pixel at (c, r) covers [c-0.5, c+0.5] x [r-0.5, r+0.5].
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import (PointCloud, SimilarityParams, apply_similarity,
                       estimate_similarity)
from .metrics import connected_components, dice
from .raster import BinaryMask, build_faces, rasterize_hard

BASAL_SNAP_PX = 2.0


@dataclass(frozen=True)
class LandmarkTriple:
    """Apex and the two basal end points, in pixel coordinates."""

    apex: np.ndarray
    basal_a: np.ndarray
    basal_b: np.ndarray

    def __post_init__(self):
        vals = []
        for name in ("apex", "basal_a", "basal_b"):
            v = np.array(getattr(self, name), dtype=float).reshape(2)
            if not np.all(np.isfinite(v)):
                raise ValueError("landmarks must be finite")
            v.setflags(write=False)
            object.__setattr__(self, name, v)
            vals.append(v)
        if (np.allclose(vals[0], vals[1]) or np.allclose(vals[0], vals[2])
                or np.allclose(vals[1], vals[2])):
            raise ValueError("landmarks must be three distinct points")


def _background_reachable(bg: np.ndarray) -> np.ndarray:
    """Background pixels 4-connected to the image border."""
    reach = np.zeros_like(bg)
    reach[0, :] = bg[0, :]
    reach[-1, :] = bg[-1, :]
    reach[:, 0] = bg[:, 0]
    reach[:, -1] = bg[:, -1]
    while True:
        grown = reach.copy()
        grown[1:, :] |= reach[:-1, :]
        grown[:-1, :] |= reach[1:, :]
        grown[:, 1:] |= reach[:, :-1]
        grown[:, :-1] |= reach[:, 1:]
        grown &= bg
        if np.array_equal(grown, reach):
            return reach
        reach = grown


def extract_contour(mask: BinaryMask) -> np.ndarray:
    """Closed boundary polyline of a single-component, hole-free mask.

    Returns an (N, 2) array of pixel-corner vertices in unit steps,
    ordered with positive shoelace area (interior on the left); the
    closing edge back to the first vertex is implicit.
    """
    m = mask.data
    if not m.any():
        raise ValueError("mask not simply connected: no foreground")
    if connected_components(m) != 1:
        raise ValueError("mask not simply connected: multiple components")
    if np.any(~m & ~_background_reachable(~m)):
        raise ValueError("mask not simply connected: interior hole")

    h, w = m.shape
    padded = np.pad(m, 1, constant_values=False)
    # Directed unit edges with the interior on the left; endpoint keys are
    # doubled coordinates so corners at half-integers stay integral.
    edges: dict[tuple[int, int], list[tuple[int, int]]] = {}

    def add(start, end):
        edges.setdefault(start, []).append(end)

    for (dr, dc), (sv, ev) in (
        ((-1, 0), ((-1, -1), (1, -1))),   # background above: TL -> TR
        ((0, 1), ((1, -1), (1, 1))),      # background right: TR -> BR
        ((1, 0), ((1, 1), (-1, 1))),      # background below: BR -> BL
        ((0, -1), ((-1, 1), (-1, -1))),   # background left:  BL -> TL
    ):
        exposed = m & ~padded[1 + dr:1 + dr + h, 1 + dc:1 + dc + w]
        rows, cols = np.nonzero(exposed)
        for r, c in zip(rows.tolist(), cols.tolist()):
            add((2 * c + sv[0], 2 * r + sv[1]), (2 * c + ev[0], 2 * r + ev[1]))

    for v in edges.values():
        v.sort()
    total_edges = sum(len(v) for v in edges.values())
    start = min(edges)
    path = [start]
    current = start
    incoming = None
    used = 0
    while True:
        options = edges.get(current, [])
        if not options:
            raise ValueError("mask not simply connected: broken boundary")
        if incoming is None:
            nxt = options.pop(0)
        else:
            dx, dy = incoming
            # Prefer the left turn, then straight, then right, so the
            # trace stays tight around pinch corners.
            prefs = ((-dy, dx), (dx, dy), (dy, -dx))
            nxt = None
            for px, py in prefs:
                cand = (current[0] + px * 2, current[1] + py * 2)
                if cand in options:
                    options.remove(cand)
                    nxt = cand
                    break
            if nxt is None:
                raise ValueError("mask not simply connected: broken boundary")
        used += 1
        incoming = ((nxt[0] - current[0]) // 2, (nxt[1] - current[1]) // 2)
        current = nxt
        if current == start and not edges[start]:
            break
        path.append(current)
        if used > total_edges:
            raise ValueError("mask not simply connected: broken boundary")
    if used != total_edges:
        raise ValueError("mask not simply connected: multiple boundary loops")
    return np.array(path, dtype=float) / 2.0


def _closed_segment_lengths(poly: np.ndarray) -> np.ndarray:
    nxt = np.roll(poly, -1, axis=0)
    return np.sqrt(np.sum((nxt - poly) ** 2, axis=1))


def _project_to_polyline(poly: np.ndarray, point: np.ndarray):
    """Arc-length position and distance of the closest point on a closed polyline."""
    p0 = poly
    p1 = np.roll(poly, -1, axis=0)
    seg = p1 - p0
    seg_len2 = np.sum(seg * seg, axis=1)
    seg_len2 = np.where(seg_len2 == 0.0, 1.0, seg_len2)
    t = np.clip(np.sum((point - p0) * seg, axis=1) / seg_len2, 0.0, 1.0)
    foot = p0 + t[:, None] * seg
    d2 = np.sum((point - foot) ** 2, axis=1)
    k = int(np.argmin(d2))
    lengths = _closed_segment_lengths(poly)
    cum = np.concatenate([[0.0], np.cumsum(lengths)])
    s = cum[k] + t[k] * lengths[k]
    return float(s), float(np.sqrt(d2[k]))


def _arc_polyline(poly: np.ndarray, s0: float, s1: float):
    """Sub-polyline from arc position s0 forward to s1 (wrapping), with
    interpolated end vertices included."""
    lengths = _closed_segment_lengths(poly)
    cum = np.concatenate([[0.0], np.cumsum(lengths)])
    total = cum[-1]
    s0 = s0 % total
    s1 = s1 % total
    span = (s1 - s0) % total

    def point_at(s):
        s = s % total
        k = int(np.searchsorted(cum, s, side="right") - 1)
        k = min(k, len(poly) - 1)
        t = (s - cum[k]) / lengths[k] if lengths[k] > 0 else 0.0
        nxt = poly[(k + 1) % len(poly)]
        return poly[k] + t * (nxt - poly[k])

    verts = [point_at(s0)]
    # Interior vertices of the original polyline that fall inside the arc.
    k = int(np.searchsorted(cum, s0, side="right")) % len(poly)
    walked = (cum[k] - s0) % total if k != 0 else (total - s0) % total
    while walked < span - 1e-12:
        verts.append(poly[k])
        step = lengths[k]
        k = (k + 1) % len(poly)
        walked += step
    verts.append(point_at(s1))
    return np.array(verts)


def _resample_arc(arc: np.ndarray, count: int) -> np.ndarray:
    """count points uniform in arc length, inset half a step from each end.

    The half-step inset keeps the two chains of a split contour from
    coinciding at the split points, so the wall thickness never collapses
    to zero there.
    """
    seg = np.sqrt(np.sum(np.diff(arc, axis=0) ** 2, axis=1))
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    total = cum[-1]
    if total <= 0:
        raise ValueError("degenerate split: zero-length arc")
    targets = (np.arange(count) + 0.5) * total / count
    x = np.interp(targets, cum, arc[:, 0])
    y = np.interp(targets, cum, arc[:, 1])
    return np.stack([x, y], axis=1)


def split_and_resample(contour: np.ndarray, landmarks: LandmarkTriple,
                       num_points: int) -> PointCloud:
    """Split a closed contour at the basal landmarks into inner and outer
    chains and resample each to num_points / 2 points.

    The arc containing the apex projection is the outer chain; both chains
    are ordered from basal_a to basal_b, so inner point i corresponds to
    outer point i + T/2.  Swapping basal_a and basal_b index-reverses both
    chains.
    """
    poly = np.asarray(contour, dtype=float)
    if poly.ndim != 2 or poly.shape[1] != 2 or poly.shape[0] < 3:
        raise ValueError("contour must be an (N, 2) polyline with N >= 3")
    if num_points < 6 or num_points % 2 != 0:
        raise ValueError("T must be even and >= 6")
    total = float(_closed_segment_lengths(poly).sum())

    s_a, d_a = _project_to_polyline(poly, landmarks.basal_a)
    s_b, d_b = _project_to_polyline(poly, landmarks.basal_b)
    s_apex, _ = _project_to_polyline(poly, landmarks.apex)
    if d_a > BASAL_SNAP_PX or d_b > BASAL_SNAP_PX:
        raise ValueError("basal landmark farther than 2 px from the contour")
    gap_fwd = (s_b - s_a) % total
    if min(gap_fwd, total - gap_fwd) < 1e-9:
        raise ValueError("degenerate split: basal projections coincide")

    arc_ab = _arc_polyline(poly, s_a, s_b)   # runs basal_a -> basal_b
    arc_ba = _arc_polyline(poly, s_b, s_a)   # runs basal_b -> basal_a
    apex_in_ab = (s_apex - s_a) % total < gap_fwd
    if apex_in_ab:
        outer_arc = arc_ab
        inner_arc = arc_ba[::-1]
    else:
        outer_arc = arc_ba[::-1]
        inner_arc = arc_ab
    half = num_points // 2
    inner = _resample_arc(inner_arc, half)
    outer = _resample_arc(outer_arc, half)
    return PointCloud.from_chains(inner, outer)


def _normalize(points: np.ndarray) -> np.ndarray:
    centered = points - points.mean(axis=0)
    rms = float(np.sqrt(np.mean(np.sum(centered**2, axis=1))))
    if rms <= 1e-12:
        raise ValueError("degenerate configuration: zero-size shape")
    return centered / rms


def gpa(shapes, max_iterations: int = 100, tol: float = 1e-8):
    """Generalized Procrustes alignment of same-length point clouds.

    Every shape is similarity-aligned to the running mean; the mean is
    re-estimated and renormalized to centroid zero / RMS radius one until
    it moves less than tol.  The rotation gauge is fixed at initialization
    by rotating the first shape so its first point lies along +x from the
    centroid, which makes the result invariant to any common similarity
    applied to all inputs.

    Returns (mean_cloud, aligned_clouds, transforms) where transforms[i]
    maps shapes[i] into the canonical frame.
    """
    if len(shapes) < 2:
        raise ValueError("need at least 2 shapes to align")
    t = shapes[0].num_points
    for s in shapes:
        if s.num_points != t:
            raise ValueError("shapes must all have the same point count")

    mean = _normalize(shapes[0].points)
    lead = mean[0]
    norm = float(np.hypot(lead[0], lead[1]))
    if norm > 1e-12:
        ang = float(np.arctan2(lead[1], lead[0]))
        c, s_ = np.cos(-ang), np.sin(-ang)
        mean = mean @ np.array([[c, -s_], [s_, c]]).T

    sims: list[SimilarityParams] = []
    aligned: list[np.ndarray] = []
    for _ in range(max_iterations):
        sims = [estimate_similarity(s.points, mean) for s in shapes]
        aligned = [apply_similarity(sim, s.points) for sim, s in zip(sims, shapes)]
        new_mean = _normalize(np.mean(aligned, axis=0))
        movement = float(np.sqrt(np.mean(np.sum((new_mean - mean) ** 2, axis=1))))
        mean = new_mean
        if movement < tol:
            break
    half = t // 2
    return (PointCloud(mean, half),
            [PointCloud(a, half) for a in aligned],
            sims)


@dataclass(frozen=True)
class CorrespondenceQuadruple:
    """One training sample tied to its image- and canonical-space clouds."""

    image_id: object
    mask: BinaryMask
    p_image: PointCloud
    p_canonical: PointCloud


@dataclass(frozen=True)
class CorrespondenceSet:
    quadruples: list
    mean: PointCloud
    excluded: list  # (image_id, reason)


def build_quadruples(samples, num_points: int,
                     exclude_dice: float = 0.90,
                     ids=None) -> CorrespondenceSet:
    """Extract, resample, and align point clouds for a list of samples.

    samples is a sequence of (image, mask, landmarks) tuples; the image may
    be None.  Samples whose contour cannot be traced, or whose resampled
    cloud re-renders to a Dice below exclude_dice against the source mask,
    are excluded and reported rather than failing the whole build.
    """
    if ids is None:
        ids = list(range(len(samples)))
    faces = build_faces(num_points)
    kept = []
    excluded = []
    for sid, (_, mask, landmarks) in zip(ids, samples):
        try:
            contour = extract_contour(mask)
            cloud = split_and_resample(contour, landmarks, num_points)
        except ValueError as err:
            excluded.append((sid, str(err)))
            continue
        rendered = rasterize_hard(cloud, faces, mask.width, mask.height,
                                  mask.spacing_mm)
        overlap = dice(rendered, mask)
        if overlap < exclude_dice:
            excluded.append((sid, f"re-rendered dice {overlap:.3f} below "
                                  f"{exclude_dice:.2f}"))
            continue
        kept.append((sid, mask, cloud))
    if len(kept) < 2:
        raise ValueError("insufficient data: fewer than 2 usable samples")
    mean, aligned, _ = gpa([c for _, _, c in kept])
    quads = [CorrespondenceQuadruple(sid, mask, cloud, canon)
             for (sid, mask, cloud), canon in zip(kept, aligned)]
    return CorrespondenceSet(quads, mean, excluded)
