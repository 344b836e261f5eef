import numpy as np
import pytest

from ringseg import (SimilarityParams, build_quadruples, dice, extract_contour,
                     gpa, rasterize_hard, split_and_resample)
from ringseg.alignment import LandmarkTriple
from ringseg.geometry import apply_similarity
from ringseg.raster import BinaryMask, build_faces

CENTER = 16.0
R_IN, R_OUT = 5.0, 10.0
SPAN = 220.0


def polar(r, deg):
    a = np.radians(np.asarray(deg, dtype=float))
    return np.stack([CENTER + r * np.cos(a), CENTER + r * np.sin(a)], axis=-1)


def u_ring_mask():
    yy, xx = np.mgrid[0:33, 0:33]
    rad = np.hypot(xx - CENTER, yy - CENTER)
    ang = np.degrees(np.arctan2(yy - CENTER, xx - CENTER))
    dist = np.abs((ang - 90.0 + 180.0) % 360.0 - 180.0)
    keep = (rad >= R_IN) & (rad <= R_OUT) & (dist <= SPAN / 2.0)
    return BinaryMask(keep, 1.0)


def u_ring_landmarks():
    mid = (R_IN + R_OUT) / 2.0
    return LandmarkTriple(apex=polar(R_OUT, 90.0),
                          basal_a=polar(mid, 90.0 - SPAN / 2.0),
                          basal_b=polar(mid, 90.0 + SPAN / 2.0))


def analytic_chain(r, count):
    """Arc-length-uniform positions with half-step inset on the exact split
    polyline: half an end cap, the circular arc, half the other end cap."""
    a0 = 90.0 - SPAN / 2.0
    a1 = 90.0 + SPAN / 2.0
    mid = (R_IN + R_OUT) / 2.0
    cap = abs(mid - r)
    arc = r * np.radians(SPAN)
    total = 2.0 * cap + arc
    pts = []
    for i in range(count):
        s = (i + 0.5) / count * total
        if s < cap:
            pts.append(polar(mid + (r - mid) * s / cap, a0))
        elif s <= cap + arc:
            pts.append(polar(r, a0 + np.degrees((s - cap) / r)))
        else:
            pts.append(polar(r + (mid - r) * (s - cap - arc) / cap, a1))
    return np.asarray(pts)


def test_landmark_triple_rejects_duplicates():
    p = np.array([1.0, 2.0])
    with pytest.raises(ValueError):
        LandmarkTriple(apex=p, basal_a=p, basal_b=np.array([3.0, 4.0]))
    with pytest.raises(ValueError):
        LandmarkTriple(apex=p, basal_a=np.array([0.0, 0.0]),
                       basal_b=np.array([np.nan, 0.0]))


def test_extract_contour_single_pixel():
    m = np.zeros((3, 3), dtype=bool)
    m[1, 1] = True
    poly = extract_contour(BinaryMask(m, 1.0))
    assert poly.shape == (4, 2)
    assert {tuple(v) for v in poly} == {(0.5, 0.5), (1.5, 0.5),
                                        (1.5, 1.5), (0.5, 1.5)}
    nxt = np.roll(poly, -1, axis=0)
    area2 = np.sum(poly[:, 0] * nxt[:, 1] - nxt[:, 0] * poly[:, 1])
    assert area2 > 0  # interior on the left


def test_extract_contour_rectangle_perimeter():
    m = np.zeros((8, 14), dtype=bool)
    m[2:6, 1:11] = True  # 10 x 4 rectangle
    poly = extract_contour(BinaryMask(m, 1.0))
    assert poly.shape[0] == 2 * (10 + 4)  # one vertex per unit boundary step
    nxt = np.roll(poly, -1, axis=0)
    area = 0.5 * np.sum(poly[:, 0] * nxt[:, 1] - nxt[:, 0] * poly[:, 1])
    assert area == pytest.approx(40.0)


def test_extract_contour_rejects_bad_masks():
    two_blobs = np.zeros((5, 7), dtype=bool)
    two_blobs[1:3, 1:3] = True
    two_blobs[1:3, 5:6] = True
    with pytest.raises(ValueError, match="not simply connected"):
        extract_contour(BinaryMask(two_blobs, 1.0))

    holed = np.zeros((5, 5), dtype=bool)
    holed[1:4, 1:4] = True
    holed[2, 2] = False
    with pytest.raises(ValueError, match="not simply connected"):
        extract_contour(BinaryMask(holed, 1.0))

    with pytest.raises(ValueError, match="not simply connected"):
        extract_contour(BinaryMask(np.zeros((4, 4), dtype=bool), 1.0))


def test_split_and_resample_u_ring_analytic():
    cloud = split_and_resample(extract_contour(u_ring_mask()),
                               u_ring_landmarks(), 8)
    # pixel-corner contours stair-step around the true circle, so the
    # honest bound matches the generator round-trip bound of 0.75 px
    for chain, r in ((cloud.inner, R_IN), (cloud.outer, R_OUT)):
        errs = np.linalg.norm(chain - analytic_chain(r, 4), axis=1)
        assert errs.max() < 0.75
    # the outer chain is the one holding the apex-side arc
    inner_rad = np.hypot(*(cloud.inner - CENTER).T)
    outer_rad = np.hypot(*(cloud.outer - CENTER).T)
    assert outer_rad.mean() > inner_rad.mean()


def test_split_and_resample_swapped_basals_reverse_chains():
    contour = extract_contour(u_ring_mask())
    lm = u_ring_landmarks()
    swapped = LandmarkTriple(apex=lm.apex, basal_a=lm.basal_b,
                             basal_b=lm.basal_a)
    fwd = split_and_resample(contour, lm, 12)
    rev = split_and_resample(contour, swapped, 12)
    assert np.allclose(rev.inner, fwd.inner[::-1], atol=1e-9)
    assert np.allclose(rev.outer, fwd.outer[::-1], atol=1e-9)


def test_split_and_resample_rejects_far_basal():
    contour = extract_contour(u_ring_mask())
    lm = u_ring_landmarks()
    off = LandmarkTriple(apex=lm.apex,
                         basal_a=np.array([1.0, 1.0]),  # nowhere near the ring
                         basal_b=lm.basal_b)
    with pytest.raises(ValueError, match="basal landmark"):
        split_and_resample(contour, off, 8)


def test_split_and_resample_rejects_coincident_projections():
    block = np.zeros((8, 12), dtype=bool)
    block[2:6, 2:10] = True
    contour = extract_contour(BinaryMask(block, 1.0))
    # distinct points on either side of one boundary position share a foot
    stacked = LandmarkTriple(apex=np.array([9.5, 5.5]),
                             basal_a=np.array([5.0, 1.0]),
                             basal_b=np.array([5.0, 2.6]))
    with pytest.raises(ValueError, match="degenerate split"):
        split_and_resample(contour, stacked, 8)


def test_resampled_cloud_rerenders_generator_mask(rings20):
    faces = build_faces(88)
    for s in rings20[:6]:
        cloud = split_and_resample(extract_contour(s.mask), s.landmarks, 88)
        rendered = rasterize_hard(cloud, faces, s.mask.width, s.mask.height,
                                  s.mask.spacing_mm)
        assert dice(rendered, s.mask) >= 0.98


def rmsd(a, b):
    return float(np.sqrt(np.mean(np.sum((a - b) ** 2, axis=1))))


def test_gpa_aligns_similarity_copies(rings20):
    base = rings20[0].points
    rng = np.random.default_rng(8)
    copies = []
    for _ in range(6):
        sim = SimilarityParams(rng.uniform(0.5, 2.0), rng.uniform(-3.0, 3.0),
                               rng.uniform(-20.0, 20.0, 2))
        copies.append(type(base)(apply_similarity(sim, base.points),
                                 base.inner_count))
    mean, aligned, _ = gpa(copies)
    for a in aligned[1:]:
        assert rmsd(a.points, aligned[0].points) < 1e-6
    assert rmsd(mean.points, aligned[0].points) < 1e-6


def test_gpa_common_similarity_invariance(rings20):
    clouds = [s.points for s in rings20[:10]]
    _, aligned, _ = gpa(clouds)
    sim = SimilarityParams(1.4, 0.7, np.array([3.0, -2.0]))
    moved = [type(c)(apply_similarity(sim, c.points), c.inner_count)
             for c in clouds]
    _, aligned2, _ = gpa(moved)
    for a, b in zip(aligned, aligned2):
        assert rmsd(a.points, b.points) < 1e-6


def test_gpa_mean_is_normalized_midpoint(rings20):
    clouds = [s.points for s in rings20[:2]]
    mean, aligned, _ = gpa(clouds)
    mid = 0.5 * (aligned[0].points + aligned[1].points)
    mid = mid - mid.mean(axis=0)
    mid = mid / np.sqrt(np.mean(np.sum(mid ** 2, axis=1)))
    assert rmsd(mean.points, mid) < 1e-6
    assert np.allclose(mean.centroid(), 0.0, atol=1e-8)
    assert np.sqrt(np.mean(np.sum(mean.points ** 2, axis=1))) == \
        pytest.approx(1.0, abs=1e-8)


def test_gpa_needs_two_shapes(rings20):
    with pytest.raises(ValueError):
        gpa([rings20[0].points])


def test_build_quadruples_keeps_clean_samples(rings20):
    samples = [(s.image, s.mask, s.landmarks) for s in rings20[:12]]
    corr = build_quadruples(samples, 88)
    assert len(corr.quadruples) == 12
    assert corr.excluded == []
    canon = np.stack([q.p_canonical.points for q in corr.quadruples])
    centroids = canon.mean(axis=1)
    assert np.max(np.abs(centroids)) < 0.1
    rms = np.sqrt(np.mean(np.sum(canon ** 2, axis=2), axis=1))
    assert np.allclose(rms, 1.0, atol=0.1)
    for q, s in zip(corr.quadruples, rings20):
        assert np.array_equal(q.p_image.points,
                              split_and_resample(extract_contour(s.mask),
                                                 s.landmarks, 88).points)


def test_build_quadruples_excludes_broken_mask(rings20):
    samples = [(s.image, s.mask, s.landmarks) for s in rings20[:4]]
    blobs = np.zeros((64, 64), dtype=bool)
    blobs[5:9, 5:9] = True
    blobs[40:44, 40:44] = True
    bad = (None, BinaryMask(blobs, 1.0), rings20[0].landmarks)
    corr = build_quadruples(samples + [bad], 88, ids=list("abcde"))
    assert len(corr.quadruples) == 4
    assert len(corr.excluded) == 1
    sid, reason = corr.excluded[0]
    assert sid == "e"
    assert "not simply connected" in reason


def test_build_quadruples_insufficient_data(rings20):
    blobs = np.zeros((64, 64), dtype=bool)
    blobs[5:9, 5:9] = True
    blobs[40:44, 40:44] = True
    bad = (None, BinaryMask(blobs, 1.0), rings20[0].landmarks)
    good = (rings20[0].image, rings20[0].mask, rings20[0].landmarks)
    with pytest.raises(ValueError, match="insufficient data"):
        build_quadruples([good, bad, bad], 88)
