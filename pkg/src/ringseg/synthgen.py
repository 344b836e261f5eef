"""Synthetic U-ring dataset generation with exact point/mask ground truth.

Each sample is built from a half-open elliptical centerline in polar form
with smoothly varying wall thickness and low-frequency radial deformation,
placed by a random similarity jitter.  The ground-truth point cloud is
obtained by the same landmark-split arc resampling used for real masks —
first on the analytic boundary polygon, then settled onto a fixed point
of the render/trace/resample cycle — and the mask is the exact hard
render of that cloud, so mask == rasterize_hard(points) by construction
and re-deriving the cloud from the mask reproduces it closely.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .alignment import LandmarkTriple, extract_contour, split_and_resample
from .geometry import PointCloud, SimilarityParams, similarity_to_affine
from .metrics import connected_components
from .raster import BinaryMask, FaceList, build_faces, rasterize_hard
from .ssm import ShapeModel, synthesize


@dataclass(frozen=True)
class GenConfig:
    size: int = 64
    num_points: int = 88
    spacing_mm: float = 1.0
    seed: int = 0
    # ring geometry, as fractions of the image size where noted
    arc_span_deg: float = 220.0
    base_radius_frac: tuple = (0.22, 0.30)
    thickness_frac: tuple = (0.07, 0.11)
    eccentricity_max: float = 0.15
    deform_modes: int = 3
    deform_amp_max: float = 0.05
    thickness_wobble: float = 0.2
    # similarity jitter
    scale_range: tuple = (0.8, 1.2)
    rotation_max_deg: float = 25.0
    translation_frac: float = 0.1
    # image formation
    fg_intensity: float = 0.7
    bg_intensity: float = 0.3
    texture_amp: float = 0.08
    blur_sigma: float = 0.7
    noise_sigma: float = 0.03
    # validity checks
    margin_px: float = 1.0
    min_separation_px: float = 1.0
    max_rejects: int = 100


@dataclass(frozen=True)
class SyntheticSample:
    image: np.ndarray          # (H, W) float64 in [0, 1]
    mask: BinaryMask
    points: PointCloud
    landmarks: LandmarkTriple
    theta_gt: np.ndarray       # (2, 3) placement affine
    beta_gt: np.ndarray | None # deformation coefficients for model draws
    seed: int


def _validate_config(cfg: GenConfig) -> None:
    if cfg.size < 16:
        raise ValueError("infeasible config: image size below 16")
    if cfg.num_points < 6 or cfg.num_points % 2:
        raise ValueError("infeasible config: T must be even and >= 6")
    for name in ("base_radius_frac", "thickness_frac", "scale_range"):
        lo, hi = getattr(cfg, name)
        if not (0 < lo <= hi):
            raise ValueError(f"infeasible config: bad range {name}")
    if not 0 < cfg.arc_span_deg < 360:
        raise ValueError("infeasible config: arc span must be in (0, 360)")
    min_wall = cfg.thickness_frac[0] * cfg.size * cfg.scale_range[0]
    if min_wall <= 2.0:
        raise ValueError("infeasible config: wall thickness under 2 px at "
                         "render scale")


def _smooth_field(rng: np.random.Generator, size: int, coarse: int = 9) -> np.ndarray:
    grid = rng.uniform(-1.0, 1.0, (coarse, coarse))
    x = np.linspace(0.0, coarse - 1.0, size)
    i0 = np.floor(x).astype(int)
    i1 = np.minimum(i0 + 1, coarse - 1)
    fx = x - i0
    rows = grid[:, i0] * (1.0 - fx) + grid[:, i1] * fx
    return rows[i0, :] * (1.0 - fx)[:, None] + rows[i1, :] * fx[:, None]


def _gauss_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    if sigma <= 0:
        return img
    radius = max(1, int(np.ceil(3.0 * sigma)))
    xs = np.arange(-radius, radius + 1, dtype=float)
    kernel = np.exp(-0.5 * (xs / sigma) ** 2)
    kernel /= kernel.sum()
    padded = np.pad(img, ((0, 0), (radius, radius)), mode="edge")
    out = np.zeros_like(img)
    for j, kj in enumerate(kernel):
        out += kj * padded[:, j:j + img.shape[1]]
    padded = np.pad(out, ((radius, radius), (0, 0)), mode="edge")
    out = np.zeros_like(img)
    for j, kj in enumerate(kernel):
        out += kj * padded[j:j + img.shape[0], :]
    return out


def _compose_image(rng: np.random.Generator, mask: np.ndarray,
                   cfg: GenConfig) -> np.ndarray:
    bg = cfg.bg_intensity + cfg.texture_amp * _smooth_field(rng, cfg.size)
    img = np.where(mask, cfg.fg_intensity, bg)
    img = _gauss_blur(img, cfg.blur_sigma)
    img = img + rng.normal(0.0, cfg.noise_sigma, img.shape)
    return np.clip(img, 0.0, 1.0)


def _ring_polygon(rng: np.random.Generator, cfg: GenConfig):
    """Dense analytic boundary polygon of one random ring, centered at the
    origin, plus its landmark triple.  Radii are in pixels."""
    radius = cfg.size * rng.uniform(*cfg.base_radius_frac)
    wall = cfg.size * rng.uniform(*cfg.thickness_frac)
    ecc = rng.uniform(0.0, cfg.eccentricity_max)
    amps = rng.uniform(-cfg.deform_amp_max, cfg.deform_amp_max, cfg.deform_modes)
    phases = rng.uniform(0.0, 2.0 * np.pi, cfg.deform_modes)
    wobble = rng.uniform(-cfg.thickness_wobble, cfg.thickness_wobble)
    wobble_phase = rng.uniform(0.0, np.pi)

    span = np.deg2rad(cfg.arc_span_deg)
    phi = np.pi / 2 + np.linspace(-span / 2, span / 2, 512)
    u = np.linspace(0.0, 1.0, phi.size)
    ax, bx = radius * (1.0 + ecc), radius / (1.0 + ecc)
    rho = ax * bx / np.sqrt((bx * np.cos(phi)) ** 2 + (ax * np.sin(phi)) ** 2)
    for k in range(cfg.deform_modes):
        rho = rho * (1.0 + amps[k] * np.cos((k + 1) * np.pi * u + phases[k]))
    width = wall * (1.0 + wobble * np.cos(np.pi * u + wobble_phase))
    direction = np.stack([np.cos(phi), np.sin(phi)], axis=1)
    outer = (rho + width / 2)[:, None] * direction
    inner = (rho - width / 2)[:, None] * direction
    polygon = np.concatenate([outer, inner[::-1]], axis=0)

    mid = phi.size // 2
    landmarks = LandmarkTriple(
        apex=outer[mid],
        basal_a=0.5 * (inner[0] + outer[0]),
        basal_b=0.5 * (inner[-1] + outer[-1]),
    )
    return polygon, landmarks


def landmarks_from_cloud(cloud: PointCloud) -> LandmarkTriple:
    """Apex at the outer-chain midpoint, basal points midway between
    corresponding chain endpoints."""
    half = cloud.inner_count
    outer = cloud.outer
    inner = cloud.inner
    apex = 0.5 * (outer[(half - 1) // 2] + outer[half // 2])
    return LandmarkTriple(
        apex=apex,
        basal_a=0.5 * (inner[0] + outer[0]),
        basal_b=0.5 * (inner[-1] + outer[-1]),
    )


def _chain_separation(cloud: PointCloud) -> float:
    inner, outer = cloud.inner, cloud.outer
    d2 = (np.sum(inner * inner, axis=1)[:, None]
          + np.sum(outer * outer, axis=1)[None, :] - 2.0 * inner @ outer.T)
    return float(np.sqrt(max(d2.min(), 0.0)))


def _sample_valid(cloud: PointCloud, mask: BinaryMask, cfg: GenConfig) -> bool:
    pts = cloud.points
    if pts.min() < cfg.margin_px or pts.max() > cfg.size - 1 - cfg.margin_px:
        return False
    if _chain_separation(cloud) <= cfg.min_separation_px:
        return False
    if not mask.data.any():
        return False
    return connected_components(mask) == 1


def _draw_jitter(rng: np.random.Generator, cfg: GenConfig,
                 base_scale: float = 1.0) -> SimilarityParams:
    center = (cfg.size - 1) / 2.0
    scale = base_scale * rng.uniform(*cfg.scale_range)
    rotation = np.deg2rad(rng.uniform(-cfg.rotation_max_deg,
                                      cfg.rotation_max_deg))
    shift = rng.uniform(-cfg.translation_frac, cfg.translation_frac, 2) * cfg.size
    return SimilarityParams(scale=scale, rotation=float(rotation),
                            translation=np.array([center, center]) + shift)


def generate(cfg: GenConfig, count: int) -> list[SyntheticSample]:
    """Draw `count` synthetic ring samples with exact point/mask ground truth.

    Sample i uses its own RNG seeded with cfg.seed + i, so any slice of a
    dataset is reproducible independently of the rest.  Draws violating
    the separation / bounds / connectivity checks are redrawn; more than
    cfg.max_rejects consecutive rejections raise an error.
    """
    _validate_config(cfg)
    faces = build_faces(cfg.num_points)
    samples = []
    for i in range(count):
        rng = np.random.default_rng(cfg.seed + i)
        rejects = 0
        while True:
            polygon, poly_marks = _ring_polygon(rng, cfg)
            canonical = split_and_resample(polygon, poly_marks, cfg.num_points)
            jitter = _draw_jitter(rng, cfg)
            theta = similarity_to_affine(jitter)
            points = PointCloud(
                canonical.points @ theta[:, :2].T + theta[:, 2],
                canonical.inner_count)
            refined = _cycle_consistent(points, faces, cfg)
            if refined is not None:
                points, mask = refined
                break
            rejects += 1
            if rejects >= cfg.max_rejects:
                raise ValueError("infeasible config: too many rejected draws")
        image = _compose_image(rng, mask.data, cfg)
        samples.append(SyntheticSample(
            image=image, mask=mask, points=points,
            landmarks=landmarks_from_cloud(points),
            theta_gt=theta, beta_gt=None, seed=cfg.seed + i))
    return samples


def _cycle_consistent(points: PointCloud, faces: FaceList, cfg: GenConfig,
                      max_passes: int = 4, settle_px: float = 0.05,
                      accept_px: float = 0.6):
    """Settle a candidate cloud onto a fixed point of render -> trace ->
    resample, so re-deriving the cloud from the emitted mask lands back on
    the emitted points.

    Each pass measures exactly the reproduction error of the current
    iterate (the RMSE to its successor); the best valid iterate is kept,
    and the draw is rejected (None returned) unless that error settles
    under accept_px pixels.
    """
    best = None
    current = points
    for _ in range(max_passes):
        mask = rasterize_hard(current, faces, cfg.size, cfg.size,
                              cfg.spacing_mm)
        if not _sample_valid(current, mask, cfg):
            break
        try:
            contour = extract_contour(mask)
            successor = split_and_resample(
                contour, landmarks_from_cloud(current), cfg.num_points)
        except ValueError:
            break
        err = float(np.sqrt(np.mean(
            np.sum((successor.points - current.points) ** 2, axis=1))))
        if best is None or err < best[0]:
            best = (err, current, mask)
        if err <= settle_px:
            break
        current = successor
    if best is None or best[0] > accept_px:
        return None
    return best[1], best[2]


def generate_from_model(model: ShapeModel, faces: FaceList, cfg: GenConfig,
                        count: int) -> list[SyntheticSample]:
    """Draw samples from a fitted shape model instead of the analytic rings.

    Deformation coefficients are uniform in +-2 sqrt(eigenvalue) per mode
    (inside the synthesis clamp box); placement is a similarity drawn from
    the jitter ranges around the dataset's base radius.
    """
    _validate_config(cfg)
    if model.num_points != cfg.num_points:
        raise ValueError("model point count does not match the configuration")
    sigma = np.sqrt(model.eigenvalues)
    base_scale = cfg.size * float(np.mean(cfg.base_radius_frac))
    samples = []
    for i in range(count):
        rng = np.random.default_rng(cfg.seed + i)
        rejects = 0
        while True:
            coeffs = rng.uniform(-2.0 * sigma, 2.0 * sigma)
            jitter = _draw_jitter(rng, cfg, base_scale=base_scale)
            theta = similarity_to_affine(jitter)
            points = synthesize(model, theta, coeffs)
            mask = rasterize_hard(points, faces, cfg.size, cfg.size,
                                  cfg.spacing_mm)
            if _sample_valid(points, mask, cfg):
                break
            rejects += 1
            if rejects >= cfg.max_rejects:
                raise ValueError("infeasible config: too many rejected draws")
        image = _compose_image(rng, mask.data, cfg)
        samples.append(SyntheticSample(
            image=image, mask=mask, points=points,
            landmarks=landmarks_from_cloud(points),
            theta_gt=theta, beta_gt=coeffs, seed=cfg.seed + i))
    return samples

