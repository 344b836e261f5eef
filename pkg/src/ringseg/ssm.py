"""Point distribution model: PCA over aligned ring clouds and shape synthesis.

Shape vectors are the row-major flattening of the (T, 2) point array,
i.e. (x0, y0, x1, y1, ...).  Canonical-space shapes are deformed by a
linear combination of principal components and placed into image space by
a (2, 3) affine map.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import PointCloud, apply_affine, check_affine

CLAMP_SIGMAS = 3.0


@dataclass(frozen=True)
class ShapeModel:
    """Mean shape plus orthonormal deformation modes from PCA.

    components has shape (n_modes, 2T) with orthonormal rows; eigenvalues
    are the per-mode variances in descending order; total_variance is the
    full trace of the training covariance, so retained_variance() reports
    the fraction captured by the kept modes.
    """

    mean: PointCloud
    components: np.ndarray
    eigenvalues: np.ndarray
    total_variance: float

    def __post_init__(self):
        comp = np.array(self.components, dtype=float)
        eig = np.array(self.eigenvalues, dtype=float)
        t = self.mean.num_points
        if comp.ndim != 2 or comp.shape[1] != 2 * t:
            raise ValueError("components must have shape (n_modes, 2T)")
        if eig.shape != (comp.shape[0],):
            raise ValueError("one eigenvalue per component required")
        if np.any(eig < 0):
            raise ValueError("eigenvalues must be non-negative")
        if np.any(np.diff(eig) > 1e-12):
            raise ValueError("eigenvalues must be in descending order")
        comp.setflags(write=False)
        eig.setflags(write=False)
        object.__setattr__(self, "components", comp)
        object.__setattr__(self, "eigenvalues", eig)

    @property
    def num_points(self) -> int:
        return self.mean.num_points

    @property
    def n_modes(self) -> int:
        return self.components.shape[0]

    @property
    def mean_vector(self) -> np.ndarray:
        return self.mean.points.reshape(-1)

    def retained_variance(self) -> float:
        if self.total_variance <= 0:
            return 1.0
        return float(self.eigenvalues.sum() / self.total_variance)

    def beta_bounds(self) -> np.ndarray:
        """Per-mode clamp half-widths, CLAMP_SIGMAS * sqrt(eigenvalue)."""
        return CLAMP_SIGMAS * np.sqrt(self.eigenvalues)


def fit_pdm(shapes, beta_dim: int) -> ShapeModel:
    """PCA of aligned shapes, keeping the beta_dim largest-variance modes.

    The covariance is normalized by the number of shapes K; beta_dim must
    not exceed min(2T, K - 1) since K mean-free shapes span at most K - 1
    directions.  Component signs follow a deterministic convention: the
    largest-magnitude entry of each component is made positive.
    """
    if len(shapes) < 2:
        raise ValueError("need at least 2 shapes to fit a model")
    t = shapes[0].num_points
    for s in shapes:
        if s.num_points != t:
            raise ValueError("shapes must all have the same point count")
    k = len(shapes)
    dim = 2 * t
    max_modes = min(dim, k - 1)
    if not (1 <= beta_dim <= max_modes):
        raise ValueError(
            f"beta_dim must be in [1, {max_modes}] for {k} shapes of {t} points")
    data = np.stack([s.points.reshape(-1) for s in shapes])
    mean = data.mean(axis=0)
    dev = data - mean
    cov = dev.T @ dev / k
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:beta_dim]
    eig = np.clip(evals[order], 0.0, None)
    comp = evecs[:, order].T
    for j in range(comp.shape[0]):
        lead = np.argmax(np.abs(comp[j]))
        if comp[j, lead] < 0:
            comp[j] = -comp[j]
    return ShapeModel(
        mean=PointCloud(mean.reshape(t, 2), t // 2),
        components=comp,
        eigenvalues=eig,
        total_variance=float(np.trace(cov)),
    )


def _check_beta(model: ShapeModel, beta) -> np.ndarray:
    b = np.asarray(beta, dtype=float).reshape(-1)
    if b.shape != (model.n_modes,):
        raise ValueError(f"expected {model.n_modes} deformation coefficients")
    if not np.all(np.isfinite(b)):
        raise ValueError("non-finite deformation coefficients")
    return b


def clamp_beta(model: ShapeModel, beta) -> np.ndarray:
    """Clip each coefficient to +- CLAMP_SIGMAS standard deviations of its mode."""
    b = _check_beta(model, beta)
    bound = model.beta_bounds()
    return np.clip(b, -bound, bound)


def deform(model: ShapeModel, beta) -> PointCloud:
    """Canonical-space shape mean + sum_j beta_j * component_j (no clamping)."""
    b = _check_beta(model, beta)
    vec = model.mean_vector + b @ model.components
    return PointCloud(vec.reshape(-1, 2), model.num_points // 2)


def synthesize(model: ShapeModel, theta, beta) -> PointCloud:
    """Image-space shape: affine map applied to the clamped deformation."""
    return apply_affine(theta, deform(model, clamp_beta(model, beta)))


def synthesize_with_jacobian(model: ShapeModel, theta, beta):
    """Synthesized points plus analytic Jacobians.

    Returns (points (T,2), j_theta (T,2,6), j_beta (T,2,n_modes)).
    Affine parameters are ordered row-major (a11, a12, tx, a21, a22, ty).
    The clamp on the coefficients is treated as straight-through: the
    Jacobian is that of the unclamped map evaluated at the clamped value.
    """
    m = check_affine(theta)
    b = clamp_beta(model, beta)
    t = model.num_points
    canon = (model.mean_vector + b @ model.components).reshape(t, 2)
    pts = canon @ m[:, :2].T + m[:, 2]

    j_aff = np.zeros((t, 2, 6))
    j_aff[:, 0, 0] = canon[:, 0]
    j_aff[:, 0, 1] = canon[:, 1]
    j_aff[:, 0, 2] = 1.0
    j_aff[:, 1, 3] = canon[:, 0]
    j_aff[:, 1, 4] = canon[:, 1]
    j_aff[:, 1, 5] = 1.0

    comp = model.components.reshape(model.n_modes, t, 2)
    # d pts / d coeff_j = A @ component_j per point.
    j_coef = np.einsum("ab,jtb->taj", m[:, :2], comp)
    return PointCloud(pts, t // 2), j_aff, j_coef


def project(model: ShapeModel, shape: PointCloud):
    """Least-squares coefficients for a canonical-space shape.

    Returns (coeffs, residual_norm) where residual_norm is the Euclidean
    norm of the part of (shape - mean) outside the component span.
    """
    if shape.num_points != model.num_points:
        raise ValueError("shape point count does not match the model")
    dev = shape.points.reshape(-1) - model.mean_vector
    coeffs = model.components @ dev
    residual = dev - coeffs @ model.components
    return coeffs, float(np.linalg.norm(residual))
