"""Training objectives: point RMSE, soft Dice mask loss, and their sum."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import PointCloud
from .raster import (BinaryMask, RasterConfig, RasterMask, render_soft,
                     render_soft_backward)

DICE_EPS = 1.0


@dataclass(frozen=True)
class LossValue:
    """Scalar loss and, when requested, its gradient.

    point_loss and total_loss fill grad_points, the (T, 2) gradient with
    respect to the predicted points; mask_loss fills grad_pixels, the
    (H, W) gradient with respect to the predicted mask values.
    """

    value: float
    grad_points: np.ndarray | None = None
    grad_pixels: np.ndarray | None = None


def point_loss(pred: PointCloud, target: PointCloud,
               want_grad: bool = False) -> LossValue:
    """Root-mean-square point-to-point distance between corresponding points.

    L = sqrt((1/T) sum_t ||pred_t - target_t||^2); the gradient is
    (pred - target) / (T * L), taken as zero at the exact optimum L = 0.
    """
    if pred.num_points != target.num_points:
        raise ValueError("point clouds must have the same length")
    diff = pred.points - target.points
    t = pred.num_points
    value = float(np.sqrt(np.sum(diff * diff) / t))
    if not want_grad:
        return LossValue(value)
    if value == 0.0:
        return LossValue(0.0, grad_points=np.zeros_like(diff))
    return LossValue(value, grad_points=diff / (t * value))


def mask_loss(pred: RasterMask, target: BinaryMask,
              want_grad: bool = False) -> LossValue:
    """One minus the soft Dice overlap between a soft mask and a binary target.

    L = 1 - (2 sum(p*g) + eps) / (sum(p) + sum(g) + eps) with eps = 1 pixel,
    smooth in the predicted pixel values.
    """
    if pred.data.shape != target.data.shape:
        raise ValueError("mask shapes differ")
    p = pred.data
    g = target.data.astype(float)
    num = 2.0 * float(np.sum(p * g)) + DICE_EPS
    den = float(np.sum(p)) + float(np.sum(g)) + DICE_EPS
    value = 1.0 - num / den
    if not want_grad:
        return LossValue(value)
    grad = -(2.0 * g * den - num) / (den * den)
    return LossValue(value, grad_pixels=grad)


def total_loss(pred: PointCloud, target_points: PointCloud,
               target_mask: BinaryMask, faces, raster_cfg: RasterConfig,
               delta: float = 0.5, want_grad: bool = False) -> LossValue:
    """Point loss plus delta times the rendered mask loss.

    With want_grad the mask term is chained through the soft rasterizer,
    yielding a single (T, 2) gradient with respect to the predicted points.
    """
    if delta < 0:
        raise ValueError("mask weight must be non-negative")
    pl = point_loss(pred, target_points, want_grad)
    if delta == 0.0:
        return LossValue(pl.value, grad_points=pl.grad_points)
    soft = render_soft(pred, faces, raster_cfg)
    ml = mask_loss(soft, target_mask, want_grad)
    value = pl.value + delta * ml.value
    if not want_grad:
        return LossValue(value)
    mask_grad = render_soft_backward(pred, faces, raster_cfg, ml.grad_pixels)
    return LossValue(value, grad_points=pl.grad_points + delta * mask_grad)
