"""Segmentation quality metrics: Dice, Hausdorff distance, component count."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .raster import BinaryMask, RasterMask


def _mask_bool(mask, threshold: float = 0.5) -> np.ndarray:
    if isinstance(mask, BinaryMask):
        return mask.data
    if isinstance(mask, RasterMask):
        return mask.data >= threshold
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise ValueError("mask must be 2-D")
    if arr.dtype == np.bool_:
        return arr
    return arr >= threshold


def dice(a, b) -> float:
    """Overlap coefficient 2|A n B| / (|A| + |B|); 1.0 when both are empty."""
    am = _mask_bool(a)
    bm = _mask_bool(b)
    if am.shape != bm.shape:
        raise ValueError("mask shapes differ")
    total = int(am.sum()) + int(bm.sum())
    if total == 0:
        return 1.0
    inter = int(np.logical_and(am, bm).sum())
    return 2.0 * inter / total


def boundary_pixels(mask) -> np.ndarray:
    """Centers (x, y) of foreground pixels with a 4-neighbor background pixel.

    Neighbors outside the image count as background, so foreground pixels on
    the image border are boundary pixels.
    """
    m = _mask_bool(mask)
    if not m.any():
        return np.empty((0, 2))
    padded = np.pad(m, 1, constant_values=False)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1]
                & padded[1:-1, :-2] & padded[1:-1, 2:])
    rows, cols = np.nonzero(m & ~interior)
    return np.stack([cols.astype(float), rows.astype(float)], axis=1)


def hausdorff_mm(a, b, spacing_mm: float | None = None) -> float:
    """Symmetric Hausdorff distance between mask boundaries, in millimetres.

    Exact maximum over boundary pixel centers (no percentile variant).
    """
    am = _mask_bool(a)
    bm = _mask_bool(b)
    if am.shape != bm.shape:
        raise ValueError("mask shapes differ")
    if not (am.any() and bm.any()):
        raise ValueError("Hausdorff distance undefined for empty masks")
    if spacing_mm is None:
        sa = a.spacing_mm if isinstance(a, (BinaryMask, RasterMask)) else 1.0
        sb = b.spacing_mm if isinstance(b, (BinaryMask, RasterMask)) else 1.0
        if not np.isclose(sa, sb):
            raise ValueError("masks have different pixel spacing")
        spacing_mm = sa
    pa = boundary_pixels(am)
    pb = boundary_pixels(bm)
    d2 = (np.sum(pa * pa, axis=1)[:, None] + np.sum(pb * pb, axis=1)[None, :]
          - 2.0 * (pa @ pb.T))
    np.maximum(d2, 0.0, out=d2)
    forward = float(np.max(np.min(d2, axis=1)))
    backward = float(np.max(np.min(d2, axis=0)))
    return float(np.sqrt(max(forward, backward)) * spacing_mm)


def connected_components(mask, threshold: float = 0.5) -> int:
    """Number of 8-connected foreground components after thresholding."""
    m = _mask_bool(mask, threshold)
    h, w = m.shape
    labels = np.zeros((h, w), dtype=np.int64)
    parent: list[int] = [0]

    def find(x: int) -> int:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    def union(x: int, y: int) -> None:
        rx, ry = find(x), find(y)
        if rx != ry:
            parent[max(rx, ry)] = min(rx, ry)

    # Two-pass labeling; the scan only needs the four already-visited
    # neighbors (W, NW, N, NE) for 8-connectivity.
    next_label = 1
    for r in range(h):
        row = m[r]
        for c in range(w):
            if not row[c]:
                continue
            neighbors = []
            if c > 0 and m[r, c - 1]:
                neighbors.append(labels[r, c - 1])
            if r > 0:
                if m[r - 1, c]:
                    neighbors.append(labels[r - 1, c])
                if c > 0 and m[r - 1, c - 1]:
                    neighbors.append(labels[r - 1, c - 1])
                if c + 1 < w and m[r - 1, c + 1]:
                    neighbors.append(labels[r - 1, c + 1])
            if not neighbors:
                labels[r, c] = next_label
                parent.append(next_label)
                next_label += 1
            else:
                lab = min(neighbors)
                labels[r, c] = lab
                for other in neighbors:
                    union(lab, other)
    roots = {find(l) for l in range(1, next_label)}
    return len(roots)


@dataclass
class EvalReport:
    """Per-sample metrics and their aggregates (mean, n-1 standard deviation)."""

    sample_dice: list[float] = field(default_factory=list)
    sample_hd_mm: list[float] = field(default_factory=list)
    sample_components: list[int] = field(default_factory=list)

    def _agg(self, values) -> tuple[float, float]:
        arr = np.asarray(values, dtype=float)
        mean = float(arr.mean())
        sd = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
        return mean, sd

    def dice_mean_sd(self) -> tuple[float, float]:
        return self._agg(self.sample_dice)

    def hd_mean_sd(self) -> tuple[float, float]:
        return self._agg(self.sample_hd_mm)

    def components_mean_sd(self) -> tuple[float, float]:
        return self._agg(self.sample_components)

    def rows(self) -> list[tuple[float, float, int]]:
        return list(zip(self.sample_dice, self.sample_hd_mm,
                        self.sample_components))


def evaluate(pred_masks, gt_masks, spacing_mm: float | None = None) -> EvalReport:
    """Dice, Hausdorff, and component count of each prediction against its target."""
    if len(pred_masks) != len(gt_masks):
        raise ValueError("prediction and target counts differ")
    if len(pred_masks) == 0:
        raise ValueError("nothing to evaluate")
    report = EvalReport()
    for pred, gt in zip(pred_masks, gt_masks):
        report.sample_dice.append(dice(pred, gt))
        report.sample_hd_mm.append(hausdorff_mm(pred, gt, spacing_mm))
        report.sample_components.append(connected_components(pred))
    return report
