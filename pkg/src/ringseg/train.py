"""Model fitting and regressor training.

Two fitting modes against a single target: gradient descent of the
rendered-mask loss over the affine + deformation parameters (fit_single),
and alternating linear least squares against a target point cloud
(fit_to_points).  train_regressor learns the feed-forward predictor in
two stages: point loss only until the validation loss plateaus, then
point loss plus the weighted rendered-mask loss.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import PointCloud, estimate_similarity, identity_affine
from .losses import mask_loss, point_loss
from .raster import (BinaryMask, RasterConfig, rasterize_hard, render_hard,
                     render_soft, render_soft_backward)
from .metrics import dice
from .regressor import Adam, RegressorModel, image_to_input
from .ssm import ShapeModel, clamp_beta, synthesize, synthesize_with_jacobian


@dataclass(frozen=True)
class FitConfig:
    lr: float = 0.001
    delta: float = 0.5             # weight of the rendered-mask term
    tau: float = 0.5
    max_iters: int = 300
    seed: int = 0
    batch_size: int = 32
    # regressor architecture and schedule
    hidden: tuple = (256, 64)
    downsample: int = 16
    val_fraction: float = 0.2
    stage1_max_epochs: int = 500
    stage2_epochs: int = 150
    patience: int = 10
    plateau_tol: float = 1e-5
    # on-the-fly augmentation ranges for augment_sample; training configs
    # that regress pose should restrict the draw to the flip group
    # (rotation_max_deg=0, translation_frac=0): continuous pose jitter
    # relabels the same image every epoch, which stalls the regressor in
    # the predict-the-mean basin, while flips add exact new (image, label)
    # pairs with no label noise
    augment: bool = True
    flip_prob: float = 0.5
    rotation_max_deg: float = 30.0
    translation_frac: float = 0.1
    # direct fitting: the blur width is annealed from tau down to
    # fit_tau_final so coarse gradients guide the approach and a sharp
    # objective settles the boundary; the init rotation is chosen by a
    # coarse sweep over +-init_rot_sweep_deg (0 disables the sweep)
    theta_reg: float = 1e-6
    fit_tau_final: float = 0.05
    init_rot_sweep_deg: float = 30.0


@dataclass
class FitResult:
    theta: np.ndarray
    beta: np.ndarray
    points: PointCloud
    # rows of (iteration, point_loss, mask_loss, total)
    loss_trace: list = field(default_factory=list)


@dataclass
class TrainReport:
    # rows of (epoch, stage, train_point, val_point, val_dice)
    rows: list = field(default_factory=list)
    stage2_start: int | None = None

    def to_lines(self) -> list[str]:
        return [f"{e} {s} {tp:.17g} {vp:.17g} {vd:.17g}"
                for e, s, tp, vp, vd in self.rows]


def _bbox(points: np.ndarray):
    return points.min(axis=0), points.max(axis=0)


def bbox_init_affine(model: ShapeModel, target: BinaryMask) -> np.ndarray:
    """Similarity placing the mean shape's bounding box onto the mask's."""
    rows, cols = np.nonzero(target.data)
    if rows.size == 0:
        raise ValueError("empty target mask")
    mask_lo = np.array([cols.min(), rows.min()], dtype=float)
    mask_hi = np.array([cols.max(), rows.max()], dtype=float)
    mean_lo, mean_hi = _bbox(model.mean.points)
    mean_extent = np.maximum(mean_hi - mean_lo, 1e-9)
    ratios = (mask_hi - mask_lo) / mean_extent
    scale = float(ratios.mean())
    if scale <= 0:
        raise ValueError("degenerate target mask extent")
    t = (mask_lo + mask_hi) / 2 - scale * (mean_lo + mean_hi) / 2
    return np.array([[scale, 0.0, t[0]], [0.0, scale, t[1]]])


def _sweep_init_rotation(model: ShapeModel, faces, target: BinaryMask,
                         cfg: FitConfig, theta0: np.ndarray) -> np.ndarray:
    """Pick the init rotation by a coarse render-and-score sweep.

    The bounding-box similarity fixes scale and translation but not
    rotation, and the mask loss is too flat in rotation for the optimizer
    to recover large angles on a nearly annular shape.  Rotating the
    placed mean about the mask centre and scoring one blurred render per
    candidate angle picks the right basin before descent starts.
    """
    half = abs(cfg.init_rot_sweep_deg)
    if half == 0.0:
        return theta0
    steps = 2 * max(1, int(round(half / 5.0))) + 1
    rows, cols = np.nonzero(target.data)
    mask_lo = np.array([cols.min(), rows.min()], dtype=float)
    mask_hi = np.array([cols.max(), rows.max()], dtype=float)
    raster_cfg = RasterConfig(width=target.width, height=target.height,
                              spacing_mm=target.spacing_mm, tau=cfg.tau)
    zeros = np.zeros(model.n_modes)
    best = None
    for angle in np.deg2rad(np.linspace(-half, half, steps)):
        c, s = np.cos(angle), np.sin(angle)
        rot = np.array([[c, -s], [s, c]])
        # refit scale and centre for each candidate so the rotated mean's
        # own bounding box, not the unrotated one's, matches the mask's
        rotated = model.mean.points @ rot.T
        lo, hi = _bbox(rotated)
        scale = float(((mask_hi - mask_lo) / np.maximum(hi - lo, 1e-9)).mean())
        t = (mask_lo + mask_hi) / 2 - scale * (lo + hi) / 2
        cand = np.column_stack([scale * rot, t])
        soft = render_soft(synthesize(model, cand, zeros), faces, raster_cfg)
        value = mask_loss(soft, target).value
        if best is None or value < best[0]:
            best = (value, cand)
    return best[1]


def _chain_param_grads(j_aff, j_coef, point_grad):
    g_aff = np.einsum("tpk,tp->k", j_aff, point_grad)
    g_coef = np.einsum("tpk,tp->k", j_coef, point_grad)
    return g_aff, g_coef


def fit_single(model: ShapeModel, faces, target: BinaryMask,
               cfg: FitConfig, init=None) -> FitResult:
    """Fit affine + deformation parameters to one mask by Adam.

    The objective is delta * (soft Dice loss of the rendered shape)
    plus a tiny pull of the affine toward its initialization; deformation
    coefficients are projected into the clamp box after every step.  The
    blur width is annealed geometrically from cfg.tau to cfg.fit_tau_final
    over the first 70% of the iterations; the returned parameters are the
    iterate with the best hard-rendered overlap against the target, not
    the last.  The default initialization is the bounding-box similarity
    with its rotation chosen by a coarse sweep (see _sweep_init_rotation).
    """
    if init is None:
        theta0 = _sweep_init_rotation(model, faces, target, cfg,
                                      bbox_init_affine(model, target))
        coeffs0 = np.zeros(model.n_modes)
    else:
        theta0 = np.array(init[0], dtype=float)
        coeffs0 = np.array(init[1], dtype=float)
    tau_final = min(cfg.tau, cfg.fit_tau_final)
    n_anneal = int(round(0.7 * cfg.max_iters)) if tau_final < cfg.tau else 0
    theta = theta0.copy()
    coeffs = clamp_beta(model, coeffs0)
    opt = Adam([theta, coeffs], lr=cfg.lr)
    best = None
    trace = []
    stall = 0
    sharp_best = -np.inf
    for it in range(cfg.max_iters):
        if it < n_anneal:
            tau = cfg.tau * (tau_final / cfg.tau) ** (it / n_anneal)
        else:
            tau = tau_final
        raster_cfg = RasterConfig(width=target.width, height=target.height,
                                  spacing_mm=target.spacing_mm, tau=tau)
        cloud, j_aff, j_coef = synthesize_with_jacobian(model, theta, coeffs)
        soft = render_soft(cloud, faces, raster_cfg)
        ml = mask_loss(soft, target, want_grad=True)
        reg = cfg.theta_reg * float(np.sum((theta - theta0) ** 2))
        total = cfg.delta * ml.value + reg
        if not np.isfinite(total):
            raise FloatingPointError("fit diverged")
        trace.append((it, 0.0, ml.value, total))
        # selection runs on the task metric: the blurred losses are not
        # comparable across the anneal, but the hard-rendered overlap is,
        # so the returned iterate is the best one ever visited by it
        overlap = dice(render_hard(cloud, faces, raster_cfg), target)
        if best is None or overlap > best[0] + 1e-12:
            best = (overlap, theta.copy(), coeffs.copy())
        if it >= n_anneal:
            if overlap > sharp_best + 1e-12:
                sharp_best = overlap
                stall = 0
            else:
                stall += 1
                if stall >= 40:
                    break
        vert_grad = render_soft_backward(cloud, faces, raster_cfg,
                                         ml.grad_pixels)
        g_aff, g_coef = _chain_param_grads(j_aff, j_coef,
                                           cfg.delta * vert_grad)
        g_theta = g_aff.reshape(2, 3) + 2.0 * cfg.theta_reg * (theta - theta0)
        opt.step([g_theta, g_coef])
        np.clip(coeffs, -model.beta_bounds(), model.beta_bounds(),
                out=coeffs)
    _, theta, coeffs = best if best is not None else (0.0, theta, coeffs)
    return FitResult(theta=theta, beta=coeffs,
                     points=synthesize(model, theta, coeffs),
                     loss_trace=trace)


def fit_to_points(model: ShapeModel, target: PointCloud,
                  cfg: FitConfig, init=None) -> FitResult:
    """Fit affine + deformation parameters to a target cloud.

    Alternates two exact linear least-squares solves (affine given
    coefficients, coefficients given affine, with the box projection on
    the coefficients) until the point loss stops improving.
    """
    if target.num_points != model.num_points:
        raise ValueError("target point count does not match the model")
    if init is None:
        theta = identity_affine()
        coeffs = np.zeros(model.n_modes)
    else:
        theta = np.array(init[0], dtype=float)
        coeffs = clamp_beta(model, np.array(init[1], dtype=float))
    t = model.num_points
    comp = model.components.reshape(model.n_modes, t, 2)
    target_flat = target.points.reshape(-1)
    bounds = model.beta_bounds()
    trace = []
    prev = np.inf
    for it in range(max(1, cfg.max_iters)):
        # affine step: rows of theta solve independent 3-parameter systems
        canon = (model.mean_vector + coeffs @ model.components).reshape(t, 2)
        design = np.column_stack([canon, np.ones(t)])
        sol_x, *_ = np.linalg.lstsq(design, target.points[:, 0], rcond=None)
        sol_y, *_ = np.linalg.lstsq(design, target.points[:, 1], rcond=None)
        theta = np.stack([sol_x, sol_y])
        # coefficient step: linear in the mapped components
        mapped = np.einsum("ab,jtb->jta", theta[:, :2], comp).reshape(
            model.n_modes, 2 * t)
        base = (model.mean.points @ theta[:, :2].T + theta[:, 2]).reshape(-1)
        sol, *_ = np.linalg.lstsq(mapped.T, target_flat - base, rcond=None)
        coeffs = np.clip(sol, -bounds, bounds)
        value = point_loss(synthesize(model, theta, coeffs), target).value
        trace.append((it, value, 0.0, value))
        if prev - value < 1e-14:
            break
        prev = value
    return FitResult(theta=theta, beta=coeffs,
                     points=synthesize(model, theta, coeffs),
                     loss_trace=trace)


def apply_geometric(image: np.ndarray, points: PointCloud, flip_lr: bool,
                    flip_ud: bool, angle_rad: float, shift):
    """Shared image/point transform: flips, rotation about the image
    center, then translation.  Image resampling is bilinear with zero
    fill; after an odd number of flips both chains are index-reversed so
    the two chains keep running in the same direction."""
    img = np.asarray(image, dtype=float)
    h, w = img.shape
    center = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
    flip = np.diag([-1.0 if flip_lr else 1.0, -1.0 if flip_ud else 1.0])
    c, s = np.cos(angle_rad), np.sin(angle_rad)
    rot = np.array([[c, -s], [s, c]])
    lin = rot @ flip
    offset = np.asarray(shift, dtype=float)

    pts = (points.points - center) @ lin.T + center + offset
    if flip_lr != flip_ud:
        half = points.inner_count
        pts = np.concatenate([pts[:half][::-1], pts[half:][::-1]])
    out_cloud = PointCloud(pts, points.inner_count)

    inv = np.linalg.inv(lin)
    gx, gy = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    src = np.stack([gx.ravel(), gy.ravel()], axis=1)
    src = (src - center - offset) @ inv.T + center
    x, y = src[:, 0], src[:, 1]
    x0 = np.floor(x).astype(int)
    y0 = np.floor(y).astype(int)
    fx, fy = x - x0, y - y0
    vals = np.zeros(x.shape[0])
    for dy in (0, 1):
        for dx in (0, 1):
            xi = x0 + dx
            yi = y0 + dy
            weight = (fx if dx else 1.0 - fx) * (fy if dy else 1.0 - fy)
            ok = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            contrib = np.zeros_like(vals)
            contrib[ok] = img[yi[ok], xi[ok]]
            vals += weight * contrib
    return vals.reshape(h, w), out_cloud


def augment_sample(image: np.ndarray, points: PointCloud,
                   rng: np.random.Generator, cfg: FitConfig | None = None):
    """Random flip / rotation / translation applied identically to the
    image and its point labels.  Always consumes the same number of
    draws, so a fixed seed yields a fixed augmentation stream."""
    if cfg is None:
        cfg = FitConfig()
    h, w = np.asarray(image).shape
    flip_lr = rng.random() < cfg.flip_prob
    flip_ud = rng.random() < cfg.flip_prob
    angle = np.deg2rad(rng.uniform(-cfg.rotation_max_deg, cfg.rotation_max_deg))
    shift = rng.uniform(-cfg.translation_frac, cfg.translation_frac, 2)
    shift = shift * np.array([w, h])
    return apply_geometric(image, points, flip_lr, flip_ud, float(angle), shift)


def _as_triplets(samples):
    out = []
    for s in samples:
        if hasattr(s, "image"):
            out.append((s.image, s.points, s.mask))
        else:
            image, points, mask = s
            out.append((image, points, mask))
    return out


def mean_placement_affine(model: ShapeModel, clouds) -> np.ndarray:
    """Rotation-free placement of the model mean at the dataset's mean
    scale and position: a scaled identity plus the mean centroid shift."""
    scales = []
    centroids = []
    for cloud in clouds:
        sim = estimate_similarity(model.mean.points, cloud.points)
        scales.append(sim.scale)
        centroids.append(cloud.centroid())
    scale = float(np.mean(scales))
    t = np.mean(centroids, axis=0) - scale * model.mean.centroid()
    return np.array([[scale, 0.0, t[0]], [0.0, scale, t[1]]])


def split_regressor_output(out: np.ndarray):
    theta = out[:6].reshape(2, 3)
    coeffs = out[6:]
    return theta, coeffs


def predict_cloud(net: RegressorModel, model: ShapeModel,
                  image: np.ndarray) -> tuple[np.ndarray, np.ndarray, PointCloud]:
    """Regressor prediction for one image: (affine, coeffs, synthesized cloud)."""
    target = int(round(np.sqrt(net.input_size)))
    out, _ = net.forward(image_to_input(image, target))
    theta, coeffs = split_regressor_output(out)
    return theta, coeffs, synthesize(model, theta, coeffs)


def train_regressor(samples, model: ShapeModel, faces, cfg: FitConfig):
    """Two-stage training of the parameter regressor.

    Stage 1 minimizes the point loss until the validation point loss has
    not improved by plateau_tol for `patience` epochs (or stage1_max_epochs
    is hit); stage 2 adds delta times the rendered-mask loss for
    stage2_epochs more epochs.  Setting stage2_epochs to zero stops at the
    stage-1 plateau, which is the point-only ablation arm.

    Returns (regressor, report).  With a fixed seed the report is
    bit-reproducible.
    """
    data = _as_triplets(samples)
    if len(data) < 4:
        raise ValueError("need at least 4 samples to train")
    size = np.asarray(data[0][0]).shape[0]
    for image, _, _ in data:
        img = np.asarray(image)
        if img.ndim != 2 or img.shape != (size, size):
            raise ValueError("all images must be square and equally sized")
    if size % cfg.downsample != 0:
        raise ValueError("image size must be divisible by the downsample "
                         "target")

    rng = np.random.default_rng(cfg.seed)
    perm = rng.permutation(len(data))
    n_val = max(1, int(round(cfg.val_fraction * len(data))))
    val_idx = perm[:n_val]
    train_idx = perm[n_val:]
    if train_idx.size == 0:
        raise ValueError("validation split leaves no training samples")

    theta_init = mean_placement_affine(
        model, [data[i][1] for i in train_idx])
    bias = np.concatenate([theta_init.reshape(-1), np.zeros(model.n_modes)])
    net = RegressorModel([cfg.downsample ** 2, *cfg.hidden,
                          6 + model.n_modes], seed=cfg.seed, output_bias=bias)
    opt = Adam(net.parameters(), lr=cfg.lr)

    val_feats = np.stack([image_to_input(data[i][0], cfg.downsample)
                          for i in val_idx])
    raster_cfg = RasterConfig(width=size, height=size, tau=cfg.tau)

    def validation_metrics():
        outs, _ = net.forward(val_feats)
        losses = []
        dices = []
        for row, i in zip(outs, val_idx):
            theta, coeffs = split_regressor_output(row)
            cloud = synthesize(model, theta, coeffs)
            losses.append(point_loss(cloud, data[i][1]).value)
            rendered = render_hard(cloud, faces, raster_cfg)
            dices.append(dice(rendered, data[i][2]))
        return float(np.mean(losses)), float(np.mean(dices))

    def run_batch(indices, with_mask: bool):
        feats = []
        prepared = []
        for i in indices:
            image, points, _ = data[i]
            if cfg.augment:
                image, points = augment_sample(image, points, rng, cfg)
            feats.append(image_to_input(image, cfg.downsample))
            prepared.append((points, image))
        feats = np.stack(feats)
        outs, cache = net.forward(feats)
        grad_out = np.zeros_like(outs)
        batch_loss = 0.0
        for row, (gt_points, _), gslot in zip(outs, prepared, grad_out):
            theta, coeffs = split_regressor_output(row)
            cloud, j_aff, j_coef = synthesize_with_jacobian(model, theta,
                                                            coeffs)
            pl = point_loss(cloud, gt_points, want_grad=True)
            batch_loss += pl.value
            vert_grad = pl.grad_points
            if with_mask and cfg.delta > 0.0:
                gt_mask = rasterize_hard(gt_points, faces, size, size)
                soft = render_soft(cloud, faces, raster_cfg)
                ml = mask_loss(soft, gt_mask, want_grad=True)
                mgrad = render_soft_backward(cloud, faces, raster_cfg,
                                             ml.grad_pixels)
                vert_grad = vert_grad + cfg.delta * mgrad
            g_aff, g_coef = _chain_param_grads(j_aff, j_coef, vert_grad)
            gslot[:6] = g_aff
            gslot[6:] = g_coef
        grad_out /= len(indices)
        if not np.all(np.isfinite(grad_out)):
            raise FloatingPointError("training diverged")
        opt.step(net.backward(cache, grad_out))
        return batch_loss / len(indices)

    report = TrainReport()
    epoch = 0
    stage = 1
    best_val = np.inf
    since_improve = 0
    stage2_left = cfg.stage2_epochs
    while True:
        epoch += 1
        order = rng.permutation(train_idx)
        losses = []
        for start in range(0, order.size, cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            losses.append(run_batch(batch, with_mask=stage == 2))
        val_point, val_dice = validation_metrics()
        report.rows.append((epoch, stage, float(np.mean(losses)),
                            val_point, val_dice))
        if stage == 1:
            if val_point < best_val - cfg.plateau_tol:
                best_val = val_point
                since_improve = 0
            else:
                since_improve += 1
            if since_improve >= cfg.patience or epoch >= cfg.stage1_max_epochs:
                stage = 2
                report.stage2_start = epoch + 1
                if stage2_left == 0:
                    break
        else:
            stage2_left -= 1
            if stage2_left == 0:
                break
    return net, report
