"""Ring-shaped structure segmentation with a deformable point-cloud model.

A closed two-chain point cloud with a fixed triangulation is deformed by
a PCA shape model, placed by an affine map, and rendered by a
differentiable soft rasterizer, so point-cloud and mask supervision can
train the same parameters.  Includes a synthetic ring generator, a small
feed-forward parameter regressor, evaluation metrics, and a CLI wiring
the pipeline end to end.
"""
__version__ = "0.1.0"

from .geometry import (PointCloud, SimilarityParams, apply_affine,
                       compose_affine, estimate_similarity, identity_affine,
                       invert_affine, similarity_to_affine)
from .raster import (BinaryMask, FaceList, RasterConfig, RasterMask,
                     build_faces, rasterize_hard, rasterize_soft,
                     rasterize_soft_backward)
from .ssm import (ShapeModel, clamp_beta, deform, fit_pdm, project,
                  synthesize, synthesize_with_jacobian)
from .alignment import (CorrespondenceQuadruple, CorrespondenceSet,
                        LandmarkTriple, build_quadruples, extract_contour,
                        gpa, split_and_resample)
from .losses import LossValue, mask_loss, point_loss, total_loss
from .metrics import (EvalReport, connected_components, dice, evaluate,
                      hausdorff_mm)
from .synthgen import GenConfig, SyntheticSample, generate, generate_from_model
from .regressor import Adam, RegressorModel, downsample_image, image_to_input
from .train import (FitConfig, FitResult, TrainReport, augment_sample,
                    fit_single, fit_to_points, predict_cloud, train_regressor)

__all__ = [
    "PointCloud", "SimilarityParams", "apply_affine", "compose_affine",
    "estimate_similarity", "identity_affine", "invert_affine",
    "similarity_to_affine",
    "BinaryMask", "FaceList", "RasterConfig", "RasterMask", "build_faces",
    "rasterize_hard", "rasterize_soft", "rasterize_soft_backward",
    "ShapeModel", "clamp_beta", "deform", "fit_pdm", "project",
    "synthesize", "synthesize_with_jacobian",
    "CorrespondenceQuadruple", "CorrespondenceSet", "LandmarkTriple",
    "build_quadruples", "extract_contour", "gpa", "split_and_resample",
    "LossValue", "mask_loss", "point_loss", "total_loss",
    "EvalReport", "connected_components", "dice", "evaluate", "hausdorff_mm",
    "GenConfig", "SyntheticSample", "generate", "generate_from_model",
    "Adam", "RegressorModel", "downsample_image", "image_to_input",
    "FitConfig", "FitResult", "TrainReport", "augment_sample", "fit_single",
    "fit_to_points", "predict_cloud", "train_regressor",
]
