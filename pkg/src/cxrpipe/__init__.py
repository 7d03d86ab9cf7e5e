"""Two-stage chest-image recognition pipeline: preprocessing, U-Net lung
segmentation, CNN classification with cross-validated metrics, and
class-activation saliency — all CPU numpy, fully offline.
"""

from .estimators import CNNClassifier, UNetSegmenter
from .imageproc import (AugmentSpec, apply_mask, augment, clahe, complement, compose_3channel,
                        equalize_hist, resize_bilinear)
from .metrics import (ConfusionMatrix, PixelConfusion, accumulate_folds, build_report,
                      class_metrics, confidence_interval, roc_curve, seg_metrics,
                      weighted_overall)
from .nets import (ClassifierConfig, ModelGraph, UNetConfig, build_classifier, build_unet,
                   load_checkpoint, replace_head, save_checkpoint)
from .optim import TrainConfig, adam_step, schedule_update, sgd_momentum_step
from .saliency import SaliencyMap, grad_cam, score_cam, upsample_normalize

__version__ = "0.1.0"

__all__ = [
    "AugmentSpec", "CNNClassifier", "ClassifierConfig", "ConfusionMatrix", "ModelGraph",
    "PixelConfusion", "SaliencyMap", "TrainConfig", "UNetConfig", "UNetSegmenter",
    "accumulate_folds", "adam_step", "apply_mask", "augment", "build_classifier",
    "build_report", "build_unet", "clahe", "class_metrics", "complement",
    "compose_3channel", "confidence_interval", "equalize_hist", "grad_cam",
    "load_checkpoint", "replace_head", "resize_bilinear", "roc_curve", "save_checkpoint",
    "schedule_update", "score_cam", "seg_metrics", "sgd_momentum_step", "upsample_normalize",
    "weighted_overall",
]
