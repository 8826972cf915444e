"""Dual-path lesion segmentation and classification on a small numpy autodiff core.

The local-patch path (LPL) classifies a context crop; the contour-guided path
(CGL) segments the bounding-box crop with a U-Net refined by mean-field CRF
inference and classifies the masked result.  A fusion head combines both.
"""

from .config import Config, RunConfig, config_text, load_config, parse_config
from .crf import CrfConfig, mean_field_infer, pairwise_energy, segmentation_loss
from .data import (AnnotatedImage, DataConfig, DatasetSplit, RoiSample, SynthSpec, extract_rois, load_dataset,
                   load_rois, save_dataset, split_dataset, synth_dataset)
from .errors import (ConfigError, ContractError, DualCoreError, FormatError, MetricError, ShapeError,
                     SplitAccessError, TrainingError)
from .gradcheck import check_gradients, finite_diff_grad
from .metrics import MetricReport, RocCurve, binarize, dice, mann_whitney_auc, roc_auc
from .model import NetworkConfig, fused_forward, init_network, network_config
from .pipeline import TrainResult, evaluate, predict, train_model
from .tensor import Tensor, get_precision, make_rng, no_grad, precision, set_precision
from .training import TrainConfig, checkpoint_load, checkpoint_save
from .verify import run_suites

__version__ = "0.1.0"

__all__ = [
    "AnnotatedImage", "Config", "ConfigError", "ContractError", "CrfConfig", "DataConfig", "DatasetSplit",
    "DualCoreError", "FormatError", "MetricError", "MetricReport", "NetworkConfig", "RocCurve", "RoiSample",
    "RunConfig", "ShapeError", "SplitAccessError", "SynthSpec", "Tensor", "TrainConfig", "TrainResult",
    "TrainingError", "binarize", "check_gradients", "checkpoint_load", "checkpoint_save", "config_text",
    "dice", "evaluate", "extract_rois", "finite_diff_grad", "fused_forward", "get_precision", "init_network",
    "load_config", "load_dataset", "load_rois", "make_rng", "mann_whitney_auc", "mean_field_infer",
    "network_config", "no_grad", "pairwise_energy", "parse_config", "precision", "predict", "roc_auc",
    "run_suites", "save_dataset", "segmentation_loss", "set_precision", "split_dataset", "synth_dataset",
    "train_model",
]
