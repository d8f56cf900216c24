"""Unit-norm constrained attention filters (L2-CAF) for toy CNNs, with Grad-CAM baselines and WSOL metrics."""

from .attention import (AttentionFilter, CafConfig, CafResult, GaussianFilterParams, heatmap_from_filter,
                        optimize_class_oblivious, optimize_class_specific, optimize_fast,
                        optimize_gaussian_filter, optimize_recurrent_sequence, optimize_softmax_filter)
from .baselines import SaliencyMap, cam, grad_cam, grad_cam_retrieval
from .evaluation import BoundingBox, EvalRecord, iou, largest_component_box, localization_accuracy, nmi, recall_at_1
from .modelio import load_model, save_model
from .network import NetworkModel, build_preset, filtered_forward, forward, randomize

__version__ = "0.1.0"
