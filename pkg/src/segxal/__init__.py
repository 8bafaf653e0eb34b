"""Explainable active learning for semantic segmentation.

An end-to-end desk-scale loop: train a small encoder-decoder segmenter,
fuse entropy uncertainty with proximity-aware class activation maps into
an error mask, route the prompted regions to a machine or human oracle,
gate oracle output by mask similarity, grow the labeled pool and retrain.
"""

from .core import (ALConfig, DepthMap, HeatMap, IGNORE, Image, LabelMask, ProbMap,
                   Sample, SamplePool, deserialize_pool, serialize_pool, validate_sample)
from .data import SceneSpec, generate_scene, initial_split, load_cityscapes_dir
from .entropy import entropy_map
from .fusion import CandidatePrompt, EEMask, extract_candidates, fuse
from .metrics import MetricsReport, compute_metrics
from .model import GradCamContext, ModelConfig, TrainingReport, UNetSegmenter
from .oracle import AnnotationRecord, machine_annotate
from .orchestrator import ActiveLearningLoop, ALState, ExperimentConfig, run_ablation
from .proximity import DepthProvider, ProximityMask, depth_informed_image, gradcam, prox_gradcam, proximity_mask
from .selection import SelectionDecision, dice, select

__version__ = "0.1.0"

__all__ = [
    "ALConfig", "ALState", "ActiveLearningLoop", "AnnotationRecord",
    "CandidatePrompt", "DepthMap", "DepthProvider", "EEMask", "ExperimentConfig",
    "GradCamContext", "HeatMap", "IGNORE", "Image", "LabelMask", "MetricsReport",
    "ModelConfig", "ProbMap", "ProximityMask", "Sample", "SamplePool", "SceneSpec",
    "SelectionDecision", "TrainingReport", "UNetSegmenter", "compute_metrics",
    "depth_informed_image", "deserialize_pool", "dice", "entropy_map",
    "extract_candidates", "fuse", "generate_scene", "gradcam", "initial_split",
    "load_cityscapes_dir", "machine_annotate", "prox_gradcam", "proximity_mask",
    "run_ablation", "select", "serialize_pool", "validate_sample",
]
