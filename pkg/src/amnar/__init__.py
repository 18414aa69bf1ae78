"""Error detection for procedural activities.

The pipeline: build a task graph from correct executions, predict the
valid next actions for each step of a new recording, reconstruct what a
normal execution of each candidate should look like given the context
frames, and flag the step as an error when the observed action feature is
too far from every reconstruction.
"""

from .data import (BACKGROUND, ActionSegment, ClusterCenters, ErrorSpan,
                   TrainingSample, VideoRecord, action_feature,
                   build_training_samples, cluster_centers, filter_segments,
                   load_features, majority_label, overlap_ratio, save_features)
from .detection import (SegmentVerdict, ThresholdTable, calibrate,
                        calibration_distances, detect_video, flag, match)
from .errors import AmnarError
from .evaluation import EvalReport, eda, evaluate, nondet_frame_accuracy, roc_auc
from .graph import (NonDeterminismMetrics, TaskGraph, TransitionStats,
                    build_task_graph, graph_metrics, load_graph,
                    nondeterministic_nodes, save_graph, transition_stats)
from .prediction import (NextActionResult, longest_subsequences,
                         merge_subsequences, predict_next_actions,
                         valid_next_actions)
from .reconstruction import (NormalSet, ReconstructionModel, ReconstructorConfig,
                             ReconstructorParams, causal_dilated_conv,
                             gradient_check, init_params, load_model,
                             local_cross_attention, loss, reconstruct_normals,
                             save_model, train, train_step)
from .synthetic import SynthConfig, SynthDataset, emit_dataset, inject_errors, make_dataset

__version__ = "0.1.0"

__all__ = [
    "AmnarError", "BACKGROUND",
    "ActionSegment", "ClusterCenters", "ErrorSpan", "TrainingSample", "VideoRecord",
    "action_feature", "build_training_samples", "cluster_centers",
    "filter_segments", "load_features", "majority_label", "overlap_ratio",
    "save_features",
    "TaskGraph", "TransitionStats", "NonDeterminismMetrics",
    "build_task_graph", "graph_metrics", "load_graph", "nondeterministic_nodes",
    "save_graph", "transition_stats",
    "NextActionResult", "longest_subsequences", "merge_subsequences",
    "predict_next_actions", "valid_next_actions",
    "NormalSet", "ReconstructionModel", "ReconstructorConfig", "ReconstructorParams",
    "causal_dilated_conv", "gradient_check", "init_params", "load_model",
    "local_cross_attention", "loss", "reconstruct_normals", "save_model",
    "train", "train_step",
    "SegmentVerdict", "ThresholdTable", "calibrate", "calibration_distances",
    "detect_video", "flag", "match",
    "EvalReport", "eda", "evaluate", "nondet_frame_accuracy", "roc_auc",
    "SynthConfig", "SynthDataset", "emit_dataset", "inject_errors", "make_dataset",
]
