"""Metrics, baselines and ablation harnesses."""

from .ablations import (ROTATION_ANGLES, format_rotation_table, gt_2d_tracks, interpolation_ablation,
                        rotate_camera, rotated_view_eval)
from .baselines import chain_sceneflow, fill_depth_in_time, lift_2d_tracks
from .metrics import (THRESHOLDS, MetricsReport, compute_average_jaccard, compute_metrics, format_table, metrics_for,
                      project_tracks, survival_rate)

__all__ = [
    "ROTATION_ANGLES", "THRESHOLDS", "MetricsReport", "chain_sceneflow", "compute_average_jaccard",
    "compute_metrics", "fill_depth_in_time", "format_rotation_table", "format_table", "gt_2d_tracks",
    "interpolation_ablation", "lift_2d_tracks", "metrics_for", "project_tracks", "rotate_camera",
    "rotated_view_eval", "survival_rate",
]
