"""Aiming-beam label cleaning and detection evaluation toolkit."""

__version__ = "0.1.0"

from .calibration import CalibrationScale, derive_scale, to_mm
from .cleaner import CleaningConfig, CleaningOutcome, IssueKind, LabelIssue, clean, detect_label_issues, sweep
from .dataset_io import (
    DatasetManifest,
    FrameId,
    FramePrediction,
    FrameRecord,
    PolygonInstance,
    load_manifest,
    load_predictions,
    parse_label_file,
    write_manifest,
    write_predictions,
)
from .evaluator import EvalConfig, detection_rate, evaluate, localization_stats, map_metric
from .geometry import BinaryMask, Point, Polygon, polygon_area, polygon_centroid, polygon_iou

__all__ = [
    "BinaryMask", "CalibrationScale", "CleaningConfig", "CleaningOutcome", "DatasetManifest", "EvalConfig",
    "FrameId", "FramePrediction", "FrameRecord", "IssueKind", "LabelIssue", "Point", "Polygon",
    "PolygonInstance", "clean", "derive_scale", "detect_label_issues", "detection_rate", "evaluate",
    "load_manifest", "load_predictions", "localization_stats", "map_metric", "parse_label_file",
    "polygon_area", "polygon_centroid", "polygon_iou", "sweep", "to_mm", "write_manifest",
    "write_predictions",
]
