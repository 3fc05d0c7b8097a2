"""Confidence-threshold label cleaning.

Each target-class label is scored by the confidence of the best-overlapping
predicted instance of the same class (sigma). An image leaves the clean set
when any of its labels has sigma below kappa or no matching prediction, or
when the model confidently segments a target-class object that no label
covers. Removal is per image, never per instance.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

from .dataset_io import (
    AIMING_BEAM,
    CLASS_NAMES,
    DatasetManifest,
    FrameId,
    FramePrediction,
    FrameRecord,
    PolygonInstance,
    index_predictions,
    write_manifest,
)
from .geometry import DEFAULT_IOU_RESOLUTION, polygon_iou

REPORT_VERSION = 1


class CleaningError(ValueError):
    pass


class IssueKind(str, Enum):
    LOW_CONFIDENCE_LABEL = "low_confidence_label"
    MISSING_PREDICTION = "missing_prediction"
    UNLABELED_OBJECT = "unlabeled_object"


@dataclass(frozen=True)
class CleaningConfig:
    """Cleaning knobs.

    Attributes:
        kappa: Keep threshold on sigma.
        target_class: Class whose confidence is scored.
        match_iou: Minimum mask IoU for a prediction to match a label.
        spurious_min_confidence: Confidence at which an unmatched prediction
            counts as an unlabeled object; ``None`` means "same as kappa".
    """

    kappa: float = 0.2
    target_class: int = AIMING_BEAM
    match_iou: float = 0.5
    spurious_min_confidence: Optional[float] = None
    iou_resolution: int = DEFAULT_IOU_RESOLUTION

    def __post_init__(self):
        for name in ("kappa", "match_iou", "spurious_min_confidence"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise CleaningError(f"{name} must be in [0, 1], got {v}")
        if self.target_class not in CLASS_NAMES:
            raise CleaningError(f"unknown target class {self.target_class}")

    @property
    def spurious_threshold(self) -> float:
        return self.kappa if self.spurious_min_confidence is None else self.spurious_min_confidence


@dataclass(frozen=True)
class LabelIssue:
    frame_id: FrameId
    kind: IssueKind
    sigma: float
    instance: int  # label index, or prediction index for unlabeled objects

    def as_dict(self) -> dict:
        return {"kind": self.kind.value, "sigma": self.sigma, "instance": self.instance}


@dataclass(frozen=True)
class CleaningOutcome:
    clean_manifest: DatasetManifest
    removed: tuple[tuple[FrameId, tuple[LabelIssue, ...]], ...]
    removed_fraction: float
    config: CleaningConfig

    @property
    def kappa(self) -> float:
        return self.config.kappa

    def removed_ids(self) -> set[FrameId]:
        return {fid for fid, _ in self.removed}

    def issue_histogram(self) -> dict[str, int]:
        counts = Counter(i.kind.value for _, issues in self.removed for i in issues)
        return {k.value: counts.get(k.value, 0) for k in IssueKind}

    def to_report(self) -> dict:
        cfg = self.config
        return {
            "version": REPORT_VERSION,
            "kappa": cfg.kappa,
            "target_class": cfg.target_class,
            "match_iou": cfg.match_iou,
            "spurious_min_confidence": cfg.spurious_threshold,
            "n_input": len(self.clean_manifest) + len(self.removed),
            "n_clean": len(self.clean_manifest),
            "n_removed": len(self.removed),
            "removed_fraction": self.removed_fraction,
            "issue_histogram": self.issue_histogram(),
            "removed": [
                {"video_id": fid.video_id, "index": fid.index,
                 "issues": [i.as_dict() for i in issues]}
                for fid, issues in self.removed
            ],
        }

    def write(self, out_dir) -> None:
        """Write ``report.json`` and the clean manifest (with labels) to ``out_dir``."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_manifest(self.clean_manifest, out / "clean_manifest.json")
        (out / "report.json").write_text(
            json.dumps(self.to_report(), indent=1) + "\n", encoding="utf-8")


def _matches(label: PolygonInstance, candidates: Sequence[PolygonInstance], config: CleaningConfig):
    """Yield (index, iou) for candidates with IoU >= match_iou."""
    for k, c in enumerate(candidates):
        iou = polygon_iou(label.polygon, c.polygon, config.iou_resolution)
        if iou >= config.match_iou:
            yield k, iou


def score_labeled_instance(label: PolygonInstance, prediction: FramePrediction,
                           config: CleaningConfig = CleaningConfig()) -> float:
    """Sigma of one label: confidence of its max-IoU matching prediction, else 0."""
    if label.class_id != config.target_class:
        raise CleaningError(f"label class {label.class_id} is not the target class")
    candidates = [p for p in prediction.instances if p.class_id == config.target_class]
    best_iou, sigma = -1.0, 0.0
    for k, iou in _matches(label, candidates, config):
        if iou > best_iou:
            best_iou, sigma = iou, candidates[k].confidence
    return sigma


def detect_label_issues(record: FrameRecord, prediction: FramePrediction,
                        config: CleaningConfig = CleaningConfig()) -> list[LabelIssue]:
    if record.frame_id != prediction.frame_id:
        raise CleaningError(f"frame mismatch: {record.frame_id} vs {prediction.frame_id}")
    fid = record.frame_id
    labels = [(k, inst) for k, inst in enumerate(record.instances) if inst.class_id == config.target_class]
    preds = [(k, inst) for k, inst in enumerate(prediction.instances) if inst.class_id == config.target_class]
    issues = []
    for k, label in labels:
        sigma = score_labeled_instance(label, prediction, config)
        if sigma == 0.0:
            issues.append(LabelIssue(fid, IssueKind.MISSING_PREDICTION, 0.0, k))
        elif sigma < config.kappa:
            issues.append(LabelIssue(fid, IssueKind.LOW_CONFIDENCE_LABEL, sigma, k))
    label_polys = [inst for _, inst in labels]
    for k, pred in preds:
        if pred.confidence < config.spurious_threshold:
            continue
        if not any(True for _ in _matches(pred, label_polys, config)):
            issues.append(LabelIssue(fid, IssueKind.UNLABELED_OBJECT, pred.confidence, k))
    return issues


def clean(dataset: DatasetManifest, predictions: Iterable[FramePrediction] | Mapping[FrameId, FramePrediction],
          config: CleaningConfig = CleaningConfig()) -> CleaningOutcome:
    """Split ``dataset`` into the clean set and flagged images."""
    by_id = predictions if isinstance(predictions, Mapping) else index_predictions(predictions)
    missing = [str(r.frame_id) for r in dataset.records if r.frame_id not in by_id]
    if missing:
        shown = ", ".join(missing[:20]) + (" ..." if len(missing) > 20 else "")
        raise CleaningError(f"{len(missing)} frames lack predictions: {shown}")
    removed = []
    keep = []
    for record in sorted(dataset.records, key=lambda r: r.frame_id):
        issues = detect_label_issues(record, by_id[record.frame_id], config)
        if issues:
            removed.append((record.frame_id, tuple(issues)))
        else:
            keep.append(record.frame_id)
    n = len(dataset.records)
    return CleaningOutcome(
        clean_manifest=dataset.subset(keep),
        removed=tuple(removed),
        removed_fraction=len(removed) / n if n else 0.0,
        config=config,
    )


def sweep(dataset: DatasetManifest, predictions, kappas: Sequence[float],
          config: CleaningConfig = CleaningConfig()) -> list[CleaningOutcome]:
    """Run :func:`clean` at each kappa with every other knob held fixed.

    The unlabeled-object threshold is pinned across the sweep (to
    ``config.spurious_min_confidence`` or, if unset, the smallest kappa) so
    that the removed sets are nested in kappa.
    """
    kappas = [float(k) for k in kappas]
    if not kappas:
        raise CleaningError("kappa list is empty")
    for k in kappas:
        if not 0.0 <= k <= 1.0:
            raise CleaningError(f"kappa {k} outside [0, 1]")
    by_id = predictions if isinstance(predictions, Mapping) else index_predictions(predictions)
    spurious = config.spurious_min_confidence
    if spurious is None:
        spurious = min(kappas)
    outcomes = []
    for k in kappas:
        cfg = CleaningConfig(kappa=k, target_class=config.target_class, match_iou=config.match_iou,
                             spurious_min_confidence=spurious, iou_resolution=config.iou_resolution)
        outcomes.append(clean(dataset, by_id, cfg))
    return outcomes


def write_sweep(outcomes: Sequence[CleaningOutcome], out_dir) -> None:
    """Write one subdirectory per kappa plus a ``sweep.json`` summary."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for o in outcomes:
        sub = out / f"kappa_{o.kappa:g}"
        o.write(sub)
        rows.append({"kappa": o.kappa, "removed_fraction": o.removed_fraction,
                     "n_removed": len(o.removed), "issue_histogram": o.issue_histogram(),
                     "manifest": f"{sub.name}/clean_manifest.json"})
    (out / "sweep.json").write_text(json.dumps({"version": REPORT_VERSION, "sweep": rows}, indent=1) + "\n",
                                    encoding="utf-8")
