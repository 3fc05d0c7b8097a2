"""Beam-detection metrics: detection rate, localization error, PCC, mAP, coverage.

A frame counts as detected when at least one target-class prediction clears
the class threshold (and, if ``gate_px`` is set, its centroid lies within
``gate_px`` of the annotation). The highest-confidence candidate wins.
Localization statistics use only detected frames. Standard deviations are
population (ddof=0) throughout.
"""

from __future__ import annotations

import math
import statistics
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .dataset_io import (
    AIMING_BEAM,
    CLASS_NAMES,
    FrameId,
    FramePrediction,
    FrameRecord,
    index_predictions,
)
from .geometry import (
    DEFAULT_IOU_RESOLUTION,
    BinaryMask,
    Point,
    disk_mask,
    equivalent_radius,
    polygon_centroid,
    polygon_iou,
)

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
STRATA = ("overall", "TORS", "non_TORS")


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class EvalConfig:
    target_class: int = AIMING_BEAM
    class_threshold: float = 0.01
    gate_px: Optional[float] = None
    coverage_radius_px: Optional[float] = None  # None: equivalent radius per detection
    default_radius_px: float = 8.0


@dataclass(frozen=True)
class DetectionOutcome:
    frame_id: FrameId
    annotated: Point
    predicted: Optional[Point] = None
    chosen_confidence: Optional[float] = None
    predicted_radius: Optional[float] = None

    @property
    def detected(self) -> bool:
        return self.predicted is not None


@dataclass(frozen=True)
class LocalizationStats:
    n: int
    euclidean_mean: Optional[float]
    euclidean_std: Optional[float]
    euclidean_median: Optional[float]
    pcc_x: Optional[float]  # None when undefined
    pcc_y: Optional[float]


@dataclass
class VideoReport:
    video_id: str
    surgery_type: str
    n_annotated: int
    n_detected: int
    detection_rate: float
    euclidean_mean: Optional[float]
    euclidean_std: Optional[float]
    euclidean_median: Optional[float]
    pcc_x: Optional[float]
    pcc_y: Optional[float]
    n_unannotated_with_prediction: int = 0
    coverage_deficit: Optional[float] = None
    outcomes: list = field(default_factory=list, repr=False)

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("outcomes")
        return d


def _candidates(prediction: FramePrediction, config: EvalConfig):
    return [i for i in prediction.instances
            if i.class_id == config.target_class and i.confidence >= config.class_threshold]


def match_frame(record: FrameRecord, prediction: FramePrediction,
                gate_px: Optional[float] = None, config: EvalConfig = EvalConfig()) -> DetectionOutcome:
    """Pick the highest-confidence beam prediction for an annotated frame."""
    if record.frame_id != prediction.frame_id:
        raise EvaluationError(f"frame mismatch: {record.frame_id} vs {prediction.frame_id}")
    if record.beam_point is None:
        raise EvaluationError(f"{record.frame_id}: no annotated beam point")
    gate = config.gate_px if gate_px is None else gate_px
    cands = _candidates(prediction, config)
    if not cands:
        return DetectionOutcome(record.frame_id, record.beam_point)
    best = max(cands, key=lambda i: i.confidence)  # first wins on ties
    c = polygon_centroid(best.polygon)
    if gate is not None and euclidean(c, record.beam_point) > gate:
        return DetectionOutcome(record.frame_id, record.beam_point)
    return DetectionOutcome(record.frame_id, record.beam_point, c, best.confidence,
                            equivalent_radius(best.polygon))


def detection_rate(outcomes: Sequence[DetectionOutcome]) -> float:
    if not outcomes:
        raise EvaluationError("no annotated frames")
    return sum(1 for o in outcomes if o.detected) / len(outcomes)


def euclidean(p: Point, a: Point) -> float:
    return math.sqrt((p.x - a.x) ** 2 + (p.y - a.y) ** 2)


def pearson(pred: Sequence[float], ann: Sequence[float]) -> Optional[float]:
    """Pearson correlation; ``None`` for fewer than 2 values or zero variance."""
    n = len(pred)
    if n < 2:
        return None
    p = np.asarray(pred, dtype=float)
    a = np.asarray(ann, dtype=float)
    dp, da = p - p.mean(), a - a.mean()
    spp, saa = float(dp @ dp), float(da @ da)
    if spp == 0.0 or saa == 0.0:
        return None
    r = float(dp @ da) / math.sqrt(spp * saa)
    return max(-1.0, min(1.0, r))


def localization_stats(outcomes: Iterable[DetectionOutcome]) -> LocalizationStats:
    hits = [o for o in outcomes if o.detected]
    if not hits:
        return LocalizationStats(0, None, None, None, None, None)
    d = np.array([euclidean(o.predicted, o.annotated) for o in hits])
    return LocalizationStats(
        n=len(hits),
        euclidean_mean=float(d.mean()),
        euclidean_std=float(d.std()),
        euclidean_median=float(np.median(d)),
        pcc_x=pearson([o.predicted.x for o in hits], [o.annotated.x for o in hits]),
        pcc_y=pearson([o.predicted.y for o in hits], [o.annotated.y for o in hits]),
    )


def evaluate_video(records: Sequence[FrameRecord], predictions, config: EvalConfig = EvalConfig(),
                   canvas: Optional[tuple[int, int]] = None) -> VideoReport:
    """Evaluate one video. Frames without a beam annotation are not scored
    but predictions on them are counted in ``n_unannotated_with_prediction``.
    """
    if not records:
        raise EvaluationError("empty video")
    vids = {r.frame_id.video_id for r in records}
    if len(vids) > 1:
        raise EvaluationError(f"mixed video ids: {sorted(vids)}")
    by_id = predictions if isinstance(predictions, Mapping) else index_predictions(predictions)
    outcomes = []
    stray = 0
    for r in sorted(records, key=lambda r: r.frame_id.index):
        pred = by_id.get(r.frame_id)
        if pred is None:
            pred = FramePrediction(r.frame_id, r.width, r.height)
        if r.beam_point is None:
            stray += bool(_candidates(pred, config))
            continue
        outcomes.append(match_frame(r, pred, config=config))
    if not outcomes:
        raise EvaluationError(f"video {vids.pop()} has no annotated frames")
    loc = localization_stats(outcomes)
    deficit = None
    if canvas is None:
        canvas = (records[0].width, records[0].height)
    radii_model = model_radii(outcomes, config)
    radii_ann = annotation_radii(records, outcomes, config)
    model_map = coverage_map(outcomes, radii_model, canvas)
    ann_map = coverage_map(outcomes, radii_ann, canvas, use="annotated")
    deficit = coverage_deficit(model_map, ann_map)
    return VideoReport(
        video_id=records[0].frame_id.video_id,
        surgery_type=records[0].surgery_type,
        n_annotated=len(outcomes),
        n_detected=loc.n,
        detection_rate=detection_rate(outcomes),
        euclidean_mean=loc.euclidean_mean,
        euclidean_std=loc.euclidean_std,
        euclidean_median=loc.euclidean_median,
        pcc_x=loc.pcc_x,
        pcc_y=loc.pcc_y,
        n_unannotated_with_prediction=stray,
        coverage_deficit=deficit,
        outcomes=outcomes,
    )


def model_radii(outcomes, config: EvalConfig) -> list[float]:
    if config.coverage_radius_px is not None:
        return [config.coverage_radius_px] * len(outcomes)
    return [o.predicted_radius if o.predicted_radius is not None else config.default_radius_px
            for o in outcomes]


def annotation_radii(records, outcomes, config: EvalConfig) -> list[float]:
    if config.coverage_radius_px is not None:
        return [config.coverage_radius_px] * len(outcomes)
    by_id = {r.frame_id: r for r in records}
    out = []
    for o in outcomes:
        beams = [i for i in by_id[o.frame_id].instances if i.class_id == config.target_class]
        out.append(equivalent_radius(beams[0].polygon) if beams else config.default_radius_px)
    return out


def evaluate(records: Sequence[FrameRecord], predictions, config: EvalConfig = EvalConfig()) -> list[VideoReport]:
    """Evaluate every video in ``records`` (in first-seen order)."""
    by_id = predictions if isinstance(predictions, Mapping) else index_predictions(predictions)
    videos: dict[str, list[FrameRecord]] = {}
    for r in records:
        videos.setdefault(r.frame_id.video_id, []).append(r)
    return [evaluate_video(rs, by_id, config) for rs in videos.values()]


def _describe(values: Sequence[float]) -> dict:
    vals = [v for v in values if v is not None]
    if not vals:
        return {"n": 0, "mean": None, "std": None, "median": None}
    return {"n": len(vals), "mean": statistics.fmean(vals), "std": statistics.pstdev(vals),
            "median": statistics.median(vals)}


def aggregate(reports: Sequence[VideoReport]) -> dict:
    """Per-stratum mean/std/median across videos; videos weigh equally."""
    out = {}
    for stratum in STRATA:
        rs = [r for r in reports if stratum == "overall" or r.surgery_type == stratum]
        out[stratum] = {
            "n_videos": len(rs),
            "detection_rate": _describe([r.detection_rate for r in rs]),
            "euclidean_mean": _describe([r.euclidean_mean for r in rs]),
            "pcc_x": _describe([r.pcc_x for r in rs]),
            "pcc_y": _describe([r.pcc_y for r in rs]),
        }
    return out


# --- mAP -------------------------------------------------------------------

def average_precision(tp: Sequence[bool], n_gt: int) -> float:
    """101-point interpolated AP from a confidence-ordered TP/FP sequence."""
    if n_gt == 0:
        raise EvaluationError("AP undefined without ground truth")
    tp = np.asarray(tp, dtype=float)
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, tp.size + 1)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    q = np.where(idx < tp.size, envelope[np.minimum(idx, tp.size - 1)], 0.0)
    return float(q.mean())


def _greedy_tp(dets, gts_by_frame, ious, threshold) -> list[bool]:
    matched: dict[FrameId, set] = {}
    out = []
    for d, (fid, _, _) in enumerate(dets):
        row = ious[d]
        taken = matched.setdefault(fid, set())
        best, best_iou = None, threshold
        for g, iou in enumerate(row):
            if g in taken or iou < best_iou:
                continue
            if best is None or iou > best_iou:
                best, best_iou = g, iou
        if best is None:
            out.append(False)
        else:
            taken.add(best)
            out.append(True)
    return out


def map_metric(records: Sequence[FrameRecord], predictions,
               iou_thresholds: Sequence[float] = IOU_THRESHOLDS,
               resolution: int = DEFAULT_IOU_RESOLUTION) -> dict:
    """COCO-style mask mAP over every class that has ground truth.

    Returns:
        Dict with ``map50`` (AP at IoU 0.5 averaged over classes),
        ``map50_95`` (AP averaged over ``iou_thresholds`` and classes) and a
        ``per_class`` table of AP per threshold.
    """
    if not records:
        raise EvaluationError("empty dataset")
    by_id = predictions if isinstance(predictions, Mapping) else index_predictions(predictions)
    thresholds = [float(t) for t in iou_thresholds]
    per_class = {}
    for cls in sorted(CLASS_NAMES):
        gts_by_frame = {r.frame_id: [i.polygon for i in r.instances if i.class_id == cls] for r in records}
        n_gt = sum(len(v) for v in gts_by_frame.values())
        if n_gt == 0:
            continue
        dets = []
        for r in records:
            pred = by_id.get(r.frame_id)
            if pred is None:
                continue
            for inst in pred.instances:
                if inst.class_id == cls:
                    dets.append((r.frame_id, inst.confidence, inst.polygon))
        dets.sort(key=lambda d: -d[1])  # stable: file order breaks ties
        ious = [[polygon_iou(poly, g, resolution) for g in gts_by_frame[fid]] for fid, _, poly in dets]
        aps = {t: average_precision(_greedy_tp(dets, gts_by_frame, ious, t), n_gt) for t in thresholds}
        per_class[CLASS_NAMES[cls]] = {"n_gt": n_gt, "n_pred": len(dets), "ap": aps}
    if not per_class:
        raise EvaluationError("dataset has no ground-truth instances")
    rows = list(per_class.values())
    map50 = float(np.mean([r["ap"][0.5] for r in rows])) if 0.5 in thresholds else None
    map_all = float(np.mean([np.mean(list(r["ap"].values())) for r in rows]))
    return {"map50": map50, "map50_95": map_all, "per_class": per_class, "iou_thresholds": thresholds}


# --- coverage --------------------------------------------------------------

def coverage_map(outcomes: Sequence[DetectionOutcome], radii, canvas_dims: tuple[int, int],
                 use: str = "predicted") -> BinaryMask:
    """Union of disks at detected centroids (or at annotated points).

    ``radii`` is one radius per outcome or a single scalar.
    """
    width, height = canvas_dims
    if np.isscalar(radii):
        radii = [float(radii)] * len(outcomes)
    if len(radii) != len(outcomes):
        raise EvaluationError("need one radius per outcome")
    centers, rs = [], []
    for o, r in zip(outcomes, radii):
        if use == "predicted":
            if o.predicted is not None:
                centers.append(o.predicted)
                rs.append(r)
        elif use == "annotated":
            centers.append(o.annotated)
            rs.append(r)
        else:
            raise ValueError(f"use must be 'predicted' or 'annotated', not {use!r}")
    return disk_mask(centers, rs, width, height)


def coverage_deficit(model_map: BinaryMask, annotation_map: BinaryMask) -> Optional[float]:
    """Fraction of annotated coverage the model misses; ``None`` if nothing is annotated."""
    if (model_map.width, model_map.height) != (annotation_map.width, annotation_map.height):
        raise EvaluationError("coverage maps differ in size")
    total = annotation_map.popcount()
    if total == 0:
        return None
    missed = int(np.count_nonzero(annotation_map.bits & ~model_map.bits))
    return missed / total


def report_document(reports: Sequence[VideoReport], config: EvalConfig, scale=None) -> dict:
    """Machine-readable evaluation report."""
    videos = [r.summary() for r in reports]
    if scale is not None:
        for v in videos:
            for key in ("euclidean_mean", "euclidean_std", "euclidean_median"):
                v[key + "_mm"] = None if v[key] is None else v[key] * scale.mm_per_pixel
    return {
        "version": 1,
        "config": asdict(config),
        "videos": videos,
        "aggregate": aggregate(reports),
    }


def format_table(reports: Sequence[VideoReport]) -> str:
    def f(v, spec=".3f"):
        return "-" if v is None else format(v, spec)

    lines = [f"{'video':<16} {'type':<9} {'annot':>6} {'det':>6} {'rate':>6} "
             f"{'eucl':>7} {'std':>7} {'med':>7} {'pcc_x':>7} {'pcc_y':>7} {'miss':>6}"]
    for r in reports:
        lines.append(
            f"{r.video_id:<16} {r.surgery_type:<9} {r.n_annotated:>6} {r.n_detected:>6} "
            f"{f(r.detection_rate):>6} {f(r.euclidean_mean, '.2f'):>7} {f(r.euclidean_std, '.2f'):>7} "
            f"{f(r.euclidean_median, '.2f'):>7} {f(r.pcc_x):>7} {f(r.pcc_y):>7} {f(r.coverage_deficit):>6}")
    agg = aggregate(reports)
    lines.append("")
    lines.append(f"{'stratum':<10} {'videos':>6} {'rate mean':>10} {'rate med':>9} {'eucl mean':>10}")
    for s in STRATA:
        a = agg[s]
        lines.append(f"{s:<10} {a['n_videos']:>6} {f(a['detection_rate']['mean']):>10} "
                     f"{f(a['detection_rate']['median']):>9} {f(a['euclidean_mean']['mean'], '.2f'):>10}")
    return "\n".join(lines) + "\n"
