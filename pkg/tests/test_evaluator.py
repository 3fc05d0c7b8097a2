import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from beamlab.dataset_io import FrameId, FramePrediction, FrameRecord, PolygonInstance
from beamlab.evaluator import (
    DetectionOutcome,
    EvalConfig,
    EvaluationError,
    aggregate,
    average_precision,
    coverage_deficit,
    coverage_map,
    detection_rate,
    euclidean,
    evaluate,
    evaluate_video,
    format_table,
    localization_stats,
    map_metric,
    match_frame,
    pearson,
    report_document,
)
from beamlab.geometry import Point, Polygon, polygon_iou
from beamlab.predictor import BeamPath, SyntheticSceneConfig, generate_synthetic_dataset

from oracles import interpolated_ap_oracle


def sq(cx, cy, h=2.0):
    return Polygon(((cx - h, cy - h), (cx + h, cy - h), (cx + h, cy + h), (cx - h, cy + h)))


def record(i=0, point=(13, 14), video="v", stype="unknown", labels=()):
    return FrameRecord(FrameId(video, i), 100, 100, tuple(labels),
                       beam_point=None if point is None else Point(*point), surgery_type=stype)


def pred(i=0, *items, video="v"):
    return FramePrediction(FrameId(video, i), 100, 100,
                           tuple(PolygonInstance(c, p, conf) for c, p, conf in items))


# --- per-frame matching ------------------------------------------------------

def test_match_single_prediction():
    o = match_frame(record(), pred(0, (0, sq(10, 10), 0.7)))
    assert o.detected and o.predicted == Point(10, 10)
    assert euclidean(o.predicted, o.annotated) == 5.0


def test_match_no_prediction():
    assert not match_frame(record(), pred(0)).detected
    assert not match_frame(record(), pred(0, (1, sq(13, 14), 0.9))).detected


def test_match_max_confidence_vs_exhaustive_choice():
    items = [(0, sq(50, 50), 0.9), (0, sq(13, 14), 0.4)]
    # oracle: try every candidate and keep the one no other candidate beats on confidence
    choice = [c for c in items if all(c[2] >= o[2] for o in items)][0]
    o = match_frame(record(), pred(0, *items))
    assert o.predicted == Point(50, 50) == Point(*[sum(v) / 4 for v in zip(*choice[1].vertices)])
    assert o.chosen_confidence == 0.9


def test_match_gate():
    o = match_frame(record(), pred(0, (0, sq(50, 50), 0.9)), gate_px=10)
    assert not o.detected
    assert match_frame(record(), pred(0, (0, sq(10, 10), 0.9)), gate_px=10).detected


def test_match_errors():
    with pytest.raises(EvaluationError):
        match_frame(record(), pred(1))
    with pytest.raises(EvaluationError):
        match_frame(record(point=None), pred(0))


def test_class_threshold_applies():
    assert not match_frame(record(), pred(0, (0, sq(10, 10), 0.005))).detected


# --- scalar metrics ----------------------------------------------------------

def outcomes(n, detected):
    return [DetectionOutcome(FrameId("v", i), Point(0, 0), Point(1, 1) if i < detected else None)
            for i in range(n)]


def test_detection_rate_examples():
    assert detection_rate(outcomes(100, 93)) == 0.93
    assert detection_rate(outcomes(10, 0)) == 0.0
    assert detection_rate(outcomes(7, 7)) == 1.0
    with pytest.raises(EvaluationError):
        detection_rate([])


def test_euclidean_examples():
    assert euclidean(Point(0, 0), Point(3, 4)) == 5.0
    assert euclidean(Point(2, 2), Point(2, 2)) == 0.0
    assert euclidean(Point(1.5, 2.5), Point(4.5, -1.5)) == math.sqrt(3**2 + 4**2)


def test_pcc_examples():
    xs = [1.0, 2.0, 5.0, 3.0]
    assert pearson(xs, xs) == pytest.approx(1.0, abs=1e-15)
    m = sum(xs) / len(xs)
    assert pearson([2 * m - x for x in xs], xs) == pytest.approx(-1.0, abs=1e-15)
    assert pearson([1, 2, 3], [1, 2, 4]) == pytest.approx(9 / (2 * math.sqrt(21)), abs=1e-12)
    assert pearson([1, 2, 3], [1, 2, 4]) == pytest.approx(0.9820, abs=1e-4)


def test_pcc_undefined():
    assert pearson([1.0], [2.0]) is None
    assert pearson([1, 1, 1], [1, 2, 3]) is None
    assert pearson([1, 2, 3], [4, 4, 4]) is None


def _loc(pairs):
    return [DetectionOutcome(FrameId("v", i), Point(*a), None if p is None else Point(*p))
            for i, (a, p) in enumerate(pairs)]


def test_localization_stats_detected_subset_only():
    base = [((0, 0), (3, 4)), ((10, 5), (10, 5)), ((20, 7), (26, 15))]
    s = localization_stats(_loc(base))
    assert (s.n, s.euclidean_mean, s.euclidean_median) == (3, 5.0, 5.0)
    assert s.euclidean_std == pytest.approx(math.sqrt(50 / 3))
    s2 = localization_stats(_loc(base + [((40, 40), None)]))
    assert s2 == s


def test_localization_stats_empty():
    s = localization_stats(_loc([((0, 0), None)]))
    assert s.n == 0 and s.pcc_x is None and s.euclidean_mean is None


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.floats(-500, 500), st.floats(-500, 500)), min_size=3, max_size=30),
       st.floats(-1e3, 1e3), st.floats(0.01, 100))
def test_pcc_offset_and_scale_invariance(pairs, offset, scale):
    p = [a for a, _ in pairs]
    a = [b for _, b in pairs]
    r = pearson(p, a)
    if r is None or np.std(p) < 1e-3 or np.std(a) < 1e-3:
        return
    assert pearson([x + offset for x in p], [y + offset for y in a]) == pytest.approx(r, abs=1e-9)
    assert pearson([x * scale for x in p], [y * scale for y in a]) == pytest.approx(r, abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.booleans(), min_size=1, max_size=40), st.randoms())
def test_detection_rate_order_invariant(flags, rnd):
    outs = [DetectionOutcome(FrameId("v", i), Point(0, 0), Point(0, 0) if f else None) for i, f in enumerate(flags)]
    r = detection_rate(outs)
    rnd.shuffle(outs)
    assert detection_rate(outs) == r
    assert 0.0 <= r <= 1.0


# --- video and aggregate reports -------------------------------------------------

def test_noiseless_video():
    m, p = generate_synthetic_dataset(SyntheticSceneConfig(detection_probability=1.0, seed=1), 80)
    (r,) = evaluate(m.records, p)
    assert (r.detection_rate, r.euclidean_mean, r.pcc_x, r.pcc_y) == (1.0, 0.0, 1.0, 1.0)
    assert r.coverage_deficit == 0.0


def test_video_errors():
    with pytest.raises(EvaluationError):
        evaluate_video([], [])
    with pytest.raises(EvaluationError, match="mixed"):
        evaluate_video([record(0), record(1, video="w")], [])


def test_unannotated_frames_reported_separately():
    recs = [record(0), record(1, point=None)]
    preds = [pred(0, (0, sq(13, 14), 0.9)), pred(1, (0, sq(40, 40), 0.9))]
    r = evaluate_video(recs, preds)
    assert (r.n_annotated, r.n_detected, r.n_unannotated_with_prediction) == (1, 1, 1)


def _report(rate, stype, vid):
    from beamlab.evaluator import VideoReport

    return VideoReport(vid, stype, 10, int(rate * 10), rate, 1.0, 0.0, 1.0, 0.99, 0.98)


def test_aggregate_two_videos():
    agg = aggregate([_report(0.8, "TORS", "a"), _report(1.0, "non_TORS", "b")])
    assert agg["overall"]["detection_rate"]["mean"] == pytest.approx(0.9)
    assert agg["overall"]["detection_rate"]["median"] == pytest.approx(0.9)
    assert agg["TORS"]["n_videos"] + agg["non_TORS"]["n_videos"] == agg["overall"]["n_videos"]


def test_report_document_and_table():
    from beamlab.calibration import derive_scale

    reports = [_report(0.8, "TORS", "a")]
    doc = report_document(reports, EvalConfig(), derive_scale(0.5, 10))
    assert doc["videos"][0]["euclidean_mean_mm"] == pytest.approx(0.05)
    assert "TORS" in format_table(reports)


# --- mAP -------------------------------------------------------------------------

def gt_record(i, *polys, video="m"):
    return FrameRecord(FrameId(video, i), 100, 100, tuple(PolygonInstance(c, p) for c, p in polys))


def test_map_perfect():
    recs = [gt_record(i, (0, sq(20 + i, 30, 5)), (2, sq(60, 60, 8))) for i in range(5)]
    preds = [FramePrediction(r.frame_id, 100, 100, tuple(PolygonInstance(g.class_id, g.polygon, 1.0)
                                                          for g in r.instances)) for r in recs]
    res = map_metric(recs, preds)
    assert res["map50"] == 1.0 and res["map50_95"] == 1.0


def test_map_no_predictions():
    recs = [gt_record(0, (0, sq(20, 30, 5)))]
    assert map_metric(recs, [])["map50"] == 0.0
    with pytest.raises(EvaluationError):
        map_metric([], [])


def _iou_shift(target, side=10.0):
    return side * (1 - target) / (1 + target)


def test_map_two_image_case():
    g0, g1 = sq(30, 30, 5), sq(60, 60, 5)
    p0 = g0.translated(_iou_shift(0.9), 0)
    p1 = g1.translated(_iou_shift(0.3), 0)
    assert polygon_iou(p0, g0) == pytest.approx(0.9, abs=0.01)
    assert polygon_iou(p1, g1) == pytest.approx(0.3, abs=0.01)
    recs = [gt_record(0, (0, g0)), gt_record(1, (0, g1))]
    preds = [FramePrediction(FrameId("m", 0), 100, 100, (PolygonInstance(0, p0, 0.9),)),
             FramePrediction(FrameId("m", 1), 100, 100, (PolygonInstance(0, p1, 0.8),))]
    res = map_metric(recs, preds)
    oracle = interpolated_ap_oracle([True, False], 2)
    assert oracle == pytest.approx(51 / 101)
    assert res["per_class"]["aiming_beam"]["ap"][0.5] == pytest.approx(oracle, abs=1e-12)
    assert res["map50"] == pytest.approx(0.5050, abs=1e-3)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.booleans(), max_size=30), st.integers(1, 30))
def test_average_precision_matches_oracle(flags, extra):
    n_gt = max(1, sum(flags)) + extra % 3
    assert average_precision(flags, n_gt) == pytest.approx(interpolated_ap_oracle(flags, n_gt), abs=1e-12)


# --- coverage ------------------------------------------------------------------

def scan_outcomes(n=100):
    path = BeamPath("raster", (100, 100), (80, 60), rows=4)
    return [DetectionOutcome(FrameId("s", i), path.position(i, n), path.position(i, n)) for i in range(n)]


def test_coverage_identical_and_empty():
    outs = scan_outcomes()
    ann = coverage_map(outs, 5.0, (200, 200), use="annotated")
    assert coverage_deficit(coverage_map(outs, 5.0, (200, 200)), ann) == 0.0
    none = [DetectionOutcome(o.frame_id, o.annotated) for o in outs]
    assert coverage_deficit(coverage_map(none, 5.0, (200, 200)), ann) == 1.0
    empty = coverage_map([], 5.0, (200, 200), use="annotated")
    assert coverage_deficit(empty, empty) is None


@settings(max_examples=30, deadline=None)
@given(st.lists(st.booleans(), min_size=100, max_size=100), st.integers(0, 99))
def test_coverage_deficit_antitone(mask, extra):
    outs = scan_outcomes()
    ann = coverage_map(outs, 4.0, (200, 200), use="annotated")
    sub = [o if keep else DetectionOutcome(o.frame_id, o.annotated) for o, keep in zip(outs, mask)]
    more = list(sub)
    more[extra] = outs[extra]
    d_sub = coverage_deficit(coverage_map(sub, 4.0, (200, 200)), ann)
    d_more = coverage_deficit(coverage_map(more, 4.0, (200, 200)), ann)
    assert d_more <= d_sub
