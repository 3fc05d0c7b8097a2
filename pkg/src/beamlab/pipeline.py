"""Streaming runtime: per-frame beam centroid and exclusion mask with latency accounting.

Three workers run concurrently: the frame source, a predict stage and a
postprocess/emit stage, connected by bounded queues (depth 1 by default).
Timings use ``time.perf_counter`` (monotonic, sub-millisecond on Linux).
Per frame:

* ``predict_ms``: predictor call.
* ``postprocess_ms``: centroid, radius and exclusion-mask computation.
* ``total_ms``: from the predict stage taking the frame to the event being
  emitted, so it includes any wait between stages.
* ``age_ms``: from the source releasing the frame to emission.

Budget verdicts compare the nearest-rank p95 of ``total_ms`` to each budget.
"""

from __future__ import annotations

import json
import logging
import math
import queue
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np

from .dataset_io import AIMING_BEAM, EXCLUSION_CLASSES, FrameId, FramePrediction, FrameRecord
from .evaluator import EvalConfig, evaluate
from .geometry import BinaryMask, Point, equivalent_radius, polygon_centroid, rasterize

log = logging.getLogger(__name__)

FRAME_BUDGET_24FPS_MS = 1000.0 / 24.0
DEFAULT_BUDGETS_MS = (70.0, 100.0)


class StreamOrderError(ValueError):
    def __init__(self, position: int, frame_id, previous):
        self.position = position
        super().__init__(f"frame {frame_id} at position {position} is not after {previous}")


@dataclass(frozen=True)
class Frame:
    frame_id: FrameId
    width: int
    height: int
    pixels: Optional[np.ndarray] = None


@dataclass(frozen=True)
class StreamConfig:
    target_class: int = AIMING_BEAM
    class_threshold: float = 0.01
    queue_depth: int = 1
    fail_fast: bool = False
    budgets_ms: tuple[float, ...] = DEFAULT_BUDGETS_MS
    exclusion_classes: tuple[int, ...] = EXCLUSION_CLASSES


@dataclass(frozen=True)
class FrameEvent:
    frame_id: FrameId
    beam_centroid: Optional[Point]
    beam_radius: Optional[float]
    exclusion_mask: BinaryMask
    predict_ms: float
    postprocess_ms: float
    total_ms: float
    age_ms: float
    start_ms: float  # relative to stream start
    end_ms: float
    error: Optional[str] = None
    prediction: Optional[FramePrediction] = field(default=None, repr=False, compare=False)

    def to_record(self) -> dict:
        return {
            "video_id": self.frame_id.video_id,
            "index": self.frame_id.index,
            "beam_centroid": None if self.beam_centroid is None else [self.beam_centroid.x, self.beam_centroid.y],
            "beam_radius": self.beam_radius,
            "exclusion_pixels": self.exclusion_mask.popcount(),
            "timings": {"predict_ms": self.predict_ms, "postprocess_ms": self.postprocess_ms,
                        "total_ms": self.total_ms, "age_ms": self.age_ms,
                        "start_ms": self.start_ms, "end_ms": self.end_ms},
            "error": self.error,
        }


@dataclass(frozen=True)
class LatencyStats:
    frames: int
    mean_ms: float
    median_ms: float
    p95_ms: float
    max_ms: float
    fps: float
    overhead_p95_ms: float
    verdicts: dict

    def as_dict(self) -> dict:
        d = dict(self.__dict__)
        d["verdicts"] = {f"{k:g}ms": v for k, v in self.verdicts.items()}
        return d


def nearest_rank(values: Sequence[float], pct: float) -> float:
    if not values:
        raise ValueError("no values")
    ordered = sorted(values)
    rank = max(1, math.ceil(pct / 100.0 * len(ordered)))
    return ordered[rank - 1]


def latency_stats(timings: Sequence[Mapping], budgets_ms: Sequence[float] = DEFAULT_BUDGETS_MS) -> LatencyStats:
    """Summarize per-frame timing dicts (as logged in event records)."""
    if not timings:
        raise ValueError("no frames processed")
    total = [t["total_ms"] for t in timings]
    overhead = [t["total_ms"] - t["predict_ms"] for t in timings]
    span_ms = max(t["end_ms"] for t in timings) - min(t["start_ms"] for t in timings)
    p95 = nearest_rank(total, 95)
    return LatencyStats(
        frames=len(total),
        mean_ms=sum(total) / len(total),
        median_ms=nearest_rank(total, 50),
        p95_ms=p95,
        max_ms=max(total),
        fps=len(total) / (span_ms / 1000.0) if span_ms > 0 else math.inf,
        overhead_p95_ms=nearest_rank(overhead, 95),
        verdicts={float(b): p95 <= b for b in budgets_ms},
    )


def postprocess(frame: Frame, prediction: Optional[FramePrediction], config: StreamConfig):
    """Beam centroid/radius from the top target-class instance plus the exclusion mask."""
    mask = np.zeros((frame.height, frame.width), dtype=bool)
    centroid = radius = None
    if prediction is not None:
        beams = [i for i in prediction.instances
                 if i.class_id == config.target_class and i.confidence >= config.class_threshold]
        if beams:
            best = max(beams, key=lambda i: i.confidence)
            centroid = polygon_centroid(best.polygon)
            radius = equivalent_radius(best.polygon)
        for inst in prediction.instances:
            if inst.class_id in config.exclusion_classes and inst.confidence >= config.class_threshold:
                mask |= rasterize(inst.polygon, frame.width, frame.height).bits
    return centroid, radius, BinaryMask(frame.width, frame.height, mask)


_DONE = object()


def _put(q: queue.Queue, item, stop: threading.Event) -> bool:
    while not stop.is_set():
        try:
            q.put(item, timeout=0.05)
            return True
        except queue.Full:
            continue
    return False


def iter_stream(source: Iterable[Frame], predictor, config: StreamConfig = StreamConfig()):
    """Yield one :class:`FrameEvent` per input frame, in input order.

    Raises:
        StreamOrderError: a frame index does not increase within its video.
    """
    stop = threading.Event()
    q_in: queue.Queue = queue.Queue(maxsize=config.queue_depth)
    q_mid: queue.Queue = queue.Queue(maxsize=config.queue_depth)
    origin = time.perf_counter()

    def produce():
        last: dict[str, int] = {}
        try:
            for pos, frame in enumerate(source):
                vid, idx = frame.frame_id
                if vid in last and idx <= last[vid]:
                    _put(q_in, StreamOrderError(pos, frame.frame_id, FrameId(vid, last[vid])), stop)
                    return
                last[vid] = idx
                if not _put(q_in, (frame, time.perf_counter()), stop):
                    return
        except Exception as exc:  # source failure ends the stream
            _put(q_in, exc, stop)
            return
        _put(q_in, _DONE, stop)

    def predict_stage():
        while not stop.is_set():
            try:
                item = q_in.get(timeout=0.05)
            except queue.Empty:
                continue
            if item is _DONE or isinstance(item, Exception):
                _put(q_mid, item, stop)
                return
            frame, t_src = item
            t0 = time.perf_counter()
            try:
                pred, err = predictor.predict(frame.frame_id, frame.pixels), None
            except Exception as exc:
                pred, err = None, f"{type(exc).__name__}: {exc}"
            t1 = time.perf_counter()
            if not _put(q_mid, (frame, t_src, t0, t1, pred, err), stop):
                return

    workers = [threading.Thread(target=produce, daemon=True, name="beamlab-source"),
               threading.Thread(target=predict_stage, daemon=True, name="beamlab-predict")]
    for w in workers:
        w.start()
    try:
        while True:
            item = q_mid.get()
            if item is _DONE:
                break
            if isinstance(item, Exception):
                raise item
            frame, t_src, t0, t1, pred, err = item
            if err is not None:
                if config.fail_fast:
                    raise RuntimeError(f"predictor failed on {frame.frame_id}: {err}")
                log.warning("predictor failed on %s: %s", frame.frame_id, err)
            t2 = time.perf_counter()
            centroid, radius, mask = postprocess(frame, pred, config)
            t3 = time.perf_counter()
            yield FrameEvent(
                frame_id=frame.frame_id,
                beam_centroid=centroid,
                beam_radius=radius,
                exclusion_mask=mask,
                predict_ms=(t1 - t0) * 1e3,
                postprocess_ms=(t3 - t2) * 1e3,
                total_ms=(t3 - t0) * 1e3,
                age_ms=(t3 - t_src) * 1e3,
                start_ms=(t0 - origin) * 1e3,
                end_ms=(t3 - origin) * 1e3,
                error=err,
                prediction=pred,
            )
    finally:
        stop.set()
        for w in workers:
            w.join(timeout=5.0)


def run_stream(source: Iterable[Frame], predictor, config: StreamConfig = StreamConfig(),
               on_event: Optional[Callable[[FrameEvent], None]] = None):
    """Run the stream to completion.

    Returns:
        ``(events, stats)``; ``events`` is empty when ``on_event`` consumes them.
    """
    events = []
    timings = []
    for ev in iter_stream(source, predictor, config):
        timings.append(ev.to_record()["timings"])
        if on_event is not None:
            on_event(ev)
        else:
            events.append(ev)
    return events, latency_stats(timings, config.budgets_ms)


def frames_from_records(records: Iterable[FrameRecord]) -> list[Frame]:
    return [Frame(r.frame_id, r.width, r.height) for r in records]


def write_events(events: Iterable[FrameEvent], path, mask_dir=None) -> None:
    from .geometry import write_pnm

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if mask_dir is not None:
        Path(mask_dir).mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for ev in events:
            fh.write(json.dumps(ev.to_record(), separators=(",", ":")) + "\n")
            if mask_dir is not None:
                write_pnm(ev.exclusion_mask,
                          Path(mask_dir) / f"{ev.frame_id.video_id}_{ev.frame_id.index:06d}.pbm")


def benchmark(variants: Mapping[str, Callable[[], object]], records: Sequence[FrameRecord],
              config: StreamConfig = StreamConfig()) -> list[dict]:
    """Stream the same fixture through each predictor variant.

    ``variants`` maps a name to a zero-argument factory returning a predictor.
    Detection rate is the mean per-video rate over frames with a beam point.
    """
    if not variants:
        raise ValueError("need at least one variant")
    frames = frames_from_records(records)
    eval_cfg = EvalConfig(target_class=config.target_class, class_threshold=config.class_threshold)
    rows = []
    for name, factory in variants.items():
        try:
            predictor = factory()
        except Exception as exc:
            rows.append({"variant": name, "detection_rate": None, "fps": None,
                         "p95_ms": None, "error": f"{type(exc).__name__}: {exc}"})
            continue
        events, stats = run_stream(frames, predictor, config)
        preds = [ev.prediction if ev.prediction is not None
                 else FramePrediction(ev.frame_id, ev.exclusion_mask.width, ev.exclusion_mask.height)
                 for ev in events]
        annotated = [r for r in records if r.beam_point is not None]
        rate = None
        if annotated:
            reports = evaluate(annotated, preds, eval_cfg)
            rate = sum(r.detection_rate for r in reports) / len(reports)
        rows.append({"variant": name, "detection_rate": rate, "fps": stats.fps,
                     "p95_ms": stats.p95_ms, "error": None})
    return rows
