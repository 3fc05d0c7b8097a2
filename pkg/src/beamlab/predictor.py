"""Prediction backends.

Every backend implements ``predict(frame_id, frame=None) -> FramePrediction``
and drops instances under its class threshold (0.01 by default, as in the
deployed system). Three backends are provided:

* :class:`ReplayPredictor` serves a recorded prediction stream.
* :class:`SyntheticPredictor` serves seeded synthetic predictions produced by
  :func:`generate_synthetic_dataset`, which also yields matching ground truth.
* :class:`EnginePredictor` wraps an ONNX YOLO-style segmentation model. It
  needs ``onnxruntime`` (imported lazily) unless a session object is injected.

:class:`StubPredictor` adds a fixed delay around any backend (or returns
empty predictions) and exists for latency experiments.
"""

from __future__ import annotations

import math
import threading
import time
from dataclasses import dataclass, field
from typing import Mapping, Optional, Protocol, Sequence

import numpy as np

from .dataset_io import (
    AIMING_BEAM,
    PROBE,
    DatasetManifest,
    FrameId,
    FramePrediction,
    FrameRecord,
    PolygonInstance,
    index_predictions,
    load_predictions,
)
from .geometry import Point, Polygon, polygon_centroid

DEFAULT_CLASS_THRESHOLD = 0.01
DEFAULT_INPUT_SIZE = 480


class PredictorError(RuntimeError):
    pass


class UnknownFrameError(PredictorError, LookupError):
    pass


class BackendUnavailable(PredictorError):
    pass


class Predictor(Protocol):
    def predict(self, frame_id: FrameId, frame: Optional[np.ndarray] = None) -> FramePrediction:
        ...


class ReplayPredictor:
    """Replays a recorded prediction stream. Safe for concurrent calls."""

    def __init__(self, predictions, class_threshold: float = DEFAULT_CLASS_THRESHOLD):
        if isinstance(predictions, (str, bytes)) or hasattr(predictions, "__fspath__"):
            predictions = load_predictions(predictions)
        self._by_id = index_predictions(predictions)
        self.class_threshold = class_threshold

    def frame_ids(self) -> list[FrameId]:
        return list(self._by_id)

    def predict(self, frame_id, frame=None) -> FramePrediction:
        try:
            pred = self._by_id[FrameId(*frame_id)]
        except KeyError:
            raise UnknownFrameError(f"no recorded prediction for {FrameId(*frame_id)}") from None
        return pred.above(self.class_threshold)


class StubPredictor:
    """Sleeps ``delay_ms`` per call, then delegates to ``inner`` (if any)."""

    def __init__(self, delay_ms: float, inner: Optional[Predictor] = None,
                 width: int = DEFAULT_INPUT_SIZE, height: int = DEFAULT_INPUT_SIZE):
        self.delay_ms = float(delay_ms)
        self.inner = inner
        self.width, self.height = width, height

    def predict(self, frame_id, frame=None) -> FramePrediction:
        deadline = time.perf_counter() + self.delay_ms / 1000.0
        pred = (self.inner.predict(frame_id, frame) if self.inner is not None
                else FramePrediction(FrameId(*frame_id), self.width, self.height))
        remaining = deadline - time.perf_counter()
        if remaining > 0:
            time.sleep(remaining)
        return pred


# --- synthetic scenes ------------------------------------------------------

@dataclass(frozen=True)
class BeamPath:
    """Beam-center trajectory over frame index.

    ``lissajous`` traces ``center + amplitude * (sin(2 pi i / period_x),
    sin(2 pi i / period_y))``. ``raster`` sweeps a serpentine over the box
    ``center +- amplitude`` with ``rows`` passes spread over all frames.
    """

    kind: str = "lissajous"
    center: tuple[float, float] = (240.0, 240.0)
    amplitude: tuple[float, float] = (120.0, 90.0)
    period: tuple[float, float] = (97.0, 61.0)
    rows: int = 6

    def position(self, i: int, n_frames: int) -> Point:
        cx, cy = self.center
        ax, ay = self.amplitude
        if self.kind == "lissajous":
            return Point(cx + ax * math.sin(2 * math.pi * i / self.period[0]),
                         cy + ay * math.sin(2 * math.pi * i / self.period[1]))
        if self.kind == "raster":
            u = i / max(1, n_frames - 1) * self.rows
            row = min(int(u), self.rows - 1)
            frac = u - row
            if row % 2:
                frac = 1.0 - frac
            v = row / max(1, self.rows - 1)
            return Point(cx - ax + 2 * ax * frac, cy - ay + 2 * ay * v)
        if self.kind == "line":
            u = i / max(1, n_frames - 1)
            return Point(cx - ax + 2 * ax * u, cy - ay + 2 * ay * u)
        raise ValueError(f"unknown beam path kind {self.kind!r}")


@dataclass(frozen=True)
class SyntheticSceneConfig:
    """Parameters of the synthetic beam-scan generator.

    Confidence distributions are ``(mean, spread)`` pairs of a normal
    distribution clipped to ``[0, 1]``. ``label_noise_rate`` marks that
    fraction of frames as corrupted: their beam label is weak, so the model's
    matching prediction draws from ``corrupted_confidence`` instead.
    """

    beam_radius: float = 8.0
    beam_path: BeamPath = field(default_factory=BeamPath)
    detection_probability: float = 0.85
    true_confidence: tuple[float, float] = (0.8, 0.05)
    spurious_confidence: tuple[float, float] = (0.3, 0.1)
    centroid_jitter: float = 0.0
    spurious_rate: float = 0.0
    seed: int = 0
    width: int = 480
    height: int = 480
    video_id: str = "synthetic"
    surgery_type: str = "unknown"
    split: str = "test"
    label_noise_rate: float = 0.0
    corrupted_confidence: tuple[float, float] = (0.05, 0.02)
    include_probe: bool = False

    def __post_init__(self):
        for name in ("detection_probability", "label_noise_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        for name in ("true_confidence", "spurious_confidence", "corrupted_confidence"):
            mean, spread = getattr(self, name)
            if not 0.0 <= mean <= 1.0 or spread < 0:
                raise ValueError(f"invalid {name} {(mean, spread)}")
        if self.beam_radius <= 0:
            raise ValueError("beam_radius must be positive")
        if self.centroid_jitter < 0 or self.spurious_rate < 0:
            raise ValueError("centroid_jitter and spurious_rate must be non-negative")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("invalid canvas size")


def _clipped(rng, mean_spread) -> float:
    mean, spread = mean_spread
    return float(np.clip(rng.normal(mean, spread), 0.0, 1.0))


def _fit_inside(poly: Polygon, w: int, h: int) -> Polygon:
    x0, y0, x1, y1 = poly.bounds()
    dx = -x0 if x0 < 0 else (w - x1 if x1 > w else 0.0)
    dy = -y0 if y0 < 0 else (h - y1 if y1 > h else 0.0)
    return poly.translated(dx, dy) if dx or dy else poly


def generate_synthetic_dataset(config: SyntheticSceneConfig, n_frames: int):
    """Generate paired ground truth and predictions for one synthetic video.

    Returns:
        ``(manifest, predictions)``. Ground-truth beams are regular 32-gons
        along ``config.beam_path``. The manifest's ``notes`` list corrupted
        frames under ``"corrupted_frames"``. Beam points are recorded only for
        the ``test`` split.
    """
    rng = np.random.default_rng(config.seed)
    w, h = config.width, config.height
    records: list[FrameRecord] = []
    preds: list[FramePrediction] = []
    corrupted: list[str] = []
    for i in range(n_frames):
        fid = FrameId(config.video_id, i)
        center = config.beam_path.position(i, n_frames)
        beam = _fit_inside(Polygon.regular(center, config.beam_radius, 32), w, h)
        labels = [PolygonInstance(AIMING_BEAM, beam)]
        if config.include_probe:
            c = polygon_centroid(beam)
            probe = Polygon(((c.x + 12, c.y + 4), (c.x + 90, c.y + 40),
                             (c.x + 82, c.y + 56), (c.x + 6, c.y + 18)))
            labels.append(PolygonInstance(PROBE, _fit_inside(probe, w, h)))
        is_corrupt = rng.random() < config.label_noise_rate
        detected = rng.random() < config.detection_probability
        conf = _clipped(rng, config.corrupted_confidence if is_corrupt else config.true_confidence)
        jitter = rng.normal(0.0, config.centroid_jitter, 2) if config.centroid_jitter else (0.0, 0.0)
        n_spurious = int(rng.poisson(config.spurious_rate)) if config.spurious_rate else 0
        instances: list[PolygonInstance] = []
        if detected:
            moved = _fit_inside(beam.translated(float(jitter[0]), float(jitter[1])), w, h)
            instances.append(PolygonInstance(AIMING_BEAM, moved, conf))
        for _ in range(n_spurious):
            r = config.beam_radius * float(rng.uniform(0.5, 1.0))
            sx = float(rng.uniform(r, w - r))
            sy = float(rng.uniform(r, h - r))
            sconf = _clipped(rng, config.spurious_confidence)
            instances.append(PolygonInstance(AIMING_BEAM, Polygon.regular(Point(sx, sy), r, 16), sconf))
        for lab in labels[1:]:
            instances.append(PolygonInstance(lab.class_id, lab.polygon, _clipped(rng, config.true_confidence)))
        if is_corrupt:
            corrupted.append(str(fid))
        records.append(FrameRecord(
            frame_id=fid, width=w, height=h, instances=tuple(labels),
            beam_point=polygon_centroid(beam) if config.split == "test" else None,
            surgery_type=config.surgery_type,
        ))
        preds.append(FramePrediction(fid, w, h, tuple(instances)))
    notes = {"generator": "synthetic", "seed": config.seed, "corrupted_frames": corrupted}
    return DatasetManifest(config.split, tuple(records), notes), preds


class SyntheticPredictor(ReplayPredictor):
    """Seeded synthetic backend; deterministic for a fixed config."""

    def __init__(self, config: SyntheticSceneConfig, n_frames: int,
                 class_threshold: float = DEFAULT_CLASS_THRESHOLD):
        self.manifest, preds = generate_synthetic_dataset(config, n_frames)
        super().__init__(preds, class_threshold)


# --- external inference engine ---------------------------------------------

def letterbox(image: np.ndarray, side: int):
    """Resize keeping aspect ratio and pad to ``side`` x ``side``.

    Returns:
        (padded image, scale, (pad_x, pad_y))
    """
    import cv2

    h, w = image.shape[:2]
    scale = min(side / w, side / h)
    nw, nh = max(1, round(w * scale)), max(1, round(h * scale))
    resized = cv2.resize(image, (nw, nh), interpolation=cv2.INTER_LINEAR)
    pad_x, pad_y = (side - nw) // 2, (side - nh) // 2
    out = np.full((side, side, 3), 114, dtype=np.uint8)
    out[pad_y:pad_y + nh, pad_x:pad_x + nw] = resized
    return out, scale, (pad_x, pad_y)


def _nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> list[int]:
    order = np.argsort(-scores, kind="stable")
    keep = []
    x0, y0, x1, y1 = boxes.T
    areas = (x1 - x0) * (y1 - y0)
    while order.size:
        i = order[0]
        keep.append(int(i))
        rest = order[1:]
        iw = np.clip(np.minimum(x1[i], x1[rest]) - np.maximum(x0[i], x0[rest]), 0, None)
        ih = np.clip(np.minimum(y1[i], y1[rest]) - np.maximum(y0[i], y0[rest]), 0, None)
        inter = iw * ih
        iou = inter / np.maximum(areas[i] + areas[rest] - inter, 1e-12)
        order = rest[iou <= iou_threshold]
    return keep


def decode_segmentation(outputs: Sequence[np.ndarray], frame_id: FrameId, width: int, height: int,
                        input_size: int, scale: float, pad: tuple[int, int],
                        class_threshold: float = DEFAULT_CLASS_THRESHOLD,
                        class_map: Optional[Mapping[int, int]] = None,
                        nms_iou: float = 0.7, max_det: int = 100) -> FramePrediction:
    """Decode YOLOv8-seg style outputs into polygon instances.

    ``outputs[0]`` has shape ``(1, 4 + nc + nm, N)`` with boxes as
    ``(cx, cy, w, h)`` in letterboxed input pixels; ``outputs[1]`` has shape
    ``(1, nm, mh, mw)`` holding mask prototypes.
    """
    import cv2

    det = np.asarray(outputs[0])[0].T
    protos = np.asarray(outputs[1])[0]
    nm = protos.shape[0]
    nc = det.shape[1] - 4 - nm
    scores = det[:, 4:4 + nc]
    cls = scores.argmax(axis=1)
    conf = scores[np.arange(len(det)), cls]
    keep = conf >= class_threshold
    det, cls, conf = det[keep], cls[keep], conf[keep]
    if not len(det):
        return FramePrediction(frame_id, width, height)
    cx, cy, bw, bh = det[:, 0], det[:, 1], det[:, 2], det[:, 3]
    boxes = np.stack([cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2], axis=1)
    # Class-aware NMS via per-class offsets.
    offset = cls[:, None] * (4.0 * input_size)
    order = _nms(boxes + offset, conf, nms_iou)[:max_det]
    mh, mw = protos.shape[1:]
    flat = protos.reshape(nm, -1)
    instances = []
    for i in order:
        logits = (det[i, 4 + nc:] @ flat).reshape(mh, mw)
        prob = cv2.resize(1.0 / (1.0 + np.exp(-logits)), (input_size, input_size),
                          interpolation=cv2.INTER_LINEAR)
        x0, y0, x1, y1 = np.clip(boxes[i], 0, input_size).round().astype(int)
        mask = np.zeros((input_size, input_size), dtype=np.uint8)
        mask[y0:y1, x0:x1] = prob[y0:y1, x0:x1] > 0.5
        contours, _ = cv2.findContours(mask, cv2.RETR_EXTERNAL, cv2.CHAIN_APPROX_SIMPLE)
        if not contours:
            continue
        contour = max(contours, key=cv2.contourArea).reshape(-1, 2).astype(float)
        if len(contour) < 3:
            continue
        xs = np.clip((contour[:, 0] + 0.5 - pad[0]) / scale, 0, width)
        ys = np.clip((contour[:, 1] + 0.5 - pad[1]) / scale, 0, height)
        try:
            poly = Polygon(tuple(zip(xs.tolist(), ys.tolist())))
        except ValueError:
            continue
        class_id = int(cls[i]) if class_map is None else class_map.get(int(cls[i]))
        if class_id is None:
            continue
        instances.append(PolygonInstance(class_id, poly, float(conf[i])))
    return FramePrediction(frame_id, width, height, tuple(instances))


class EnginePredictor:
    """ONNX segmentation model adapter. Single consumer only.

    Args:
        model_path: Path to the ``.onnx`` model.
        input_size: Square network input side (480 in the deployed system).
        class_threshold: Minimum class score to keep an instance.
        class_map: Optional mapping of model class index to registry id.
        session: Pre-built object with ``run(None, {name: tensor})`` and
            ``get_inputs()``; bypasses ``onnxruntime`` when given.
    """

    def __init__(self, model_path=None, input_size: int = DEFAULT_INPUT_SIZE,
                 class_threshold: float = DEFAULT_CLASS_THRESHOLD,
                 class_map: Optional[Mapping[int, int]] = None,
                 providers: Optional[Sequence[str]] = None, session=None):
        if session is None:
            try:
                import onnxruntime as ort
            except ImportError as exc:
                raise BackendUnavailable("onnxruntime is not installed") from exc
            session = ort.InferenceSession(str(model_path), providers=list(providers or ["CPUExecutionProvider"]))
        self.session = session
        self.input_name = session.get_inputs()[0].name
        self.input_size = input_size
        self.class_threshold = class_threshold
        self.class_map = class_map
        self._lock = threading.Lock()

    def predict(self, frame_id, frame=None) -> FramePrediction:
        if frame is None:
            raise PredictorError("engine backend needs frame pixels")
        h, w = frame.shape[:2]
        boxed, scale, pad = letterbox(frame, self.input_size)
        tensor = boxed[:, :, ::-1].transpose(2, 0, 1)[None].astype(np.float32) / 255.0
        if not self._lock.acquire(blocking=False):
            raise PredictorError("engine backend is single-consumer")
        try:
            t0 = time.perf_counter()
            outputs = self.session.run(None, {self.input_name: np.ascontiguousarray(tensor)})
            ms = (time.perf_counter() - t0) * 1000.0
        finally:
            self._lock.release()
        pred = decode_segmentation(outputs, FrameId(*frame_id), w, h, self.input_size, scale, pad,
                                   self.class_threshold, self.class_map)
        return FramePrediction(pred.frame_id, w, h, pred.instances, ms)
