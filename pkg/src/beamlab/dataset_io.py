"""Annotation, manifest and prediction-stream formats.

Label files (one per image) hold one instance per line::

    class_id x1 y1 x2 y2 ... xK yK

with coordinates normalized to ``[0, 1]`` by image width and height and
``K >= 3``. This mirrors the YOLO segmentation text layout.

Manifests are JSON documents with a fixed key order (see
:func:`manifest_to_text`). Prediction streams are newline-delimited JSON,
one frame per line (see :func:`prediction_to_line`).
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple, Optional

from .geometry import GeometryError, Point, Polygon

AIMING_BEAM, INSTRUMENT, PROBE, FIBER, SHAFT = range(5)
CLASS_NAMES = {
    AIMING_BEAM: "aiming_beam",
    INSTRUMENT: "instrument",
    PROBE: "probe",
    FIBER: "fiber",
    SHAFT: "shaft",
}
EXCLUSION_CLASSES = (INSTRUMENT, PROBE, FIBER, SHAFT)
SURGERY_TYPES = ("TORS", "non_TORS", "unknown")
SPLITS = ("train", "val", "test")
MANIFEST_VERSION = 1
COORD_DECIMALS = 12


class FormatError(ValueError):
    """Malformed or invalid file content. ``location`` names file and line."""

    def __init__(self, message: str, location: str | None = None):
        self.location = location
        super().__init__(f"{location}: {message}" if location else message)


class FrameId(NamedTuple):
    video_id: str
    index: int

    def __str__(self):
        return f"{self.video_id}:{self.index}"


@dataclass(frozen=True)
class PolygonInstance:
    """One annotated or predicted object; polygon in pixel coordinates."""

    class_id: int
    polygon: Polygon
    confidence: Optional[float] = None

    def __post_init__(self):
        if self.class_id not in CLASS_NAMES:
            raise FormatError(f"unknown class {self.class_id}")
        if self.confidence is not None and not 0.0 <= self.confidence <= 1.0:
            raise FormatError(f"confidence {self.confidence} outside [0, 1]")


@dataclass(frozen=True)
class FrameRecord:
    frame_id: FrameId
    width: int
    height: int
    instances: tuple[PolygonInstance, ...] = ()
    beam_point: Optional[Point] = None
    surgery_type: str = "unknown"
    image_path: Optional[str] = None
    label_path: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "frame_id", FrameId(*self.frame_id))
        object.__setattr__(self, "instances", tuple(self.instances))
        if self.width <= 0 or self.height <= 0:
            raise FormatError(f"{self.frame_id}: invalid size {self.width}x{self.height}")
        if self.surgery_type not in SURGERY_TYPES:
            raise FormatError(f"{self.frame_id}: unknown surgery type {self.surgery_type!r}")
        for inst in self.instances:
            x0, y0, x1, y1 = inst.polygon.bounds()
            if x0 < 0 or y0 < 0 or x1 > self.width or y1 > self.height:
                raise FormatError(f"{self.frame_id}: polygon outside the image")


@dataclass(frozen=True)
class FramePrediction:
    """Predicted instances for one frame; every confidence is set."""

    frame_id: FrameId
    width: int
    height: int
    instances: tuple[PolygonInstance, ...] = ()
    inference_ms: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "frame_id", FrameId(*self.frame_id))
        object.__setattr__(self, "instances", tuple(self.instances))
        for inst in self.instances:
            if inst.confidence is None:
                raise FormatError(f"{self.frame_id}: prediction without confidence")

    def above(self, threshold: float) -> "FramePrediction":
        kept = tuple(i for i in self.instances if i.confidence >= threshold)
        return replace(self, instances=kept)


@dataclass(frozen=True)
class DatasetManifest:
    split: str
    records: tuple[FrameRecord, ...]
    notes: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        if self.split not in SPLITS:
            raise FormatError(f"unknown split {self.split!r}")
        seen = set()
        for r in self.records:
            if r.frame_id in seen:
                raise FormatError(f"duplicate frame_id {r.frame_id}")
            seen.add(r.frame_id)
            if r.beam_point is not None and self.split != "test":
                raise FormatError(f"{r.frame_id}: beam point outside a test split")

    def __len__(self):
        return len(self.records)

    def videos(self) -> dict[str, str]:
        """Map of video_id to surgery type, in first-seen order."""
        out: dict[str, str] = {}
        for r in self.records:
            prev = out.setdefault(r.frame_id.video_id, r.surgery_type)
            if prev != r.surgery_type:
                raise FormatError(f"video {r.frame_id.video_id} has mixed surgery types")
        return out

    def subset(self, keep: Iterable[FrameId]) -> "DatasetManifest":
        keep = set(keep)
        return replace(self, records=tuple(r for r in self.records if r.frame_id in keep))


# --- label files -----------------------------------------------------------

def _coord(v: float) -> str:
    return repr(round(v, COORD_DECIMALS) + 0.0)


def parse_label_file(text: str, width: int, height: int, source: str = "<labels>") -> list[PolygonInstance]:
    """Parse a normalized polygon label file into pixel-space instances."""
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        fields = line.split()
        if not fields:
            continue
        where = f"{source}:{lineno}"
        try:
            cls = int(fields[0])
            coords = [float(f) for f in fields[1:]]
        except ValueError as exc:
            raise FormatError(f"malformed number ({exc})", where) from None
        if cls not in CLASS_NAMES:
            raise FormatError(f"unknown class {cls}", where)
        if len(coords) % 2:
            raise FormatError("odd number of coordinates", where)
        if len(coords) < 6:
            raise FormatError(f"need >= 3 vertices, got {len(coords) // 2}", where)
        if any(not (0.0 <= c <= 1.0) for c in coords):
            raise FormatError("coordinate outside [0, 1]", where)
        xs = [c * width for c in coords[0::2]]
        ys = [c * height for c in coords[1::2]]
        try:
            poly = Polygon(tuple(zip(xs, ys)))
        except GeometryError as exc:
            raise FormatError(str(exc), where) from None
        out.append(PolygonInstance(cls, poly))
    return out


def format_instance(inst: PolygonInstance, width: int, height: int) -> str:
    parts = [str(inst.class_id)]
    for x, y in inst.polygon.vertices:
        parts.append(_coord(x / width))
        parts.append(_coord(y / height))
    return " ".join(parts)


def format_label_file(instances: Iterable[PolygonInstance], width: int, height: int) -> str:
    return "".join(format_instance(i, width, height) + "\n" for i in instances)


# --- manifests -------------------------------------------------------------

def manifest_to_text(manifest: DatasetManifest) -> str:
    """Canonical manifest text. Key order is fixed so output is byte-stable."""
    records = []
    for r in manifest.records:
        rec = {
            "video_id": r.frame_id.video_id,
            "index": r.frame_id.index,
            "width": r.width,
            "height": r.height,
            "image": r.image_path,
            "labels": _label_relpath(r),
            "beam_point": None if r.beam_point is None else [r.beam_point.x, r.beam_point.y],
        }
        records.append(rec)
    doc = {
        "version": MANIFEST_VERSION,
        "split": manifest.split,
        "notes": manifest.notes,
        "videos": manifest.videos(),
        "records": records,
    }
    return json.dumps(doc, indent=1, sort_keys=False) + "\n"


def _label_relpath(r: FrameRecord) -> str:
    if r.label_path:
        return r.label_path
    return f"labels/{r.frame_id.video_id}/{r.frame_id.index:06d}.txt"


def write_manifest(manifest: DatasetManifest, path) -> None:
    """Write the manifest and one label file per record (paths relative to it)."""
    path = Path(path)
    root = path.parent
    for r in manifest.records:
        label = root / _label_relpath(r)
        label.parent.mkdir(parents=True, exist_ok=True)
        label.write_text(format_label_file(r.instances, r.width, r.height), encoding="utf-8")
    root.mkdir(parents=True, exist_ok=True)
    path.write_text(manifest_to_text(manifest), encoding="utf-8")


def load_manifest(path) -> DatasetManifest:
    """Load a manifest and every label file it references.

    Raises:
        FileNotFoundError: missing manifest.
        FormatError: invalid content, duplicate frame ids or dangling references.
    """
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"invalid JSON ({exc.msg})", f"{path}:{exc.lineno}") from None
    root = path.parent
    videos = doc.get("videos", {})
    records = []
    seen = set()
    for n, rec in enumerate(doc.get("records", [])):
        where = f"{path}: record {n}"
        try:
            fid = FrameId(str(rec["video_id"]), int(rec["index"]))
            width, height = int(rec["width"]), int(rec["height"])
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"bad record ({exc})", where) from None
        if fid in seen:
            raise FormatError(f"duplicate frame_id {fid}", where)
        seen.add(fid)
        label_rel = rec.get("labels")
        instances: list[PolygonInstance] = []
        if label_rel is not None:
            label_file = root / label_rel
            if not label_file.is_file():
                raise FormatError(f"dangling label reference {label_rel}", where)
            instances = parse_label_file(label_file.read_text(encoding="utf-8"), width, height, str(label_file))
        image = rec.get("image")
        if image is not None and not (root / image).exists():
            raise FormatError(f"dangling image reference {image}", where)
        bp = rec.get("beam_point")
        try:
            records.append(FrameRecord(
                frame_id=fid,
                width=width,
                height=height,
                instances=tuple(instances),
                beam_point=None if bp is None else Point(float(bp[0]), float(bp[1])),
                surgery_type=videos.get(fid.video_id, "unknown"),
                image_path=image,
                label_path=label_rel,
            ))
        except (FormatError, GeometryError) as exc:
            raise FormatError(str(exc), where) from None
    return DatasetManifest(split=doc.get("split", "train"), records=tuple(records), notes=doc.get("notes", {}))


# --- prediction streams ----------------------------------------------------

def prediction_to_line(pred: FramePrediction) -> str:
    """Canonical single-line JSON for one frame's predictions."""
    doc = {
        "video_id": pred.frame_id.video_id,
        "index": pred.frame_id.index,
        "width": pred.width,
        "height": pred.height,
        "instances": [
            {
                "class_id": i.class_id,
                "confidence": i.confidence,
                "polygon": [float(_coord(c)) for x, y in i.polygon.vertices
                            for c in (x / pred.width, y / pred.height)],
            }
            for i in pred.instances
        ],
    }
    if pred.inference_ms is not None:
        doc["inference_ms"] = pred.inference_ms
    return json.dumps(doc, separators=(",", ":"))


def prediction_from_line(line: str, where: str = "<predictions>") -> FramePrediction:
    try:
        doc = json.loads(line)
        fid = FrameId(str(doc["video_id"]), int(doc["index"]))
        width, height = int(doc["width"]), int(doc["height"])
        raw = doc.get("instances", [])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"bad prediction record ({exc})", where) from None
    instances = []
    for k, item in enumerate(raw):
        if item.get("confidence") is None:
            raise FormatError(f"instance {k}: missing confidence", where)
        conf = float(item["confidence"])
        if not (0.0 <= conf <= 1.0) or math.isnan(conf):
            raise FormatError(f"instance {k}: confidence {conf} outside [0, 1]", where)
        cls = int(item["class_id"])
        if cls not in CLASS_NAMES:
            raise FormatError(f"instance {k}: unknown class {cls}", where)
        coords = item.get("polygon", [])
        if len(coords) < 6 or len(coords) % 2:
            raise FormatError(f"instance {k}: need >= 3 vertex pairs", where)
        if any(not (0.0 <= float(c) <= 1.0) for c in coords):
            raise FormatError(f"instance {k}: coordinate outside [0, 1]", where)
        try:
            poly = Polygon(tuple((float(x) * width, float(y) * height)
                                 for x, y in zip(coords[0::2], coords[1::2])))
        except GeometryError as exc:
            raise FormatError(f"instance {k}: {exc}", where) from None
        instances.append(PolygonInstance(cls, poly, conf))
    ms = doc.get("inference_ms")
    return FramePrediction(fid, width, height, tuple(instances), None if ms is None else float(ms))


def iter_predictions(path) -> Iterator[FramePrediction]:
    """Stream predictions from a JSONL file, enforcing per-video frame order."""
    last: dict[str, int] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            where = f"{path}:{lineno}"
            pred = prediction_from_line(line, where)
            vid, idx = pred.frame_id
            if vid in last and idx <= last[vid]:
                raise FormatError(
                    f"frame index {idx} not after {last[vid]} in video {vid}", where)
            last[vid] = idx
            yield pred


def load_predictions(path) -> list[FramePrediction]:
    return list(iter_predictions(path))


def write_predictions(predictions: Iterable[FramePrediction], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        for p in predictions:
            fh.write(prediction_to_line(p) + "\n")
    os.replace(tmp, path)


def index_predictions(predictions: Iterable[FramePrediction]) -> dict[FrameId, FramePrediction]:
    out = {}
    for p in predictions:
        if p.frame_id in out:
            raise FormatError(f"duplicate prediction for {p.frame_id}")
        out[p.frame_id] = p
    return out
