import math

import numpy as np
import pytest

from beamlab.dataset_io import FrameId, FramePrediction, PolygonInstance, write_predictions
from beamlab.evaluator import evaluate
from beamlab.geometry import Polygon, polygon_centroid
from beamlab.predictor import (
    BackendUnavailable,
    BeamPath,
    EnginePredictor,
    ReplayPredictor,
    StubPredictor,
    SyntheticPredictor,
    SyntheticSceneConfig,
    UnknownFrameError,
    decode_segmentation,
    generate_synthetic_dataset,
)

SQ = Polygon(((1, 1), (5, 1), (5, 5), (1, 5)))


def _preds():
    return [
        FramePrediction(FrameId("v", 0), 10, 10, (PolygonInstance(0, SQ, 0.9), PolygonInstance(1, SQ, 0.005))),
        FramePrediction(FrameId("v", 1), 10, 10, (PolygonInstance(0, SQ, 0.01),)),
    ]


def test_replay_identity_above_threshold(tmp_path):
    write_predictions(_preds(), tmp_path / "p.jsonl")
    rp = ReplayPredictor(tmp_path / "p.jsonl")
    got = rp.predict(FrameId("v", 0))
    assert got.instances == (_preds()[0].instances[0],)
    # threshold is inclusive
    assert len(rp.predict(("v", 1)).instances) == 1


def test_class_threshold_drops_low_confidence():
    rp = ReplayPredictor(_preds(), class_threshold=0.01)
    assert all(i.confidence >= 0.01 for i in rp.predict(FrameId("v", 0)).instances)
    assert ReplayPredictor(_preds(), class_threshold=0.0).predict(FrameId("v", 0)).instances[1].confidence == 0.005


def test_replay_unknown_frame():
    with pytest.raises(UnknownFrameError):
        ReplayPredictor(_preds()).predict(FrameId("v", 9))


def test_replay_byte_identical_files(tmp_path):
    write_predictions(_preds(), tmp_path / "a.jsonl")
    (tmp_path / "b.jsonl").write_bytes((tmp_path / "a.jsonl").read_bytes())
    a, b = ReplayPredictor(tmp_path / "a.jsonl"), ReplayPredictor(tmp_path / "b.jsonl")
    assert [a.predict(f) for f in a.frame_ids()] == [b.predict(f) for f in b.frame_ids()]


def test_synthetic_determinism():
    cfg = SyntheticSceneConfig(seed=7, centroid_jitter=2.0, spurious_rate=0.5)
    a = SyntheticPredictor(cfg, 50)
    b = SyntheticPredictor(cfg, 50)
    assert [a.predict(FrameId("synthetic", i)) for i in range(50)] == \
        [b.predict(FrameId("synthetic", i)) for i in range(50)]
    assert a.manifest == b.manifest


def test_synthetic_noiseless_centroids_exact():
    cfg = SyntheticSceneConfig(detection_probability=1.0, centroid_jitter=0.0, spurious_rate=0.0, seed=3)
    manifest, preds = generate_synthetic_dataset(cfg, 60)
    for rec, pred in zip(manifest.records, preds):
        assert rec.frame_id == pred.frame_id
        (beam,) = pred.instances
        assert polygon_centroid(beam.polygon) == rec.beam_point
        assert len(rec.instances[0].polygon.vertices) == 32


def test_synthetic_zero_detection():
    cfg = SyntheticSceneConfig(detection_probability=0.0, seed=3)
    _, preds = generate_synthetic_dataset(cfg, 40)
    assert all(not p.instances for p in preds)


def test_synthetic_detection_rate_concentrates():
    n = 1000
    cfg = SyntheticSceneConfig(detection_probability=0.85, seed=11)
    manifest, preds = generate_synthetic_dataset(cfg, n)
    present = sum(1 for p in preds if p.instances)
    # replay the generator's draw sequence independently: the second uniform of each frame decides presence
    rng = np.random.default_rng(11)
    expected = 0
    for _ in range(n):
        rng.random()
        expected += rng.random() < 0.85
        rng.normal()
    assert present == expected
    assert abs(present / n - 0.85) <= 0.03
    # binomial 3-sigma band
    assert abs(present - 0.85 * n) <= 3 * math.sqrt(n * 0.85 * 0.15)
    (report,) = evaluate(manifest.records, preds)
    assert report.detection_rate == present / n


def test_synthetic_label_noise_recorded():
    cfg = SyntheticSceneConfig(label_noise_rate=0.1, detection_probability=1.0, seed=5, split="train")
    manifest, preds = generate_synthetic_dataset(cfg, 300)
    corrupted = set(manifest.notes["corrupted_frames"])
    assert 10 < len(corrupted) < 60
    for p in preds:
        conf = p.instances[0].confidence
        if str(p.frame_id) in corrupted:
            assert conf < 0.2
        else:
            assert conf > 0.5
    assert all(r.beam_point is None for r in manifest.records)


def test_synthetic_polygons_stay_in_frame():
    cfg = SyntheticSceneConfig(beam_path=BeamPath("raster", (240, 240), (240, 240), rows=4),
                               centroid_jitter=10.0, spurious_rate=2.0, seed=2, include_probe=True)
    manifest, preds = generate_synthetic_dataset(cfg, 80)
    for p in preds:
        for inst in p.instances:
            x0, y0, x1, y1 = inst.polygon.bounds()
            assert 0 <= x0 and x1 <= 480 and 0 <= y0 and y1 <= 480


@pytest.mark.parametrize("bad", [dict(detection_probability=1.5), dict(beam_radius=0),
                                 dict(true_confidence=(1.2, 0.1)), dict(spurious_rate=-1)])
def test_synthetic_config_validation(bad):
    with pytest.raises(ValueError):
        SyntheticSceneConfig(**bad)


def test_stub_delay():
    import time

    stub = StubPredictor(20, width=8, height=6)
    t0 = time.perf_counter()
    pred = stub.predict(FrameId("v", 0))
    assert time.perf_counter() - t0 >= 0.019
    assert (pred.width, pred.height, pred.instances) == (8, 6, ())


def test_engine_requires_runtime_or_session():
    try:
        import onnxruntime  # noqa: F401
    except ImportError:
        with pytest.raises(BackendUnavailable):
            EnginePredictor("model.onnx")


def _fake_outputs(input_size=480, nc=5, nm=4, proto=120):
    """One confident beam box at (200, 240) with a disk-shaped prototype mask."""
    n = 8
    det = np.zeros((4 + nc + nm, n), dtype=np.float32)
    det[:4, 0] = [200, 240, 40, 40]
    det[4 + 0, 0] = 0.8            # class 0 score
    det[4 + nc, 0] = 10.0          # coefficient on prototype 0
    det[:4, 1] = [202, 241, 40, 40]  # duplicate, lower score: removed by NMS
    det[4 + 0, 1] = 0.6
    det[4 + nc, 1] = 10.0
    det[:4, 2] = [100, 100, 30, 30]  # below class threshold
    det[4 + 2, 2] = 0.005
    protos = np.full((nm, proto, proto), -1.0, dtype=np.float32)
    yy, xx = np.mgrid[0:proto, 0:proto]
    s = proto / input_size
    protos[0][(xx + 0.5 - 200 * s) ** 2 + (yy + 0.5 - 240 * s) ** 2 <= (12 * s) ** 2] = 1.0
    return [det[None], protos[None]]


def test_decode_segmentation():
    pred = decode_segmentation(_fake_outputs(), FrameId("v", 0), 480, 480, 480, 1.0, (0, 0))
    assert len(pred.instances) == 1
    inst = pred.instances[0]
    assert inst.class_id == 0 and inst.confidence == pytest.approx(0.8)
    c = polygon_centroid(inst.polygon)
    assert abs(c.x - 200) < 2 and abs(c.y - 240) < 2


class _FakeSession:
    def __init__(self, outputs):
        self.outputs = outputs
        self.seen = None

    def get_inputs(self):
        class _I:
            name = "images"
        return [_I()]

    def run(self, names, feeds):
        self.seen = feeds["images"]
        return self.outputs


def test_engine_adapter_with_injected_session():
    sess = _FakeSession(_fake_outputs())
    eng = EnginePredictor(session=sess, input_size=480)
    frame = np.zeros((960, 960, 3), dtype=np.uint8)
    pred = eng.predict(FrameId("v", 0), frame)
    assert sess.seen.shape == (1, 3, 480, 480) and sess.seen.dtype == np.float32
    assert (pred.width, pred.height) == (960, 960)
    c = polygon_centroid(pred.instances[0].polygon)
    # letterbox scale 0.5: input (200, 240) maps to (400, 480) in the frame
    assert abs(c.x - 400) < 4 and abs(c.y - 480) < 4
    assert pred.inference_ms is not None
