"""``beamlab`` command-line entry point.

Exit codes: 0 success, 1 validation error (bad flags or invalid data),
2 I/O error (missing or unreadable files). Diagnostics go to stderr.

A JSON config file (``--config``) may hold defaults, either flat or under a
key named after the subcommand; explicit flags override it.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .calibration import derive_scale, to_mm
from .cleaner import CleaningConfig, clean, sweep, write_sweep
from .dataset_io import (
    FrameId,
    load_manifest,
    load_predictions,
    write_manifest,
    write_predictions,
)
from .evaluator import (
    EvalConfig,
    annotation_radii,
    model_radii,
    coverage_map,
    coverage_deficit,
    evaluate,
    format_table,
    map_metric,
    report_document,
)
from .geometry import write_pnm
from .pipeline import Frame, StreamConfig, benchmark, frames_from_records, run_stream
from .predictor import (
    BeamPath,
    EnginePredictor,
    ReplayPredictor,
    StubPredictor,
    SyntheticPredictor,
    SyntheticSceneConfig,
    generate_synthetic_dataset,
)

log = logging.getLogger("beamlab")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _dump(doc, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def _floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}") from None


def synthetic_config_from_dict(doc: dict) -> SyntheticSceneConfig:
    doc = dict(doc)
    doc.pop("n_frames", None)
    known = {f.name for f in fields(SyntheticSceneConfig)}
    unknown = set(doc) - known
    if unknown:
        raise ValueError(f"unknown synthetic config keys: {sorted(unknown)}")
    if "beam_path" in doc:
        bp = {k: tuple(v) if isinstance(v, list) else v for k, v in doc["beam_path"].items()}
        doc["beam_path"] = BeamPath(**bp)
    for k, v in list(doc.items()):
        if isinstance(v, list):
            doc[k] = tuple(v)
    return SyntheticSceneConfig(**doc)


def make_predictor(spec: str, class_threshold: float, input_size: int = 480):
    """Build a predictor from ``replay:FILE``, ``synthetic:CONFIG``, ``engine:MODEL``
    or ``stub:MS[+INNER]``."""
    kind, _, arg = spec.partition(":")
    if kind == "replay":
        return ReplayPredictor(arg, class_threshold)
    if kind == "synthetic":
        doc = json.loads(Path(arg).read_text(encoding="utf-8"))
        return SyntheticPredictor(synthetic_config_from_dict(doc), int(doc.get("n_frames", 200)), class_threshold)
    if kind == "engine":
        return EnginePredictor(arg, input_size=input_size, class_threshold=class_threshold)
    if kind == "stub":
        ms, _, inner = arg.partition("+")
        return StubPredictor(float(ms), make_predictor(inner, class_threshold, input_size) if inner else None)
    raise ValueError(f"unknown predictor spec {spec!r}")


def _image_frames(directory: Path, with_pixels: bool):
    from PIL import Image

    paths = sorted(p for p in directory.iterdir() if p.suffix.lower() in {".png", ".jpg", ".jpeg", ".bmp"})
    for i, p in enumerate(paths):
        with Image.open(p) as im:
            w, h = im.size
            pixels = None
            if with_pixels:
                import numpy as np

                pixels = np.asarray(im.convert("RGB"))[:, :, ::-1].copy()
        yield Frame(FrameId(directory.name, i), w, h, pixels)


# --- subcommands -----------------------------------------------------------

def cmd_synth(args) -> int:
    doc = {}
    if args.scene:
        doc = json.loads(Path(args.scene).read_text(encoding="utf-8"))
    if args.seed is not None:
        doc["seed"] = args.seed
    if args.split:
        doc["split"] = args.split
    n = args.n_frames or int(doc.get("n_frames", 200))
    manifest, preds = generate_synthetic_dataset(synthetic_config_from_dict(doc), n)
    out = Path(args.out)
    write_manifest(manifest, out / "manifest.json")
    write_predictions(preds, out / "predictions.jsonl")
    print(f"wrote {len(manifest)} frames to {out}")
    return 0


def _cleaning_config(args, kappa: float) -> CleaningConfig:
    return CleaningConfig(kappa=kappa, match_iou=args.match_iou,
                          spurious_min_confidence=args.spurious_min_confidence)


def cmd_clean(args) -> int:
    manifest = load_manifest(args.manifest)
    preds = load_predictions(args.predictions)
    outcome = clean(manifest, preds, _cleaning_config(args, args.kappa))
    outcome.write(args.out)
    hist = outcome.issue_histogram()
    print(f"kappa={outcome.kappa:g} removed {len(outcome.removed)}/{len(manifest)} "
          f"({outcome.removed_fraction:.1%}) " + " ".join(f"{k}={v}" for k, v in hist.items()))
    return 0


def cmd_sweep(args) -> int:
    manifest = load_manifest(args.manifest)
    preds = load_predictions(args.predictions)
    outcomes = sweep(manifest, preds, args.kappas, _cleaning_config(args, args.kappas[0]))
    write_sweep(outcomes, args.out)
    print(f"{'kappa':>6} {'removed':>8} {'fraction':>9}")
    for o in outcomes:
        print(f"{o.kappa:>6g} {len(o.removed):>8} {o.removed_fraction:>9.4f}")
    return 0


def _eval_config(args) -> EvalConfig:
    return EvalConfig(class_threshold=args.class_threshold, gate_px=args.gate_px,
                      coverage_radius_px=args.coverage_radius, default_radius_px=args.default_radius)


def cmd_eval(args) -> int:
    manifest = load_manifest(args.manifest)
    preds = load_predictions(args.predictions)
    cfg = _eval_config(args)
    reports = evaluate(manifest.records, preds, cfg)
    scale = derive_scale(args.reference_mm, args.reference_px) if args.reference_mm else None
    _dump(report_document(reports, cfg, scale), Path(args.report))
    sys.stdout.write(format_table(reports))
    return 0


def cmd_map(args) -> int:
    manifest = load_manifest(args.manifest)
    preds = load_predictions(args.predictions)
    result = map_metric(manifest.records, preds)
    for row in result["per_class"].values():
        row["ap"] = {f"{t:.2f}": v for t, v in row["ap"].items()}
    _dump(result, Path(args.report))
    print(f"mAP50={result['map50']:.4f} mAP50-95={result['map50_95']:.4f}")
    for name, row in result["per_class"].items():
        print(f"  {name:<12} AP50={row['ap']['0.50']:.4f} n_gt={row['n_gt']} n_pred={row['n_pred']}")
    return 0


def cmd_coverage(args) -> int:
    manifest = load_manifest(args.manifest)
    preds = load_predictions(args.predictions)
    cfg = _eval_config(args)
    reports = evaluate(manifest.records, preds, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for r in reports:
        vid_records = [rec for rec in manifest.records if rec.frame_id.video_id == r.video_id]
        dims = (vid_records[0].width, vid_records[0].height)
        model = coverage_map(r.outcomes, model_radii(r.outcomes, cfg), dims)
        ann = coverage_map(r.outcomes, annotation_radii(vid_records, r.outcomes, cfg), dims, use="annotated")
        write_pnm(model, out / f"{r.video_id}_model.pgm", graymap=True)
        write_pnm(ann, out / f"{r.video_id}_annotation.pgm", graymap=True)
        rows.append({"video_id": r.video_id, "detection_rate": r.detection_rate,
                     "coverage_deficit": coverage_deficit(model, ann)})
        print(f"{r.video_id}: detection_rate={r.detection_rate:.3f} deficit={rows[-1]['coverage_deficit']}")
    _dump({"version": 1, "videos": rows}, out / "coverage.json")
    return 0


def cmd_calibrate(args) -> int:
    scale = derive_scale(args.reference_mm, args.reference_px)
    print(f"mm_per_pixel={scale.mm_per_pixel:.6g}")
    for d in args.distance_px or []:
        print(f"{d:g} px = {to_mm(d, scale):.6g} mm")
    return 0


def _frames_for(path: Path, needs_pixels: bool):
    if path.is_dir():
        return _image_frames(path, needs_pixels), None
    manifest = load_manifest(path)
    return frames_from_records(manifest.records), manifest


def cmd_stream(args) -> int:
    predictor = make_predictor(args.predictor, args.class_threshold, args.input_size)
    source, _ = _frames_for(Path(args.frames), args.predictor.startswith("engine:"))
    budgets = tuple(sorted({args.budget_ms, 100.0}))
    cfg = StreamConfig(class_threshold=args.class_threshold, queue_depth=args.queue_depth,
                       fail_fast=args.fail_fast, budgets_ms=budgets)
    events_path = Path(args.events)
    events_path.parent.mkdir(parents=True, exist_ok=True)
    mask_dir = Path(args.mask_dir) if args.mask_dir else None
    with open(events_path, "w", encoding="utf-8") as fh:
        def emit(ev):
            fh.write(json.dumps(ev.to_record(), separators=(",", ":")) + "\n")
            if mask_dir is not None:
                mask_dir.mkdir(parents=True, exist_ok=True)
                write_pnm(ev.exclusion_mask, mask_dir / f"{ev.frame_id.video_id}_{ev.frame_id.index:06d}.pbm")

        _, stats = run_stream(source, predictor, cfg, on_event=emit)
    verdict = "PASS" if stats.verdicts[float(args.budget_ms)] else "FAIL"
    print(f"frames={stats.frames} fps={stats.fps:.2f} mean={stats.mean_ms:.2f}ms p95={stats.p95_ms:.2f}ms "
          f"max={stats.max_ms:.2f}ms budget {args.budget_ms:g}ms: {verdict}")
    if args.stats:
        _dump(stats.as_dict(), Path(args.stats))
    return 0


def cmd_bench(args) -> int:
    manifest = load_manifest(args.frames)
    variants = {}
    for item in args.variant:
        name, _, spec = item.partition("=")
        if not spec:
            raise ValueError(f"variant must be NAME=SPEC, got {item!r}")
        variants[name] = lambda spec=spec: make_predictor(spec, args.class_threshold, args.input_size)
    rows = benchmark(variants, manifest.records, StreamConfig(class_threshold=args.class_threshold))
    print(f"{'variant':<16} {'det_rate':>9} {'fps':>8} {'p95_ms':>8}")
    for r in rows:
        if r["error"]:
            print(f"{r['variant']:<16} error: {r['error']}")
        else:
            rate = "-" if r["detection_rate"] is None else f"{r['detection_rate']:.3f}"
            print(f"{r['variant']:<16} {rate:>9} {r['fps']:>8.2f} {r['p95_ms']:>8.2f}")
    if args.report:
        _dump({"version": 1, "rows": rows}, Path(args.report))
    return 0


# --- parser ----------------------------------------------------------------

def build_parser() -> _Parser:
    p = _Parser(prog="beamlab", description="Aiming-beam label cleaning and evaluation toolkit.")
    p.add_argument("--version", action="version", version=f"beamlab {__version__}")
    p.add_argument("--config", help="JSON file with default option values")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def data_args(sp):
        sp.add_argument("--manifest", required=True)
        sp.add_argument("--predictions", required=True)

    def clean_args(sp):
        sp.add_argument("--match-iou", type=float, default=0.5)
        sp.add_argument("--spurious-min-confidence", type=float, default=None)
        sp.add_argument("--out", required=True)

    def eval_args(sp):
        sp.add_argument("--class-threshold", type=float, default=0.01)
        sp.add_argument("--gate-px", type=float, default=None)
        sp.add_argument("--coverage-radius", type=float, default=None,
                        help="fixed disk radius in px (default: equivalent radius per mask)")
        sp.add_argument("--default-radius", type=float, default=8.0)

    sp = sub.add_parser("synth", help="generate a synthetic dataset and prediction stream")
    sp.add_argument("--scene", help="JSON scene config")
    sp.add_argument("--n-frames", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--split", choices=["train", "val", "test"])
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("clean", help="flag label issues and write the clean manifest")
    data_args(sp)
    sp.add_argument("--kappa", type=float, default=0.2)
    clean_args(sp)
    sp.set_defaults(func=cmd_clean)

    sp = sub.add_parser("sweep", help="clean at several kappa values")
    data_args(sp)
    sp.add_argument("--kappas", type=_floats, default=[0.05, 0.1, 0.15, 0.2, 0.25, 0.3])
    clean_args(sp)
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("eval", help="detection rate, localization error and PCC per video")
    data_args(sp)
    eval_args(sp)
    sp.add_argument("--reference-mm", type=float)
    sp.add_argument("--reference-px", type=float)
    sp.add_argument("--report", required=True)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("map", help="mask mAP50 and mAP50-95")
    data_args(sp)
    sp.add_argument("--report", required=True)
    sp.set_defaults(func=cmd_map)

    sp = sub.add_parser("coverage", help="scan coverage maps and deficit")
    data_args(sp)
    eval_args(sp)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_coverage)

    sp = sub.add_parser("calibrate", help="pixel-to-mm scale from a reference object")
    sp.add_argument("--reference-mm", type=float, required=True)
    sp.add_argument("--reference-px", type=float, required=True)
    sp.add_argument("--distance-px", type=float, nargs="*")
    sp.set_defaults(func=cmd_calibrate)

    def stream_args(sp):
        sp.add_argument("--frames", required=True, help="manifest file or image directory")
        sp.add_argument("--class-threshold", type=float, default=0.01)
        sp.add_argument("--input-size", type=int, default=480)

    sp = sub.add_parser("stream", help="run the streaming pipeline")
    stream_args(sp)
    sp.add_argument("--predictor", required=True,
                    help="replay:FILE | synthetic:CONFIG | engine:MODEL | stub:MS[+SPEC]")
    sp.add_argument("--budget-ms", type=float, default=70.0)
    sp.add_argument("--queue-depth", type=int, default=1)
    sp.add_argument("--fail-fast", action="store_true")
    sp.add_argument("--events", required=True)
    sp.add_argument("--mask-dir")
    sp.add_argument("--stats")
    sp.set_defaults(func=cmd_stream)

    sp = sub.add_parser("bench", help="compare predictor variants on one fixture")
    stream_args(sp)
    sp.add_argument("--variant", action="append", required=True, help="NAME=SPEC (repeatable)")
    sp.add_argument("--report")
    sp.set_defaults(func=cmd_bench)
    return p


def _apply_config(parser: _Parser, argv: Sequence[str]) -> None:
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    doc = json.loads(Path(known.config).read_text(encoding="utf-8"))
    sub_action = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    for name, sp in sub_action.choices.items():
        values = {k: v for k, v in doc.items() if not isinstance(v, dict)}
        values.update(doc.get(name, {}))
        dests = {a.dest: a for a in sp._actions}
        defaults = {}
        for key, value in values.items():
            dest = key.replace("-", "_")
            if dest not in dests:
                continue
            if dest == "kappas" and isinstance(value, str):
                value = _floats(value)
            defaults[dest] = value
            dests[dest].required = False
        sp.set_defaults(**defaults)


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config(parser, argv)
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage())
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        return args.func(args)
    except UsageError as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        return 1
    except OSError as exc:
        name = getattr(exc, "filename", None)
        print(f"beamlab: I/O error: {name or ''} {exc.strerror or exc}".strip(), file=sys.stderr)
        return 2
    except (ValueError, LookupError, RuntimeError) as exc:
        print(f"beamlab: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
