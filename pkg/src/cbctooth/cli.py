"""Command-line front end.

Every command exits 0 on success.  Failures print one JSON object on stderr
(``error``, ``stage``, ``message``) and exit with a code specific to the
error class.
"""

import argparse
import json
import logging
import os
import sys
import time

import numpy as np
from scipy import ndimage

from . import phantom
from .config import PipelineConfig
from .detection import (
    DetectionGrid,
    parse_detections,
    save_detections,
    select_detections,
    select_from_list,
)
from .evaluate import evaluate_files
from .exceptions import CbctError, SchemaError
from .identification import identify, identify_with_gaps, save_identification
from .panorama import PanoramaGeometry
from .pipeline import run_pipeline, run_step1, write_step1
from .roi import box_pixels, extract_roi_pair, make_roi_input
from .volume import load_array, load_volume, save_array, write_json

log = logging.getLogger("cbctooth")


def _load_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise SchemaError(f"cannot read {path}: {exc}", stage="io") from exc


def _config(args):
    return PipelineConfig.load(getattr(args, "config", None), getattr(args, "set", None) or ())


def truth_manifest(truth, out_dir):
    """Write per-tooth cropped truth masks and the manifest read by ``evaluate``."""
    teeth_dir = os.path.join(out_dir, "teeth")
    os.makedirs(teeth_dir, exist_ok=True)
    labels = truth.labels.data
    objects = ndimage.find_objects(labels)
    entries = []
    for fdi in truth.fdis():
        sl = objects[fdi - 1]
        rel = f"teeth/{fdi}_mask.raw"
        save_array((labels[sl] == fdi).astype(np.uint8), os.path.join(out_dir, rel), truth.labels.spacing, dtype="u8",
                   origin_voxel=[s.start for s in sl])
        tooth = truth.teeth[fdi]
        entries.append({"name": str(fdi), "fdi": fdi, "class": phantom.CLASS_NAMES[tooth.class_id], "jaw": tooth.jaw,
                        "quadrant": fdi // 10, "score": 1.0, "mask": rel})
    manifest = {"volume_dims": list(labels.shape), "spacing_mm": list(truth.labels.spacing), "teeth": entries}
    write_json(os.path.join(out_dir, "truth_teeth.json"), manifest)


def cmd_phantom(args):
    spec = phantom.PhantomSpec.load(args.spec) if args.spec else phantom.PhantomSpec()
    if args.full_resolution:
        spec = spec.full_resolution()
    if args.hard:
        spec = spec.hard_mode()
    if args.missing:
        spec.missing = sorted(set(spec.missing) | {int(f) for f in args.missing.split(",") if f})
    if args.seed is not None:
        spec.seed = args.seed
    volume, truth = phantom.generate(spec)
    os.makedirs(args.out, exist_ok=True)
    phantom.save_phantom(volume, truth, args.out)
    write_json(os.path.join(args.out, "spec.json"), spec.to_dict())
    truth_manifest(truth, args.out)
    return {"volume": os.path.join(args.out, "volume.raw"), "teeth": len(truth.teeth)}


def cmd_panorama(args):
    cfg = _config(args)
    x = load_volume(args.volume)
    step1 = run_step1(x, cfg)
    os.makedirs(args.out, exist_ok=True)
    write_json(os.path.join(args.out, "config.json"), cfg.to_dict())
    write_step1(step1, args.out)
    return {"thresholds": list(step1.thresholds), "dims": list(step1.upper.panorama.dims)}


def cmd_detect_post(args):
    obj = parse_detections(_load_json(args.detections))
    if isinstance(obj, DetectionGrid):
        dets = select_detections(obj, args.score_thresh, args.iou_thresh)
    else:
        dets = select_from_list(obj, args.score_thresh, args.iou_thresh)
    save_detections(dets, args.out)
    return {"detections": len(dets)}


def cmd_identify(args):
    dets = parse_detections(_load_json(args.detections))
    if isinstance(dets, DetectionGrid):
        raise SchemaError("identify needs a detection list; run detect-post first", stage="identify")
    fn = identify_with_gaps if args.mode == "gaps" else identify
    teeth = fn(dets, args.jaw, midline=args.width / 2, flip=args.flip, molar_capacity=args.molar_capacity)
    save_identification(teeth, args.out)
    return {"teeth": len(teeth), "numbered": sum(t.fdi is not None for t in teeth)}


def cmd_extract_roi(args):
    cfg = _config(args)
    x = load_volume(args.volume)
    g = PanoramaGeometry.from_dict(_load_json(args.geometry))
    bp = box_pixels(args.box, g.shape)
    if args.seg_mask:
        seg, _ = load_array(args.seg_mask)
        if seg.shape != g.shape:
            raise SchemaError(f"segmentation mask {seg.shape} does not match panorama {g.shape}", stage="extract_roi")
        sp = (seg > 0) & bp
    else:
        sp = bp
    pair = extract_roi_pair(x, bp, sp, g, cfg.roi.padding_voxels, fdi=args.fdi)
    pair.save(args.out, args.name)
    make_roi_input(pair, cfg.roi.resize).save(os.path.join(args.out, f"{args.name}_roi_input.raw"))
    return {"bbox3": [list(b) for b in pair.bbox3]}


def cmd_pipeline(args):
    cfg = _config(args)
    x = load_volume(args.volume)
    truth = phantom.load_truth(args.truth) if args.truth else None
    os.makedirs(args.out, exist_ok=True)
    t0 = time.perf_counter()
    res = run_pipeline(x, cfg, truth=truth, detector=args.detector, seg2d=args.seg2d, seg3d=args.seg3d,
                       jobs=args.jobs, out_dir=args.out)
    failed = [r.name for r in res.results if r.error]
    log.info("pipeline finished in %.1f s", time.perf_counter() - t0)
    return {"teeth": len(res.results), "numbered": sum(r.fdi is not None for r in res.results), "failed": failed}


def cmd_evaluate(args):
    out = evaluate_files(args.pred, args.truth, args.iou_thresh)
    if args.out:
        write_json(args.out, out)
    summary = {k: out[k] for k in ("precision", "recall", "f1", "AP", "dice", "hd_mm", "assd_mm")}
    return summary


def _add_config(p):
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config value (repeatable)")


def build_parser():
    parser = argparse.ArgumentParser(prog="cbctooth", description="CBCT tooth detection and ROI pipeline")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic CBCT volume with ground truth")
    p.add_argument("--spec", help="phantom spec JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--missing", help="comma-separated FDI codes to omit")
    p.add_argument("--seed", type=int)
    p.add_argument("--full-resolution", action="store_true", help="800x800x400 at 0.2 mm")
    p.add_argument("--hard", action="store_true", help="narrow intensity gaps plus noise")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("panorama", help="build both jaw panoramas")
    p.add_argument("volume")
    p.add_argument("--out", required=True)
    _add_config(p)
    p.set_defaults(func=cmd_panorama)

    p = sub.add_parser("detect-post", help="score filter and NMS on a detection map or list")
    p.add_argument("detections")
    p.add_argument("--out", required=True)
    p.add_argument("--score-thresh", type=float, default=0.5)
    p.add_argument("--iou-thresh", type=float, default=0.6)
    p.set_defaults(func=cmd_detect_post)

    p = sub.add_parser("identify", help="assign FDI numbers to one jaw's detections")
    p.add_argument("detections")
    p.add_argument("--jaw", choices=("upper", "lower"), required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("gaps", "strict"), default="gaps")
    p.add_argument("--width", type=float, default=640, help="panorama width, for the midline fallback")
    p.add_argument("--molar-capacity", type=int, default=3)
    p.add_argument("--flip", action="store_true", help="patient-left at lower s")
    p.set_defaults(func=cmd_identify)

    p = sub.add_parser("extract-roi", help="loose/tight ROIs for one panorama box")
    p.add_argument("volume")
    p.add_argument("--geometry", required=True, help="geometry JSON written by 'panorama'")
    p.add_argument("--box", type=float, nargs=4, required=True, metavar=("S", "Z", "W", "H"))
    p.add_argument("--seg-mask", help="panorama-sized raw mask of the 2D segmentation")
    p.add_argument("--name", default="tooth")
    p.add_argument("--fdi", type=int)
    p.add_argument("--out", required=True)
    _add_config(p)
    p.set_defaults(func=cmd_extract_roi)

    p = sub.add_parser("pipeline", help="run all four steps")
    p.add_argument("volume")
    p.add_argument("--out", required=True)
    p.add_argument("--truth", help="phantom directory (needed by oracle providers)")
    p.add_argument("--detector", help="oracle | external:<command>")
    p.add_argument("--seg2d", help="oracle | external:<command>")
    p.add_argument("--seg3d", help="oracle | external:<command>")
    p.add_argument("--jobs", type=int, default=None, help="worker threads (default: $CBCTOOTH_JOBS or 1)")
    _add_config(p)
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("evaluate", help="score a pipeline manifest against truth")
    p.add_argument("pred")
    p.add_argument("truth")
    p.add_argument("--iou-thresh", type=float, default=0.5)
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        summary = args.func(args)
    except CbctError as exc:
        print(json.dumps(exc.to_dict(), default=str), file=sys.stderr)
        return exc.exit_code
    except (ValueError, OSError) as exc:
        print(json.dumps({"error": type(exc).__name__, "stage": args.command, "message": str(exc)}), file=sys.stderr)
        return 2
    if summary is not None:
        print(json.dumps(summary, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
