"""Four-step composition: panoramas, detection and numbering, ROIs, 3D masks."""

import logging
import os
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import panorama as pano_mod
from .config import PipelineConfig
from .detection import (
    DetectionGrid,
    save_detections,
    select_detections,
    select_from_list,
)
from .exceptions import CbctError, EmptyDomainError, GeometryError
from .identification import identify, identify_with_gaps, save_identification
from .providers import (
    OracleTruth,
    ToothContext,
    make_provider,
    validate_detector_output,
    validate_probabilities,
)
from .roi import box_pixels, extract_roi_pair, make_roi_input
from .volume import (
    Image2,
    Volume3,
    resample_bilinear,
    resample_trilinear,
    save_array,
    save_pgm,
    write_json,
)

log = logging.getLogger(__name__)

JAWS = ("upper", "lower")


@dataclass(eq=False)
class ToothResult:
    name: str
    jaw: str
    tooth: object
    box_pixels: np.ndarray = None
    seg_pixels: np.ndarray = None
    bbox3: tuple = None
    mask: np.ndarray = None
    roi: object = None
    roi_input: object = None
    error: dict = None

    @property
    def fdi(self):
        return self.tooth.fdi

    def full_mask(self, dims):
        out = np.zeros(dims, bool)
        if self.mask is not None:
            out[tuple(slice(a, b) for a, b in self.bbox3)] = self.mask
        return out


@dataclass(eq=False)
class PipelineResult:
    step1: object
    detections: dict
    teeth: dict
    results: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)

    def by_fdi(self):
        return {r.fdi: r for r in self.results if r.fdi is not None}


def tooth_names(teeth):
    """Output names: the FDI code, or ``q<quadrant>_<class>_<k>`` when unnumbered."""
    names, counts = [], {}
    for t in teeth:
        if t.fdi is not None:
            names.append(str(t.fdi))
        else:
            key = (t.id.quadrant, t.detection.class_name)
            counts[key] = counts.get(key, 0) + 1
            names.append(f"q{key[0]}_{key[1]}_{counts[key]}")
    return names


def detect_jaw(detector, panorama, geometry, jaw, cfg):
    out = validate_detector_output(detector.detect(panorama, geometry, jaw))
    d = cfg.detection
    if isinstance(out, DetectionGrid):
        if out.c.shape != (panorama.dims[0] // out.g, panorama.dims[1] // out.g):
            raise GeometryError(f"detection map {out.c.shape} does not tile the {panorama.dims} panorama")
        return select_detections(out, d.score_thresh, d.iou_thresh)
    return select_from_list(out, d.score_thresh, d.iou_thresh)


def number_jaw(dets, jaw, cfg, width):
    i = cfg.identification
    fn = identify_with_gaps if i.mode == "gaps" else identify
    return fn(dets, jaw, midline=width / 2, flip=i.flip, molar_capacity=i.molar_capacity)


def _crop_bounds(mask):
    cols = np.flatnonzero(mask.any(axis=1))
    rows = np.flatnonzero(mask.any(axis=0))
    return (int(cols[0]), int(cols[-1]) + 1), (int(rows[0]), int(rows[-1]) + 1)


def segment_2d(seg2d, panorama, bp, ctx, size):
    """Run the 2D segmenter on the box crop; returns the pixel set inside the box."""
    (s0, s1), (z0, z1) = ctx.crop
    crop = Image2(panorama.data[s0:s1, z0:z1], panorama.spacing)
    net_in = resample_bilinear(crop, (size, size))
    prob = validate_probabilities(seg2d.segment(net_in, ctx), [ctx.crop_shape, (size, size)], "2D segmentation")
    if prob.shape != ctx.crop_shape:
        prob = resample_bilinear(prob, ctx.crop_shape)
    seg = np.zeros(bp.shape, bool)
    seg[s0:s1, z0:z1] = prob >= 0.5
    return seg & bp


def segment_3d(seg3d, rin, pair, ctx, size):
    native = pair.loose.dims
    prob = validate_probabilities(seg3d.segment(rin, ctx), [native, (size,) * 3], "3D segmentation")
    if prob.shape != native:
        prob = resample_trilinear(Volume3(prob), native).data
    return prob >= 0.5


def process_tooth(x, panorama, geometry, tooth, name, providers, cfg, out_dir=None, keep=False):
    jaw = tooth.id.jaw
    res = ToothResult(name, jaw, tooth)
    try:
        bp = box_pixels(tooth.detection.box, geometry.shape)
        if not bp.any():
            raise EmptyDomainError(f"box of {name} covers no panorama pixel", stage="extract_roi")
        ctx = ToothContext(jaw, tooth.detection.box, _crop_bounds(bp), geometry, name=name)
        with pano_mod.stage("segment_2d", tooth=name):
            seg = segment_2d(providers["seg2d"], panorama, bp, ctx, cfg.roi.resize_2d)
        with pano_mod.stage("extract_roi", tooth=name):
            pair = extract_roi_pair(x, bp, seg, geometry, cfg.roi.padding_voxels, fdi=tooth.id)
            rin = make_roi_input(pair, cfg.roi.resize)
        ctx.roi = pair
        with pano_mod.stage("segment_3d", tooth=name):
            mask = segment_3d(providers["seg3d"], rin, pair, ctx, cfg.roi.resize)
        res.box_pixels, res.seg_pixels, res.bbox3, res.mask = bp, seg, pair.bbox3, mask
        if keep:
            res.roi, res.roi_input = pair, rin
        if out_dir is not None:
            teeth_dir = os.path.join(out_dir, "teeth")
            if cfg.output.save_roi_inputs:
                rin.save(os.path.join(teeth_dir, f"{name}_roi_input.raw"))
            if cfg.output.save_rois:
                pair.save(teeth_dir, name)
            save_array(
                mask.astype(np.uint8),
                os.path.join(teeth_dir, f"{name}_mask.raw"),
                x.spacing,
                dtype="u8",
                origin_voxel=[a for a, _ in pair.bbox3],
            )
    except CbctError as exc:
        exc.details.setdefault("tooth", name)
        res.error = exc.to_dict()
        warnings.warn(f"tooth {name}: {exc}", RuntimeWarning, stacklevel=2)
    return res


def default_jobs():
    env = os.environ.get("CBCTOOTH_JOBS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return 1


def build_providers(cfg, truth=None, detector=None, seg2d=None, seg3d=None):
    p = cfg.provider
    d = cfg.detection
    oracle_kw = {"jitter": p.jitter_px, "seed": p.seed, "g": d.g, "anchor": tuple(d.anchor)}
    shared = OracleTruth(truth) if truth is not None else None
    return {
        "detector": make_provider(detector or p.detector, "detector", shared, **oracle_kw),
        "seg2d": make_provider(seg2d or p.seg2d, "seg2d", shared),
        "seg3d": make_provider(seg3d or p.seg3d, "seg3d", shared),
    }


def run_step1(x, cfg):
    p = cfg.panorama
    step1 = pano_mod.build_panoramas(
        x, bins=p.bins, min_component_fraction=p.min_component_fraction, **p.geometry_kwargs()
    )
    for jaw in JAWS:
        w = step1.jaw(jaw).panorama.dims[0]
        if w != p.width:
            raise GeometryError(f"{jaw} panorama is {w} wide, expected {p.width}")
    return step1


def write_step1(step1, out_dir):
    for jaw in JAWS:
        jp = step1.jaw(jaw)
        scale = save_pgm(jp.panorama, os.path.join(out_dir, f"panorama_{jaw}.pgm"))
        save_array(jp.panorama.data, os.path.join(out_dir, f"panorama_{jaw}.raw"), jp.panorama.spacing, dtype="f32")
        geo = jp.geometry.to_dict()
        geo.update(pgm_scale=scale, digest=jp.geometry.digest(), thresholds=list(step1.thresholds),
                   arch_threshold=jp.arch_threshold)
        write_json(os.path.join(out_dir, f"geometry_{jaw}.json"), geo)


def run_pipeline(x, config=None, *, truth=None, detector=None, seg2d=None, seg3d=None, jobs=None, out_dir=None,
                 keep=False):
    """Steps 1-4 on volume ``x``.

    Providers default to the config (``oracle`` needs ``truth``).  Per-tooth
    work after numbering runs on ``jobs`` threads.  With ``out_dir`` set, all
    artefacts are written there atomically.
    """
    cfg = config or PipelineConfig()
    cfg.validate()
    jobs = default_jobs() if jobs is None else max(1, int(jobs))
    providers = build_providers(cfg, truth, detector, seg2d, seg3d)
    timings = {}
    t0 = time.perf_counter()
    step1 = run_step1(x, cfg)
    timings["step1"] = time.perf_counter() - t0
    if out_dir is not None:
        os.makedirs(os.path.join(out_dir, "teeth"), exist_ok=True)
        write_json(os.path.join(out_dir, "config.json"), cfg.to_dict())
        write_step1(step1, out_dir)

    t0 = time.perf_counter()
    detections, teeth = {}, {}
    for jaw in JAWS:
        jp = step1.jaw(jaw)
        with pano_mod.stage(f"detect_{jaw}", jaw=jaw):
            detections[jaw] = detect_jaw(providers["detector"], jp.panorama, jp.geometry, jaw, cfg)
        with pano_mod.stage(f"identify_{jaw}", jaw=jaw):
            teeth[jaw] = number_jaw(detections[jaw], jaw, cfg, jp.geometry.width)
    timings["step2"] = time.perf_counter() - t0
    if out_dir is not None:
        for jaw in JAWS:
            save_detections(detections[jaw], os.path.join(out_dir, f"detections_{jaw}.json"))
        save_identification(teeth["upper"] + teeth["lower"], os.path.join(out_dir, "identification.json"))

    t0 = time.perf_counter()
    tasks = []
    for jaw in JAWS:
        jp = step1.jaw(jaw)
        for tooth, name in zip(teeth[jaw], tooth_names(teeth[jaw])):
            tasks.append((jp.panorama, jp.geometry, tooth, name))
    # make the shared sparse operators before threads race to build them
    for jaw in JAWS:
        _ = step1.jaw(jaw).geometry.backprojection_operator

    def work(task):
        return process_tooth(x, *task, providers, cfg, out_dir, keep)

    if jobs == 1:
        results = [work(t) for t in tasks]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(work, tasks))
    timings["steps3_4"] = time.perf_counter() - t0
    result = PipelineResult(step1, detections, teeth, results, timings)
    if out_dir is not None:
        write_json(os.path.join(out_dir, "teeth.json"), manifest(result, x))
    return result


def manifest(result, x):
    """Per-tooth summary in the format read by ``evaluate``."""
    teeth = []
    for r in result.results:
        det = r.tooth.detection
        entry = {
            "name": r.name,
            "fdi": r.fdi,
            "class": det.class_name,
            "jaw": r.jaw,
            "quadrant": r.tooth.id.quadrant,
            "box": [float(v) for v in det.box],
            "score": float(det.score),
        }
        if r.mask is not None:
            entry["mask"] = f"teeth/{r.name}_mask.raw"
            entry["bbox3"] = [list(b) for b in r.bbox3]
        if r.error is not None:
            entry["error"] = r.error
        teeth.append(entry)
    return {"volume_dims": list(x.dims), "spacing_mm": list(x.spacing), "teeth": teeth}
