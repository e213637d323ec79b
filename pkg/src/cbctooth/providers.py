"""Inference provider contracts, phantom-truth oracles and an external-process adapter.

Three roles stand in for the networks of the method:

* detector: ``detect(panorama, geometry, jaw)`` -> :class:`DetectionGrid` or detection list
* 2D segmenter: ``segment(crop, context)`` -> probability image
* 3D segmenter: ``segment(roi_input, context)`` -> probability volume

Segmenters may answer either at the resized network resolution (128^2 / 128^3)
or at the native crop size given in ``context``; the pipeline maps both back.
Every output is validated before it is used.
"""

import json
import os
import shlex
import subprocess
import tempfile
import threading
from dataclasses import dataclass, field
from typing import Protocol, runtime_checkable

import numpy as np

from . import phantom
from .detection import (
    Detection,
    DetectionGrid,
    detections_to_grid,
    iou,
    parse_detections,
)
from .exceptions import ProviderError, SchemaError
from .volume import Image2, load_array, save_array


@runtime_checkable
class DetectorProvider(Protocol):
    def detect(self, panorama, geometry, jaw): ...


@runtime_checkable
class Segmenter2DProvider(Protocol):
    def segment(self, crop, context): ...


@runtime_checkable
class Segmenter3DProvider(Protocol):
    def segment(self, roi_input, context): ...


@dataclass
class ToothContext:
    """Everything a segmenter may need to know about the tooth being processed."""

    jaw: str
    box: tuple
    crop: tuple  # ((s0, s1), (z0, z1)) panorama pixel ranges
    geometry: object = None
    roi: object = None
    name: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def crop_shape(self):
        return tuple(b - a for a, b in self.crop)


def validate_probabilities(arr, shapes, what):
    arr = np.asarray(arr, dtype=np.float64)
    if arr.shape not in [tuple(s) for s in shapes]:
        raise SchemaError(f"{what} has shape {arr.shape}; expected one of {shapes}")
    if not np.isfinite(arr).all():
        raise SchemaError(f"{what} contains non-finite values")
    if arr.size and (arr.min() < 0 or arr.max() > 1):
        raise SchemaError(f"{what} values outside [0, 1] (range {arr.min():g}..{arr.max():g})")
    return arr


def validate_detector_output(out):
    if isinstance(out, DetectionGrid):
        out.validate()
        return out
    if isinstance(out, (list, tuple)):
        res = []
        for d in out:
            if not isinstance(d, Detection):
                raise SchemaError(f"detector returned {type(d).__name__}, not Detection")
            res.append(parse_detections([d.to_dict()])[0])
        return res
    return parse_detections(out)


class OracleTruth:
    """Thread-safe cache of phantom footprints per panorama geometry."""

    def __init__(self, truth):
        if truth is None:
            raise ProviderError("oracle providers need phantom truth")
        self.truth = truth
        self._cache = {}
        self._lock = threading.Lock()

    def footprints(self, geometry, jaw):
        key = (geometry.digest(), jaw)
        with self._lock:
            if key not in self._cache:
                fps = phantom.truth_footprints(self.truth, geometry, jaw)
                self._cache[key] = {f: fp for f, fp in fps.items() if fp.any()}
            return self._cache[key]

    def boxes(self, geometry, jaw):
        return {f: phantom.box_of_footprint(fp) for f, fp in self.footprints(geometry, jaw).items()}

    def match(self, geometry, jaw, box):
        """FDI of the truth tooth whose panorama box overlaps ``box`` most."""
        best, best_iou = None, 0.0
        for f, tb in sorted(self.boxes(geometry, jaw).items()):
            v = iou(box, tb)
            if v > best_iou:
                best, best_iou = f, v
        return best


def _shared(truth):
    return truth if isinstance(truth, OracleTruth) else OracleTruth(truth)


class OracleDetector:
    """Answers with the phantom's own panorama boxes, score 1, one-hot classes.

    With ``jitter > 0`` the box centre and size get Gaussian noise of that many
    pixels (per jaw, seeded).  The output is a detection map, so the usual
    post-processing runs on it.
    """

    def __init__(self, truth, jitter=0.0, seed=0, g=16, anchor=(32.0, 64.0)):
        self.truth = _shared(truth)
        self.jitter = float(jitter)
        self.seed = int(seed)
        self.g = int(g)
        self.anchor = tuple(anchor)

    def detections(self, geometry, jaw):
        rng = np.random.default_rng([self.seed, 0 if jaw == "upper" else 1])
        out = []
        for fdi, box in sorted(self.truth.boxes(geometry, jaw).items()):
            box = np.asarray(box, dtype=np.float64)
            if self.jitter:
                box = box + rng.normal(0.0, self.jitter, 4)
                box[2:] = np.maximum(box[2:], 1.0)
            out.append(Detection(tuple(box), 1.0, phantom.class_of_number(fdi % 10)))
        return out

    def detect(self, panorama, geometry, jaw):
        dets = self.detections(geometry, jaw)
        shape = panorama.dims if isinstance(panorama, Image2) else geometry.shape
        try:
            return detections_to_grid(dets, shape, self.g, self.anchor)
        except ValueError:
            # two jittered centres in one cell or outside the map: hand over the list
            return dets


class OracleSegmenter2D:
    """Silhouette of the best-matching truth tooth, cut to the crop."""

    def __init__(self, truth):
        self.truth = _shared(truth)

    def segment(self, crop, context):
        fdi = self.truth.match(context.geometry, context.jaw, context.box)
        (s0, s1), (z0, z1) = context.crop
        if fdi is None:
            return np.zeros(context.crop_shape)
        fp = self.truth.footprints(context.geometry, context.jaw)[fdi]
        return fp[s0:s1, z0:z1].astype(np.float64)


class OracleSegmenter3D:
    """Truth voxels, restricted to the ROI box, of the tooth dominating the tight domain."""

    def __init__(self, truth):
        self.truth = _shared(truth)

    def segment(self, roi_input, context):
        pair = context.roi
        sl = tuple(slice(a, b) for a, b in pair.bbox3)
        labels = self.truth.truth.labels.data[sl]
        inside = labels[pair.seg_domain]
        inside = inside[inside > 0]
        if inside.size == 0:
            return np.zeros(labels.shape)
        fdi = np.bincount(inside).argmax()
        return (labels == fdi).astype(np.float64)


class ExternalProvider:
    """Runs ``command`` once per request with ``{input}``/``{output}`` substituted.

    ``kind`` is ``detector``, ``seg2d`` or ``seg3d``.  Inputs are written in the
    package's raw+sidecar format; outputs are detection JSON (detector) or a
    raw mask/probability file with sidecar (segmenters).
    """

    def __init__(self, command, kind, timeout=600):
        if kind not in ("detector", "seg2d", "seg3d"):
            raise ValueError(f"unknown provider kind {kind!r}")
        if "{input}" not in command or "{output}" not in command:
            raise ProviderError("external command needs {input} and {output} tokens")
        self.command = command
        self.kind = kind
        self.timeout = timeout

    def _run(self, write_input, suffix):
        with tempfile.TemporaryDirectory(prefix="cbct-provider-") as tmp:
            inp = os.path.join(tmp, "input.raw")
            out = os.path.join(tmp, "output" + suffix)
            write_input(inp)
            argv = [a.replace("{input}", inp).replace("{output}", out) for a in shlex.split(self.command)]
            try:
                proc = subprocess.run(argv, capture_output=True, text=True, timeout=self.timeout, check=False)
            except (OSError, subprocess.TimeoutExpired) as exc:
                raise ProviderError(f"{self.kind} provider failed to run: {exc}") from exc
            if proc.returncode != 0:
                raise ProviderError(
                    f"{self.kind} provider exited with {proc.returncode}",
                    stderr=proc.stderr[-2000:],
                )
            if not os.path.exists(out):
                raise ProviderError(f"{self.kind} provider wrote no output")
            return self._read(out)

    def _read(self, path):
        if self.kind == "detector":
            with open(path) as fh:
                try:
                    obj = json.load(fh)
                except json.JSONDecodeError as exc:
                    raise SchemaError(f"detector output is not JSON: {exc}") from exc
            return parse_detections(obj)
        try:
            data, _ = load_array(path)
        except Exception as exc:
            raise SchemaError(f"unreadable {self.kind} output: {exc}") from exc
        return data

    def detect(self, panorama, geometry, jaw):
        def write(path):
            save_array(panorama.data, path, panorama.spacing, dtype="f32", jaw=jaw, geometry=geometry.digest())

        return self._run(write, ".json")

    def segment(self, image, context):
        if self.kind == "seg2d":
            def write(path):
                save_array(image.data, path, image.spacing, dtype="f32", jaw=context.jaw, name=context.name)
        else:
            def write(path):
                image.save(path)

        return self._run(write, ".raw")


def make_provider(spec, kind, truth=None, **oracle_kwargs):
    """Build a provider from ``oracle`` or ``external:<command>``."""
    if not isinstance(spec, str):
        return spec
    if spec == "oracle":
        cls = {"detector": OracleDetector, "seg2d": OracleSegmenter2D, "seg3d": OracleSegmenter3D}[kind]
        if truth is None:
            raise ProviderError(f"oracle {kind} needs phantom truth (pass --truth)")
        return cls(truth, **oracle_kwargs) if kind == "detector" else cls(truth)
    if spec.startswith("external:"):
        return ExternalProvider(spec[len("external:"):], kind)
    raise ProviderError(f"unknown provider {spec!r}; use 'oracle' or 'external:<command>'")
