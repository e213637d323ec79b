"""CBCT tooth pipeline: jaw panoramas, tooth detection and numbering, 3D tooth ROIs."""

from .classic_seg import histogram, otsu_single, otsu_two_level, split_jaws
from .config import PipelineConfig
from .detection import (
    Detection,
    DetectionGrid,
    decode_box,
    encode_box,
    iou,
    select_detections,
)
from .identification import IdentifiedTooth, ToothID, identify, identify_with_gaps
from .panorama import (
    PanoramaGeometry,
    ReferenceCurve,
    build_panoramas,
    fit_reference_curve,
    render_panorama,
)
from .phantom import PhantomSpec, generate
from .pipeline import run_pipeline
from .roi import RoiInput, RoiPair, backproject_domain, extract_roi_pair, make_roi_input
from .volume import BinaryVolume3, Image2, Volume3, load_volume, save_volume

__version__ = "0.1.0"

__all__ = [
    "BinaryVolume3", "Detection", "DetectionGrid", "IdentifiedTooth", "Image2", "PanoramaGeometry", "PhantomSpec",
    "PipelineConfig", "ReferenceCurve", "RoiInput", "RoiPair", "ToothID", "Volume3", "backproject_domain",
    "build_panoramas", "decode_box", "encode_box", "extract_roi_pair", "fit_reference_curve", "generate",
    "histogram", "identify", "identify_with_gaps", "iou", "load_volume", "make_roi_input", "otsu_single",
    "otsu_two_level", "render_panorama", "run_pipeline", "save_volume", "select_detections", "split_jaws",
]
