"""scikit-learn style wrappers around the pipeline stages.

Hyper-parameters live in ``__init__`` (so ``get_params``/``set_params``/``clone``
work); anything learned from data ends in an underscore.
"""

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import panorama as pano_mod
from .detection import DetectionGrid, select_detections, select_from_list
from .identification import identify, identify_with_gaps
from .roi import extract_roi_pair, make_roi_input
from .volume import Volume3


def check_volume(X, spacing=(1.0, 1.0, 1.0)):
    """Accept a :class:`Volume3` or a 3D array (wrapped with ``spacing``)."""
    if isinstance(X, Volume3):
        return X
    arr = np.asarray(X)
    if arr.ndim != 3:
        raise ValueError(f"expected a 3D volume, got shape {arr.shape}")
    return Volume3(arr, spacing)


class PanoramaReconstructor(TransformerMixin, BaseEstimator):
    """Learns jaw masks and arch geometries from a volume; renders both panoramas.

    ``transform`` returns ``(P_upper, P_lower)`` for a volume on the fitted grid.
    """

    def __init__(self, n_interp=500, n_extrap=70, height=320, alpha_mm=10.0, ray_step_mm=0.2, z_crop_bottom=80,
                 closing_radius=5, bins=256, min_component_fraction=0.01):
        self.n_interp = n_interp
        self.n_extrap = n_extrap
        self.height = height
        self.alpha_mm = alpha_mm
        self.ray_step_mm = ray_step_mm
        self.z_crop_bottom = z_crop_bottom
        self.closing_radius = closing_radius
        self.bins = bins
        self.min_component_fraction = min_component_fraction

    def fit(self, X, y=None):
        X = check_volume(X)
        res = pano_mod.build_panoramas(
            X,
            bins=self.bins,
            min_component_fraction=self.min_component_fraction,
            n_interp=self.n_interp,
            n_extrap=self.n_extrap,
            height=self.height,
            alpha_mm=self.alpha_mm,
            ray_step_mm=self.ray_step_mm,
            z_crop_bottom=self.z_crop_bottom,
            closing_radius=self.closing_radius,
        )
        self.thresholds_ = res.thresholds
        self.geometries_ = {j: res.jaw(j).geometry for j in ("upper", "lower")}
        self.masks_ = {j: res.jaw(j).mask for j in ("upper", "lower")}
        self.result_ = res
        return self

    def transform(self, X):
        check_is_fitted(self, "geometries_")
        X = check_volume(X)
        return tuple(pano_mod.render_panorama(X, self.geometries_[j], self.masks_[j]) for j in ("upper", "lower"))

    def fit_transform(self, X, y=None, **fit_params):
        self.fit(X)
        return self.result_.upper.panorama, self.result_.lower.panorama


class DetectionSelector(BaseEstimator):
    """Score filtering plus NMS; stateless, so ``fit`` only validates parameters."""

    def __init__(self, score_thresh=0.5, iou_thresh=0.6):
        self.score_thresh = score_thresh
        self.iou_thresh = iou_thresh

    def fit(self, X=None, y=None):
        for name in ("score_thresh", "iou_thresh"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must lie in [0, 1]")
        self.fitted_ = True
        return self

    def predict(self, X):
        check_is_fitted(self, "fitted_")
        if isinstance(X, DetectionGrid):
            return select_detections(X, self.score_thresh, self.iou_thresh)
        return select_from_list(list(X), self.score_thresh, self.iou_thresh)


class ToothIdentifier(BaseEstimator):
    """FDI numbering of one jaw's detections."""

    def __init__(self, jaw="upper", mode="gaps", molar_capacity=3, flip=False, midline=None):
        self.jaw = jaw
        self.mode = mode
        self.molar_capacity = molar_capacity
        self.flip = flip
        self.midline = midline

    def fit(self, X=None, y=None):
        if self.mode not in ("gaps", "strict"):
            raise ValueError(f"mode must be gaps or strict, got {self.mode!r}")
        self.fitted_ = True
        return self

    def predict(self, X):
        check_is_fitted(self, "fitted_")
        fn = identify_with_gaps if self.mode == "gaps" else identify
        return fn(list(X), self.jaw, self.midline, self.flip, self.molar_capacity)


class RoiExtractor(TransformerMixin, BaseEstimator):
    """Back-projects ``(box_pixels, seg_pixels)`` pairs into two-channel ROI inputs.

    ``fit`` binds the source volume and panorama geometry.
    """

    def __init__(self, padding_voxels=2, resize=128):
        self.padding_voxels = padding_voxels
        self.resize = resize

    def fit(self, X, y=None, geometry=None):
        if geometry is None:
            raise ValueError("RoiExtractor.fit needs the panorama geometry")
        self.volume_ = check_volume(X)
        self.geometry_ = geometry
        return self

    def transform_pairs(self, X):
        check_is_fitted(self, "geometry_")
        return [
            extract_roi_pair(self.volume_, bp, sp, self.geometry_, self.padding_voxels)
            for bp, sp in X
        ]

    def transform(self, X):
        return [make_roi_input(p, self.resize) for p in self.transform_pairs(X)]


__all__ = ["DetectionSelector", "PanoramaReconstructor", "RoiExtractor", "ToothIdentifier", "check_volume"]
