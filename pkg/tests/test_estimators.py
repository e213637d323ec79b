import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from cbctooth.detection import Detection, DetectionGrid, detections_to_grid
from cbctooth.estimators import (
    DetectionSelector,
    PanoramaReconstructor,
    RoiExtractor,
    ToothIdentifier,
    check_volume,
)
from cbctooth.phantom import truth_panorama_boxes
from cbctooth.roi import box_pixels


def test_params_and_clone():
    est = PanoramaReconstructor(alpha_mm=5.0)
    assert est.get_params()["alpha_mm"] == 5.0
    c = clone(est.set_params(height=160))
    assert c.height == 160 and c.alpha_mm == 5.0
    assert clone(ToothIdentifier(jaw="lower")).jaw == "lower"


def test_unfitted_raise():
    with pytest.raises(NotFittedError):
        PanoramaReconstructor().transform(np.zeros((4, 4, 4)))
    with pytest.raises(NotFittedError):
        DetectionSelector().predict([])
    with pytest.raises(ValueError):
        DetectionSelector(iou_thresh=2).fit()
    with pytest.raises(ValueError):
        ToothIdentifier(mode="x").fit()
    with pytest.raises(ValueError):
        check_volume(np.zeros((3, 3)))


def test_selector_and_identifier():
    dets = [Detection((8.0 + 16 * k, 40.0, 12.0, 50.0), 1.0, c) for k, c in enumerate([4, 3, 2, 1, 1, 1, 1, 2, 3, 4])]
    grid = detections_to_grid(dets, (160, 80))
    assert isinstance(grid, DetectionGrid)
    kept = DetectionSelector().fit().predict(grid)
    teeth = ToothIdentifier(jaw="upper", mode="strict").fit().predict(kept)
    assert [t.fdi for t in teeth] == [16, 14, 13, 12, 11, 21, 22, 23, 24, 26]
    assert len(DetectionSelector().fit().predict(dets)) == 10


def test_reconstructor_matches_step1(volume, step1, truth):
    est = PanoramaReconstructor()
    up, _low = est.fit_transform(volume)
    np.testing.assert_array_equal(up.data, step1.upper.panorama.data)
    up2, _ = est.transform(volume)
    np.testing.assert_allclose(up2.data, up.data)
    assert est.geometries_["lower"].digest() == step1.lower.geometry.digest()

    g = est.geometries_["upper"]
    bp = box_pixels(truth_panorama_boxes(truth, g)[11], g.shape)
    ext = RoiExtractor(resize=16).fit(volume, geometry=g)
    (rin,) = ext.transform([(bp, bp)])
    assert rin.channels.shape == (16, 16, 16, 2)
    with pytest.raises(ValueError):
        RoiExtractor().fit(volume)
