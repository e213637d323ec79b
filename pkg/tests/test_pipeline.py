import numpy as np
import pytest

from cbctooth.config import PipelineConfig
from cbctooth.detection import Detection
from cbctooth.exceptions import JawsNotSeparatedError
from cbctooth.identification import IdentifiedTooth, ToothID
from cbctooth.phantom import truth_panorama_boxes
from cbctooth.pipeline import (
    build_providers,
    manifest,
    process_tooth,
    run_pipeline,
    tooth_names,
)
from cbctooth.volume import Volume3


def test_oracle_pipeline_identifies_every_tooth(oracle_run, truth):
    res, _ = oracle_run
    assert not [r.name for r in res.results if r.error]
    assert sorted(res.by_fdi()) == truth.fdis()
    for jaw in ("upper", "lower"):
        assert len(res.detections[jaw]) == len(res.teeth[jaw]) == 16
    assert set(res.timings) == {"step1", "step2", "steps3_4"}


def test_oracle_masks_match_labels(oracle_run, truth):
    res, _ = oracle_run
    labels = truth.labels.data
    for fdi, r in res.by_fdi().items():
        sl = tuple(slice(a, b) for a, b in r.bbox3)
        np.testing.assert_array_equal(r.mask, labels[sl] == fdi)
        # the crop holds the whole tooth
        assert r.mask.sum() == (labels == fdi).sum()


def test_manifest(oracle_run, volume):
    res, _ = oracle_run
    m = manifest(res, volume)
    assert m["volume_dims"] == list(volume.dims)
    assert len(m["teeth"]) == 32
    assert all("mask" in t and "bbox3" in t for t in m["teeth"])


def test_tooth_names():
    det = Detection((1.0, 1.0, 1.0, 1.0), 1.0, 3)
    teeth = [
        IdentifiedTooth(det, ToothID("upper", 1, 4, 3)),
        IdentifiedTooth(det, ToothID("upper", 1, None, 3)),
        IdentifiedTooth(det, ToothID("upper", 1, None, 3)),
    ]
    assert tooth_names(teeth) == ["14", "q1_premolar_1", "q1_premolar_2"]


def test_provider_failure_stays_with_its_tooth(volume, step1, truth):
    class BadSeg3D:
        def segment(self, roi_input, context):
            return np.zeros((3, 3, 3))

    cfg = PipelineConfig()
    providers = build_providers(cfg, truth)
    providers["seg3d"] = BadSeg3D()
    jp = step1.upper
    box = truth_panorama_boxes(truth, jp.geometry)[11]
    tooth = IdentifiedTooth(Detection(box, 1.0, 1), ToothID("upper", 1, 1, 1))
    with pytest.warns(RuntimeWarning):
        res = process_tooth(volume, jp.panorama, jp.geometry, tooth, "11", providers, cfg)
    assert res.error["stage"] == "segment_3d" and res.error["error"] == "SchemaError"
    assert res.mask is None


def test_fused_volume_stops_at_split():
    d = np.zeros((40, 40, 40), np.uint16)
    d[5:35, 5:35, 5:35] = 1000
    d[10:30, 10:30, 10:30] = 3000
    with pytest.raises(JawsNotSeparatedError) as exc:
        run_pipeline(Volume3(d), PipelineConfig(), detector=object(), seg2d=object(), seg3d=object())
    assert exc.value.stage == "split_jaws"
