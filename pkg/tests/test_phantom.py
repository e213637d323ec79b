import itertools
from dataclasses import replace

import numpy as np
import pytest
from scipy.spatial import cKDTree

from cbctooth import phantom
from cbctooth.detection import iou
from cbctooth.exceptions import SpecInvalidError
from cbctooth.metrics import dice
from cbctooth.panorama import PanoramaGeometry, fit_reference_curve


def test_default_labels(volume, truth):
    labels = truth.labels.data
    present = set(np.unique(labels)) - {0}
    assert len(present) == 32
    assert len(truth.fdis("upper")) == len(truth.fdis("lower")) == 16
    # every labelled voxel carries its tooth's intensity
    assert (volume.data[labels > 0] == 3500).all()
    assert (volume.data[truth.jaw_masks["upper"].data & (labels == 0)] == 2500).all()
    assert not (truth.jaw_masks["upper"].data & truth.jaw_masks["lower"].data).any()


def test_missing_teeth():
    spec = phantom.PhantomSpec(missing=[14, 24])
    _, truth = phantom.generate(spec)
    present = set(np.unique(truth.labels.data)) - {0}
    assert present == {t.fdi for t in spec.teeth} - {14, 24}


def small_spec(**kw):
    return phantom.PhantomSpec(dims=(200, 200, 100), spacing=0.8, **kw)


def test_deterministic():
    spec = small_spec(noise_sigma=100.0, seed=3)
    v1, t1 = phantom.generate(spec)
    v2, t2 = phantom.generate(spec)
    assert v1.data.tobytes() == v2.data.tobytes()
    assert t1.labels.data.tobytes() == t2.labels.data.tobytes()
    v3, _ = phantom.generate(replace(spec, seed=4))
    assert v3.data.tobytes() != v1.data.tobytes()


def test_spec_validation():
    for bad in (
        {"soft_intensity": 3000.0},
        {"bite_gap_mm": 0.0},
        {"teeth": phantom.default_teeth() + phantom.default_teeth()[:1]},
        {"teeth": [replace(t, intensity=2000.0) for t in phantom.default_teeth()]},
    ):
        with pytest.raises(SpecInvalidError):
            phantom.generate(small_spec(**bad))
    crowded = phantom.default_teeth(gap_mm=-2.0)
    with pytest.raises(SpecInvalidError, match="overlaps"):
        phantom.generate(small_spec(teeth=crowded))
    with pytest.raises(SpecInvalidError):
        phantom.PhantomSpec.from_dict({"colour": "red"})


def test_spec_json_roundtrip(tmp_path):
    import json

    spec = phantom.PhantomSpec(missing=[14]).hard_mode()
    p = tmp_path / "spec.json"
    p.write_text(json.dumps(spec.to_dict()))
    assert phantom.PhantomSpec.load(str(p)) == spec
    assert spec.full_resolution().dims == (800, 800, 400)


def test_save_and_load(tmp_path):
    vol, truth = phantom.generate(small_spec(missing=[31]))
    phantom.save_phantom(vol, truth, str(tmp_path))
    back = phantom.load_truth(str(tmp_path))
    np.testing.assert_array_equal(back.labels.data, truth.labels.data)
    np.testing.assert_array_equal(back.jaw_masks["lower"].data, truth.jaw_masks["lower"].data)
    assert back.fdis() == truth.fdis() and 31 not in back.fdis()
    assert back.spec == truth.spec


def analytic_geometry(truth, jaw, volume):
    curve = fit_reference_curve(truth.arch_curves[jaw], 500, 70, volume.spacing[:2])
    return PanoramaGeometry(curve, 10.0, 0.2, (80, 200), 320, volume.dims, volume.spacing, {"jaw": jaw})


def test_single_centred_tooth_box():
    t11 = replace(phantom.default_teeth()[0], arc_mm=0.0)
    vol, truth = phantom.generate(phantom.PhantomSpec(teeth=[t11]))
    g = analytic_geometry(truth, "upper", vol)
    (fdi, box), = phantom.truth_panorama_boxes(truth, g).items()
    # arc 0 is the arch vertex, the middle column of the curve
    assert fdi == 11
    assert box[0] == pytest.approx(g.width / 2, abs=1)


def test_adjacent_boxes_overlap_little(volume, truth):
    g = analytic_geometry(truth, "upper", volume)
    boxes = phantom.truth_panorama_boxes(truth, g)
    order = sorted(boxes, key=lambda f: boxes[f][0])
    for a, b in itertools.pairwise(order):
        assert iou(boxes[a], boxes[b]) < 0.3, (a, b)


def test_missing_tooth_has_no_box():
    vol, truth = phantom.generate(phantom.PhantomSpec(missing=[14]))
    boxes = phantom.truth_panorama_boxes(truth, analytic_geometry(truth, "upper", vol))
    assert 14 not in boxes and len(boxes) == 15


def test_pipeline_recovers_jaws_and_arch(step1, truth):
    for jaw in ("upper", "lower"):
        jp = step1.jaw(jaw)
        assert dice(jp.mask, truth.jaw_masks[jaw]) >= 0.99
        c = jp.geometry.curve
        d, _ = cKDTree(truth.arch_curves[jaw]).query(c.points[c.interior])
        assert d.mean() < 2
