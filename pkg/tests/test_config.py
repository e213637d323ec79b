import json

import pytest

from cbctooth.config import PipelineConfig, apply_overrides
from cbctooth.exceptions import ConfigError


def test_defaults_are_valid():
    cfg = PipelineConfig().validate()
    assert cfg.panorama.width == 640 and cfg.panorama.height == 320
    assert cfg.detection.score_thresh == 0.5 and cfg.detection.iou_thresh == 0.6
    assert cfg.roi.resize == 128


def test_roundtrip_and_overrides(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps({"detection": {"iou_thresh": 0.4}}))
    cfg = PipelineConfig.load(str(p), ["identification.mode=strict", "provider.jitter_px=2", "provider.detector=oracle"])
    assert cfg.detection.iou_thresh == 0.4
    assert cfg.identification.mode == "strict"
    assert cfg.provider.jitter_px == 2
    assert PipelineConfig.from_dict(cfg.to_dict()) == cfg


@pytest.mark.parametrize(
    "override",
    [
        "panorama.n_interp=400",
        "detection.score_thresh=1.5",
        "detection.g=7",
        "identification.mode=fuzzy",
        "roi.padding_voxels=-1",
        "nosection.key=1",
        "panorama.nokey=1",
        "panorama.alpha_mm=0",
    ],
)
def test_invalid_configs(override):
    with pytest.raises(ConfigError):
        PipelineConfig.load(None, [override])


def test_override_syntax():
    with pytest.raises(ConfigError):
        apply_overrides({}, ["novalue"])
    with pytest.raises(ConfigError):
        apply_overrides({}, ["a.b.c=1"])
    assert apply_overrides({}, ["a.b=[1, 2]"]) == {"a": {"b": [1, 2]}}


def test_unreadable_config(tmp_path):
    with pytest.raises(ConfigError):
        PipelineConfig.load(str(tmp_path / "missing.json"))
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(ConfigError):
        PipelineConfig.load(str(tmp_path / "bad.json"))
