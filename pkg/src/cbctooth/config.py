"""Pipeline configuration: a JSON key/value tree with dotted-key overrides."""

import json
from dataclasses import asdict, dataclass, field, fields

from .exceptions import ConfigError


@dataclass
class PanoramaConfig:
    n_interp: int = 500
    n_extrap: int = 70
    width: int = 640
    height: int = 320
    alpha_mm: float = 10.0
    ray_step_mm: float = 0.2
    z_crop_bottom: int = 80
    closing_radius: int = 5
    bins: int = 256
    min_component_fraction: float = 0.01

    def geometry_kwargs(self):
        return {
            "n_interp": self.n_interp,
            "n_extrap": self.n_extrap,
            "height": self.height,
            "alpha_mm": self.alpha_mm,
            "ray_step_mm": self.ray_step_mm,
            "z_crop_bottom": self.z_crop_bottom,
            "closing_radius": self.closing_radius,
        }


@dataclass
class DetectionConfig:
    g: int = 16
    anchor: list = field(default_factory=lambda: [32.0, 64.0])
    score_thresh: float = 0.5
    iou_thresh: float = 0.6


@dataclass
class IdentificationConfig:
    mode: str = "gaps"
    molar_capacity: int = 3
    flip: bool = False


@dataclass
class RoiConfig:
    padding_voxels: int = 2
    resize: int = 128
    resize_2d: int = 128


@dataclass
class ProviderConfig:
    detector: str = "oracle"
    seg2d: str = "oracle"
    seg3d: str = "oracle"
    jitter_px: float = 0.0
    seed: int = 0


@dataclass
class OutputConfig:
    save_roi_inputs: bool = True
    save_rois: bool = False


_SECTIONS = {
    "panorama": PanoramaConfig,
    "detection": DetectionConfig,
    "identification": IdentificationConfig,
    "roi": RoiConfig,
    "provider": ProviderConfig,
    "output": OutputConfig,
}


@dataclass
class PipelineConfig:
    panorama: PanoramaConfig = field(default_factory=PanoramaConfig)
    detection: DetectionConfig = field(default_factory=DetectionConfig)
    identification: IdentificationConfig = field(default_factory=IdentificationConfig)
    roi: RoiConfig = field(default_factory=RoiConfig)
    provider: ProviderConfig = field(default_factory=ProviderConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def validate(self):
        p, d = self.panorama, self.detection
        if p.width != p.n_interp + 2 * p.n_extrap:
            raise ConfigError(f"panorama.width {p.width} != n_interp + 2*n_extrap = {p.n_interp + 2 * p.n_extrap}")
        for key in ("score_thresh", "iou_thresh"):
            v = getattr(d, key)
            if not 0 <= v <= 1:
                raise ConfigError(f"detection.{key}={v} outside [0, 1]")
        if p.alpha_mm <= 0 or p.ray_step_mm <= 0:
            raise ConfigError("panorama.alpha_mm and ray_step_mm must be positive")
        if p.width % d.g or p.height % d.g:
            raise ConfigError(f"panorama {p.width}x{p.height} not divisible by detection.g={d.g}")
        if len(d.anchor) != 2 or min(d.anchor) <= 0:
            raise ConfigError(f"detection.anchor must be two positive numbers, got {d.anchor}")
        if self.identification.mode not in ("gaps", "strict"):
            raise ConfigError(f"identification.mode must be gaps or strict, got {self.identification.mode!r}")
        if self.roi.padding_voxels < 0 or self.roi.resize < 2 or self.roi.resize_2d < 2:
            raise ConfigError("roi.padding_voxels must be >= 0 and resize sizes >= 2")
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = d or {}
        unknown = set(d) - set(_SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
        kwargs = {}
        for name, sec in _SECTIONS.items():
            values = d.get(name, {})
            known = {f.name for f in fields(sec)}
            bad = set(values) - known
            if bad:
                raise ConfigError(f"unknown key(s) in {name}: {sorted(bad)}")
            kwargs[name] = sec(**values)
        return cls(**kwargs).validate()

    @classmethod
    def load(cls, path=None, overrides=()):
        """Config from an optional JSON file, then ``section.key=value`` overrides."""
        d = {}
        if path:
            try:
                with open(path) as fh:
                    d = json.load(fh)
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from exc
        d = apply_overrides(d, overrides)
        return cls.from_dict(d)


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(d, overrides):
    """Apply ``section.key=value`` strings; values are parsed as JSON when possible."""
    out = {k: dict(v) for k, v in (d or {}).items()}
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, text = item.split("=", 1)
        parts = key.strip().split(".")
        if len(parts) != 2:
            raise ConfigError(f"override key {key!r} must look like section.key")
        section, name = parts
        out.setdefault(section, {})[name] = _parse_value(text)
    return out
