"""Parametric synthetic CBCT with complete ground truth.

Two horseshoe jaw slabs follow parabolic arches ``y = y0 + a (x - xc)^2`` and
carry one row of teeth each; a bite gap keeps the jaws apart.  Each tooth is an
ellipsoid crown plus a tapered elliptic root, oriented along the local arch
tangent.  Teeth are painted over bone, bone over soft tissue, soft tissue over
air, so every labelled voxel has its tooth's intensity.

Coordinates: voxel ``(i, j, k)`` sits at ``(i*dx, j*dy, k*dz)`` mm; ``z``
grows upward (the lower jaw has the smaller ``z``).  Patient right is low
``x``; FDI quadrants 1 and 4 lie there.
"""

import json
import os
import warnings
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .exceptions import SpecInvalidError
from .panorama import footprint
from .volume import (
    BinaryVolume3,
    Volume3,
    load_array,
    save_array,
    save_volume,
    write_json,
)

CLASS_NAMES = {1: "incisor", 2: "canine", 3: "premolar", 4: "molar"}
CLASS_IDS = {v: k for k, v in CLASS_NAMES.items()}

# per FDI position 1..8 (mm): mesiodistal width, buccolingual thickness
_WIDTH = (5.0, 4.2, 4.6, 4.6, 4.6, 6.2, 5.8, 5.4)
_THICK = (4.8, 4.8, 5.6, 5.6, 6.0, 7.0, 7.0, 6.5)
_ROOT = (9.0, 8.5, 11.0, 9.5, 9.5, 8.5, 8.5, 8.0)


def class_of_number(number):
    """FDI position (1..8) to tooth class id."""
    return {1: 1, 2: 1, 3: 2, 4: 3, 5: 3, 6: 4, 7: 4, 8: 4}[int(number)]


def jaw_of_fdi(fdi):
    return "upper" if fdi // 10 in (1, 2) else "lower"


@dataclass
class ToothSpec:
    fdi: int
    arc_mm: float
    width_mm: float
    thickness_mm: float
    crown_height_mm: float = 8.0
    root_length_mm: float = 9.0
    intensity: float = 3500.0

    @property
    def jaw(self):
        return jaw_of_fdi(self.fdi)

    @property
    def class_id(self):
        return class_of_number(self.fdi % 10)


def default_teeth(gap_mm=1.5, intensity=3500.0, crown_height_mm=8.0):
    teeth = []
    centers = []
    pos = gap_mm / 2
    for w in _WIDTH:
        centers.append(pos + w / 2)
        pos += w + gap_mm
    for quadrant, sign in ((1, -1), (2, 1), (3, 1), (4, -1)):
        for k in range(8):
            teeth.append(
                ToothSpec(
                    fdi=10 * quadrant + k + 1,
                    arc_mm=sign * centers[k],
                    width_mm=_WIDTH[k],
                    thickness_mm=_THICK[k],
                    crown_height_mm=crown_height_mm,
                    root_length_mm=_ROOT[k],
                    intensity=intensity,
                )
            )
    return teeth


def _default_arches():
    return {
        "upper": {"center_x_mm": 79.8, "vertex_y_mm": 45.0, "curvature": 0.02},
        "lower": {"center_x_mm": 79.8, "vertex_y_mm": 45.0, "curvature": 0.02},
    }


@dataclass
class PhantomSpec:
    seed: int = 0
    dims: tuple = (400, 400, 200)
    spacing: float = 0.4
    arches: dict = field(default_factory=_default_arches)
    teeth: list = field(default_factory=default_teeth)
    air_intensity: float = 0.0
    soft_intensity: float = 1000.0
    jaw_intensity: float = 2500.0
    missing: list = field(default_factory=list)
    bite_gap_mm: float = 3.0
    occlusal_z_mm: float = 53.5
    jaw_halfwidth_mm: float = 5.0
    jaw_half_length_mm: float = 56.0
    lower_jaw_z_mm: tuple = (20.0, None)
    upper_jaw_z_mm: tuple = (None, 78.0)
    body_radii_mm: tuple = (70.0, 70.0)
    noise_sigma: float = 0.0

    @property
    def spacing3(self):
        return tuple(float(s) for s in np.broadcast_to(np.asarray(self.spacing, float), (3,)))

    def present_teeth(self):
        gone = {int(f) for f in self.missing}
        return [t for t in self.teeth if t.fdi not in gone]

    def validate(self):
        if not self.air_intensity < self.soft_intensity < self.jaw_intensity:
            raise SpecInvalidError("intensities must satisfy air < soft < bone")
        if any(t.intensity < self.jaw_intensity for t in self.teeth):
            raise SpecInvalidError("tooth intensity must be >= bone intensity")
        if self.bite_gap_mm <= 0:
            raise SpecInvalidError("bite_gap_mm must be positive")
        fdis = [t.fdi for t in self.teeth]
        if len(set(fdis)) != len(fdis):
            raise SpecInvalidError("duplicate FDI codes")
        for jaw in ("upper", "lower"):
            arcs = [t.arc_mm for t in self.teeth if t.jaw == jaw]
            if len(set(arcs)) != len(arcs):
                raise SpecInvalidError(f"{jaw} teeth share an arch position")

    def to_dict(self):
        d = asdict(self)
        d["dims"] = list(self.dims)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "teeth" in d:
            d["teeth"] = [t if isinstance(t, ToothSpec) else ToothSpec(**t) for t in d["teeth"]]
        for key in ("dims", "lower_jaw_z_mm", "upper_jaw_z_mm", "body_radii_mm"):
            if key in d:
                d[key] = tuple(d[key])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise SpecInvalidError(f"unknown phantom spec keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def full_resolution(self):
        """Same anatomy at 0.2 mm on an 800x800x400 grid."""
        return replace(self, dims=(800, 800, 400), spacing=0.2)

    def hard_mode(self, noise_sigma=150.0):
        """Narrower intensity gaps plus Gaussian noise."""
        teeth = [replace(t, intensity=3000.0) for t in self.teeth]
        return replace(self, teeth=teeth, soft_intensity=1200.0, jaw_intensity=2300.0, noise_sigma=noise_sigma)


@dataclass(eq=False)
class PhantomTruth:
    labels: Volume3
    jaw_masks: dict
    arch_curves: dict
    teeth: dict
    spec: PhantomSpec = None

    def fdis(self, jaw=None):
        return sorted(f for f, t in self.teeth.items() if jaw is None or t.jaw == jaw)

    def tooth_mask(self, fdi):
        return self.labels.data == fdi

    def tooth_bbox(self, fdi):
        idx = np.argwhere(self.labels.data == fdi)
        return tuple((int(a), int(b) + 1) for a, b in zip(idx.min(0), idx.max(0)))


class _Arch:
    """Dense samples of a parabolic arch, indexed by signed arc length."""

    def __init__(self, center_x_mm, vertex_y_mm, curvature, half_length_mm, step_mm=0.02):
        self.xc, self.y0, self.a = center_x_mm, vertex_y_mm, curvature
        half_x = half_length_mm
        xs = np.arange(-half_x, half_x + step_mm, step_mm)
        pts = np.column_stack([self.xc + xs, self.y0 + curvature * xs**2])
        seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        arc = np.concatenate([[0.0], np.cumsum(seg)])
        arc -= np.interp(0.0, xs, arc)
        keep = np.abs(arc) <= half_length_mm
        self.points, self.arc = pts[keep], arc[keep]

    def at(self, arc_mm):
        x = np.interp(arc_mm, self.arc, self.points[:, 0])
        xs = x - self.xc
        point = np.array([x, self.y0 + self.a * xs**2])
        tangent = np.array([1.0, 2 * self.a * xs])
        tangent /= np.linalg.norm(tangent)
        return point, tangent


def _paint_band(vol, arch, halfwidth, z_lo, z_hi, spacing, value, out_mask):
    nx, ny, nz = vol.shape
    dx, dy, dz = spacing
    xs, ys = np.arange(nx) * dx, np.arange(ny) * dy
    lo = arch.points.min(0) - halfwidth - 1
    hi = arch.points.max(0) + halfwidth + 1
    ix = np.flatnonzero((xs >= lo[0]) & (xs <= hi[0]))
    iy = np.flatnonzero((ys >= lo[1]) & (ys <= hi[1]))
    gx, gy = np.meshgrid(xs[ix], ys[iy], indexing="ij")
    dist, _ = cKDTree(arch.points).query(np.column_stack([gx.ravel(), gy.ravel()]))
    band = np.zeros((nx, ny), bool)
    band[np.ix_(ix, iy)] = dist.reshape(gx.shape) <= halfwidth
    k0 = max(0, int(np.ceil(z_lo / dz)))
    k1 = min(nz, int(np.floor(z_hi / dz)) + 1)
    for k in range(k0, k1):
        vol[:, :, k][band] = value
        out_mask[:, :, k] |= band


def _tooth_voxels(tooth, center_xy, tangent, z_crown_mid, direction, spacing, dims):
    """Boolean mask of one tooth inside its local bounding box.

    ``direction`` is +1 when the root grows upward (upper jaw), -1 otherwise.
    """
    dx, _dy, dz = spacing
    half_w, half_t = tooth.width_mm / 2, tooth.thickness_mm / 2
    half_h = tooth.crown_height_mm / 2
    apex = z_crown_mid + direction * (half_h + tooth.root_length_mm)
    reach = max(half_w, half_t) + dx
    z_lo, z_hi = sorted((z_crown_mid - direction * half_h, apex))
    lo = np.array([center_xy[0] - reach, center_xy[1] - reach, z_lo - dz])
    hi = np.array([center_xy[0] + reach, center_xy[1] + reach, z_hi + dz])
    sp = np.array(spacing)
    i0 = np.maximum(np.floor(lo / sp).astype(int), 0)
    i1 = np.minimum(np.ceil(hi / sp).astype(int) + 1, dims)
    gx, gy, gz = np.meshgrid(*(np.arange(a, b) * s for a, b, s in zip(i0, i1, sp)), indexing="ij")
    ddx, ddy = gx - center_xy[0], gy - center_xy[1]
    u = ddx * tangent[0] + ddy * tangent[1]
    v = -ddx * tangent[1] + ddy * tangent[0]
    w = gz - z_crown_mid
    crown = (u / half_w) ** 2 + (v / half_t) ** 2 + (w / half_h) ** 2 <= 1.0
    # root: elliptic cone from the crown centre to the apex, shrinking 0.75 -> 0.25
    frac = direction * w / (half_h + tooth.root_length_mm)
    taper = 0.75 - 0.5 * frac
    root = (frac >= 0) & (frac <= 1) & ((u / (half_w * taper)) ** 2 + (v / (half_t * taper)) ** 2 <= 1.0)
    return tuple(slice(a, b) for a, b in zip(i0, i1)), crown | root


def generate(spec=None):
    """Build ``(volume, truth)`` for ``spec``; deterministic for a fixed seed."""
    spec = PhantomSpec() if spec is None else spec
    spec.validate()
    dims = tuple(int(n) for n in spec.dims)
    spacing = spec.spacing3
    dx, dy, _dz = spacing
    nx, ny, nz = dims

    vol = np.full(dims, spec.air_intensity, dtype=np.float32 if spec.noise_sigma else np.uint16, order="F")
    labels = np.zeros(dims, dtype=np.uint8, order="F")

    xs, ys = np.arange(nx) * dx, np.arange(ny) * dy
    cx, cy = (nx - 1) * dx / 2, (ny - 1) * dy / 2
    rx, ry = spec.body_radii_mm
    body = ((xs[:, None] - cx) / rx) ** 2 + ((ys[None, :] - cy) / ry) ** 2 <= 1.0
    for k in range(nz):
        vol[:, :, k][body] = spec.soft_intensity

    half_gap = spec.bite_gap_mm / 2
    occ = spec.occlusal_z_mm
    crown_h = {t.crown_height_mm for t in spec.teeth} or {8.0}
    lower_top = occ - half_gap - max(crown_h)
    upper_bottom = occ + half_gap + max(crown_h)
    z_ranges = {
        "lower": (spec.lower_jaw_z_mm[0], spec.lower_jaw_z_mm[1] if spec.lower_jaw_z_mm[1] is not None else lower_top),
        "upper": (spec.upper_jaw_z_mm[0] if spec.upper_jaw_z_mm[0] is not None else upper_bottom, spec.upper_jaw_z_mm[1]),
    }

    arches, jaw_masks = {}, {}
    for jaw in ("upper", "lower"):
        p = spec.arches[jaw]
        arches[jaw] = _Arch(p["center_x_mm"], p["vertex_y_mm"], p["curvature"], spec.jaw_half_length_mm)
        mask = np.zeros(dims, bool, order="F")
        _paint_band(vol, arches[jaw], spec.jaw_halfwidth_mm, *z_ranges[jaw], spacing, spec.jaw_intensity, mask)
        jaw_masks[jaw] = mask

    teeth = {}
    for tooth in spec.present_teeth():
        arch = arches[tooth.jaw]
        if abs(tooth.arc_mm) > arch.arc.max():
            raise SpecInvalidError(f"tooth {tooth.fdi} lies beyond the jaw band", fdi=tooth.fdi)
        center, tangent = arch.at(tooth.arc_mm)
        if tooth.jaw == "upper":
            z_mid, direction = occ + half_gap + tooth.crown_height_mm / 2, 1
        else:
            z_mid, direction = occ - half_gap - tooth.crown_height_mm / 2, -1
        box, inside = _tooth_voxels(tooth, center, tangent, z_mid, direction, spacing, dims)
        sub = labels[box]
        clash = inside & (sub != 0)
        if clash.any():
            raise SpecInvalidError(
                f"tooth {tooth.fdi} overlaps tooth {int(sub[clash][0])} in {int(clash.sum())} voxels", fdi=tooth.fdi
            )
        sub[inside] = tooth.fdi
        vol[box][inside] = tooth.intensity
        jaw_masks[tooth.jaw][box] |= inside
        teeth[tooth.fdi] = tooth

    for fdi in teeth:
        if not np.any(labels == fdi):
            raise SpecInvalidError(f"tooth {fdi} rasterized to no voxels", fdi=fdi)

    if spec.noise_sigma:
        rng = np.random.default_rng(spec.seed)
        vol += rng.normal(0.0, spec.noise_sigma, size=dims).astype(np.float32)
        np.clip(vol, 0, 65535, out=vol)
        vol = np.asfortranarray(np.round(vol).astype(np.uint16))

    sp = np.array([dx, dy])
    truth = PhantomTruth(
        labels=Volume3(labels, spacing),
        jaw_masks={j: BinaryVolume3(m, spacing) for j, m in jaw_masks.items()},
        arch_curves={j: a.points / sp for j, a in arches.items()},
        teeth=teeth,
        spec=spec,
    )
    return Volume3(vol, spacing), truth


def _column_boxes(g):
    """Per-column xy bounding boxes of the ray support (voxel indices)."""
    nx = g.volume_dims[0]
    cols = g.column_support()
    lo = np.full((len(cols), 2), np.iinfo(np.int64).max)
    hi = np.full((len(cols), 2), -1)
    for s, idx in enumerate(cols):
        if idx.size:
            x, y = idx % nx, idx // nx
            lo[s] = x.min(), y.min()
            hi[s] = x.max(), y.max()
    return cols, lo, hi


def truth_footprints(truth, g, jaw=None):
    """Panorama footprint (boolean ``(N_s, height)``) of every tooth of ``jaw``."""
    jaw = jaw or g.meta.get("jaw")
    labels = truth.labels.data
    cols, lo, hi = _column_boxes(g)
    objects = ndimage.find_objects(labels)
    out = {}
    for fdi in truth.fdis(jaw):
        sl = objects[fdi - 1]
        if sl is None:
            continue
        bx, by, _bz = sl
        near = np.flatnonzero(
            (hi[:, 0] >= bx.start) & (lo[:, 0] < bx.stop) & (hi[:, 1] >= by.start) & (lo[:, 1] < by.stop)
        )
        empty = np.empty(0, np.int64)
        support = [empty] * len(cols)
        for s in near:
            support[s] = cols[s]
        indicator = np.zeros(labels.shape, bool, order="F")
        indicator[sl] = labels[sl] == fdi
        out[fdi] = footprint(indicator, g, support)
    return out


def box_of_footprint(fp):
    """``(s_center, z_center, w, h)`` of the tight pixel bounds of a footprint.

    Pixel ``k`` spans ``[k, k+1)``, so the pixels whose centres lie inside the
    box are exactly the footprint's bounding rectangle.
    """
    idx = np.argwhere(fp)
    (s0, z0), (s1, z1) = idx.min(0), idx.max(0) + 1
    return ((s0 + s1) / 2.0, (z0 + z1) / 2.0, float(s1 - s0), float(z1 - z0))


def truth_panorama_boxes(truth, g, jaw=None):
    """Tight panorama-space box per tooth; invisible teeth are skipped with a warning."""
    boxes = {}
    for fdi, fp in truth_footprints(truth, g, jaw).items():
        if not fp.any():
            warnings.warn(f"tooth {fdi} is invisible in this panorama", stacklevel=2)
            continue
        boxes[fdi] = box_of_footprint(fp)
    return boxes


def save_phantom(volume, truth, out_dir):
    """Write ``volume.raw``, ``labels.raw``, ``jaws.raw`` and ``truth.json``."""
    os.makedirs(out_dir, exist_ok=True)
    save_volume(volume, os.path.join(out_dir, "volume.raw"))
    save_volume(truth.labels, os.path.join(out_dir, "labels.raw"), dtype="u8")
    jaws = truth.jaw_masks["upper"].data.astype(np.uint8) + 2 * truth.jaw_masks["lower"].data.astype(np.uint8)
    save_array(jaws, os.path.join(out_dir, "jaws.raw"), truth.labels.spacing, dtype="u8", values={"upper": 1, "lower": 2})
    write_json(
        os.path.join(out_dir, "truth.json"),
        {
            "spec": truth.spec.to_dict() if truth.spec is not None else None,
            "teeth": {str(f): asdict(t) for f, t in sorted(truth.teeth.items())},
            "arch_curves_voxel": {j: c.tolist() for j, c in truth.arch_curves.items()},
        },
    )


def load_truth(directory):
    with open(os.path.join(directory, "truth.json")) as fh:
        meta = json.load(fh)
    labels, lmeta = load_array(os.path.join(directory, "labels.raw"))
    jaws, _ = load_array(os.path.join(directory, "jaws.raw"))
    spacing = tuple(lmeta["spacing_mm"])
    return PhantomTruth(
        labels=Volume3(labels, spacing),
        jaw_masks={"upper": BinaryVolume3(jaws == 1, spacing), "lower": BinaryVolume3(jaws == 2, spacing)},
        arch_curves={j: np.asarray(c) for j, c in meta["arch_curves_voxel"].items()},
        teeth={int(f): ToothSpec(**t) for f, t in meta["teeth"].items()},
        spec=PhantomSpec.from_dict(meta["spec"]) if meta.get("spec") else None,
    )
