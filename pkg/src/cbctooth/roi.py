"""Back-projection of panorama pixel sets into 3D tooth ROIs.

A pixel ``(s, row)`` back-projects to every voxel its ray can touch: the
bilinear support of ``r(s) + t n(s)`` for ``t`` in ``[-alpha, alpha]`` (sampled
at half-voxel steps and at the rendering abscissae), at the slices that
carry interpolation weight for that row.  This is the support of the adjoint
of the panorama operator, so any voxel that influences a pixel of ``B`` lies
in the back-projection of ``B``.
"""

import os
from dataclasses import dataclass

import numpy as np

from .exceptions import EmptyDomainError, GeometryError
from .volume import (
    BinaryVolume3,
    Volume3,
    resample_trilinear,
    save_array,
    save_volume,
    write_json,
)


def box_pixels(box, shape):
    """Boolean ``shape`` mask of the pixels whose centres lie in ``box``.

    Pixel ``k`` spans ``[k, k+1)``, so its centre is ``k + 0.5``.
    """
    s, z, w, h = box
    out = np.zeros(shape, bool)
    s0 = max(0, int(np.ceil(s - w / 2 - 0.5)))
    s1 = min(shape[0], int(np.floor(s + w / 2 - 0.5)) + 1)
    z0 = max(0, int(np.ceil(z - h / 2 - 0.5)))
    z1 = min(shape[1], int(np.floor(z + h / 2 - 0.5)) + 1)
    out[s0:s1, z0:z1] = True
    return out


def _as_pixel_mask(pixels, shape):
    arr = np.asarray(pixels)
    if arr.dtype == bool and arr.shape == tuple(shape):
        return arr
    mask = np.zeros(shape, bool)
    arr = arr.reshape(-1, 2).astype(np.int64)
    if len(arr) and ((arr < 0).any() or (arr >= np.asarray(shape)).any()):
        raise GeometryError(f"pixels outside the {shape} panorama", stage="backproject")
    mask[arr[:, 0], arr[:, 1]] = True
    return mask


@dataclass(frozen=True, eq=False)
class LocalDomain:
    """Voxel set stored as a boolean block at ``lo`` inside the full grid."""

    lo: tuple
    mask: np.ndarray

    @property
    def hi(self):
        return tuple(a + n for a, n in zip(self.lo, self.mask.shape))

    def count(self):
        return int(np.count_nonzero(self.mask))

    def crop(self, lo, hi):
        """This domain restricted to (and expressed on) the box ``[lo, hi)``."""
        out = np.zeros(tuple(b - a for a, b in zip(lo, hi)), bool)
        src = tuple(slice(max(a, c) - c, min(b, c + n) - c) for a, b, c, n in zip(lo, hi, self.lo, self.mask.shape))
        dst = tuple(slice(max(a, c) - a, min(b, c + n) - a) for a, b, c, n in zip(lo, hi, self.lo, self.mask.shape))
        if all(s.stop > s.start for s in src):
            out[dst] = self.mask[src]
        return out

    def to_full(self, dims):
        out = np.zeros(dims, bool, order="F")
        out[tuple(slice(a, b) for a, b in zip(self.lo, self.hi))] = self.mask
        return out


def backproject_local(pixels, g):
    """Back-projection of a pixel set as a :class:`LocalDomain`."""
    pix = _as_pixel_mask(pixels, g.shape)
    cols = np.flatnonzero(pix.any(axis=1))
    if cols.size == 0:
        raise EmptyDomainError("empty pixel set", stage="backproject")
    a = g.backprojection_operator
    zsup = g.z_support()
    nx = g.volume_dims[0]
    per_col = []
    for s in cols:
        xy = a.indices[a.indptr[s] : a.indptr[s + 1]]
        zs = np.flatnonzero(zsup[pix[s]].any(axis=0))
        if xy.size and zs.size:
            per_col.append((xy % nx, xy // nx, zs))
    if not per_col:
        raise EmptyDomainError("pixel set back-projects outside the volume", stage="backproject")
    lo = [min(int(c[k].min()) for c in per_col) for k in range(3)]
    hi = [max(int(c[k].max()) for c in per_col) + 1 for k in range(3)]
    mask = np.zeros([b - a for a, b in zip(lo, hi)], bool)
    for x, y, zs in per_col:
        mask[(x - lo[0])[:, None], (y - lo[1])[:, None], (zs - lo[2])[None, :]] = True
    return LocalDomain(tuple(lo), mask)


def backproject_domain(pixels, g):
    """Voxel domain ``D`` of a panorama pixel set, on the full volume grid."""
    dom = backproject_local(pixels, g)
    return BinaryVolume3(dom.to_full(g.volume_dims), g.volume_spacing)


@dataclass(frozen=True, eq=False)
class RoiPair:
    """Loose and tight ROIs cropped with one shared bounding box.

    ``bbox3`` holds half-open voxel ranges ``((x0, x1), (y0, y1), (z0, z1))``.
    """

    loose: Volume3
    tight: Volume3
    bbox3: tuple
    fdi: object = None
    padding: int = 2
    geometry: str = None
    box_domain: np.ndarray = None
    seg_domain: np.ndarray = None

    @property
    def origin(self):
        return tuple(a for a, _ in self.bbox3)

    def metadata(self):
        fdi = self.fdi.fdi if hasattr(self.fdi, "fdi") else self.fdi
        return {
            "bbox3": [list(r) for r in self.bbox3],
            "fdi": fdi,
            "padding_voxels": self.padding,
            "geometry": self.geometry,
        }

    def save(self, directory, stem):
        os.makedirs(directory, exist_ok=True)
        save_volume(self.loose, os.path.join(directory, f"{stem}_loose.raw"))
        save_volume(self.tight, os.path.join(directory, f"{stem}_tight.raw"))
        write_json(os.path.join(directory, f"{stem}_roi.json"), self.metadata())


def extract_roi_pair(x, box_px, seg_px, g, padding=2, fdi=None):
    """Loose ROI from ``box_px``, tight ROI from ``seg_px``, sharing one bbox.

    Voxels outside each domain are zeroed; both are cropped to the bounds of
    the loose domain grown by ``padding`` voxels (clipped to the volume).
    """
    if tuple(x.dims) != g.volume_dims:
        raise GeometryError(f"geometry built for {g.volume_dims}, volume is {x.dims}")
    bpix = _as_pixel_mask(box_px, g.shape)
    spix = _as_pixel_mask(seg_px, g.shape)
    if (spix & ~bpix).any():
        raise ValueError("segmentation pixels must lie inside the box")
    d_box = backproject_local(bpix, g)
    if not spix.any():
        raise EmptyDomainError("empty segmentation pixel set", stage="extract_roi", fdi=fdi)
    d_seg = backproject_local(spix, g)
    padding = int(padding)
    lo = tuple(max(0, a - padding) for a in d_box.lo)
    hi = tuple(min(n, b + padding) for b, n in zip(d_box.hi, x.dims))
    crop = x.data[lo[0] : hi[0], lo[1] : hi[1], lo[2] : hi[2]]
    mb, ms = d_box.crop(lo, hi), d_seg.crop(lo, hi)
    zero = np.zeros((), crop.dtype)
    origin = tuple(a + o for a, o in zip(lo, x.origin))
    loose = Volume3(np.where(mb, crop, zero), x.spacing, origin)
    tight = Volume3(np.where(ms, crop, zero), x.spacing, origin)
    return RoiPair(loose, tight, tuple(zip(lo, hi)), fdi, padding, g.digest(), mb, ms)


@dataclass(frozen=True, eq=False)
class RoiInput:
    """Two-channel ``(n, n, n, 2)`` network input: channel 0 loose, 1 tight."""

    channels: np.ndarray
    spacing: tuple
    source_dims: tuple
    bbox3: tuple = None
    fdi: object = None

    @property
    def loose(self):
        return self.channels[..., 0]

    @property
    def tight(self):
        return self.channels[..., 1]

    def save(self, path):
        fdi = self.fdi.fdi if hasattr(self.fdi, "fdi") else self.fdi
        extra = {"channels": 2, "channel_names": ["loose", "tight"], "source_dims": list(self.source_dims), "fdi": fdi}
        if self.bbox3 is not None:
            extra["bbox3"] = [list(r) for r in self.bbox3]
        save_array(self.channels.astype(np.float32), path, self.spacing, dtype="f32", **extra)


def make_roi_input(p, size=128):
    """Resample both ROIs with one shared trilinear transform."""
    loose = resample_trilinear(p.loose, size)
    tight = resample_trilinear(p.tight, size)
    channels = np.stack([loose.data, tight.data], axis=-1)
    return RoiInput(channels, loose.spacing, p.loose.dims, p.bbox3, p.fdi)
