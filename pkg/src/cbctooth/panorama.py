"""Maximum intensity projection, dental-arch reference curve and curved
panoramic reconstruction.

A panorama pixel ``(s, row)`` integrates the volume along the straight segment
``r(s) + t n(s)``, ``-alpha <= t <= alpha``, at the CT height of ``row``.  The
integral is a midpoint sum with bilinear sampling in ``(x, y)`` and linear
interpolation in ``z``, so the whole reconstruction is one linear operator::

    P = A_xy @ V @ A_z.T

with ``V`` the volume reshaped to ``(Nx*Ny, Nz)``.  The same operator (and its
sparsity pattern) backs rendering, ground-truth footprints and ROI
back-projection, which keeps the three mutually consistent.

Panorama rows map to CT heights cell-centred: row ``r`` samples slice
coordinate ``z_lo - 0.5 + (r + 0.5) * (z_hi - z_lo) / height``.  When the
cropped stack has exactly ``height`` slices this is simply ``z_lo + r``.
"""

import hashlib
import json
from contextlib import contextmanager
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import ndimage, sparse
from scipy.interpolate import CubicSpline

from . import classic_seg
from .exceptions import CbctError, CurveFitError, GeometryError
from .volume import BinaryVolume3, Image2


@dataclass(frozen=True, eq=False)
class ReferenceCurve:
    """Arch curve sampled at uniform arc length.

    ``points`` are ``(x, y)`` in voxel units; ``normals`` are unit vectors in
    physical space; ``arc_spacing`` is the mm distance between samples.
    """

    points: np.ndarray
    normals: np.ndarray
    arc_spacing: float
    pixel_spacing: tuple = (1.0, 1.0)
    n_extrap: int = 0

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        nrm = np.asarray(self.normals, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2 or nrm.shape != pts.shape:
            raise ValueError("points and normals must both be (N, 2)")
        if not np.allclose(np.linalg.norm(nrm, axis=1), 1.0, atol=1e-9):
            raise ValueError("normals must be unit length")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "normals", nrm)
        object.__setattr__(self, "pixel_spacing", tuple(float(s) for s in self.pixel_spacing))

    def __len__(self):
        return len(self.points)

    @property
    def points_mm(self):
        return self.points * np.asarray(self.pixel_spacing)

    @property
    def interior(self):
        """Slice selecting the interpolated (non-extrapolated) samples."""
        return slice(self.n_extrap, len(self) - self.n_extrap)


@dataclass(frozen=True, eq=False)
class PanoramaGeometry:
    curve: ReferenceCurve
    alpha: float = 10.0
    ray_step: float = 0.2
    z_range: tuple = (80, 400)
    height: int = 320
    volume_dims: tuple = (800, 800, 400)
    volume_spacing: tuple = (0.2, 0.2, 0.2)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.alpha <= 0 or self.ray_step <= 0:
            raise ValueError("alpha and ray_step must be positive")
        z_lo, z_hi = (int(z) for z in self.z_range)
        if not 0 <= z_lo < z_hi:
            raise ValueError(f"invalid z_range {self.z_range}")
        object.__setattr__(self, "z_range", (z_lo, z_hi))
        object.__setattr__(self, "height", int(self.height))
        object.__setattr__(self, "volume_dims", tuple(int(n) for n in self.volume_dims))
        object.__setattr__(self, "volume_spacing", tuple(float(s) for s in self.volume_spacing))

    @property
    def width(self):
        return len(self.curve)

    @property
    def shape(self):
        return (self.width, self.height)

    @property
    def z_step(self):
        z_lo, z_hi = self.z_range
        return (z_hi - z_lo) / self.height

    def t_samples(self, alpha=None):
        """Midpoint-rule abscissae and weight along each ray (mm)."""
        alpha = self.alpha if alpha is None else alpha
        n = max(1, round(2 * alpha / self.ray_step))
        dt = 2 * alpha / n
        return -alpha + (np.arange(n) + 0.5) * dt, dt

    def row_heights(self):
        z_lo, _ = self.z_range
        return z_lo - 0.5 + (np.arange(self.height) + 0.5) * self.z_step

    def positions(self, t):
        """Voxel-space ``(x, y)`` of ``r(s) + t n(s)``; shape ``(N_s, len(t), 2)``."""
        sp = np.asarray(self.volume_spacing[:2])
        base = self.curve.points[:, None, :]
        offset = np.asarray(t)[None, :, None] * self.curve.normals[:, None, :] / sp
        return base + offset

    def check_inside(self):
        nx, ny = self.volume_dims[:2]
        pts = self.curve.points
        outside = (pts[:, 0] < 0) | (pts[:, 0] > nx - 1) | (pts[:, 1] < 0) | (pts[:, 1] > ny - 1)
        if outside.any():
            raise GeometryError(
                f"{int(outside.sum())} curve point(s) outside the volume's (x, y) extent",
                first_outside=int(np.argmax(outside)),
            )

    def _bilinear(self, t, weight):
        nx, ny = self.volume_dims[:2]
        pos = self.positions(t)
        n_s, n_t, _ = pos.shape
        x, y = pos[..., 0].ravel(), pos[..., 1].ravel()
        x0, y0 = np.floor(x).astype(np.int64), np.floor(y).astype(np.int64)
        fx, fy = x - x0, y - y0
        rows = np.repeat(np.arange(n_s), n_t)
        all_rows, all_cols, all_w = [], [], []
        for dx, dy, w in (
            (0, 0, (1 - fx) * (1 - fy)),
            (1, 0, fx * (1 - fy)),
            (0, 1, (1 - fx) * fy),
            (1, 1, fx * fy),
        ):
            cx, cy = x0 + dx, y0 + dy
            keep = (w > 0) & (cx >= 0) & (cx < nx) & (cy >= 0) & (cy < ny)
            all_rows.append(rows[keep])
            all_cols.append((cx + nx * cy)[keep])
            all_w.append(w[keep] * weight)
        a = sparse.csr_matrix(
            (np.concatenate(all_w), (np.concatenate(all_rows), np.concatenate(all_cols))),
            shape=(n_s, nx * ny),
        )
        a.sum_duplicates()
        a.eliminate_zeros()
        return a

    @cached_property
    def xy_operator(self):
        """Sparse ``(N_s, Nx*Ny)`` matrix: bilinear weights times the ray step."""
        t, dt = self.t_samples()
        return self._bilinear(t, dt)

    @cached_property
    def z_operator(self):
        """Dense ``(height, Nz)`` linear-interpolation matrix."""
        nz = self.volume_dims[2]
        zc = self.row_heights()
        k0 = np.floor(zc).astype(np.int64)
        f = zc - k0
        op = np.zeros((self.height, nz))
        rows = np.arange(self.height)
        for dk, w in ((0, 1 - f), (1, f)):
            k = k0 + dk
            keep = (w > 0) & (k >= 0) & (k < nz)
            op[rows[keep], k[keep]] += w[keep]
        return op

    @cached_property
    def backprojection_operator(self):
        """Sparsity pattern of rays sampled at <= half-voxel steps.

        The render abscissae are included, so every voxel that influences a
        panorama pixel is reached by back-projecting that pixel.
        """
        t_render, _ = self.t_samples()
        fine_step = min(self.volume_spacing[:2]) / 2
        n = int(np.ceil(2 * self.alpha / fine_step)) + 1
        t = np.union1d(t_render, np.linspace(-self.alpha, self.alpha, n))
        return self._bilinear(t, 1.0)

    def column_support(self, fine=False):
        """Flat ``x + Nx*y`` indices touched by each column's ray."""
        a = self.backprojection_operator if fine else self.xy_operator
        return [a.indices[a.indptr[s] : a.indptr[s + 1]] for s in range(a.shape[0])]

    def z_support(self):
        """Boolean ``(height, Nz)``: slices with nonzero weight for each row."""
        return self.z_operator > 0

    def to_dict(self):
        return {
            "curve": {
                "points": self.curve.points.tolist(),
                "normals": self.curve.normals.tolist(),
                "arc_spacing_mm": self.curve.arc_spacing,
                "pixel_spacing_mm": list(self.curve.pixel_spacing),
                "n_extrap": self.curve.n_extrap,
            },
            "alpha_mm": self.alpha,
            "ray_step_mm": self.ray_step,
            "z_range": list(self.z_range),
            "height": self.height,
            "volume_dims": list(self.volume_dims),
            "volume_spacing_mm": list(self.volume_spacing),
            "meta": dict(self.meta),
        }

    @classmethod
    def from_dict(cls, d):
        c = d["curve"]
        curve = ReferenceCurve(
            np.asarray(c["points"]),
            np.asarray(c["normals"]),
            c["arc_spacing_mm"],
            tuple(c["pixel_spacing_mm"]),
            c.get("n_extrap", 0),
        )
        return cls(
            curve,
            d["alpha_mm"],
            d["ray_step_mm"],
            tuple(d["z_range"]),
            d["height"],
            tuple(d["volume_dims"]),
            tuple(d["volume_spacing_mm"]),
            dict(d.get("meta", {})),
        )

    def digest(self):
        d = self.to_dict()
        d.pop("meta")
        blob = json.dumps(d, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def with_alpha(self, alpha):
        return PanoramaGeometry(
            self.curve, alpha, self.ray_step, self.z_range, self.height, self.volume_dims, self.volume_spacing, self.meta
        )


def mip_z(v, mask=None):
    """Maximum over z of ``v`` (optionally of ``v`` masked), chunked by slab."""
    data = v.data
    out = None
    step = max(1, (1 << 24) // max(1, data.shape[0] * data.shape[1]))
    for z0 in range(0, data.shape[2], step):
        slab = data[:, :, z0 : z0 + step]
        if mask is not None:
            m = mask.data if isinstance(mask, BinaryVolume3) else mask
            slab = np.where(m[:, :, z0 : z0 + step], slab, np.zeros((), slab.dtype))
        part = slab.max(axis=2)
        out = part if out is None else np.maximum(out, part)
    return Image2(out.astype(np.float64), v.spacing[:2])


def _knots(points, stride):
    """Window means of an ordered path, keeping both endpoints exact."""
    n = len(points)
    if stride <= 1 or n < 3 * stride:
        return points
    inner = []
    for a in range(0, n, stride):
        inner.append(points[a : a + stride].mean(axis=0))
    return np.vstack([points[:1], inner[1:-1], points[-1:]])


def _segments_cross(p, q, a, b):
    """Proper intersection of segment pq with each segment (a[i], b[i])."""

    def orient(u, v, w):
        return (v[..., 0] - u[..., 0]) * (w[..., 1] - u[..., 1]) - (v[..., 1] - u[..., 1]) * (w[..., 0] - u[..., 0])

    d1, d2 = orient(p, q, a), orient(p, q, b)
    d3, d4 = orient(a, b, p), orient(a, b, q)
    return (d1 * d2 < 0) & (d3 * d4 < 0)


def fit_reference_curve(skeleton, n_interp=500, n_extrap=70, pixel_spacing=(1.0, 1.0), centroid=None, stride=None):
    """Smooth arch curve through an ordered skeleton path.

    Cubic spline (chord-length parameter, not-a-knot ends) through
    window-averaged skeleton points, resampled at ``n_interp`` uniform arc-length positions,
    then extended by ``n_extrap`` points at each end along the end tangents at
    the same spacing. The curve runs toward increasing ``x``; normals point
    away from ``centroid`` (default: skeleton mean).
    """
    pts = np.asarray(skeleton, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 4:
        raise CurveFitError(f"need an ordered path of at least 4 points, got {len(pts)}")
    if n_interp < 2 or n_extrap < 0:
        raise ValueError("n_interp must be >= 2 and n_extrap >= 0")
    sp = np.asarray(pixel_spacing, dtype=np.float64)
    pts = pts * sp
    if (pts[0, 0], pts[0, 1]) > (pts[-1, 0], pts[-1, 1]):
        pts = pts[::-1]
    if stride is None:
        step = np.median(np.linalg.norm(np.diff(pts, axis=0), axis=1))
        # roughly 16 pixels per knot, but never fewer than 4 knots
        stride = max(1, min(round(16 * sp.min() / max(step, 1e-12)), len(pts) // 4))
    knots = _knots(pts, stride)
    chord = np.linalg.norm(np.diff(knots, axis=0), axis=1)
    keep = np.concatenate([[True], chord > 1e-9])
    knots, chord = knots[keep], chord[chord > 1e-9]
    if len(knots) < 2:
        raise CurveFitError("skeleton collapses to a point")
    u = np.concatenate([[0.0], np.cumsum(chord)])
    spline = CubicSpline(u, knots, bc_type="not-a-knot")

    dense_u = np.linspace(0.0, u[-1], max(20 * n_interp, 2000))
    dense = spline(dense_u)
    arclen = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(dense, axis=0), axis=1))])
    length = arclen[-1]
    if length <= 0:
        raise CurveFitError("fitted curve has zero length")
    target = np.linspace(0.0, length, n_interp)
    u_s = np.interp(target, arclen, dense_u)
    core = spline(u_s)
    tang = spline(u_s, 1)
    tang /= np.linalg.norm(tang, axis=1, keepdims=True)
    h = length / (n_interp - 1)

    k = np.arange(1, n_extrap + 1)[:, None]
    head = (core[0] - k * h * tang[0])[::-1]
    tail = core[-1] + k * h * tang[-1]
    points = np.vstack([head, core, tail])
    tangents = np.vstack([np.repeat(tang[:1], n_extrap, 0), tang, np.repeat(tang[-1:], n_extrap, 0)])

    if n_extrap:
        seg_a, seg_b = core[:-1], core[1:]
        for p, q, skip in ((core[0], head[0], slice(1, None)), (core[-1], tail[-1], slice(None, -1))):
            if _segments_cross(p, q, seg_a[skip], seg_b[skip]).any():
                raise CurveFitError("extrapolated end crosses the curve")
        if _segments_cross(core[0], head[0], core[-1:], tail[-1:]).any():
            raise CurveFitError("extrapolated ends cross each other")

    normals = np.column_stack([-tangents[:, 1], tangents[:, 0]])
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    c = pts.mean(axis=0) if centroid is None else np.asarray(centroid, dtype=np.float64) * sp
    if np.sum((points - c) * normals) < 0:
        normals = -normals
    return ReferenceCurve(points / sp, normals, float(h), tuple(sp), int(n_extrap))


def _masked_columns(data, cols, slices, mask=None):
    nx, ny, nz = data.shape
    # columns first: on Fortran-ordered data the reshape is a free view
    block = data.reshape(nx * ny, nz, order="F")[cols][:, slices].astype(np.float64)
    if mask is not None:
        block *= mask.reshape(nx * ny, nz, order="F")[cols][:, slices]
    return block


def render_panorama(v, g, mask=None):
    """Panorama of ``v`` (times ``mask`` if given) along geometry ``g``.

    Samples outside the volume contribute 0. Output dims ``(N_s, height)``.
    """
    if tuple(v.dims) != g.volume_dims:
        raise GeometryError(f"geometry built for {g.volume_dims}, volume is {v.dims}")
    g.check_inside()
    a = g.xy_operator
    cols = np.unique(a.indices)
    zop = g.z_operator
    slices = np.flatnonzero(zop.any(axis=0))
    m = None
    if mask is not None:
        m = mask.data if isinstance(mask, BinaryVolume3) else np.asarray(mask, bool)
    block = _masked_columns(v.data, cols, slices, m)
    along = a[:, cols] @ block
    pano = along @ zop[:, slices].T
    spacing = (g.curve.arc_spacing, g.volume_spacing[2] * g.z_step)
    return Image2(pano, spacing, {"geometry": g.digest()})


def footprint(indicator, g, support=None):
    """Pixels whose ray integral of ``indicator`` is nonzero.

    ``indicator`` is a boolean volume; ``support`` restricts the columns that
    are examined. Returns a boolean ``(N_s, height)`` image.
    """
    nx, ny, nz = indicator.shape
    flat = indicator.reshape(nx * ny, nz, order="F")
    cols = g.column_support() if support is None else support
    zsup = g.z_support().astype(np.uint8)
    out = np.zeros(g.shape, bool)
    for s, idx in enumerate(cols):
        if idx.size == 0:
            continue
        hit = flat[idx].any(axis=0)
        if hit.any():
            out[s] = (zsup @ hit.astype(np.uint8)) > 0
    return out


@contextmanager
def stage(name, **details):
    """Attach the pipeline stage to errors raised inside the block."""
    try:
        yield
    except CbctError as exc:
        exc.stage = name
        exc.details.update(details)
        raise


@dataclass(eq=False)
class JawPanorama:
    jaw: str
    panorama: Image2
    geometry: PanoramaGeometry
    mask: BinaryVolume3
    mip: Image2
    arch_threshold: float
    arch_region: np.ndarray
    skeleton: np.ndarray


@dataclass(eq=False)
class Step1Result:
    thresholds: tuple
    upper: JawPanorama
    lower: JawPanorama

    def __iter__(self):
        yield from (self.upper.panorama, self.lower.panorama, self.upper.geometry, self.lower.geometry)

    def jaw(self, name):
        return {"upper": self.upper, "lower": self.lower}[name]


def arch_region(mip, closing_radius=5, bins=256):
    """Otsu on the MIP, closing, then the largest 8-connected part, holes filled."""
    t = classic_seg.otsu_single(classic_seg.histogram(mip, bins))
    region = classic_seg.closing_2d(mip.data >= t, closing_radius)
    labels, n = ndimage.label(region, structure=np.ones((3, 3), bool))
    if n > 1:
        sizes = np.bincount(labels.ravel())
        sizes[0] = 0
        region = labels == int(np.argmax(sizes))
    return t, ndimage.binary_fill_holes(region)


def jaw_geometry(x, mask, *, n_interp=500, n_extrap=70, height=320, alpha_mm=10.0, ray_step_mm=0.2,
                 z_crop_bottom=80, closing_radius=5, bins=256, jaw="upper"):
    with stage(f"mip_{jaw}", jaw=jaw):
        mip = mip_z(x, mask)
    with stage(f"arch_region_{jaw}", jaw=jaw):
        t, region = arch_region(mip, closing_radius, bins)
    with stage(f"skeletonize_{jaw}", jaw=jaw):
        skel = classic_seg.skeletonize_2d(region)
    with stage(f"fit_reference_curve_{jaw}", jaw=jaw):
        centroid = np.argwhere(region).mean(axis=0)
        curve = fit_reference_curve(skel, n_interp, n_extrap, x.spacing[:2], centroid)
    nz = x.dims[2]
    if z_crop_bottom >= nz:
        raise GeometryError(f"cropping {z_crop_bottom} slices leaves nothing of {nz}", stage="render_panorama")
    g = PanoramaGeometry(curve, alpha_mm, ray_step_mm, (z_crop_bottom, nz), height, x.dims, x.spacing, {"jaw": jaw})
    return g, mip, t, region, skel


def build_panoramas(x, *, bins=256, min_component_fraction=0.01, **geometry_kwargs):
    """Full Step-1 chain: thresholds, jaw split, arch curves and both panoramas."""
    with stage("otsu_two_level"):
        h = classic_seg.histogram(x, bins)
        t0, t1 = classic_seg.otsu_two_level(h)
    with stage("binarize_bone"):
        bone = classic_seg.binarize_bone(x, t1)
    with stage("split_jaws"):
        jaws = classic_seg.split_jaws(bone, min_component_fraction)
    del bone
    out = {}
    for name in ("upper", "lower"):
        mask = getattr(jaws, name)
        g, mip, t, region, skel = jaw_geometry(x, mask, bins=bins, jaw=name, **geometry_kwargs)
        with stage(f"render_panorama_{name}", jaw=name):
            pano = render_panorama(x, g, mask)
        out[name] = JawPanorama(name, pano, g, mask, mip, t, region, skel)
    return Step1Result((t0, t1), out["upper"], out["lower"])
