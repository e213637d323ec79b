"""Grid types, elementwise algebra, resampling and raw/PGM file I/O.

Arrays are indexed ``(x, y, z)`` for volumes and ``(u, v)`` for images.  On
disk, raw files are little-endian with x varying fastest (Fortran order), and
every raw file has a JSON sidecar next to it::

    {"dims": [Nx, Ny, Nz], "spacing_mm": [dx, dy, dz], "dtype": "u16"}

Optional sidecar keys: ``origin_voxel`` (offset of a cropped volume inside its
parent grid) and ``channels`` (multi-channel files, channel slowest).
"""

import json
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .exceptions import VolumeFormatError

DTYPES = {"u8": np.dtype("<u1"), "u16": np.dtype("<u2"), "f32": np.dtype("<f4")}


def _frozen(a):
    view = np.asarray(a).view()
    view.flags.writeable = False
    return view


def _check_spacing(spacing, n):
    spacing = tuple(float(s) for s in np.broadcast_to(np.asarray(spacing, float), (n,)))
    if not all(np.isfinite(s) and s > 0 for s in spacing):
        raise ValueError(f"spacing must be positive and finite, got {spacing}")
    return spacing


@dataclass(frozen=True, eq=False)
class Volume3:
    """Scalar volume on a regular grid; ``spacing`` is mm per voxel."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0, 0, 0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"Volume3 needs a 3D array, got shape {data.shape}")
        if data.dtype.kind == "b":
            data = data.astype(np.uint8)
        if data.dtype.kind == "f" and not np.isfinite(data).all():
            raise ValueError("Volume3 values must be finite")
        object.__setattr__(self, "data", _frozen(data))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing, 3))
        object.__setattr__(self, "origin", tuple(int(o) for o in self.origin))

    @property
    def dims(self):
        return self.data.shape

    @property
    def voxel_volume(self):
        return float(np.prod(self.spacing))

    def astype(self, dtype):
        return Volume3(self.data.astype(dtype), self.spacing, self.origin)


@dataclass(frozen=True, eq=False)
class BinaryVolume3:
    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"BinaryVolume3 needs a 3D array, got shape {data.shape}")
        if data.dtype != bool:
            if not np.isin(np.unique(data), (0, 1)).all():
                raise ValueError("BinaryVolume3 values must be 0 or 1")
            data = data.astype(bool)
        object.__setattr__(self, "data", _frozen(data))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing, 3))

    @property
    def dims(self):
        return self.data.shape

    def count(self):
        return int(np.count_nonzero(self.data))


@dataclass(frozen=True, eq=False)
class Image2:
    """Scalar image indexed ``(u, v)``; for panoramas ``u`` is s and ``v`` is z."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 2:
            raise ValueError(f"Image2 needs a 2D array, got shape {data.shape}")
        if data.dtype.kind == "f" and not np.isfinite(data).all():
            raise ValueError("Image2 values must be finite")
        object.__setattr__(self, "data", _frozen(data))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing, 2))

    @property
    def dims(self):
        return self.data.shape


def masked(v, m):
    """Elementwise product of a volume with a binary mask."""
    mask = m.data if isinstance(m, BinaryVolume3) else np.asarray(m, bool)
    if mask.shape != v.dims:
        raise ValueError(f"dims mismatch: volume {v.dims} vs mask {mask.shape}")
    out = np.where(mask, v.data, np.zeros((), v.data.dtype))
    return Volume3(out, v.spacing, v.origin)


def _linear_resample(data, target_dims):
    data = np.asarray(data, dtype=np.float64)
    target_dims = tuple(int(n) for n in target_dims)
    if len(target_dims) != data.ndim or min(target_dims) < 1:
        raise ValueError(f"target dims must be {data.ndim} positive integers, got {target_dims}")
    if target_dims == data.shape:
        return data.copy()
    # unit-normalized lattice: output index j samples input coordinate j*(n_in-1)/(n_out-1)
    scale = [(ni - 1) / (no - 1) if no > 1 else 0.0 for ni, no in zip(data.shape, target_dims)]
    return ndimage.affine_transform(
        data, np.diag(scale), output_shape=target_dims, order=1, mode="nearest", prefilter=False
    )


def _resampled_spacing(spacing, dims_in, dims_out):
    out = []
    for s, ni, no in zip(spacing, dims_in, dims_out):
        if ni > 1 and no > 1:
            out.append(s * (ni - 1) / (no - 1))
        else:
            out.append(s * ni / no)
    return tuple(out)


def resample_trilinear(v, target_dims):
    """Trilinear resampling of ``v`` onto ``target_dims``.

    Corners of the input and output lattices coincide, so linear fields are
    reproduced exactly; borders clamp.
    """
    if np.isscalar(target_dims):
        target_dims = (int(target_dims),) * 3
    out = _linear_resample(v.data, target_dims)
    return Volume3(out, _resampled_spacing(v.spacing, v.dims, out.shape), v.origin)


def resample_bilinear(img, target_dims):
    data = img.data if isinstance(img, Image2) else img
    out = _linear_resample(data, target_dims)
    if isinstance(img, Image2):
        return Image2(out, _resampled_spacing(img.spacing, img.dims, out.shape), dict(img.meta))
    return out


# -- raw + sidecar I/O -------------------------------------------------------


def sidecar_path(path):
    root, _ = os.path.splitext(os.fspath(path))
    return root + ".json"


def _dtype_code(arr, dtype=None):
    if dtype is not None:
        if dtype not in DTYPES:
            raise ValueError(f"unknown dtype {dtype!r}; expected one of {sorted(DTYPES)}")
        return dtype
    kind = arr.dtype
    if kind == bool or kind == np.uint8:
        return "u8"
    if kind.kind in "ui":
        return "u16"
    return "f32"


def _atomic_write(path, payload, mode="wb"):
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path, obj):
    try:
        _atomic_write(path, json.dumps(obj, indent=2, sort_keys=True) + "\n", mode="w")
    except OSError as exc:
        raise VolumeFormatError(f"cannot write {path}: {exc}") from exc


def _encode(data, code):
    dt = DTYPES[code]
    if code != "f32":
        info = np.iinfo(dt)
        if data.size and (data.min() < info.min or data.max() > info.max):
            raise VolumeFormatError(f"values out of range for {code}")
        if data.dtype.kind == "f" and not np.array_equal(data, np.round(data)):
            raise VolumeFormatError(f"non-integer values cannot be stored as {code}")
    return np.asarray(data).astype(dt, copy=False).tobytes(order="F")


def save_array(data, path, spacing, dtype=None, **extra):
    """Write an array as raw little-endian (x fastest) plus sidecar."""
    data = np.asarray(data)
    code = _dtype_code(data, dtype)
    channels = int(extra.get("channels", 1))
    dims = data.shape[:-1] if channels > 1 else data.shape
    if channels > 1 and data.shape[-1] != channels:
        raise ValueError(f"last axis has {data.shape[-1]} entries, expected {channels} channels")
    meta = {"dims": list(dims), "spacing_mm": [float(s) for s in spacing], "dtype": code}
    meta.update(extra)
    try:
        _atomic_write(path, _encode(data, code))
    except OSError as exc:
        raise VolumeFormatError(f"cannot write {path}: {exc}") from exc
    write_json(sidecar_path(path), meta)


def save_volume(v, path, dtype=None):
    extra = {"origin_voxel": list(v.origin)} if any(v.origin) else {}
    save_array(v.data, path, v.spacing, dtype=dtype, **extra)


def read_sidecar(path):
    side = sidecar_path(path)
    if not os.path.exists(side):
        raise VolumeFormatError(f"missing sidecar {side}")
    with open(side) as fh:
        try:
            meta = json.load(fh)
        except json.JSONDecodeError as exc:
            raise VolumeFormatError(f"bad sidecar {side}: {exc}") from exc
    for key in ("dims", "spacing_mm", "dtype"):
        if key not in meta:
            raise VolumeFormatError(f"sidecar {side} lacks {key!r}")
    if meta["dtype"] not in DTYPES:
        raise VolumeFormatError(f"unsupported dtype {meta['dtype']!r}")
    if any(float(s) <= 0 for s in meta["spacing_mm"]):
        raise VolumeFormatError(f"nonpositive spacing {meta['spacing_mm']}")
    if any(int(n) < 1 for n in meta["dims"]):
        raise VolumeFormatError(f"nonpositive dims {meta['dims']}")
    return meta


def load_array(path):
    """Read a raw file and its sidecar; returns ``(array, meta)``."""
    meta = read_sidecar(path)
    dt = DTYPES[meta["dtype"]]
    dims = [int(n) for n in meta["dims"]]
    shape = dims + ([int(meta["channels"])] if int(meta.get("channels", 1)) > 1 else [])
    expected = int(np.prod(shape)) * dt.itemsize
    try:
        actual = os.path.getsize(path)
    except OSError as exc:
        raise VolumeFormatError(f"cannot read {path}: {exc}") from exc
    if actual != expected:
        raise VolumeFormatError(
            f"{path}: sidecar implies {expected} bytes, file has {actual}", expected=expected, actual=actual
        )
    data = np.fromfile(path, dtype=dt).reshape(shape, order="F")
    return data.astype(dt.newbyteorder("="), copy=False), meta


def load_volume(path):
    data, meta = load_array(path)
    if data.ndim != 3:
        raise VolumeFormatError(f"{path} is not a single-channel volume")
    return Volume3(data, tuple(meta["spacing_mm"]), tuple(meta.get("origin_voxel", (0, 0, 0))))


# -- 16-bit PGM --------------------------------------------------------------


def save_pgm(img, path, scale=None):
    """Write an image as binary 16-bit PGM; rows are v, columns are u.

    Values are multiplied by ``scale`` (default: map the maximum to 65535) and
    rounded. Returns the scale used so callers can record it.
    """
    data = np.asarray(img.data if isinstance(img, Image2) else img, dtype=np.float64)
    if scale is None:
        peak = data.max() if data.size else 0.0
        scale = 65535.0 / peak if peak > 0 else 1.0
    q = np.clip(np.round(data * scale), 0, 65535).astype(">u2")
    header = f"P5\n{data.shape[0]} {data.shape[1]}\n65535\n".encode("ascii")
    try:
        _atomic_write(path, header + q.T.tobytes())
    except OSError as exc:
        raise VolumeFormatError(f"cannot write {path}: {exc}") from exc
    return float(scale)


def load_pgm(path):
    """Read a binary PGM (8 or 16 bit) into a ``(u, v)`` integer array."""
    with open(path, "rb") as fh:
        raw = fh.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos].decode("ascii"))
    if tokens[0] != "P5":
        raise VolumeFormatError(f"{path}: not a binary PGM")
    width, height, maxval = (int(t) for t in tokens[1:])
    dt = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    body = raw[pos + 1 :]
    if len(body) != width * height * dt.itemsize:
        raise VolumeFormatError(f"{path}: truncated PGM body")
    return np.frombuffer(body, dtype=dt).reshape(height, width).T.astype(np.uint16)
