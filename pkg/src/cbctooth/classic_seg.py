"""Histogram thresholding, jaw separation and 2D morphology.

Otsu thresholds are found by exhaustive search over every cut (pair of cuts
for the three-class variant). The search works on integer bin counts, so class
masses and first moments are exact; near-ties in the floating objective are
resolved in exact rational arithmetic, smallest cut first.
"""

import itertools
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy import ndimage
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra
from skimage.morphology import disk, skeletonize

from .exceptions import (
    DegenerateHistogramError,
    JawsNotSeparatedError,
    NotSeparableError,
    SkeletonError,
)
from .volume import BinaryVolume3, Image2, Volume3

_TIE_RTOL = 1e-12
_CHUNK = 1 << 22


@dataclass(frozen=True, eq=False)
class Histogram:
    counts: np.ndarray
    bin_edges: np.ndarray

    def __post_init__(self):
        counts = np.asarray(self.counts)
        edges = np.asarray(self.bin_edges, dtype=np.float64)
        if counts.ndim != 1 or edges.shape != (counts.size + 1,):
            raise ValueError("need B counts and B+1 edges")
        if (counts < 0).any() or not np.array_equal(counts, np.round(counts)):
            raise ValueError("counts must be nonnegative integers")
        if (np.diff(edges) <= 0).any():
            raise ValueError("bin edges must increase")
        object.__setattr__(self, "counts", counts.astype(np.int64))
        object.__setattr__(self, "bin_edges", edges)

    @property
    def p(self):
        return self.counts / self.counts.sum()


@dataclass(frozen=True, eq=False)
class JawPair:
    upper: BinaryVolume3
    lower: BinaryVolume3


def _values(v):
    if isinstance(v, (Volume3, Image2)):
        return v.data
    return np.asarray(v)


def _bincount(flat, offset=0, minlength=0):
    """``np.bincount(flat - offset)`` without an int64 copy of the whole input."""
    out = np.zeros(minlength, np.int64)
    for a in range(0, flat.size, _CHUNK):
        part = np.bincount(flat[a : a + _CHUNK].astype(np.int64) - offset, minlength=minlength)
        if part.size > out.size:
            part[: out.size] += out
            out = part
        else:
            out[: part.size] += part
    return out


def histogram(v, bins=256):
    """Equal-width histogram spanning ``[min(v), max(v)]``.

    A value ``x`` lands in bin ``floor((x - min) * bins / (max - min))``, the
    maximum in the last bin, so ``x >= bin_edges[t]`` exactly when its bin
    index is at least ``t`` (exact for integer data).
    """
    bins = int(bins)
    if bins < 2:
        raise ValueError("need at least 2 bins")
    data = _values(v)
    lo, hi = data.min(), data.max()
    if lo == hi:
        raise DegenerateHistogramError(f"constant input ({lo}); histogram range is empty")
    edges = np.linspace(float(lo), float(hi), bins + 1)
    flat = data.ravel(order="K")
    chunks = range(0, flat.size, _CHUNK)
    if data.dtype.kind in "uib":
        lo, hi = int(lo), int(hi)
        span = hi - lo
        # histogram the distinct values first; far cheaper than binning every voxel
        per_value = _bincount(flat, lo, span + 1)
        offsets = np.arange(span + 1, dtype=np.int64)
        idx = np.minimum(offsets * bins // span, bins - 1)
        counts = np.bincount(idx, weights=per_value, minlength=bins)
    else:
        lo, hi = float(lo), float(hi)
        counts = np.zeros(bins, np.int64)
        for a in chunks:
            idx = np.floor((flat[a : a + _CHUNK] - lo) * (bins / (hi - lo))).astype(np.int64)
            np.clip(idx, 0, bins - 1, out=idx)
            counts += np.bincount(idx, minlength=bins)
    return Histogram(np.rint(counts).astype(np.int64), edges)


def _prefix(counts):
    levels = np.arange(counts.size, dtype=np.int64)
    n = np.concatenate([[0], np.cumsum(counts)])
    s = np.concatenate([[0], np.cumsum(counts * levels)])
    return n, s


def _exact_objective(n, s, cuts):
    """Sum over classes of (first moment)^2 / mass, as an exact Fraction."""
    bounds = [0, *cuts, len(n) - 1]
    total = Fraction(0)
    for a, b in itertools.pairwise(bounds):
        mass = int(n[b]) - int(n[a])
        moment = int(s[b]) - int(s[a])
        total += Fraction(moment * moment, mass)
    return total


def _pick(objective, n, s):
    """Argmax with lexicographic tie-break, robust to float rounding."""
    best = objective.max()
    near = np.argwhere(objective >= best - _TIE_RTOL * abs(best))
    if len(near) == 1:
        return tuple(int(c) for c in near[0])
    exact = [(_exact_objective(n, s, [int(c) for c in cand]), tuple(int(c) for c in cand)) for cand in near]
    top = max(e for e, _ in exact)
    return min(c for e, c in exact if e == top)


def otsu_two_level_bins(counts):
    """Cut indices ``(t0, t1)`` splitting bins into ``[0,t0) [t0,t1) [t1,B)``."""
    counts = np.asarray(counts, dtype=np.int64)
    if np.count_nonzero(counts) < 3:
        raise NotSeparableError("three-class Otsu needs at least 3 nonempty bins")
    n, s_int = _prefix(counts)
    s = s_int.astype(np.float64)
    n_tot, s_tot = n[-1], s[-1]
    t0 = np.arange(counts.size + 1)[:, None]
    t1 = np.arange(counts.size + 1)[None, :]
    n0, n1, n2 = n[t0], n[t1] - n[t0], n_tot - n[t1]
    s0, s1, s2 = s[t0], s[t1] - s[t0], s_tot - s[t1]
    valid = (t0 < t1) & (n0 > 0) & (n1 > 0) & (n2 > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        obj = s0**2 / n0 + s1**2 / n1 + s2**2 / n2
    obj = np.where(valid, obj, -np.inf)
    return _pick(obj, n, s_int)


def otsu_single_bins(counts):
    counts = np.asarray(counts, dtype=np.int64)
    if np.count_nonzero(counts) < 2:
        raise NotSeparableError("Otsu needs at least 2 nonempty bins")
    n, s_int = _prefix(counts)
    s = s_int.astype(np.float64)
    t = np.arange(counts.size + 1)
    n0, n1 = n[t], n[-1] - n[t]
    s0, s1 = s[t], s[-1] - s[t]
    with np.errstate(divide="ignore", invalid="ignore"):
        obj = s0**2 / n0 + s1**2 / n1
    obj = np.where((n0 > 0) & (n1 > 0), obj, -np.inf)
    return _pick(obj, n, s_int)[0]


def otsu_two_level(h):
    """Three-class Otsu thresholds ``(T0, T1)`` as histogram edge values."""
    t0, t1 = otsu_two_level_bins(h.counts)
    return float(h.bin_edges[t0]), float(h.bin_edges[t1])


def otsu_single(h):
    return float(h.bin_edges[otsu_single_bins(h.counts)])


def binarize_bone(v, T1):
    return BinaryVolume3(np.asarray(v.data) >= T1, v.spacing)


def _first_linear_index(labels, label):
    # x-fastest linear order, matching the on-disk layout
    return int(np.flatnonzero(np.ravel(labels == label, order="F"))[0])


def rank_components(labels, sizes, candidates):
    """Order component ids by size (desc), ties by smallest linear voxel index."""
    keyed = []
    for lab in candidates:
        tied = np.count_nonzero(sizes[candidates] == sizes[lab]) > 1
        keyed.append((-int(sizes[lab]), _first_linear_index(labels, lab) if tied else 0, int(lab)))
    return [lab for *_, lab in sorted(keyed)]


def _label26(mask):
    # 16-bit labels halve the footprint on large volumes; widen only if needed
    structure = np.ones((3, 3, 3), bool)
    try:
        labels = np.empty(mask.shape, np.uint16)
        n = ndimage.label(mask, structure=structure, output=labels)
    except RuntimeError:
        labels, n = ndimage.label(mask, structure=structure)
    return labels, n


def split_jaws(b, min_component_fraction=0.01):
    """Lower jaw = largest 26-connected component, upper = second largest.

    Components smaller than ``min_component_fraction`` of the foreground are
    ignored (speckle, stray bone).
    """
    mask = b.data if isinstance(b, BinaryVolume3) else np.asarray(b, bool)
    spacing = b.spacing if isinstance(b, BinaryVolume3) else (1.0, 1.0, 1.0)
    labels, n = _label26(mask)
    if n < 2:
        raise JawsNotSeparatedError(f"found {n} connected component(s); need 2", n_components=int(n))
    sizes = _bincount(labels.ravel(order="K"), minlength=n + 1)
    sizes[0] = 0
    floor = min_component_fraction * sizes.sum()
    candidates = np.flatnonzero(sizes >= max(floor, 1))
    if candidates.size < 2:
        raise JawsNotSeparatedError(
            f"only {candidates.size} component(s) above the size floor {floor:.0f}", n_components=int(n)
        )
    order = rank_components(labels, sizes, candidates)
    lower = labels == order[0]
    upper = labels == order[1]
    del labels
    return JawPair(upper=BinaryVolume3(upper, spacing), lower=BinaryVolume3(lower, spacing))


def closing_2d(img, radius):
    """Binary closing with a disk; the result always contains the input."""
    radius = int(radius)
    if radius < 1:
        raise ValueError("radius must be >= 1")
    img = np.asarray(img, bool)
    se = disk(radius).astype(bool)
    padded = np.pad(img, radius)
    grown = ndimage.binary_dilation(padded, structure=se)
    closed = ndimage.binary_erosion(grown, structure=se, border_value=0)
    return closed[radius:-radius, radius:-radius] | img


def _pixel_graph(points):
    index = {tuple(p): i for i, p in enumerate(points)}
    rows, cols, weights = [], [], []
    for i, (u, v) in enumerate(points):
        for du in (-1, 0, 1):
            for dv in (-1, 0, 1):
                if du == dv == 0:
                    continue
                j = index.get((u + du, v + dv))
                if j is not None:
                    rows.append(i)
                    cols.append(j)
                    weights.append(np.hypot(du, dv))
    n = len(points)
    return coo_matrix((weights, (rows, cols)), shape=(n, n)).tocsr()


def longest_path(points):
    """Longest geodesic path through an 8-connected pixel set (double sweep)."""
    points = np.asarray(points)
    if len(points) == 1:
        return points.copy()
    graph = _pixel_graph(points)
    dist = dijkstra(graph, directed=False, indices=0)
    a = int(np.argmax(np.where(np.isfinite(dist), dist, -1)))
    dist, pred = dijkstra(graph, directed=False, indices=a, return_predecessors=True)
    b = int(np.argmax(np.where(np.isfinite(dist), dist, -1)))
    path = [b]
    while path[-1] != a:
        path.append(int(pred[path[-1]]))
    return points[path[::-1]]


def skeletonize_2d(img):
    """Medial axis of a single-component binary image as an ordered path.

    Side branches are pruned: only the longest geodesic path through the
    skeleton is kept. Returns an ``(n, 2)`` integer array of ``(u, v)``.
    """
    img = np.asarray(img, bool)
    if not img.any():
        raise SkeletonError("empty image")
    _, n = ndimage.label(img, structure=np.ones((3, 3), bool))
    if n != 1:
        raise SkeletonError(f"expected one 8-connected component, found {n}", n_components=int(n))
    skel = skeletonize(img)
    points = np.argwhere(skel)
    if len(points) == 0:
        raise SkeletonError("skeletonization removed every pixel")
    return longest_path(points)
