"""Segmentation overlap/surface metrics and detection precision/recall/AP."""

import numpy as np
from scipy import ndimage


def _bool(a):
    return np.asarray(a.data if hasattr(a, "data") else a, dtype=bool)


def dice(a, b):
    """Dice coefficient; two empty masks score 1."""
    a, b = _bool(a), _bool(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    total = a.sum() + b.sum()
    return 1.0 if total == 0 else 2.0 * np.logical_and(a, b).sum() / total


def surface(mask):
    """Foreground voxels with at least one 6-connected background neighbour."""
    mask = _bool(mask)
    inner = ndimage.binary_erosion(mask, structure=ndimage.generate_binary_structure(mask.ndim, 1), border_value=0)
    return mask & ~inner


def _surface_distances(a, b, spacing):
    """Distances (mm) from each surface voxel of ``a`` to the surface of ``b``, and vice versa."""
    a, b = _bool(a), _bool(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if not a.any() or not b.any():
        return None
    # work inside the joint bounding box, padded so the EDT sees the border
    idx = np.argwhere(a | b)
    lo = np.maximum(idx.min(0) - 1, 0)
    hi = idx.max(0) + 2
    sl = tuple(slice(l, h) for l, h in zip(lo, hi))
    sa, sb = surface(np.pad(a[sl], 1)), surface(np.pad(b[sl], 1))
    spacing = np.broadcast_to(np.asarray(spacing, float), (a.ndim,))
    da = ndimage.distance_transform_edt(~sa, sampling=spacing)
    db = ndimage.distance_transform_edt(~sb, sampling=spacing)
    return db[sa], da[sb]


def hausdorff(a, b, spacing=1.0):
    """Symmetric Hausdorff distance between mask surfaces, in mm."""
    d = _surface_distances(a, b, spacing)
    if d is None:
        return 0.0 if not _bool(a).any() and not _bool(b).any() else float("inf")
    return float(max(d[0].max(), d[1].max()))


def assd(a, b, spacing=1.0):
    """Average symmetric surface distance, in mm."""
    d = _surface_distances(a, b, spacing)
    if d is None:
        return 0.0 if not _bool(a).any() and not _bool(b).any() else float("inf")
    return float((d[0].sum() + d[1].sum()) / (d[0].size + d[1].size))


def precision_recall_f1(tp, n_pred, n_true):
    precision = tp / n_pred if n_pred else (1.0 if n_true == 0 else 0.0)
    recall = tp / n_true if n_true else 1.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def average_precision(scores, is_tp, n_true):
    """All-point interpolated AP over the precision-recall curve.

    Predictions are ranked by score (stable for ties).
    """
    scores = np.asarray(scores, dtype=np.float64)
    is_tp = np.asarray(is_tp, dtype=bool)
    if n_true == 0:
        return float("nan")
    order = np.argsort(-scores, kind="stable")
    tp = np.cumsum(is_tp[order])
    fp = np.cumsum(~is_tp[order])
    recall = np.concatenate([[0.0], tp / n_true, [1.0]])
    precision = np.concatenate([[0.0], tp / np.maximum(tp + fp, 1), [0.0]])
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    steps = np.flatnonzero(recall[1:] != recall[:-1])
    return float(np.sum((recall[steps + 1] - recall[steps]) * precision[steps + 1]))


def greedy_match(similarity, scores, thresh):
    """Match predictions (rows) to truths (columns), best score first.

    Each prediction takes the still-free truth with the highest similarity,
    provided it reaches ``thresh``. Returns ``{pred: truth}``.
    """
    similarity = np.asarray(similarity, dtype=np.float64)
    taken, out = set(), {}
    for p in np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable"):
        best, best_v = None, thresh
        for t in np.argsort(-similarity[p], kind="stable"):
            if similarity[p, t] < best_v:
                break
            if t not in taken:
                best = int(t)
                break
        if best is not None:
            taken.add(best)
            out[int(p)] = best
    return out
