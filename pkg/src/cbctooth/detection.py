"""Grid-cell detection maps, box codec, score fusion, NMS and training losses.

A panorama of ``N_s x N_z`` pixels is tiled by ``g x g`` cells.  Cell ``(i, j)``
(1-based, ``i`` along ``s``) covers ``s in [g(i-1), g i)`` and
``z in [g(j-1), g j)`` and predicts a confidence ``c``, a box encoding ``b`` and
class probabilities ``p``.  Boxes are ``(s_center, z_center, w, h)`` in pixels.
"""

import json
import warnings
from dataclasses import dataclass

import numpy as np

from .exceptions import InfiniteLossWarning, SchemaError
from .volume import Image2, Volume3, write_json

CLASS_NAMES = ("incisor", "canine", "premolar", "molar")
N_CLASSES = len(CLASS_NAMES)
DEFAULT_ANCHOR = (32.0, 64.0)
EPS = 1e-12


def class_name(class_id):
    return CLASS_NAMES[int(class_id) - 1]


def class_id(name):
    try:
        return CLASS_NAMES.index(name) + 1
    except ValueError:
        raise SchemaError(f"unknown tooth class {name!r}") from None


def _check_positive(*vals, what="box extents"):
    if any(not np.isfinite(v) or v <= 0 for v in vals):
        raise ValueError(f"{what} must be positive, got {vals}")


def encode_box(box, cell, g=16, anchor=DEFAULT_ANCHOR):
    """``b = (s/g - (i-1), z/g - (j-1), log(w/a_w), log(h/a_h))``."""
    s, z, w, h = (float(v) for v in box)
    i, j = cell
    _check_positive(w, h)
    _check_positive(*anchor, what="anchor")
    return np.array([s / g - (i - 1), z / g - (j - 1), np.log(w / anchor[0]), np.log(h / anchor[1])])


def decode_box(b, cell, g=16, anchor=DEFAULT_ANCHOR):
    _check_positive(*anchor, what="anchor")
    i, j = cell
    b = np.asarray(b, dtype=np.float64)
    return np.array([(b[0] + i - 1) * g, (b[1] + j - 1) * g, anchor[0] * np.exp(b[2]), anchor[1] * np.exp(b[3])])


def cell_of(s, z, g=16):
    """1-based cell containing pixel-space point ``(s, z)``."""
    return int(np.floor(s / g)) + 1, int(np.floor(z / g)) + 1


def corners(box):
    s, z, w, h = box
    return s - w / 2, z - h / 2, s + w / 2, z + h / 2


def iou(a, b):
    a0, a1, a2, a3 = corners(a)
    b0, b1, b2, b3 = corners(b)
    iw = max(0.0, min(a2, b2) - max(a0, b0))
    ih = max(0.0, min(a3, b3) - max(a1, b1))
    inter = iw * ih
    union = a[2] * a[3] + b[2] * b[3] - inter
    # rounding can push identical boxes a few ulps above 1
    return min(1.0, inter / union) if union > 0 else 0.0


def iou_matrix(boxes_a, boxes_b):
    """Pairwise IoU between two ``(n, 4)`` box arrays."""
    a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 4)
    ca = np.stack(corners(a.T), axis=1)
    cb = np.stack(corners(b.T), axis=1)
    iw = np.clip(np.minimum(ca[:, None, 2], cb[None, :, 2]) - np.maximum(ca[:, None, 0], cb[None, :, 0]), 0, None)
    ih = np.clip(np.minimum(ca[:, None, 3], cb[None, :, 3]) - np.maximum(ca[:, None, 1], cb[None, :, 1]), 0, None)
    inter = iw * ih
    union = (a[:, 2] * a[:, 3])[:, None] + (b[:, 2] * b[:, 3])[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, np.minimum(inter / union, 1.0), 0.0)


@dataclass(frozen=True)
class CellPrediction:
    c: float
    b: tuple
    p: tuple


@dataclass(frozen=True)
class Detection:
    box: tuple
    score: float
    class_id: int
    cell: tuple = None

    @property
    def s_center(self):
        return self.box[0]

    @property
    def class_name(self):
        return class_name(self.class_id)

    def to_dict(self):
        d = {"box": [float(v) for v in self.box], "score": float(self.score), "class": self.class_name}
        if self.cell is not None:
            d["cell"] = [int(v) for v in self.cell]
        return d

    @classmethod
    def from_dict(cls, d):
        return validate_detection(d)


class DetectionGrid:
    """Dense detection map: ``c`` is ``(n_i, n_j)``, ``b`` and ``p`` are ``(n_i, n_j, 4)``.

    Array index ``[i-1, j-1]`` holds cell ``(i, j)``.
    """

    def __init__(self, c, b, p, g=16, anchor=DEFAULT_ANCHOR, validate=True):
        self.c = np.asarray(c, dtype=np.float64)
        self.b = np.asarray(b, dtype=np.float64)
        self.p = np.asarray(p, dtype=np.float64)
        self.g = int(g)
        self.anchor = tuple(float(a) for a in anchor)
        if validate:
            self.validate()

    @classmethod
    def empty(cls, shape, g=16, anchor=DEFAULT_ANCHOR):
        """All-background grid for a panorama of ``shape = (N_s, N_z)`` pixels."""
        n_s, n_z = shape
        if n_s % g or n_z % g:
            raise ValueError(f"panorama {shape} not divisible by g={g}")
        ni, nj = n_s // g, n_z // g
        p = np.full((ni, nj, N_CLASSES), 1.0 / N_CLASSES)
        return cls(np.zeros((ni, nj)), np.zeros((ni, nj, 4)), p, g, anchor)

    @property
    def shape(self):
        return self.c.shape

    def __getitem__(self, cell):
        i, j = cell
        return CellPrediction(float(self.c[i - 1, j - 1]), tuple(self.b[i - 1, j - 1]), tuple(self.p[i - 1, j - 1]))

    def validate(self):
        ni, nj = self.c.shape
        if self.b.shape != (ni, nj, 4) or self.p.shape != (ni, nj, N_CLASSES):
            raise SchemaError(f"inconsistent grid shapes c{self.c.shape} b{self.b.shape} p{self.p.shape}")
        for name, arr in (("c", self.c), ("b", self.b), ("p", self.p)):
            if not np.isfinite(arr).all():
                raise SchemaError(f"non-finite values in {name}")
        if ((self.c < 0) | (self.c > 1)).any():
            raise SchemaError("confidence outside [0, 1]")
        if (self.p < 0).any():
            raise SchemaError("negative class probability")
        bad = np.abs(self.p.sum(axis=-1) - 1) > 1e-6
        if bad.any():
            i, j = np.argwhere(bad)[0]
            raise SchemaError(
                f"class probabilities of cell ({i + 1}, {j + 1}) sum to {self.p[i, j].sum():.6g}",
                cell=[int(i) + 1, int(j) + 1],
            )
        _check_positive(*self.anchor, what="anchor")

    def scores(self):
        return self.c * self.p.max(axis=-1)

    def decoded_boxes(self):
        """``(n_i, n_j, 4)`` array of decoded boxes, vectorized :func:`decode_box`."""
        ni, nj = self.shape
        i = np.arange(ni)[:, None]
        j = np.arange(nj)[None, :]
        out = np.empty((ni, nj, 4))
        out[..., 0] = (self.b[..., 0] + i) * self.g
        out[..., 1] = (self.b[..., 1] + j) * self.g
        out[..., 2] = self.anchor[0] * np.exp(self.b[..., 2])
        out[..., 3] = self.anchor[1] * np.exp(self.b[..., 3])
        return out

    def to_dict(self):
        return {"g": self.g, "anchor": list(self.anchor), "c": self.c.tolist(), "b": self.b.tolist(), "p": self.p.tolist()}

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(d["c"], d["b"], d["p"], d.get("g", 16), d.get("anchor", DEFAULT_ANCHOR))
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"malformed detection grid: {exc}") from exc


def detections_to_grid(dets, shape, g=16, anchor=DEFAULT_ANCHOR):
    """Ground-truth style grid: each box is owned by the cell containing its centre."""
    grid = DetectionGrid.empty(shape, g, anchor)
    ni, nj = grid.shape
    for det in dets:
        i, j = cell_of(det.box[0], det.box[1], g)
        if not (1 <= i <= ni and 1 <= j <= nj):
            raise ValueError(f"box centre {det.box[:2]} lies outside the grid")
        if grid.c[i - 1, j - 1]:
            raise ValueError(f"two boxes share cell ({i}, {j})")
        grid.c[i - 1, j - 1] = 1.0
        grid.b[i - 1, j - 1] = encode_box(det.box, (i, j), g, anchor)
        grid.p[i - 1, j - 1] = np.eye(N_CLASSES)[det.class_id - 1]
    return grid


def nms(boxes, scores, order_keys, iou_thresh):
    """Greedy NMS; candidates are visited in ``order_keys`` order. Returns kept positions."""
    order = sorted(range(len(boxes)), key=lambda k: order_keys[k])
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    overlaps = iou_matrix(boxes, boxes)
    kept = []
    suppressed = np.zeros(len(boxes), bool)
    for k in order:
        if suppressed[k]:
            continue
        kept.append(k)
        suppressed |= overlaps[k] > iou_thresh
    return kept


def select_detections(grid, score_thresh=0.5, iou_thresh=0.6):
    """Score filter then class-agnostic greedy NMS.

    Candidates are ranked by score, ties broken row-major over the map
    (smaller ``j`` first, then smaller ``i``).
    """
    for name, v in (("score_thresh", score_thresh), ("iou_thresh", iou_thresh)):
        if not 0 <= v <= 1:
            raise ValueError(f"{name} must lie in [0, 1]")
    scores = grid.scores()
    idx = np.argwhere(scores >= score_thresh)
    if len(idx) == 0:
        return []
    boxes = grid.decoded_boxes()[idx[:, 0], idx[:, 1]]
    sc = scores[idx[:, 0], idx[:, 1]]
    keys = [(-sc[k], idx[k, 1], idx[k, 0]) for k in range(len(idx))]
    out = []
    for k in nms(boxes, sc, keys, iou_thresh):
        i, j = idx[k]
        out.append(
            Detection(
                tuple(float(v) for v in boxes[k]),
                float(sc[k]),
                int(np.argmax(grid.p[i, j])) + 1,
                (int(i) + 1, int(j) + 1),
            )
        )
    return out


def select_from_list(dets, score_thresh=0.5, iou_thresh=0.6):
    """Score filter and NMS for providers that answer with a detection list.

    Ties in score keep the input order.
    """
    dets = [d for d in dets if d.score >= score_thresh]
    if not dets:
        return []
    keys = [(-d.score, k) for k, d in enumerate(dets)]
    kept = nms([d.box for d in dets], [d.score for d in dets], keys, iou_thresh)
    return [dets[k] for k in kept]


def _cross_entropy(p_true, p_pred, eps):
    return -np.sum(p_true * np.log(np.maximum(p_pred, eps)), axis=-1)


def detection_loss(pred, truth, lambda1=0.1, lambda2=5.0, eps=EPS):
    """Multi-task detection loss for one sample."""
    if pred.shape != truth.shape:
        raise ValueError(f"grid shapes differ: {pred.shape} vs {truth.shape}")
    if not np.isin(truth.c, (0.0, 1.0)).all():
        raise ValueError("truth confidences must be 0 or 1")
    pos = truth.c == 1
    neg = ~pos
    conf = np.sum((1 - pred.c[pos]) ** 2) + lambda1 * np.sum(pred.c[neg] ** 2)
    box = lambda2 * np.sum((truth.b[pos] - pred.b[pos]) ** 2)
    ce = np.sum(_cross_entropy(truth.p[pos], pred.p[pos], eps))
    return float(conf + box + ce)


def _mask_ce(pred, truth, eps):
    pred = np.asarray(pred.data if isinstance(pred, (Image2, Volume3)) else pred, dtype=np.float64)
    truth = np.asarray(truth.data if hasattr(truth, "data") else truth).astype(bool)
    if pred.shape != truth.shape:
        raise ValueError(f"dims differ: {pred.shape} vs {truth.shape}")
    if ((pred < 0) | (pred > 1)).any():
        raise ValueError("probabilities must lie in [0, 1]")
    hits = pred[truth]
    if (hits < eps).any():
        warnings.warn(
            f"{int((hits < eps).sum())} positive voxel(s) with probability below {eps:g}; log clamped",
            InfiniteLossWarning,
            stacklevel=3,
        )
    return float(-np.sum(np.log(np.maximum(hits, eps))) / pred.size)


def mask_ce_loss_2d(pred, truth, eps=EPS):
    """``-(1/M) sum_x Y(x) log f(x)`` over the ``M`` pixels of the crop."""
    return _mask_ce(pred, truth, eps)


def mask_ce_loss_3d(pred, truth, eps=EPS):
    """Voxel version of :func:`mask_ce_loss_2d`."""
    return _mask_ce(pred, truth, eps)


def validate_detection(d):
    """Parse one detection dict, enforcing every invariant."""
    if not isinstance(d, dict):
        raise SchemaError(f"detection must be an object, got {type(d).__name__}")
    try:
        box = tuple(float(v) for v in d["box"])
        score = float(d["score"])
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"malformed detection: {exc}") from exc
    if len(box) != 4 or not np.isfinite(box).all() or box[2] <= 0 or box[3] <= 0:
        raise SchemaError(f"invalid box {box}")
    if not 0 <= score <= 1:
        raise SchemaError(f"score {score} outside [0, 1]")
    if "class" in d:
        cid = class_id(d["class"])
    elif "class_id" in d:
        cid = int(d["class_id"])
    else:
        raise SchemaError("detection has no class")
    if not 1 <= cid <= N_CLASSES:
        raise SchemaError(f"class id {cid} out of range")
    if "p" in d:
        p = np.asarray(d["p"], dtype=np.float64)
        if p.shape != (N_CLASSES,) or (p < 0).any() or abs(p.sum() - 1) > 1e-6:
            raise SchemaError(f"class probabilities {p.tolist()} are not a distribution")
        if "c" in d and abs(float(d["c"]) * p.max() - score) > 1e-6:
            raise SchemaError("score differs from c * max(p)")
    cell = d.get("cell")
    cell = tuple(int(v) for v in cell) if cell is not None else None
    return Detection(box, score, cid, cell)


def parse_detections(obj):
    """Detection list from JSON: either a list of detections or a grid object."""
    if isinstance(obj, dict) and "c" in obj:
        return DetectionGrid.from_dict(obj)
    if isinstance(obj, dict) and "detections" in obj:
        obj = obj["detections"]
    if not isinstance(obj, list):
        raise SchemaError("expected a list of detections")
    return [validate_detection(d) for d in obj]


def save_detections(dets, path):
    write_json(path, [d.to_dict() for d in dets])


def load_detections(path):
    with open(path) as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}: invalid JSON ({exc})") from exc
    return parse_detections(obj)
