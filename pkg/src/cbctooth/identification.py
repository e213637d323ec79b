"""FDI numbering of classified detections within one jaw panorama.

Detections are ordered along the arch (increasing ``s``).  The midline sits
between the second and third of four consecutive incisors; on each side teeth
are numbered from the midline outward per class: incisors 1-2, canine 3,
premolars 4-5, molars 6-8.  Patient-left is at higher ``s``.
"""

import json
import warnings
from dataclasses import dataclass

import numpy as np

from .detection import Detection, class_id, class_name, validate_detection
from .exceptions import CapacityWarning, SchemaError, SequenceAnomalyWarning
from .volume import write_json

FIRST_NUMBER = {1: 1, 2: 3, 3: 4, 4: 6}
CAPACITY = {1: 2, 2: 1, 3: 2, 4: 3}
QUADRANTS = {("upper", "right"): 1, ("upper", "left"): 2, ("lower", "left"): 3, ("lower", "right"): 4}


def class_of_number(number):
    for cid in (4, 3, 2, 1):
        if number >= FIRST_NUMBER[cid]:
            return cid
    raise ValueError(f"invalid tooth number {number}")


@dataclass(frozen=True)
class ToothID:
    jaw: str
    quadrant: int
    number: int = None
    class_id: int = None

    def __post_init__(self):
        if self.jaw not in ("upper", "lower"):
            raise ValueError(f"jaw must be upper or lower, got {self.jaw!r}")
        if (self.quadrant in (1, 2)) != (self.jaw == "upper") or self.quadrant not in (1, 2, 3, 4):
            raise ValueError(f"quadrant {self.quadrant} does not belong to the {self.jaw} jaw")
        if self.number is not None:
            if not 1 <= self.number <= 8:
                raise ValueError(f"tooth number {self.number} outside 1..8")
            if self.class_id is not None and class_of_number(self.number) != self.class_id:
                raise ValueError(f"number {self.number} is not a {class_name(self.class_id)}")

    @property
    def fdi(self):
        return None if self.number is None else 10 * self.quadrant + self.number

    @classmethod
    def from_fdi(cls, fdi):
        q, n = divmod(int(fdi), 10)
        return cls("upper" if q in (1, 2) else "lower", q, n, class_of_number(n))


@dataclass(frozen=True)
class IdentifiedTooth:
    detection: Detection
    id: ToothID

    @property
    def fdi(self):
        return self.id.fdi

    @property
    def class_id(self):
        return self.detection.class_id

    def to_dict(self):
        d = {"fdi": self.fdi, "class": self.detection.class_name, "box": [float(v) for v in self.detection.box]}
        d.update(score=float(self.detection.score), jaw=self.id.jaw, quadrant=self.id.quadrant)
        return d

    @classmethod
    def from_dict(cls, d):
        det = validate_detection({"score": 1.0, **d})
        fdi = d.get("fdi")
        if fdi is not None:
            tid = ToothID.from_fdi(fdi)
            if tid.class_id != det.class_id:
                raise SchemaError(f"FDI {fdi} is not a {det.class_name}")
        else:
            tid = ToothID(d["jaw"], int(d["quadrant"]), None, det.class_id)
        return cls(det, tid)


def incisor_runs(classes):
    """``(start, length)`` of every maximal run of consecutive incisors."""
    runs, start = [], None
    for k, c in enumerate(list(classes) + [0]):
        if c == 1 and start is None:
            start = k
        elif c != 1 and start is not None:
            runs.append((start, k - start))
            start = None
    return runs


def _sorted(dets):
    order = sorted(range(len(dets)), key=lambda k: (dets[k].box[0], dets[k].box[1], k))
    return order, [dets[k] for k in order]


def find_split(dets, midline=None):
    """Quadrant split position along ``s`` and whether four incisors anchored it.

    Without a run of exactly four incisors the split falls back to the midpoint
    of the detections' ``s`` range, or to ``midline`` when that range is a
    single point.
    """
    _, ordered = _sorted(dets)
    classes = [d.class_id for d in ordered]
    s = np.array([d.box[0] for d in ordered])
    fours = [start for start, n in incisor_runs(classes) if n == 4]
    if len(fours) == 1:
        a = fours[0]
        return (s[a + 1] + s[a + 2]) / 2, True
    if len(s) >= 2 and s[-1] > s[0]:
        return (s[0] + s[-1]) / 2, False
    if midline is None:
        raise ValueError("cannot place the midline from a single position; pass midline")
    return float(midline), False


def _sides(dets, split, jaw, flip):
    """Per side, input indices ordered from the midline outward."""
    out = {"right": [], "left": []}
    for k, d in enumerate(dets):
        side = "right" if d.box[0] < split else "left"
        if flip:
            side = "left" if side == "right" else "right"
        out[side].append(k)
    for side, idx in out.items():
        idx.sort(key=lambda k: (abs(dets[k].box[0] - split), k))
    return out


def _sequence_anomalies(dets, outward):
    bad = []
    for idx in outward.values():
        top = 0
        for k in idx:
            c = dets[k].class_id
            if c < top:
                bad.append(k)
            top = max(top, c)
    return sorted(bad)


def _number(dets, jaw, midline, flip, molar_capacity, gaps):
    if jaw not in ("upper", "lower"):
        raise ValueError(f"jaw must be upper or lower, got {jaw!r}")
    dets = list(dets)
    if not dets:
        return []
    split, anchored = find_split(dets, midline)
    outward = _sides(dets, split, jaw, flip)
    bad = _sequence_anomalies(dets, outward)
    if bad:
        warnings.warn(
            SequenceAnomalyWarning(f"{jaw} jaw: class order breaks at detection(s) {bad}", bad), stacklevel=3
        )
    capacity = {**CAPACITY, 4: int(molar_capacity)}
    numbers = [None] * len(dets)
    quadrant = [None] * len(dets)
    for side, idx in outward.items():
        q = QUADRANTS[(jaw, side)]
        for cid in (1, 2, 3, 4):
            group = [k for k in idx if dets[k].class_id == cid]
            for k in group:
                quadrant[k] = q
            if gaps:
                full = len(group) == capacity[cid] or (cid == 2 and len(group) == 1)
                if not full or (cid == 1 and not anchored):
                    continue
            for rank, k in enumerate(group):
                if rank >= capacity[cid]:
                    warnings.warn(
                        CapacityWarning(f"quadrant {q}: more than {capacity[cid]} {class_name(cid)}s detected"),
                        stacklevel=3,
                    )
                    break
                numbers[k] = FIRST_NUMBER[cid] + rank
    out = [IdentifiedTooth(d, ToothID(jaw, quadrant[k], numbers[k], d.class_id)) for k, d in enumerate(dets)]
    order, _ = _sorted(dets)
    return [out[k] for k in order]


def identify(dets, jaw, midline=None, flip=False, molar_capacity=3):
    """Number every detection; teeth beyond a class's FDI capacity get ``None``.

    Output is ordered by ``s``, so it does not depend on input order.
    """
    return _number(dets, jaw, midline, flip, molar_capacity, gaps=False)


def identify_with_gaps(dets, jaw, midline=None, flip=False, molar_capacity=3):
    """Like :func:`identify`, but a class group is numbered only when complete.

    A quadrant's incisors, premolars or molars get numbers only if the
    quadrant holds exactly that class's full complement (and, for incisors,
    the midline came from four consecutive incisors); otherwise the teeth keep
    their class with ``number=None``.  A lone canine is always number 3.
    """
    return _number(dets, jaw, midline, flip, molar_capacity, gaps=True)


def save_identification(teeth, path):
    write_json(path, [t.to_dict() for t in teeth])


def load_identification(path):
    with open(path) as fh:
        obj = json.load(fh)
    if not isinstance(obj, list):
        raise SchemaError("identification JSON must be a list")
    return [IdentifiedTooth.from_dict(d) for d in obj]


__all__ = [
    "IdentifiedTooth",
    "ToothID",
    "class_id",
    "find_split",
    "identify",
    "identify_with_gaps",
    "incisor_runs",
]
