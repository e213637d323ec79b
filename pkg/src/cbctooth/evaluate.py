"""Scoring a pipeline manifest against a ground-truth manifest.

Both manifests look like::

    {"spacing_mm": [...], "teeth": [{"name": ..., "fdi": 11 | null, "class": "incisor",
      "jaw": "upper", "box": [s, z, w, h], "score": 1.0, "mask": "teeth/11_mask.raw"}]}

``mask`` paths are relative to the manifest and point at cropped raw masks
whose sidecar carries ``origin_voxel``.  Predictions are matched to truths by
3D mask IoU when both sides have masks, otherwise by panorama box IoU within
the same jaw.  A match counts as a correct identification when the FDI codes
agree.
"""

import json
import os

import numpy as np

from . import metrics
from .detection import iou
from .exceptions import SchemaError
from .volume import load_array


def load_manifest(path):
    try:
        with open(path) as fh:
            obj = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise SchemaError(f"cannot read manifest {path}: {exc}", stage="evaluate") from exc
    if not isinstance(obj, dict) or not isinstance(obj.get("teeth"), list):
        raise SchemaError(f"{path}: manifest needs a 'teeth' list", stage="evaluate")
    base = os.path.dirname(os.path.abspath(path))
    for k, t in enumerate(obj["teeth"]):
        if not isinstance(t, dict) or "class" not in t:
            raise SchemaError(f"{path}: tooth {k} lacks a class", stage="evaluate")
        if t.get("mask"):
            data, meta = load_array(os.path.join(base, t["mask"]))
            t["_mask"] = (tuple(meta.get("origin_voxel", (0, 0, 0))), data.astype(bool))
            obj.setdefault("spacing_mm", meta["spacing_mm"])
    return obj


def _mask_iou(a, b):
    (oa, ma), (ob, mb) = a, b
    lo = np.maximum(oa, ob)
    hi = np.minimum(np.add(oa, ma.shape), np.add(ob, mb.shape))
    if (hi <= lo).any():
        return 0.0
    sa = tuple(slice(l - o, h - o) for l, h, o in zip(lo, hi, oa))
    sb = tuple(slice(l - o, h - o) for l, h, o in zip(lo, hi, ob))
    inter = np.count_nonzero(ma[sa] & mb[sb])
    union = np.count_nonzero(ma) + np.count_nonzero(mb) - inter
    return inter / union if union else 0.0


def _joint(a, b):
    """Both cropped masks placed on their joint bounding box."""
    (oa, ma), (ob, mb) = a, b
    lo = np.minimum(oa, ob)
    hi = np.maximum(np.add(oa, ma.shape), np.add(ob, mb.shape))
    out = []
    for o, m in ((oa, ma), (ob, mb)):
        full = np.zeros(tuple(hi - lo), bool)
        full[tuple(slice(a - l, a - l + n) for a, l, n in zip(o, lo, m.shape))] = m
        out.append(full)
    return out


def similarity(pred, truth):
    use_masks = all("_mask" in t for t in pred) and all("_mask" in t for t in truth) and pred and truth
    sim = np.zeros((len(pred), len(truth)))
    for i, p in enumerate(pred):
        for j, t in enumerate(truth):
            if use_masks:
                sim[i, j] = _mask_iou(p["_mask"], t["_mask"])
            elif "box" in p and "box" in t and p.get("jaw") == t.get("jaw"):
                sim[i, j] = iou(p["box"], t["box"])
    return sim, bool(use_masks)


def evaluate(pred, truth, iou_thresh=0.5):
    """Metrics dict for two loaded manifests (see :func:`load_manifest`)."""
    pt, tt = pred["teeth"], truth["teeth"]
    scores = [float(t.get("score", 1.0)) for t in pt]
    sim, by_mask = similarity(pt, tt)
    matches = metrics.greedy_match(sim, scores, iou_thresh) if pt and tt else {}
    correct = [p for p, t in matches.items() if pt[p].get("fdi") is not None and pt[p].get("fdi") == tt[t].get("fdi")]
    precision, recall, f1 = metrics.precision_recall_f1(len(correct), len(pt), len(tt))
    is_tp = np.zeros(len(pt), bool)
    is_tp[list(matches)] = True
    ap = metrics.average_precision(scores, is_tp, len(tt))
    spacing = truth.get("spacing_mm") or pred.get("spacing_mm") or [1.0, 1.0, 1.0]
    per_tooth, dices, hds, assds = [], [], [], []
    for p, t in sorted(matches.items(), key=lambda kv: str(tt[kv[1]].get("name", kv[1]))):
        entry = {"pred": pt[p].get("name"), "truth": tt[t].get("name"), "fdi_pred": pt[p].get("fdi"),
                 "fdi_truth": tt[t].get("fdi"), "iou": float(sim[p, t])}
        if "_mask" in pt[p] and "_mask" in tt[t]:
            a, b = _joint(pt[p]["_mask"], tt[t]["_mask"])
            entry.update(dice=metrics.dice(a, b), hd_mm=metrics.hausdorff(a, b, spacing),
                         assd_mm=metrics.assd(a, b, spacing))
            dices.append(entry["dice"])
            hds.append(entry["hd_mm"])
            assds.append(entry["assd_mm"])
        per_tooth.append(entry)

    def mean(v):
        return float(np.mean(v)) if v else None

    return {
        "precision": precision,
        "recall": recall,
        "f1": f1,
        "AP": ap,
        "dice": mean(dices),
        "hd_mm": mean(hds),
        "assd_mm": mean(assds),
        "hd_mm_max": float(max(hds)) if hds else None,
        "n_pred": len(pt),
        "n_truth": len(tt),
        "n_matched": len(matches),
        "matched_by": "mask" if by_mask else "box",
        "per_tooth": per_tooth,
    }


def evaluate_files(pred_path, truth_path, iou_thresh=0.5):
    return evaluate(load_manifest(pred_path), load_manifest(truth_path), iou_thresh)
