"""HOI detection mAP over seen, unseen and all classes."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .boxes import iou

IOU_THRESHOLD = 0.5


@dataclass
class EvalReport:
    per_class_ap: dict[int, float | None]  # None: class has no ground truth
    map_seen: float | None
    map_unseen: float | None
    map_full: float | None

    def to_json(self) -> dict:
        return {"per_class_ap": {str(c): ap for c, ap in sorted(self.per_class_ap.items())},
                "map_seen": self.map_seen, "map_unseen": self.map_unseen,
                "map_full": self.map_full}

    @classmethod
    def from_json(cls, d: dict) -> "EvalReport":
        return cls({int(c): ap for c, ap in d["per_class_ap"].items()},
                   d["map_seen"], d["map_unseen"], d["map_full"])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n")


def average_precision(tp: np.ndarray, n_pos: int) -> float:
    """All-point interpolated AP of a ranked TP/FP sequence."""
    if n_pos == 0:
        raise ValueError("AP undefined without ground truth")
    tp = np.asarray(tp, dtype=np.float64)
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_pos
    precision = ctp / np.arange(1, tp.size + 1)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def _box_key(det) -> tuple:
    return tuple(float(v) for v in det.human_box) + tuple(float(v) for v in det.object_box)


def class_tp(dets: list[tuple[int, object]], gts_by_scene: dict[int, list]) -> np.ndarray:
    """TP flags for one class's detections, greedily matched in rank order.

    ``dets`` holds (scene index, detection); ``gts_by_scene`` maps a scene to
    that class's ground truths. Each ground truth is consumed at most once;
    a detection claims the unconsumed ground truth maximising the weaker of
    its two IoUs.
    """
    order = sorted(range(len(dets)),
                   key=lambda i: (-dets[i][1].score, dets[i][0], _box_key(dets[i][1])))
    used = {s: [False] * len(g) for s, g in gts_by_scene.items()}
    tp = np.zeros(len(dets))
    for rank, i in enumerate(order):
        s, det = dets[i]
        best, best_j = -1.0, -1
        for j, g in enumerate(gts_by_scene.get(s, [])):
            if used[s][j]:
                continue
            q = min(iou(det.human_box, g.human_box), iou(det.object_box, g.object_box))
            if q >= IOU_THRESHOLD and q > best:
                best, best_j = q, j
        if best_j >= 0:
            used[s][best_j] = True
            tp[rank] = 1.0
    return tp


def _mean(values: list[float]) -> float | None:
    return math.fsum(values) / len(values) if values else None


def hoi_map(detections: list[list], ground_truths: list[list], n_classes: int,
            unseen=()) -> EvalReport:
    """Per-class AP plus seen/unseen/full means.

    ``detections[k]`` and ``ground_truths[k]`` belong to scene k. Classes
    without ground truth are reported as None and left out of every mean.
    """
    if len(detections) != len(ground_truths):
        raise ValueError(f"{len(detections)} detection lists for {len(ground_truths)} scenes")
    unseen = set(int(c) for c in unseen)
    dets_by_class: dict[int, list] = {c: [] for c in range(n_classes)}
    gts_by_class: dict[int, dict[int, list]] = {c: {} for c in range(n_classes)}
    for s, ds in enumerate(detections):
        for det in ds:
            dets_by_class[int(det.hoi_class)].append((s, det))
    for s, gs in enumerate(ground_truths):
        for g in gs:
            gts_by_class[int(g.hoi_class)].setdefault(s, []).append(g)
    ap: dict[int, float | None] = {}
    for c in range(n_classes):
        n_pos = sum(len(v) for v in gts_by_class[c].values())
        ap[c] = None if n_pos == 0 else average_precision(class_tp(dets_by_class[c], gts_by_class[c]), n_pos)
    valid = [c for c in range(n_classes) if ap[c] is not None]
    return EvalReport(ap,
                      _mean([ap[c] for c in valid if c not in unseen]),
                      _mean([ap[c] for c in valid if c in unseen]),
                      _mean([ap[c] for c in valid]))
