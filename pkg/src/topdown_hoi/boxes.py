"""Box conversions, IoU and generalised IoU.

Boxes travel as normalised (cx, cy, w, h); overlap measures work on
(x0, y0, x1, y1). Plain-numpy versions serve matching and evaluation,
the tensor versions feed the differentiable losses.
"""

from __future__ import annotations

import numpy as np

from . import numerics as nx
from .numerics import Tensor


def cxcywh_to_xyxy(b) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    cx, cy, w, h = np.moveaxis(b, -1, 0)
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)


def xyxy_to_cxcywh(b) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    x0, y0, x1, y1 = np.moveaxis(b, -1, 0)
    return np.stack([(x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0], axis=-1)


def _area(b: np.ndarray) -> np.ndarray:
    return np.clip(b[..., 2] - b[..., 0], 0, None) * np.clip(b[..., 3] - b[..., 1], 0, None)


def iou_giou_xyxy(a, b) -> tuple[np.ndarray, np.ndarray]:
    """Elementwise IoU and GIoU of broadcastable xyxy box arrays."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    lt = np.maximum(a[..., :2], b[..., :2])
    rb = np.minimum(a[..., 2:], b[..., 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = _area(a) + _area(b) - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)
        elt = np.minimum(a[..., :2], b[..., :2])
        erb = np.maximum(a[..., 2:], b[..., 2:])
        ewh = np.clip(erb - elt, 0, None)
        encl = ewh[..., 0] * ewh[..., 1]
        giou = np.where(encl > 0, iou - (encl - union) / np.where(encl > 0, encl, 1), iou)
    return iou, giou


def iou(a, b) -> float:
    """IoU of two (cx, cy, w, h) boxes."""
    return float(iou_giou_xyxy(cxcywh_to_xyxy(a), cxcywh_to_xyxy(b))[0])


def giou(a, b) -> float:
    """Generalised IoU of two (cx, cy, w, h) boxes, in (-1, 1]."""
    return float(iou_giou_xyxy(cxcywh_to_xyxy(a), cxcywh_to_xyxy(b))[1])


def pairwise_l1_giou(pred: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """P x G matrices of L1 distance (cxcywh) and GIoU between box sets."""
    l1 = np.abs(pred[:, None, :] - gt[None, :, :]).sum(-1)
    _, g = iou_giou_xyxy(cxcywh_to_xyxy(pred)[:, None, :], cxcywh_to_xyxy(gt)[None, :, :])
    return l1, g


def tensor_xyxy(b: Tensor) -> Tensor:
    """cxcywh -> xyxy for a K x 4 tensor."""
    cx, cy, w, h = (nx.take(b, (slice(None), i)) for i in range(4))
    hw, hh = nx.scale(w, 0.5), nx.scale(h, 0.5)
    return nx.stack([cx - hw, cy - hh, cx + hw, cy + hh], axis=1)


def tensor_giou(pred: Tensor, gt_xyxy: np.ndarray) -> Tensor:
    """Rowwise GIoU between predicted K x 4 cxcywh boxes and fixed xyxy boxes."""
    p = tensor_xyxy(pred)
    g = Tensor(np.asarray(gt_xyxy, dtype=np.float64))
    col = lambda t, i: nx.take(t, (slice(None), i))  # noqa: E731
    px0, py0, px1, py1 = (col(p, i) for i in range(4))
    gx0, gy0, gx1, gy1 = (col(g, i) for i in range(4))
    iw = nx.relu(nx.minimum(px1, gx1) - nx.maximum(px0, gx0))
    ih = nx.relu(nx.minimum(py1, gy1) - nx.maximum(py0, gy0))
    inter = iw * ih
    area_p = nx.relu(px1 - px0) * nx.relu(py1 - py0)
    area_g = (gx1 - gx0) * (gy1 - gy0)
    union = area_p + area_g - inter
    ew = nx.maximum(px1, gx1) - nx.minimum(px0, gx0)
    eh = nx.maximum(py1, gy1) - nx.minimum(py0, gy0)
    encl = ew * eh
    return nx.div(inter, union) - nx.div(encl - union, encl)
