"""Training losses: focal loss reweighted per (slot, class) by the penalty actuator.

The actuator is built from three statistics of the matched ("optimal")
slots: object-perception confidence from the matching cost, relatedness of
the slot's object to each column's verb, and the gap between a negative
class probability and the mean positive probability. All three are
constants of the forward pass, so the actuator itself carries no gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import numerics as nx
from .boxes import cxcywh_to_xyxy, tensor_giou
from .matching import MatchResult, PairTarget
from .numerics import Tensor


class TargetError(ValueError):
    pass


@dataclass
class LossConfig:
    lambda_b: float = 2.5
    lambda_u: float = 1.0
    lambda_o: float = 1.0
    lambda_c: float = 1.0  # matching cost only
    alpha: float = 0.25
    gamma: float = 2.0
    kappa: float = 2.0
    eps1: float = 1e-14
    eps2: float = 1e-7
    noobj_weight: float = 0.1
    use_beta: bool = True
    use_delta: bool = True
    use_zeta: bool = True
    omega_one: bool = False  # plain focal loss baseline


@dataclass
class OrdisFactors:
    beta: np.ndarray  # N_q
    delta: np.ndarray  # N_q x S
    zeta: np.ndarray  # N_q x S
    omega: np.ndarray  # N_q x S


def focal_loss(logits, targets, alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """Per-entry sigmoid focal loss, evaluated through log-sigmoids."""
    x = nx.as_tensor(logits)
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != x.shape:
        raise TargetError(f"targets {t.shape} vs logits {x.shape}")
    log_p = nx.log_sigmoid(x)
    log_q = nx.log_sigmoid(nx.neg(x))
    pos = nx.exp(nx.scale(log_q, gamma)) * log_p
    neg = nx.exp(nx.scale(log_p, gamma)) * log_q
    return nx.neg(nx.scale(pos * Tensor(t), alpha) + nx.scale(neg * Tensor(1.0 - t), 1.0 - alpha))


def beta_factor(match: MatchResult, n_slots: int, kappa: float = 2.0, eps1: float = 1e-14) -> np.ndarray:
    """log(1 + (eta + eps1)^-kappa) on matched slots, 0 elsewhere.

    Negative costs are clamped to 0 first, which caps the factor at
    log(1 + eps1^-kappa).
    """
    beta = np.zeros(n_slots)
    for (s, _), eta in zip(match.pairs, match.slot_cost):
        beta[s] = np.log1p((max(eta, 0.0) + eps1) ** (-kappa))
    return beta


def delta_factor(match: MatchResult, targets: list[PairTarget], over, taxonomy,
                 columns: list[int], seen, n_slots: int) -> np.ndarray:
    """Relatedness of each matched slot's object to the verb of every column.

    Every column of an optimal slot is scored against that slot's matched
    object. Zero where (verb, object) is not a seen class and on unmatched
    slots.
    """
    over = np.asarray(over, dtype=np.float64)
    seen = set(seen)
    out = np.zeros((n_slots, len(columns)))
    verbs = [taxonomy.action_of(c) for c in columns]
    for s, g in match.pairs:
        o = targets[g].obj
        for j, a in enumerate(verbs):
            y = taxonomy.class_of(a, o)
            if y is not None and y in seen:
                out[s, j] = over[o, a]
    return out


def zeta_factor(probs, targets, optimal) -> np.ndarray:
    """Negative-class probability minus the mean positive probability, per slot.

    Zero on positive columns and on non-optimal slots.
    """
    probs = np.asarray(probs, dtype=np.float64)
    t = np.asarray(targets, dtype=bool)
    opt = np.asarray(optimal, dtype=bool)
    zeta = np.zeros_like(probs)
    for s in np.flatnonzero(opt):
        pos = t[s]
        if not pos.any():
            raise TargetError(f"optimal slot {s} has no positive class")
        zeta[s] = np.where(pos, 0.0, probs[s] - probs[s, pos].mean())
    return zeta


def penalty_actuator(beta, delta, zeta, eps2: float = 1e-7) -> np.ndarray:
    """Omega = sigmoid(beta * zeta / (2 + delta + eps2)), elementwise.

    A 1-D ``beta`` is read as per-slot and spread across the class columns.
    """
    beta = np.asarray(beta, dtype=np.float64)
    if beta.ndim == 1:
        beta = beta[:, None]
    return expit(beta * np.asarray(zeta, dtype=np.float64) / (2.0 + np.asarray(delta, dtype=np.float64) + eps2))


def ordis_factors(hoi_logits, match: MatchResult, targets: list[PairTarget], over, taxonomy,
                  columns: list[int], seen, cfg: LossConfig) -> tuple[OrdisFactors, np.ndarray]:
    """All actuator inputs for one scene, plus the multi-hot target matrix."""
    logits = np.asarray(hoi_logits, dtype=np.float64)
    nq, width = logits.shape
    col_of = {c: j for j, c in enumerate(columns)}
    tmat = np.zeros((nq, width))
    optimal = np.zeros(nq, dtype=bool)
    for s, g in match.pairs:
        optimal[s] = True
        for c in targets[g].classes:
            tmat[s, col_of[c]] = 1.0
    beta = beta_factor(match, nq, cfg.kappa, cfg.eps1) if cfg.use_beta else np.zeros(nq)
    delta = (delta_factor(match, targets, over, taxonomy, columns, seen, nq)
             if cfg.use_delta else np.zeros((nq, width)))
    zeta = zeta_factor(expit(logits), tmat, optimal) if cfg.use_zeta else np.zeros((nq, width))
    omega = np.ones((nq, width)) if cfg.omega_one else penalty_actuator(beta, delta, zeta, cfg.eps2)
    return OrdisFactors(beta, delta, zeta, omega), tmat


def ordis_loss(focal, omega, normalizer: float = 1.0) -> Tensor:
    """Sum of actuator-weighted focal terms divided by ``normalizer``."""
    f = nx.as_tensor(focal)
    return nx.scale(nx.sum_(f * Tensor(np.asarray(omega, dtype=np.float64))), 1.0 / normalizer)


def box_losses(pred_boxes: Tensor, gt_boxes) -> tuple[Tensor, Tensor]:
    """Summed L1 (over coordinates) and summed 1 - GIoU over K matched boxes."""
    gt = np.asarray(gt_boxes, dtype=np.float64)
    l1 = nx.sum_(nx.abs_(pred_boxes - Tensor(gt)))
    giou = tensor_giou(pred_boxes, cxcywh_to_xyxy(gt))
    return l1, nx.sum_(nx.add_scalar(nx.neg(giou), 1.0))


@dataclass
class SceneTerms:
    """Unnormalised loss sums for one scene; batches normalise jointly."""

    l1: Tensor
    giou: Tensor
    n_boxes: int
    ce: Tensor
    ce_weight: float
    ordis: Tensor
    n_interactions: int


def scene_terms(preds, targets: list[PairTarget], match: MatchResult, n_objects: int,
                omega: np.ndarray, tmat: np.ndarray, cfg: LossConfig) -> SceneTerms:
    """Loss sums for one scene under a fixed match and a fixed actuator."""
    if not match.pairs:
        raise TargetError("scene has no matched ground truth")
    nq = preds.hoi_logits.shape[0]
    slots = [s for s, _ in match.pairs]
    gts = [g for _, g in match.pairs]
    idx = np.array(slots)
    hb = nx.take(preds.human_box, idx)
    ob = nx.take(preds.object_box, idx)
    l1_h, gu_h = box_losses(hb, [targets[g].human_box for g in gts])
    l1_o, gu_o = box_losses(ob, [targets[g].object_box for g in gts])

    labels = np.full(nq, n_objects)
    weights = np.full(nq, cfg.noobj_weight)
    for s, g in match.pairs:
        labels[s] = targets[g].obj
        weights[s] = 1.0
    logp = nx.log_softmax_axis(preds.obj_logits, axis=1)
    picked = nx.take(logp, (np.arange(nq), labels))
    ce = nx.neg(nx.sum_(picked * Tensor(weights)))

    focal = focal_loss(preds.hoi_logits, tmat, cfg.alpha, cfg.gamma)
    ordis = nx.sum_(focal * Tensor(np.asarray(omega, dtype=np.float64)))
    n_int = int(sum(len(targets[g].classes) for g in gts))
    return SceneTerms(l1_h + l1_o, gu_h + gu_o, 2 * len(slots), ce, float(weights.sum()),
                      ordis, n_int)


def combine(terms: list[SceneTerms], cfg: LossConfig) -> tuple[Tensor, dict[str, float]]:
    """Batch loss: L1 and GIoU averaged over boxes, weighted CE, ORDis per interaction."""
    nb = sum(t.n_boxes for t in terms)
    wsum = sum(t.ce_weight for t in terms)
    ni = sum(t.n_interactions for t in terms)
    l_b = nx.scale(_total([t.l1 for t in terms]), 1.0 / nb)
    l_u = nx.scale(_total([t.giou for t in terms]), 1.0 / nb)
    l_o = nx.scale(_total([t.ce for t in terms]), 1.0 / wsum)
    l_h = nx.scale(_total([t.ordis for t in terms]), 1.0 / ni)
    total = (nx.scale(l_b, cfg.lambda_b) + nx.scale(l_u, cfg.lambda_u)
             + nx.scale(l_o, cfg.lambda_o) + l_h)
    parts = {"loss": total.item(), "L_b": l_b.item(), "L_u": l_u.item(),
             "L_o": l_o.item(), "L_ordis": l_h.item()}
    return total, parts


def _total(xs: list[Tensor]) -> Tensor:
    out = xs[0]
    for x in xs[1:]:
        out = out + x
    return out
