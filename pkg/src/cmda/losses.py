"""Training objectives: cross-modal alignment, BEV entropy, domain, detection, total."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import ContractError, Tensor

SMOOTH_L1_BETA = 1.0 / 9.0


@dataclass
class LossWeights:
    det: float = 1.0
    cmki: float = 1.0
    cdan: float = 1.0
    d: float = 0.1
    ent: float = 0.01
    t_cmki: int = 1
    t_cdan: int = 0

    def __post_init__(self):
        for name in ("det", "cmki", "cdan", "d", "ent"):
            if getattr(self, name) < 0:
                raise ContractError(f"loss weight {name} must be nonnegative")
        if self.t_cmki not in (0, 1) or self.t_cdan not in (0, 1):
            raise ContractError("toggles must be 0 or 1")

    def for_stage(self, stage: str) -> "LossWeights":
        """Copy with the toggles forced to (1, 0) for pretraining, (0, 1) for self-training."""
        toggles = {"pretrain": (1, 0), "selftrain": (0, 1)}
        if stage not in toggles:
            raise ContractError(f"unknown stage {stage!r}")
        tc, td = toggles[stage]
        return LossWeights(self.det, self.cmki, self.cdan, self.d, self.ent, tc, td)


def cmki_loss(f_p, f_i, mask: np.ndarray | None = None) -> Tensor:
    """Mean over BEV cells of the per-cell L2 distance between channel vectors.

    ``mask`` (X, Y) optionally zeroes cells without image evidence; the
    normaliser stays X*Y.
    """
    f_p, f_i = dc.as_tensor(f_p), dc.as_tensor(f_i)
    if f_p.shape != f_i.shape or f_p.data.ndim != 3:
        raise ContractError(f"cmki_loss needs equal (X, Y, ZC) maps, got {f_p.shape} and {f_i.shape}")
    X, Y, _ = f_p.shape
    norms = dc.sqrt(dc.sum(dc.square(dc.sub(f_p, f_i)), axis=-1))
    if mask is not None:
        norms = dc.mul(norms, np.asarray(mask, dtype=np.float64))
    return dc.mul(dc.sum(norms), 1.0 / (X * Y))


def entropy_loss(f) -> Tensor:
    """Normalised BEV entropy of the per-cell softmax over the ZC channels, summed over cells."""
    f = dc.as_tensor(f)
    if f.data.ndim != 3:
        raise ContractError(f"entropy_loss expects (X, Y, ZC), got {f.shape}")
    zc = f.shape[-1]
    if zc < 2:
        raise ContractError("entropy_loss needs ZC >= 2 (log ZC would be 0)")
    p = dc.softmax(f)
    logp = dc.log_softmax(f)
    # p * log p -> 0 as p -> 0; log_softmax stays finite so no special case is needed
    return dc.mul(dc.sum(dc.mul(p, logp)), -1.0 / math.log(zc))


def entropy_of_distribution(p: np.ndarray) -> Tensor:
    """Same loss for maps that already hold per-cell distributions (0 log 0 := 0)."""
    p = np.asarray(p, dtype=np.float64)
    zc = p.shape[-1]
    if zc < 2:
        raise ContractError("entropy needs ZC >= 2")
    safe = np.where(p > 0, p, 1.0)
    return Tensor(-np.sum(np.where(p > 0, p * np.log(safe), 0.0)) / math.log(zc))


def domain_loss(logits, labels) -> tuple[Tensor, bool]:
    """Batch-mean categorical cross-entropy of the discriminator.

    Returns ``(loss, empty)``; an empty instance set yields a zero loss and
    ``empty=True`` (frames may contain no proposals).
    """
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size == 0:
        warnings.warn("domain_loss over an empty instance set; returning 0", RuntimeWarning, stacklevel=2)
        return Tensor(0.0), True
    logits = dc.as_tensor(logits)
    if logits.data.ndim != 2 or logits.shape[0] != labels.size:
        raise ContractError(f"domain_loss: logits {logits.shape} vs {labels.size} labels")
    onehot = np.eye(logits.shape[1])[labels]
    ce = dc.sum(dc.mul(dc.log_softmax(logits), onehot))
    return dc.mul(ce, -1.0 / labels.size), False


def smooth_l1(r, beta: float = SMOOTH_L1_BETA) -> Tensor:
    r = dc.as_tensor(r)
    a = np.abs(r.data)
    quad = dc.mul(dc.square(r), 0.5 / beta)
    lin = dc.sub(dc.abs_(r), 0.5 * beta)
    return dc.where(a < beta, quad, lin)


def bce_with_logits(logits, targets, pos_weight: float = 1.0) -> Tensor:
    """Mean binary cross-entropy over cells, from pre-sigmoid logits."""
    logits = dc.as_tensor(logits)
    t = np.asarray(targets, dtype=np.float64)
    # -[w t log s(z) + (1-t) log(1-s(z))] = w t softplus(-z) + (1-t) softplus(z)
    pos = dc.mul(dc.softplus(dc.neg(logits)), pos_weight * t)
    neg = dc.mul(dc.softplus(logits), 1.0 - t)
    return dc.mean(dc.add(pos, neg))


def det_loss(obj_logits, box_pred, targets, pos_weight: float = 1.0, reg_weight: float = 1.0,
             code_weights=None) -> Tensor:
    """Objectness BCE over all cells plus smooth-L1 box regression on positive cells.

    ``targets`` is an :class:`detect.AssignedTargets` (``objectness`` (X, Y)
    and ``pos_index``/``residuals`` for positive cells).  Regression is
    summed over the 8 residual channels and averaged over positives.
    ``code_weights`` (8,) optionally rescales individual channels.
    """
    cls = bce_with_logits(obj_logits, targets.objectness, pos_weight)
    n_pos = len(targets.pos_index)
    if n_pos == 0:
        return cls
    X, Y, R = box_pred.shape
    flat = dc.reshape(box_pred, (X * Y, R))
    picked = dc.take_rows(flat, targets.pos_index)
    diff = dc.sub(picked, targets.residuals)
    per = smooth_l1(diff)
    if code_weights is not None:
        per = dc.mul(per, np.asarray(code_weights, dtype=np.float64).reshape(1, R))
    reg = dc.mul(dc.sum(per), reg_weight / n_pos)
    return dc.add(cls, reg)


def total_loss(parts: dict, w: LossWeights) -> Tensor:
    """det*L_det + T_cmki*cmki*L_cmki + T_cdan*cdan*(d*L_d + ent*L_ent).

    Terms switched off by a toggle are not evaluated at all; missing parts
    count as zero.
    """
    if min(w.det, w.cmki, w.cdan, w.d, w.ent) < 0:
        raise ContractError("loss weights must be nonnegative")
    total = dc.mul(parts["det"], w.det) if "det" in parts else Tensor(0.0)
    if w.t_cmki and "cmki" in parts:
        total = dc.add(total, dc.mul(parts["cmki"], w.cmki))
    if w.t_cdan:
        cdan = Tensor(0.0)
        if "d" in parts:
            cdan = dc.add(cdan, dc.mul(parts["d"], w.d))
        if "ent" in parts:
            cdan = dc.add(cdan, dc.mul(parts["ent"], w.ent))
        total = dc.add(total, dc.mul(cdan, w.cdan))
    return total
