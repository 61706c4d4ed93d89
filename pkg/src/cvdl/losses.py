"""Defense training objective: task loss plus three regularizers.

All terms average over the supervised position set (labels != IGNORE_LABEL),
computed once per batch. Each loss has a matching analytic gradient with
respect to its direct inputs; training chains distribution-space gradients
through the softmax.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datagen import IGNORE_LABEL


def valid_mask(labels: np.ndarray) -> np.ndarray:
    return np.asarray(labels) != IGNORE_LABEL


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def task_loss(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean autoregressive cross-entropy over supervised positions."""
    labels = np.asarray(labels)
    mask = valid_mask(labels)
    n = int(mask.sum())
    if n == 0:
        raise ValueError("no supervised positions")
    logp = _log_softmax(np.asarray(logits))
    picked = np.take_along_axis(
        logp, np.where(mask, labels, 0)[..., None], axis=-1
    )[..., 0]
    return float(-(picked * mask).sum() / n)


def task_loss_grad(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """d task_loss / d logits (softmax fused)."""
    labels = np.asarray(labels)
    mask = valid_mask(labels)
    n = int(mask.sum())
    if n == 0:
        raise ValueError("no supervised positions")
    logp = _log_softmax(np.asarray(logits))
    p = np.exp(logp)
    grad = p.copy()
    safe = np.where(mask, labels, 0)
    rows = np.indices(labels.shape)
    grad[(*rows, safe)] -= 1.0
    grad *= mask[..., None]
    return grad / n


def patch_loss(feats: np.ndarray, feats_pert: np.ndarray) -> float:
    """Mean squared distance between paired view features."""
    feats, feats_pert = np.asarray(feats), np.asarray(feats_pert)
    if feats.shape != feats_pert.shape:
        raise ValueError("feature shape mismatch")
    diff = feats - feats_pert
    return float((diff * diff).sum() / feats.shape[0])


def patch_loss_grad(feats: np.ndarray, feats_pert: np.ndarray):
    if feats.shape != feats_pert.shape:
        raise ValueError("feature shape mismatch")
    g = 2.0 * (feats - feats_pert) / feats.shape[0]
    return g, -g


def _cosine_parts(p: np.ndarray, q: np.ndarray):
    dot = (p * q).sum(axis=-1)
    np_ = np.sqrt((p * p).sum(axis=-1))
    nq = np.sqrt((q * q).sum(axis=-1))
    return dot, np_, nq


def cv_dis_loss(dists: np.ndarray, dists_pert: np.ndarray, labels: np.ndarray) -> float:
    """Mean cosine similarity of paired token distributions over supervised positions."""
    mask = valid_mask(labels)
    n = int(mask.sum())
    if n == 0:
        raise ValueError("no supervised positions")
    dot, np_, nq = _cosine_parts(np.asarray(dists), np.asarray(dists_pert))
    if np.any((np_ == 0.0) & mask) or np.any((nq == 0.0) & mask):
        raise ValueError("zero-norm distribution")
    cos = np.where(mask, dot / np.where(mask, np_ * nq, 1.0), 0.0)
    return float(cos.sum() / n)


def cv_dis_loss_grad(dists: np.ndarray, dists_pert: np.ndarray, labels: np.ndarray):
    """Gradients with respect to both distribution arrays."""
    p, q = np.asarray(dists), np.asarray(dists_pert)
    mask = valid_mask(labels)
    n = int(mask.sum())
    if n == 0:
        raise ValueError("no supervised positions")
    dot, np_, nq = _cosine_parts(p, q)
    denom = np.where(mask, np_ * nq, 1.0)
    cos = dot / denom
    m = mask[..., None] / n
    dp = (q / denom[..., None] - (cos / np.where(mask, np_ * np_, 1.0))[..., None] * p) * m
    dq = (p / denom[..., None] - (cos / np.where(mask, nq * nq, 1.0))[..., None] * q) * m
    return dp, dq


def entropy(dist: np.ndarray) -> float:
    """Shannon entropy in nats, with 0*log 0 = 0."""
    p = np.asarray(dist, dtype=np.float64)
    terms = np.where(p > 0.0, p * np.log(np.where(p > 0.0, p, 1.0)), 0.0)
    return float(-terms.sum())


def _entropy_lastaxis(dists: np.ndarray) -> np.ndarray:
    p = np.asarray(dists)
    terms = np.where(p > 0.0, p * np.log(np.where(p > 0.0, p, 1.0)), 0.0)
    return -terms.sum(axis=-1)


def ent_loss(dists: np.ndarray, labels: np.ndarray, h0: float) -> float:
    """Hinge penalty max(0, H0 - H) averaged over supervised positions."""
    if h0 < 0:
        raise ValueError("entropy floor must be >= 0")
    mask = valid_mask(labels)
    n = int(mask.sum())
    if n == 0:
        raise ValueError("no supervised positions")
    h = _entropy_lastaxis(dists)
    return float((np.maximum(0.0, h0 - h) * mask).sum() / n)


def ent_loss_grad(dists: np.ndarray, labels: np.ndarray, h0: float) -> np.ndarray:
    """d ent_loss / d distributions; zero at the hinge kink (H == H0)."""
    p = np.asarray(dists)
    mask = valid_mask(labels)
    n = int(mask.sum())
    if n == 0:
        raise ValueError("no supervised positions")
    h = _entropy_lastaxis(p)
    active = (h < h0) & mask  # strict: kink subgradient is 0
    logp = np.log(np.where(p > 0.0, p, 1.0))
    # dH/dp = -(log p + 1); d max(0, H0 - H)/dp = log p + 1 where active
    grad = (logp + 1.0) * active[..., None]
    return grad / n


def probs_grad_to_logits(dists: np.ndarray, ddists: np.ndarray) -> np.ndarray:
    """Chain a distribution-space gradient through softmax to logits."""
    inner = (dists * ddists).sum(axis=-1, keepdims=True)
    return dists * (ddists - inner)


@dataclass(frozen=True)
class LossBreakdown:
    l_task: float
    l_patch: float
    l_cv_dis: float
    l_ent: float
    l_def: float
    lam1: float
    lam2: float
    lam3: float
    h0: float

    def as_dict(self) -> dict[str, float]:
        return {
            "l_task": self.l_task,
            "l_patch": self.l_patch,
            "l_cv_dis": self.l_cv_dis,
            "l_ent": self.l_ent,
            "l_def": self.l_def,
            "lam1": self.lam1,
            "lam2": self.lam2,
            "lam3": self.lam3,
            "h0": self.h0,
        }


def total_loss(
    l_task: float,
    l_patch: float,
    l_cv_dis: float,
    l_ent: float,
    lam1: float,
    lam2: float,
    lam3: float,
    h0: float = 0.0,
) -> LossBreakdown:
    """Weighted sum of the four objective components."""
    if lam1 < 0 or lam2 < 0 or lam3 < 0:
        raise ValueError("regularizer weights must be >= 0")
    l_def = l_task + lam1 * l_patch + lam2 * l_cv_dis + lam3 * l_ent
    return LossBreakdown(
        l_task=float(l_task),
        l_patch=float(l_patch),
        l_cv_dis=float(l_cv_dis),
        l_ent=float(l_ent),
        l_def=float(l_def),
        lam1=float(lam1),
        lam2=float(lam2),
        lam3=float(lam3),
        h0=float(h0),
    )


@dataclass(frozen=True)
class MaskedBatch:
    """Paired-view batch inputs for the defense objective."""

    logits: np.ndarray
    logits_pert: np.ndarray
    dists: np.ndarray
    dists_pert: np.ndarray
    labels: np.ndarray
    feats: np.ndarray
    feats_pert: np.ndarray

    @property
    def batch_size(self) -> int:
        return self.labels.shape[0]


def defense_breakdown(
    batch: MaskedBatch, lam1: float, lam2: float, lam3: float, h0: float
) -> LossBreakdown:
    return total_loss(
        task_loss(batch.logits, batch.labels),
        patch_loss(batch.feats, batch.feats_pert),
        cv_dis_loss(batch.dists, batch.dists_pert, batch.labels),
        ent_loss(batch.dists, batch.labels, h0),
        lam1,
        lam2,
        lam3,
        h0=h0,
    )
