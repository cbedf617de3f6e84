"""Contrastive objectives with exact gradients with respect to the embeddings.

All six losses share one kernel.  For an anchor ``i`` with logits
``l_ik = z_i . z_k / tau`` over its candidate set, positive weights ``pi_ik``
(summing to one over the positives) and denominator weights ``w_ik``::

    loss_i = -sum_k pi_ik l_ik + log sum_k w_ik exp(l_ik)

The subject-invariant variants set ``w_ik = Q_i`` for same-subject negatives and
1 elsewhere; positives are never reweighted.  ``Q`` is a per-batch constant
(stop-gradient), so the returned gradient holds it fixed.

``Q_i = p_i / mean(p)`` where ``p_i`` is the share of anchor ``i``'s negative
softmax mass that falls on same-subject negatives.  Anchors without any
same-subject negative get ``p_i = 0``, are left out of the mean and carry
``Q_i = 1`` (the value is never used).  When no anchor has a same-subject
negative, ``Q`` is identically 1.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError

log = logging.getLogger(__name__)

NORM_TOL = 1e-9

LOSSES = ("nce", "sicl", "supcon", "si_supcon", "cmc", "si_cmc")
MULTIMODAL = ("cmc", "si_cmc")
SUPERVISED = ("supcon", "si_supcon")


@dataclass
class EmbeddingBatch:
    """Embeddings plus the metadata the losses need.

    ``view_of[i]`` is the index of ``i``'s augmented partner.  Set
    ``check_norm=False`` to evaluate a loss away from the unit sphere (finite
    differences do this).
    """

    z: np.ndarray
    subject_ids: np.ndarray | None = None
    labels: np.ndarray | None = None
    view_of: np.ndarray | None = None
    check_norm: bool = field(default=True, repr=False, compare=False)

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=np.float64)
        if self.z.ndim != 2:
            raise ContractError(f"z must be (N, d), got {self.z.shape}")
        n = self.z.shape[0]
        for name in ("subject_ids", "labels", "view_of"):
            v = getattr(self, name)
            if v is not None:
                v = np.asarray(v, dtype=np.int64)
                if v.shape != (n,):
                    raise ContractError(f"{name} must have length {n}, got {v.shape}")
                setattr(self, name, v)
        if self.check_norm:
            norms = np.linalg.norm(self.z, axis=1)
            bad = np.abs(norms - 1.0) > NORM_TOL
            if bad.any():
                raise ContractError(f"rows {np.flatnonzero(bad)[:5].tolist()} are not unit norm")
        if self.view_of is not None:
            idx = np.arange(n)
            if (self.view_of < 0).any() or (self.view_of >= n).any():
                raise ContractError("view_of index out of range")
            if (self.view_of == idx).any() or (self.view_of[self.view_of] != idx).any():
                raise ContractError("view_of must be an involution pairing distinct indices")

    def __len__(self):
        return self.z.shape[0]

    @classmethod
    def two_view(cls, z1, z2, subject_ids=None, labels=None, check_norm=True) -> "EmbeddingBatch":
        """Stack two aligned views; row ``i`` of ``z1`` pairs with row ``i`` of ``z2``."""
        z1, z2 = np.asarray(z1), np.asarray(z2)
        b = z1.shape[0]
        view_of = np.concatenate([np.arange(b, 2 * b), np.arange(b)])
        dup = (lambda a: None if a is None else np.concatenate([a, a]))
        return cls(np.concatenate([z1, z2]), dup(subject_ids), dup(labels), view_of, check_norm)

    def with_z(self, z, check_norm=False) -> "EmbeddingBatch":
        return EmbeddingBatch(z, self.subject_ids, self.labels, self.view_of, check_norm)


@dataclass
class LossResult:
    value: float
    grad_z: np.ndarray
    grad_z_m: np.ndarray | None = None  # second modality, cross-modal losses only
    per_anchor: np.ndarray | None = None
    p: np.ndarray | None = None
    q: np.ndarray | None = None


@dataclass
class QWeights:
    p: np.ndarray
    q: np.ndarray
    has_same: np.ndarray


# ---------------------------------------------------------------------------
# kernel
# ---------------------------------------------------------------------------

def _contrast(logits, cand, pos_w, den_w):
    """Per-anchor loss and d(loss_i)/d(logits) for every row."""
    masked = np.where(cand, logits, -np.inf)
    shift = masked.max(axis=1, keepdims=True)
    e = np.where(cand, den_w * np.exp(logits - shift), 0.0)
    den = e.sum(axis=1)
    per_anchor = -(pos_w * logits).sum(axis=1) + shift[:, 0] + np.log(den)
    return per_anchor, e / den[:, None] - pos_w


def _q_from_logits(logits, neg, same) -> QWeights:
    has = same.any(axis=1)
    p = np.zeros(logits.shape[0])
    if has.any():
        masked = np.where(neg, logits, -np.inf)
        shift = masked[has].max(axis=1, keepdims=True)
        e = np.where(neg[has], np.exp(logits[has] - shift), 0.0)
        p[has] = (e * same[has]).sum(axis=1) / e.sum(axis=1)
        q = np.ones_like(p)
        q[has] = p[has] / p[has].mean()
    else:
        log.info("no anchor has a same-subject negative; Q falls back to 1")
        q = np.ones_like(p)
    return QWeights(p, q, has)


def _resolve_q(q_override, computed: QWeights | None, n):
    if q_override is None:
        return computed.q
    q = np.broadcast_to(np.asarray(q_override, dtype=np.float64), (n,))
    return q


def _check_tau(tau):
    if not tau > 0:
        raise ContractError(f"temperature must be > 0, got {tau}")


def _need(batch: EmbeddingBatch, *names):
    for name in names:
        if getattr(batch, name) is None:
            raise ContractError(f"this loss needs batch.{name}")


# ---------------------------------------------------------------------------
# unimodal masks
# ---------------------------------------------------------------------------

def _unimodal_masks(batch: EmbeddingBatch):
    n = len(batch)
    eye = np.eye(n, dtype=bool)
    pos = np.zeros((n, n), dtype=bool)
    pos[np.arange(n), batch.view_of] = True
    return ~eye, pos


def _supervised_masks(batch: EmbeddingBatch):
    n = len(batch)
    eye = np.eye(n, dtype=bool)
    same_label = batch.labels[:, None] == batch.labels[None, :]
    pos = same_label & ~eye
    counts = pos.sum(axis=1)
    if (counts == 0).any():
        lonely = sorted(set(batch.labels[counts == 0].tolist()))
        raise ContractError(f"classes {lonely} have a single sample in the batch; no positive available")
    return ~eye, pos, ~same_label


def _same_subject(batch: EmbeddingBatch):
    return batch.subject_ids[:, None] == batch.subject_ids[None, :]


def _finish_unimodal(batch, tau, per_anchor, g_logits, p=None, q=None) -> LossResult:
    n = len(batch)
    g = g_logits / n
    grad = (g + g.T) @ batch.z / tau
    return LossResult(float(per_anchor.mean()), grad, None, per_anchor, p, q)


# ---------------------------------------------------------------------------
# public losses
# ---------------------------------------------------------------------------

def q_weight(batch: EmbeddingBatch, tau: float, supervised: bool = False) -> QWeights:
    """Subject weights for every anchor.

    The negative set is "everything but the anchor and its positive" in the
    self-supervised case, and "every sample with a different label" when
    ``supervised`` is set.
    """
    _check_tau(tau)
    _need(batch, "subject_ids")
    logits = batch.z @ batch.z.T / tau
    if supervised:
        _need(batch, "labels")
        _, _, neg = _supervised_masks(batch)
    else:
        _need(batch, "view_of")
        cand, pos = _unimodal_masks(batch)
        neg = cand & ~pos
    return _q_from_logits(logits, neg, neg & _same_subject(batch))


def nce_loss(batch: EmbeddingBatch, tau: float) -> LossResult:
    _check_tau(tau)
    _need(batch, "view_of")
    if len(batch) < 4:
        raise ContractError(f"need N >= 4 for at least one negative per anchor, got N={len(batch)}")
    logits = batch.z @ batch.z.T / tau
    cand, pos = _unimodal_masks(batch)
    per_anchor, g = _contrast(logits, cand, pos.astype(float), 1.0)
    return _finish_unimodal(batch, tau, per_anchor, g)


def sicl_loss(batch: EmbeddingBatch, tau: float, q_override=None) -> LossResult:
    _check_tau(tau)
    _need(batch, "view_of", "subject_ids")
    if len(batch) < 4:
        raise ContractError(f"need N >= 4 for at least one negative per anchor, got N={len(batch)}")
    logits = batch.z @ batch.z.T / tau
    cand, pos = _unimodal_masks(batch)
    neg = cand & ~pos
    same = neg & _same_subject(batch)
    qw = _q_from_logits(logits, neg, same) if q_override is None else None
    q = _resolve_q(q_override, qw, len(batch))
    den_w = np.where(same, q[:, None], 1.0)
    per_anchor, g = _contrast(logits, cand, pos.astype(float), den_w)
    return _finish_unimodal(batch, tau, per_anchor, g, None if qw is None else qw.p, np.array(q))


def supcon_loss(batch: EmbeddingBatch, tau: float) -> LossResult:
    _check_tau(tau)
    _need(batch, "labels")
    logits = batch.z @ batch.z.T / tau
    cand, pos, _ = _supervised_masks(batch)
    pos_w = pos / pos.sum(axis=1, keepdims=True)
    per_anchor, g = _contrast(logits, cand, pos_w, 1.0)
    return _finish_unimodal(batch, tau, per_anchor, g)


def si_supcon_loss(batch: EmbeddingBatch, tau: float, q_override=None) -> LossResult:
    _check_tau(tau)
    _need(batch, "labels", "subject_ids")
    logits = batch.z @ batch.z.T / tau
    cand, pos, neg = _supervised_masks(batch)
    same = neg & _same_subject(batch)
    qw = _q_from_logits(logits, neg, same) if q_override is None else None
    q = _resolve_q(q_override, qw, len(batch))
    pos_w = pos / pos.sum(axis=1, keepdims=True)
    den_w = np.where(same, q[:, None], 1.0)
    per_anchor, g = _contrast(logits, cand, pos_w, den_w)
    return _finish_unimodal(batch, tau, per_anchor, g, None if qw is None else qw.p, np.array(q))


def _check_aligned(bk: EmbeddingBatch, bm: EmbeddingBatch):
    if len(bk) != len(bm):
        raise ContractError(f"modality batches differ in length: {len(bk)} vs {len(bm)}")
    if len(bk) < 2:
        raise ContractError("cross-modal loss needs N >= 2")


def _cross_modal(bk, bm, tau, q_override, subject_invariant) -> LossResult:
    _check_tau(tau)
    _check_aligned(bk, bm)
    n = len(bk)
    logits = bk.z @ bm.z.T / tau
    eye = np.eye(n, dtype=bool)
    cand = np.ones((n, n), dtype=bool)
    pos_w = eye.astype(float)
    if subject_invariant:
        _need(bk, "subject_ids")
        if bm.subject_ids is not None and not np.array_equal(bk.subject_ids, bm.subject_ids):
            raise ContractError("aligned batches carry different subject ids")
        same = ~eye & _same_subject(bk)
    if q_override is None:
        q_over = (None, None)
    elif isinstance(q_override, tuple):
        q_over = q_override
    else:
        q_over = (q_override, q_override)

    parts, grads, ps, qs = [], [], [], []
    for lg, qo in ((logits, q_over[0]), (logits.T, q_over[1])):
        if subject_invariant:
            qw = _q_from_logits(lg, ~eye, same) if qo is None else None
            q = _resolve_q(qo, qw, n)
            den_w = np.where(same, q[:, None], 1.0)
            ps.append(None if qw is None else qw.p)
            qs.append(np.array(q))
        else:
            den_w = 1.0
        pa, g = _contrast(lg, cand, pos_w, den_w)
        parts.append(pa)
        grads.append(g)
    g_logits = (grads[0] + grads[1].T) / (2 * n)
    per_anchor = np.concatenate(parts)
    grad_k = g_logits @ bm.z / tau
    grad_m = g_logits.T @ bk.z / tau
    p = np.concatenate(ps) if ps and all(x is not None for x in ps) else None
    q = np.concatenate(qs) if qs else None
    return LossResult(float(per_anchor.mean()), grad_k, grad_m, per_anchor, p, q)


def cmc_loss(batch_k: EmbeddingBatch, batch_m: EmbeddingBatch, tau: float) -> LossResult:
    """Cross-modal InfoNCE, averaged over both anchoring directions."""
    return _cross_modal(batch_k, batch_m, tau, None, False)


def si_cmc_loss(batch_k: EmbeddingBatch, batch_m: EmbeddingBatch, tau: float, q_override=None) -> LossResult:
    """Subject-invariant cross-modal loss; ``q_override`` may be a scalar, an array or a (k->m, m->k) pair."""
    return _cross_modal(batch_k, batch_m, tau, q_override, True)


def q_weight_cross(batch_k: EmbeddingBatch, batch_m: EmbeddingBatch, tau: float) -> tuple[QWeights, QWeights]:
    """Q for both anchoring directions of the cross-modal similarity matrix."""
    _check_tau(tau)
    _check_aligned(batch_k, batch_m)
    _need(batch_k, "subject_ids")
    n = len(batch_k)
    logits = batch_k.z @ batch_m.z.T / tau
    neg = ~np.eye(n, dtype=bool)
    same = neg & _same_subject(batch_k)
    return _q_from_logits(logits, neg, same), _q_from_logits(logits.T, neg, same)


UNIMODAL_FNS = {
    "nce": nce_loss,
    "sicl": sicl_loss,
    "supcon": supcon_loss,
    "si_supcon": si_supcon_loss,
}
CROSS_MODAL_FNS = {"cmc": cmc_loss, "si_cmc": si_cmc_loss}


def compute(name: str, batch: EmbeddingBatch, tau: float, batch_m: EmbeddingBatch | None = None) -> LossResult:
    if name in CROSS_MODAL_FNS:
        if batch_m is None:
            raise ContractError(f"{name} needs a second-modality batch")
        return CROSS_MODAL_FNS[name](batch, batch_m, tau)
    try:
        fn = UNIMODAL_FNS[name]
    except KeyError:
        raise ContractError(f"unknown loss {name!r}; expected one of {LOSSES}") from None
    return fn(batch, tau)


def write_anchor_csv(path, result: LossResult) -> Path:
    """Dump per-anchor ``p``, ``Q`` and loss for offline inspection."""
    path = Path(path)
    n = len(result.per_anchor)
    p = result.p if result.p is not None else np.full(n, np.nan)
    q = result.q if result.q is not None else np.ones(n)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["anchor", "p", "q", "loss"])
        for i in range(n):
            w.writerow([i, repr(float(p[i])), repr(float(q[i])), repr(float(result.per_anchor[i]))])
    return path
