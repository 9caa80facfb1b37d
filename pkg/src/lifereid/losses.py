"""Training objectives: identity CE, batch-hard triplet, compatibility, parts.

All losses return scalar graph tensors.  Hard-pair mining and one-hot
construction happen on raw arrays (no gradient through index selection);
the differentiable path then touches only the selected rows.

Mining tie-break: distances compared as squared Euclidean values; among
equal candidates the lowest index wins (numpy argmax/argmin convention).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import (
    BankIntegrityError,
    BatchCompositionError,
    DimensionError,
    LabelError,
    ProtocolError,
)


@dataclass(frozen=True)
class LossWeights:
    lambda_ce: float = 1.0
    lambda_tri: float = 1.0
    lambda_cmcl: float = 0.1
    lambda_pcl: float = 1.0
    margin: float = 0.3
    tau: float = 0.5
    n_parts: int = 5

    def validate(self) -> None:
        if min(self.lambda_ce, self.lambda_tri, self.lambda_cmcl,
               self.lambda_pcl, self.margin) < 0:
            raise DimensionError("loss weights and margin must be non-negative")
        if self.tau <= 0:
            raise DimensionError("temperature must be positive")
        if self.n_parts < 2:
            raise DimensionError("need at least two parts")


def one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise LabelError("labels must be a 1-D array")
    if not np.issubdtype(labels.dtype, np.integer):
        raise LabelError("labels must be integers")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise LabelError(f"label out of range for {n_classes} classes")
    out = np.zeros((labels.size, n_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def loss_ce(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of identity logits against integer labels."""
    if logits.data.ndim != 2:
        raise DimensionError("expected [B, Z] logits")
    return ad.softmax_cross_entropy(logits, one_hot(labels, logits.data.shape[1]))


def mine_hard_pairs(feats: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per anchor: index of the farthest same-identity row (itself excluded)
    and the nearest different-identity row, by squared Euclidean distance."""
    feats = np.asarray(feats, dtype=np.float64)
    labels = np.asarray(labels)
    bsz = feats.shape[0]
    if labels.shape != (bsz,):
        raise DimensionError("one label per feature row")
    diff = feats[:, None, :] - feats[None, :, :]
    d2 = (diff * diff).sum(axis=-1)                      # [B, B]
    same = labels[:, None] == labels[None, :]
    pos_idx = np.empty(bsz, dtype=np.intp)
    neg_idx = np.empty(bsz, dtype=np.intp)
    for i in range(bsz):
        pos_mask = same[i].copy()
        pos_mask[i] = False
        if not pos_mask.any():
            raise BatchCompositionError(f"anchor {i} has no positive in batch")
        if same[i].all():
            raise BatchCompositionError(f"anchor {i} has no negative in batch")
        pos_d = np.where(pos_mask, d2[i], -np.inf)
        neg_d = np.where(~same[i], d2[i], np.inf)
        pos_idx[i] = np.argmax(pos_d)
        neg_idx[i] = np.argmin(neg_d)
    return pos_idx, neg_idx


def loss_triplet(raw_feats: Tensor, labels: np.ndarray, margin: float = 0.3) -> Tensor:
    """Batch-hard triplet loss with Euclidean distances on raw features."""
    if raw_feats.data.ndim != 2:
        raise DimensionError("expected [B, C] features")
    pos_idx, neg_idx = mine_hard_pairs(raw_feats.data, labels)
    pos = raw_feats.take_rows(pos_idx)
    neg = raw_feats.take_rows(neg_idx)
    d_pos = ((raw_feats - pos) ** 2.0).sum(axis=1).sqrt()
    d_neg = ((raw_feats - neg) ** 2.0).sum(axis=1).sqrt()
    return (d_pos - d_neg + float(margin)).clamp_min(0.0).mean()


def loss_base(ce: Tensor, tri: Tensor, w: LossWeights) -> Tensor:
    return ce * w.lambda_ce + tri * w.lambda_tri


def loss_cmcl(anchor_feats: Tensor, anchor_ids: np.ndarray, bank_feats: np.ndarray,
              bank_ids: np.ndarray, batch_feats: Tensor, tau: float = 0.5) -> Tensor:
    """Supervised-contrastive compatibility of replay anchors with the bank.

    ``anchor_feats`` are the current model's features of the replay batch;
    positives are bank rows sharing the anchor's identity (the anchor's own
    stored feature among them); the denominator adds every bank row and every
    current-batch feature (all of them negatives, identities being disjoint
    across datasets).  Numerically stabilized by subtracting each anchor's
    max similarity, which cancels in the ratio.
    """
    if anchor_feats.data.ndim != 2 or batch_feats.data.ndim != 2:
        raise DimensionError("anchor and batch features must be [n, C]")
    bank_feats = np.asarray(bank_feats, dtype=np.float64)
    if bank_feats.ndim != 2 or bank_feats.shape[0] == 0:
        raise ProtocolError("replay bank is empty; this loss needs stored features")
    dim = anchor_feats.data.shape[1]
    if bank_feats.shape[1] != dim or batch_feats.data.shape[1] != dim:
        raise DimensionError("feature dimensions disagree")
    if batch_feats.data.shape[0] == 0:
        raise DimensionError("current batch must be non-empty")
    anchor_ids = np.asarray(anchor_ids)
    bank_ids = np.asarray(bank_ids)
    if anchor_ids.shape != (anchor_feats.data.shape[0],) or bank_ids.shape != (bank_feats.shape[0],):
        raise DimensionError("one identity per feature row")
    if float(tau) <= 0:
        raise DimensionError("temperature must be positive")

    pos_mask = (anchor_ids[:, None] == bank_ids[None, :]).astype(np.float64)
    if (pos_mask.sum(axis=1) == 0).any():
        raise BankIntegrityError("an anchor has no positive feature in the bank")

    inv_tau = 1.0 / float(tau)
    bank_t = Tensor(bank_feats.T)                       # constant, no gradient
    s_bank = (anchor_feats @ bank_t) * inv_tau          # [Br, M]
    s_batch = (anchor_feats @ batch_feats.transpose()) * inv_tau  # [Br, B]
    shift = np.maximum(s_bank.data.max(axis=1), s_batch.data.max(axis=1))[:, None]
    e_bank = (s_bank - Tensor(shift)).exp()
    e_batch = (s_batch - Tensor(shift)).exp()
    num = (e_bank * Tensor(pos_mask)).sum(axis=1)
    den = e_bank.sum(axis=1) + e_batch.sum(axis=1)
    return (den.log() - num.log()).mean()


def loss_pcl(new_logits: list[Tensor], old_logits: list[Tensor] | None) -> Tensor:
    """Part-classification loss: slab n must be labeled n by the part head(s).

    With an old head present the result is the mean of the new-head and
    old-head terms; gradients reach the features through both, while the old
    head's weights stay untouched (they carry no gradient).
    """
    n = len(new_logits)
    if n < 2:
        raise DimensionError("need at least two parts")
    if old_logits is not None and len(old_logits) != n:
        raise DimensionError("old/new part counts differ")

    def head_term(logit_list):
        total = None
        for part, logits in enumerate(logit_list):
            if logits.data.shape[1] != n:
                raise DimensionError("part logits width must equal part count")
            targets = one_hot(np.full(logits.data.shape[0], part), n)
            term = ad.softmax_cross_entropy(logits, targets)
            total = term if total is None else total + term
        return total * (1.0 / n)

    new_term = head_term(new_logits)
    if old_logits is None:
        return new_term
    return (new_term + head_term(old_logits)) * 0.5


def loss_total(base: Tensor, cmcl: Tensor | None, pcl: Tensor | None,
               w: LossWeights, task_index: int) -> Tensor:
    """Base + lambda_pcl * pcl + lambda_cmcl * cmcl; no cmcl term on task 1."""
    if task_index < 1:
        raise DimensionError("task index starts at 1")
    if task_index == 1 and cmcl is not None:
        raise ProtocolError("compatibility loss is undefined on the first task")
    total = base
    if pcl is not None:
        total = total + pcl * w.lambda_pcl
    if cmcl is not None:
        total = total + cmcl * w.lambda_cmcl
    return total
