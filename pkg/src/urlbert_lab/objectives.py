"""Loss functions for pre-training and classification.

Every loss returns a ``LossValue`` whose ``value`` is a differentiable scalar
tensor, so callers can mix them into composite training objectives.  Token
losses average over supervised positions only (CLS / padding carry label -1
and have no defined target).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


@dataclass
class LossValue:
    value: ad.Tensor     # scalar node in the autodiff graph
    n_contributing: int  # how many elements the average ran over

    @property
    def scalar(self) -> float:
        return float(self.value.data)

    def finite(self) -> bool:
        return bool(np.isfinite(self.value.data))


def loss_rstd(logits: ad.Tensor, labels: np.ndarray) -> LossValue:
    """Three-way token cross-entropy (shuffled / replaced / original)."""
    labels = np.asarray(labels)
    if logits.ndim != 3 or logits.shape[2] != 3:
        raise ValueError(f"loss_rstd: logits must be (B,L,3), got {logits.shape}")
    if labels.shape != logits.shape[:2]:
        raise ValueError(f"loss_rstd: labels shape {labels.shape} does not match "
                         f"logits {logits.shape}")
    flat = ad.reshape(logits, (-1, 3))
    value = ad.cross_entropy(flat, labels.reshape(-1), ignore_index=-1)
    return LossValue(value=value, n_contributing=int((labels != -1).sum()))


def loss_mlm(logits: ad.Tensor, targets: np.ndarray) -> LossValue:
    """Masked-token cross-entropy over the vocabulary head."""
    targets = np.asarray(targets)
    if logits.ndim != 3:
        raise ValueError(f"loss_mlm: logits must be (B,L,V), got {logits.shape}")
    if targets.shape != logits.shape[:2]:
        raise ValueError(f"loss_mlm: targets shape {targets.shape} does not match "
                         f"logits {logits.shape}")
    flat = ad.reshape(logits, (-1, logits.shape[2]))
    value = ad.cross_entropy(flat, targets.reshape(-1), ignore_index=-1)
    return LossValue(value=value, n_contributing=int((targets != -1).sum()))


def nt_xent(reps: ad.Tensor, tau: float) -> LossValue:
    """Normalized temperature-scaled cross-entropy over 2N paired vectors.

    Rows are ordered as pairs (2k, 2k+1).  Each anchor's positive is its
    partner; the denominator runs over every other row, so with N=1 the loss
    is exactly zero.
    """
    if tau <= 0:
        raise ValueError(f"nt_xent: temperature must be positive, got {tau}")
    n2 = reps.shape[0]
    if n2 < 2 or n2 % 2 != 0:
        raise ValueError(f"nt_xent: needs an even number of rows >= 2, got {n2}")
    z = ad.l2_normalize(reps, axis=-1)  # raises on zero-norm rows
    sims = ad.matmul(z, ad.transpose(z))
    logits = ad.mul(sims, 1.0 / tau)
    logits = ad.masked_fill(logits, np.eye(n2, dtype=bool), -np.inf)
    partners = np.arange(n2) ^ 1
    value = ad.cross_entropy(logits, partners)
    return LossValue(value=value, n_contributing=n2)


def kl_div(p, q, floor: float = 1e-12) -> LossValue:
    """Row-averaged KL(p || q) between distribution batches; 0*log0 := 0.

    ``q`` is typically a detached array so no gradient reaches the target.
    """
    p_t = p if isinstance(p, ad.Tensor) else ad.constant(np.asarray(p))
    q_t = q if isinstance(q, ad.Tensor) else ad.constant(np.asarray(q))
    if p_t.shape != q_t.shape or p_t.ndim != 2:
        raise ValueError(f"kl_div: need matching (B,K) batches, got {p_t.shape} vs {q_t.shape}")
    for name, arr in (("p", p_t.data), ("q", q_t.data)):
        if np.any(arr < 0):
            raise ValueError(f"kl_div: negative probability in {name}")
        sums = arr.sum(axis=1)
        if np.any(np.abs(sums - 1.0) > 1e-6):
            raise ValueError(f"kl_div: rows of {name} do not sum to 1 (max dev "
                             f"{np.abs(sums - 1.0).max():.2e})")
    term = ad.mul(p_t, ad.sub(ad.safe_log(p_t, floor), ad.safe_log(q_t, floor)))
    value = ad.tmean(ad.tsum(term, axis=1))
    return LossValue(value=value, n_contributing=p_t.shape[0])


def stage2_loss(con: LossValue, mlm: LossValue, vat: LossValue,
                vat_weight: float = 10.0) -> LossValue:
    """Weighted sum of the semantic-stage components: con + mlm + w*vat."""
    for name, lv in (("con", con), ("mlm", mlm), ("vat", vat)):
        if not lv.finite():
            raise FloatingPointError(f"stage2_loss: non-finite {name} component")
    value = ad.add(ad.add(con.value, mlm.value), ad.mul(vat.value, vat_weight))
    return LossValue(value=value, n_contributing=3)


def loss_cls(logits: ad.Tensor, labels: np.ndarray) -> LossValue:
    """Mean -log softmax(logits)[label] over a classification batch."""
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ValueError(f"loss_cls: logits must be (B,C), got {logits.shape}")
    if labels.shape != (logits.shape[0],):
        raise ValueError(f"loss_cls: labels shape {labels.shape} does not match "
                         f"batch {logits.shape[0]}")
    value = ad.cross_entropy(logits, labels)
    return LossValue(value=value, n_contributing=int(labels.shape[0]))
