"""Embedding-space augmentation: dropout views, sign-gradient steps, and the
single-refinement virtual-adversarial perturbation.

``vat_perturb`` never mutates model parameters: the probe gradient for the
perturbation is taken functionally, the KL target is a detached forward, and
only the returned loss (from the final perturbed pass) carries gradients back
to the caller's parameters.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .objectives import LossValue, kl_div


def dropout_augment(emb: ad.Tensor, p: float, seed) -> ad.Tensor:
    """Inverted-dropout view of an embedding batch, deterministic under seed."""
    return ad.dropout(emb, p, seed)


def fgsm_step(emb, grad_wrt_emb: np.ndarray, alpha: float):
    """x + alpha * sign(grad); sign(0) = 0.  The sign term is a constant, so
    gradients keep flowing through ``emb`` untouched."""
    grad_wrt_emb = np.asarray(grad_wrt_emb)
    shape = emb.shape if isinstance(emb, ad.Tensor) else np.asarray(emb).shape
    if tuple(shape) != grad_wrt_emb.shape:
        raise ValueError(f"fgsm_step: shape mismatch {tuple(shape)} vs {grad_wrt_emb.shape}")
    if isinstance(emb, ad.Tensor):
        delta = (alpha * np.sign(grad_wrt_emb)).astype(emb.dtype)
        return ad.add(emb, ad.Tensor._wrap(delta))
    return np.asarray(emb) + alpha * np.sign(grad_wrt_emb)


def project_l2(delta: np.ndarray, eps: float) -> np.ndarray:
    """Rescale each sequence's flattened delta onto the eps-ball (only if it
    exceeds it; small perturbations pass through unchanged)."""
    flat = delta.reshape(delta.shape[0], -1)
    norms = np.sqrt((flat * flat).sum(axis=1))
    scale = np.minimum(1.0, eps / np.maximum(norms, np.finfo(delta.dtype).tiny))
    return (flat * scale[:, None]).reshape(delta.shape).astype(delta.dtype)


def sequence_l2_norms(delta: np.ndarray) -> np.ndarray:
    flat = delta.reshape(delta.shape[0], -1)
    return np.sqrt((flat * flat).sum(axis=1))


def _unit_directions(g: np.ndarray) -> np.ndarray:
    """Per-sequence unit vectors along g; zero gradients stay zero."""
    flat = g.reshape(g.shape[0], -1)
    norms = np.sqrt((flat * flat).sum(axis=1, keepdims=True))
    return np.divide(flat, norms, out=np.zeros_like(flat), where=norms > 0).reshape(g.shape)


def vat_perturb(dist_fn, emb: ad.Tensor, sigma2: float, mu: float, eps: float,
                seed) -> tuple[LossValue, np.ndarray]:
    """One-step virtual-adversarial loss in embedding space.

    ``dist_fn`` maps an embedding tensor to a per-sequence output distribution
    (B, K).  Steps: draw delta ~ N(0, sigma2) and project it onto the
    per-sequence eps-ball; take the KL gradient w.r.t. delta against the
    clean (detached) output; ascend once by step length ``mu`` along the
    per-sequence gradient direction; re-project; return the KL of the refined
    pass, ready for its weight in the composite loss.

    The ascent step is the normalized gradient scaled by ``mu``: a raw
    gradient step is negligible next to the Gaussian draw (sqrt(L*H) norm) and
    would leave the refinement indistinguishable from noise.
    """
    if sigma2 <= 0 or mu <= 0 or eps <= 0:
        raise ValueError(f"vat_perturb: sigma2, mu, eps must be positive, got "
                         f"({sigma2}, {mu}, {eps})")
    keys = seed if isinstance(seed, (tuple, list)) else (seed,)
    rng = ad.make_rng(*keys)
    with ad.no_grad():
        q = dist_fn(emb.detach()).data.copy()
    delta0 = project_l2(rng.normal(0.0, np.sqrt(sigma2), size=emb.shape).astype(emb.dtype), eps)
    d = ad.Tensor(delta0, requires_grad=True)
    y1 = dist_fn(ad.add(emb.detach(), d))
    adv = kl_div(y1, q)
    if not adv.finite():
        raise FloatingPointError("vat_perturb: non-finite KL during refinement")
    (g,) = ad.grad(adv.value, [d])
    step = mu * _unit_directions(g).astype(emb.dtype)
    delta1 = project_l2(delta0 + step, eps)
    y3 = dist_fn(ad.add(emb, ad.Tensor._wrap(delta1)))
    vat = kl_div(y3, q)
    if not vat.finite():
        raise FloatingPointError("vat_perturb: non-finite KL after refinement")
    return vat, delta1
