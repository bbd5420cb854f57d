"""Decoupled-weight-decay adaptive optimizer and finite-difference checking."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, grad
from .checkpoint import ParamStore


class AdamW:
    """AdamW with per-parameter step counts so subsets can be stepped.

    Weight decay is decoupled: with a zero gradient the update is exactly
    ``p -= lr * weight_decay * p``.
    """

    def __init__(self, store: ParamStore, lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0, param_names=None):
        self.store = store
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.param_names = list(param_names) if param_names is not None else store.names()
        self._m = {n: np.zeros_like(store[n].data) for n in self.param_names}
        self._v = {n: np.zeros_like(store[n].data) for n in self.param_names}
        self._t = {n: 0 for n in self.param_names}

    def step(self, lr: float | None = None, names=None) -> None:
        lr = self.lr if lr is None else lr
        names = self.param_names if names is None else names
        for name in names:
            p = self.store[name]
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if not np.isfinite(g).all():
                raise FloatingPointError(f"non-finite gradient for parameter {name}")
            self._t[name] += 1
            t = self._t[name]
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            m_hat = m / (1.0 - self.beta1 ** t)
            v_hat = v / (1.0 - self.beta2 ** t)
            p.data = p.data - lr * (m_hat / (np.sqrt(v_hat) + self.eps)
                                    + self.weight_decay * p.data)
        self.store.step_count += 1


def adamw_step(store: ParamStore, optimizer: AdamW, lr: float | None = None) -> None:
    """One optimizer step over ``optimizer.param_names`` using current ``.grad``s."""
    assert optimizer.store is store
    optimizer.step(lr=lr)


@dataclass
class GradCheckEntry:
    name: str
    index: tuple
    analytic: float
    numeric: float
    rel_err: float


@dataclass
class GradCheckReport:
    tolerance: float
    max_rel_err: float = 0.0
    entries: list = field(default_factory=list)

    @property
    def failures(self) -> list:
        return [e for e in self.entries if e.rel_err > self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.failures

    def summary(self) -> str:
        return (f"grad_check: {len(self.entries)} elements, max rel err "
                f"{self.max_rel_err:.3e}, tolerance {self.tolerance:.1e}, "
                f"{'PASS' if self.passed else f'{len(self.failures)} FAILURES'}")


def grad_check(f, params, tolerance: float = 1e-5, h: float = 1e-5,
               max_per_param: int | None = None, seed: int = 0) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar ``f()`` against central differences.

    ``params`` is a dict name -> Tensor (or a ParamStore).  ``f`` must be
    deterministic and re-evaluable; run under ``precision("float64")``.
    ``max_per_param`` caps how many elements per parameter are probed
    (deterministic subsample) so large models stay cheap.
    """
    if isinstance(params, ParamStore):
        params = dict(params.items())
    names = list(params)
    tensors = [params[n] for n in names]
    out = f()
    if not isinstance(out, Tensor):
        raise TypeError("grad_check: f() must return a Tensor")
    analytic = grad(out, tensors)
    report = GradCheckReport(tolerance=tolerance)
    rng = np.random.default_rng(seed)
    for name, t, a in zip(names, tensors, analytic):
        flat = t.data.reshape(-1)
        n = flat.size
        if max_per_param is not None and n > max_per_param:
            idxs = np.sort(rng.choice(n, size=max_per_param, replace=False))
        else:
            idxs = np.arange(n)
        a_flat = a.reshape(-1)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            f_plus = float(f().data)
            flat[i] = orig - h
            f_minus = float(f().data)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            an = float(a_flat[i])
            rel = abs(an - numeric) / max(1.0, abs(an), abs(numeric))
            report.entries.append(GradCheckEntry(
                name=name,
                index=np.unravel_index(int(i), t.data.shape),
                analytic=an, numeric=numeric, rel_err=rel))
            if rel > report.max_rel_err:
                report.max_rel_err = rel
    return report
