"""Task heads and supervised adaptation.

Heads are either the token-CNN (convolution over the final hidden states,
masked max-over-time, dense) or a linear layer over pooled CLS features; the
pooling variants cover single-layer CLS picks and six ways of combining the
last four layers.  ``finetune_two_stage`` trains the head with the encoder
bit-frozen, then both jointly at a smaller rate.  ``finetune_multitask``
merges per-task minibatches, shuffles them, and updates the shared encoder
plus the owning task's head per batch; single-task joint training is the
T=1 instance of the same loop.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .checkpoint import ParamStore
from .encoder import Encoder, cls_vector, HiddenStack, _trunc_normal
from .eval_features import Metrics, compute_metrics
from .objectives import loss_cls
from .optim import AdamW
from .tokenizer import Vocab, encode_batch

POOL_KINDS = ("cls_layer", "last4_concat", "last4_mean", "last4_max", "last4_min",
              "last4_weighted", "last4_attention")
HEAD_KINDS = ("cnn_head",) + POOL_KINDS

_MT_ORDER, _MT_SHUFFLE, _FT_ORDER = 41, 42, 43


@dataclass
class HeadSpec:
    kind: str
    num_classes: int
    layer: int | None = None  # cls_layer pick; None means the final layer
    filters: int = 64
    kernel: int = 3

    def __post_init__(self):
        if self.kind not in HEAD_KINDS:
            raise ValueError(f"unknown head kind {self.kind!r}; one of {HEAD_KINDS}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.kind == "cnn_head" and self.kernel % 2 != 1:
            raise ValueError("cnn kernel must be odd")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "num_classes": self.num_classes, "layer": self.layer,
                "filters": self.filters, "kernel": self.kernel}

    @classmethod
    def from_dict(cls, d: dict) -> "HeadSpec":
        return cls(**d)


@dataclass
class FinetuneSchedule:
    stage_a_lr: float = 2e-3
    stage_b_lr: float = 2e-5
    stage_a_epochs: int = 5
    stage_b_epochs: int = 5
    batch_size: int = 32
    weight_decay: float = 1e-4
    seed: int = 0

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("stage_a_lr", "stage_b_lr", "stage_a_epochs",
                                              "stage_b_epochs", "batch_size",
                                              "weight_decay", "seed")}


@dataclass
class TaskSpec:
    task_id: int
    train: list
    test: list
    head: HeadSpec
    name: str = ""

    def __post_init__(self):
        if not self.train:
            raise ValueError(f"task {self.task_id}: empty train set")
        if any(r.label is None for r in self.train + self.test):
            raise ValueError(f"task {self.task_id}: unlabeled record in dataset")

    @property
    def prefix(self) -> str:
        return f"task{self.task_id}.head"


# ------------------------------------------------------------------ heads


def head_param_shapes(spec: HeadSpec, hidden: int) -> dict[str, tuple]:
    if spec.kind == "cnn_head":
        return {"conv.w": (spec.kernel * hidden, spec.filters),
                "conv.b": (spec.filters,),
                "dense.w": (spec.filters, spec.num_classes),
                "dense.b": (spec.num_classes,)}
    if spec.kind == "last4_concat":
        feat = 4 * hidden
    else:
        feat = hidden
    shapes = {"out.w": (feat, spec.num_classes), "out.b": (spec.num_classes,)}
    if spec.kind == "last4_weighted":
        shapes["pool.w"] = (4,)
    elif spec.kind == "last4_attention":
        shapes["pool.q"] = (hidden,)
    return shapes


def init_head_params(store: ParamStore, spec: HeadSpec, hidden: int, prefix: str,
                     seed: int) -> list[str]:
    rng = ad.make_rng(seed, 0x4EAD5)
    names = []
    for suffix, shape in head_param_shapes(spec, hidden).items():
        name = f"{prefix}.{suffix}"
        if suffix.endswith(".b") or suffix == "pool.w":
            store.add(name, np.zeros(shape))
        else:
            store.add(name, _trunc_normal(rng, shape, 0.02))
        names.append(name)
    return names


def _last4_cls(stack: HiddenStack) -> ad.Tensor:
    """(B, 4, H) tensor of the CLS vectors from the last four block outputs."""
    if stack.depth < 4:
        raise ValueError(f"last-4 pooling needs encoder depth >= 4, got {stack.depth}")
    vs = [cls_vector(stack, layer) for layer in range(stack.depth - 3, stack.depth + 1)]
    b, h = vs[0].shape
    return ad.concat([ad.reshape(v, (b, 1, h)) for v in vs], axis=1)


def pool(stack: HiddenStack, spec: HeadSpec, store: ParamStore | None = None,
         prefix: str | None = None) -> ad.Tensor:
    """Combine layer-wise CLS vectors into one feature batch."""
    if spec.kind == "cls_layer":
        layer = spec.layer if spec.layer is not None else stack.depth
        return cls_vector(stack, layer)
    c = _last4_cls(stack)
    b, _, h = c.shape
    if spec.kind == "last4_concat":
        return ad.reshape(c, (b, 4 * h))
    if spec.kind == "last4_mean":
        return ad.tmean(c, axis=1)
    if spec.kind == "last4_max":
        return ad.amax(c, axis=1)
    if spec.kind == "last4_min":
        return ad.amin(c, axis=1)
    if store is None or prefix is None:
        raise ValueError(f"{spec.kind} needs learned parameters (store + prefix)")
    if spec.kind == "last4_weighted":
        w = ad.softmax(store[f"{prefix}.pool.w"], axis=-1)
        return ad.tsum(ad.mul(c, ad.reshape(w, (1, 4, 1))), axis=1)
    # last4_attention: one learned query scores each layer's CLS
    q = store[f"{prefix}.pool.q"]
    scores = ad.tsum(ad.mul(c, ad.reshape(q, (1, 1, h))), axis=2)
    att = ad.softmax(scores, axis=-1)
    return ad.tsum(ad.mul(c, ad.reshape(att, (b, 4, 1))), axis=1)


def cnn_head_forward(states: ad.Tensor, attention_mask: np.ndarray, store: ParamStore,
                     prefix: str, spec: HeadSpec) -> ad.Tensor:
    """Token convolution (same padding), gelu, masked max-over-time, dense."""
    mask = np.asarray(attention_mask)
    b, length, h = states.shape
    if length < 1 or np.any(mask.sum(axis=1) == 0):
        raise ValueError("cnn_head_forward: all-pad sequence")
    pad_cols = (mask == 0)[:, :, None]
    x = ad.masked_fill(states, pad_cols, 0.0)
    half = spec.kernel // 2
    zeros = ad.constant(np.zeros((b, half, h), dtype=states.dtype))
    xp = ad.concat([zeros, x, zeros], axis=1)
    windows = ad.concat([xp[:, off:off + length, :] for off in range(spec.kernel)], axis=2)
    flat = ad.reshape(windows, (b * length, spec.kernel * h))
    conv = ad.add(ad.matmul(flat, store[f"{prefix}.conv.w"]), store[f"{prefix}.conv.b"])
    conv = ad.reshape(ad.gelu(conv), (b, length, spec.filters))
    conv = ad.masked_fill(conv, pad_cols, -np.inf)
    feat = ad.amax(conv, axis=1)
    return ad.add(ad.matmul(feat, store[f"{prefix}.dense.w"]), store[f"{prefix}.dense.b"])


def head_forward(store: ParamStore, spec: HeadSpec, stack: HiddenStack,
                 attention_mask: np.ndarray, prefix: str) -> ad.Tensor:
    if spec.kind == "cnn_head":
        return cnn_head_forward(stack.states[-1], attention_mask, store, prefix, spec)
    feat = pool(stack, spec, store=store, prefix=prefix)
    return ad.add(ad.matmul(feat, store[f"{prefix}.out.w"]), store[f"{prefix}.out.b"])


# ------------------------------------------------------------------ evaluation


def predict(store: ParamStore, encoder: Encoder, vocab: Vocab, records, spec: HeadSpec,
            prefix: str, batch_size: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Predictions and per-class softmax scores, inference mode."""
    preds, scores = [], []
    data = encode_batch(vocab, records, encoder.cfg.max_len)
    with ad.no_grad():
        for lo in range(0, len(data), batch_size):
            sub = data.trimmed_rows(np.arange(lo, min(lo + batch_size, len(data))))
            stack = encoder.forward(store, sub.ids, sub.attention_mask)
            logits = head_forward(store, spec, stack, sub.attention_mask, prefix)
            p = ad.softmax(logits, axis=-1).data
            preds.append(p.argmax(axis=1))
            scores.append(p)
    return np.concatenate(preds), np.concatenate(scores, axis=0)


def evaluate_task(store: ParamStore, encoder: Encoder, vocab: Vocab, records,
                  spec: HeadSpec, prefix: str) -> Metrics:
    labels = np.asarray([r.label for r in records])
    preds, scores = predict(store, encoder, vocab, records, spec, prefix)
    auc_scores = scores[:, 1] if spec.num_classes == 2 else scores
    return compute_metrics(labels, predictions=preds, scores=auc_scores)


# ------------------------------------------------------------------ two-stage


def _cache_head_inputs(store, encoder, vocab, records, spec, batch_size=256):
    """Frozen-encoder forward once; returns constants the head trains on."""
    data = encode_batch(vocab, records, encoder.cfg.max_len)
    cached = []
    with ad.no_grad():
        for lo in range(0, len(data), batch_size):
            idx = np.arange(lo, min(lo + batch_size, len(data)))
            sub = data.rows(idx)  # keep full width so cached tensors align
            stack = encoder.forward(store, sub.ids, sub.attention_mask)
            if spec.kind == "cnn_head":
                cached.append(stack.states[-1].data.copy())
            elif spec.kind == "cls_layer":
                layer = spec.layer if spec.layer is not None else stack.depth
                cached.append(cls_vector(stack, layer).data.copy())
            else:
                cached.append(_last4_cls(stack).data.copy())
    return np.concatenate(cached, axis=0), data.attention_mask


def _head_logits_from_cache(store, spec, prefix, feats: np.ndarray,
                            mask: np.ndarray) -> ad.Tensor:
    x = ad.Tensor._wrap(feats)
    if spec.kind == "cnn_head":
        return cnn_head_forward(x, mask, store, prefix, spec)
    if spec.kind == "cls_layer":
        feat = x
    elif spec.kind == "last4_concat":
        feat = ad.reshape(x, (x.shape[0], 4 * x.shape[2]))
    elif spec.kind == "last4_mean":
        feat = ad.tmean(x, axis=1)
    elif spec.kind == "last4_max":
        feat = ad.amax(x, axis=1)
    elif spec.kind == "last4_min":
        feat = ad.amin(x, axis=1)
    elif spec.kind == "last4_weighted":
        w = ad.softmax(store[f"{prefix}.pool.w"], axis=-1)
        feat = ad.tsum(ad.mul(x, ad.reshape(w, (1, 4, 1))), axis=1)
    else:
        q = store[f"{prefix}.pool.q"]
        scores = ad.tsum(ad.mul(x, ad.reshape(q, (1, 1, x.shape[2]))), axis=2)
        att = ad.softmax(scores, axis=-1)
        feat = ad.tsum(ad.mul(x, ad.reshape(att, (x.shape[0], 4, 1))), axis=1)
    return ad.add(ad.matmul(feat, store[f"{prefix}.out.w"]), store[f"{prefix}.out.b"])


def finetune_two_stage(store: ParamStore, encoder: Encoder, vocab: Vocab,
                       task: TaskSpec, sched: FinetuneSchedule,
                       log: list | None = None) -> tuple[ParamStore, dict]:
    """Stage A: head only on a bit-frozen encoder; stage B: joint training."""
    prefix = task.prefix
    head_names = init_head_params(store, task.head, encoder.cfg.hidden, prefix,
                                  seed=sched.seed)
    labels = np.asarray([r.label for r in task.train])
    enc_names = encoder.param_names()
    log = log if log is not None else []

    # stage A: encoder frozen, so its forward is computed once and cached
    encoder_before = store.checksum(enc_names)
    feats, full_mask = _cache_head_inputs(store, encoder, vocab, task.train, task.head)
    opt_a = AdamW(store, lr=sched.stage_a_lr, weight_decay=sched.weight_decay,
                  param_names=head_names)
    step = 0
    for epoch in range(sched.stage_a_epochs):
        order = ad.make_rng(sched.seed, _FT_ORDER, task.task_id, epoch).permutation(len(labels))
        for lo in range(0, len(order), sched.batch_size):
            rows = order[lo:lo + sched.batch_size]
            logits = _head_logits_from_cache(store, task.head, prefix, feats[rows],
                                             full_mask[rows])
            lv = loss_cls(logits, labels[rows])
            store.zero_grad()
            lv.value.backward()
            opt_a.step()
            log.append({"stage": "ft_a", "task": task.task_id, "step": step,
                        "loss": lv.scalar})
            step += 1
    if store.checksum(enc_names) != encoder_before:
        raise AssertionError("stage A modified encoder parameters")
    metrics_a = evaluate_task(store, encoder, vocab, task.test, task.head, prefix)

    # stage B: joint training at the lower rate
    data = encode_batch(vocab, task.train, encoder.cfg.max_len)
    opt_b = AdamW(store, lr=sched.stage_b_lr, weight_decay=sched.weight_decay,
                  param_names=enc_names + head_names)
    for epoch in range(sched.stage_b_epochs):
        order = ad.make_rng(sched.seed, _FT_ORDER, task.task_id, 1000 + epoch).permutation(len(labels))
        for lo in range(0, len(order), sched.batch_size):
            rows = order[lo:lo + sched.batch_size]
            sub = data.trimmed_rows(rows)
            stack = encoder.forward(store, sub.ids, sub.attention_mask)
            logits = head_forward(store, task.head, stack, sub.attention_mask, prefix)
            lv = loss_cls(logits, labels[rows])
            store.zero_grad()
            lv.value.backward()
            opt_b.step()
            log.append({"stage": "ft_b", "task": task.task_id, "step": step,
                        "loss": lv.scalar})
            step += 1
    metrics_b = evaluate_task(store, encoder, vocab, task.test, task.head, prefix)
    return store, {"stage_a": metrics_a, "stage_b": metrics_b, "log": log}


# ------------------------------------------------------------------ multi-task


def finetune_multitask(store: ParamStore, encoder: Encoder, vocab: Vocab,
                       tasks: list[TaskSpec], epochs: int, lr: float = 2e-5,
                       batch_size: int = 32, weight_decay: float = 1e-4,
                       seed: int = 0) -> tuple[ParamStore, dict, list]:
    """Merged-and-shuffled homogeneous minibatches over a shared encoder.

    Each batch belongs to exactly one task; the update touches the encoder
    and that task's head only.  Single-task joint training is the T=1 case.
    """
    if not tasks:
        raise ValueError("finetune_multitask: no tasks")
    ids = [t.task_id for t in tasks]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate task ids: {ids}")
    enc_names = encoder.param_names()
    head_names: dict[int, list[str]] = {}
    datasets: dict[int, tuple] = {}
    for t in tasks:
        head_names[t.task_id] = init_head_params(store, t.head, encoder.cfg.hidden,
                                                 t.prefix, seed=seed + t.task_id)
        data = encode_batch(vocab, t.train, encoder.cfg.max_len)
        datasets[t.task_id] = (t, data, np.asarray([r.label for r in t.train]))
    all_names = enc_names + [n for names in head_names.values() for n in names]
    opt = AdamW(store, lr=lr, weight_decay=weight_decay, param_names=all_names)
    batch_log = []
    step = 0
    for epoch in range(epochs):
        merged = []
        for t in tasks:
            n = len(datasets[t.task_id][2])
            order = ad.make_rng(seed, _MT_ORDER, epoch, t.task_id).permutation(n)
            merged.extend((t.task_id, order[lo:lo + batch_size])
                          for lo in range(0, n, batch_size))
        shuffle = ad.make_rng(seed, _MT_SHUFFLE, epoch).permutation(len(merged))
        for mi in shuffle:
            tid, rows = merged[mi]
            task, data, labels = datasets[tid]
            sub = data.trimmed_rows(rows)
            stack = encoder.forward(store, sub.ids, sub.attention_mask)
            logits = head_forward(store, task.head, stack, sub.attention_mask, task.prefix)
            lv = loss_cls(logits, labels[rows])
            store.zero_grad()
            lv.value.backward()
            opt.step(names=enc_names + head_names[tid])
            batch_log.append({"stage": "mt", "epoch": epoch, "step": step, "task": tid,
                              "batch_size": len(rows), "loss": lv.scalar})
            step += 1
    per_task = {t.task_id: evaluate_task(store, encoder, vocab, t.test, t.head, t.prefix)
                for t in tasks}
    return store, per_task, batch_log


def finetune_joint(store: ParamStore, encoder: Encoder, vocab: Vocab, task: TaskSpec,
                   epochs: int, lr: float = 2e-5, batch_size: int = 32,
                   weight_decay: float = 1e-4, seed: int = 0):
    """Single-task joint training: the one-task instance of the merged loop."""
    return finetune_multitask(store, encoder, vocab, [task], epochs, lr=lr,
                              batch_size=batch_size, weight_decay=weight_decay, seed=seed)
