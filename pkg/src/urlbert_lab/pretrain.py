"""Grouped sequential pre-training.

Stage 1 trains the structure head on three-way token corruption; stage 2
initializes from the stage-1 parameters and optimizes the composite
``con + mlm + weight * vat`` per minibatch:

  (a) one masked-LM pass supplies the MLM loss and, via a functional probe
      gradient at the embedding, the sign direction for the contrastive
      augmentation;
  (b) two dropout views of the same embeddings, each shifted by the sign
      step, are encoded and their final-layer CLS vectors feed the
      temperature-scaled contrastive loss;
  (c) the virtual-adversarial loss perturbs the same embeddings against the
      detached output distribution of the masked pass.

All randomness derives from (config.seed, stream constant, step), so equal
configs replay bit-identically at a fixed precision.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .adversarial import dropout_augment, fgsm_step, vat_perturb
from .checkpoint import ParamStore, save_checkpoint
from .corruption import RstdBatch, corrupt_rstd, dump_corruption_audit, mask_mlm
from .encoder import Encoder, EncoderConfig, cls_vector
from .eval_features import binary_auc
from .objectives import LossValue, loss_mlm, loss_rstd, nt_xent, stage2_loss
from .optim import AdamW
from .tokenizer import Batch, Vocab, bucket_batches, encode_batch

# seed-stream constants; every rng key is (seed, stream, step[, row])
_S1_ORDER, _S1_CORRUPT = 11, 12
_S2_ORDER, _S2_MASK, _S2_DROP_A, _S2_DROP_B, _S2_VAT = 21, 22, 23, 24, 25
_EVAL_CORRUPT, _EVAL_ALIGN = 31, 32


@dataclass
class PretrainConfig:
    stage1_epochs: int = 3
    stage2_epochs: int = 1
    batch_size: int = 128
    lr: float = 1e-4
    warmup_frac: float = 0.05
    weight_decay: float = 0.01
    seed: int = 0
    shuffle_rate: float = 0.05
    replace_rate: float = 0.05
    mask_rate: float = 0.15
    scl_dropout_p: float = 0.1
    fgsm_alpha: float = 0.01
    tau: float = 0.1
    vat_sigma2: float = 1.0
    vat_mu: float = 1.0
    vat_eps: float = 1.0
    vat_weight: float = 10.0
    max_steps_per_epoch: int | None = None

    def __post_init__(self):
        if self.stage1_epochs < 1 or self.stage2_epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (the contrastive task needs a negative)")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainLog:
    records: list = field(default_factory=list)

    def append(self, **fields) -> None:
        if self.records and fields.get("step", 0) <= self.records[-1]["step"]:
            raise ValueError("TrainLog steps must be monotone")
        self.records.append(fields)

    def losses(self, stage: str, key: str) -> list[float]:
        return [r[key] for r in self.records if r["stage"] == stage]

    def save_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for rec in self.records:
                f.write(json.dumps(rec, sort_keys=True) + "\n")


def init_model(enc_cfg: EncoderConfig, seed: int) -> tuple[Encoder, ParamStore]:
    """Encoder plus both pre-training heads, so stage handoff moves one store."""
    encoder = Encoder(enc_cfg)
    store = ParamStore()
    encoder.init_params(store, seed=seed)
    rng = ad.make_rng(seed, 0x4EAD)
    h, v = enc_cfg.hidden, enc_cfg.vocab_size
    store.add("head.rstd.w", rng.normal(0.0, 0.02, size=(h, 3)))
    store.add("head.rstd.b", np.zeros(3))
    store.add("head.mlm.w", rng.normal(0.0, 0.02, size=(h, v)))
    store.add("head.mlm.b", np.zeros(v))
    return encoder, store


def _linear3d(x: ad.Tensor, w: ad.Tensor, b: ad.Tensor) -> ad.Tensor:
    bsz, length, hidden = x.shape
    out = ad.add(ad.matmul(ad.reshape(x, (bsz * length, hidden)), w), b)
    return ad.reshape(out, (bsz, length, w.shape[1]))


def _trim(batch: Batch, rows: np.ndarray) -> Batch:
    return batch.trimmed_rows(rows)


def _epoch_batches(data: Batch, cfg: PretrainConfig, stream: int, epoch: int,
                   min_size: int = 1) -> list[np.ndarray]:
    rng = ad.make_rng(cfg.seed, stream, epoch)
    batches = bucket_batches(data.true_lens, cfg.batch_size, rng, min_size=min_size)
    if cfg.max_steps_per_epoch is not None:
        batches = batches[:cfg.max_steps_per_epoch]
    return batches


def _warmup_lr(cfg: PretrainConfig, step: int, total_steps: int) -> float:
    warmup = max(1, math.ceil(cfg.warmup_frac * total_steps))
    return cfg.lr * min(1.0, (step + 1) / warmup)


def _guard_finite(lv: LossValue, store: ParamStore, out_dir, stage: str, step: int):
    if lv.finite():
        return
    if out_dir is not None:
        save_checkpoint(store, f"{out_dir}/diagnostic",
                        meta={"stage": stage, "step": step, "reason": "non-finite loss"},
                        check_finite=False)
    raise FloatingPointError(f"{stage}: non-finite loss at step {step}"
                             + (f" (diagnostic checkpoint in {out_dir})" if out_dir else ""))


def run_stage1(cfg: PretrainConfig, records, vocab: Vocab, encoder: Encoder,
               store: ParamStore, log: TrainLog | None = None, out_dir=None,
               epoch_hook=None, dump_corruption_path=None) -> tuple[ParamStore, TrainLog]:
    """Structure stage: corruption -> encoder -> 3-way token head."""
    log = log if log is not None else TrainLog()
    data = encode_batch(vocab, records, encoder.cfg.max_len)
    opt = AdamW(store, lr=cfg.lr, weight_decay=cfg.weight_decay,
                param_names=encoder.param_names() + ["head.rstd.w", "head.rstd.b"])
    steps_per_epoch = len(_epoch_batches(data, cfg, _S1_ORDER, 0))
    total_steps = steps_per_epoch * cfg.stage1_epochs
    step = log.records[-1]["step"] + 1 if log.records else 0
    t0 = time.perf_counter()
    for epoch in range(cfg.stage1_epochs):
        for rows in _epoch_batches(data, cfg, _S1_ORDER, epoch):
            sub = _trim(data, rows)
            rstd = corrupt_rstd(sub, cfg.shuffle_rate, cfg.replace_rate, vocab,
                                seed=(cfg.seed, _S1_CORRUPT, step))
            if dump_corruption_path is not None and step == 0:
                dump_corruption_audit(sub, rstd, vocab, dump_corruption_path)
            emb = encoder.embed(store, rstd.corrupted_ids)
            stack = encoder.encode_from_embeddings(store, emb, sub.attention_mask)
            logits = _linear3d(stack.states[-1], store["head.rstd.w"], store["head.rstd.b"])
            lv = loss_rstd(logits, rstd.labels)
            _guard_finite(lv, store, out_dir, "stage1", step)
            store.zero_grad()
            lv.value.backward()
            opt.step(lr=_warmup_lr(cfg, step, total_steps))
            log.append(stage="stage1", step=step, epoch=epoch, loss_rstd=lv.scalar,
                       wall_time=time.perf_counter() - t0)
            step += 1
        if epoch_hook is not None and epoch_hook(epoch, store):
            break
    store.assert_finite()
    return store, log


def mlm_distribution_fn(cfg: PretrainConfig, encoder: Encoder, store: ParamStore,
                        attention_mask: np.ndarray, targets: np.ndarray):
    """Per-sequence output distribution: vocab softmax averaged over the
    supervised positions of the masked batch (feeds the VAT KL)."""
    supervised = (targets != -1)
    counts = supervised.sum(axis=1, keepdims=True)
    if (counts == 0).any():
        raise ValueError("mlm_distribution_fn: a row has no supervised positions")

    def dist_fn(emb: ad.Tensor) -> ad.Tensor:
        stack = encoder.encode_from_embeddings(store, emb, attention_mask)
        logits = _linear3d(stack.states[-1], store["head.mlm.w"], store["head.mlm.b"])
        probs = ad.softmax(logits, axis=-1)
        sel = ad.constant(supervised[:, :, None].astype(probs.dtype))
        summed = ad.tsum(ad.mul(probs, sel), axis=1)
        return ad.div(summed, ad.constant(counts.astype(probs.dtype)))

    return dist_fn


def _interleave_pairs(a: ad.Tensor, b: ad.Tensor) -> ad.Tensor:
    n, h = a.shape
    stacked = ad.concat([ad.reshape(a, (n, 1, h)), ad.reshape(b, (n, 1, h))], axis=1)
    return ad.reshape(stacked, (2 * n, h))


def stage2_step(cfg: PretrainConfig, encoder: Encoder, store: ParamStore, sub: Batch,
                vocab: Vocab, step: int) -> tuple[LossValue, LossValue, LossValue, LossValue]:
    """One composite minibatch: returns (total, con, mlm, vat)."""
    masked = mask_mlm(sub, cfg.mask_rate, vocab, seed=(cfg.seed, _S2_MASK, step))
    emb = encoder.embed(store, masked.masked_ids)
    stack = encoder.encode_from_embeddings(store, emb, sub.attention_mask)
    mlm_logits = _linear3d(stack.states[-1], store["head.mlm.w"], store["head.mlm.b"])
    lv_mlm = loss_mlm(mlm_logits, masked.targets)

    # contrastive views: dropout then a sign step along the MLM-loss gradient
    (g_emb,) = ad.grad(lv_mlm.value, [emb])
    view_a = fgsm_step(dropout_augment(emb, cfg.scl_dropout_p, (cfg.seed, _S2_DROP_A, step)),
                       g_emb, cfg.fgsm_alpha)
    view_b = fgsm_step(dropout_augment(emb, cfg.scl_dropout_p, (cfg.seed, _S2_DROP_B, step)),
                       g_emb, cfg.fgsm_alpha)
    cls_a = cls_vector(encoder.encode_from_embeddings(store, view_a, sub.attention_mask),
                       encoder.cfg.layers)
    cls_b = cls_vector(encoder.encode_from_embeddings(store, view_b, sub.attention_mask),
                       encoder.cfg.layers)
    lv_con = nt_xent(_interleave_pairs(cls_a, cls_b), cfg.tau)

    dist_fn = mlm_distribution_fn(cfg, encoder, store, sub.attention_mask, masked.targets)
    lv_vat, _ = vat_perturb(dist_fn, emb, cfg.vat_sigma2, cfg.vat_mu, cfg.vat_eps,
                            seed=(cfg.seed, _S2_VAT, step))
    total = stage2_loss(lv_con, lv_mlm, lv_vat, cfg.vat_weight)
    return total, lv_con, lv_mlm, lv_vat


def run_stage2(cfg: PretrainConfig, records, vocab: Vocab, encoder: Encoder,
               store: ParamStore, log: TrainLog | None = None, out_dir=None,
               epoch_hook=None) -> tuple[ParamStore, TrainLog]:
    """Semantic stage on parameters handed over from stage 1."""
    log = log if log is not None else TrainLog()
    data = encode_batch(vocab, records, encoder.cfg.max_len)
    opt = AdamW(store, lr=cfg.lr, weight_decay=cfg.weight_decay,
                param_names=encoder.param_names() + ["head.mlm.w", "head.mlm.b"])
    steps_per_epoch = len(_epoch_batches(data, cfg, _S2_ORDER, 0, min_size=2))
    total_steps = steps_per_epoch * cfg.stage2_epochs
    step0 = log.records[-1]["step"] + 1 if log.records else 0
    step = step0
    t0 = time.perf_counter()
    for epoch in range(cfg.stage2_epochs):
        for rows in _epoch_batches(data, cfg, _S2_ORDER, epoch, min_size=2):
            sub = _trim(data, rows)
            total, lv_con, lv_mlm, lv_vat = stage2_step(cfg, encoder, store, sub, vocab, step)
            _guard_finite(total, store, out_dir, "stage2", step)
            store.zero_grad()
            total.value.backward()
            opt.step(lr=_warmup_lr(cfg, step - step0, total_steps))
            log.append(stage="stage2", step=step, epoch=epoch,
                       loss_con=lv_con.scalar, loss_mlm=lv_mlm.scalar,
                       loss_vat=lv_vat.scalar, loss_total=total.scalar,
                       wall_time=time.perf_counter() - t0)
            step += 1
        if epoch_hook is not None and epoch_hook(epoch, store):
            break
    store.assert_finite()
    return store, log


def pretrain_all(cfg: PretrainConfig, enc_cfg: EncoderConfig, records, vocab: Vocab,
                 out_dir: str, skip_stage1: bool = False,
                 stage2_records=None, dump_corruption_path=None) -> dict:
    """Stage 1 then stage 2 with parameter handoff and lineage metadata."""
    import os

    encoder, store = init_model(enc_cfg, seed=cfg.seed)
    log = TrainLog()
    base_meta = {"encoder": enc_cfg.to_dict(), "pretrain_config": cfg.to_dict()}
    os.makedirs(out_dir, exist_ok=True)
    vocab.save(os.path.join(out_dir, "vocab.json"))

    stage1_checksum = None
    if skip_stage1:
        skipped = {"stage": "initialization", "skipped_stage1": True}
    else:
        store, log = run_stage1(cfg, records, vocab, encoder, store, log=log,
                                out_dir=out_dir, dump_corruption_path=dump_corruption_path)
        stage1_checksum = save_checkpoint(store, os.path.join(out_dir, "stage1"),
                                          meta={**base_meta, "stage": "stage1",
                                                "vocab_file": "../vocab.json"})
        skipped = {}

    stage2_initial = store.checksum()
    store, log = run_stage2(cfg, stage2_records if stage2_records is not None else records,
                            vocab, encoder, store, log=log, out_dir=out_dir)
    meta2 = {**base_meta, "stage": "stage2", "vocab_file": "../vocab.json",
             "parent_checksum": stage1_checksum,
             "stage2_initial_checksum": stage2_initial, **skipped}
    stage2_checksum = save_checkpoint(store, os.path.join(out_dir, "stage2"), meta=meta2)
    log.save_jsonl(os.path.join(out_dir, "trainlog.jsonl"))
    return {"encoder": encoder, "store": store, "log": log,
            "stage1_checksum": stage1_checksum, "stage2_checksum": stage2_checksum,
            "stage1_dir": None if skip_stage1 else os.path.join(out_dir, "stage1"),
            "stage2_dir": os.path.join(out_dir, "stage2")}


# ------------------------------------------------------------------ evaluation


def evaluate_rstd(cfg: PretrainConfig, records, vocab: Vocab, encoder: Encoder,
                  store: ParamStore, seed: int = 0,
                  batch_size: int = 256) -> tuple[float, float]:
    """Held-out corruption loss and the ROC-AUC of corrupted-vs-original
    detection (score = 1 - P(original) at supervised positions)."""
    data = encode_batch(vocab, records, encoder.cfg.max_len)
    total_loss = 0.0
    total_n = 0
    scores, truth = [], []
    with ad.no_grad():
        for lo in range(0, len(data), batch_size):
            rows = np.arange(lo, min(lo + batch_size, len(data)))
            sub = _trim(data, rows)
            rstd = corrupt_rstd(sub, cfg.shuffle_rate, cfg.replace_rate, vocab,
                                seed=(seed, _EVAL_CORRUPT, lo))
            stack = encoder.forward(store, rstd.corrupted_ids, sub.attention_mask)
            logits = _linear3d(stack.states[-1], store["head.rstd.w"], store["head.rstd.b"])
            lv = loss_rstd(logits, rstd.labels)
            total_loss += lv.scalar * lv.n_contributing
            total_n += lv.n_contributing
            probs = ad.softmax(logits, axis=-1).data
            supervised = rstd.labels != -1
            scores.append(1.0 - probs[:, :, 2][supervised])
            truth.append((rstd.labels[supervised] != 2).astype(int))
    auc = binary_auc(np.concatenate(truth), np.concatenate(scores))
    return total_loss / total_n, auc


def evaluate_alignment(cfg: PretrainConfig, records, vocab: Vocab, encoder: Encoder,
                       store: ParamStore, seed: int = 0,
                       n_pairs: int = 128) -> tuple[float, float]:
    """Mean cosine of positive pairs vs other-sequence pairs on held-out URLs,
    with views generated exactly like the stage-2 augmentation."""
    records = records[:n_pairs]
    data = encode_batch(vocab, records, encoder.cfg.max_len)
    sub = _trim(data, np.arange(len(data)))
    masked = mask_mlm(sub, cfg.mask_rate, vocab, seed=(seed, _EVAL_ALIGN, 0))
    emb = encoder.embed(store, masked.masked_ids)
    stack = encoder.encode_from_embeddings(store, emb, sub.attention_mask)
    logits = _linear3d(stack.states[-1], store["head.mlm.w"], store["head.mlm.b"])
    lv = loss_mlm(logits, masked.targets)
    (g_emb,) = ad.grad(lv.value, [emb])
    with ad.no_grad():
        va = fgsm_step(dropout_augment(emb.detach(), cfg.scl_dropout_p, (seed, _EVAL_ALIGN, 1)),
                       g_emb, cfg.fgsm_alpha)
        vb = fgsm_step(dropout_augment(emb.detach(), cfg.scl_dropout_p, (seed, _EVAL_ALIGN, 2)),
                       g_emb, cfg.fgsm_alpha)
        ca = cls_vector(encoder.encode_from_embeddings(store, va, sub.attention_mask),
                        encoder.cfg.layers).data
        cb = cls_vector(encoder.encode_from_embeddings(store, vb, sub.attention_mask),
                        encoder.cfg.layers).data
    ua = ca / np.linalg.norm(ca, axis=1, keepdims=True)
    ub = cb / np.linalg.norm(cb, axis=1, keepdims=True)
    pos = float((ua * ub).sum(axis=1).mean())
    cross = ua @ ub.T
    n = cross.shape[0]
    neg_ab = cross[~np.eye(n, dtype=bool)]
    within_a = (ua @ ua.T)[~np.eye(n, dtype=bool)]
    within_b = (ub @ ub.T)[~np.eye(n, dtype=bool)]
    neg = float(np.concatenate([neg_ab, within_a, within_b]).mean())
    return pos, neg
