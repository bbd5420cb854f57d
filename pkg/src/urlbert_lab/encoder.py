"""Transformer encoder over token-id batches.

Post-layer-norm blocks (attention + residual + LN, then gelu FFN + residual +
LN), learned absolute position embeddings, and padded keys excluded from
attention via additive -inf logits.  All linear projections are bias-free;
the affine freedom lives in the layer norms, which keeps the checkpoint
naming scheme to ``embed.*``, ``layer{i}.attn.{q,k,v,o}``,
``layer{i}.ffn.{w1,w2}`` and ``layer{i}.ln{1,2}.{g,b}``.

``embed`` and ``encode_from_embeddings`` are split so an additive
perturbation can be injected into the embedding space between them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .checkpoint import ParamStore


@dataclass
class EncoderConfig:
    layers: int
    heads: int
    hidden: int
    max_len: int
    vocab_size: int
    ffn_mult: int = 4
    dropout_p: float = 0.1

    def __post_init__(self):
        if self.hidden % self.heads != 0:
            raise ValueError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if self.max_len < 2:
            raise ValueError(f"max_len must be >= 2, got {self.max_len}")
        if self.layers < 1 or self.vocab_size < 7:
            raise ValueError("need at least 1 layer and a vocab beyond the specials")

    def to_dict(self) -> dict:
        return {"layers": self.layers, "heads": self.heads, "hidden": self.hidden,
                "max_len": self.max_len, "vocab_size": self.vocab_size,
                "ffn_mult": self.ffn_mult, "dropout_p": self.dropout_p}

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**d)


@dataclass
class HiddenStack:
    """Per-layer hidden states; index 0 is the embedding output."""
    states: list

    def __post_init__(self):
        if not self.states:
            raise ValueError("empty hidden stack")

    @property
    def depth(self) -> int:
        return len(self.states) - 1


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    out = rng.normal(0.0, std, size=shape)
    while True:
        bad = np.abs(out) > 2.0 * std
        n_bad = int(bad.sum())
        if n_bad == 0:
            return out
        out[bad] = rng.normal(0.0, std, size=n_bad)


class Encoder:
    def __init__(self, cfg: EncoderConfig):
        self.cfg = cfg

    # -- parameters ------------------------------------------------------------

    def param_names(self) -> list[str]:
        names = ["embed.token", "embed.pos"]
        for i in range(self.cfg.layers):
            names += [f"layer{i}.attn.{k}" for k in ("q", "k", "v", "o")]
            names += [f"layer{i}.ffn.w1", f"layer{i}.ffn.w2"]
            names += [f"layer{i}.ln1.g", f"layer{i}.ln1.b",
                      f"layer{i}.ln2.g", f"layer{i}.ln2.b"]
        return names

    def init_params(self, store: ParamStore, seed: int, std: float = 0.02) -> None:
        cfg = self.cfg
        rng = ad.make_rng(seed, 0xE5C0DE)
        store.add("embed.token", _trunc_normal(rng, (cfg.vocab_size, cfg.hidden), std))
        store.add("embed.pos", _trunc_normal(rng, (cfg.max_len, cfg.hidden), std))
        ffn = cfg.hidden * cfg.ffn_mult
        for i in range(cfg.layers):
            for k in ("q", "k", "v", "o"):
                store.add(f"layer{i}.attn.{k}", _trunc_normal(rng, (cfg.hidden, cfg.hidden), std))
            store.add(f"layer{i}.ffn.w1", _trunc_normal(rng, (cfg.hidden, ffn), std))
            store.add(f"layer{i}.ffn.w2", _trunc_normal(rng, (ffn, cfg.hidden), std))
            for ln in ("ln1", "ln2"):
                store.add(f"layer{i}.{ln}.g", np.ones(cfg.hidden))
                store.add(f"layer{i}.{ln}.b", np.zeros(cfg.hidden))

    # -- forward ---------------------------------------------------------------

    def embed(self, store: ParamStore, ids: np.ndarray, dropout_seed=None) -> ad.Tensor:
        """Token + position embeddings; optional seeded embedding dropout.

        Dropout runs only when a seed is supplied (augmentation passes);
        plain training/inference passes stay deterministic without one.
        """
        ids = np.asarray(ids)
        if ids.ndim != 2:
            raise ValueError(f"embed: ids must be (batch, length), got {ids.shape}")
        if ids.shape[1] > self.cfg.max_len:
            raise ValueError(f"embed: sequence length {ids.shape[1]} exceeds max_len "
                             f"{self.cfg.max_len}")
        tok = ad.embedding_lookup(store["embed.token"], ids)
        pos = store["embed.pos"][0:ids.shape[1], :]
        out = ad.add(tok, pos)
        if dropout_seed is not None and self.cfg.dropout_p > 0.0:
            out = ad.dropout(out, self.cfg.dropout_p, dropout_seed)
        return out

    def _block(self, store: ParamStore, x: ad.Tensor, bias: np.ndarray, i: int) -> ad.Tensor:
        cfg = self.cfg
        B, L, H = x.shape
        h, d = cfg.heads, cfg.hidden // cfg.heads
        flat = ad.reshape(x, (B * L, H))

        def proj(name):
            w = store[f"layer{i}.attn.{name}"]
            y = ad.reshape(ad.matmul(flat, w), (B, L, h, d))
            return ad.transpose(y, (0, 2, 1, 3))  # (B, h, L, d)

        q, k, v = proj("q"), proj("k"), proj("v")
        scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(d))
        scores = ad.add(scores, ad.Tensor._wrap(bias))
        probs = ad.softmax(scores, axis=-1)
        ctx = ad.matmul(probs, v)  # (B, h, L, d)
        ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (B * L, H))
        attn_out = ad.reshape(ad.matmul(ctx, store[f"layer{i}.attn.o"]), (B, L, H))
        x = ad.layer_norm(ad.add(x, attn_out), store[f"layer{i}.ln1.g"], store[f"layer{i}.ln1.b"])
        flat2 = ad.reshape(x, (B * L, H))
        ffn = ad.matmul(ad.gelu(ad.matmul(flat2, store[f"layer{i}.ffn.w1"])),
                        store[f"layer{i}.ffn.w2"])
        ffn = ad.reshape(ffn, (B, L, H))
        return ad.layer_norm(ad.add(x, ffn), store[f"layer{i}.ln2.g"], store[f"layer{i}.ln2.b"])

    def encode_from_embeddings(self, store: ParamStore, emb: ad.Tensor,
                               attention_mask: np.ndarray) -> HiddenStack:
        mask = np.asarray(attention_mask)
        if emb.ndim != 3:
            raise ValueError(f"encode_from_embeddings: embeddings must be (B,L,H), got {emb.shape}")
        if mask.shape != emb.shape[:2]:
            raise ValueError(f"attention mask shape {mask.shape} does not match "
                             f"batch shape {emb.shape[:2]}")
        # additive key bias: 0 for real tokens, -inf for padding
        bias = np.where(mask[:, None, None, :] == 1, 0.0, -np.inf).astype(emb.dtype)
        states = [emb]
        x = emb
        for i in range(self.cfg.layers):
            x = self._block(store, x, bias, i)
            states.append(x)
        return HiddenStack(states=states)

    def forward(self, store: ParamStore, ids: np.ndarray, attention_mask: np.ndarray,
                dropout_seed=None) -> HiddenStack:
        emb = self.embed(store, ids, dropout_seed=dropout_seed)
        return self.encode_from_embeddings(store, emb, attention_mask)


def cls_vector(stack: HiddenStack, layer: int) -> ad.Tensor:
    """Position-0 slice of the requested state; layer 0 is the embedding."""
    if not 0 <= layer <= stack.depth:
        raise ValueError(f"layer {layer} out of range 0..{stack.depth}")
    return stack.states[layer][:, 0, :]
