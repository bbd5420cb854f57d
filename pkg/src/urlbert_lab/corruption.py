"""Pre-training supervision generators.

``corrupt_rstd`` builds the three-way token classification target (shuffled /
replaced / original) by deranging a small set of positions within each
sequence and substituting random vocabulary ids at another disjoint set.
``mask_mlm`` is the standard 15% masking with the 80/10/10 rule.  Both are
pure functions of (batch, rates, vocab, seed); CLS and padding are never
touched and carry the ignore label.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import make_rng
from .tokenizer import Batch, MASK_ID, N_SPECIALS, Vocab

LBL_SHUFFLED = 0
LBL_REPLACED = 1
LBL_ORIGINAL = 2
LBL_IGNORE = -1

_MIN_NON_SPECIAL = 8


@dataclass
class RstdBatch:
    corrupted_ids: np.ndarray  # (B, L) int32
    labels: np.ndarray         # (B, L) int32 in {0,1,2,-1}


@dataclass
class MlmBatch:
    masked_ids: np.ndarray  # (B, L) int32
    targets: np.ndarray     # (B, L) int32; original id where selected, -1 elsewhere


def _real_positions(batch: Batch, row: int) -> np.ndarray:
    """Supervised positions: attended and not the CLS slot."""
    mask = batch.attention_mask[row]
    pos = np.nonzero(mask)[0]
    return pos[pos > 0]


def _shuffle_perm(rng: np.random.Generator, values: np.ndarray) -> np.ndarray:
    """Fixed-point-free permutation of the selected slots (k >= 2).

    When the selected id multiset admits an arrangement where every slot's
    value changes (max multiplicity m with 2m <= k), the permutation is drawn
    from those; duplicates that make it impossible fall back to a plain
    positional derangement.
    """
    k = len(values)
    _, counts = np.unique(values, return_counts=True)
    m = int(counts.max())
    if 2 * m <= k:
        for _ in range(200):
            perm = rng.permutation(k)
            if np.all(values[perm] != values):
                return perm
        # sorted-rotation construction: slot order[i] sources order[(i+m) % k]
        order = np.argsort(values, kind="stable")
        perm = np.empty(k, dtype=np.int64)
        perm[order] = order[(np.arange(k) + m) % k]
        return perm
    if k == 2:
        return np.array([1, 0])
    while True:
        perm = rng.permutation(k)
        if not np.any(perm == np.arange(k)):
            return perm


def _random_replacement(rng: np.random.Generator, vocab_size: int, original: int) -> int:
    while True:
        candidate = int(rng.integers(N_SPECIALS, vocab_size))
        if candidate != original:
            return candidate


def corrupt_rstd(batch: Batch, shuffle_rate: float, replace_rate: float,
                 vocab: Vocab, seed) -> RstdBatch:
    if shuffle_rate < 0 or replace_rate < 0 or shuffle_rate + replace_rate >= 1.0:
        raise ValueError(f"invalid corruption rates ({shuffle_rate}, {replace_rate})")
    if vocab.size - N_SPECIALS < _MIN_NON_SPECIAL:
        raise ValueError(f"vocab too small for replacement: needs >= {_MIN_NON_SPECIAL} "
                         f"non-special tokens, has {vocab.size - N_SPECIALS}")
    keys = seed if isinstance(seed, (tuple, list)) else (seed,)
    ids = batch.ids.astype(np.int32, copy=True)
    labels = np.full(ids.shape, LBL_IGNORE, dtype=np.int32)
    for row in range(ids.shape[0]):
        rng = make_rng(*keys, row)
        real = _real_positions(batch, row)
        n = len(real)
        labels[row, real] = LBL_ORIGINAL
        if n == 0:
            continue
        # shuffle selection: ceil(rate*n), at least 2 so a derangement exists
        if shuffle_rate > 0 and n >= 2:
            k_sh = min(n, max(2, math.ceil(shuffle_rate * n)))
        else:
            k_sh = 0
        if k_sh >= 2:
            chosen = np.sort(rng.choice(real, size=k_sh, replace=False))
            original_vals = batch.ids[row, chosen]
            perm = _shuffle_perm(rng, original_vals)
            ids[row, chosen] = original_vals[perm]
            labels[row, chosen] = LBL_SHUFFLED
        else:
            chosen = np.empty(0, dtype=np.int64)
        # replacement selection: disjoint from the shuffled set
        remaining = np.setdiff1d(real, chosen, assume_unique=True)
        k_rp = min(len(remaining), math.ceil(replace_rate * n)) if replace_rate > 0 else 0
        if k_rp > 0:
            picked = np.sort(rng.choice(remaining, size=k_rp, replace=False))
            for p in picked:
                ids[row, p] = _random_replacement(rng, vocab.size, int(batch.ids[row, p]))
            labels[row, picked] = LBL_REPLACED
    return RstdBatch(corrupted_ids=ids, labels=labels)


def expected_rstd_counts(n_real: int, shuffle_rate: float, replace_rate: float) -> tuple[int, int]:
    """Ceiling arithmetic for the per-sequence selection sizes."""
    if shuffle_rate > 0 and n_real >= 2:
        k_sh = min(n_real, max(2, math.ceil(shuffle_rate * n_real)))
    else:
        k_sh = 0
    k_rp = min(n_real - k_sh, math.ceil(replace_rate * n_real)) if replace_rate > 0 else 0
    return k_sh, k_rp


def mask_mlm(batch: Batch, mask_rate: float, vocab: Vocab, seed) -> MlmBatch:
    if not 0.0 <= mask_rate < 1.0:
        raise ValueError(f"mask_rate must be in [0,1), got {mask_rate}")
    keys = seed if isinstance(seed, (tuple, list)) else (seed,)
    ids = batch.ids.astype(np.int32, copy=True)
    targets = np.full(ids.shape, LBL_IGNORE, dtype=np.int32)
    if mask_rate == 0.0:
        return MlmBatch(masked_ids=ids, targets=targets)
    for row in range(ids.shape[0]):
        rng = make_rng(*keys, row)
        real = _real_positions(batch, row)
        n = len(real)
        if n == 0:
            continue
        k = min(n, math.ceil(mask_rate * n))
        chosen = np.sort(rng.choice(real, size=k, replace=False))
        for p in chosen:
            original = int(batch.ids[row, p])
            targets[row, p] = original
            u = rng.random()
            if u < 0.8:
                ids[row, p] = MASK_ID
            elif u < 0.9:
                ids[row, p] = int(rng.integers(N_SPECIALS, vocab.size))
            # else: keep the original token
    return MlmBatch(masked_ids=ids, targets=targets)


def dump_corruption_audit(batch: Batch, rstd: RstdBatch, vocab: Vocab, path,
                          limit: int = 16) -> None:
    """Human-readable audit of what the corruption did to the first sequences."""
    label_names = {LBL_SHUFFLED: "SHUF", LBL_REPLACED: "REPL",
                   LBL_ORIGINAL: "orig", LBL_IGNORE: "----"}
    with open(path, "w", encoding="utf-8") as f:
        for row in range(min(limit, batch.ids.shape[0])):
            f.write(f"# sequence {row}\n")
            n = int(batch.true_lens[row])
            for pos in range(n):
                before = vocab.token_of(int(batch.ids[row, pos]))
                after = vocab.token_of(int(rstd.corrupted_ids[row, pos]))
                tag = label_names[int(rstd.labels[row, pos])]
                marker = "" if before == after else "  <-- changed"
                f.write(f"  {pos:3d} [{tag}] {before!r:20} -> {after!r:20}{marker}\n")
            f.write("\n")
