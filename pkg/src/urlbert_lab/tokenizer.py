"""URL subword tokenizer: likelihood-driven merges, lowercase normalization.

Training starts from the character alphabet (each char in both word-initial
and ``##``-continuation form) and greedily adds the merge with the best
count(ab) / (count(a) * count(b)) score until the target size is reached or
no merges remain.  Encoding is greedy longest-match per pre-token; URLs are
pre-tokenized into alphanumeric runs and single punctuation characters, so
concatenating decoded pieces reconstructs the lowercased input exactly.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

SPECIALS = ("[PAD]", "[UNK]", "[CLS]", "[MASK]", "[REP]", "[SHU]")
PAD_ID, UNK_ID, CLS_ID, MASK_ID, REP_ID, SHU_ID = range(6)
N_SPECIALS = len(SPECIALS)
CONTINUATION = "##"

VOCAB_FORMAT_VERSION = 1


@dataclass
class Vocab:
    tokens: tuple[str, ...]  # full inventory; indices 0-5 are the specials
    _piece_ids: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if tuple(self.tokens[:N_SPECIALS]) != SPECIALS:
            raise ValueError("vocab must start with the six reserved special tokens")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("vocab contains duplicate tokens")
        for tok in self.tokens[N_SPECIALS:]:
            if not tok:
                raise ValueError("empty token in vocab")
            if tok.lower() != tok:
                raise ValueError(f"uppercase token in vocab: {tok!r}")
        self._piece_ids = {tok: i for i, tok in enumerate(self.tokens[N_SPECIALS:],
                                                          start=N_SPECIALS)}

    @property
    def size(self) -> int:
        return len(self.tokens)

    def is_special(self, token_id: int) -> bool:
        return token_id < N_SPECIALS

    def piece_id(self, piece: str) -> int | None:
        return self._piece_ids.get(piece)

    def token_of(self, token_id: int) -> str:
        if not 0 <= token_id < len(self.tokens):
            raise ValueError(f"token id {token_id} out of range for vocab size {len(self.tokens)}")
        return self.tokens[token_id]

    def save(self, path) -> None:
        payload = {
            "version": VOCAB_FORMAT_VERSION,
            "specials": list(SPECIALS),
            "continuation_prefix": CONTINUATION,
            "tokens": list(self.tokens[N_SPECIALS:]),
        }
        with open(path, "w", encoding="utf-8") as f:
            json.dump(payload, f, ensure_ascii=False, indent=2)
            f.write("\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(path, encoding="utf-8") as f:
            payload = json.load(f)
        if payload.get("version") != VOCAB_FORMAT_VERSION:
            raise ValueError(f"unsupported vocab version {payload.get('version')}")
        if payload.get("specials") != list(SPECIALS) or payload.get("continuation_prefix") != CONTINUATION:
            raise ValueError("vocab file has unexpected special tokens")
        return cls(tokens=tuple(SPECIALS) + tuple(payload["tokens"]))


@dataclass
class TokenSeq:
    ids: np.ndarray
    attention_mask: np.ndarray
    true_len: int


@dataclass
class Batch:
    ids: np.ndarray            # (B, L) int32
    attention_mask: np.ndarray  # (B, L) int8
    true_lens: np.ndarray       # (B,) int32

    def __len__(self):
        return self.ids.shape[0]

    def rows(self, idx) -> "Batch":
        return Batch(ids=self.ids[idx], attention_mask=self.attention_mask[idx],
                     true_lens=self.true_lens[idx])

    def trimmed_rows(self, idx) -> "Batch":
        """Row subset cut to its longest true length; identical results under
        masking, cheaper attention."""
        sub = self.rows(idx)
        m = max(int(sub.true_lens.max()), 2)
        return Batch(ids=sub.ids[:, :m], attention_mask=sub.attention_mask[:, :m],
                     true_lens=sub.true_lens)


def bucket_batches(true_lens: np.ndarray, batch_size: int, rng: np.random.Generator,
                   min_size: int = 1) -> list[np.ndarray]:
    """Shuffled length-bucketed minibatches: random permutation, stable sort by
    length, chunk, shuffle chunk order.  Keeps batches near-uniform in length
    so trimmed attention stays cheap; deterministic under the generator."""
    n = len(true_lens)
    perm = rng.permutation(n)
    order = perm[np.argsort(np.asarray(true_lens)[perm], kind="stable")]
    batches = [order[lo:lo + batch_size] for lo in range(0, n, batch_size)]
    batches = [b for b in batches if len(b) >= min_size]
    chunk_order = rng.permutation(len(batches))
    return [batches[i] for i in chunk_order]


def _pretokenize(text: str) -> list[str]:
    """Alphanumeric runs plus single non-alphanumeric characters."""
    words = []
    run = []
    for ch in text:
        if ch.isalnum():
            run.append(ch)
        else:
            if run:
                words.append("".join(run))
                run = []
            words.append(ch)
    if run:
        words.append("".join(run))
    return words


def _word_pieces(word: str) -> list[str]:
    return [word[0]] + [CONTINUATION + c for c in word[1:]]


def _adjacent_pairs(pieces) -> list[tuple[str, str]]:
    return list(zip(pieces[:-1], pieces[1:]))


def _merge_in_word(pieces: list[str], a: str, b: str, merged: str) -> list[str]:
    out = []
    i = 0
    while i < len(pieces):
        if i + 1 < len(pieces) and pieces[i] == a and pieces[i + 1] == b:
            out.append(merged)
            i += 2
        else:
            out.append(pieces[i])
            i += 1
    return out


def train_vocab(corpus, target_size: int, seed: int = 0) -> Vocab:
    """Train a vocabulary on UrlRecords or raw strings.

    ``seed`` is part of the contract but the trainer is fully deterministic:
    ties are broken by pair count and then lexicographically.
    """
    del seed
    texts = [getattr(r, "url", r).lower() for r in corpus]
    if not texts:
        raise ValueError("train_vocab: empty corpus")
    word_counts = Counter()
    for t in texts:
        word_counts.update(_pretokenize(t))

    chars = sorted({c for w in word_counts for c in w})
    alphabet = [c for c in chars] + [CONTINUATION + c for c in chars]
    min_size = N_SPECIALS + len(alphabet)
    if target_size < min_size:
        raise ValueError(f"target_size {target_size} below minimum {min_size} "
                         f"(6 specials + alphabet of {len(alphabet)})")

    vocab_list = list(alphabet)
    vocab_set = set(vocab_list)

    words = [list(_word_pieces(w)) for w in word_counts]
    counts = list(word_counts.values())
    piece_count = Counter()
    pair_count = Counter()
    pair_words: dict[tuple[str, str], set[int]] = {}
    for wi, (pieces, c) in enumerate(zip(words, counts)):
        for p in pieces:
            piece_count[p] += c
        for pair in _adjacent_pairs(pieces):
            pair_count[pair] += c
            pair_words.setdefault(pair, set()).add(wi)

    def best_pair():
        # unigram-likelihood gain of fusing the pair: c_ab*log(c_ab*N/(c_a*c_b));
        # the c_ab factor keeps frequent merges ahead of one-off co-occurrences
        total = sum(piece_count.values())
        log_total = math.log(total)
        best = None
        best_key = None
        for pair, pc in pair_count.items():
            if pc <= 0:
                continue
            a, b = pair
            score = pc * (math.log(pc) + log_total
                          - math.log(piece_count[a]) - math.log(piece_count[b]))
            if best is None or score > best_key[0] or (
                    score == best_key[0] and (pc > best_key[1] or (
                    pc == best_key[1] and (a, b) < (best_key[2], best_key[3])))):
                best, best_key = pair, (score, pc, a, b)
        return best

    while N_SPECIALS + len(vocab_list) < target_size:
        pair = best_pair()
        if pair is None:
            break
        a, b = pair
        merged = a + b[len(CONTINUATION):] if b.startswith(CONTINUATION) else a + b
        affected = pair_words.get(pair, set())
        for wi in sorted(affected):
            pieces = words[wi]
            if not any(pieces[i] == a and pieces[i + 1] == b for i in range(len(pieces) - 1)):
                continue
            c = counts[wi]
            for p in pieces:
                piece_count[p] -= c
            for pr in _adjacent_pairs(pieces):
                pair_count[pr] -= c
            new_pieces = _merge_in_word(pieces, a, b, merged)
            words[wi] = new_pieces
            for p in new_pieces:
                piece_count[p] += c
            for pr in _adjacent_pairs(new_pieces):
                pair_count[pr] += c
                pair_words.setdefault(pr, set()).add(wi)
        pair_count.pop(pair, None)
        pair_words.pop(pair, None)
        if merged not in vocab_set:
            vocab_list.append(merged)
            vocab_set.add(merged)

    return Vocab(tokens=tuple(SPECIALS) + tuple(vocab_list))


def _encode_word(vocab: Vocab, word: str) -> list[int]:
    ids = []
    i = 0
    first = True
    n = len(word)
    while i < n:
        prefix = "" if first else CONTINUATION
        match_id = None
        match_end = i
        for j in range(n, i, -1):
            pid = vocab.piece_id(prefix + word[i:j])
            if pid is not None:
                match_id, match_end = pid, j
                break
        if match_id is not None:
            ids.append(match_id)
            i = match_end
            first = False
        else:
            # unknown span: one [UNK] until some continuation piece matches again
            ids.append(UNK_ID)
            i += 1
            first = False
            while i < n and vocab.piece_id(CONTINUATION + word[i]) is None:
                i += 1
    return ids


def encode(vocab: Vocab, url: str, max_len: int) -> TokenSeq:
    """Lowercase, greedy longest-match segmentation, [CLS] prefix, pad/truncate."""
    if max_len < 2:
        raise ValueError(f"max_len must be >= 2, got {max_len}")
    ids = [CLS_ID]
    for word in _pretokenize(url.lower()):
        if len(ids) >= max_len:
            break
        ids.extend(_encode_word(vocab, word))
    ids = ids[:max_len]
    true_len = len(ids)
    out = np.full(max_len, PAD_ID, dtype=np.int32)
    out[:true_len] = ids
    mask = np.zeros(max_len, dtype=np.int8)
    mask[:true_len] = 1
    return TokenSeq(ids=out, attention_mask=mask, true_len=true_len)


def encode_batch(vocab: Vocab, urls, max_len: int) -> Batch:
    if max_len < 2:
        raise ValueError(f"max_len must be >= 2, got {max_len}")
    word_cache: dict[str, list[int]] = {}
    n = len(urls)
    ids = np.full((n, max_len), PAD_ID, dtype=np.int32)
    mask = np.zeros((n, max_len), dtype=np.int8)
    lens = np.zeros(n, dtype=np.int32)
    for r, url in enumerate(urls):
        url = getattr(url, "url", url)
        seq = [CLS_ID]
        for word in _pretokenize(url.lower()):
            if len(seq) >= max_len:
                break
            cached = word_cache.get(word)
            if cached is None:
                cached = word_cache[word] = _encode_word(vocab, word)
            seq.extend(cached)
        seq = seq[:max_len]
        ids[r, :len(seq)] = seq
        mask[r, :len(seq)] = 1
        lens[r] = len(seq)
    return Batch(ids=ids, attention_mask=mask, true_lens=lens)


def decode(vocab: Vocab, seq) -> str:
    """Inverse of encode on in-alphabet input: strips specials, joins pieces."""
    ids = seq.ids if isinstance(seq, TokenSeq) else np.asarray(seq)
    parts = []
    for tid in np.asarray(ids).reshape(-1).tolist():
        tok = vocab.token_of(int(tid))
        if tid in (PAD_ID, CLS_ID):
            continue
        if vocab.is_special(tid):
            parts.append(tok)  # [UNK]/[MASK]/[REP]/[SHU] stay visible
        elif tok.startswith(CONTINUATION):
            parts.append(tok[len(CONTINUATION):])
        else:
            parts.append(tok)
    return "".join(parts)
