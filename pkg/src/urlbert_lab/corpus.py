"""URL corpora: loaders, deterministic synthetic generation, train/test splits.

File formats:
  corpus   - UTF-8 text, one URL per line, blank lines skipped
  labeled  - UTF-8 TSV ``url<TAB>label`` with integer labels; lines starting
             with ``#`` are comments
  labelmap - JSON object mapping label id (as string) to a display name
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .autodiff import make_rng

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class UrlRecord:
    url: str
    label: int | None = None
    task_id: int | None = None

    def __post_init__(self):
        if not self.url.strip():
            raise ValueError("UrlRecord: url empty after trimming")
        if "\n" in self.url or "\r" in self.url:
            raise ValueError("UrlRecord: url contains newline characters")
        if self.label is not None and self.label < 0:
            raise ValueError(f"UrlRecord: negative label {self.label}")


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float
    seed: int
    stratified: bool = False

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError(f"train_fraction must be in (0,1), got {self.train_fraction}")


# ------------------------------------------------------------------ loading


def load_corpus(path) -> list[UrlRecord]:
    with open(path, "rb") as f:
        raw_lines = f.read().splitlines()
    records = []
    for lineno, raw in enumerate(raw_lines, start=1):
        try:
            line = raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ValueError(f"{path}: line {lineno}: invalid UTF-8 ({exc})") from exc
        url = line.strip()
        if not url:
            continue
        records.append(UrlRecord(url=url))
    return records


def load_labeled(path, task_id: int) -> list[UrlRecord]:
    with open(path, "rb") as f:
        raw_lines = f.read().splitlines()
    records = []
    for lineno, raw in enumerate(raw_lines, start=1):
        try:
            line = raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ValueError(f"{path}: line {lineno}: invalid UTF-8 ({exc})") from exc
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != 2:
            raise ValueError(f"{path}: line {lineno}: expected 'url<TAB>label', "
                             f"got {len(fields)} fields")
        url, label_text = fields[0].strip(), fields[1].strip()
        try:
            label = int(label_text)
        except ValueError as exc:
            raise ValueError(f"{path}: line {lineno}: label {label_text!r} is not an integer") from exc
        if label < 0:
            raise ValueError(f"{path}: line {lineno}: negative label {label}")
        records.append(UrlRecord(url=url, label=label, task_id=task_id))
    classes = sorted({r.label for r in records})
    log.info("loaded %d labeled records from %s (task %d, %d classes)",
             len(records), path, task_id, len(classes))
    return records


def save_corpus(records, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for r in records:
            f.write(r.url + "\n")


def save_labeled(records, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for r in records:
            if r.label is None:
                raise ValueError(f"save_labeled: record without label: {r.url}")
            f.write(f"{r.url}\t{r.label}\n")


def write_label_map(names: dict[int, str], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump({str(k): v for k, v in names.items()}, f, indent=2, sort_keys=True)
        f.write("\n")


def read_label_map(path) -> dict[int, str]:
    with open(path, encoding="utf-8") as f:
        return {int(k): v for k, v in json.load(f).items()}


def filter_max_length(records, max_chars: int = 150) -> list[UrlRecord]:
    """Optional dataset-prep filter; the loaders themselves never drop long URLs."""
    return [r for r in records if len(r.url) <= max_chars]


# ------------------------------------------------------------------ synthesis


@dataclass
class SynthGrammar:
    """Weighted production table for synthetic URLs.

    Families carry disjoint path-keyword pools so family identity is
    recoverable from the path, which lets labeled classification tasks be
    synthesized from the same generator.
    """

    schemes: dict[str, float]
    tlds: list[str]
    domain_words: list[str]
    query_keys: list[str]
    families: list[dict] = field(default_factory=list)
    www_prob: float = 0.3
    second_domain_word_prob: float = 0.7
    path_segments: tuple[int, int] = (1, 3)
    numeric_segment_prob: float = 0.25
    query_params: tuple[int, int] = (0, 2)
    numeric_value_prob: float = 0.5

    def __post_init__(self):
        if len(self.families) < 2:
            raise ValueError("grammar needs at least 2 families")
        if not self.schemes or not self.tlds or not self.domain_words:
            raise ValueError("grammar pools must be non-empty")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthGrammar":
        return cls(
            schemes=dict(d["schemes"]),
            tlds=list(d["tlds"]),
            domain_words=list(d["domain_words"]),
            query_keys=list(d["query_keys"]),
            families=list(d["families"]),
            www_prob=d.get("www_prob", 0.3),
            second_domain_word_prob=d.get("second_domain_word_prob", 0.7),
            path_segments=tuple(d.get("path_segments", (1, 3))),
            numeric_segment_prob=d.get("numeric_segment_prob", 0.25),
            query_params=tuple(d.get("query_params", (0, 2))),
            numeric_value_prob=d.get("numeric_value_prob", 0.5),
        )

    @classmethod
    def from_json(cls, path) -> "SynthGrammar":
        with open(path, encoding="utf-8") as f:
            return cls.from_dict(json.load(f))

    def family_words(self, idx: int) -> list[str]:
        return list(self.families[idx]["path_words"])


def default_grammar() -> SynthGrammar:
    text = resources.files("urlbert_lab").joinpath("data/default_grammar.json").read_text("utf-8")
    return SynthGrammar.from_dict(json.loads(text))


def _weighted_choice(rng, table: dict[str, float]) -> str:
    keys = list(table)
    w = np.asarray([table[k] for k in keys], dtype=float)
    return keys[rng.choice(len(keys), p=w / w.sum())]


def _gen_url(rng, g: SynthGrammar, family: int) -> str:
    words = g.families[family]["path_words"]
    parts = [_weighted_choice(rng, g.schemes), "://"]
    if rng.random() < g.www_prob:
        parts.append("www.")
    domain = g.domain_words[rng.integers(len(g.domain_words))]
    if rng.random() < g.second_domain_word_prob:
        domain += g.domain_words[rng.integers(len(g.domain_words))]
    parts.append(domain)
    parts.append(".")
    parts.append(g.tlds[rng.integers(len(g.tlds))])
    lo, hi = g.path_segments
    n_seg = int(rng.integers(lo, hi + 1))
    # first segment always comes from the family pool: labels stay recoverable
    parts.append("/" + words[rng.integers(len(words))])
    for _ in range(n_seg - 1):
        if rng.random() < g.numeric_segment_prob:
            parts.append(f"/{rng.integers(10000)}")
        else:
            parts.append("/" + words[rng.integers(len(words))])
    qlo, qhi = g.query_params
    n_q = int(rng.integers(qlo, qhi + 1))
    for j in range(n_q):
        key = g.query_keys[rng.integers(len(g.query_keys))]
        if rng.random() < g.numeric_value_prob:
            value = str(rng.integers(10000))
        else:
            value = words[rng.integers(len(words))]
        parts.append(("?" if j == 0 else "&") + key + "=" + value)
    return "".join(parts)


def synth_corpus(n: int, seed: int, grammar: SynthGrammar | None = None) -> list[UrlRecord]:
    """Deterministic synthetic corpus; record i depends only on (seed, i, grammar)."""
    if n < 1:
        raise ValueError(f"synth_corpus: n must be >= 1, got {n}")
    g = grammar or default_grammar()
    records = []
    for i in range(n):
        rng = make_rng(seed, i)
        family = int(rng.integers(len(g.families)))
        records.append(UrlRecord(url=_gen_url(rng, g, family), label=family))
    return records


def synth_task(n: int, seed: int, families: tuple[int, ...], task_id: int,
               grammar: SynthGrammar | None = None) -> list[UrlRecord]:
    """Labeled synthetic dataset over a subset of grammar families.

    Label is the index into ``families`` (0..len-1), not the raw family id.
    """
    if n < 1:
        raise ValueError(f"synth_task: n must be >= 1, got {n}")
    g = grammar or default_grammar()
    for fam in families:
        if not 0 <= fam < len(g.families):
            raise ValueError(f"synth_task: family {fam} out of range")
    records = []
    for i in range(n):
        rng = make_rng(seed, task_id, i)
        cls = int(rng.integers(len(families)))
        records.append(UrlRecord(url=_gen_url(rng, g, families[cls]), label=cls,
                                 task_id=task_id))
    return records


# ------------------------------------------------------------------ splitting


def _train_count(frac: float, n: int) -> int:
    return int(np.floor(frac * n + 0.5))


def split(records, spec: SplitSpec) -> tuple[list[UrlRecord], list[UrlRecord]]:
    """Disjoint, exhaustive train/test partition, deterministic under the spec."""
    if not records:
        raise ValueError("split: empty record list")
    rng = make_rng(spec.seed)
    n = len(records)
    if not spec.stratified:
        perm = rng.permutation(n)
        k = _train_count(spec.train_fraction, n)
        train_idx = sorted(perm[:k].tolist())
        test_idx = sorted(perm[k:].tolist())
    else:
        if any(r.label is None for r in records):
            raise ValueError("split: stratified mode needs labels on every record")
        by_class: dict[int, list[int]] = {}
        for i, r in enumerate(records):
            by_class.setdefault(r.label, []).append(i)
        train_idx, test_idx = [], []
        for cls in sorted(by_class):
            idxs = np.asarray(by_class[cls])
            if len(idxs) == 1:
                warnings.warn(f"split: class {cls} has a single member; placed in train")
                train_idx.extend(idxs.tolist())
                continue
            perm = idxs[rng.permutation(len(idxs))]
            k = _train_count(spec.train_fraction, len(idxs))
            train_idx.extend(perm[:k].tolist())
            test_idx.extend(perm[k:].tolist())
        train_idx.sort()
        test_idx.sort()
    return [records[i] for i in train_idx], [records[i] for i in test_idx]
