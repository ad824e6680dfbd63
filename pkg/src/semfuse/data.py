"""Dataset schema, ingestion, lexicon filtering, fold planning and corpus statistics."""

from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from fractions import Fraction
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError
from sklearn.feature_extraction.text import ENGLISH_STOP_WORDS

from .text_encoder import clean_text

log = logging.getLogger(__name__)

RECORD_KEYS = ("id", "text", "image_path", "ocr_text", "binary_label", "category_label", "source")


class DatasetError(ValueError):
    """Raised for unreadable or invalid dataset files."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class AgreementUndefinedError(ArithmeticError):
    """Fleiss' kappa is undefined when expected agreement equals 1."""


class BinaryLabel(IntEnum):
    NON_ANTISEMITIC = 0
    ANTISEMITIC = 1


class Category(str, Enum):
    POLITICAL = "political"
    ECONOMIC = "economic"
    RELIGIOUS = "religious"
    RACIAL = "racial"

    @property
    def index(self) -> int:
        return CATEGORIES.index(self)


CATEGORIES = tuple(Category)


class Source(str, Enum):
    TWITTER = "twitter"
    GAB = "gab"


@dataclass(frozen=True)
class PostRecord:
    id: str
    text: str
    image_path: str
    ocr_text: str
    binary_label: BinaryLabel | None
    category_label: Category | None
    source: Source

    def __post_init__(self):
        if not isinstance(self.id, str) or not self.id:
            raise ValueError("id must be a non-empty string")
        if self.binary_label is None:
            if self.category_label is not None:
                raise ValueError("category_label given for an unlabeled record")
            return
        antisemitic = self.binary_label == BinaryLabel.ANTISEMITIC
        if antisemitic != (self.category_label is not None):
            raise ValueError(
                "category_label must be set exactly when binary_label is Antisemitic "
                f"(binary_label={int(self.binary_label)}, category_label={self.category_label})"
            )

    @classmethod
    def from_json(cls, obj: dict, labeled: bool = True) -> PostRecord:
        if not isinstance(obj, dict):
            raise ValueError("record is not a JSON object")
        required = set(RECORD_KEYS) if labeled else set(RECORD_KEYS) - {"binary_label", "category_label"}
        missing = required - obj.keys()
        if missing:
            raise ValueError(f"missing keys: {sorted(missing)}")
        extra = obj.keys() - set(RECORD_KEYS)
        if extra:
            raise ValueError(f"unknown keys: {sorted(extra)}")
        for key in ("id", "text", "image_path", "ocr_text"):
            if not isinstance(obj[key], str):
                raise ValueError(f"{key} must be a string")
        raw_binary = obj.get("binary_label")
        if raw_binary is None:
            if labeled:
                raise ValueError("binary_label is required")
            binary = None
        elif isinstance(raw_binary, bool) or raw_binary not in (0, 1):
            raise ValueError(f"binary_label must be 0 or 1, got {raw_binary!r}")
        else:
            binary = BinaryLabel(raw_binary)
        raw_cat = obj.get("category_label")
        category = None if raw_cat is None else Category(raw_cat)
        return cls(
            id=obj["id"],
            text=obj["text"],
            image_path=obj["image_path"],
            ocr_text=obj["ocr_text"],
            binary_label=binary,
            category_label=category,
            source=Source(obj["source"]),
        )

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "text": self.text,
            "image_path": self.image_path,
            "ocr_text": self.ocr_text,
            "binary_label": None if self.binary_label is None else int(self.binary_label),
            "category_label": None if self.category_label is None else self.category_label.value,
            "source": self.source.value,
        }


class LoadedDataset(list):
    """A list of records that also remembers which lines were skipped."""

    def __init__(self, records: Iterable[PostRecord] = (), skipped: Sequence[tuple[int, str]] = ()):
        super().__init__(records)
        self.skipped = list(skipped)


def _image_ok(path: Path) -> bool:
    try:
        with Image.open(path) as im:
            im.verify()
        return True
    except (OSError, UnidentifiedImageError):
        return False


def load_dataset(
    path: str | Path,
    image_root: str | Path | None = None,
    strict: bool = True,
    labeled: bool = True,
) -> LoadedDataset:
    """Read a JSONL dataset.

    Strict mode raises :class:`DatasetError` on the first bad line; lenient
    mode skips it and records ``(line_number, reason)`` in ``.skipped``.
    Images are checked for decodability only when ``image_root`` is given.
    """
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"dataset file not found: {path}")
    records = []
    skipped = []
    seen = set()
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise ValueError(f"malformed JSON ({exc.msg})") from None
                rec = PostRecord.from_json(obj, labeled=labeled)
                if rec.id in seen:
                    raise ValueError(f"duplicate id {rec.id!r}")
                if image_root is not None and not _image_ok(Path(image_root) / rec.image_path):
                    raise ValueError(f"missing or undecodable image {rec.image_path!r}")
            except ValueError as exc:
                if strict:
                    raise DatasetError(str(exc), line=lineno) from None
                skipped.append((lineno, str(exc)))
                continue
            seen.add(rec.id)
            records.append(rec)
    if skipped:
        log.warning("skipped %d invalid records in %s", len(skipped), path)
    return LoadedDataset(records, skipped)


def save_dataset(records: Iterable[PostRecord], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json(), ensure_ascii=False) + "\n")


def tokenize(text: str) -> list[str]:
    return clean_text(text).lower().split()


@dataclass(frozen=True)
class Lexicon:
    terms: frozenset

    def __post_init__(self):
        terms = frozenset(t.strip().lower() for t in self.terms)
        if not terms or "" in terms:
            raise ValueError("lexicon must be non-empty and contain no blank terms")
        object.__setattr__(self, "terms", terms)

    @classmethod
    def from_file(cls, path: str | Path) -> Lexicon:
        text = Path(path).read_text(encoding="utf-8")
        return cls._parse(text)

    @classmethod
    def default(cls) -> Lexicon:
        text = resources.files("semfuse.resources").joinpath("default_lexicon.txt").read_text("utf-8")
        return cls._parse(text)

    @classmethod
    def _parse(cls, text: str) -> Lexicon:
        terms = []
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if line:
                terms.append(line)
        return cls(frozenset(terms))


def lexicon_filter(records: Iterable[PostRecord], lexicon: Lexicon) -> list[PostRecord]:
    """Keep records whose text contains a lexicon term as a whole token."""
    return [r for r in records if not lexicon.terms.isdisjoint(tokenize(r.text))]


@dataclass(frozen=True)
class Fold:
    train: tuple[str, ...]
    val: tuple[str, ...]
    test: tuple[str, ...]


@dataclass(frozen=True)
class FoldPlan:
    k: int
    seed: int
    folds: tuple[Fold, ...]

    def to_json(self) -> dict:
        return {
            "k": self.k,
            "seed": self.seed,
            "folds": [{"train": list(f.train), "val": list(f.val), "test": list(f.test)} for f in self.folds],
        }

    @classmethod
    def from_json(cls, obj: dict) -> FoldPlan:
        folds = tuple(Fold(tuple(f["train"]), tuple(f["val"]), tuple(f["test"])) for f in obj["folds"])
        if len(folds) != obj["k"]:
            raise ValueError(f"fold plan declares k={obj['k']} but holds {len(folds)} folds")
        return cls(k=int(obj["k"]), seed=int(obj["seed"]), folds=folds)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> FoldPlan:
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))

    def all_ids(self) -> set[str]:
        return {i for f in self.folds for i in f.test}


def validation_size(n_remaining: int, fraction: float = 0.2) -> int:
    return math.floor(n_remaining * fraction + 0.5)


def _stratum(rec: PostRecord) -> int:
    return -1 if rec.binary_label is None else int(rec.binary_label)


def make_fold_plan(records: Sequence[PostRecord], k: int = 5, seed: int = 0) -> FoldPlan:
    """Stratified k-fold plan giving 64:16:20 train/val/test splits at k=5.

    Each class is shuffled and dealt round-robin into k test buckets, with the
    dealing position carried across classes so bucket sizes differ by at most
    one. Validation takes 20% of the remaining ids, allocated across classes by
    largest remainder.
    """
    if k < 2:
        raise ValueError("k must be at least 2")
    if len(records) < k:
        raise ValueError(f"cannot split {len(records)} records into {k} folds")
    rng = np.random.default_rng(seed)
    groups: dict[int, list[str]] = {}
    for rec in records:
        groups.setdefault(_stratum(rec), []).append(rec.id)
    shuffled = {label: [ids[i] for i in rng.permutation(len(ids))] for label, ids in sorted(groups.items())}

    buckets: list[list[str]] = [[] for _ in range(k)]
    pos = 0
    for ids in shuffled.values():
        for rid in ids:
            buckets[pos % k].append(rid)
            pos += 1

    all_ids = [r.id for r in records]
    folds = []
    for i in range(k):
        test = set(buckets[i])
        remaining = {label: [x for x in ids if x not in test] for label, ids in shuffled.items()}
        n_rem = sum(len(v) for v in remaining.values())
        n_val = validation_size(n_rem)
        quotas = _largest_remainder({lbl: len(v) for lbl, v in remaining.items()}, n_val)
        val = set()
        for lbl, ids in remaining.items():
            # rotate per fold so validation sets vary across folds
            offset = (i * quotas[lbl]) % len(ids) if ids else 0
            rotated = ids[offset:] + ids[:offset]
            val.update(rotated[: quotas[lbl]])
        folds.append(
            Fold(
                train=tuple(x for x in all_ids if x not in test and x not in val),
                val=tuple(x for x in all_ids if x in val),
                test=tuple(x for x in all_ids if x in test),
            )
        )
    return FoldPlan(k=k, seed=seed, folds=tuple(folds))


def _largest_remainder(sizes: dict[int, int], total: int) -> dict[int, int]:
    n = sum(sizes.values())
    if n == 0:
        return {lbl: 0 for lbl in sizes}
    exact = {lbl: Fraction(s * total, n) for lbl, s in sizes.items()}
    quotas = {lbl: math.floor(v) for lbl, v in exact.items()}
    short = total - sum(quotas.values())
    order = sorted(sizes, key=lambda lbl: (-(exact[lbl] - quotas[lbl]), lbl))
    for lbl in order[:short]:
        quotas[lbl] += 1
    return quotas


@dataclass
class CorpusStats:
    total: int = 0
    binary: dict[str, int] = field(default_factory=lambda: {"non_antisemitic": 0, "antisemitic": 0})
    categories: dict[str, int] = field(default_factory=lambda: {c.value: 0 for c in CATEGORIES})
    top_unigrams: dict[str, list[tuple[str, int]]] = field(default_factory=dict)
    top_bigrams: dict[str, list[tuple[str, int]]] = field(default_factory=dict)
    avg_text_words: float = 0.0
    avg_ocr_words: float = 0.0
    pct_images_with_text: float = 0.0

    def to_json(self) -> dict:
        return {
            "total": self.total,
            "binary": dict(self.binary),
            "categories": dict(self.categories),
            "top_unigrams": {c: [[w, n] for w, n in v] for c, v in self.top_unigrams.items()},
            "top_bigrams": {c: [[w, n] for w, n in v] for c, v in self.top_bigrams.items()},
            "avg_text_words": self.avg_text_words,
            "avg_ocr_words": self.avg_ocr_words,
            "pct_images_with_text": self.pct_images_with_text,
        }


def content_tokens(text: str) -> list[str]:
    return [t for t in tokenize(text) if t not in ENGLISH_STOP_WORDS]


def _top(counter: Counter, n: int) -> list[tuple[str, int]]:
    # frequency descending, ties alphabetical
    return sorted(counter.items(), key=lambda kv: (-kv[1], kv[0]))[:n]


def dataset_stats(records: Sequence[PostRecord], top_n: int = 10) -> CorpusStats:
    stats = CorpusStats(total=len(records))
    unigrams = {c.value: Counter() for c in CATEGORIES}
    bigrams = {c.value: Counter() for c in CATEGORIES}
    text_words = ocr_words = with_text = 0
    for rec in records:
        if rec.binary_label == BinaryLabel.ANTISEMITIC:
            stats.binary["antisemitic"] += 1
        elif rec.binary_label == BinaryLabel.NON_ANTISEMITIC:
            stats.binary["non_antisemitic"] += 1
        text_words += len(tokenize(rec.text))
        n_ocr = len(tokenize(rec.ocr_text))
        ocr_words += n_ocr
        with_text += n_ocr > 0
        if rec.category_label is not None:
            cat = rec.category_label.value
            stats.categories[cat] += 1
            toks = content_tokens(rec.text)
            unigrams[cat].update(toks)
            bigrams[cat].update(" ".join(p) for p in zip(toks, toks[1:]))
    if records:
        stats.avg_text_words = text_words / len(records)
        stats.avg_ocr_words = ocr_words / len(records)
        stats.pct_images_with_text = 100.0 * with_text / len(records)
    stats.top_unigrams = {c: _top(v, top_n) for c, v in unigrams.items() if v}
    stats.top_bigrams = {c: _top(v, top_n) for c, v in bigrams.items() if v}
    return stats


@dataclass(frozen=True)
class AnnotationMatrix:
    """Item-by-category annotation counts for Fleiss' kappa."""

    counts: np.ndarray
    n: int

    def __post_init__(self):
        counts = np.asarray(self.counts)
        if counts.ndim != 2 or counts.shape[0] == 0 or counts.shape[1] == 0:
            raise ValueError("counts must be a non-empty 2-D matrix")
        if not np.issubdtype(counts.dtype, np.integer):
            if not np.all(np.mod(counts, 1) == 0):
                raise ValueError("counts must be integers")
            counts = counts.astype(np.int64)
        if np.any(counts < 0):
            raise ValueError("counts must be non-negative")
        if self.n < 2:
            raise ValueError("need at least two annotators per item")
        if np.any(counts.sum(axis=1) != self.n):
            raise ValueError(f"every row must sum to n={self.n}")
        object.__setattr__(self, "counts", counts)

    @classmethod
    def from_counts(cls, counts) -> AnnotationMatrix:
        counts = np.asarray(counts)
        return cls(counts, int(counts[0].sum()))


def fleiss_kappa(m: AnnotationMatrix) -> float:
    counts = m.counts.astype(np.float64)
    n_items = counts.shape[0]
    n = m.n
    per_item = (np.sum(counts**2, axis=1) - n) / (n * (n - 1))
    p_bar = per_item.mean()
    marginals = counts.sum(axis=0) / (n_items * n)
    p_e = float(np.sum(marginals**2))
    if math.isclose(p_e, 1.0, rel_tol=0, abs_tol=1e-12):
        raise AgreementUndefinedError("expected agreement is 1; kappa is undefined")
    return float((p_bar - p_e) / (1.0 - p_e))
