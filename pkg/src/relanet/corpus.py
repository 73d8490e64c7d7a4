"""Joint multi-intent / slot corpus reading, validation and label inventories.

A corpus file is a sequence of blocks separated by a blank line.  Every block
holds one ``token tag`` line per word followed by a single intent line whose
labels are joined with ``#``::

    show O
    me O
    flights O
    atis_flight#atis_airfare
"""

from __future__ import annotations

import hashlib
import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

logger = logging.getLogger(__name__)

INTENT_SEP = "#"
OUTSIDE = "O"
PAD = "<pad>"
UNK = "<unk>"


class CorpusError(ValueError):
    """Malformed corpus text or a sample violating the data contract."""


class UnknownLabelError(KeyError):
    """A label that is not part of a frozen inventory."""


def split_tag(tag: str) -> tuple[str, str | None]:
    if tag == OUTSIDE:
        return OUTSIDE, None
    if len(tag) > 2 and tag[1] == "-" and tag[0] in "BI":
        return tag[0], tag[2:]
    raise CorpusError(f"not a BIO tag: {tag!r}")


def bio_violations(slots: Sequence[str]) -> list[int]:
    """Positions holding an ``I-x`` that does not continue an ``x`` span."""
    bad = []
    prev_name = None
    for i, tag in enumerate(slots):
        prefix, name = split_tag(tag)
        if prefix == "I" and prev_name != name:
            bad.append(i)
        prev_name = name
    return bad


@dataclass(frozen=True)
class Sample:
    tokens: tuple[str, ...]
    slots: tuple[str, ...]
    intents: frozenset[str]

    def __post_init__(self):
        if len(self.tokens) == 0:
            raise CorpusError("sample has no tokens")
        if len(self.slots) != len(self.tokens):
            raise CorpusError(
                f"{len(self.tokens)} tokens but {len(self.slots)} slot tags"
            )
        for tag in self.slots:
            split_tag(tag)
        if not self.intents:
            raise CorpusError("sample has no intents")

    @classmethod
    def build(cls, tokens: Iterable[str], slots: Iterable[str], intents: Iterable[str]) -> "Sample":
        intents = list(intents)
        if len(set(intents)) != len(intents):
            raise CorpusError(f"duplicate intents: {intents}")
        return cls(tuple(tokens), tuple(slots), frozenset(intents))

    def __len__(self):
        return len(self.tokens)

    def b_labels(self) -> set[str]:
        return {t for t in self.slots if t.startswith("B-")}


@dataclass(frozen=True)
class Dataset:
    samples: tuple[Sample, ...]
    split: str = "train"

    def __post_init__(self):
        if not self.samples:
            raise CorpusError(f"empty {self.split} dataset")

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    def fingerprint(self) -> str:
        return hashlib.sha256(format_corpus(self).encode("utf-8")).hexdigest()[:16]


def _parse_block(lines: list[tuple[int, str]], strict: bool) -> Sample:
    if len(lines) < 2:
        lineno = lines[0][0]
        raise CorpusError(f"line {lineno}: block needs token lines and an intent line")
    *word_lines, (intent_lineno, intent_line) = lines
    tokens, slots = [], []
    for lineno, line in word_lines:
        parts = line.split()
        if len(parts) != 2:
            raise CorpusError(f"line {lineno}: expected 'token tag', got {line!r}")
        tokens.append(parts[0])
        slots.append(parts[1])
    intent_parts = intent_line.split()
    if len(intent_parts) != 1:
        raise CorpusError(f"line {intent_lineno}: missing intent line, got {intent_line!r}")
    intents = [x for x in intent_parts[0].split(INTENT_SEP) if x]
    try:
        sample = Sample.build(tokens, slots, intents)
    except CorpusError as err:
        raise CorpusError(f"block ending at line {intent_lineno}: {err}") from None
    bad = bio_violations(sample.slots)
    if bad:
        msg = f"block ending at line {intent_lineno}: uncoordinated I- tag at positions {bad}"
        if strict:
            raise CorpusError(msg)
        logger.warning(msg)
    return sample


def parse_corpus(text: str, strict: bool = False, split: str = "train") -> Dataset:
    """Parse corpus text; in strict mode BIO violations are errors, else warnings."""
    blocks: list[list[tuple[int, str]]] = []
    current: list[tuple[int, str]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if line:
            current.append((lineno, line))
        elif current:
            blocks.append(current)
            current = []
    if current:
        blocks.append(current)
    return Dataset(tuple(_parse_block(b, strict) for b in blocks), split=split)


def read_corpus(path, strict: bool = False, split: str = "train") -> Dataset:
    with open(path, encoding="utf-8") as fh:
        return parse_corpus(fh.read(), strict=strict, split=split)


def format_sample(sample: Sample, intent_order: Sequence[str] | None = None) -> str:
    if intent_order is None:
        intents = sorted(sample.intents)
    else:
        intents = [x for x in intent_order if x in sample.intents]
    rows = [f"{tok} {tag}" for tok, tag in zip(sample.tokens, sample.slots)]
    rows.append(INTENT_SEP.join(intents))
    return "\n".join(rows) + "\n"


def format_corpus(dataset: Iterable[Sample]) -> str:
    return "\n".join(format_sample(s) for s in dataset)


def pseudo_prefix(slot_name: str) -> str | None:
    """Name prefix before the first '.', or None for undotted names."""
    head, dot, _ = slot_name.partition(".")
    return head if dot and head else None


@dataclass(frozen=True)
class LabelInventory:
    intent_labels: tuple[str, ...]
    slot_labels: tuple[str, ...]
    pseudo_labels: tuple[str, ...]
    parent_of: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.slot_labels.count(OUTSIDE) != 1:
            raise CorpusError("slot labels must contain 'O' exactly once")
        object.__setattr__(self, "_intent_index", {x: i for i, x in enumerate(self.intent_labels)})
        object.__setattr__(self, "_slot_index", {x: i for i, x in enumerate(self.slot_labels)})
        object.__setattr__(self, "_pseudo_index", {x: i for i, x in enumerate(self.pseudo_labels)})

    @property
    def num_intents(self) -> int:
        return len(self.intent_labels)

    @property
    def num_slots(self) -> int:
        return len(self.slot_labels)

    @property
    def num_pseudo(self) -> int:
        return len(self.pseudo_labels)

    @property
    def outside_index(self) -> int:
        return self._slot_index[OUTSIDE]

    def intent_index(self, label: str) -> int:
        try:
            return self._intent_index[label]
        except KeyError:
            raise UnknownLabelError(f"unknown intent label {label!r}") from None

    def slot_index(self, label: str) -> int:
        try:
            return self._slot_index[label]
        except KeyError:
            raise UnknownLabelError(f"unknown slot label {label!r}") from None

    def pseudo_index(self, label: str) -> int:
        try:
            return self._pseudo_index[label]
        except KeyError:
            raise UnknownLabelError(f"unknown pseudo label {label!r}") from None

    def has_intent(self, label: str) -> bool:
        return label in self._intent_index

    def has_slot(self, label: str) -> bool:
        return label in self._slot_index

    def children_of(self, pseudo: str) -> list[str]:
        return [b for b in self.slot_labels if self.parent_of.get(b) == pseudo]

    def to_dict(self) -> dict:
        return {
            "intent_labels": list(self.intent_labels),
            "slot_labels": list(self.slot_labels),
            "pseudo_labels": list(self.pseudo_labels),
            "parent_of": {b: self.parent_of[b] for b in sorted(self.parent_of)},
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "LabelInventory":
        return cls(
            tuple(doc["intent_labels"]),
            tuple(doc["slot_labels"]),
            tuple(doc["pseudo_labels"]),
            dict(doc["parent_of"]),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, ensure_ascii=False)

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, ensure_ascii=False)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]

    def check_dataset(self, dataset: Iterable[Sample]) -> None:
        """Raise UnknownLabelError if any label falls outside the inventory."""
        for sample in dataset:
            for x in sample.intents:
                self.intent_index(x)
            for tag in sample.slots:
                self.slot_index(tag)


def build_inventory(train: Dataset) -> LabelInventory:
    """Collect labels observed in ``train`` and derive shared-prefix pseudo labels.

    Labels are sorted so that index maps only depend on the label sets.
    """
    intents = sorted({x for s in train for x in s.intents})
    slots = {t for s in train for t in s.slots}
    slots.discard(OUTSIDE)
    slot_labels = (OUTSIDE,) + tuple(sorted(slots))

    by_prefix: dict[str, list[str]] = {}
    for tag in slot_labels:
        if tag.startswith("B-"):
            prefix = pseudo_prefix(tag[2:])
            if prefix is not None:
                by_prefix.setdefault(prefix, []).append(tag)
    parent_of = {}
    pseudo = []
    for prefix in sorted(by_prefix):
        children = by_prefix[prefix]
        if len(children) >= 2:
            pseudo.append(prefix)
            for child in children:
                parent_of[child] = prefix
    return LabelInventory(tuple(intents), slot_labels, tuple(pseudo), parent_of)


class Vocabulary:
    """Word to index map with reserved padding (0) and unknown (1) entries."""

    def __init__(self, words: Iterable[str] = ()):
        self.itos = [PAD, UNK]
        self.stoi = {PAD: 0, UNK: 1}
        for w in words:
            if w not in self.stoi:
                self.stoi[w] = len(self.itos)
                self.itos.append(w)

    @classmethod
    def from_dataset(cls, dataset: Dataset, min_count: int = 1) -> "Vocabulary":
        counts = Counter(tok for s in dataset for tok in s.tokens)
        return cls(sorted(w for w, c in counts.items() if c >= min_count))

    def __len__(self):
        return len(self.itos)

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.stoi.get(t, 1) for t in tokens]
