"""Rule-based ground-truth mask construction.

The rule: for each noun in a caption, find the closest visual entity by
cosine distance between the noun's word vector and the entity labels'
vectors, and set that entity's mask bit to 1; everything else stays 0.
Construction is a pure function of (caption, entity labels, stores,
extractor), so mask tables are reproducible byte for byte.

Noun identification is deliberately tagger-free: the default mode matches
caption tokens against a noun lexicon shipped with the dataset; a pre-tagged
file mode covers corpora tagged offline. Tag files are UTF-8 TSV, one line
per caption: `caption tokens space-joined TAB noun tokens space-joined`
(the noun column may be empty).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .embeddings import nearest_entity, normalize_label
from .errors import DomainError, MissingTagError, ParseError

MASK_TABLE_HEADER = "#maskcap-masks v1"


@dataclass
class NounExtractor:
    """Deterministic caption-token -> noun classifier."""

    mode: str = "lexicon"
    lexicon: set = field(default_factory=set)
    tags: dict = field(default_factory=dict)

    @classmethod
    def from_lexicon(cls, nouns):
        return cls(mode="lexicon", lexicon=set(nouns))

    @classmethod
    def from_tag_file(cls, path):
        tags = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, start=1):
                line = raw.rstrip("\n")
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) != 2:
                    raise ParseError("expected `caption TAB nouns`", line=lineno)
                tags[parts[0]] = parts[1].split() if parts[1] else []
        return cls(mode="external-tags", tags=tags)


def extract_nouns(caption, extractor):
    """Ordered sublist of caption tokens classified as nouns (duplicates kept)."""
    if not caption:
        raise DomainError("extract_nouns needs a non-empty caption")
    if extractor.mode == "lexicon":
        return [t for t in caption if t in extractor.lexicon]
    if extractor.mode == "external-tags":
        key = " ".join(caption)
        if key not in extractor.tags:
            raise MissingTagError(f"no tag entry for caption {key!r}")
        return list(extractor.tags[key])
    raise DomainError(f"unknown extractor mode {extractor.mode!r}")


@dataclass
class GroundTruthMask:
    bits: np.ndarray
    caption_id: int | None = None
    sample_id: str | None = None
    skipped_nouns: int = 0


def build_mask_gt(caption, entity_labels, word_store, entity_store, extractor,
                  normalize=True):
    """Binary mask over the entity slots selected by the caption's nouns.

    Nouns without a word vector are skipped (counted in ``skipped_nouns``);
    each resolvable noun sets exactly one bit, the cosine-closest entity with
    lowest-index tie-breaking. Idempotent under repeated nouns.
    """
    if not entity_labels:
        raise DomainError("build_mask_gt needs a non-empty entity label list")
    candidates = []
    for label in entity_labels:
        key = normalize_label(label) if normalize else label
        vec = entity_store.get(key)
        if vec is None:
            raise DomainError(f"entity label {label!r} (key {key!r}) not in entity store")
        candidates.append((label, vec))

    bits = np.zeros(len(entity_labels), dtype=np.int64)
    skipped = 0
    for noun in extract_nouns(caption, extractor):
        key = normalize_label(noun) if normalize else noun
        vec = word_store.get(key)
        if vec is None:
            skipped += 1
            continue
        _, idx, _ = nearest_entity(vec, candidates)
        bits[idx] = 1
    return GroundTruthMask(bits=bits, skipped_nouns=skipped)


@dataclass
class MaskCoverage:
    captions: int
    nonzero_fraction: float
    mean_bits_set: float
    skipped_nouns: int


def build_dataset_masks(dataset, word_store, entity_store, extractor, normalize=True):
    """One GroundTruthMask per (sample, caption) pair, plus a coverage report."""
    table = {}
    nonzero = 0
    bits_total = 0
    skipped = 0
    n_captions = 0
    for sample in dataset:
        labels = sample.entity_labels
        for ci, caption in enumerate(sample.captions):
            mask = build_mask_gt(caption, labels, word_store, entity_store,
                                 extractor, normalize=normalize)
            mask.sample_id = sample.id
            mask.caption_id = ci
            table[(sample.id, ci)] = mask
            n_captions += 1
            popcount = int(mask.bits.sum())
            bits_total += popcount
            nonzero += 1 if popcount > 0 else 0
            skipped += mask.skipped_nouns
    coverage = MaskCoverage(
        captions=n_captions,
        nonzero_fraction=(nonzero / n_captions) if n_captions else 0.0,
        mean_bits_set=(bits_total / n_captions) if n_captions else 0.0,
        skipped_nouns=skipped,
    )
    return table, coverage


def write_mask_table(path, table):
    """Serialize masks, one JSON record per (sample, caption), dataset order."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(MASK_TABLE_HEADER + "\n")
        for (sample_id, caption_index), mask in table.items():
            rec = {"sample_id": sample_id, "caption_index": caption_index,
                   "bits": [int(b) for b in mask.bits]}
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def read_mask_table(path):
    table = {}
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if header != MASK_TABLE_HEADER:
            raise ParseError(f"expected header {MASK_TABLE_HEADER!r}, got {header!r}", line=1)
        for lineno, raw in enumerate(fh, start=2):
            if not raw.strip():
                continue
            try:
                rec = json.loads(raw)
                key = (str(rec["sample_id"]), int(rec["caption_index"]))
                bits = np.asarray(rec["bits"], dtype=np.int64)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"bad mask record: {exc}", line=lineno) from None
            table[key] = GroundTruthMask(bits=bits, sample_id=key[0], caption_id=key[1])
    return table
