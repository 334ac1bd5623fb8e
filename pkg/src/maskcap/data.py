"""Dataset model, file formats, vocabulary, and the synthetic scene world.

A scene sample carries one global feature vector, L entity slots (label +
feature vector each), reference captions as token lists, and optionally one
binary mask per caption. Samples travel as line-delimited JSON records under
a `#maskcap-dataset v1` header: human-readable, diffable, streamable.

The synthetic generator builds desk-scale stand-ins for the MSCOCO-plus-
knowledge-graph setup the full pipeline runs on. For reference, that corpus
looks like this (documentation constants, not shipped data):

    MSCOCO_REFERENCE = mean sentence length 11.3, vocabulary 9989,
    5 sentences per image, splits 113287 / 5000 / 5000,
    812 unique entity labels, top-15 entity slots per image,
    500-dim entity vectors, 2048-dim global features.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field

import numpy as np

from .embeddings import EmbeddingStore, normalize_label, save_embeddings
from .errors import DomainError, ParseError, SchemaError

DATASET_HEADER = "#maskcap-dataset v1"

MSCOCO_REFERENCE = {
    "mean_sentence_length": 11.3,
    "vocabulary": 9989,
    "sentences_per_image": 5,
    "train_images": 113287,
    "val_images": 5000,
    "test_images": 5000,
    "entity_labels": 812,
    "entity_slots": 15,
    "entity_dim": 500,
    "global_dim": 2048,
}

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
_TOKEN_RE = re.compile(r"[a-z0-9]+")


def tokenize(text):
    """Lowercase, split on whitespace/punctuation, drop the punctuation."""
    return _TOKEN_RE.findall(text.lower())


@dataclass
class Entity:
    label: str
    feature: np.ndarray


@dataclass
class SceneSample:
    id: str
    global_feature: np.ndarray
    entities: list
    captions: list
    masks: list | None = None

    @property
    def num_entities(self):
        return len(self.entities)

    @property
    def entity_labels(self):
        return [e.label for e in self.entities]

    def entity_matrix(self):
        return np.stack([e.feature for e in self.entities])


@dataclass
class Dataset:
    samples: list

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    @property
    def global_dim(self):
        return len(self.samples[0].global_feature) if self.samples else 0

    @property
    def entity_dim(self):
        return len(self.samples[0].entities[0].feature) if self.samples else 0

    def caption_pairs(self):
        """All (sample, caption_index) pairs, in dataset order."""
        return [(s, ci) for s in self.samples for ci in range(len(s.captions))]

    def all_captions(self):
        return [c for s in self.samples for c in s.captions]


def _validate_sample(sample, v_dim, d_dim):
    sid = sample.id
    if sample.num_entities < 1:
        raise SchemaError(f"sample {sid}: needs at least one entity slot")
    if len(sample.global_feature) != v_dim:
        raise SchemaError(f"sample {sid}: global feature dim {len(sample.global_feature)} != {v_dim}")
    for e in sample.entities:
        if len(e.feature) != d_dim:
            raise SchemaError(f"sample {sid}: entity {e.label!r} dim {len(e.feature)} != {d_dim}")
    if sample.masks is not None:
        if len(sample.masks) != len(sample.captions):
            raise SchemaError(f"sample {sid}: {len(sample.masks)} masks for "
                              f"{len(sample.captions)} captions")
        for mi, mask in enumerate(sample.masks):
            if len(mask) != sample.num_entities:
                raise SchemaError(f"sample {sid}: mask {mi} has length {len(mask)}, "
                                  f"expected {sample.num_entities}")
            if any(b not in (0, 1) for b in np.asarray(mask).tolist()):
                raise SchemaError(f"sample {sid}: mask {mi} has non-binary bits")


def validate_dataset(dataset):
    if not dataset.samples:
        return
    v_dim = len(dataset.samples[0].global_feature)
    d_dim = len(dataset.samples[0].entities[0].feature)
    for s in dataset.samples:
        _validate_sample(s, v_dim, d_dim)


def load_dataset(path):
    samples = []
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if header != DATASET_HEADER:
            raise ParseError(f"expected header {DATASET_HEADER!r}, got {header!r}", line=1)
        for lineno, raw in enumerate(fh, start=2):
            if not raw.strip():
                continue
            try:
                rec = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise ParseError(f"bad JSON record: {exc}", line=lineno) from None
            try:
                sample = SceneSample(
                    id=str(rec["id"]),
                    global_feature=np.asarray(rec["global"], dtype=np.float64),
                    entities=[Entity(label=str(e["label"]),
                                     feature=np.asarray(e["feature"], dtype=np.float64))
                              for e in rec["entities"]],
                    captions=[[str(t) for t in cap] for cap in rec["captions"]],
                    masks=([np.asarray(m, dtype=np.int64) for m in rec["masks"]]
                           if rec.get("masks") is not None else None),
                )
            except (KeyError, TypeError) as exc:
                raise SchemaError(f"line {lineno}: malformed sample record ({exc})") from None
            samples.append(sample)
    ds = Dataset(samples=samples)
    validate_dataset(ds)
    return ds


def save_dataset(path, dataset):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(DATASET_HEADER + "\n")
        for s in dataset.samples:
            rec = {
                "id": s.id,
                "global": [float(x) for x in s.global_feature],
                "entities": [{"label": e.label, "feature": [float(x) for x in e.feature]}
                             for e in s.entities],
                "captions": s.captions,
            }
            if s.masks is not None:
                rec["masks"] = [[int(b) for b in m] for m in s.masks]
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


# ---------------------------------------------------------------------------
# vocabulary


class Vocabulary:
    """Token <-> index bijection with reserved PAD/BOS/EOS/UNK slots."""

    def __init__(self, tokens):
        self.tokens = [PAD, BOS, EOS, UNK] + [t for t in tokens
                                              if t not in (PAD, BOS, EOS, UNK)]
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise DomainError("vocabulary tokens must be unique")
        self.pad, self.bos, self.eos, self.unk = 0, 1, 2, 3

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.index

    def encode(self, tokens):
        return [self.index.get(t, self.unk) for t in tokens]

    def decode(self, ids):
        return [self.tokens[i] for i in ids]

    def word_tokens(self):
        return self.tokens[4:]


def build_vocab(captions, min_count=1):
    """Vocabulary over training captions, frequency then lexicographic order."""
    counts = {}
    for cap in captions:
        for tok in cap:
            counts[tok] = counts.get(tok, 0) + 1
    if not counts:
        raise DomainError("cannot build a vocabulary from an empty corpus")
    kept = sorted((t for t, c in counts.items() if c >= min_count),
                  key=lambda t: (-counts[t], t))
    return Vocabulary(kept)


# ---------------------------------------------------------------------------
# synthetic scene world


_DEFAULT_TYPES = [
    ("Dog", "dog"), ("Cat", "cat"), ("Horse", "horse"), ("Cow", "cow"),
    ("Sheep", "sheep"), ("Bird", "bird"), ("Duck", "duck"), ("Rabbit", "rabbit"),
    ("Race Car", "car"), ("School Bus", "bus"), ("Train", "train"), ("Boat", "boat"),
    ("Plane", "plane"), ("Bicycle", "bicycle"), ("Table", "table"), ("Chair", "chair"),
    ("Bench", "bench"), ("Street Lamp", "lamp"), ("Cake", "cake"), ("Pizza", "pizza"),
    ("Apple", "apple"), ("Banana", "banana"), ("Sandwich", "sandwich"), ("Ball", "ball"),
    ("Kite", "kite"), ("Tree", "tree"), ("Flower", "flower"), ("Fountain", "fountain"),
]

_DEFAULT_ATTRIBUTES = ["white", "black", "red", "green", "small", "big", "old", "young"]

# Each template is (mention_count, builder over [(attr, noun), ...]).
_TEMPLATES = [
    (1, lambda m: ["a", m[0][0], m[0][1], "in", "the", "scene"]),
    (1, lambda m: ["the", m[0][0], m[0][1], "stands", "alone"]),
    (1, lambda m: ["there", "is", "a", m[0][0], m[0][1]]),
    (2, lambda m: ["a", m[0][0], m[0][1], "near", "a", m[1][0], m[1][1]]),
    (2, lambda m: ["the", m[0][0], m[0][1], "beside", "the", m[1][0], m[1][1]]),
]

# Deterministic-mode templates put the attribute late: the noun is the only
# token that needs entity selection from scratch; the attribute can be read
# off after the (teacher-forced) noun identifies the slot.
_DETERMINISTIC_TEMPLATES = [
    (1, lambda m: ["a", m[0][1], "seen", "out", "in", "the", m[0][0], "scene"]),
    (2, lambda m: ["a", m[0][1], "near", "a", m[1][1], "out", "in", "the",
                   m[0][0], "scene"]),
]


@dataclass
class SynthOntology:
    """Entity types with noun surfaces, attributes, and seeded type vectors."""

    entity_types: list = field(default_factory=lambda: list(_DEFAULT_TYPES))
    attributes: list = field(default_factory=lambda: list(_DEFAULT_ATTRIBUTES))
    dim: int = 16
    seed: int = 1234
    attr_coef: float = 0.35

    def __post_init__(self):
        nouns = [n for _, n in self.entity_types]
        if len(set(nouns)) != len(nouns):
            raise DomainError("each template noun must map to exactly one entity type")
        rng = np.random.default_rng(self.seed)
        self.type_vectors = {}
        for label, _ in self.entity_types:
            v = rng.normal(size=self.dim)
            self.type_vectors[label] = v / np.linalg.norm(v)
        self.attr_vectors = {}
        for a in self.attributes:
            v = rng.normal(size=self.dim)
            self.attr_vectors[a] = v / np.linalg.norm(v)

    @property
    def noun_lexicon(self):
        return {n for _, n in self.entity_types}

    def noun_of(self, label):
        for lbl, noun in self.entity_types:
            if lbl == label:
                return noun
        raise KeyError(label)

    def entity_store(self):
        """Clean per-type vectors keyed by normalized label (Algorithm 1 side)."""
        store = EmbeddingStore(dim=self.dim)
        for label, _ in self.entity_types:
            store.put(normalize_label(label), self.type_vectors[label])
        return store

    def word_store(self, noise=0.0, seed=0):
        """Noun vectors; with noise > 0 they drift off the clean type vectors."""
        rng = np.random.default_rng(seed)
        store = EmbeddingStore(dim=self.dim)
        for label, noun in self.entity_types:
            v = self.type_vectors[label].copy()
            if noise > 0:
                v = v + noise * rng.normal(size=self.dim)
                v = v / np.linalg.norm(v)
            store.put(noun, v)
        return store


@dataclass
class SynthResult:
    dataset: Dataset
    noun_lexicon: set
    word_store: EmbeddingStore
    entity_store: EmbeddingStore
    ontology: SynthOntology


def synth_generate(ontology, n_samples, entities_per_scene, seed,
                   captions_per_sample=(2, 3), feature_noise=0.05,
                   word_vector_noise=0.0, mention_bias=1.0, id_prefix="s",
                   deterministic_templates=False, mention_range=(1, 2),
                   mention_rule="random", attr_rule="random", global_noise=0.0):
    """Generate a synthetic dataset with gold masks.

    Each scene draws ``entities_per_scene`` distinct entity types; slot
    features are the type vector plus an attribute component plus Gaussian
    noise; the global feature is the mean of the slot features. Captions are
    filled templates mentioning a subset of the scene's slots, and the gold
    mask marks exactly those slots. Pure function of its inputs.

    ``mention_rule`` picks the mentioned slots: "random" draws them with
    probability weighted by ``mention_bias`` (Zipf-like over the ontology
    order); "rank" deterministically mentions the highest-ranked (lowest
    ontology index) types present, with the mention count cycling through
    ``mention_range`` by the top type's index, which makes captions a pure
    function of scene content. ``attr_rule`` assigns slot attributes at
    random or as a fixed function of the type. ``deterministic_templates``
    pins the template to the mention count. Together they yield fully
    predictable single-caption scenes, the regime overfitting experiments
    want. ``global_noise`` perturbs the pooled global feature, standing in
    for full-scale pipelines where the global vector is pooled over a
    different feature set than the entity slots.
    """
    n_types = len(ontology.entity_types)
    if entities_per_scene > n_types:
        raise DomainError(f"entities_per_scene {entities_per_scene} exceeds "
                          f"{n_types} ontology types")
    if isinstance(captions_per_sample, int):
        captions_per_sample = (captions_per_sample, captions_per_sample)

    rng = np.random.default_rng(seed)
    type_weights = np.array([1.0 / (i + 2) ** mention_bias for i in range(n_types)])
    samples = []
    for si in range(n_samples):
        type_ids = rng.choice(n_types, size=entities_per_scene, replace=False)
        entities = []
        attrs = []
        for ti in type_ids:
            label, _ = ontology.entity_types[ti]
            if attr_rule == "type":
                attr = ontology.attributes[int(ti) % len(ontology.attributes)]
            else:
                attr = ontology.attributes[int(rng.integers(len(ontology.attributes)))]
            attrs.append(attr)
            base = ontology.type_vectors[label] + ontology.attr_coef * ontology.attr_vectors[attr]
            base = base / np.linalg.norm(base)
            feature = base + feature_noise * rng.normal(size=ontology.dim)
            entities.append(Entity(label=label, feature=feature))
        global_feature = np.mean([e.feature for e in entities], axis=0)
        if global_noise > 0:
            global_feature = global_feature + global_noise * rng.normal(size=ontology.dim)

        n_caps = int(rng.integers(captions_per_sample[0], captions_per_sample[1] + 1))
        captions, masks = [], []
        slot_weights = type_weights[type_ids]
        lo = min(mention_range[0], entities_per_scene)
        hi = min(mention_range[1], entities_per_scene)
        ranked = sorted(range(entities_per_scene), key=lambda j: type_ids[j])
        for _ in range(n_caps):
            if mention_rule == "rank":
                # count cycles with the top type's index: still deterministic
                count = lo + int(type_ids[ranked[0]]) % (hi - lo + 1)
            else:
                count = int(rng.integers(lo, hi + 1))
            if deterministic_templates:
                count, builder = _DETERMINISTIC_TEMPLATES[0 if count == 1 else 1]
            else:
                choices = [i for i, (c, _) in enumerate(_TEMPLATES) if c == count] or \
                    [i for i, (c, _) in enumerate(_TEMPLATES) if lo <= c <= hi]
                count, builder = _TEMPLATES[choices[int(rng.integers(len(choices)))]]
            count = min(count, entities_per_scene)
            if mention_rule == "rank":
                chosen = ranked[:count]
            else:
                probs = slot_weights / slot_weights.sum()
                chosen = rng.choice(entities_per_scene, size=count, replace=False, p=probs)
                chosen = [int(c) for c in chosen]
            mentions = [(attrs[c], ontology.noun_of(entities[c].label)) for c in chosen]
            captions.append(builder(mentions))
            mask = np.zeros(entities_per_scene, dtype=np.int64)
            mask[chosen] = 1
            masks.append(mask)
        samples.append(SceneSample(id=f"{id_prefix}{si:05d}", global_feature=global_feature,
                                   entities=entities, captions=captions, masks=masks))

    return SynthResult(
        dataset=Dataset(samples=samples),
        noun_lexicon=ontology.noun_lexicon,
        word_store=ontology.word_store(noise=word_vector_noise, seed=seed + 1),
        entity_store=ontology.entity_store(),
        ontology=ontology,
    )


def synth_write_dir(out_dir, ontology, sizes, entities_per_scene, seed, **kwargs):
    """Write train/val/test splits plus lexicon and vector files to a directory.

    ``sizes`` is a (train, val, test) triple. Returns the per-split datasets.
    """
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = ["train", "val", "test"]
    prefixes = ["tr", "va", "te"]
    result = {}
    for name, prefix, size, sub_seed in zip(names, prefixes, sizes,
                                            np.random.SeedSequence(seed).generate_state(3)):
        res = synth_generate(ontology, size, entities_per_scene, int(sub_seed),
                             id_prefix=prefix, **kwargs)
        save_dataset(out / f"{name}.jsonl", res.dataset)
        result[name] = res
    with open(out / "nouns.txt", "w", encoding="utf-8") as fh:
        for noun in sorted(ontology.noun_lexicon):
            fh.write(noun + "\n")
    save_embeddings(out / "word_vectors.txt", result["train"].word_store)
    save_embeddings(out / "entity_vectors.txt", result["train"].entity_store)
    return result


def load_noun_lexicon(path):
    with open(path, encoding="utf-8") as fh:
        return {line.strip() for line in fh if line.strip()}
