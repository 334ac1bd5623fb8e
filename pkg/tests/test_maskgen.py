import math

import numpy as np
import pytest

from maskcap.data import Dataset, Entity, SceneSample, SynthOntology, synth_generate
from maskcap.embeddings import EmbeddingStore, normalize_label
from maskcap.errors import DomainError, MissingTagError
from maskcap.maskrules import (NounExtractor, build_dataset_masks, build_mask_gt,
                               extract_nouns, read_mask_table, write_mask_table)


def _stores():
    entity_store = EmbeddingStore(dim=2)
    entity_store.put("dog", np.array([1.0, 0.0]))
    entity_store.put("cake", np.array([0.0, 1.0]))
    word_store = EmbeddingStore(dim=2)
    word_store.put("dog", np.array([0.9, 0.1]))
    word_store.put("cake", np.array([0.1, 0.9]))
    return word_store, entity_store


def test_extract_nouns_lexicon():
    ex = NounExtractor.from_lexicon({"dog", "cat"})
    assert extract_nouns(["a", "dog", "runs"], ex) == ["dog"]


def test_extract_nouns_none_found():
    ex = NounExtractor.from_lexicon({"dog"})
    assert extract_nouns(["the", "the", "the"], ex) == []


def test_extract_nouns_preserves_order_and_duplicates():
    ex = NounExtractor.from_lexicon({"dog", "cake"})
    assert extract_nouns(["a", "white", "dog", "near", "a", "cake"], ex) == ["dog", "cake"]
    assert extract_nouns(["dog", "and", "dog"], ex) == ["dog", "dog"]


def test_extract_nouns_empty_caption_rejected():
    with pytest.raises(DomainError):
        extract_nouns([], NounExtractor.from_lexicon({"dog"}))


def test_extract_nouns_external_tags(tmp_path):
    p = tmp_path / "tags.tsv"
    p.write_text("a dog runs\tdog\nthe sky\t\n")
    ex = NounExtractor.from_tag_file(p)
    assert extract_nouns(["a", "dog", "runs"], ex) == ["dog"]
    assert extract_nouns(["the", "sky"], ex) == []
    with pytest.raises(MissingTagError):
        extract_nouns(["unknown", "caption"], ex)


def test_build_mask_no_nouns_gives_zeros():
    word_store, entity_store = _stores()
    ex = NounExtractor.from_lexicon({"dog", "cake"})
    mask = build_mask_gt(["just", "words"], ["Dog", "Cake"], word_store, entity_store, ex)
    assert np.array_equal(mask.bits, [0, 0])


def test_build_mask_single_noun_argmin_by_hand():
    word_store, entity_store = _stores()
    ex = NounExtractor.from_lexicon({"dog", "cake"})
    mask = build_mask_gt(["a", "dog"], ["Dog", "Cake"], word_store, entity_store, ex)
    assert np.array_equal(mask.bits, [1, 0])


def test_build_mask_two_independent_argmins():
    word_store, entity_store = _stores()
    ex = NounExtractor.from_lexicon({"dog", "cake"})
    mask = build_mask_gt(["a", "dog", "near", "a", "cake"], ["Dog", "Cake"],
                         word_store, entity_store, ex)
    assert np.array_equal(mask.bits, [1, 1])


def test_build_mask_skips_unresolvable_nouns():
    word_store, entity_store = _stores()
    ex = NounExtractor.from_lexicon({"dog", "zebra"})
    mask = build_mask_gt(["a", "zebra", "and", "dog"], ["Dog", "Cake"],
                         word_store, entity_store, ex)
    assert np.array_equal(mask.bits, [1, 0])
    assert mask.skipped_nouns == 1


def test_build_mask_unresolvable_entity_label_rejected():
    word_store, entity_store = _stores()
    ex = NounExtractor.from_lexicon({"dog"})
    with pytest.raises(DomainError, match="Zebra"):
        build_mask_gt(["a", "dog"], ["Zebra"], word_store, entity_store, ex)


def test_build_mask_idempotent_under_repeats_and_monotone():
    word_store, entity_store = _stores()
    ex = NounExtractor.from_lexicon({"dog", "cake"})
    base = build_mask_gt(["a", "dog"], ["Dog", "Cake"], word_store, entity_store, ex)
    repeated = build_mask_gt(["dog", "dog", "dog"], ["Dog", "Cake"],
                             word_store, entity_store, ex)
    extended = build_mask_gt(["a", "dog", "cake"], ["Dog", "Cake"],
                             word_store, entity_store, ex)
    assert np.array_equal(base.bits, repeated.bits)
    assert (extended.bits >= base.bits).all()


def test_build_mask_is_pure():
    word_store, entity_store = _stores()
    ex = NounExtractor.from_lexicon({"dog", "cake"})
    a = build_mask_gt(["dog", "cake"], ["Dog", "Cake"], word_store, entity_store, ex)
    b = build_mask_gt(["dog", "cake"], ["Dog", "Cake"], word_store, entity_store, ex)
    assert np.array_equal(a.bits, b.bits)


def test_popcount_bounded_by_nouns_and_slots():
    ont = SynthOntology(dim=8, seed=2)
    res = synth_generate(ont, 25, 4, seed=6)
    ex = NounExtractor.from_lexicon(res.noun_lexicon)
    table, _ = build_dataset_masks(res.dataset, res.word_store, res.entity_store, ex)
    for sample in res.dataset:
        for ci, cap in enumerate(sample.captions):
            bits = table[(sample.id, ci)].bits
            nouns = extract_nouns(cap, ex)
            assert set(np.unique(bits)) <= {0, 1}
            assert bits.sum() <= len(nouns)
            assert bits.sum() <= sample.num_entities


def test_dataset_masks_single_sample():
    word_store, entity_store = _stores()
    ex = NounExtractor.from_lexicon({"dog", "cake"})
    sample = SceneSample(id="s1", global_feature=np.zeros(2),
                         entities=[Entity("Dog", np.array([1.0, 0.0])),
                                   Entity("Cake", np.array([0.0, 1.0]))],
                         captions=[["a", "dog"]])
    table, coverage = build_dataset_masks(Dataset([sample]), word_store, entity_store, ex)
    assert len(table) == 1
    assert np.array_equal(table[("s1", 0)].bits, [1, 0])
    assert coverage.captions == 1
    assert coverage.nonzero_fraction == 1.0
    assert coverage.mean_bits_set == 1.0


def test_dataset_masks_empty_dataset():
    word_store, entity_store = _stores()
    ex = NounExtractor.from_lexicon({"dog"})
    table, coverage = build_dataset_masks(Dataset([]), word_store, entity_store, ex)
    assert table == {}
    assert coverage.captions == 0
    assert coverage.nonzero_fraction == 0.0


def _oracle_mask(caption, labels, word_store, entity_store, lexicon):
    """Brute-force re-implementation in plain python, for cross-checking."""
    bits = [0] * len(labels)
    for tok in caption:
        if tok not in lexicon:
            continue
        wv = word_store.get(normalize_label(tok))
        if wv is None:
            continue
        distances = []
        for label in labels:
            ev = entity_store.get(normalize_label(label))
            dot = sum(a * b for a, b in zip(wv, ev))
            nw = math.sqrt(sum(a * a for a in wv))
            ne = math.sqrt(sum(b * b for b in ev))
            distances.append(1.0 - dot / (nw * ne))
        bits[distances.index(min(distances))] = 1
    return bits


def test_masks_match_bruteforce_oracle_on_random_captions():
    ont = SynthOntology(dim=8, seed=4)
    res = synth_generate(ont, 10, 5, seed=8)
    ex = NounExtractor.from_lexicon(res.noun_lexicon)
    nouns = sorted(res.noun_lexicon)
    fillers = ["a", "the", "zz", "blorp", "near"]
    rng = np.random.default_rng(99)
    samples = res.dataset.samples
    for _ in range(500):
        sample = samples[int(rng.integers(len(samples)))]
        length = int(rng.integers(1, 9))
        caption = [str(rng.choice(nouns + fillers)) for _ in range(length)]
        got = build_mask_gt(caption, sample.entity_labels, res.word_store,
                            res.entity_store, ex)
        want = _oracle_mask(caption, sample.entity_labels, res.word_store,
                            res.entity_store, res.noun_lexicon)
        assert got.bits.tolist() == want


def test_mask_table_roundtrip(tmp_path):
    ont = SynthOntology(dim=8, seed=4)
    res = synth_generate(ont, 6, 3, seed=8)
    ex = NounExtractor.from_lexicon(res.noun_lexicon)
    table, _ = build_dataset_masks(res.dataset, res.word_store, res.entity_store, ex)
    p = tmp_path / "masks.jsonl"
    write_mask_table(p, table)
    loaded = read_mask_table(p)
    assert set(loaded) == set(table)
    for key in table:
        assert np.array_equal(loaded[key].bits, table[key].bits)
