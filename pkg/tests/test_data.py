import numpy as np
import pytest

from maskcap.data import (MSCOCO_REFERENCE, Dataset, Entity, SceneSample, SynthOntology,
                          Vocabulary, build_vocab, load_dataset, save_dataset,
                          synth_generate, synth_write_dir, tokenize)
from maskcap.errors import DomainError, ParseError, SchemaError
from maskcap.maskrules import NounExtractor, build_dataset_masks


def _tiny_dataset():
    s = SceneSample(
        id="s1",
        global_feature=np.array([0.5, -0.25]),
        entities=[Entity("Dog", np.array([1.0, 0.0])), Entity("Cake", np.array([0.0, 1.0]))],
        captions=[["a", "dog"], ["the", "cake"]],
        masks=[np.array([1, 0]), np.array([0, 1])],
    )
    return Dataset(samples=[s])


def test_roundtrip_is_byte_stable(tmp_path):
    p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    save_dataset(p1, _tiny_dataset())
    save_dataset(p2, load_dataset(p1))
    assert p1.read_bytes() == p2.read_bytes()


def test_bad_header_rejected(tmp_path):
    p = tmp_path / "a.jsonl"
    p.write_text("#something-else\n")
    with pytest.raises(ParseError, match="header"):
        load_dataset(p)


def test_mask_length_mismatch_rejected(tmp_path):
    ds = _tiny_dataset()
    ds.samples[0].masks[0] = np.array([1, 0, 0])
    p = tmp_path / "a.jsonl"
    save_dataset(p, ds)
    with pytest.raises(SchemaError, match="s1"):
        load_dataset(p)


def test_mscoco_reference_constants():
    # documented limits of the full-scale corpus, not shipped data
    assert MSCOCO_REFERENCE["train_images"] == 113287
    assert MSCOCO_REFERENCE["val_images"] == 5000
    assert MSCOCO_REFERENCE["test_images"] == 5000
    assert MSCOCO_REFERENCE["vocabulary"] == 9989
    assert MSCOCO_REFERENCE["mean_sentence_length"] == 11.3


def test_tokenize_lowercases_and_drops_punctuation():
    assert tokenize("A Dog, near the cake!") == ["a", "dog", "near", "the", "cake"]
    assert tokenize("") == []


def test_build_vocab_counts_by_hand():
    vocab = build_vocab([tokenize("a dog"), tokenize("a cat")], min_count=1)
    assert vocab.tokens == ["<pad>", "<bos>", "<eos>", "<unk>", "a", "cat", "dog"]
    assert len(vocab) == 7


def test_build_vocab_min_count_threshold():
    vocab = build_vocab([tokenize("a dog"), tokenize("a cat")], min_count=2)
    assert vocab.tokens == ["<pad>", "<bos>", "<eos>", "<unk>", "a"]


def test_build_vocab_deterministic():
    caps = [tokenize("a dog runs"), tokenize("a cat naps"), tokenize("dog dog")]
    v1 = build_vocab(caps)
    v2 = build_vocab(caps)
    assert v1.tokens == v2.tokens


def test_vocab_encode_decode_with_unk():
    vocab = build_vocab([["a", "dog"]])
    ids = vocab.encode(["a", "zebra", "dog"])
    assert ids[1] == vocab.unk
    assert vocab.decode(ids) == ["a", "<unk>", "dog"]


def test_synth_generation_is_pure(tmp_path):
    ont = SynthOntology(dim=8, seed=5)
    a = synth_generate(ont, 12, 4, seed=77)
    b = synth_generate(ont, 12, 4, seed=77)
    pa, pb = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    save_dataset(pa, a.dataset)
    save_dataset(pb, b.dataset)
    assert pa.read_bytes() == pb.read_bytes()


def test_synth_caption_nouns_come_from_scene_entities():
    ont = SynthOntology(dim=8, seed=5)
    res = synth_generate(ont, 30, 4, seed=3)
    for sample in res.dataset:
        scene_nouns = {ont.noun_of(lbl) for lbl in sample.entity_labels}
        for cap in sample.captions:
            mentioned = [t for t in cap if t in res.noun_lexicon]
            assert mentioned, "every caption mentions at least one entity"
            assert set(mentioned) <= scene_nouns


def test_synth_rejects_too_many_entities():
    ont = SynthOntology(dim=8)
    with pytest.raises(DomainError):
        synth_generate(ont, 5, len(ont.entity_types) + 1, seed=0)


def test_synth_gold_masks_match_mentions():
    ont = SynthOntology(dim=8, seed=5)
    res = synth_generate(ont, 20, 4, seed=9)
    for sample in res.dataset:
        for cap, mask in zip(sample.captions, sample.masks):
            for j, ent in enumerate(sample.entities):
                noun = ont.noun_of(ent.label)
                assert bool(mask[j]) == (noun in cap)


def test_noise_free_algorithm_masks_equal_gold_masks():
    ont = SynthOntology(dim=8, seed=5)
    res = synth_generate(ont, 40, 4, seed=11, feature_noise=0.0, word_vector_noise=0.0)
    extractor = NounExtractor.from_lexicon(res.noun_lexicon)
    table, coverage = build_dataset_masks(res.dataset, res.word_store, res.entity_store,
                                          extractor)
    assert coverage.nonzero_fraction == 1.0
    for sample in res.dataset:
        for ci, gold in enumerate(sample.masks):
            assert np.array_equal(table[(sample.id, ci)].bits, gold)


def test_noisy_word_vectors_still_mostly_recover_gold_masks():
    ont = SynthOntology(dim=8, seed=5)
    res = synth_generate(ont, 60, 4, seed=13, word_vector_noise=0.2)
    extractor = NounExtractor.from_lexicon(res.noun_lexicon)
    table, _ = build_dataset_masks(res.dataset, res.word_store, res.entity_store, extractor)
    agree = total = 0
    for sample in res.dataset:
        for ci, gold in enumerate(sample.masks):
            total += 1
            agree += int(np.array_equal(table[(sample.id, ci)].bits, gold))
    assert agree / total >= 0.95


def test_synth_write_dir_layout(tmp_path):
    ont = SynthOntology(dim=8, seed=5)
    synth_write_dir(tmp_path / "data", ont, sizes=(6, 3, 3), entities_per_scene=4, seed=21)
    for name in ("train.jsonl", "val.jsonl", "test.jsonl", "nouns.txt",
                 "word_vectors.txt", "entity_vectors.txt"):
        assert (tmp_path / "data" / name).exists()
    train = load_dataset(tmp_path / "data" / "train.jsonl")
    assert len(train) == 6
    assert train.samples[0].id.startswith("tr")
