import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dictg2p.dictionary import load_dictionary
from dictg2p.encoders import build_key_store, read_key_file
from dictg2p.synthcorpus import (
    InfeasibleSpecError,
    emit_oracle_dictionary,
    generate_corpus,
    generate_spec,
    ground_truth,
    oracle_accuracy,
    read_corpus_dir,
    write_corpus_dir,
)
from oracles import ref_ground_truth


@pytest.fixture(scope="module")
def toy():
    spec = generate_spec(60, 12, 4, seed=7)
    return spec, generate_corpus(spec, 5000, seed=7)


def char_ids(spec, sentence):
    return [spec.char_index[c] for c in sentence]


def test_two_classes_one_polyphone():
    spec = generate_spec(6, 1, 2, seed=0)
    (p,) = spec.polyphones
    assert sorted(spec.governing[p]) == [0, 1]


def test_spec_is_deterministic():
    a, b = generate_spec(30, 5, 3, seed=4), generate_spec(30, 5, 3, seed=4)
    assert a.to_json() == b.to_json()
    assert generate_spec(30, 5, 3, seed=5).to_json() != a.to_json()


@pytest.mark.parametrize("seed", range(10))
def test_spec_invariants(seed):
    spec = generate_spec(60, 12, 4, seed=seed)
    v = spec.class_vectors
    np.testing.assert_allclose(np.linalg.norm(v, axis=1), 1.0, atol=1e-6)
    cos = v @ v.T
    angles = np.degrees(np.arccos(np.clip(cos[~np.eye(4, dtype=bool)], -1, 1)))
    assert angles.min() > 60
    assert len({tuple(r) for r in spec.codebook}) == len(spec.codebook)
    for p in spec.polyphones:
        assert 2 <= len(spec.prons[p]) <= 3
        assert len(set(spec.governing[p])) == len(spec.governing[p])
        assert len(set(spec.prons[p])) == len(spec.prons[p])
    assert len(spec.polyphones) == 12


@pytest.mark.parametrize("args", [(10, 2, 1), (5, 3, 4), (3, 0, 4)])
def test_infeasible_specs(args):
    with pytest.raises(InfeasibleSpecError):
        generate_spec(*args, seed=0)


def test_corpus_is_deterministic():
    spec = generate_spec(20, 4, 3, seed=1)
    a, b = generate_corpus(spec, 50, seed=3), generate_corpus(spec, 50, seed=3)
    assert a.sentences == b.sentences
    for x, y in zip(a.targets, b.targets):
        assert x.tobytes() == y.tobytes()


def test_independent_checker_agrees_with_labels(toy):
    spec, corpus = toy
    for sent, lab in zip(corpus.sentences, corpus.labels):
        ids = char_ids(spec, sent)
        for i in range(len(ids)):
            assert ref_ground_truth(spec.char_class, spec.governing, ids, i) == lab[i]


def test_every_polyphone_has_a_governing_neighbour(toy):
    spec, corpus = toy
    for sent, lab, mask in zip(corpus.sentences, corpus.labels, corpus.polyphone_masks):
        ids = char_ids(spec, sent)
        for i in np.flatnonzero(mask):
            cls = spec.governing[ids[i]][lab[i]]
            near = [spec.char_class[ids[k]] for k in (i - 1, i + 1) if 0 <= k < len(ids)]
            assert cls in near


def test_class_a_neighbours_give_class_a_reading():
    spec = generate_spec(20, 4, 3, seed=1)
    p = spec.polyphones[0]
    for j, cls in enumerate(spec.governing[p]):
        a = spec.class_members(cls)[0]
        assert ground_truth(spec, [a, p, a], 1) == j


def test_monophone_labels_are_zero(toy):
    _, corpus = toy
    for lab, mask in zip(corpus.labels, corpus.polyphone_masks):
        assert np.all(lab[~mask] == 0)


def test_reading_distribution_is_balanced(toy):
    spec, corpus = toy
    counts = {p: np.zeros(len(spec.prons[p])) for p in spec.polyphones}
    for sent, lab, mask in zip(corpus.sentences, corpus.labels, corpus.polyphone_masks):
        for i in np.flatnonzero(mask):
            counts[spec.char_index[sent[i]]][lab[i]] += 1
    for p, c in counts.items():
        assert np.all(np.abs(c / c.sum() - 1 / len(c)) <= 0.03)


def test_targets_are_codebook_means_plus_noise(toy):
    spec, corpus = toy
    resid = []
    for sent, lab, tgt in zip(corpus.sentences[:500], corpus.labels, corpus.targets):
        mean = np.stack([spec.acoustic_mean(c, int(j)) for c, j in zip(char_ids(spec, sent), lab)])
        resid.append(tgt - mean)
    resid = np.concatenate(resid)
    assert abs(resid.mean()) < 1e-3
    assert abs(resid.std() - 0.01) < 1e-3


def test_oracle_accuracy_definitions(toy):
    _, corpus = toy
    assert oracle_accuracy(corpus.labels, corpus) == (1.0, 1.0)
    with pytest.raises(ValueError):
        oracle_accuracy(corpus.labels[:-1], corpus)


def test_all_wrong_on_two_reading_polyphones():
    spec = generate_spec(20, 4, 3, seed=2, max_m=2)
    corpus = generate_corpus(spec, 200, seed=2)
    wrong = [np.where(m, 1 - lab, lab) for lab, m in zip(corpus.labels, corpus.polyphone_masks)]
    assert oracle_accuracy(wrong, corpus)[0] == 0.0


def test_random_guessing_is_chance():
    spec = generate_spec(60, 12, 4, seed=3, max_m=2)
    corpus = generate_corpus(spec, 5000, seed=3, n_heldout=0)
    rng = np.random.default_rng(0)
    guesses = [np.where(m, rng.integers(0, 2, size=len(lab)), lab) for lab, m in zip(corpus.labels, corpus.polyphone_masks)]
    assert sum(int(m.sum()) for m in corpus.polyphone_masks) >= 5000
    assert abs(oracle_accuracy(guesses, corpus)[0] - 0.5) <= 0.03


def test_context_free_guess_is_at_most_chance(toy):
    # the best fixed reading per polyphone cannot beat the reading balance
    spec, corpus = toy
    poly, overall = oracle_accuracy([np.zeros_like(lab) for lab in corpus.labels], corpus)
    assert poly <= 0.55


def test_oracle_dictionary_glosses_come_from_governing_class():
    spec = generate_spec(30, 6, 3, seed=6)
    d, _ = emit_oracle_dictionary(spec)
    for p in spec.polyphones:
        rec = d.lookup(spec.chars[p])
        assert rec.m == len(spec.prons[p])
        for j, g in enumerate(rec.glosses):
            assert {spec.char_class[spec.char_index[t]] for t in g.tokens} == {spec.governing[p][j]}


def test_corpus_directory_round_trip(tmp_path):
    spec = generate_spec(20, 4, 3, seed=1, d_model=16)
    corpus = generate_corpus(spec, 40, seed=1)
    write_corpus_dir(tmp_path, spec, corpus)
    back_spec, back, dict_path, key_path = read_corpus_dir(tmp_path)
    assert back_spec.to_json() == spec.to_json()
    assert back.sentences == corpus.sentences and back.splits == corpus.splits
    for a, b in zip(back.targets, corpus.targets):
        np.testing.assert_array_equal(a, b)
    for a, b in zip(back.labels, corpus.labels):
        np.testing.assert_array_equal(a, b)
    d, kf = emit_oracle_dictionary(spec)
    assert load_dictionary(dict_path) == d
    np.testing.assert_array_equal(build_key_store(d, "imported", read_key_file(key_path)).vectors, build_key_store(d, "imported", kf).vectors)
    _, blind, _, _ = read_corpus_dir(tmp_path, with_labels=False)
    assert all(len(lab) == 0 for lab in blind.labels)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 5))
def test_generator_labels_match_checker_property(seed, classes):
    spec = generate_spec(8 + 3 * classes, 3, classes, seed=seed, d_model=8)
    corpus = generate_corpus(spec, 30, seed=seed)
    for sent, lab in zip(corpus.sentences, corpus.labels):
        ids = char_ids(spec, sent)
        assert [ref_ground_truth(spec.char_class, spec.governing, ids, i) for i in range(len(ids))] == lab.tolist()
