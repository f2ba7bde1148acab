from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chi2_contingency

from hdmi.errors import CapacityError, ConfigurationError, DegenerateLabelError, InputError
from hdmi.tasks import (AGREEMENT, SUITES, VOCAB, LabeledExample, _agreement_example, _gender_pair,
                        assign_ze, flip_example, gen_agreement_suite, gen_causalgym_suite,
                        gen_corpus, gen_minimal_pairs, independence_indices,
                        independence_subsample, make_splits, read_corpus, read_dataset,
                        write_corpus, write_dataset)


def ex(zc, ze, i=0):
    return LabeledExample((1, 4 + i % 50), 23, 24, zc, ze, AGREEMENT)


# -- agreement suite -------------------------------------------------------------------

def test_key_to_the_cabinets():
    # noun "key" singular, no adjective, "to the cabinets", plain present tense
    e = _agreement_example((0, 0, -1, (9, 10, 1), 0))
    assert e.text == "the key to the cabinets"
    assert VOCAB.words[e.source_token] == "is" and VOCAB.words[e.target_token] == "are"
    assert (e.z_c, e.z_e) == (0, 2)


def test_bare_plural_subject():
    e = _agreement_example((0, 1, -1, None, 0))
    assert e.text == "the keys"
    assert (e.z_c, e.z_e) == (1, 0)


def test_agreement_balance():
    counts = Counter(e.z_c for e in gen_agreement_suite(400, seed=0))
    assert all(0.45 <= counts[z] / 400 <= 0.55 for z in (0, 1))


def test_agreement_examples_are_distinct_and_fit():
    suite = gen_agreement_suite(600, seed=1)
    assert len({e.prompt for e in suite}) == 600
    assert max(len(e.prompt) for e in suite) <= 31
    assert all(e.source_token != e.target_token for e in suite)


def test_agreement_capacity_error():
    with pytest.raises(CapacityError):
        gen_agreement_suite(6 * 289, seed=0)
    assert len(gen_agreement_suite(6 * 289, seed=0, replace=True)) == 6 * 289


def test_agreement_deterministic():
    assert gen_agreement_suite(50, 3) == gen_agreement_suite(50, 3)


# -- minimal-pair suites ------------------------------------------------------------------

def test_gender_pair_swaps_labels():
    src, cf = _gender_pair((0, 0, 0, None))
    assert src.text == "john walked because" and cf.text == "jane walked because"
    he, she = VOCAB.id("he"), VOCAB.id("she")
    assert (src.source_token, src.target_token) == (he, she)
    assert (cf.source_token, cf.target_token) == (she, he)


@pytest.mark.parametrize("name", SUITES)
def test_pairs_swap_roles(name):
    suite = gen_causalgym_suite(name, 40, seed=2)
    for a, b in zip(suite[::2], suite[1::2]):
        assert (a.source_token, a.target_token) == (b.target_token, b.source_token)
        assert {a.z_c, b.z_c} == {0, 1}


@pytest.mark.parametrize("name", SUITES)
def test_pairs_differ_in_one_token(name):
    for pair in gen_minimal_pairs(name, 30, seed=4):
        assert len(pair.x_src) == len(pair.x_cf)
        assert sum(a != b for a, b in zip(pair.x_src, pair.x_cf)) == 1
        assert pair.y_src != pair.y_cf


def test_gender_suite_exactly_balanced():
    counts = Counter(e.z_c for e in gen_causalgym_suite("agr_gender", 200, seed=0))
    assert counts[0] == counts[1] == 100


def test_unknown_suite():
    with pytest.raises(InputError):
        gen_causalgym_suite("nope", 10, 0)


# -- assign_ze ----------------------------------------------------------------------------

@pytest.mark.parametrize("text, expected", [
    ("the student of the teachers", 1),
    ("the student in the cabinet", 2),
    ("the student with the keys", 3),
    ("the student by the table", 3),
    ("the student near the table", 4),
    ("the student", 0),
    ("the student of the keys near the table", 4),
])
def test_assign_ze(text, expected):
    assert assign_ze(VOCAB.encode(text)) == expected


def test_assign_ze_window():
    filler = ["the"] * 11
    assert assign_ze(VOCAB.encode(["of"] + filler)) == 1        # distance 12
    assert assign_ze(VOCAB.encode(["of"] + filler + ["the"])) == 0  # distance 13


# -- independence subsampling --------------------------------------------------------------

def test_min_cell_rule():
    counts = {(0, 0): 10, (0, 1): 4, (1, 0): 7, (1, 1): 9}
    zc = [k[0] for k, n in counts.items() for _ in range(n)]
    ze = [k[1] for k, n in counts.items() for _ in range(n)]
    keep = independence_indices(zc, ze, seed=0)
    assert len(keep) == 16
    assert Counter((zc[i], ze[i]) for i in keep) == Counter({k: 4 for k in counts})


def test_balanced_input_unchanged():
    examples = [ex(zc, ze, i) for i, (zc, ze) in enumerate([(0, 0), (0, 1), (1, 0), (1, 1)] * 3)]
    assert sorted(independence_subsample(examples, 0), key=examples.index) == examples


def test_subsample_passes_chi_square():
    examples = gen_agreement_suite(400, seed=5)[:350]
    sub = independence_subsample(examples, seed=0)
    table = np.zeros((2, 3))
    for e in sub:
        table[e.z_c, e.z_e] += 1
    assert chi2_contingency(table).pvalue > 0.99


def test_subsample_degenerate():
    with pytest.raises(DegenerateLabelError):
        independence_indices([0, 0, 0], [0, 1, 2], seed=0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 2)), min_size=2, max_size=80))
def test_subsample_factorizes(labels):
    zc, ze = zip(*labels)
    if len(set(zc)) < 2 or len(set(ze)) < 2:
        return
    keep = independence_indices(zc, ze, seed=0)
    joint = Counter((zc[i], ze[i]) for i in keep)
    assert len(set(joint.values())) == 1
    assert set(joint) == set(labels)


# -- splits ---------------------------------------------------------------------------------

def test_split_sizes():
    spec = make_splits(gen_agreement_suite(100, seed=0), (0.4, 0.3, 0.3), seed=0)
    assert len(spec.interventional) == 40
    assert len(spec.validation_probe) <= 30
    assert len(spec.test) == 30
    parts = map(set, (spec.interventional, spec.validation_probe, spec.test))
    a, b, c = parts
    assert not (a & b or a & c or b & c)


def test_split_deterministic():
    examples = gen_agreement_suite(120, seed=0)
    assert make_splits(examples, seed=3) == make_splits(examples, seed=3)
    assert make_splits(examples, seed=3) != make_splits(examples, seed=4)


@pytest.mark.parametrize("fractions", [(0.5, 0.5, 0.5), (0.4, 0.0, 0.3), (0.4, 0.3)])
def test_split_bad_fractions(fractions):
    with pytest.raises(ConfigurationError):
        make_splits(gen_agreement_suite(100, seed=0), fractions)


def test_split_empty():
    with pytest.raises(ConfigurationError):
        make_splits(gen_agreement_suite(6, seed=0), (0.4, 0.3, 0.1))


# -- flip invariant ----------------------------------------------------------------------------

@settings(max_examples=40, deadline=None)
@given(st.sampled_from((AGREEMENT,) + SUITES), st.integers(0, 10_000))
def test_flip_exchanges_labels(name, seed):
    for e in (gen_agreement_suite(6, seed) if name == AGREEMENT else gen_causalgym_suite(name, 6, seed)):
        f = flip_example(e)
        assert (f.source_token, f.target_token) == (e.target_token, e.source_token)
        assert f.z_c == 1 - e.z_c
        assert flip_example(f) == e


# -- files ------------------------------------------------------------------------------------

def test_dataset_round_trip(tmp_path):
    examples = gen_agreement_suite(30, 0) + gen_causalgym_suite("cleft", 10, 0)
    write_dataset(tmp_path / "d.tsv", examples)
    assert read_dataset(tmp_path / "d.tsv") == examples
    first = (tmp_path / "d.tsv").read_text(encoding="utf-8").splitlines()[0].split("\t")
    assert len(first) == 6


def test_dataset_bad_record(tmp_path):
    (tmp_path / "d.tsv").write_text("the keys\tis\tare\n", encoding="utf-8")
    with pytest.raises(InputError):
        read_dataset(tmp_path / "d.tsv")


def test_corpus_round_trip(tmp_path):
    corpus = gen_corpus(40, seed=0)
    write_corpus(tmp_path / "c.txt", corpus)
    assert read_corpus(tmp_path / "c.txt") == corpus
