import copy
import math
import random

import pytest
from hypothesis import given, settings, strategies as st

from ctxlm.corpus import build_vocabulary
from ctxlm.ngram import (ArpaFormatError, NGramError, _set_backoffs, count_ngrams, interpolate_models, read_arpa,
                         train_katz, uniform_model, write_arpa)
from helpers import random_corpus
from oracles import katz_bigram


def model_for(corpus, n=2, cutoff=5, min_count=1):
    vocab = build_vocabulary(corpus, min_count)
    return train_katz(count_ngrams(corpus, n, vocab), cutoff)


def test_count_ngrams_bigram():
    v = build_vocabulary([["a"]], 1)
    t = count_ngrams([["a"]], 2, v)
    expected = {("<s>",): 1, ("a",): 1, ("</s>",): 1, ("<s>", "a"): 1, ("a", "</s>"): 1}
    for toks, c in expected.items():
        assert t.count(toks) == c
    assert sum(len(c) for c in t.counts) == len(expected)


def test_count_ngrams_edge_cases():
    v = build_vocabulary([["a", "a"]], 1)
    assert not count_ngrams([], 3, v)
    assert count_ngrams([["a", "a"]], 1, v).count(["a"]) == 2
    with pytest.raises(NGramError):
        count_ngrams([], 0, v)


def test_train_rejects_empty():
    v = build_vocabulary([], 1)
    with pytest.raises(NGramError):
        train_katz(count_ngrams([], 2, v))


def test_ml_when_all_counts_exceed_cutoff():
    corpus = [["a", "b"]] * 7 + [["a", "c"]] * 8
    m = model_for(corpus)
    ids = m.vocab.index
    assert m.prob([ids["a"]], ids["b"]) == pytest.approx(7 / 15, abs=1e-12)
    assert m.prob([ids["a"]], ids["c"]) == pytest.approx(8 / 15, abs=1e-12)
    assert m.prob([ids["b"]], ids["</s>"]) == pytest.approx(1.0, abs=1e-12)


def test_symmetry():
    m = model_for([["a", "b"], ["a", "c"]])
    ids = m.vocab.index
    assert m.logprob([ids["a"]], ids["b"]) == m.logprob([ids["a"]], ids["c"])


@pytest.mark.parametrize("corpus", [
    [["a", "b"], ["b", "c", "a"], ["a", "c"]],
    [["a", "a", "b"], ["c"], ["b", "a"], ["a"]],
    [["x", "y", "x", "y", "z"], ["y", "y"]],
])
def test_matches_hand_katz_oracle(corpus):
    m = model_for(corpus)
    tokens = m.vocab.tokens
    _, cond = katz_bigram(corpus, tokens)
    for h in tokens:
        if h == "</s>":
            continue
        for w in tokens:
            if w == "<s>":
                continue
            got = m.prob([m.vocab.index[h]], m.vocab.index[w])
            assert got == pytest.approx(cond(h, w), rel=1e-9, abs=1e-15), (h, w)


def test_unseen_bigram_is_backoff_times_unigram():
    corpus = [["a", "b"], ["b", "c", "a"], ["a", "c"]]
    m = model_for(corpus)
    a, b = m.vocab.index["a"], m.vocab.index["b"]
    assert (b, a) not in m.probs[1]
    expected = 10 ** m.backoffs[(b,)] * m.prob([], a)
    assert m.prob([b], a) == pytest.approx(expected, rel=1e-12)
    p1, cond = katz_bigram(corpus, m.vocab.tokens)
    assert m.prob([b], a) == pytest.approx(cond("b", "a"), rel=1e-9)


def test_unigram_probability_without_discounting():
    # counts a:2 b:1 </s>:1; N_3 = 0 and d_1 = 1 so nothing is discounted
    m = model_for([["a", "b", "a"]], n=1)
    assert m.logprob([], m.vocab.index["a"]) == pytest.approx(math.log10(0.5), abs=1e-6)


def test_unknown_word_gets_unk_probability():
    m = model_for([["a", "b"], ["b"]], n=3)
    unk = m.vocab.unk
    assert m.logprob([m.vocab.index["a"]], unk) == m.logprob([m.vocab.index["a"]], 10_000)
    assert 0 < m.prob([], unk) < 1


def check_normalized(m, histories):
    targets = m.vocab.targets
    for h in histories:
        total = sum(m.prob(h, w) for w in targets)
        assert total == pytest.approx(1.0, abs=1e-6), h


def sample_histories(m, rng, k=100):
    ids = list(range(len(m.vocab)))
    stored = [h for h in m.backoffs]
    out = []
    for i in range(k):
        if i % 2 and stored:
            out.append(list(rng.choice(stored)))
        else:
            out.append([rng.choice(ids) for _ in range(rng.randint(0, m.order - 1))])
    return out


@pytest.mark.parametrize("order", [1, 2, 3, 4])
def test_normalization_random_corpus(order):
    rng = random.Random(order)
    m = model_for(random_corpus(rng, 400), n=order)
    check_normalized(m, sample_histories(m, rng))


@settings(max_examples=25, deadline=None)
@given(st.lists(st.lists(st.sampled_from("abcdef"), min_size=1, max_size=7), min_size=1, max_size=40),
       st.integers(1, 4), st.integers(1, 6))
def test_normalization_property(corpus, order, cutoff):
    m = model_for(corpus, n=order, cutoff=cutoff)
    rng = random.Random(0)
    check_normalized(m, sample_histories(m, rng, 20))
    for table in m.probs:
        assert all(-99.0 <= p <= 1e-12 for p in table.values())
    assert all(math.isfinite(b) for b in m.backoffs.values())


def test_stored_prefix_chain():
    m = model_for(random_corpus(random.Random(3), 100), n=4)
    for k in range(2, 5):
        for g in m.probs[k - 1]:
            assert g[:-1] in m.backoffs


def test_state_gives_same_probability():
    rng = random.Random(5)
    m = model_for(random_corpus(rng, 200), n=4)
    for h in sample_histories(m, rng, 50):
        s = m.state(h)
        for w in m.vocab.targets:
            assert m.logprob(h, w) == m.logprob(s, w)


def test_arpa_round_trip_is_fixpoint():
    m = model_for(random_corpus(random.Random(1), 150), n=4)
    text = write_arpa(m)
    again = read_arpa(text)
    assert write_arpa(again) == text
    for k in range(4):
        for g, p in m.probs[k].items():
            assert again.probs[k][g] == pytest.approx(p, abs=5e-8)
    for g, b in m.backoffs.items():
        assert again.backoffs[g] == pytest.approx(b, abs=5e-8)


def test_arpa_header_and_unigrams():
    m = model_for([["a", "b"]], n=2)
    text = write_arpa(m)
    assert f"ngram 1={len(m.vocab)}" in text
    uni = text.split("\\1-grams:\n")[1].split("\n\n")[0].splitlines()
    assert {line.split("\t")[1] for line in uni} == {"<s>", "</s>", "<unk>", "a", "b"}


@pytest.mark.parametrize("bad", [
    "\\1-grams:\n-1.0\ta\n\\end\\\n",
    "\\data\\\nngram 1=2\n\n\\1-grams:\n-0.3\ta\n\n\\end\\\n",
    "\\data\\\nngram 1=1\n\n\\2-grams:\n-0.3\ta b\n\n\\end\\\n",
    "\\data\\\nngram 1=1\n\n\\1-grams:\n-0.3\ta\n",
    "\\data\\\nngram 1=1\nngram 2=1\n\n\\1-grams:\n-0.3\ta\t0\n\n\\2-grams:\n-0.1\ta zz\n\n\\end\\\n",
])
def test_arpa_rejects_malformed(bad):
    with pytest.raises(ArpaFormatError):
        read_arpa(bad)


def test_uniform_model_is_normalized():
    v = build_vocabulary([["a", "b", "c"]], 1)
    m = uniform_model(v, 4)
    check_normalized(m, [[], [v.index["a"]], [v.bos] * 3])
    assert read_arpa(write_arpa(m)).order == 4


def test_interpolated_model_is_normalized_and_exact_on_stored_ngrams():
    rng = random.Random(11)
    c1, c2 = random_corpus(rng, 150, "abcdef"), random_corpus(rng, 150, "cdefgh")
    vocab = build_vocabulary(c1 + c2, 1)
    m1 = train_katz(count_ngrams(c1, 3, vocab))
    m2 = train_katz(count_ngrams(c2, 3, vocab))
    merged = interpolate_models([m1, m2], [0.3, 0.7])
    check_normalized(merged, sample_histories(merged, rng, 40))
    for g in list(merged.probs[2])[:200]:
        if g[-1] != vocab.bos:
            expect = 0.3 * m1.prob(g[:-1], g[-1]) + 0.7 * m2.prob(g[:-1], g[-1])
            assert merged.prob(g[:-1], g[-1]) == pytest.approx(expect, rel=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 4))
def test_removing_an_entry_never_raises_seen_estimates(seed, order):
    rng = random.Random(seed)
    corpus = random_corpus(rng, rng.randint(30, 300), "abcdefgh"[:rng.randint(2, 8)], rng.randint(2, 6))
    vocab = build_vocabulary(corpus, 1)
    counts = count_ngrams(corpus, order, vocab)
    m = train_katz(counts)
    top = sorted(g for g in m.probs[-1] if g[-1] != vocab.bos)
    if not top:
        return
    victim = rng.choice(top)
    pruned = copy.deepcopy(m)
    del pruned.probs[-1][victim]
    _set_backoffs(pruned, order - 1)
    h = victim[:-1]
    assert sum(pruned.prob(h, w) for w in vocab.targets) == pytest.approx(1.0, abs=1e-6)
    for k in range(order):
        for g, c in counts.counts[k].items():
            if c > 5 and g != victim and g in m.probs[k] and g[-1] != vocab.bos:
                assert pruned.prob(g[:-1], g[-1]) <= m.prob(g[:-1], g[-1]) + 1e-15
