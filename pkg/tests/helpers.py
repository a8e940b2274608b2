"""Small fixtures shared by several test modules."""

import random

from ctxlm.corpus import build_vocabulary
from ctxlm.ngram import count_ngrams, train_katz


def random_corpus(rng, n_utts=200, alphabet="abcdefghij", max_len=8):
    return [[rng.choice(alphabet) for _ in range(rng.randint(1, max_len))] for _ in range(n_utts)]


def random_components(seed, k=3, order=4, n_utts=300):
    """``k`` Katz models on a shared vocabulary, each trained on a differently skewed corpus."""
    rng = random.Random(seed)
    letters = "abcdefghijkl"
    corpora = []
    for i in range(k):
        skew = letters[3 * i:3 * i + 5] * 3 + letters
        corpora.append(random_corpus(rng, n_utts, skew))
    vocab = build_vocabulary([u for c in corpora for u in c], 1)
    return [train_katz(count_ngrams(c, order, vocab)) for c in corpora]


def random_query(rng, vocab, order):
    ids = list(range(len(vocab)))
    h = [rng.choice(ids) for _ in range(rng.randint(0, order - 1))]
    return h, rng.choice(vocab.targets)


# (reference, hypothesis, entity indices); the hand tallies are in test_evaluation.py
GOLDEN = [
    ("play the beatles", "play the beetles", {2}),
    ("call mom", "call mom", {1}),
    ("weather in boston today", "weather in austin today", {2}),
    ("play taylor swift", "play taylor", {1, 2}),
    ("set alarm", "set an alarm", set()),
    ("navigate to main street", "navigate to main street please", {2, 3}),
    ("order pizza from dominos", "order pizza from", {3}),
    ("text john smith", "text jon smyth", {1, 2}),
    ("open spotify", "open spot if i", {1}),
    ("turn on lights", "turn off lights", set()),
]
