"""Multinomial naive Bayes topic classifier.

Used to assign topic labels for partitioning LM training data, and as a
baseline whose posteriors serve directly as interpolation weights.
"""

from __future__ import annotations

from collections import Counter
from typing import Sequence

import numpy as np

from . import CtxlmError
from .corpus import Vocabulary, build_vocabulary

MAGIC = "ctxlm-topic-nb 1"


class ClassifierError(CtxlmError, ValueError):
    tag = "classifier"


class TopicClassifier:
    def __init__(self, labels: Sequence[str], class_counts: np.ndarray, token_counts: np.ndarray,
                 vocab: Vocabulary):
        self.labels = list(labels)
        self.vocab = vocab
        self.class_counts = np.asarray(class_counts, dtype=float)
        self.token_counts = np.asarray(token_counts, dtype=float)
        # events are every vocabulary id except the sentence markers
        self._events = np.array([i for i in range(len(vocab)) if i not in (vocab.bos, vocab.eos)])
        self.log_priors = np.log(self.class_counts / self.class_counts.sum())
        smoothed = self.token_counts[:, self._events] + 1.0
        loglik = np.full(self.token_counts.shape, -np.inf)
        loglik[:, self._events] = np.log(smoothed / smoothed.sum(axis=1, keepdims=True))
        self.log_likelihoods = loglik

    def posterior(self, utterance: Sequence[str]) -> np.ndarray:
        ids = list(self.vocab.encode(utterance))
        scores = self.log_priors + self.log_likelihoods[:, ids].sum(axis=1)
        scores = scores - scores.max()
        p = np.exp(scores)
        return p / p.sum()

    def predict(self, utterance: Sequence[str]) -> str:
        post = self.posterior(utterance)
        # labels are kept sorted, so the first maximum is the lexicographically first
        return self.labels[int(np.argmax(post))]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write(MAGIC + "\n")
            f.write("vocab " + " ".join(self.vocab.tokens) + "\n")
            for label, n, row in zip(self.labels, self.class_counts, self.token_counts):
                nz = np.nonzero(row)[0]
                f.write(f"class {label} {int(n)} " + " ".join(f"{i}:{int(row[i])}" for i in nz) + "\n")

    @classmethod
    def load(cls, path) -> "TopicClassifier":
        with open(path, encoding="utf-8") as f:
            lines = f.read().splitlines()
        if not lines or lines[0] != MAGIC:
            raise ClassifierError(f"{path}: not a topic classifier checkpoint")
        vocab = Vocabulary(lines[1].split()[1:])
        labels, class_counts, rows = [], [], []
        for line in lines[2:]:
            parts = line.split()
            labels.append(parts[1])
            class_counts.append(float(parts[2]))
            row = np.zeros(len(vocab))
            for item in parts[3:]:
                i, c = item.split(":")
                row[int(i)] = float(c)
            rows.append(row)
        return cls(labels, np.array(class_counts), np.array(rows), vocab)


def train_classifier(labeled: Sequence[tuple[Sequence[str], str]], vocab: Vocabulary | None = None,
                     labels: Sequence[str] | None = None) -> TopicClassifier:
    """Add-one smoothed multinomial NB; labels are sorted lexicographically.

    When ``labels`` is given every one of them must have training examples.
    """
    if not labeled:
        raise ClassifierError("no training examples")
    if vocab is None:
        vocab = build_vocabulary((toks for toks, _ in labeled), min_count=1)
    seen = {label for _, label in labeled}
    if labels is not None:
        missing = sorted(set(labels) - seen)
        if missing:
            raise ClassifierError(f"labels without training examples: {', '.join(missing)}")
        extra = sorted(seen - set(labels))
        if extra:
            raise ClassifierError(f"examples with undeclared labels: {', '.join(extra)}")
    labels = sorted(seen)
    row = {label: i for i, label in enumerate(labels)}
    class_counts = np.zeros(len(labels))
    token_counts = np.zeros((len(labels), len(vocab)))
    for toks, label in labeled:
        i = row[label]
        class_counts[i] += 1
        for tid, c in Counter(vocab.encode(toks)).items():
            token_counts[i, tid] += c
    return TopicClassifier(labels, class_counts, token_counts, vocab)


def posterior(clf: TopicClassifier, utterance: Sequence[str]) -> np.ndarray:
    return clf.posterior(utterance)


def label_corpus(clf: TopicClassifier, corpus: Sequence[Sequence[str]]) -> list[str]:
    return [clf.predict(utt) for utt in corpus]
