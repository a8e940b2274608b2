"""On-the-fly linear interpolation of backoff n-gram models.

Component models stay separate. A query first maps the history to the tuple
of per-component backoff states (longest stored context in each model), and
the per-component probabilities for ``(states, word)`` are cached, so new
interpolation weights never trigger new component lookups.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from . import CtxlmError
from .ngram import NGramModel

WEIGHT_FLOOR = 1e-8


class MixtureError(CtxlmError, ValueError):
    tag = "mixture"


def check_weights(weights, size: int | None = None) -> np.ndarray:
    lam = np.asarray(weights, dtype=float)
    if lam.ndim != 1 or (size is not None and lam.shape[0] != size):
        raise MixtureError(f"expected {size} interpolation weights, got shape {lam.shape}")
    if np.any(lam < 0) or abs(lam.sum() - 1.0) > 1e-9:
        raise MixtureError("interpolation weights must be non-negative and sum to 1")
    return lam


def floor_weights(weights, floor: float = WEIGHT_FLOOR) -> np.ndarray:
    lam = np.maximum(np.asarray(weights, dtype=float), floor)
    return lam / lam.sum()


class MixtureLM:
    def __init__(self, components: Sequence[NGramModel], labels: Sequence[str] | None = None,
                 max_memo: int = 1_000_000):
        if not components:
            raise MixtureError("a mixture needs at least one component")
        vocab = components[0].vocab
        if any(m.vocab != vocab for m in components[1:]):
            raise MixtureError("all components must share one vocabulary")
        self.components = list(components)
        self.labels = list(labels) if labels is not None else [str(i) for i in range(len(components))]
        if len(self.labels) != len(self.components):
            raise MixtureError("one label per component required")
        self.vocab = vocab
        self.order = max(m.order for m in components)
        self.max_memo = max_memo
        self._memo: dict[tuple, np.ndarray] = {}

    @property
    def size(self) -> int:
        return len(self.components)

    def clear_memo(self) -> None:
        self._memo.clear()

    def states(self, history: Sequence[int]) -> tuple[tuple[int, ...], ...]:
        return tuple(m.state(history) for m in self.components)

    def component_probs(self, history: Sequence[int], w: int) -> np.ndarray:
        """Linear P_k(w | history) for every component k (read-only array)."""
        key = (self.states(history), w)
        probs = self._memo.get(key)
        if probs is None:
            probs = np.array([10.0 ** m.logprob(s, w) for m, s in zip(self.components, key[0])])
            probs.flags.writeable = False
            if len(self._memo) >= self.max_memo:
                self._memo.clear()
            self._memo[key] = probs
        return probs

    def mix_prob(self, weights, history: Sequence[int], w: int) -> float:
        lam = check_weights(weights, self.size)
        return float(lam @ self.component_probs(history, w))

    def positions(self, ids: Sequence[int]):
        """Yield (history, word) for each predicted position including ``</s>``."""
        n1 = self.order - 1
        padded = (self.vocab.bos,) * n1 + tuple(ids)
        for j, w in enumerate(tuple(ids) + (self.vocab.eos,)):
            yield padded[j:j + n1], w

    def prob_matrix(self, ids: Sequence[int]) -> np.ndarray:
        """(len(ids)+1) x C matrix of linear component probabilities."""
        return np.array([self.component_probs(h, w) for h, w in self.positions(ids)])

    def utterance_logprob(self, weights, ids: Sequence[int]) -> float:
        """Natural-log probability of the utterance (with ``</s>``) under the mixture."""
        lam = check_weights(weights, self.size)
        total = 0.0
        for h, w in self.positions(ids):
            p = float(lam @ self.component_probs(h, w))
            total += math.log(p) if p > 0 else -math.inf
        return total

    def perplexity(self, weights, corpus: Sequence[Sequence[int]]) -> float:
        """Per-token perplexity (``</s>`` counted); ``weights`` is one vector or one per utterance."""
        if not corpus:
            raise MixtureError("perplexity of an empty corpus")
        w = np.asarray(weights, dtype=float)
        per_utt = w if w.ndim == 2 else np.broadcast_to(w, (len(corpus), self.size))
        if len(per_utt) != len(corpus):
            raise MixtureError("one weight vector per utterance required")
        total = sum(self.utterance_logprob(lam, ids) for lam, ids in zip(per_utt, corpus))
        ntok = sum(len(ids) + 1 for ids in corpus)
        return math.exp(-total / ntok)


def perplexity_from_matrices(weights, matrices: Sequence[np.ndarray]) -> float:
    """Same quantity as ``MixtureLM.perplexity`` from precomputed probability matrices."""
    w = np.asarray(weights, dtype=float)
    per_utt = w if w.ndim == 2 else np.broadcast_to(w, (len(matrices), w.shape[0]))
    total, ntok = 0.0, 0
    for lam, P in zip(per_utt, matrices):
        total += np.log(P @ lam).sum()
        ntok += P.shape[0]
    return math.exp(-total / ntok)


def em_weights(P: np.ndarray, max_iters: int = 100, tol: float = 1e-6, init=None):
    """Mixture-weight EM on a stacked (positions x C) probability matrix.

    Returns ``(weights, trace)`` where ``trace`` holds the mean log-likelihood
    before the first update and after every update. No floor is applied here.
    """
    P = np.asarray(P, dtype=float)
    if P.ndim != 2 or P.shape[0] == 0:
        raise MixtureError("EM needs a non-empty positions x components matrix")
    C = P.shape[1]
    lam = np.full(C, 1.0 / C) if init is None else check_weights(init, C)
    with np.errstate(divide="ignore"):
        trace = [float(np.log(P @ lam).mean())]
        for _ in range(max_iters):
            mix = P @ lam
            resp = P * lam / mix[:, None]
            lam = resp.mean(axis=0)
            trace.append(float(np.log(P @ lam).mean()))
            if abs(trace[-1] - trace[-2]) < tol:
                break
    return lam, trace


def em_static_weights(mix: MixtureLM, dev_corpus: Sequence[Sequence[int]],
                      max_iters: int = 100, tol: float = 1e-6) -> np.ndarray:
    """Static weights minimizing dev perplexity, floored and renormalized."""
    if not dev_corpus:
        raise MixtureError("EM needs a non-empty dev corpus")
    P = np.vstack([mix.prob_matrix(ids) for ids in dev_corpus])
    lam, _ = em_weights(P, max_iters, tol)
    return floor_weights(lam)


def write_weights(path, labels: Sequence[str], weights) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for label, w in zip(labels, weights):
            f.write(f"{label} {float(w)!r}\n")


def read_weights(path) -> tuple[list[str], np.ndarray]:
    labels, weights = [], []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                label, w = line.rsplit(None, 1)
                labels.append(label)
                weights.append(float(w))
    return labels, check_weights(weights)
