"""Katz-smoothed backoff n-gram models and ARPA serialization.

Probabilities and backoff weights are stored as log10 values keyed by tuples
of vocabulary ids, ``probs[k-1][(h..., w)]`` for k-grams and
``backoffs[(h...)]`` for every entry of order below the model order.
"""

from __future__ import annotations

import io
import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass
from typing import Iterable, Sequence

from . import CtxlmError
from .corpus import Vocabulary

log = logging.getLogger(__name__)

# log10 value written for impossible events (ARPA convention)
LOG_ZERO = -99.0
# total unigram mass reserved for unseen words when discounting leaves none
UNSEEN_FLOOR = 1e-7
# log10 values are printed with this many decimals; with 6 the rounding alone
# can move sum_w P(w|h) of a reloaded model by about 2e-6
ARPA_DECIMALS = 7


class ArpaFormatError(CtxlmError, ValueError):
    tag = "arpa"


class NGramError(CtxlmError, ValueError):
    tag = "ngram"


@dataclass
class CountTable:
    vocab: Vocabulary
    order: int
    counts: list[dict[tuple[int, ...], int]]

    def count(self, tokens: Sequence[str]) -> int:
        key = tuple(self.vocab.index[t] for t in tokens)
        return self.counts[len(key) - 1].get(key, 0)

    def count_of_counts(self, k: int) -> Counter:
        """N_r over k-grams that predict a real token (not ``<s>``)."""
        bos = self.vocab.bos
        return Counter(r for g, r in self.counts[k - 1].items() if g[-1] != bos)

    def __bool__(self) -> bool:
        return any(self.counts)


def count_ngrams(corpus: Iterable[Sequence[str]], n: int, vocab: Vocabulary) -> CountTable:
    """Count all k-grams, k <= n, with n-1 leading ``<s>`` and one ``</s>`` per utterance."""
    if n < 1:
        raise NGramError("order must be >= 1")
    counts = [Counter() for _ in range(n)]
    pad = (vocab.bos,) * (n - 1)
    for utt in corpus:
        ids = pad + vocab.encode(utt) + (vocab.eos,)
        for k in range(1, n + 1):
            ck = counts[k - 1]
            for i in range(len(ids) - k + 1):
                ck[ids[i:i + k]] += 1
    return CountTable(vocab, n, [dict(c) for c in counts])


def katz_discounts(coc: Counter, cutoff: int, where: str = "") -> dict[int, float]:
    """Katz discount ratios d_r for 1 <= r <= cutoff.

    Counts whose Good-Turing estimate is degenerate are left undiscounted.
    """
    n1 = coc.get(1, 0)
    big = (cutoff + 1) * coc.get(cutoff + 1, 0) / n1 if n1 else 0.0
    if big >= 1.0:
        big = 0.0
    discounts = {}
    undiscounted = []
    for r in range(1, cutoff + 1):
        nr = coc.get(r, 0)
        if not nr:
            continue
        nr1 = coc.get(r + 1, 0)
        d = ((r + 1) * nr1 / (nr * r) - big) / (1.0 - big) if nr1 else 0.0
        if not 0.0 < d <= 1.0:
            undiscounted.append(f"{r} (N_{r + 1}={nr1})")
            d = 1.0
        discounts[r] = d
    if undiscounted:
        log.warning("%sdegenerate Good-Turing estimate; counts left undiscounted: %s",
                    where, ", ".join(undiscounted))
    return discounts


class NGramModel:
    def __init__(self, vocab: Vocabulary, order: int,
                 probs: list[dict[tuple[int, ...], float]],
                 backoffs: dict[tuple[int, ...], float]):
        self.vocab = vocab
        self.order = order
        self.probs = probs
        self.backoffs = backoffs

    def logprob(self, history: Sequence[int], w: int) -> float:
        """log10 P(w | history) by the backoff recursion."""
        n = self.order
        h = tuple(history[-(n - 1):]) if n > 1 and history else ()
        probs, backoffs = self.probs, self.backoffs
        bo = 0.0
        while True:
            p = probs[len(h)].get(h + (w,))
            if p is not None:
                return bo + p
            if not h:
                return bo + probs[0][(self.vocab.unk,)]
            bo += backoffs.get(h, 0.0)
            h = h[1:]

    def prob(self, history: Sequence[int], w: int) -> float:
        return 10.0 ** self.logprob(history, w)

    def state(self, history: Sequence[int]) -> tuple[int, ...]:
        """Longest suffix of the history that is a stored context.

        P(w | history) == P(w | state(history)) for every w, which makes the
        state a valid key for caching per-model probabilities.
        """
        n = self.order
        h = tuple(history)[-(n - 1):] if n > 1 else ()
        while h and h not in self.backoffs:
            h = h[1:]
        return h

    def sentence_logprob(self, ids: Sequence[int]) -> float:
        """log10 probability of an id sequence including ``</s>``."""
        hist = [self.vocab.bos] * (self.order - 1)
        total = 0.0
        for w in list(ids) + [self.vocab.eos]:
            total += self.logprob(hist, w)
            hist.append(w)
        return total

    def num_entries(self, k: int) -> int:
        return len(self.probs[k - 1])


def _history_totals(table: dict[tuple[int, ...], int], bos: int) -> dict[tuple[int, ...], int]:
    totals: dict[tuple[int, ...], int] = defaultdict(int)
    for g, r in table.items():
        if g[-1] != bos:
            totals[g[:-1]] += r
    return totals


def _set_backoffs(model: NGramModel, k: int) -> None:
    """Fill alpha(h) for all entries h of order k, given finished orders <= k+1."""
    bos = model.vocab.bos
    higher = model.probs[k]
    successors: dict[tuple[int, ...], list[int]] = defaultdict(list)
    for g in higher:
        if g[-1] != bos:
            successors[g[:-1]].append(g[-1])
    for h in model.probs[k - 1]:
        ws = successors.get(h)
        if not ws:
            model.backoffs[h] = 0.0
            continue
        seen = sum(10.0 ** higher[h + (w,)] for w in ws)
        lower = sum(10.0 ** model.logprob(h[1:], w) for w in ws)
        num, den = 1.0 - seen, 1.0 - lower
        if den <= 1e-12:
            # lower order spends everything on seen words; renormalize instead
            if num > 0:
                log.debug("context %s: no backoff mass; renormalizing", h)
                shift = -math.log10(seen)
                for w in ws:
                    higher[h + (w,)] += shift
            model.backoffs[h] = 0.0
        elif num <= 0.0:
            model.backoffs[h] = LOG_ZERO
        else:
            model.backoffs[h] = math.log10(num / den)


def train_katz(counts: CountTable, discount_cutoff: int = 5) -> NGramModel:
    if not counts:
        raise NGramError("cannot train on an empty count table")
    if discount_cutoff < 1:
        raise NGramError("discount_cutoff must be >= 1")
    vocab, n = counts.vocab, counts.order
    bos = vocab.bos
    probs: list[dict[tuple[int, ...], float]] = [dict() for _ in range(n)]
    model = NGramModel(vocab, n, probs, {})

    # unigrams: discounted mass goes uniformly to unseen vocabulary words
    uni = {g[0]: r for g, r in counts.counts[0].items() if g[0] != bos}
    total = sum(uni.values())
    d = katz_discounts(counts.count_of_counts(1), discount_cutoff, "1-grams: ")
    lin = {w: d.get(r, 1.0) * r / total for w, r in uni.items()}
    unseen = [w for w in vocab.targets if w not in lin]
    left = 1.0 - sum(lin.values())
    if unseen:
        if left < UNSEEN_FLOOR:
            scale = (1.0 - UNSEEN_FLOOR) / sum(lin.values())
            lin = {w: p * scale for w, p in lin.items()}
            left = UNSEEN_FLOOR
        for w in unseen:
            lin[w] = left / len(unseen)
    else:
        s = sum(lin.values())
        lin = {w: p / s for w, p in lin.items()}
    for w in range(len(vocab)):
        probs[0][(w,)] = LOG_ZERO if w == bos else math.log10(lin[w])

    for k in range(2, n + 1):
        table = counts.counts[k - 1]
        totals = _history_totals(table, bos)
        d = katz_discounts(counts.count_of_counts(k), discount_cutoff, f"{k}-grams: ")
        pk = probs[k - 1]
        for g, r in table.items():
            if g[-1] == bos:
                pk[g] = LOG_ZERO
            else:
                pk[g] = math.log10(d.get(r, 1.0) * r / totals[g[:-1]])
        _set_backoffs(model, k - 1)
    return model


def uniform_model(vocab: Vocabulary, order: int = 1) -> NGramModel:
    """Unigram-only uniform model, used when a component has no data."""
    p = -math.log10(len(vocab) - 1)
    probs = [dict() for _ in range(order)]
    probs[0] = {(w,): (LOG_ZERO if w == vocab.bos else p) for w in range(len(vocab))}
    return NGramModel(vocab, order, probs, {(w,): 0.0 for w in range(len(vocab))} if order > 1 else {})


def interpolate_models(models: Sequence[NGramModel], weights: Sequence[float]) -> NGramModel:
    """Merge models into one backoff model by static linear interpolation.

    Every n-gram stored in any input gets the interpolated probability; backoff
    weights are then recomputed so each context normalizes.
    """
    vocab, n = models[0].vocab, max(m.order for m in models)
    if any(m.vocab != vocab for m in models):
        raise NGramError("models to merge must share a vocabulary")
    bos = vocab.bos
    probs: list[dict[tuple[int, ...], float]] = [dict() for _ in range(n)]
    merged = NGramModel(vocab, n, probs, {})
    for k in range(1, n + 1):
        keys = set()
        for m in models:
            if k <= m.order:
                keys.update(m.probs[k - 1])
        for g in sorted(keys):
            if g[-1] == bos:
                probs[k - 1][g] = LOG_ZERO
            else:
                p = sum(lam * m.prob(g[:-1], g[-1]) for m, lam in zip(models, weights))
                probs[k - 1][g] = math.log10(p)
        if k > 1:
            _set_backoffs(merged, k - 1)
    return merged


def write_arpa(model: NGramModel, out=None) -> str | None:
    """Serialize to ARPA text. Returns the text when ``out`` is None."""
    buf = io.StringIO() if out is None else out
    toks = model.vocab.tokens
    n = model.order
    buf.write("\n\\data\\\n")
    for k in range(1, n + 1):
        buf.write(f"ngram {k}={len(model.probs[k - 1])}\n")
    for k in range(1, n + 1):
        buf.write(f"\n\\{k}-grams:\n")
        for g in sorted(model.probs[k - 1]):
            words = " ".join(toks[i] for i in g)
            line = f"{model.probs[k - 1][g]:.{ARPA_DECIMALS}f}\t{words}"
            if k < n:
                line += f"\t{model.backoffs.get(g, 0.0):.{ARPA_DECIMALS}f}"
            buf.write(line + "\n")
    buf.write("\n\\end\\\n")
    if out is None:
        return buf.getvalue()
    return None


def read_arpa(text: str | io.TextIOBase) -> NGramModel:
    lines = (text.splitlines() if isinstance(text, str) else text.read().splitlines())
    lines = [ln.strip() for ln in lines]
    pos = 0
    while pos < len(lines) and lines[pos] != "\\data\\":
        pos += 1
    if pos == len(lines):
        raise ArpaFormatError("missing \\data\\ header")
    pos += 1
    declared: dict[int, int] = {}
    while pos < len(lines) and lines[pos].startswith("ngram "):
        try:
            k, c = lines[pos][6:].split("=")
            declared[int(k)] = int(c)
        except ValueError:
            raise ArpaFormatError(f"bad count line {lines[pos]!r}") from None
        pos += 1
    if not declared or sorted(declared) != list(range(1, len(declared) + 1)):
        raise ArpaFormatError("\\data\\ section must declare orders 1..n")
    n = len(declared)
    raw: list[list[tuple[float, list[str], float]]] = []
    for k in range(1, n + 1):
        while pos < len(lines) and not lines[pos]:
            pos += 1
        if pos == len(lines) or lines[pos] != f"\\{k}-grams:":
            found = lines[pos] if pos < len(lines) else "end of file"
            raise ArpaFormatError(f"expected \\{k}-grams: section, found {found!r}")
        pos += 1
        entries = []
        while pos < len(lines) and lines[pos] and not lines[pos].startswith("\\"):
            fields = lines[pos].split()
            if len(fields) not in (k + 1, k + 2):
                raise ArpaFormatError(f"malformed {k}-gram line {lines[pos]!r}")
            bo = float(fields[k + 1]) if len(fields) == k + 2 else 0.0
            entries.append((float(fields[0]), fields[1:k + 1], bo))
            pos += 1
        if len(entries) != declared[k]:
            raise ArpaFormatError(f"{k}-grams: declared {declared[k]}, found {len(entries)}")
        raw.append(entries)
    while pos < len(lines) and not lines[pos]:
        pos += 1
    if pos == len(lines) or lines[pos] != "\\end\\":
        raise ArpaFormatError("missing \\end\\ marker")

    vocab = Vocabulary(words[0] for _, words, _ in raw[0])
    probs: list[dict[tuple[int, ...], float]] = [dict() for _ in range(n)]
    backoffs: dict[tuple[int, ...], float] = {}
    for k, entries in enumerate(raw, 1):
        for lp, words, bo in entries:
            try:
                g = tuple(vocab.index[w] for w in words)
            except KeyError as exc:
                raise ArpaFormatError(f"{k}-gram uses token {exc.args[0]!r} missing from 1-grams") from None
            probs[k - 1][g] = lp
            if k < n:
                backoffs[g] = bo
    return NGramModel(vocab, n, probs, backoffs)


def save_arpa(model: NGramModel, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        write_arpa(model, f)


def load_arpa(path) -> NGramModel:
    with open(path, encoding="utf-8") as f:
        return read_arpa(f.read())
