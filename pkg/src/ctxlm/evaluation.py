"""Scoring and the simulated decoding harness.

Decoding is N-best rescoring: every hypothesis carries a channel (acoustic)
log score, and the LM contributes ``lm_scale * ln P_mix(hypothesis)`` under
the utterance's interpolation weights. Decoding functions only ever see
``DecodeInput`` objects; reference transcripts live in the ``Scorer``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import CtxlmError
from .adapter import AdapterNet
from .corpus import Interaction
from .features import EmbeddingTable, FeatureConfig, build_features
from .mixture import MixtureLM, check_weights, floor_weights
from .topicbase import TopicClassifier


class EvalError(CtxlmError, ValueError):
    tag = "eval"


CORRECT, SUB, DEL = "C", "S", "D"


@dataclass(frozen=True)
class AlignmentResult:
    ops: tuple[str, ...]          # one of C/S/D per reference token
    insertions: int

    @property
    def substitutions(self) -> int:
        return self.ops.count(SUB)

    @property
    def deletions(self) -> int:
        return self.ops.count(DEL)

    @property
    def n_ref(self) -> int:
        return len(self.ops)

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions


def align(ref: Sequence[str], hyp: Sequence[str]) -> AlignmentResult:
    """Levenshtein alignment; backtrace prefers match, then sub, del, ins."""
    n, m = len(ref), len(hyp)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            d[i, j] = min(d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]), d[i - 1, j] + 1, d[i, j - 1] + 1)
    ops: list[str] = []
    ins = 0
    i, j = n, m
    while i or j:
        if i and j and ref[i - 1] == hyp[j - 1] and d[i, j] == d[i - 1, j - 1]:
            ops.append(CORRECT)
            i, j = i - 1, j - 1
        elif i and j and d[i, j] == d[i - 1, j - 1] + 1:
            ops.append(SUB)
            i, j = i - 1, j - 1
        elif i and d[i, j] == d[i - 1, j] + 1:
            ops.append(DEL)
            i -= 1
        else:
            ins += 1
            j -= 1
    return AlignmentResult(tuple(reversed(ops)), ins)


def wer(alignments: Sequence[AlignmentResult]) -> float:
    if not alignments:
        raise EvalError("WER of an empty corpus")
    n_ref = sum(a.n_ref for a in alignments)
    if not n_ref:
        raise EvalError("WER undefined without reference words")
    return sum(a.errors for a in alignments) / n_ref


def werr(baseline: float, system: float) -> float:
    """Relative WER change; negative means the system improves on the baseline."""
    if baseline == 0:
        return 0.0 if system == 0 else math.inf
    return (system - baseline) / baseline


def _entity_errors(alignments, tags) -> tuple[int, int, int]:
    errors = n_ent = n_ref = 0
    for a, idx in zip(alignments, tags):
        if any(i >= a.n_ref or i < 0 for i in idx):
            raise EvalError(f"entity index out of range for a {a.n_ref}-word reference")
        n_ref += a.n_ref
        n_ent += len(idx)
        errors += sum(a.ops[i] != CORRECT for i in idx)
    return errors, n_ent, n_ref


def entity_error_rate(alignments: Sequence[AlignmentResult], tags: Sequence[Sequence[int]]) -> float:
    """(substitutions + deletions on entity-tagged words) / entity-tagged reference words.

    Insertions are not counted. Returns 0 when there are no entity words.
    """
    errors, n_ent, _ = _entity_errors(alignments, tags)
    return errors / n_ent if n_ent else 0.0


def entity_error_rate_global(alignments: Sequence[AlignmentResult], tags: Sequence[Sequence[int]]) -> float:
    """Same numerator as ``entity_error_rate`` over all reference words."""
    errors, _, n_ref = _entity_errors(alignments, tags)
    return errors / n_ref if n_ref else 0.0


def read_entity_tags(path) -> dict[str, frozenset[int]]:
    tags = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            idx = parts[1].split(",") if len(parts) > 1 else []
            tags[parts[0]] = frozenset(int(i) for i in idx if i)
    return tags


def write_entity_tags(path, tags: Mapping[str, Sequence[int]]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for uid, idx in tags.items():
            f.write(f"{uid} {','.join(map(str, sorted(idx)))}\n")


@dataclass(frozen=True)
class Hypothesis:
    tokens: tuple[str, ...]
    channel_score: float
    lm_score: float = 0.0


def nbest_from_interaction(turn: Interaction) -> tuple[Hypothesis, ...]:
    if not turn.nbest:
        raise EvalError(f"{turn.uid}: no N-best list")
    return tuple(Hypothesis(tuple(h), s) for h, s in turn.nbest)


def rescore_nbest(nbest: Sequence[Hypothesis], mix: MixtureLM, weights, lm_scale: float = 1.0) -> tuple[int, Hypothesis]:
    """Best ``channel + lm_scale * ln P_mix`` hypothesis; ties keep the earlier rank."""
    if not nbest:
        raise EvalError("empty N-best list")
    if lm_scale < 0:
        raise EvalError("lm_scale must be >= 0")
    lam = check_weights(weights, mix.size)
    best, best_score = 0, -math.inf
    for i, hyp in enumerate(nbest):
        score = hyp.channel_score
        if lm_scale:
            score += lm_scale * mix.utterance_logprob(lam, mix.vocab.encode(hyp.tokens))
        if score > best_score:
            best, best_score = i, score
    return best, nbest[best]


@dataclass(frozen=True)
class DecodeInput:
    """Everything a decoder may look at for one utterance."""

    uid: str
    window: tuple[Interaction, ...]
    clock: float
    nbest: tuple[Hypothesis, ...]


class NBestDecoder:
    """N-best rescoring with per-hypothesis probability matrices cached by uid."""

    def __init__(self, mix: MixtureLM, lm_scale: float = 1.0):
        if lm_scale < 0:
            raise EvalError("lm_scale must be >= 0")
        self.mix = mix
        self.lm_scale = lm_scale
        self._cache: dict[str, tuple[np.ndarray, list[np.ndarray]]] = {}

    def _prepared(self, inp: DecodeInput):
        entry = self._cache.get(inp.uid)
        if entry is None:
            channel = np.array([h.channel_score for h in inp.nbest])
            mats = [self.mix.prob_matrix(self.mix.vocab.encode(h.tokens)) for h in inp.nbest]
            entry = self._cache[inp.uid] = (channel, mats)
        return entry

    def scores(self, inp: DecodeInput, weights) -> np.ndarray:
        channel, mats = self._prepared(inp)
        if not self.lm_scale:
            return channel.copy()
        lam = np.asarray(weights, dtype=float)
        return channel + self.lm_scale * np.array([np.log(P @ lam).sum() for P in mats])

    def decode(self, inp: DecodeInput, weights) -> tuple[int, Hypothesis]:
        if not inp.nbest:
            raise EvalError(f"{inp.uid}: empty N-best list")
        best = int(np.argmax(self.scores(inp, weights)))   # first maximum = earliest rank
        return best, inp.nbest[best]


@dataclass(frozen=True)
class SystemOutput:
    uid: str
    weights: np.ndarray
    hypothesis: tuple[str, ...]


@dataclass
class Metrics:
    ppl: float
    wer: float
    entity_er: float
    entity_er_global: float
    n_utterances: int
    n_ref_words: int
    n_entity_words: int


class Scorer:
    """Holds references and entity tags; the only place reference text is read."""

    def __init__(self, mix: MixtureLM, references: Mapping[str, Sequence[str]],
                 entity_tags: Mapping[str, Sequence[int]] | None = None):
        self.mix = mix
        self._refs = {uid: tuple(toks) for uid, toks in references.items()}
        self._tags = {uid: tuple(sorted(entity_tags.get(uid, ()))) for uid in self._refs} if entity_tags else {}
        self._mats: dict[str, np.ndarray] = {}

    def reference_matrix(self, uid: str) -> np.ndarray:
        P = self._mats.get(uid)
        if P is None:
            P = self._mats[uid] = self.mix.prob_matrix(self.mix.vocab.encode(self._refs[uid]))
        return P

    def score(self, outputs: Sequence[SystemOutput]) -> Metrics:
        if not outputs:
            raise EvalError("nothing to score")
        nll, ntok = 0.0, 0
        alignments, tags = [], []
        for out in outputs:
            if out.uid not in self._refs:
                raise EvalError(f"no reference for {out.uid}")
            P = self.reference_matrix(out.uid)
            nll -= float(np.log(P @ out.weights).sum())
            ntok += P.shape[0]
            alignments.append(align(self._refs[out.uid], out.hypothesis))
            tags.append(self._tags.get(out.uid, ()))
        return Metrics(
            ppl=math.exp(nll / ntok),
            wer=wer(alignments),
            entity_er=entity_error_rate(alignments, tags),
            entity_er_global=entity_error_rate_global(alignments, tags),
            n_utterances=len(outputs),
            n_ref_words=sum(a.n_ref for a in alignments),
            n_entity_words=sum(len(t) for t in tags),
        )


@dataclass
class TestSet:
    __test__ = False  # not a pytest class

    inputs: list[DecodeInput]
    scorer: Scorer


@dataclass
class SystemResult:
    outputs: list[SystemOutput]
    metrics: Metrics
    first_pass: list[SystemOutput] = field(default_factory=list)


def adapter_weights(adapter: AdapterNet, inputs: Sequence[DecodeInput], config: FeatureConfig,
                    table: EmbeddingTable, current: Sequence[Sequence[str]] | None = None) -> np.ndarray:
    """Batch of interpolation weights; ``current`` holds first-pass hypotheses for cur features."""
    feats = [
        build_features(inp.window, current[i] if current is not None else None, inp.clock, config, table).vector()
        for i, inp in enumerate(inputs)
    ]
    return adapter.forward(np.array(feats).reshape(len(inputs), -1))


def _decode_all(inputs, weights, decoder) -> list[SystemOutput]:
    outs = []
    for inp, lam in zip(inputs, weights):
        _, hyp = decoder.decode(inp, lam)
        outs.append(SystemOutput(inp.uid, np.asarray(lam), hyp.tokens))
    return outs


def run_static(test: TestSet, weights, decoder: NBestDecoder) -> SystemResult:
    lam = check_weights(weights, decoder.mix.size)
    outs = _decode_all(test.inputs, [lam] * len(test.inputs), decoder)
    return SystemResult(outs, test.scorer.score(outs))


def run_1pass(test: TestSet, adapter: AdapterNet, config: FeatureConfig, decoder: NBestDecoder,
              table: EmbeddingTable) -> SystemResult:
    """Weights from past context and metadata only, then a single rescoring pass."""
    if config.uses_cur:
        raise EvalError("1-pass decoding cannot use cur features")
    lam = adapter_weights(adapter, test.inputs, config, table)
    outs = _decode_all(test.inputs, lam, decoder)
    return SystemResult(outs, test.scorer.score(outs))


def first_pass(test: TestSet, static_weights, decoder: NBestDecoder) -> list[SystemOutput]:
    lam = check_weights(static_weights, decoder.mix.size)
    return _decode_all(test.inputs, [lam] * len(test.inputs), decoder)


def run_2pass(test: TestSet, adapter: AdapterNet, config: FeatureConfig, decoder: NBestDecoder,
              table: EmbeddingTable, static_weights, pass1: list[SystemOutput] | None = None) -> SystemResult:
    """Static-weight first pass; its 1-best feeds cur features for the adapted second pass."""
    if pass1 is None:
        pass1 = first_pass(test, static_weights, decoder)
    current = [o.hypothesis for o in pass1] if config.uses_cur else None
    lam = adapter_weights(adapter, test.inputs, config, table, current)
    outs = _decode_all(test.inputs, lam, decoder)
    return SystemResult(outs, test.scorer.score(outs), pass1)


def run_topic_model(test: TestSet, clf: TopicClassifier, labels: Sequence[str], decoder: NBestDecoder,
                    static_weights, pass1: list[SystemOutput] | None = None) -> SystemResult:
    """Second pass weighted by classifier posteriors of the first-pass 1-best."""
    if list(clf.labels) != list(labels):
        raise EvalError("classifier labels do not match the mixture components")
    if pass1 is None:
        pass1 = first_pass(test, static_weights, decoder)
    lam = [floor_weights(clf.posterior(o.hypothesis)) for o in pass1]
    outs = _decode_all(test.inputs, lam, decoder)
    return SystemResult(outs, test.scorer.score(outs), pass1)

