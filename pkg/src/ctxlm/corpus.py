"""Interaction data, tokenization, vocabularies and context windows."""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from . import CtxlmError

BOS = "<s>"
EOS = "</s>"
UNK = "<unk>"
RESERVED = (BOS, EOS, UNK)

USER = "user"
AGENT = "agent"

_PUNCT = re.compile(r"[^\w\s']")


class CorpusError(CtxlmError, ValueError):
    tag = "corpus"


def tokenize(raw_text: str) -> list[str]:
    """Lowercase, replace punctuation (apostrophes excepted) by spaces, split."""
    return _PUNCT.sub(" ", raw_text.lower()).split()


class Vocabulary:
    """Dense token <-> id map that always contains ``<s>``, ``</s>``, ``<unk>``."""

    def __init__(self, tokens: Iterable[str]):
        self.tokens: list[str] = []
        self.index: dict[str, int] = {}
        for tok in tokens:
            if tok in self.index:
                raise CorpusError(f"duplicate vocabulary token {tok!r}")
            self.index[tok] = len(self.tokens)
            self.tokens.append(tok)
        for tok in RESERVED:
            if tok not in self.index:
                self.index[tok] = len(self.tokens)
                self.tokens.append(tok)
        self.bos = self.index[BOS]
        self.eos = self.index[EOS]
        self.unk = self.index[UNK]

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def __hash__(self) -> int:
        return hash(tuple(self.tokens))

    def token_to_id(self, token: str) -> int:
        return self.index.get(token, self.unk)

    def id_to_token(self, idx: int) -> str:
        return self.tokens[idx]

    def encode(self, tokens: Sequence[str]) -> tuple[int, ...]:
        get, unk = self.index.get, self.unk
        return tuple(get(t, unk) for t in tokens)

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    @property
    def targets(self) -> list[int]:
        """Ids that can be predicted by a language model (everything but ``<s>``)."""
        return [i for i in range(len(self.tokens)) if i != self.bos]


def build_vocabulary(corpus: Iterable[Sequence[str]], min_count: int = 2) -> Vocabulary:
    if min_count < 1:
        raise CorpusError("min_count must be >= 1")
    counts = Counter(tok for utt in corpus for tok in utt)
    kept = sorted(t for t, c in counts.items() if c >= min_count and t not in RESERVED)
    return Vocabulary([*RESERVED, *kept])


@dataclass(frozen=True)
class Interaction:
    conversation_id: str
    turn_index: int
    timestamp: float
    speaker: str
    text: tuple[str, ...]
    component_label: str | None = None
    nbest: tuple[tuple[tuple[str, ...], float], ...] | None = None

    def __post_init__(self):
        if self.turn_index < 0:
            raise CorpusError(f"{self.uid}: negative turn_index")
        if self.speaker not in (USER, AGENT):
            raise CorpusError(f"{self.uid}: unknown speaker {self.speaker!r}")
        if self.nbest is not None:
            if not self.nbest:
                raise CorpusError(f"{self.uid}: empty nbest list")
            scores = [s for _, s in self.nbest]
            if any(a < b for a, b in zip(scores, scores[1:])):
                raise CorpusError(f"{self.uid}: nbest not sorted by descending score")

    @property
    def uid(self) -> str:
        return f"{self.conversation_id}:{self.turn_index}"


@dataclass(frozen=True)
class Conversation:
    id: str
    turns: tuple[Interaction, ...]

    def __post_init__(self):
        for turn in self.turns:
            if turn.conversation_id != self.id:
                raise CorpusError(f"turn {turn.uid} does not belong to conversation {self.id}")
        for a, b in zip(self.turns, self.turns[1:]):
            if b.turn_index <= a.turn_index:
                raise CorpusError(f"{self.id}: turn indices not strictly increasing at {b.turn_index}")
            if b.timestamp < a.timestamp:
                raise CorpusError(f"{self.id}: timestamps decrease at turn {b.turn_index}")


@dataclass(frozen=True)
class CorpusPartition:
    component_label: str
    utterances: list[tuple[str, ...]] = field(default_factory=list)


@dataclass(frozen=True)
class ContextWindowPolicy:
    """``mode`` is ``"conversation"`` or ``"seconds"``; ``seconds`` is the window T."""

    mode: str = "conversation"
    seconds: float = 300.0

    def __post_init__(self):
        if self.mode not in ("conversation", "seconds"):
            raise CorpusError(f"unknown context window mode {self.mode!r}")
        if self.mode == "seconds" and not self.seconds > 0:
            raise CorpusError("window length T must be positive")


def partition_by_label(data: Iterable[Interaction]) -> list[CorpusPartition]:
    groups: dict[str, list[tuple[str, ...]]] = {}
    for turn in data:
        if turn.component_label is None:
            raise CorpusError(
                f"missing component label: conversation {turn.conversation_id} turn {turn.turn_index}"
            )
        groups.setdefault(turn.component_label, []).append(turn.text)
    return [CorpusPartition(label, groups[label]) for label in sorted(groups)]


def context_window(conv: Conversation, current_index: int, policy: ContextWindowPolicy) -> list[Interaction]:
    if not 0 <= current_index < len(conv.turns):
        raise IndexError(f"turn position {current_index} out of range for {conv.id}")
    history = conv.turns[:current_index]
    if policy.mode == "seconds":
        start = conv.turns[current_index].timestamp - policy.seconds
        history = tuple(t for t in history if t.timestamp >= start)
    return list(history)


def group_conversations(turns: Iterable[Interaction]) -> list[Conversation]:
    """Group turns by conversation id (first-seen order), sorting by turn index."""
    groups: dict[str, list[Interaction]] = {}
    for turn in turns:
        groups.setdefault(turn.conversation_id, []).append(turn)
    return [Conversation(cid, tuple(sorted(ts, key=lambda t: t.turn_index))) for cid, ts in groups.items()]


def interaction_from_record(record: dict) -> Interaction:
    try:
        nbest = record.get("nbest")
        if nbest is not None:
            nbest = tuple((tuple(tokenize(entry[0])), float(entry[1])) for entry in nbest)
        return Interaction(
            conversation_id=str(record["conversation_id"]),
            turn_index=int(record["turn_index"]),
            timestamp=float(record["timestamp"]),
            speaker=str(record["speaker"]),
            text=tuple(tokenize(record["text"])),
            component_label=record.get("label"),
            nbest=nbest,
        )
    except KeyError as exc:
        raise CorpusError(f"interaction record missing field {exc.args[0]!r}") from None


def interaction_to_record(turn: Interaction) -> dict:
    record = {
        "conversation_id": turn.conversation_id,
        "turn_index": turn.turn_index,
        "timestamp": turn.timestamp,
        "speaker": turn.speaker,
        "text": " ".join(turn.text),
    }
    if turn.component_label is not None:
        record["label"] = turn.component_label
    if turn.nbest is not None:
        record["nbest"] = [[" ".join(h), s] for h, s in turn.nbest]
    return record


def read_interactions(path) -> list[Interaction]:
    turns = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: {exc.msg}") from None
            turns.append(interaction_from_record(record))
    return turns


def write_interactions(path, turns: Iterable[Interaction]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for turn in turns:
            f.write(json.dumps(interaction_to_record(turn), sort_keys=True) + "\n")


def read_text_corpus(path) -> list[tuple[str, ...]]:
    with open(path, encoding="utf-8") as f:
        return [tuple(toks) for toks in map(tokenize, f) if toks]
