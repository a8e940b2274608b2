"""Context feature vectors: pooled word embeddings of past turns, metadata, current 1-best."""

from __future__ import annotations

import json
from dataclasses import dataclass
from datetime import datetime, timezone
from typing import Sequence

import numpy as np

from . import CtxlmError
from .corpus import AGENT, USER, Interaction

BLOCKS = ("prev", "prev-d", "meta", "cur")
META_DIM = 10
TIMES_OF_DAY = ("morning", "afternoon", "evening")


class FeatureError(CtxlmError, ValueError):
    tag = "features"


class EmbeddingTable:
    """Pretrained word vectors; unknown tokens map to the zero vector."""

    def __init__(self, vectors: dict[str, np.ndarray], dim: int | None = None):
        if dim is None:
            if not vectors:
                raise FeatureError("cannot infer the dimension of an empty table")
            dim = len(next(iter(vectors.values())))
        self.dim = dim
        self.index = {tok: i for i, tok in enumerate(vectors)}
        self.matrix = np.zeros((len(vectors) + 1, dim))
        for tok, i in self.index.items():
            vec = np.asarray(vectors[tok], dtype=float)
            if vec.shape != (dim,):
                raise FeatureError(f"vector for {tok!r} has shape {vec.shape}, expected ({dim},)")
            self.matrix[i] = vec
        self._oov = len(vectors)

    def __len__(self) -> int:
        return len(self.index)

    def lookup(self, token: str) -> np.ndarray:
        return self.matrix[self.index.get(token, self._oov)]

    def rows(self, tokens: Sequence[str]) -> np.ndarray:
        get, oov = self.index.get, self._oov
        return self.matrix[[get(t, oov) for t in tokens]]

    @classmethod
    def load(cls, path) -> "EmbeddingTable":
        vectors = {}
        dim = None
        with open(path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, 1):
                parts = line.split()
                if not parts:
                    continue
                vec = np.array([float(x) for x in parts[1:]])
                if dim is None:
                    dim = len(vec)
                elif len(vec) != dim:
                    raise FeatureError(f"{path}:{lineno}: expected {dim} values, got {len(vec)}")
                vectors[parts[0]] = vec
        return cls(vectors, dim)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for tok, i in self.index.items():
                f.write(tok + " " + " ".join(f"{x:.6f}" for x in self.matrix[i]) + "\n")


def avg_embedding(turns: Sequence[Sequence[str]], table: EmbeddingTable) -> np.ndarray:
    """Mean over all tokens of all turns (token-level pooling)."""
    tokens = [t for turn in turns for t in turn]
    if not tokens:
        return np.zeros(table.dim)
    return table.rows(tokens).mean(axis=0)


def decayed_embedding(turns: Sequence[Sequence[str]], table: EmbeddingTable, gamma: float) -> np.ndarray:
    """Exponentially decayed average of per-turn mean vectors, most recent turn last.

    Turn i of m gets weight gamma**(m - i); weights are normalized to sum to one.
    """
    if not 0.0 < gamma <= 1.0:
        raise FeatureError(f"decay must lie in (0, 1], got {gamma}")
    if not turns:
        return np.zeros(table.dim)
    means = np.array([table.rows(t).mean(axis=0) if len(t) else np.zeros(table.dim) for t in turns])
    m = len(turns)
    w = gamma ** np.arange(m - 1, -1, -1, dtype=float)
    return (w @ means) / w.sum()


def meta_vector(timestamp: float) -> np.ndarray:
    """One-hot day of week (Mon first) followed by one-hot time of day."""
    dt = datetime.fromtimestamp(timestamp, tz=timezone.utc)
    vec = np.zeros(META_DIM)
    vec[dt.weekday()] = 1.0
    if 5 <= dt.hour < 12:
        tod = 0
    elif 12 <= dt.hour < 18:
        tod = 1
    else:
        tod = 2
    vec[7 + tod] = 1.0
    return vec


@dataclass(frozen=True)
class FeatureConfig:
    blocks: tuple[str, ...] = ("prev", "meta")
    decay: float = 0.7

    def __post_init__(self):
        unknown = set(self.blocks) - set(BLOCKS)
        if unknown:
            raise FeatureError(f"unknown feature blocks {sorted(unknown)}")
        if not self.blocks:
            raise FeatureError("at least one feature block is required")
        if "prev" in self.blocks and "prev-d" in self.blocks:
            raise FeatureError("prev and prev-d are alternatives; choose one")
        if len(set(self.blocks)) != len(self.blocks):
            raise FeatureError("duplicate feature blocks")
        if "prev-d" in self.blocks and not 0.0 < self.decay <= 1.0:
            raise FeatureError(f"decay must lie in (0, 1], got {self.decay}")
        # canonical order
        object.__setattr__(self, "blocks", tuple(b for b in BLOCKS if b in self.blocks))

    @property
    def uses_cur(self) -> bool:
        return "cur" in self.blocks

    @property
    def label(self) -> str:
        """Short name like ``prev, meta, cur`` used in reports."""
        return ", ".join(self.blocks)

    @property
    def slug(self) -> str:
        return "+".join(self.blocks)

    def dimension(self, emb_dim: int) -> int:
        dims = {"prev": 2 * emb_dim, "prev-d": 2 * emb_dim, "meta": META_DIM, "cur": emb_dim}
        return sum(dims[b] for b in self.blocks)

    @classmethod
    def parse(cls, spec: str | Sequence[str], decay: float = 0.7) -> "FeatureConfig":
        blocks = spec.split(",") if isinstance(spec, str) else list(spec)
        return cls(tuple(b.strip() for b in blocks if b.strip()), decay)

    @classmethod
    def load(cls, path) -> "FeatureConfig":
        with open(path, encoding="utf-8") as f:
            data = json.load(f)
        return cls.parse(data["blocks"], data.get("decay", 0.7))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump({"blocks": list(self.blocks), "decay": self.decay}, f)


@dataclass(frozen=True)
class ContextFeatures:
    prev_user: np.ndarray
    prev_agent: np.ndarray
    meta: np.ndarray
    cur: np.ndarray | None
    config: FeatureConfig

    def vector(self) -> np.ndarray:
        parts = []
        for block in self.config.blocks:
            if block in ("prev", "prev-d"):
                parts += [self.prev_user, self.prev_agent]
            elif block == "meta":
                parts.append(self.meta)
            else:
                parts.append(self.cur)
        return np.concatenate(parts)


def build_features(window: Sequence[Interaction], current: Sequence[str] | None, clock: float,
                   config: FeatureConfig, table: EmbeddingTable) -> ContextFeatures:
    """Assemble context features from past turns, the clock and an optional 1-best.

    ``current`` must be a recognition hypothesis, never the reference transcript.
    """
    if config.uses_cur and current is None:
        raise FeatureError("cur features configured but no current hypothesis supplied")
    user = [t.text for t in window if t.speaker == USER]
    agent = [t.text for t in window if t.speaker == AGENT]
    if "prev-d" in config.blocks:
        pu = decayed_embedding(user, table, config.decay)
        pa = decayed_embedding(agent, table, config.decay)
    else:
        pu = avg_embedding(user, table)
        pa = avg_embedding(agent, table)
    cur = avg_embedding([current], table) if config.uses_cur else None
    return ContextFeatures(pu, pa, meta_vector(clock), cur, config)
