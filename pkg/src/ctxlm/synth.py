"""Seeded synthetic conversational benchmark.

Each topic (or application) owns carrier words, named entities and phrase
templates; a few generic frames ("tell me about <entity>") are shared so the
surrounding words do not reveal the topic. Conversations follow a sticky
topic process whose starting point depends on day of week and time of day,
embeddings cluster by topic, and N-best lists come from a noisy channel that
swaps words for sound-alikes from other topics.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .corpus import AGENT, USER, Interaction, write_interactions
from .evaluation import write_entity_tags
from .features import meta_vector

TOPIC_NAMES = (
    "music", "weather", "shopping", "sports", "movies", "travel", "food", "science", "games",
    "books", "health", "finance", "news", "politics", "fashion", "cars", "pets", "history",
    "art", "tech", "space", "nature", "family", "jobs", "school", "comedy",
)
COMMON = (
    "i", "you", "the", "a", "to", "about", "what", "tell", "me", "do", "like", "is", "it",
    "that", "and", "of", "my", "can", "we", "talk", "know", "more", "really", "think", "so",
    "yes", "no", "well", "oh", "how", "some", "for", "this", "any", "there", "play", "get",
)
CHITCHAT = (
    ("yes",), ("no",), ("oh", "really"), ("i", "think", "so"), ("tell", "me", "more"),
    ("well", "i", "do", "not", "know"), ("that", "is", "it"), ("how", "about", "you"),
)
SOURCE_WORDS = {
    "news": ("reported", "according", "officials", "statement", "today", "week"),
    "web": ("click", "here", "online", "page", "read", "post"),
}
EPOCH = 1704067200  # Monday 2024-01-01 00:00 UTC
SYLLABLES_C = "bdfgklmnprstvz"
SYLLABLES_V = "aeiou"


@dataclass
class SynthConfig:
    seed: int = 0
    system: str = "chatbot"                 # chatbot | goal
    n_topics: int = 5
    n_user_turns: int = 25000               # across train/dev/test (80/10/10 by conversation)
    min_turns: int = 6                      # user turns per chatbot conversation
    max_turns: int = 12
    drift: float = 0.25                     # per-turn topic switch probability
    meta_strength: float = 0.6              # prior mass on the time bucket's preferred topic
    emb_dim: int = 50
    n_carriers: int = 25
    n_entities: int = 40
    n_templates: int = 15
    nbest: int = 8
    channel_noise: float = 1.2
    external_sources: tuple[str, ...] = ("news", "web")
    external_lines: int = 3000
    seed_lines_per_topic: int = 300

    def __post_init__(self):
        if self.system not in ("chatbot", "goal"):
            raise ValueError(f"unknown system {self.system!r}")
        self.external_sources = tuple(self.external_sources)


def _pseudo_words(rng: np.random.Generator, count: int, taken: set[str]) -> list[str]:
    words = []
    while len(words) < count:
        n = int(rng.integers(2, 4))
        w = "".join(SYLLABLES_C[rng.integers(len(SYLLABLES_C))] + SYLLABLES_V[rng.integers(len(SYLLABLES_V))]
                    for _ in range(n))
        if w not in taken:
            taken.add(w)
            words.append(w)
    return words


def _zipf(n: int, s: float = 1.0) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1) ** s
    return w / w.sum()


@dataclass
class _Topic:
    name: str
    carriers: list[str]
    entities: list[str]
    templates: list[tuple[tuple[str, str], ...]]
    agent_templates: list[tuple[tuple[str, str], ...]]


@dataclass
class World:
    """The generative model shared by every split of one synthetic dataset."""

    config: SynthConfig
    topics: list[_Topic]
    frames: list[tuple[tuple[str, str], ...]]
    bucket_pref: np.ndarray
    embeddings: dict[str, np.ndarray]
    partners: dict[str, list[str]] = field(default_factory=dict)
    entity_set: set[str] = field(default_factory=set)

    @property
    def labels(self) -> list[str]:
        return [t.name for t in self.topics]


def _template(rng, topic_words: bool = True) -> tuple[tuple[str, str], ...]:
    length = int(rng.integers(3, 8))
    slots = []
    for _ in range(length):
        u = rng.random()
        if u < 0.4:
            slots.append(("c", COMMON[rng.integers(len(COMMON))]))
        elif u < 0.65:
            slots.append(("t", str(rng.integers(1 << 30))))  # fixed carrier, resolved per topic
        elif u < 0.85:
            slots.append(("T", ""))
        else:
            slots.append(("E", ""))
    if topic_words and not any(k != "c" for k, _ in slots):
        slots[int(rng.integers(length))] = ("E", "")
    return tuple(slots)


def build_world(config: SynthConfig) -> World:
    rng = np.random.default_rng([config.seed, 1])
    names = list(TOPIC_NAMES[:config.n_topics]) + [f"topic{i}" for i in range(len(TOPIC_NAMES), config.n_topics)]
    names.sort()
    taken = set(COMMON) | {w for ws in SOURCE_WORDS.values() for w in ws} | {"not"}
    topics = []
    for name in names:
        carriers = _pseudo_words(rng, config.n_carriers, taken)
        entities = _pseudo_words(rng, config.n_entities, taken)
        templates, agent_templates = [], []
        for store in (templates, agent_templates):
            for _ in range(config.n_templates):
                tpl = _template(rng)
                store.append(tuple(
                    ("t", carriers[int(v) % len(carriers)]) if k == "t" else (k, v) for k, v in tpl
                ))
        topics.append(_Topic(name, carriers, entities, templates, agent_templates))
    frames = [
        (("c", "tell"), ("c", "me"), ("c", "about"), ("E", "")),
        (("c", "what"), ("c", "do"), ("c", "you"), ("c", "think"), ("c", "about"), ("E", "")),
        (("c", "do"), ("c", "you"), ("c", "like"), ("E", "")),
        (("c", "i"), ("c", "like"), ("E", "")),
        (("c", "can"), ("c", "we"), ("c", "talk"), ("c", "about"), ("T", "")),
        (("c", "play"), ("c", "some"), ("E", "")),
        (("c", "how"), ("c", "about"), ("E", ""), ("c", "and"), ("E", "")),
        (("c", "my"), ("T", ""), ("c", "is"), ("E", "")),
    ]
    C = len(topics)
    bucket_pref = rng.integers(C, size=21)

    dim = config.emb_dim
    centroids = rng.normal(size=(C, dim))
    centroids /= np.linalg.norm(centroids, axis=1, keepdims=True)
    common_dir = rng.normal(size=dim)
    common_dir /= np.linalg.norm(common_dir)
    embeddings: dict[str, np.ndarray] = {}

    def noise():
        return rng.normal(size=dim) / math.sqrt(dim)

    for w in (*COMMON, "not"):
        embeddings[w] = 0.3 * common_dir + 0.5 * noise()
    for ws in SOURCE_WORDS.values():
        for w in ws:
            embeddings[w] = 0.3 * common_dir + 0.5 * noise()
    for t, topic in zip(centroids, topics):
        for w in topic.carriers + topic.entities:
            embeddings[w] = t + 0.5 * noise()

    world = World(config, topics, frames, bucket_pref, embeddings)
    # entities sound like entities of other topics; carrier words like neighbours in their own topic
    for i in range(config.n_entities):
        group = [t.entities[i] for t in topics]
        for w in group:
            world.partners[w] = [x for x in group if x != w]
    for topic in topics:
        cs = topic.carriers
        for i, w in enumerate(cs):
            world.partners[w] = [cs[(i - 1) % len(cs)], cs[(i + 1) % len(cs)]]
    for i, w in enumerate(COMMON):
        world.partners[w] = [COMMON[(i - 1) % len(COMMON)], COMMON[(i + 1) % len(COMMON)]]
    world.entity_set = {w for t in topics for w in t.entities}
    return world


def _fill(rng, world: World, topic: _Topic, tpl) -> list[str]:
    out = []
    for kind, value in tpl:
        if kind == "E":
            out.append(topic.entities[rng.choice(len(topic.entities), p=_zipf(len(topic.entities)))])
        elif kind == "T":
            out.append(topic.carriers[rng.choice(len(topic.carriers), p=_zipf(len(topic.carriers)))])
        else:
            out.append(value)
    return out


def user_utterance(rng, world: World, t: int) -> list[str]:
    topic = world.topics[t]
    u = rng.random()
    if u < 0.55:
        tpl = topic.templates[rng.choice(len(topic.templates), p=_zipf(len(topic.templates), 0.8))]
    elif u < 0.85:
        tpl = world.frames[rng.integers(len(world.frames))]
    else:
        return list(CHITCHAT[rng.integers(len(CHITCHAT))])
    return _fill(rng, world, topic, tpl)


def agent_utterance(rng, world: World, t: int) -> list[str]:
    topic = world.topics[t]
    tpl = topic.agent_templates[rng.choice(len(topic.agent_templates), p=_zipf(len(topic.agent_templates), 0.8))]
    return _fill(rng, world, topic, tpl)


def _bucket(ts: float) -> int:
    m = meta_vector(ts)
    return int(np.argmax(m[:7])) * 3 + int(np.argmax(m[7:]))


def _topic_prior(world: World, ts: float) -> np.ndarray:
    C = len(world.topics)
    p = np.full(C, (1.0 - world.config.meta_strength) / C)
    p[world.bucket_pref[_bucket(ts)]] += world.config.meta_strength
    return p


def _next_topic(rng, world: World, t: int, ts: float) -> int:
    if len(world.topics) > 1 and rng.random() < world.config.drift:
        p = _topic_prior(world, ts)
        p[t] = 0.0
        return int(rng.choice(len(p), p=p / p.sum()))
    return t


def nbest_list(rng, world: World, ref: list[str]) -> list[tuple[list[str], float]]:
    """Reference plus corrupted variants, scored by a noisy channel and sorted."""
    cfg = world.config
    hyps = {tuple(ref): 0.0}
    costs = {"sub": 1.0, "del": 4.0, "ins": 3.0}
    attempts = 0
    while len(hyps) < cfg.nbest and attempts < 20 * cfg.nbest:
        attempts += 1
        h = list(ref)
        cost = 0.0
        for _ in range(1 + int(rng.poisson(0.7))):
            u = rng.random()
            if u < 0.85 and h:
                i = int(rng.integers(len(h)))
                options = world.partners.get(h[i])
                if not options:
                    continue
                h[i] = options[rng.integers(len(options))]
                cost += costs["sub"]
            elif u < 0.925 and len(h) > 1:
                del h[int(rng.integers(len(h)))]
                cost += costs["del"]
            else:
                h.insert(int(rng.integers(len(h) + 1)), COMMON[rng.integers(len(COMMON))])
                cost += costs["ins"]
        key = tuple(h)
        if h and key not in hyps:
            hyps[key] = cost
    scored = [(list(h), round(-c + float(rng.normal(0.0, cfg.channel_noise)), 4)) for h, c in hyps.items()]
    scored.sort(key=lambda x: -x[1])
    return scored


def _conversation_chatbot(rng, world: World, cid: str) -> list[Interaction]:
    cfg = world.config
    ts = EPOCH + float(rng.integers(0, 28 * 86400))
    t = int(rng.choice(len(world.topics), p=_topic_prior(world, ts)))
    turns = []
    for u in range(int(rng.integers(cfg.min_turns, cfg.max_turns + 1))):
        if u:
            t = _next_topic(rng, world, t, ts)
        text = user_utterance(rng, world, t)
        turns.append(_turn(rng, world, cid, 2 * u, ts, USER, text, t))
        ts += float(rng.integers(3, 20))
        turns.append(_turn(rng, world, cid, 2 * u + 1, ts, AGENT, agent_utterance(rng, world, t), t))
        ts += float(rng.integers(5, 40))
    return turns


def _conversation_goal(rng, world: World, cid: str) -> list[Interaction]:
    """One device's interactions over a day: short sessions separated by long gaps."""
    ts = EPOCH + float(rng.integers(0, 28 * 86400))
    favourite = int(rng.integers(len(world.topics)))
    turns, idx = [], 0
    for _ in range(int(rng.integers(2, 5))):
        p = 0.5 * _topic_prior(world, ts)
        p[favourite] += 0.5
        t = int(rng.choice(len(p), p=p))
        for _ in range(int(rng.integers(1, 4))):
            turns.append(_turn(rng, world, cid, idx, ts, USER, user_utterance(rng, world, t), t))
            ts += float(rng.integers(2, 10))
            turns.append(_turn(rng, world, cid, idx + 1, ts, AGENT, agent_utterance(rng, world, t), t))
            idx += 2
            ts += float(rng.integers(10, 90))
            t = _next_topic(rng, world, t, ts)
        ts += float(rng.integers(900, 6 * 3600))
    return turns


def _turn(rng, world, cid, idx, ts, speaker, text, t) -> Interaction:
    nbest = None
    if speaker == USER:
        nbest = tuple((tuple(h), s) for h, s in nbest_list(rng, world, text))
    return Interaction(cid, idx, ts, speaker, tuple(text), world.topics[t].name, nbest)


def generate(config: SynthConfig):
    """Return ``(world, splits)`` with splits ``train``/``dev``/``test`` of Interaction lists."""
    world = build_world(config)
    rng = np.random.default_rng([config.seed, 2])
    make = _conversation_chatbot if config.system == "chatbot" else _conversation_goal
    convs, n_user = [], 0
    while n_user < config.n_user_turns:
        turns = make(rng, world, f"c{len(convs):05d}")
        convs.append(turns)
        n_user += sum(t.speaker == USER for t in turns)
    order = rng.permutation(len(convs))
    n_train, n_dev = int(0.8 * len(convs)), int(0.1 * len(convs))
    parts = {"train": order[:n_train], "dev": order[n_train:n_train + n_dev], "test": order[n_train + n_dev:]}
    splits = {name: [t for i in sorted(idx) for t in convs[i]] for name, idx in parts.items()}
    return world, splits


def external_text(rng, world: World, source: str, lines: int) -> list[list[str]]:
    C = len(world.topics)
    mix = rng.dirichlet(np.ones(C))
    extra = SOURCE_WORDS.get(source, ())
    out = []
    for _ in range(lines):
        t = int(rng.choice(C, p=mix))
        words = user_utterance(rng, world, t)
        if rng.random() < 0.5:
            words += agent_utterance(rng, world, t)
        if extra:
            words.insert(int(rng.integers(len(words) + 1)), extra[rng.integers(len(extra))])
        out.append(words)
    return out


def write_dataset(config: SynthConfig, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    world, splits = generate(config)
    for name, turns in splits.items():
        write_interactions(out / f"{name}.jsonl", turns)
    tags = {
        t.uid: [i for i, w in enumerate(t.text) if w in world.entity_set]
        for name in ("dev", "test") for t in splits[name] if t.speaker == USER
    }
    write_entity_tags(out / "entities.tsv", tags)
    with open(out / "embeddings.txt", "w", encoding="utf-8") as f:
        for w in sorted(world.embeddings):
            f.write(w + " " + " ".join(f"{x:.6f}" for x in world.embeddings[w]) + "\n")
    rng = np.random.default_rng([config.seed, 3])
    if config.system == "chatbot":
        with open(out / "topic_seed.tsv", "w", encoding="utf-8") as f:
            for t, topic in enumerate(world.topics):
                for _ in range(config.seed_lines_per_topic):
                    words = user_utterance(rng, world, t) if rng.random() < 0.7 else agent_utterance(rng, world, t)
                    f.write(f"{topic.name}\t{' '.join(words)}\n")
        (out / "external").mkdir(exist_ok=True)
        for source in config.external_sources:
            with open(out / "external" / f"{source}.txt", "w", encoding="utf-8") as f:
                for words in external_text(rng, world, source, config.external_lines):
                    f.write(" ".join(words) + "\n")
    with open(out / "synth.json", "w", encoding="utf-8") as f:
        json.dump(asdict(config), f, indent=2, sort_keys=True)
        f.write("\n")
    return out
