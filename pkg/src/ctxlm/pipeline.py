"""End-to-end orchestration: component LMs, adapters, evaluation reports."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import CtxlmError
from .adapter import AdapterData, AdapterNet, TrainConfig, TrainResult, train, write_trace
from .corpus import (USER, ContextWindowPolicy, Conversation, Interaction, build_vocabulary,
                     context_window, group_conversations, read_interactions, read_text_corpus, tokenize)
from .evaluation import (DecodeInput, NBestDecoder, Scorer, SystemOutput, TestSet, first_pass,
                         nbest_from_interaction, read_entity_tags, run_1pass, run_2pass, run_static,
                         run_topic_model, werr)
from .features import EmbeddingTable, FeatureConfig, build_features
from .mixture import MixtureLM, em_static_weights, em_weights, floor_weights, write_weights
from .ngram import count_ngrams, interpolate_models, load_arpa, save_arpa, train_katz, uniform_model
from .synth import SynthConfig, write_dataset
from .topicbase import TopicClassifier, train_classifier

log = logging.getLogger(__name__)

REPORT_COLUMNS = ["system", "features", "pass", "PPL", "WER", "WERR_vs_baseline",
                  "entity_ER", "entity_WERR", "entity_ER_global"]


class PipelineError(CtxlmError, ValueError):
    tag = "pipeline"


class MissingArtifact(CtxlmError, FileNotFoundError):
    tag = "missing-artifact"


def default_systems(system: str) -> list[dict]:
    if system == "goal":
        return [
            {"model": "static"},
            {"model": "dnn", "loss": "xent", "features": ["prev", "meta"], "passes": 1},
            {"model": "dnn", "loss": "ppl", "features": ["prev", "meta"], "passes": 1},
            {"model": "dnn", "loss": "xent", "features": ["prev", "meta", "cur"], "passes": 2},
            {"model": "dnn", "loss": "ppl", "features": ["prev", "meta", "cur"], "passes": 2},
        ]
    return [
        {"model": "static"},
        {"model": "dnn", "loss": "xent", "features": ["prev", "meta"], "passes": 1},
        {"model": "dnn", "loss": "ppl", "features": ["prev", "meta"], "passes": 1},
        {"model": "dnn", "loss": "ppl", "features": ["prev-d", "meta"], "passes": 1},
        {"model": "dnn", "loss": "ppl", "features": ["prev", "meta", "cur"], "passes": 2},
        {"model": "dnn", "loss": "ppl", "features": ["prev-d", "meta", "cur"], "passes": 2},
        {"model": "dnn", "loss": "ppl", "features": ["meta", "cur"], "passes": 2},
        {"model": "topic", "features": ["cur"], "passes": 2},
    ]


@dataclass
class PipelineConfig:
    data_dir: str = "data"
    model_dir: str = "models"
    report_dir: str = "reports"
    embeddings: str | None = None
    system: str = "chatbot"
    order: int = 4
    min_count: int = 2
    discount_cutoff: int = 5
    window_seconds: float = 300.0
    features: tuple[str, ...] = ("prev", "meta")
    loss: str = "ppl"
    passes: int = 1
    decay: float = 0.7
    lm_scale: float = 1.0
    seed: int = 0
    hidden: tuple[int, ...] = (200, 200)
    learning_rate: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 40
    patience: int = 5
    clip_norm: float = 5.0
    em_max_iters: int = 100
    em_tol: float = 1e-6
    systems: list[dict] | None = None
    synth: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.system not in ("goal", "chatbot"):
            raise PipelineError(f"unknown system {self.system!r}")
        if self.passes not in (1, 2):
            raise PipelineError("passes must be 1 or 2")
        self.features = tuple(self.features)
        self.hidden = tuple(self.hidden)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        with open(path, encoding="utf-8") as f:
            data = json.load(f)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise PipelineError(f"unknown config keys: {', '.join(sorted(unknown))}")
        base = Path(path).parent
        for key in ("data_dir", "model_dir", "report_dir", "embeddings"):
            if data.get(key) is not None and not Path(data[key]).is_absolute():
                data[key] = str(base / data[key])
        return cls(**data)

    def override(self, **kwargs) -> "PipelineConfig":
        return replace(self, **{k: v for k, v in kwargs.items() if v is not None})

    @property
    def data(self) -> Path:
        return Path(self.data_dir)

    @property
    def models(self) -> Path:
        return Path(self.model_dir)

    @property
    def embeddings_path(self) -> Path:
        return Path(self.embeddings) if self.embeddings else self.data / "embeddings.txt"

    @property
    def window_policy(self) -> ContextWindowPolicy:
        if self.system == "goal":
            return ContextWindowPolicy("seconds", self.window_seconds)
        return ContextWindowPolicy("conversation")

    def feature_config(self, blocks=None, decay=None) -> FeatureConfig:
        return FeatureConfig.parse(blocks if blocks is not None else self.features,
                                   self.decay if decay is None else decay)

    def train_config(self, loss: str | None = None) -> TrainConfig:
        return TrainConfig(loss=loss or self.loss, learning_rate=self.learning_rate,
                           clip_norm=self.clip_norm, batch_size=self.batch_size,
                           max_epochs=self.max_epochs, patience=self.patience,
                           seed=self.seed, hidden=self.hidden)

    def synth_config(self) -> SynthConfig:
        return SynthConfig(**{"seed": self.seed, "system": self.system, **self.synth})


def _require(*paths: Path) -> None:
    for p in paths:
        if not Path(p).exists():
            raise MissingArtifact(f"required file not found: {p}")


def load_split(cfg: PipelineConfig, name: str) -> list[Conversation]:
    path = cfg.data / f"{name}.jsonl"
    _require(path)
    return group_conversations(read_interactions(path))


def user_turns(convs: Sequence[Conversation]) -> list[Interaction]:
    return [t for c in convs for t in c.turns if t.speaker == USER]


def _read_seed(path) -> list[tuple[tuple[str, ...], str]]:
    out = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                label, _, text = line.rstrip("\n").partition("\t")
                out.append((tuple(tokenize(text)), label))
    return out


def _katz_or_fallback(texts, order, vocab, cutoff, what: str):
    if not texts:
        log.warning("%s: empty partition; using a uniform unigram model", what)
        return uniform_model(vocab, order)
    return train_katz(count_ngrams(texts, order, vocab), cutoff)


def train_lms(cfg: PipelineConfig) -> Path:
    """Train one Katz model per component label, static EM weights, and the topic classifier."""
    train_turns = user_turns(load_split(cfg, "train"))
    dev_turns = user_turns(load_split(cfg, "dev"))
    if not train_turns or not dev_turns:
        raise PipelineError("train and dev splits need user turns")
    external: dict[str, list[tuple[str, ...]]] = {}
    ext_dir = cfg.data / "external"
    if cfg.system == "chatbot" and ext_dir.is_dir():
        for path in sorted(ext_dir.glob("*.txt")):
            external[path.stem] = read_text_corpus(path)
    seed_path = cfg.data / "topic_seed.tsv"

    texts = [t.text for t in train_turns] + [u for lines in external.values() for u in lines]
    vocab = build_vocabulary(texts, cfg.min_count)

    if cfg.system == "chatbot" and seed_path.exists():
        clf = train_classifier(_read_seed(seed_path), vocab)
    else:
        clf = train_classifier([(t.text, t.component_label) for t in train_turns], vocab)
    labels = clf.labels
    if cfg.system == "chatbot":
        train_labels = [clf.predict(t.text) for t in train_turns]
        dev_labels = [clf.predict(t.text) for t in dev_turns]
    else:
        train_labels = [t.component_label for t in train_turns]
        dev_labels = [t.component_label for t in dev_turns]
        if None in train_labels:
            raise PipelineError("goal-oriented data needs application labels on every user turn")

    components = []
    for label in labels:
        chat = [t.text for t, y in zip(train_turns, train_labels) if y == label]
        if cfg.system == "goal" or not external:
            components.append(_katz_or_fallback(chat, cfg.order, vocab, cfg.discount_cutoff, label))
            continue
        sources = {"chat": chat}
        for name, lines in external.items():
            sources[name] = [u for u, y in zip(lines, [clf.predict(u) for u in lines]) if y == label]
        models = [train_katz(count_ngrams(v, cfg.order, vocab), cfg.discount_cutoff)
                  for v in sources.values() if v]
        if not models:
            components.append(_katz_or_fallback([], cfg.order, vocab, cfg.discount_cutoff, label))
            continue
        dev_ids = [vocab.encode(t.text) for t, y in zip(dev_turns, dev_labels) if y == label]
        if len(models) == 1:
            components.append(models[0])
            continue
        if dev_ids:
            src_mix = MixtureLM(models)
            lam, _ = em_weights(np.vstack([src_mix.prob_matrix(ids) for ids in dev_ids]),
                                cfg.em_max_iters, cfg.em_tol)
            lam = floor_weights(lam)
        else:
            lam = np.full(len(models), 1.0 / len(models))
        log.info("%s: source weights %s", label, np.round(lam, 4).tolist())
        components.append(interpolate_models(models, lam))

    out = cfg.models
    out.mkdir(parents=True, exist_ok=True)
    (out / "lm").mkdir(exist_ok=True)
    paths = []
    for label, model in zip(labels, components):
        path = out / "lm" / f"{label}.arpa"
        save_arpa(model, path)
        paths.append(path)
    mix = MixtureLM([load_arpa(p) for p in paths], labels)
    static = em_static_weights(mix, [vocab.encode(t.text) for t in dev_turns], cfg.em_max_iters, cfg.em_tol)
    write_weights(out / "static_weights.txt", labels, static)
    clf.save(out / "classifier.txt")
    manifest = {
        "system": cfg.system,
        "order": cfg.order,
        "components": [{"label": label, "arpa": f"lm/{label}.arpa"} for label in labels],
        "static_weights": [float(x) for x in static],
        "classifier": "classifier.txt",
    }
    with open(out / "manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2)
        f.write("\n")
    return out / "manifest.json"


def load_mixture(manifest_path) -> tuple[MixtureLM, np.ndarray | None, dict]:
    manifest_path = Path(manifest_path)
    _require(manifest_path)
    with open(manifest_path, encoding="utf-8") as f:
        manifest = json.load(f)
    base = manifest_path.parent
    paths = [base / c["arpa"] for c in manifest["components"]]
    _require(*paths)
    mix = MixtureLM([load_arpa(p) for p in paths], [c["label"] for c in manifest["components"]])
    static = manifest.get("static_weights")
    return mix, (np.asarray(static) if static is not None else None), manifest


@dataclass
class SplitData:
    inputs: list[DecodeInput]
    references: dict[str, tuple[str, ...]]
    turns: list[Interaction]


class Workspace:
    """Loaded artifacts plus caches shared by adapter training and evaluation."""

    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.mix, static, self.manifest = load_mixture(cfg.models / "manifest.json")
        if static is None:
            raise MissingArtifact("manifest has no static weights")
        self.static = static
        _require(cfg.models / self.manifest["classifier"], cfg.embeddings_path)
        self.classifier = TopicClassifier.load(cfg.models / self.manifest["classifier"])
        self.table = EmbeddingTable.load(cfg.embeddings_path)
        self.decoder = NBestDecoder(self.mix, cfg.lm_scale)
        self._splits: dict[str, SplitData] = {}
        self._matrices: dict[str, list[np.ndarray]] = {}
        self._pass1: dict[str, list[SystemOutput]] = {}
        self._scorers: dict[str, Scorer] = {}

    def split(self, name: str) -> SplitData:
        if name not in self._splits:
            policy = self.cfg.window_policy
            inputs, refs, turns = [], {}, []
            for conv in load_split(self.cfg, name):
                for pos, turn in enumerate(conv.turns):
                    if turn.speaker != USER:
                        continue
                    window = tuple(context_window(conv, pos, policy))
                    inputs.append(DecodeInput(turn.uid, window, turn.timestamp, nbest_from_interaction(turn)))
                    refs[turn.uid] = turn.text
                    turns.append(turn)
            self._splits[name] = SplitData(inputs, refs, turns)
        return self._splits[name]

    def matrices(self, name: str) -> list[np.ndarray]:
        if name not in self._matrices:
            s = self.split(name)
            self._matrices[name] = [self.mix.prob_matrix(self.mix.vocab.encode(s.references[i.uid]))
                                    for i in s.inputs]
        return self._matrices[name]

    def test_set(self, name: str) -> TestSet:
        s = self.split(name)
        if name not in self._scorers:
            tags_path = self.cfg.data / "entities.tsv"
            tags = read_entity_tags(tags_path) if tags_path.exists() else None
            self._scorers[name] = Scorer(self.mix, s.references, tags)
        return TestSet(s.inputs, self._scorers[name])

    def pass1(self, name: str) -> list[SystemOutput]:
        if name not in self._pass1:
            self._pass1[name] = first_pass(self.test_set(name), self.static, self.decoder)
        return self._pass1[name]

    def labels(self, name: str) -> np.ndarray:
        """Component index per user turn: classifier labels (chatbot) or annotations (goal)."""
        s = self.split(name)
        index = {label: i for i, label in enumerate(self.mix.labels)}
        if self.cfg.system == "chatbot":
            return np.array([index[self.classifier.predict(t.text)] for t in s.turns])
        try:
            return np.array([index[t.component_label] for t in s.turns])
        except KeyError as exc:
            raise PipelineError(f"label {exc.args[0]!r} is not a mixture component") from None

    def features(self, name: str, fcfg: FeatureConfig) -> np.ndarray:
        s = self.split(name)
        current = [o.hypothesis for o in self.pass1(name)] if fcfg.uses_cur else [None] * len(s.inputs)
        return np.array([build_features(i.window, c, i.clock, fcfg, self.table).vector()
                         for i, c in zip(s.inputs, current)])

    def adapter_data(self, name: str, fcfg: FeatureConfig, loss: str) -> AdapterData:
        X = self.features(name, fcfg)
        if loss == "ppl":
            return AdapterData.from_matrices(X, self.matrices(name))
        return AdapterData.from_labels(X, self.labels(name))


def adapter_path(cfg: PipelineConfig, loss: str, fcfg: FeatureConfig) -> Path:
    return cfg.models / f"adapter-{loss}-{fcfg.slug}.txt"


def train_adapter(cfg: PipelineConfig, ws: Workspace | None = None, loss: str | None = None,
                  blocks=None) -> tuple[Path, TrainResult]:
    ws = ws or Workspace(cfg)
    loss = loss or cfg.loss
    fcfg = cfg.feature_config(blocks)
    if cfg.passes == 1 and fcfg.uses_cur and blocks is None:
        raise PipelineError("1-pass systems cannot use cur features; pass --passes 2")
    tcfg = cfg.train_config(loss)
    train_data = ws.adapter_data("train", fcfg, loss)
    dev_data = ws.adapter_data("dev", fcfg, loss)
    net = AdapterNet(train_data.X.shape[1], ws.mix.size, tcfg.hidden, seed=cfg.seed)
    result = train(net, train_data, dev_data, tcfg)
    path = adapter_path(cfg, loss, fcfg)
    net.save(path)
    fcfg.save(path.with_suffix(".features.json"))
    write_trace(path.with_suffix(".trace.csv"), result.trace)
    return path, result


@dataclass
class ReportRow:
    system: str
    features: str
    passes: int
    metrics: object


def _system_name(spec: dict) -> str:
    model = spec.get("model")
    if model == "static":
        return "No Adapt"
    if model == "topic":
        return "Topic model"
    if model == "dnn":
        return f"DNN({spec.get('loss', 'ppl')})"
    raise PipelineError(f"unknown model kind {model!r}")


def evaluate(cfg: PipelineConfig, ws: Workspace | None = None, split: str = "test") -> list[ReportRow]:
    ws = ws or Workspace(cfg)
    systems = cfg.systems or default_systems(cfg.system)
    # resolve and validate all artifacts before decoding anything
    plan = []
    for spec in systems:
        name = _system_name(spec)
        passes = int(spec.get("passes", 1))
        if spec["model"] == "static":
            plan.append((spec, name, None, None, 1))
            continue
        fcfg = cfg.feature_config(spec.get("features", ()), spec.get("decay"))
        if passes == 1 and fcfg.uses_cur:
            raise PipelineError(f"{name} [{fcfg.label}]: 1-pass systems cannot use cur features")
        net = None
        if spec["model"] == "dnn":
            path = adapter_path(cfg, spec.get("loss", "ppl"), fcfg)
            _require(path)
            net = AdapterNet.load(path)
            if net.input_dim != fcfg.dimension(ws.table.dim) or net.num_components != ws.mix.size:
                raise PipelineError(f"{path.name}: checkpoint dimensions do not match the feature config")
        plan.append((spec, name, fcfg, net, passes))

    test = ws.test_set(split)
    rows = []
    for spec, name, fcfg, net, passes in plan:
        if spec["model"] == "static":
            result = run_static(test, ws.static, ws.decoder)
            rows.append(ReportRow(name, "", 1, result.metrics))
        elif spec["model"] == "topic":
            result = run_topic_model(test, ws.classifier, ws.mix.labels, ws.decoder, ws.static, ws.pass1(split))
            rows.append(ReportRow(name, fcfg.label, passes, result.metrics))
        elif passes == 1:
            result = run_1pass(test, net, fcfg, ws.decoder, ws.table)
            rows.append(ReportRow(name, fcfg.label, 1, result.metrics))
        else:
            result = run_2pass(test, net, fcfg, ws.decoder, ws.table, ws.static, ws.pass1(split))
            rows.append(ReportRow(name, fcfg.label, 2, result.metrics))
    return rows


def format_report(rows: Sequence[ReportRow]) -> str:
    base = next((r.metrics for r in rows if r.system == "No Adapt"), None)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_COLUMNS)
    for r in rows:
        m = r.metrics
        if base is None or r.system == "No Adapt":
            rel, ent_rel = "", ""
        else:
            rel = f"{100 * werr(base.wer, m.wer):.2f}"
            ent_rel = f"{100 * werr(base.entity_er, m.entity_er):.2f}"
        writer.writerow([r.system, r.features, r.passes, f"{m.ppl:.3f}", f"{100 * m.wer:.3f}", rel,
                         f"{100 * m.entity_er:.3f}", ent_rel, f"{100 * m.entity_er_global:.3f}"])
    return buf.getvalue()


def write_report(cfg: PipelineConfig, rows: Sequence[ReportRow], name: str = "metrics.csv") -> Path:
    out = Path(cfg.report_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / name
    path.write_text(format_report(rows), encoding="utf-8")
    return path


def required_adapters(cfg: PipelineConfig) -> list[tuple[str, tuple[str, ...], float | None]]:
    seen, out = set(), []
    for spec in cfg.systems or default_systems(cfg.system):
        if spec.get("model") == "dnn":
            key = (spec.get("loss", "ppl"), tuple(spec.get("features", ())), spec.get("decay"))
            if key not in seen:
                seen.add(key)
                out.append(key)
    return out


def run_benchmark(cfg: PipelineConfig, synthesize: bool = True) -> tuple[list[ReportRow], Workspace]:
    """Synthesize data, train everything the configured systems need, and evaluate."""
    if synthesize:
        write_dataset(cfg.synth_config(), cfg.data)
    train_lms(cfg)
    ws = Workspace(cfg)
    for loss, blocks, decay in required_adapters(cfg):
        sub = cfg if decay is None else replace(cfg, decay=decay)
        train_adapter(sub, ws, loss=loss, blocks=blocks)
    rows = evaluate(cfg, ws)
    write_report(cfg, rows)
    return rows, ws
