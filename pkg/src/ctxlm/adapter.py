"""Feed-forward context network that predicts per-utterance interpolation weights.

The network maps a context feature vector to a softmax over C components.
It is trained either on mixture perplexity (the negative log-likelihood of the
utterance under the interpolated LM, using precomputed per-component
probabilities) or on cross-entropy against component labels.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import CtxlmError
from .mixture import MixtureLM, WEIGHT_FLOOR

log = logging.getLogger(__name__)

ROW_FLOOR = 1e-12
CHECKPOINT_MAGIC = "ctxlm-adapter"
CHECKPOINT_VERSION = 1


class AdapterError(CtxlmError, ValueError):
    tag = "adapter"


class TrainingError(CtxlmError, RuntimeError):
    tag = "training"


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class AdapterNet:
    """ReLU MLP with a floored softmax output.

    ``params`` holds ``W1, b1, ..., W{L+1}, b{L+1}`` where the last pair is the
    output layer; weights are stored input-major (``x @ W``).
    """

    activation = "relu"

    def __init__(self, input_dim: int, num_components: int, hidden: Sequence[int] = (200, 200),
                 seed: int | None = 0, floor: float = WEIGHT_FLOOR):
        self.input_dim = input_dim
        self.num_components = num_components
        self.hidden = tuple(hidden)
        self.floor = floor
        rng = np.random.default_rng(seed)
        self.params: dict[str, np.ndarray] = {}
        sizes = [input_dim, *self.hidden, num_components]
        for i, (a, b) in enumerate(zip(sizes, sizes[1:]), 1):
            scale = math.sqrt(2.0 / a) if i < len(sizes) - 1 else math.sqrt(1.0 / a)
            self.params[f"W{i}"] = rng.normal(0.0, scale, size=(a, b))
            self.params[f"b{i}"] = np.zeros(b)

    @property
    def num_layers(self) -> int:
        return len(self.hidden) + 1

    def copy_params(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params.items()}

    def _check(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.shape[-1] != self.input_dim:
            raise AdapterError(f"feature width {X.shape[-1]} does not match network input {self.input_dim}")
        return X

    def forward(self, X: np.ndarray, cache: list | None = None) -> np.ndarray:
        """Interpolation weights for a batch (or a single vector) of features."""
        X = self._check(X)
        single = X.ndim == 1
        a = X[None, :] if single else X
        L = self.num_layers
        for i in range(1, L):
            z = a @ self.params[f"W{i}"] + self.params[f"b{i}"]
            if cache is not None:
                cache.append((a, z))
            a = np.maximum(z, 0.0)
        logits = a @ self.params[f"W{L}"] + self.params[f"b{L}"]
        s = softmax(logits)
        if cache is not None:
            cache.append((a, s))
        lam = (s + self.floor) / (1.0 + self.num_components * self.floor)
        return lam[0] if single else lam

    def backward(self, cache: list, dlam: np.ndarray) -> dict[str, np.ndarray]:
        """Parameter gradients given dLoss/dlambda for the batch in ``cache``."""
        L = self.num_layers
        a, s = cache[-1]
        ds = dlam / (1.0 + self.num_components * self.floor)
        dz = s * (ds - (ds * s).sum(axis=1, keepdims=True))
        grads = {}
        for i in range(L, 0, -1):
            a_in = a if i == L else cache[i - 1][0]
            grads[f"W{i}"] = a_in.T @ dz
            grads[f"b{i}"] = dz.sum(axis=0)
            if i > 1:
                z_prev = cache[i - 2][1]
                dz = (dz @ self.params[f"W{i}"].T) * (z_prev > 0)
        return grads

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write(f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\n")
            f.write(f"input_dim {self.input_dim}\n")
            f.write(f"components {self.num_components}\n")
            f.write("hidden " + " ".join(map(str, self.hidden)) + "\n")
            f.write(f"activation {self.activation}\n")
            f.write(f"floor {self.floor!r}\n")
            for name, arr in self.params.items():
                mat = arr.reshape(arr.shape[0], -1) if arr.ndim == 2 else arr.reshape(1, -1)
                f.write(f"param {name} {mat.shape[0]} {mat.shape[1]}\n")
                for row in mat:
                    f.write(" ".join(repr(float(x)) for x in row) + "\n")

    @classmethod
    def load(cls, path) -> "AdapterNet":
        with open(path, encoding="utf-8") as f:
            lines = f.read().splitlines()
        head = lines[0].split()
        if len(head) != 2 or head[0] != CHECKPOINT_MAGIC:
            raise AdapterError(f"{path}: not an adapter checkpoint")
        if int(head[1]) != CHECKPOINT_VERSION:
            raise AdapterError(f"{path}: unsupported checkpoint version {head[1]}")
        meta = {}
        pos = 1
        while not lines[pos].startswith("param "):
            key, _, value = lines[pos].partition(" ")
            meta[key] = value
            pos += 1
        if meta.get("activation") != cls.activation:
            raise AdapterError(f"{path}: unsupported activation {meta.get('activation')!r}")
        hidden = tuple(int(x) for x in meta["hidden"].split())
        net = cls(int(meta["input_dim"]), int(meta["components"]), hidden, seed=None,
                  floor=float(meta["floor"]))
        while pos < len(lines):
            _, name, rows, cols = lines[pos].split()
            rows, cols = int(rows), int(cols)
            block = np.array([[float(x) for x in ln.split()] for ln in lines[pos + 1:pos + 1 + rows]])
            if name not in net.params or block.size != net.params[name].size:
                raise AdapterError(f"{path}: parameter block {name} has wrong shape")
            net.params[name] = block.reshape(net.params[name].shape)
            pos += 1 + rows
        return net


def ppl_loss(lam: np.ndarray, P: np.ndarray) -> float:
    """-sum_j ln sum_k lam_k P[j, k] for one utterance."""
    lam = np.asarray(lam, dtype=float)
    P = np.asarray(P, dtype=float)
    if P.shape[1] != lam.shape[0]:
        raise AdapterError(f"{lam.shape[0]} weights for a {P.shape[1]}-column probability matrix")
    mix = P @ lam
    if np.any(mix <= 0):
        raise AdapterError("probability matrix row has zero mixture probability")
    return float(-np.log(np.maximum(mix, ROW_FLOOR)).sum())


def ppl_loss_grad(lam: np.ndarray, P: np.ndarray) -> np.ndarray:
    """d ppl_loss / d lam_k = -sum_j P[j, k] / (lam . P[j])."""
    mix = np.maximum(P @ lam, ROW_FLOOR)
    return -(P / mix[:, None]).sum(axis=0)


def xent_loss(lam: np.ndarray, target: int) -> float:
    lam = np.asarray(lam, dtype=float)
    if not 0 <= target < lam.shape[0]:
        raise AdapterError(f"target {target} out of range for {lam.shape[0]} components")
    return float(-math.log(lam[target]))


def precompute_probs(mix: MixtureLM, ids: Sequence[int]) -> np.ndarray:
    """Per-position component probabilities; constant during adapter training."""
    return mix.prob_matrix(ids)


@dataclass
class AdapterData:
    """Training examples: features plus stacked probability matrices or labels."""

    X: np.ndarray
    rows: np.ndarray | None = None      # stacked ProbMatrix rows (total positions x C)
    offsets: np.ndarray | None = None   # utterance i owns rows[offsets[i]:offsets[i+1]]
    labels: np.ndarray | None = None

    @classmethod
    def from_matrices(cls, X, matrices: Sequence[np.ndarray]) -> "AdapterData":
        offsets = np.zeros(len(matrices) + 1, dtype=np.int64)
        offsets[1:] = np.cumsum([len(P) for P in matrices])
        rows = np.vstack(matrices) if matrices else np.zeros((0, 0))
        return cls(np.asarray(X, dtype=float), rows, offsets)

    @classmethod
    def from_labels(cls, X, labels) -> "AdapterData":
        return cls(np.asarray(X, dtype=float), labels=np.asarray(labels, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.X)

    def matrix(self, i: int) -> np.ndarray:
        return self.rows[self.offsets[i]:self.offsets[i + 1]]

    def batch_rows(self, idx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        starts, ends = self.offsets[idx], self.offsets[idx + 1]
        lengths = ends - starts
        seg = np.repeat(np.arange(len(idx)), lengths)
        pos = np.repeat(starts - np.concatenate([[0], np.cumsum(lengths)[:-1]]), lengths) + np.arange(lengths.sum())
        return self.rows[pos], seg


def batch_loss(net: AdapterNet, data: AdapterData, idx: np.ndarray, kind: str,
               with_grads: bool = True):
    """Mean loss over a batch (per token for ``ppl``, per utterance for ``xent``).

    Returns ``(loss, grads, floor_hits)``; ``grads`` is None when not requested.
    """
    cache: list | None = [] if with_grads else None
    lam = net.forward(data.X[idx], cache)
    hits = 0
    if kind == "ppl":
        P, seg = data.batch_rows(idx)
        mix = (P * lam[seg]).sum(axis=1)
        if np.any(mix <= 0):
            raise TrainingError("probability matrix row has zero mixture probability")
        low = mix < ROW_FLOOR
        hits = int(low.sum())
        mix = np.maximum(mix, ROW_FLOOR)
        ntok = len(P)
        loss = float(-np.log(mix).sum() / ntok)
        if not with_grads:
            return loss, None, hits
        r = P / mix[:, None]
        r[low] = 0.0
        dlam = np.zeros_like(lam)
        np.add.at(dlam, seg, -r)
        dlam /= ntok
    elif kind == "xent":
        y = data.labels[idx]
        picked = lam[np.arange(len(idx)), y]
        loss = float(-np.log(picked).mean())
        if not with_grads:
            return loss, None, hits
        dlam = np.zeros_like(lam)
        dlam[np.arange(len(idx)), y] = -1.0 / (picked * len(idx))
    else:
        raise AdapterError(f"unknown loss {kind!r}")
    return loss, net.backward(cache, dlam), hits


def dataset_loss(net: AdapterNet, data: AdapterData, kind: str, chunk: int = 4096) -> float:
    """Loss over a whole dataset with the same normalization as ``batch_loss``."""
    total, weight = 0.0, 0
    for start in range(0, len(data), chunk):
        idx = np.arange(start, min(start + chunk, len(data)))
        loss, _, _ = batch_loss(net, data, idx, kind, with_grads=False)
        w = int(data.offsets[idx[-1] + 1] - data.offsets[idx[0]]) if kind == "ppl" else len(idx)
        total += loss * w
        weight += w
    return total / weight


@dataclass
class TrainConfig:
    loss: str = "ppl"
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 5.0
    batch_size: int = 64
    max_epochs: int = 50
    patience: int = 5
    seed: int = 0
    hidden: tuple[int, ...] = (200, 200)

    def __post_init__(self):
        if self.loss not in ("ppl", "xent"):
            raise AdapterError(f"unknown loss {self.loss!r}")
        for name in ("learning_rate", "clip_norm", "eps"):
            if not getattr(self, name) > 0:
                raise AdapterError(f"{name} must be positive")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise AdapterError("batch_size, max_epochs and patience must be >= 1")


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    dev_loss: float
    floor_hits: int = 0


@dataclass
class TrainResult:
    net: AdapterNet
    trace: list[EpochStats] = field(default_factory=list)
    best_epoch: int = 0
    max_epochs: int = 0

    @property
    def stopped_early(self) -> bool:
        return bool(self.trace) and self.trace[-1].epoch < self.max_epochs


def train(net: AdapterNet, train_data: AdapterData, dev_data: AdapterData | None,
          config: TrainConfig) -> TrainResult:
    """Minibatch Adam with global-norm clipping and early stopping on dev loss.

    The parameters from the best dev epoch are restored before returning.
    """
    if len(train_data) == 0:
        raise TrainingError("empty training set")
    for data in (train_data, dev_data):
        if data is None:
            continue
        if data.X.shape[1] != net.input_dim:
            raise AdapterError(f"features have width {data.X.shape[1]}, network expects {net.input_dim}")
        if config.loss == "ppl" and (data.rows is None or data.rows.shape[1] != net.num_components):
            raise AdapterError("ppl training needs probability matrices with one column per component")
        if config.loss == "xent" and data.labels is None:
            raise AdapterError("xent training needs component labels")
    dev = dev_data if dev_data is not None and len(dev_data) else train_data
    rng = np.random.default_rng(config.seed)
    opt = Adam(net.params, config.learning_rate, config.beta1, config.beta2, config.eps)
    result = TrainResult(net, max_epochs=config.max_epochs)
    best, best_params, bad = math.inf, net.copy_params(), 0
    n = len(train_data)
    for epoch in range(1, config.max_epochs + 1):
        perm = rng.permutation(n)
        total, weight, hits = 0.0, 0, 0
        for start in range(0, n, config.batch_size):
            idx = np.sort(perm[start:start + config.batch_size])
            loss, grads, h = batch_loss(net, train_data, idx, config.loss)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite training loss at epoch {epoch}, batch starting {start}")
            clip_global_norm(grads, config.clip_norm)
            opt.step(net.params, grads)
            w = int((train_data.offsets[idx + 1] - train_data.offsets[idx]).sum()) if config.loss == "ppl" else len(idx)
            total += loss * w
            weight += w
            hits += h
        dev_loss = dataset_loss(net, dev, config.loss)
        if not math.isfinite(dev_loss):
            raise TrainingError(f"non-finite dev loss at epoch {epoch}")
        result.trace.append(EpochStats(epoch, total / weight, dev_loss, hits))
        log.info("epoch %d train %.5f dev %.5f", epoch, total / weight, dev_loss)
        if dev_loss < best:
            best, best_params, bad = dev_loss, net.copy_params(), 0
            result.best_epoch = epoch
        else:
            bad += 1
            if bad >= config.patience:
                break
    net.params = best_params
    return result


def write_trace(path, trace: Sequence[EpochStats]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "train_loss", "dev_loss", "floor_hits"])
        for s in trace:
            writer.writerow([s.epoch, f"{s.train_loss:.8f}", f"{s.dev_loss:.8f}", s.floor_hits])
