"""Pairwise latent selector: a small CNN feature extractor and an MLP
discriminator over the feature difference, trained with BCE by hand-written
backprop and AdamW.

Named variants follow the ``Conv{c}-FC{f}[-Prompt]`` scheme. ``FC2`` has no
convolution; the flattened latent is its feature vector.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple, Optional

import numpy as np

from . import container
from .data import BalancedPairSet, PairSplit

log = logging.getLogger(__name__)

VARIANTS = {
    "FC2": (0, 2, False),
    "Conv1-FC2": (1, 2, False),
    "Conv1-FC3": (1, 3, False),
    "Conv2-FC2": (2, 2, False),
    "Conv1-FC2-Prompt": (1, 2, True),
    "Conv1-FC3-Prompt": (1, 3, True),
}


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class SelectorArch:
    conv: int
    fc: int
    prompt: bool
    hidden: int = 64
    input_shape: tuple[int, int, int] = (11, 16, 16)
    prompt_dim: int = 16

    def __post_init__(self):
        if self.conv not in (0, 1, 2) or self.fc not in (2, 3):
            raise ValueError(f"unsupported layer counts conv={self.conv} fc={self.fc}")

    @classmethod
    def named(cls, name: str, **kw) -> "SelectorArch":
        try:
            conv, fc, prompt = VARIANTS[name]
        except KeyError:
            raise ValueError(f"unknown selector variant {name!r}; choose from {sorted(VARIANTS)}") from None
        return cls(conv, fc, prompt, **kw)

    @property
    def name(self) -> str:
        base = f"Conv{self.conv}-FC{self.fc}" if self.conv else f"FC{self.fc}"
        return base + ("-Prompt" if self.prompt else "")

    @property
    def feature_shape(self) -> tuple[int, int, int]:
        c, h, w = self.input_shape
        for _ in range(self.conv):
            c, h, w = 2 * c, (h + 1) // 2, (w + 1) // 2
        return c, h, w

    @property
    def feature_dim(self) -> int:
        return int(np.prod(self.feature_shape))

    @property
    def mlp_dims(self) -> list[int]:
        d_in = self.feature_dim + (self.prompt_dim if self.prompt else 0)
        return [d_in] + [self.hidden] * (self.fc - 1) + [1]


class PairPrediction(NamedTuple):
    logit: float
    probability: float


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


def bce_with_logits(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-sample ``-(y log s(x) + (1-y) log(1-s(x)))``, computed stably."""
    return np.logaddexp(0.0, logits) - labels * logits


# --------------------------------------------------------------------------- #
# conv helpers (3x3, stride 2, padding 1)
# --------------------------------------------------------------------------- #


def _im2col(x: np.ndarray) -> np.ndarray:
    b, c, h, w = x.shape
    ho, wo = (h + 1) // 2, (w + 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((b, c, 3, 3, ho, wo))
    for ki in range(3):
        for kj in range(3):
            cols[:, :, ki, kj] = xp[:, :, ki:ki + 2 * ho:2, kj:kj + 2 * wo:2]
    return cols.reshape(b, c * 9, ho * wo).transpose(0, 2, 1)  # (B, Ho*Wo, C*9)


def _col2im(dcols: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    b, c, h, w = shape
    ho, wo = (h + 1) // 2, (w + 1) // 2
    d = dcols.transpose(0, 2, 1).reshape(b, c, 3, 3, ho, wo)
    dxp = np.zeros((b, c, h + 2, w + 2))
    for ki in range(3):
        for kj in range(3):
            dxp[:, :, ki:ki + 2 * ho:2, kj:kj + 2 * wo:2] += d[:, :, ki, kj]
    return dxp[:, :, 1:h + 1, 1:w + 1]


class SelectorModel:
    def __init__(self, arch: SelectorArch, seed: int = 0):
        self.arch = arch
        rng = np.random.Generator(np.random.PCG64([seed, 0x5E1]))
        self.params: dict[str, np.ndarray] = {}
        c = arch.input_shape[0]
        for i in range(arch.conv):
            bound = 1.0 / math.sqrt(c * 9)
            self.params[f"conv{i}.w"] = rng.uniform(-bound, bound, size=(2 * c, c, 3, 3))
            self.params[f"conv{i}.b"] = np.zeros(2 * c)
            c *= 2
        dims = arch.mlp_dims
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            bound = 1.0 / math.sqrt(a)
            self.params[f"fc{i}.w"] = rng.uniform(-bound, bound, size=(a, b))
            self.params[f"fc{i}.b"] = np.zeros(b)
        self.step_count = 0
        self.loss_history: list[float] = []

    # -- forward ---------------------------------------------------------- #

    def _features(self, z: np.ndarray):
        """Feature vectors ``(B, D)`` plus the cache needed for backprop."""
        cache = []
        x = z
        for i in range(self.arch.conv):
            w, b = self.params[f"conv{i}.w"], self.params[f"conv{i}.b"]
            cols = _im2col(x)
            pre = cols @ w.reshape(w.shape[0], -1).T + b  # (B, P, Cout)
            act = np.maximum(pre, 0.0)
            cache.append((x.shape, cols, pre))
            ho, wo = (x.shape[2] + 1) // 2, (x.shape[3] + 1) // 2
            x = act.transpose(0, 2, 1).reshape(x.shape[0], w.shape[0], ho, wo)
        return x.reshape(x.shape[0], -1), cache

    def extract_features(self, z: np.ndarray) -> np.ndarray:
        single = z.ndim == 3
        z = np.asarray(z, dtype=float)
        if z.shape[-3:] != self.arch.input_shape:
            raise ValueError(f"latent shape {z.shape[-3:]} != selector input {self.arch.input_shape}")
        f, _ = self._features(z[None] if single else z)
        return f[0] if single else f

    def _mlp(self, x: np.ndarray):
        acts = [x]
        n = self.arch.fc
        for i in range(n):
            x = x @ self.params[f"fc{i}.w"] + self.params[f"fc{i}.b"]
            if i < n - 1:
                x = np.maximum(x, 0.0)
            acts.append(x)
        return x[:, 0], acts

    def _forward(self, z1: np.ndarray, z2: np.ndarray, embed: Optional[np.ndarray]):
        b = z1.shape[0]
        feats, conv_cache = self._features(np.concatenate([z1, z2], axis=0))
        diff = feats[:b] - feats[b:]
        inp = np.concatenate([diff, embed], axis=1) if self.arch.prompt else diff
        logits, acts = self._mlp(inp)
        return logits, (conv_cache, acts)

    def logits(self, z1: np.ndarray, z2: np.ndarray, embed: Optional[np.ndarray] = None) -> np.ndarray:
        z1 = np.asarray(z1, dtype=float)
        z2 = np.asarray(z2, dtype=float)
        if z1.shape != z2.shape:
            raise ValueError("pair latents differ in shape")
        if self.arch.prompt:
            if embed is None:
                raise ValueError(f"{self.arch.name} needs a prompt embedding")
            embed = np.broadcast_to(np.asarray(embed, dtype=float), (z1.shape[0], self.arch.prompt_dim))
        return self._forward(z1, z2, embed)[0]

    def predict_pair(self, z1: np.ndarray, z2: np.ndarray, embed: Optional[np.ndarray] = None) -> PairPrediction:
        logit = float(self.logits(z1[None], z2[None], None if embed is None else np.asarray(embed)[None])[0])
        return PairPrediction(logit, float(sigmoid(logit)))

    # -- backward --------------------------------------------------------- #

    def loss_and_grads(self, z1, z2, embed, labels) -> tuple[float, dict[str, np.ndarray]]:
        """Mean BCE over the batch and its gradient w.r.t. every parameter."""
        z1 = np.asarray(z1, dtype=float)
        z2 = np.asarray(z2, dtype=float)
        labels = np.asarray(labels, dtype=float)
        if self.arch.prompt:
            embed = np.asarray(embed, dtype=float)
        b = z1.shape[0]
        logits, (conv_cache, acts) = self._forward(z1, z2, embed)
        loss = float(bce_with_logits(logits, labels).mean())
        grads: dict[str, np.ndarray] = {}

        d = ((sigmoid(logits) - labels) / b)[:, None]
        for i in reversed(range(self.arch.fc)):
            x_in = acts[i]
            grads[f"fc{i}.w"] = x_in.T @ d
            grads[f"fc{i}.b"] = d.sum(axis=0)
            d = d @ self.params[f"fc{i}.w"].T
            if i > 0:
                d = d * (acts[i] > 0)
        d_diff = d[:, :self.arch.feature_dim]
        d = np.concatenate([d_diff, -d_diff], axis=0)

        for i in reversed(range(self.arch.conv)):
            in_shape, cols, pre = conv_cache[i]
            w = self.params[f"conv{i}.w"]
            d_act = d.reshape(pre.shape[0], pre.shape[2], pre.shape[1]).transpose(0, 2, 1)
            d_pre = d_act * (pre > 0)
            grads[f"conv{i}.w"] = np.einsum("bpo,bpk->ok", d_pre, cols).reshape(w.shape)
            grads[f"conv{i}.b"] = d_pre.sum(axis=(0, 1))
            if i > 0:
                d = _col2im(d_pre @ w.reshape(w.shape[0], -1), in_shape)
        return loss, grads

    # -- persistence ------------------------------------------------------ #

    def save(self, path: str | Path) -> None:
        a = self.arch
        meta = {"arch": {"conv": a.conv, "fc": a.fc, "prompt": a.prompt, "hidden": a.hidden,
                         "input_shape": list(a.input_shape), "prompt_dim": a.prompt_dim},
                "step_count": self.step_count, "loss_history": self.loss_history}
        container.save(path, "selector", meta, self.params)

    @classmethod
    def load(cls, path: str | Path) -> "SelectorModel":
        manifest, arrays = container.load(path, "selector")
        m = manifest["meta"]
        try:
            a = m["arch"]
            arch = SelectorArch(a["conv"], a["fc"], a["prompt"], a["hidden"], tuple(a["input_shape"]), a["prompt_dim"])
        except KeyError as exc:
            raise container.HeaderError(f"checkpoint manifest missing {exc}") from exc
        model = cls(arch)
        if set(arrays) != set(model.params):
            raise container.HeaderError("checkpoint arrays do not match the architecture")
        for k, v in arrays.items():
            if v.shape != model.params[k].shape:
                raise container.HeaderError(f"checkpoint array {k} has shape {v.shape}")
            model.params[k] = v.astype(float)
        model.step_count = int(m["step_count"])
        model.loss_history = list(m["loss_history"])
        return model


class OracleSelector:
    """Comparator wired to a ground-truth score function: logit = s(z1) - s(z2)."""

    def __init__(self, score_fn: Callable[[np.ndarray], float]):
        self.score_fn = score_fn

    def predict_pair(self, z1, z2, embed=None) -> PairPrediction:
        logit = float(self.score_fn(z1) - self.score_fn(z2))
        return PairPrediction(logit, float(sigmoid(logit)))


# --------------------------------------------------------------------------- #
# training and evaluation
# --------------------------------------------------------------------------- #


@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 0.01
    batch_size: int = 64
    epochs: int = 20
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    swap_augment: bool = True


@dataclass
class AdamW:
    lr: float
    weight_decay: float
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        b1, b2 = self.betas
        for k, g in grads.items():
            m = self.m.setdefault(k, np.zeros_like(g))
            v = self.v.setdefault(k, np.zeros_like(g))
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            m_hat = m / (1 - b1**self.t)
            v_hat = v / (1 - b2**self.t)
            p = params[k]
            if p.ndim > 1:
                p -= lr * self.weight_decay * p
            p -= lr * m_hat / (np.sqrt(v_hat) + self.eps)


def cosine_lr(base: float, step: int, total: int) -> float:
    return 0.5 * base * (1.0 + math.cos(math.pi * min(step, total) / max(total, 1)))


def train(model: SelectorModel, pairs: BalancedPairSet, cfg: TrainConfig = TrainConfig(),
          split: Optional[PairSplit] = None) -> SelectorModel:
    """Minibatch AdamW on mean BCE; the learning rate follows a cosine decay to zero.

    With ``swap_augment`` each sample is presented in a random orientation
    (swapping the latents flips the label).
    """
    split = pairs.train if split is None else split
    n = len(split)
    if n == 0:
        raise ValueError("empty training partition")
    rng = np.random.Generator(np.random.PCG64([cfg.seed, 0xA11]))
    opt = AdamW(cfg.lr, cfg.weight_decay, cfg.betas, cfg.eps)
    per_epoch = math.ceil(n / cfg.batch_size)
    total = per_epoch * cfg.epochs
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        losses = []
        for s in range(per_epoch):
            idx = order[s * cfg.batch_size:(s + 1) * cfg.batch_size]
            z1, z2, emb, y = pairs.batch(split, idx)
            if cfg.swap_augment:
                flip = rng.random(len(idx)) < 0.5
                z1, z2 = np.where(flip[:, None, None, None], z2, z1), np.where(flip[:, None, None, None], z1, z2)
                y = np.where(flip, 1 - y, y)
            loss, grads = model.loss_and_grads(z1, z2, emb, y)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss {loss} at epoch {epoch}, step {model.step_count}")
            opt.step(model.params, grads, cosine_lr(cfg.lr, model.step_count, total))
            model.step_count += 1
            losses.append(loss)
        model.loss_history.append(float(np.mean(losses)))
        log.info("%s epoch %d loss %.4f", model.arch.name, epoch + 1, model.loss_history[-1])
    return model


@dataclass
class AccuracyReport:
    overall: float
    count: int
    per_bin: dict[int, tuple[float, int]]

    @property
    def top_bin(self) -> Optional[tuple[int, float, int]]:
        """(bin, accuracy, count) for the highest non-empty bin."""
        if not self.per_bin:
            return None
        b = max(self.per_bin)
        return b, *self.per_bin[b]


def pair_logits(model, pairs: BalancedPairSet, split: PairSplit, batch: int = 256) -> np.ndarray:
    out = []
    for s in range(0, len(split), batch):
        idx = np.arange(s, min(s + batch, len(split)))
        z1, z2, emb, _ = pairs.batch(split, idx)
        if hasattr(model, "logits"):
            out.append(model.logits(z1, z2, emb))
        else:
            out.append(np.array([model.predict_pair(a, b, e).logit for a, b, e in zip(z1, z2, emb)]))
    return np.concatenate(out)


def pairwise_accuracy(model, pairs: BalancedPairSet, split: Optional[PairSplit] = None) -> AccuracyReport:
    """Fraction of pairs where ``sigmoid(logit) > 0.5`` agrees with the label, overall and per gap bin."""
    split = pairs.test if split is None else split
    if len(split) == 0:
        raise ValueError("empty evaluation partition")
    correct = (pair_logits(model, pairs, split) > 0).astype(np.int64) == split.labels
    bins = pairs.bins(split)
    per_bin = {int(b): (float(correct[bins == b].mean()), int((bins == b).sum())) for b in np.unique(bins)}
    return AccuracyReport(float(correct.mean()), len(split), per_bin)
