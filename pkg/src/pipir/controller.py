"""Degradation classifier that predicts control weights from a degraded image."""
from __future__ import annotations

import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .autodiff import Tensor
from .degradations import ALL_TASKS, DegradationKind, make_sample
from .layers import Conv3x3, Module, param
from .train import Adam, TrainingAborted


@dataclass
class ClassifierConfig:
    channels: list = field(default_factory=lambda: [8, 16, 32])
    T: int = len(ALL_TASKS)
    # affine input map (x - shift) * gain; raw [0, 1] pixels leave the
    # high-frequency cues that separate noise, rain and blur too faint
    input_shift: float = 0.5
    input_gain: float = 4.0

    def __post_init__(self):
        self.channels = list(self.channels)
        if not self.channels or min(self.channels) < 1 or self.T < 1:
            raise ad.ContractError("classifier needs >= 1 positive conv stage and T >= 1")


@dataclass
class ClassifierTrainConfig:
    steps: int = 1000
    batch_size: int = 16
    lr: float = 3e-3
    image_size: int = 64
    seed: int = 0
    eval_per_class: int = 100
    eval_seed: int = 777


class Classifier(Module):
    """Stride-2 conv + gelu stages, global average pool, linear head to T logits."""

    def __init__(self, config: ClassifierConfig | None = None, seed: int = 0):
        self.config = config = config or ClassifierConfig()
        rng = np.random.default_rng(seed)
        chans = [3] + config.channels
        self.stages = [Conv3x3(a, b, rng, stride=2) for a, b in zip(chans, chans[1:])]
        self.head_w = param(rng.standard_normal((chans[-1], config.T)) / math.sqrt(chans[-1]))
        self.head_b = param(np.zeros(config.T))

    def logits(self, x: Tensor) -> Tensor:
        h = ad.scale(ad.add(x, -self.config.input_shift), self.config.input_gain)
        for conv in self.stages:
            h = ad.gelu(conv(h))
        pooled = ad.global_avg_pool(h)
        single = pooled.ndim == 1
        if single:
            pooled = ad.reshape(pooled, (1, pooled.shape[0]))
        out = ad.add(ad.matmul(pooled, self.head_w), ad.reshape(self.head_b, (1, self.config.T)))
        return ad.reshape(out, (self.config.T,)) if single else out

    def probabilities(self, images: np.ndarray) -> np.ndarray:
        with ad.no_grad():
            return ad.softmax(self.logits(ad.tensor(images)), axis=-1).data

    def classify(self, img: np.ndarray) -> tuple[np.ndarray, int]:
        """Softmax weights over all T classes and the argmax label."""
        p = self.probabilities(img)
        return p, int(np.argmax(p))

    def omega_for(self, img: np.ndarray, tasks, hard: bool = True) -> np.ndarray:
        """Weights over a model's ``tasks`` (a subset of the classifier's classes).

        Hard mode is one-hot on the most probable task in ``tasks``; soft mode
        renormalises the probabilities of those tasks.
        """
        p, _ = self.classify(img)
        sub = np.array([p[DegradationKind.parse(t)] for t in tasks], dtype=np.float64)
        if hard:
            out = np.zeros(len(tasks), dtype=np.float32)
            out[int(np.argmax(sub))] = 1.0
            return out
        return (sub / max(sub.sum(), 1e-12)).astype(np.float32)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    target = np.eye(logits.shape[-1])[labels]
    return ad.scale(ad.sum_(ad.mul(ad.log_softmax(logits, axis=-1), ad.tensor(target))), -1.0 / len(labels))


def _batch(seed, n: int, size: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    labels = rng.integers(len(ALL_TASKS), size=n)
    imgs = [make_sample(rng.integers(2**63), DegradationKind(int(k)), ALL_TASKS, size).degraded for k in labels]
    return np.stack(imgs), labels


def held_out_set(per_class: int, seed: int, size: int) -> tuple[np.ndarray, np.ndarray]:
    imgs, labels = [], []
    for k in DegradationKind:
        for i in range(per_class):
            imgs.append(make_sample([seed, int(k), i], k, ALL_TASKS, size).degraded)
            labels.append(int(k))
    return np.stack(imgs), np.array(labels)


def accuracy_table(clf: Classifier, images: np.ndarray, labels: np.ndarray, batch: int = 50) -> dict[str, float]:
    preds = np.concatenate([np.argmax(clf.probabilities(images[i:i + batch]), axis=-1)
                            for i in range(0, len(images), batch)])
    table = {}
    for k in DegradationKind:
        mask = labels == int(k)
        table[k.task] = float(np.mean(preds[mask] == k)) if mask.any() else float("nan")
    table["overall"] = float(np.mean(preds == labels))
    return table


def confusion(clf: Classifier, images: np.ndarray, labels: np.ndarray) -> np.ndarray:
    preds = np.argmax(clf.probabilities(images), axis=-1)
    out = np.zeros((len(ALL_TASKS), len(ALL_TASKS)), dtype=int)
    np.add.at(out, (labels, preds), 1)
    return out


def _lr(step: int, cfg: ClassifierTrainConfig) -> float:
    # linear warm-up over the first tenth, cosine decay afterwards
    warm = max(cfg.steps // 10, 1)
    if step < warm:
        return cfg.lr * step / warm
    return cfg.lr * 0.5 * (1 + math.cos(math.pi * (step - warm) / max(cfg.steps - warm, 1)))


def train_classifier(cfg: ClassifierTrainConfig, ccfg: ClassifierConfig | None = None, log=None,
                     out_path: str | None = None) -> tuple[Classifier, dict[str, float]]:
    """Cross-entropy training over the five degradation classes."""
    clf = Classifier(ccfg, seed=cfg.seed)
    opt = Adam()
    named = list(clf.named_parameters())
    for step in range(cfg.steps):
        x, y = _batch([cfg.seed, step], cfg.batch_size, cfg.image_size)
        clf.zero_grad()
        loss = cross_entropy(clf.logits(ad.tensor(x)), y)
        if not math.isfinite(float(loss.data)):
            raise TrainingAborted(f"classifier loss is not finite at step {step}")
        ad.backward(loss)
        opt.update(named, _lr(step + 1, cfg))
        if log is not None and (step + 1) % 100 == 0:
            log(f"step {step + 1}: loss {float(loss.data):.4f}")
    images, labels = held_out_set(cfg.eval_per_class, cfg.eval_seed, cfg.image_size)
    acc = accuracy_table(clf, images, labels)
    if out_path is not None:
        save_classifier(out_path, clf, cfg)
    return clf, acc


def save_classifier(path, clf: Classifier, cfg: ClassifierTrainConfig | None = None) -> None:
    meta = {"kind": "classifier", "classifier": asdict(clf.config)}
    if cfg is not None:
        meta["train"] = asdict(cfg)
    checkpoint.save(path, clf.state_dict(), meta)


def load_classifier(path) -> Classifier:
    tensors, meta = checkpoint.load(path)
    if not meta or meta.get("kind") != "classifier":
        raise checkpoint.FormatError(f"{os.fspath(path)}: not a classifier checkpoint")
    clf = Classifier(ClassifierConfig(**meta["classifier"]))
    try:
        clf.load_state_dict(tensors)
    except (KeyError, ValueError) as exc:
        raise checkpoint.FormatError(f"{os.fspath(path)}: {exc}") from None
    return clf
