"""Frozen-encoder linear probe on synthetic shape datasets."""

from __future__ import annotations

import numpy as np

from .config import TrainConfig
from .data import SyntheticShape
from .train import Model, encode_full


def extract_features(dataset: list[SyntheticShape], model: Model,
                     cfg: TrainConfig) -> tuple[np.ndarray, np.ndarray]:
    feats = np.stack([encode_full(s.cloud, model, cfg, fps_seed=i)
                      for i, s in enumerate(dataset)])
    labels = np.array([s.label for s in dataset], dtype=np.intp)
    return feats, labels


def stratified_split(labels: np.ndarray, train_frac: float = 0.8,
                     seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic per-class 80/20 split."""
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        idx = idx[rng.permutation(idx.size)]
        cut = int(round(train_frac * idx.size))
        train_idx.extend(idx[:cut])
        test_idx.extend(idx[cut:])
    return np.array(sorted(train_idx)), np.array(sorted(test_idx))


def train_linear_classifier(x: np.ndarray, y: np.ndarray, n_classes: int,
                            epochs: int = 300, lr: float = 0.5,
                            weight_decay: float = 1e-4) -> tuple[np.ndarray, np.ndarray]:
    """Full-batch softmax regression on standardized features."""
    w = np.zeros((x.shape[1], n_classes))
    b = np.zeros(n_classes)
    onehot = np.eye(n_classes)[y]
    n = x.shape[0]
    for _ in range(epochs):
        logits = x @ w + b
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        err = (p - onehot) / n
        gw = x.T @ err + weight_decay * w
        gb = err.sum(axis=0)
        w -= lr * gw
        b -= lr * gb
    return w, b


def linear_probe(model: Model, cfg: TrainConfig, dataset: list[SyntheticShape],
                 probe_epochs: int = 300, split_seed: int = 0) -> float:
    """Held-out accuracy of a linear classifier on frozen encoder features.

    The backbone never receives gradients; features are extracted once with
    plain forward passes.
    """
    labels = np.array([s.label for s in dataset])
    classes = np.unique(labels)
    if classes.size < 2:
        raise ValueError("linear probe needs at least 2 classes")
    feats, labels = extract_features(dataset, model, cfg)
    mu = feats.mean(axis=0, keepdims=True)
    sd = feats.std(axis=0, keepdims=True) + 1e-8
    feats = (feats - mu) / sd
    train_idx, test_idx = stratified_split(labels, seed=split_seed)
    w, b = train_linear_classifier(feats[train_idx], labels[train_idx],
                                   classes.size, epochs=probe_epochs)
    pred = np.argmax(feats[test_idx] @ w + b, axis=1)
    return float(np.mean(pred == labels[test_idx]))
