"""Training loop: Adam, sparse categorical cross-entropy, early stopping."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import VoxelXaiError
from .augment import AugmentConfig, ZCAWhitener, augment
from .layers import softmax
from .network import Model, NetworkSpec, build_model
from ..volume import Volume3D

SPLITS = ("train", "val", "test")


@dataclass
class TrainConfig:
    split_fractions: tuple[float, float, float] = (0.70, 0.20, 0.10)
    learning_rate: float = 1e-4
    lr_decay_half_life: int = 10  # epochs; decay runs over the first half of the budget
    max_epochs: int = 100
    patience: int = 10
    batch_size: int = 16
    augment: AugmentConfig | None = None
    seed: int = 0

    def __post_init__(self):
        if abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise VoxelXaiError(
                f"split fractions must sum to 1: {self.split_fractions}"
            )
        if self.patience < 1:
            raise VoxelXaiError("patience must be >= 1")

    def lr_at(self, epoch: int) -> float:
        cutoff = self.max_epochs // 2
        t = min(epoch, cutoff)
        return self.learning_rate * 0.5 ** (t / self.lr_decay_half_life)


@dataclass
class LabeledCohort:
    """In-memory cohort: (n, d, h, w) volumes, binary labels, split tags."""

    volumes: np.ndarray
    labels: np.ndarray
    split: np.ndarray  # array of "train" / "val" / "test"

    def subset(self, name):
        m = self.split == name
        return self.volumes[m], self.labels[m]

    def input_dims(self):
        _, d, h, w = self.volumes.shape
        return (w, h, d)


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)  # (epoch, lr, train_loss, val_loss, val_acc)
    best_epoch: int = -1
    stopped_epoch: int = -1
    accuracy: dict = field(default_factory=dict)  # split -> accuracy

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["epoch", "lr", "train_loss", "val_loss", "val_acc"])
            for row in self.epochs:
                wr.writerow([row[0]] + [f"{v:.6f}" for v in row[1:]])


class Adam:
    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads, lr):
        self.t += 1
        b1c = 1 - self.beta1**self.t
        b2c = 1 - self.beta2**self.t
        for k, p in self.params.items():
            g = grads[k]
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            p -= lr * (self.m[k] / b1c) / (np.sqrt(self.v[k] / b2c) + self.eps)


def cross_entropy(logits, labels):
    """Mean sparse categorical cross-entropy and the logit gradient."""
    p = softmax(logits, axis=-1)
    n = logits.shape[0]
    eps = 1e-12
    loss = -np.log(p[np.arange(n), labels] + eps).mean()
    grad = p.copy()
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def evaluate(model: Model, X, y, batch_size=64):
    losses = []
    correct = 0
    for i in range(0, len(X), batch_size):
        logits = model.forward_batch(X[i : i + batch_size])
        loss, _ = cross_entropy(logits, y[i : i + batch_size])
        losses.append(loss * len(logits))
        correct += (logits.argmax(axis=1) == y[i : i + batch_size]).sum()
    return sum(losses) / len(X), correct / len(X)


def train(cohort: LabeledCohort, spec: NetworkSpec, cfg: TrainConfig):
    """Train a model; returns (model, report). Deterministic for a fixed seed."""
    Xtr, ytr = cohort.subset("train")
    Xval, yval = cohort.subset("val")
    Xte, yte = cohort.subset("test")
    for name, y in (("train", ytr), ("val", yval), ("test", yte)):
        counts = np.bincount(y.astype(int), minlength=2)
        if (counts < 2).any():
            raise VoxelXaiError(
                f"degenerate {name} split: class counts {counts.tolist()}"
            )

    rng = np.random.default_rng(cfg.seed)
    model = build_model(spec, rng)
    opt = Adam(model.param_dict())

    whitener = None
    aug = cfg.augment
    if aug is not None and aug.zca:
        whitener = ZCAWhitener(aug.zca_eps).fit(Xtr.reshape(len(Xtr), -1))

    report = TrainReport()
    best_val = np.inf
    best_state = None
    bad_epochs = 0

    for epoch in range(cfg.max_epochs):
        lr = cfg.lr_at(epoch)
        order = rng.permutation(len(Xtr))
        train_losses = []
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i : i + cfg.batch_size]
            xb = Xtr[idx]
            if aug is not None:
                xb = np.stack(
                    [
                        augment(Volume3D.from_array(v), aug, rng, whitener).to_array()
                        for v in xb
                    ]
                )
            logits = model.forward_batch(xb, train=True, rng=rng)
            loss, glog = cross_entropy(logits, ytr[idx])
            model.zero_grads()
            model.backward_batch(glog)
            opt.step(model.grad_dict(), lr)
            train_losses.append(loss * len(idx))

        val_loss, val_acc = evaluate(model, Xval, yval)
        report.epochs.append(
            (epoch, lr, sum(train_losses) / len(order), val_loss, val_acc)
        )
        if val_loss < best_val - 1e-12:
            best_val = val_loss
            best_state = {k: v.copy() for k, v in model.state_dict().items()}
            report.best_epoch = epoch
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= cfg.patience:
                report.stopped_epoch = epoch
                break
    else:
        report.stopped_epoch = cfg.max_epochs - 1

    if best_state is not None:
        model.load_state(best_state)
    for name, (X, y) in zip(SPLITS, ((Xtr, ytr), (Xval, yval), (Xte, yte))):
        _, acc = evaluate(model, X, y)
        report.accuracy[name] = acc
    return model, report
