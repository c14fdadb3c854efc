"""Victim-side training and evaluation.

Victims are trained on clean, poisoned, or partially poisoned data by
plain minibatch gradient descent or by PGD adversarial training, and
judged by clean test accuracy: the lower it is, the less the victim
managed to learn from the protected data.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor, backward
from .datasets import LabeledDataset, dataset_hash
from .models import ArchSpec, ClassifierModel, classify_loss, init_classifier
from .poisonforge import PoisonedDataset, project_linf, _assert_in_ball
from .scorelab import TrainingDivergedError


@dataclass(frozen=True)
class VictimTrainConfig:
    arch: ArchSpec
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 0.1
    rho_a_train: float = 0.0
    pgd_steps: int = 10
    pgd_step_size: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.rho_a_train < 0:
            raise ValueError("VictimTrainConfig: rho_a_train must be non-negative")
        if self.rho_a_train > 0 and self.pgd_steps < 1:
            raise ValueError("VictimTrainConfig: adversarial training needs pgd_steps >= 1")
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("VictimTrainConfig: invalid optimizer settings")
        if self.pgd_step_size is None:
            object.__setattr__(self, "pgd_step_size", self.rho_a_train / 4.0)


def _pgd_attack(model: ClassifierModel, x: np.ndarray, y: np.ndarray, rho: float,
                step_size: float, steps: int, rng: np.random.Generator) -> np.ndarray:
    """Random-start signed-gradient ascent on the batch loss, clipped to rho."""
    delta = rng.uniform(-rho, rho, size=x.shape).astype(x.dtype)
    delta = project_linf(delta, rho)
    for _ in range(steps):
        dt = Tensor(delta, requires_grad=True)
        loss = classify_loss(model, Tensor(x) + dt, y)
        (g,) = backward(loss, [dt])
        delta = project_linf(delta + step_size * np.sign(g), rho)
        _assert_in_ball(delta, rho, "pgd_attack")
    return delta


def train_victim(dataset: LabeledDataset, cfg: VictimTrainConfig,
                 test_dataset: LabeledDataset | None = None,
                 ) -> tuple[ClassifierModel, list[tuple[int, float, float, float]]]:
    """Train a victim classifier; rho_a_train = 0 is plain training and
    rho_a_train > 0 is PGD adversarial training on the same code path.

    History rows are (epoch, train_loss, train_acc, test_acc); test_acc is
    NaN when no test set is given. Deterministic given cfg.seed.
    """
    if cfg.arch.input_dim != dataset.dim or cfg.arch.output_dim != dataset.n_classes:
        raise ValueError("train_victim: arch dims do not match dataset")
    rng = np.random.default_rng(cfg.seed)
    init_seed = int(rng.integers(0, 2**63 - 1))
    model = init_classifier(cfg.arch, init_seed)
    feats = dataset.features.astype(model.dtype, copy=False)
    history: list[tuple[int, float, float, float]] = []
    for epoch in range(1, cfg.epochs + 1):
        perm = rng.permutation(dataset.n)
        loss_sum = 0.0
        for start in range(0, dataset.n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            xb, yb = feats[idx], dataset.labels[idx]
            if cfg.rho_a_train > 0:
                delta = _pgd_attack(model, xb, yb, cfg.rho_a_train,
                                    cfg.pgd_step_size, cfg.pgd_steps, rng)
                xb = xb + delta
            try:
                loss = classify_loss(model, xb, yb)
                grads = backward(loss, model.params)
            except dc.NonFiniteError as exc:
                raise TrainingDivergedError(
                    f"train_victim: non-finite loss in epoch {epoch}") from exc
            loss_sum += float(loss.data) * idx.size
            model = model.with_params(
                [p.data - cfg.learning_rate * g for p, g in zip(model.params, grads)])
        train_acc = evaluate(model, dataset)
        test_acc = evaluate(model, test_dataset) if test_dataset is not None else math.nan
        history.append((epoch, loss_sum / dataset.n, train_acc, test_acc))
    return model, history


def evaluate(model: ClassifierModel, dataset: LabeledDataset) -> float:
    """Fraction of argmax-correct predictions; ties go to the lowest class."""
    if model.spec.output_dim != dataset.n_classes:
        raise dc.ShapeError(
            f"evaluate: model has {model.spec.output_dim} outputs, "
            f"dataset has {dataset.n_classes} classes")
    logits = model.logits(dataset.features.astype(model.dtype, copy=False)).data
    preds = np.argmax(logits, axis=1)
    return float(np.mean(preds == dataset.labels))


def mix_partial(clean: LabeledDataset, poisoned: PoisonedDataset, fraction: float,
                seed: int) -> LabeledDataset:
    """Apply the poison noise to a uniformly chosen round(fraction * n) rows.

    `poisoned` must have been crafted for exactly this base dataset
    (checked by content hash).
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("mix_partial: fraction must lie in [0, 1]")
    if dataset_hash(clean) != dataset_hash(poisoned.base):
        raise ValueError("mix_partial: poison was crafted for a different base dataset")
    k = round(fraction * clean.n)
    rng = np.random.default_rng(seed)
    idx = rng.choice(clean.n, size=k, replace=False)
    feats = clean.features.copy()
    feats[idx] = feats[idx] + poisoned.noise[idx]
    return clean.with_features(feats, name=f"{clean.name}+mix{fraction:g}")


def write_victim_history(history: list[tuple[int, float, float, float]], path) -> None:
    """History CSV with columns epoch, train_loss, train_acc, test_acc."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "train_acc", "test_acc"])
        for epoch, train_loss, train_acc, test_acc in history:
            writer.writerow([epoch, repr(train_loss), repr(train_acc), repr(test_acc)])
