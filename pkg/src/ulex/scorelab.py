"""Denoising score matching and stochastic-gradient Langevin sampling.

The score network is trained to predict -(x_noisy - x) / sigma^2 on
Gaussian-perturbed samples, which estimates the gradient of the
sigma-smoothed log class-conditional density. The SGLD sampler then
walks along (or against) a score field with injected Gaussian noise.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor, backward
from .datasets import LabeledDataset
from .models import ScoreModel


class TrainingDivergedError(RuntimeError):
    """A training loop produced a non-finite loss."""


class SGLDDivergenceError(RuntimeError):
    """An SGLD chain left the configured bounding box."""


@dataclass(frozen=True)
class DSMConfig:
    sigma: float = 0.5
    epochs: int = 60
    batch_size: int = 128
    learning_rate: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.sigma <= 0 or self.epochs < 0 or self.batch_size < 1 \
                or self.learning_rate <= 0:
            raise ValueError("DSMConfig: sigma, batch_size, learning_rate must be "
                             "positive and epochs non-negative")


@dataclass(frozen=True)
class SGLDConfig:
    alpha: float
    steps: int
    direction: str = "toward"
    seed: int = 0
    divergence_bound: float = 1e6

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("SGLDConfig: alpha must be positive")
        if self.steps < 0:
            raise ValueError("SGLDConfig: steps must be non-negative")
        if self.direction not in ("toward", "away"):
            raise ValueError("SGLDConfig: direction must be 'toward' or 'away'")


def dsm_loss(model: ScoreModel, x, y, eps) -> Tensor:
    """Denoising score-matching objective on one batch.

    With x_noisy = x + sigma * eps the target score is -(x_noisy - x) / sigma^2,
    and the loss is the batch mean of 0.5 * || s(x_noisy, y) + (x_noisy - x)/sigma^2 ||^2.
    The noise is passed in explicitly so the loss is a deterministic function
    of its arguments.
    """
    x = np.asarray(x, dtype=model.dtype)
    eps = np.asarray(eps, dtype=model.dtype)
    if eps.shape != x.shape:
        raise dc.ShapeError(f"dsm_loss: eps shape {eps.shape} != x shape {x.shape}")
    sigma = model.sigma
    x_noisy = x + sigma * eps
    target = (x_noisy - x) / (sigma * sigma)
    resid = dc.add(model.score(x_noisy, y), Tensor(target))
    n = x.shape[0]
    return dc.tsum(dc.mul(resid, resid)) * (0.5 / n)


def train_score(model: ScoreModel, dataset: LabeledDataset,
                cfg: DSMConfig) -> tuple[ScoreModel, list[tuple[int, float]]]:
    """Plain fixed-rate gradient descent on minibatched `dsm_loss`.

    Fresh noise is drawn per batch from the seeded generator; identical
    (model, dataset, cfg) give an identical loss history. The input model is
    untouched; a trained copy is returned.
    """
    if model.sigma != cfg.sigma:
        raise ValueError(
            f"train_score: model sigma {model.sigma} != config sigma {cfg.sigma}")
    if model.n_classes != dataset.n_classes or model.data_dim != dataset.dim:
        raise ValueError("train_score: model dims do not match dataset")
    model = model.copy()
    rng = np.random.default_rng(cfg.seed)
    feats = dataset.features.astype(model.dtype, copy=False)
    history: list[tuple[int, float]] = []
    step = 0
    for epoch in range(cfg.epochs):
        perm = rng.permutation(dataset.n)
        for start in range(0, dataset.n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            eps = rng.standard_normal((idx.size, dataset.dim)).astype(model.dtype)
            step += 1
            try:
                loss = dsm_loss(model, feats[idx], dataset.labels[idx], eps)
                grads = backward(loss, model.params)
            except dc.NonFiniteError as exc:
                raise TrainingDivergedError(
                    f"train_score: non-finite loss at step {step}: {exc}") from exc
            model = model.with_params(
                [p.data - cfg.learning_rate * g for p, g in zip(model.params, grads)])
            history.append((step, float(loss.data)))
    return model, history


def sgld_run(score, x0, y, cfg: SGLDConfig) -> np.ndarray:
    """Iterate x <- x +/- alpha * score(x, y) + sqrt(2 alpha) * noise.

    `score` is either a ScoreModel or any callable (x, y) -> array of the
    same shape as x. `x0` may be one point (d,) or a batch of chains (n, d);
    the returned trajectory holds all steps+1 states along axis 0.
    """
    if isinstance(score, ScoreModel):
        def score_fn(x, y, _model=score):
            return _model.score(x, y).data
    else:
        score_fn = score

    x = np.asarray(x0, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x).copy()
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if y.shape[0] != x.shape[0]:
        raise ValueError("sgld_run: one label per chain")
    sign = 1.0 if cfg.direction == "toward" else -1.0
    rng = np.random.default_rng(cfg.seed)
    noise_coef = np.sqrt(2.0 * cfg.alpha)
    traj = np.empty((cfg.steps + 1,) + x.shape, dtype=np.float64)
    traj[0] = x
    for t in range(1, cfg.steps + 1):
        s = np.asarray(score_fn(x, y), dtype=np.float64)
        if s.shape != x.shape:
            raise ValueError(
                f"sgld_run: score returned shape {s.shape}, expected {x.shape}")
        x = x + sign * cfg.alpha * s + noise_coef * rng.standard_normal(x.shape)
        peak = np.max(np.abs(x))
        if not np.isfinite(peak) or peak > cfg.divergence_bound:
            raise SGLDDivergenceError(
                f"sgld_run: |x| reached {peak:.3g} at step {t} "
                f"(bound {cfg.divergence_bound:.3g})")
        traj[t] = x
    return traj[:, 0, :] if single else traj


def write_loss_history(history: list[tuple[int, float]], path) -> None:
    """Loss history as CSV with columns step, loss."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss"])
        for step, loss in history:
            writer.writerow([step, repr(loss)])
