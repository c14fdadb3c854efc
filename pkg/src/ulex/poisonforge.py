"""Crafting of bounded unlearnable noise and training of its generator.

Stage one perturbs each example to jointly shrink the surrogate's
classification loss and the norm of the estimated conditional score
(driving same-class points toward the modes of their class density).
Stage two mounts a loss-maximizing attack on the partially poisoned
batch so the surrogate is trained adversarially and the final noise
survives adversarially trained victims.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor, backward
from .datasets import LabeledDataset, dataset_hash
from .models import ClassifierModel, ScoreModel, classify_loss, score_eval
from .scorelab import TrainingDivergedError

POISON_MAGIC = b"ULPN"
POISON_VERSION = 1


class PoisonFormatError(Exception):
    """Poison file is malformed, truncated, or paired with the wrong base."""


@dataclass(frozen=True)
class PerturbationBudget:
    """L-infinity radii and PGD step schedule for both crafting stages.

    Radii: rho_u bounds the defensive (unlearnable) noise, rho_a the
    adversarial noise used while training the generator. Step sizes default
    to radius/5 with k_u = k_a = 10 steps.
    """

    rho_u: float
    rho_a: float = 0.0
    alpha_u: float | None = None
    alpha_s: float | None = None
    alpha_a: float | None = None
    k_u: int = 10
    k_a: int = 10
    norm: str = "linf"

    def __post_init__(self):
        if self.norm != "linf":
            raise ValueError("PerturbationBudget: only the L-infinity norm is supported")
        if self.rho_u < 0 or self.rho_a < 0:
            raise ValueError("PerturbationBudget: radii must be non-negative")
        if self.k_u < 0 or self.k_a < 0:
            raise ValueError("PerturbationBudget: step counts must be non-negative")
        for field, default in (("alpha_u", self.rho_u / 5.0),
                               ("alpha_s", self.rho_u / 5.0),
                               ("alpha_a", self.rho_a / 5.0)):
            value = getattr(self, field)
            if value is None:
                object.__setattr__(self, field, default)
            elif value < 0:
                raise ValueError(f"PerturbationBudget: {field} must be non-negative")


@dataclass(frozen=True)
class GeneratorTrainConfig:
    iterations: int
    learning_rate: float
    batch_size: int = 128
    seed: int = 0
    delta_init: str = "uniform"

    def __post_init__(self):
        if self.iterations < 0 or self.learning_rate <= 0 or self.batch_size < 1:
            raise ValueError("GeneratorTrainConfig: iterations >= 0, learning_rate > 0, "
                             "batch_size >= 1 required")
        if self.delta_init not in ("uniform", "zero"):
            raise ValueError("GeneratorTrainConfig: delta_init must be 'uniform' or 'zero'")


def project_linf(delta: np.ndarray, rho: float) -> np.ndarray:
    """Elementwise clamp onto the L-infinity ball of radius rho; idempotent."""
    if rho < 0:
        raise ValueError("project_linf: rho must be non-negative")
    return np.clip(delta, -rho, rho)


def _assert_in_ball(delta: np.ndarray, rho: float, where: str) -> None:
    # 32-bit slack covers rho values that round up in float32
    tol = 1e-7 if delta.dtype == np.float32 else 0.0
    peak = float(np.max(np.abs(delta))) if delta.size else 0.0
    if peak > rho + tol:
        raise RuntimeError(f"{where}: |delta| = {peak} exceeds budget {rho}")


def craft_stage_one(surrogate: ClassifierModel, score_model: ScoreModel | None,
                    x, y, budget: PerturbationBudget, rng: np.random.Generator,
                    init: str = "uniform") -> np.ndarray:
    """Per-example defensive noise: k_u signed-gradient steps that descend
    both the classification loss and the mean per-example score norm.

    With alpha_s = 0 the score term is skipped entirely and this reduces to
    plain error-minimizing noise; score_model may then be None.
    """
    x = np.asarray(x, dtype=surrogate.dtype)
    y = np.asarray(y)
    if score_model is None and budget.alpha_s != 0.0:
        raise ValueError("craft_stage_one: alpha_s > 0 requires a score model")
    if init == "uniform":
        delta = rng.uniform(-budget.rho_u, budget.rho_u, size=x.shape).astype(x.dtype)
    elif init == "zero":
        delta = np.zeros_like(x)
    else:
        raise ValueError(f"craft_stage_one: unknown init {init!r}")
    delta = project_linf(delta, budget.rho_u)
    for _ in range(budget.k_u):
        dt = Tensor(delta, requires_grad=True)
        x_poisoned = Tensor(x) + dt
        loss = classify_loss(surrogate, x_poisoned, y)
        (g,) = backward(loss, [dt])
        stepped = delta - budget.alpha_u * np.sign(g)
        if budget.alpha_s != 0.0:
            snorm = dc.tmean(dc.l2norm(score_model.score(x_poisoned, y), axis=1))
            (s,) = backward(snorm, [dt])
            stepped = stepped - budget.alpha_s * np.sign(s)
        delta = project_linf(stepped, budget.rho_u)
        _assert_in_ball(delta, budget.rho_u, "craft_stage_one")
    return delta


def craft_stage_two(surrogate: ClassifierModel, x_poisoned, y,
                    budget: PerturbationBudget,
                    rng: np.random.Generator | None = None) -> np.ndarray:
    """Loss-maximizing noise on the poisoned batch: k_a signed ascent steps
    from a zero start, projected to the rho_a ball.

    `rng` is accepted for interface symmetry; the zero start consumes no
    randomness.
    """
    x_poisoned = np.asarray(x_poisoned, dtype=surrogate.dtype)
    y = np.asarray(y)
    delta = np.zeros_like(x_poisoned)
    for _ in range(budget.k_a):
        dt = Tensor(delta, requires_grad=True)
        loss = classify_loss(surrogate, Tensor(x_poisoned) + dt, y)
        (g,) = backward(loss, [dt])
        delta = project_linf(delta + budget.alpha_a * np.sign(g), budget.rho_a)
        _assert_in_ball(delta, budget.rho_a, "craft_stage_two")
    return delta


def train_generator(surrogate: ClassifierModel, score_model: ScoreModel | None,
                    dataset: LabeledDataset, budget: PerturbationBudget,
                    cfg: GeneratorTrainConfig,
                    hook: Callable | None = None,
                    ) -> tuple[ClassifierModel, list[tuple[int, float, float]]]:
    """Bi-level training of the noise generator.

    Each iteration samples a minibatch, crafts stage-one noise, crafts
    stage-two adversarial noise on top, and takes one gradient step of the
    surrogate on the doubly perturbed batch. The score model is read-only
    throughout. History rows are (iteration, loss, mean_score_norm).

    Randomness protocol (all from one generator seeded by cfg.seed, in
    order per iteration): minibatch indices via choice without replacement,
    then the stage-one init draw.
    """
    model = surrogate.copy()
    rng = np.random.default_rng(cfg.seed)
    feats = dataset.features.astype(model.dtype, copy=False)
    history: list[tuple[int, float, float]] = []
    for iteration in range(1, cfg.iterations + 1):
        idx = rng.choice(dataset.n, size=min(cfg.batch_size, dataset.n), replace=False)
        xb, yb = feats[idx], dataset.labels[idx]
        try:
            delta_u = craft_stage_one(model, score_model, xb, yb, budget, rng,
                                      init=cfg.delta_init)
            delta_a = craft_stage_two(model, xb + delta_u, yb, budget)
            loss = classify_loss(model, Tensor(xb + delta_u + delta_a), yb)
            grads = backward(loss, model.params)
        except dc.NonFiniteError as exc:
            raise TrainingDivergedError(
                f"train_generator: non-finite loss at iteration {iteration}") from exc
        if score_model is not None:
            norms = np.linalg.norm(score_eval(score_model, xb + delta_u, yb), axis=1)
            mean_score_norm = float(np.mean(norms))
        else:
            mean_score_norm = 0.0
        loss_value = float(loss.data)
        model = model.with_params(
            [p.data - cfg.learning_rate * g for p, g in zip(model.params, grads)])
        history.append((iteration, loss_value, mean_score_norm))
        if hook is not None:
            hook(iteration, delta_u, delta_a, loss_value)
    return model, history


@dataclass(frozen=True)
class PoisonedDataset:
    """A base dataset plus per-example noise within the rho_u ball."""

    base: LabeledDataset
    noise: np.ndarray
    budget: PerturbationBudget

    def __post_init__(self):
        noise = np.asarray(self.noise)
        object.__setattr__(self, "noise", noise)
        if noise.shape != self.base.features.shape:
            raise ValueError(
                f"noise shape {noise.shape} != features {self.base.features.shape}")
        if not np.all(np.isfinite(noise)):
            raise ValueError("noise contains non-finite values")
        _assert_in_ball(noise, self.budget.rho_u, "PoisonedDataset")

    @property
    def poisoned_features(self) -> np.ndarray:
        return self.base.features + self.noise

    def poisoned(self, name: str | None = None) -> LabeledDataset:
        return self.base.with_features(
            self.poisoned_features,
            name=f"{self.base.name}+poison" if name is None else name)


def emit_poison(surrogate: ClassifierModel, score_model: ScoreModel | None,
                dataset: LabeledDataset, budget: PerturbationBudget, seed: int,
                batch_size: int = 512, init: str = "uniform") -> PoisonedDataset:
    """Final stage-one pass over every example with the trained, frozen
    generator; noise is stored separately from the base features.

    Chunking does not change the result: the signed per-example updates are
    independent across examples.
    """
    rng = np.random.default_rng(seed)
    feats = dataset.features.astype(surrogate.dtype, copy=False)
    noise = np.empty_like(feats)
    for start in range(0, dataset.n, batch_size):
        stop = min(start + batch_size, dataset.n)
        noise[start:stop] = craft_stage_one(
            surrogate, score_model, feats[start:stop], dataset.labels[start:stop],
            budget, rng, init=init)
    return PoisonedDataset(dataset, noise, budget)


def write_generator_history(history: list[tuple[int, float, float]], path) -> None:
    """History CSV with columns iteration, loss, mean_score_norm."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "loss", "mean_score_norm"])
        for iteration, loss, msn in history:
            writer.writerow([iteration, repr(loss), repr(msn)])


# -- poison file I/O ----------------------------------------------------------
#
# Layout: magic "ULPN", u32 version, budget block (rho_u, rho_a, alpha_u,
# alpha_s, alpha_a as f32; k_u, k_a as u32), 32-byte sha256 of the base
# dataset, u64 n, u32 d, f32 noise payload.

def save_poison(poison: PoisonedDataset, path) -> None:
    b = poison.budget
    with open(path, "wb") as fh:
        fh.write(POISON_MAGIC)
        fh.write(struct.pack("<I", POISON_VERSION))
        fh.write(struct.pack("<5f2I", b.rho_u, b.rho_a, b.alpha_u, b.alpha_s,
                             b.alpha_a, b.k_u, b.k_a))
        fh.write(dataset_hash(poison.base))
        fh.write(struct.pack("<QI", poison.base.n, poison.base.dim))
        fh.write(poison.noise.astype("<f4", copy=False).tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise PoisonFormatError(f"truncated poison file while reading {what}")
    return buf


def load_poison(path, base: LabeledDataset) -> PoisonedDataset:
    """Load noise and re-attach it to `base`; the stored content hash must
    match, so noise cannot be paired with the wrong dataset."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != POISON_MAGIC:
            raise PoisonFormatError(f"{path}: bad magic, not a poison file")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != POISON_VERSION:
            raise PoisonFormatError(f"{path}: unsupported poison version {version}")
        rho_u, rho_a, a_u, a_s, a_a, k_u, k_a = struct.unpack(
            "<5f2I", _read_exact(fh, 28, "budget"))
        stored_hash = _read_exact(fh, 32, "base hash")
        n, d = struct.unpack("<QI", _read_exact(fh, 12, "dims"))
        noise = np.frombuffer(_read_exact(fh, n * d * 4, "noise"), dtype="<f4")
        if fh.read(1):
            raise PoisonFormatError(f"{path}: trailing bytes after noise payload")
    if stored_hash != dataset_hash(base):
        raise PoisonFormatError(
            f"{path}: noise was crafted for a different base dataset")
    if (n, d) != (base.n, base.dim):
        raise PoisonFormatError(f"{path}: dims {(n, d)} do not match base")
    budget = PerturbationBudget(
        rho_u=float(rho_u), rho_a=float(rho_a), alpha_u=float(a_u),
        alpha_s=float(a_s), alpha_a=float(a_a), k_u=int(k_u), k_a=int(k_a))
    return PoisonedDataset(base, noise.astype(np.float32).reshape(n, d), budget)
