"""Parametric models: the surrogate/victim classifier and the
class-conditional score network, with deterministic initialization and
binary serialization.

Both are plain fully-connected nets over `diffcore` tensors. The score
network receives its class label as a one-hot block concatenated to the
input, so its input width is data_dim + n_classes and its output lives
in data space.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

MODEL_MAGIC = b"CWMD"
MODEL_VERSION = 1
_KIND_CLASSIFIER = 0
_KIND_SCORE = 1

_ACTIVATIONS = {"relu": dc.relu, "tanh": dc.tanh}


class ModelFormatError(Exception):
    """Model file is malformed, truncated, or of the wrong kind/version."""


@dataclass(frozen=True)
class ArchSpec:
    """Fully-connected architecture: input -> hidden... -> output."""

    input_dim: int
    hidden: tuple[int, ...]
    output_dim: int
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.input_dim < 1 or self.output_dim < 1:
            raise ValueError("ArchSpec: dims must be positive")
        if any(h < 1 for h in self.hidden):
            raise ValueError("ArchSpec: hidden sizes must be positive")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"ArchSpec: unknown activation {self.activation!r}")

    def layer_dims(self) -> list[tuple[int, int]]:
        dims = [self.input_dim, *self.hidden, self.output_dim]
        return list(zip(dims[:-1], dims[1:]))


def init_params(spec: ArchSpec, seed: int, dtype=np.float32) -> list[Tensor]:
    """Scaled-uniform weights (bound sqrt(6/(fan_in+fan_out))), zero biases.

    Deterministic: the same (spec, seed, dtype) always gives bitwise-identical
    parameters.
    """
    rng = np.random.default_rng(seed)
    params: list[Tensor] = []
    for fan_in, fan_out in spec.layer_dims():
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)
        b = np.zeros(fan_out, dtype=dtype)
        params.append(Tensor(w, requires_grad=True))
        params.append(Tensor(b, requires_grad=True))
    return params


def _mlp_apply(spec: ArchSpec, params: list[Tensor], x: Tensor) -> Tensor:
    act = _ACTIVATIONS[spec.activation]
    n_layers = len(spec.hidden) + 1
    h = x
    for i in range(n_layers):
        h = dc.affine(h, params[2 * i], params[2 * i + 1])
        if i < n_layers - 1:
            h = act(h)
    return h


def _as_input_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


class ClassifierModel:
    """MLP mapping a feature batch (n, d) to K logits per example."""

    def __init__(self, spec: ArchSpec, params: list[Tensor]):
        self.spec = spec
        self.params = params

    @property
    def dtype(self):
        return self.params[0].dtype

    def logits(self, x) -> Tensor:
        xt = _as_input_tensor(x, self.dtype)
        if xt.data.ndim != 2 or xt.shape[1] != self.spec.input_dim:
            raise dc.ShapeError(
                f"classifier: expected (n, {self.spec.input_dim}) input, got {xt.shape}")
        return _mlp_apply(self.spec, self.params, xt)

    def copy(self) -> "ClassifierModel":
        return ClassifierModel(
            self.spec, [Tensor(p.data.copy(), requires_grad=True) for p in self.params])

    def with_params(self, arrays: list[np.ndarray]) -> "ClassifierModel":
        return ClassifierModel(
            self.spec, [Tensor(a, requires_grad=True) for a in arrays])


class ScoreModel:
    """Conditional score estimator: (x, y) -> vector in data space.

    `sigma` is the Gaussian smoothing scale the model was (or will be)
    trained at; it travels with the model so downstream stages cannot
    mix scales.
    """

    def __init__(self, spec: ArchSpec, sigma: float, params: list[Tensor]):
        if sigma <= 0:
            raise ValueError("ScoreModel: sigma must be positive")
        if spec.input_dim <= spec.output_dim:
            raise ValueError(
                "ScoreModel: input_dim must be data_dim + n_classes > data_dim")
        self.spec = spec
        self.sigma = float(sigma)
        self.params = params

    @property
    def dtype(self):
        return self.params[0].dtype

    @property
    def data_dim(self) -> int:
        return self.spec.output_dim

    @property
    def n_classes(self) -> int:
        return self.spec.input_dim - self.spec.output_dim

    def score(self, x, y) -> Tensor:
        xt = _as_input_tensor(x, self.dtype)
        if xt.data.ndim != 2 or xt.shape[1] != self.data_dim:
            raise dc.ShapeError(
                f"score: expected (n, {self.data_dim}) input, got {xt.shape}")
        y = np.asarray(y)
        if y.ndim != 1 or y.shape[0] != xt.shape[0]:
            raise dc.ShapeError(
                f"score: labels shape {y.shape} does not match input {xt.shape}")
        if y.size and (y.min() < 0 or y.max() >= self.n_classes):
            raise ValueError(f"score: label outside [0, {self.n_classes})")
        onehot = np.zeros((xt.shape[0], self.n_classes), dtype=self.dtype)
        onehot[np.arange(xt.shape[0]), y] = 1.0
        inp = dc.concat([xt, Tensor(onehot)], axis=1)
        return _mlp_apply(self.spec, self.params, inp)

    def copy(self) -> "ScoreModel":
        return ScoreModel(
            self.spec, self.sigma,
            [Tensor(p.data.copy(), requires_grad=True) for p in self.params])

    def with_params(self, arrays: list[np.ndarray]) -> "ScoreModel":
        return ScoreModel(
            self.spec, self.sigma, [Tensor(a, requires_grad=True) for a in arrays])


def init_classifier(spec: ArchSpec, seed: int, dtype=np.float32) -> ClassifierModel:
    return ClassifierModel(spec, init_params(spec, seed, dtype))


def init_score_model(spec: ArchSpec, sigma: float, seed: int,
                     dtype=np.float32) -> ScoreModel:
    return ScoreModel(spec, sigma, init_params(spec, seed, dtype))


def default_classifier_spec(data_dim: int, n_classes: int) -> ArchSpec:
    return ArchSpec(data_dim, (64, 64), n_classes, activation="relu")


def default_score_spec(data_dim: int, n_classes: int) -> ArchSpec:
    # tanh keeps the estimated score field smooth
    return ArchSpec(data_dim + n_classes, (128, 128), data_dim, activation="tanh")


def classify_loss(model: ClassifierModel, x, y) -> Tensor:
    """Mean softmax cross-entropy over the batch, as a differentiable scalar."""
    logits = model.logits(x)
    return dc.tmean(dc.cross_entropy_with_logits(logits, np.asarray(y)))


def score_eval(model: ScoreModel, x, y) -> np.ndarray:
    """Score network forward pass as a plain array (no gradient tape kept)."""
    return model.score(x, y).data


# -- serialization ------------------------------------------------------------
#
# Layout: magic "CWMD", u32 version, u8 kind (0=classifier, 1=score),
# u32 JSON header length, JSON header, little-endian parameter payload
# (per layer: W row-major, then b).

def _header_dict(model) -> dict:
    spec = model.spec
    head = {
        "input_dim": spec.input_dim,
        "hidden": list(spec.hidden),
        "output_dim": spec.output_dim,
        "activation": spec.activation,
        "dtype": str(np.dtype(model.dtype)),
    }
    if isinstance(model, ScoreModel):
        head["sigma"] = model.sigma
    return head


def save_model(model, path) -> None:
    kind = _KIND_SCORE if isinstance(model, ScoreModel) else _KIND_CLASSIFIER
    head = json.dumps(_header_dict(model), sort_keys=True).encode()
    le = "<f4" if np.dtype(model.dtype) == np.float32 else "<f8"
    payload = b"".join(p.data.astype(le, copy=False).tobytes() for p in model.params)
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<IBI", MODEL_VERSION, kind, len(head)))
        fh.write(head)
        fh.write(payload)


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise ModelFormatError(f"truncated model file while reading {what}")
    return buf


def _load_any(path):
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != MODEL_MAGIC:
            raise ModelFormatError(f"{path}: bad magic, not a model file")
        version, kind, head_len = struct.unpack("<IBI", _read_exact(fh, 9, "header"))
        if version != MODEL_VERSION:
            raise ModelFormatError(
                f"{path}: unsupported model format version {version}")
        try:
            head = json.loads(_read_exact(fh, head_len, "spec block"))
        except json.JSONDecodeError as exc:
            raise ModelFormatError(f"{path}: corrupt spec block: {exc}") from None
        try:
            spec = ArchSpec(head["input_dim"], tuple(head["hidden"]),
                            head["output_dim"], head["activation"])
            dtype = np.dtype(head["dtype"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ModelFormatError(f"{path}: invalid spec block: {exc}") from None
        if dtype not in (np.float32, np.float64):
            raise ModelFormatError(f"{path}: unsupported parameter dtype {dtype}")
        le = "<f4" if dtype == np.float32 else "<f8"
        params = []
        for fan_in, fan_out in spec.layer_dims():
            wb = _read_exact(fh, fan_in * fan_out * dtype.itemsize, "weights")
            bb = _read_exact(fh, fan_out * dtype.itemsize, "biases")
            w = np.frombuffer(wb, dtype=le).astype(dtype).reshape(fan_in, fan_out)
            b = np.frombuffer(bb, dtype=le).astype(dtype)
            params.append(Tensor(w, requires_grad=True))
            params.append(Tensor(b, requires_grad=True))
        if fh.read(1):
            raise ModelFormatError(f"{path}: trailing bytes after parameter payload")
    if kind == _KIND_SCORE:
        if "sigma" not in head:
            raise ModelFormatError(f"{path}: score model missing sigma")
        return ScoreModel(spec, head["sigma"], params)
    if kind == _KIND_CLASSIFIER:
        return ClassifierModel(spec, params)
    raise ModelFormatError(f"{path}: unknown model kind {kind}")


def load_model(path):
    """Load whichever model kind the file holds."""
    return _load_any(path)


def load_classifier(path) -> ClassifierModel:
    model = _load_any(path)
    if not isinstance(model, ClassifierModel):
        raise ModelFormatError(f"{path}: holds a score model, not a classifier")
    return model


def load_score_model(path) -> ScoreModel:
    model = _load_any(path)
    if not isinstance(model, ScoreModel):
        raise ModelFormatError(f"{path}: holds a classifier, not a score model")
    return model
