"""Parameter vectors, the two-tower encoder, losses, distances and interpolation.

The encoder is a pair of MLP towers (inputs and class descriptors) meeting in a
shared embedding space.  Logits are temperature-scaled cosine similarities
between an input embedding and every descriptor embedding.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import prod

import numpy as np

from . import kernels
from .errors import (
    LayoutMismatchError,
    NonFiniteLossError,
    ShapeError,
    ZeroNormError,
)

Layout = tuple[tuple[str, tuple[int, ...]], ...]


class ParamVector:
    """Immutable flat float64 parameter array with a named layer layout."""

    __slots__ = ("values", "layout")

    def __init__(self, values, layout):
        layout = tuple((str(name), tuple(int(d) for d in shape)) for name, shape in layout)
        arr = np.array(values, dtype=np.float64, copy=True).reshape(-1)
        expected = sum(prod(shape) for _, shape in layout)
        if arr.size != expected:
            raise ShapeError(f"{arr.size} values for a layout of {expected} elements")
        if not np.isfinite(arr).all():
            raise FloatingPointError("parameter vector contains NaN or Inf")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)
        object.__setattr__(self, "layout", layout)

    def __setattr__(self, name, value):
        raise AttributeError("ParamVector is immutable")

    def __len__(self):
        return self.values.size

    def __eq__(self, other):
        if not isinstance(other, ParamVector):
            return NotImplemented
        return self.layout == other.layout and np.array_equal(self.values, other.values)

    __hash__ = None

    def __repr__(self):
        return f"ParamVector(n={self.values.size}, layers={len(self.layout)})"

    def with_values(self, values) -> ParamVector:
        return ParamVector(values, self.layout)

    def norm(self) -> float:
        return float(np.linalg.norm(self.values))

    def slices(self) -> dict[str, np.ndarray]:
        """Read-only views of each layer, reshaped to its declared shape."""
        out, offset = {}, 0
        for name, shape in self.layout:
            size = prod(shape)
            out[name] = self.values[offset:offset + size].reshape(shape)
            offset += size
        return out

    @classmethod
    def zeros(cls, layout) -> ParamVector:
        return cls(np.zeros(sum(prod(s) for _, s in layout)), layout)


def check_layouts(a: ParamVector, b: ParamVector) -> None:
    if a.layout != b.layout:
        raise LayoutMismatchError("parameter layouts differ")


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int
    descriptor_dim: int
    embed_dim: int
    hidden: tuple[int, ...] = (16,)
    activation: str = "relu"
    temperature: float = 10.0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        for name in ("input_dim", "descriptor_dim", "embed_dim"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be positive")
        if any(h < 1 for h in self.hidden):
            raise ValueError("hidden widths must be positive")
        if self.activation not in ("tanh", "relu"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")

    @property
    def input_dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden, self.embed_dim)

    @property
    def descriptor_dims(self) -> tuple[int, ...]:
        return (self.descriptor_dim, *self.hidden, self.embed_dim)

    def layout(self) -> Layout:
        entries = []
        for prefix, dims in (("input", self.input_dims), ("descriptor", self.descriptor_dims)):
            for l in range(len(dims) - 1):
                entries.append((f"{prefix}.W{l}", (dims[l + 1], dims[l])))
                entries.append((f"{prefix}.b{l}", (dims[l + 1],)))
        return tuple(entries)

    @property
    def n_params(self) -> int:
        return sum(prod(shape) for _, shape in self.layout())

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "descriptor_dim": self.descriptor_dim,
            "embed_dim": self.embed_dim,
            "hidden": list(self.hidden),
            "activation": self.activation,
            "temperature": self.temperature,
        }

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        return cls(
            input_dim=int(d["input_dim"]),
            descriptor_dim=int(d["descriptor_dim"]),
            embed_dim=int(d["embed_dim"]),
            hidden=tuple(d.get("hidden", (16,))),
            activation=d.get("activation", "relu"),
            temperature=float(d.get("temperature", 10.0)),
        )


@dataclass(frozen=True, eq=False)
class Batch:
    inputs: np.ndarray
    label_indices: np.ndarray
    descriptors: np.ndarray = field(repr=False)

    def __post_init__(self):
        x = np.ascontiguousarray(self.inputs, dtype=np.float64)
        y = np.ascontiguousarray(self.label_indices, dtype=np.int64).reshape(-1)
        d = np.ascontiguousarray(self.descriptors, dtype=np.float64)
        if x.ndim != 2 or d.ndim != 2:
            raise ShapeError("inputs and descriptors must be matrices")
        if x.shape[0] < 1 or d.shape[0] < 1:
            raise ShapeError("a batch needs at least one sample and one class")
        if y.shape[0] != x.shape[0]:
            raise ShapeError("one label per sample required")
        if y.min() < 0 or y.max() >= d.shape[0]:
            raise ShapeError("label index outside the descriptor rows")
        for a in (x, y, d):
            a.setflags(write=False)
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "label_indices", y)
        object.__setattr__(self, "descriptors", d)

    @property
    def n_samples(self) -> int:
        return self.inputs.shape[0]

    @property
    def n_classes(self) -> int:
        return self.descriptors.shape[0]


def _check_model(params: ParamVector, config: ModelConfig, batch: Batch | None = None) -> None:
    if params.layout != config.layout():
        raise ShapeError("parameter layout does not match the model configuration")
    if batch is not None:
        if batch.inputs.shape[1] != config.input_dim:
            raise ShapeError(f"inputs have {batch.inputs.shape[1]} columns, expected {config.input_dim}")
        if batch.descriptors.shape[1] != config.descriptor_dim:
            raise ShapeError(
                f"descriptors have {batch.descriptors.shape[1]} columns, expected {config.descriptor_dim}"
            )


def init_params(config: ModelConfig, rng: np.random.Generator) -> ParamVector:
    """Per-layer uniform draw in [-1/sqrt(fan_in), 1/sqrt(fan_in)], weights then bias."""
    chunks = []
    for name, shape in config.layout():
        fan_in = shape[1] if len(shape) == 2 else _bias_fan_in(config, name)
        bound = 1.0 / np.sqrt(fan_in)
        chunks.append(rng.uniform(-bound, bound, size=prod(shape)))
    return ParamVector(np.concatenate(chunks), config.layout())


def _bias_fan_in(config: ModelConfig, name: str) -> int:
    prefix, layer = name.split(".")
    dims = config.input_dims if prefix == "input" else config.descriptor_dims
    return dims[int(layer[1:])]


def _tower(params: ParamVector, config: ModelConfig, prefix: str, a: np.ndarray) -> np.ndarray:
    s = params.slices()
    dims = config.input_dims if prefix == "input" else config.descriptor_dims
    last = len(dims) - 2
    for l in range(len(dims) - 1):
        a = a @ s[f"{prefix}.W{l}"].T + s[f"{prefix}.b{l}"]
        if l < last:
            a = np.maximum(a, 0.0) if config.activation == "relu" else np.tanh(a)
    return a


def embed_inputs(params: ParamVector, config: ModelConfig, inputs: np.ndarray) -> np.ndarray:
    return _tower(params, config, "input", np.asarray(inputs, dtype=np.float64))


def embed_descriptors(params: ParamVector, config: ModelConfig, descriptors: np.ndarray) -> np.ndarray:
    return _tower(params, config, "descriptor", np.asarray(descriptors, dtype=np.float64))


def _unit_rows(m: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(m, axis=1)
    if np.any(n == 0.0):
        raise ZeroNormError("zero-norm embedding")
    return m / n[:, None]


def forward_logits(params: ParamVector, config: ModelConfig, batch: Batch) -> np.ndarray:
    """Temperature-scaled cosine similarity, samples x classes."""
    _check_model(params, config, batch)
    u = _unit_rows(embed_inputs(params, config, batch.inputs))
    w = _unit_rows(embed_descriptors(params, config, batch.descriptors))
    return config.temperature * (u @ w.T)


def loss_and_grad(params: ParamVector, config: ModelConfig, batch: Batch) -> tuple[float, ParamVector]:
    """Mean softmax cross-entropy over the logits and its exact gradient."""
    _check_model(params, config, batch)
    try:
        loss, grad, bad = kernels.loss_and_grad(
            params.values,
            np.asarray(config.input_dims, dtype=np.int64),
            np.asarray(config.descriptor_dims, dtype=np.int64),
            config.activation == "relu",
            float(config.temperature),
            batch.inputs,
            batch.label_indices,
            batch.descriptors,
        )
    except ZeroDivisionError as exc:
        raise ZeroNormError(str(exc)) from None
    if bad >= 0:
        raise NonFiniteLossError(bad)
    if not np.isfinite(grad).all():
        raise NonFiniteLossError(-1, "non-finite gradient")
    return loss, ParamVector(grad, params.layout)


def sgd_step(params: ParamVector, grad: ParamVector, lr: float) -> ParamVector:
    check_layouts(params, grad)
    return ParamVector(params.values - lr * grad.values, params.layout)


def cosine_distance(a: ParamVector, b: ParamVector) -> float:
    check_layouts(a, b)
    return _cosine_distance(a.values, b.values)


def _cosine_distance(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ZeroNormError("cosine distance undefined for a zero vector")
    if np.array_equal(a, b):
        return 0.0
    d = 1.0 - float(a @ b) / (na * nb)
    return min(max(d, 0.0), 2.0)


def cosine_distance_grads(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of ``1 - cos(a, b)`` with respect to ``a`` and ``b``."""
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ZeroNormError("cosine distance undefined for a zero vector")
    if np.array_equal(a, b):
        z = np.zeros_like(a)
        return z, z.copy()
    ah, bh = a / na, b / nb
    c = float(ah @ bh)
    return -(bh - c * ah) / na, -(ah - c * bh) / nb


def euclidean_distance(a: ParamVector, b: ParamVector) -> float:
    check_layouts(a, b)
    return float(np.linalg.norm(a.values - b.values))


def interpolate(a: ParamVector, b: ParamVector, r: float) -> ParamVector:
    if not 0.0 <= r <= 1.0:
        raise ValueError(f"interpolation coefficient {r} outside [0, 1]")
    check_layouts(a, b)
    if r == 0.0:
        return a
    if r == 1.0:
        return b
    return ParamVector((1.0 - r) * a.values + r * b.values, a.layout)
