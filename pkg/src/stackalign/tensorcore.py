"""Numeric core: seeded random streams, parameter tensors, and small helpers.

Tensors are plain ``numpy.ndarray`` objects in float64. Every differentiable
layer in the package exposes a ``*_forward`` returning ``(output, cache)`` and
a ``*_backward`` that consumes the cache, accumulates parameter gradients into
``ParamTensor.grad`` and returns the gradient with respect to its input.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when array shapes do not agree."""


class ParameterError(ValueError):
    """Raised for invalid hyper-parameters or distribution parameters."""


class ContractError(RuntimeError):
    """Raised when a call violates a documented precondition."""


class Rng:
    """Counter-free, split-able random stream.

    ``Rng(seed, stream)`` always yields the same sequence of draws; distinct
    stream ids give statistically independent sequences.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed)
        self.stream = int(stream)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream,))
        self.gen = np.random.Generator(np.random.PCG64(ss))

    def child(self, stream: int) -> "Rng":
        # Independent of how many draws the parent has made.
        return Rng(self.seed, self.stream * 1_000_003 + int(stream) + 1)

    def __repr__(self):
        return f"Rng(seed={self.seed}, stream={self.stream})"


def sample_uniform(rng: Rng, shape, low=0.0, high=1.0) -> np.ndarray:
    if not high > low:
        raise ParameterError(f"uniform requires high > low, got [{low}, {high})")
    return rng.gen.uniform(low, high, size=shape).astype(DTYPE)


def sample_gaussian(rng: Rng, shape, mean=0.0, std=1.0) -> np.ndarray:
    if std < 0:
        raise ParameterError(f"gaussian std must be nonnegative, got {std}")
    return (mean + std * rng.gen.standard_normal(size=shape)).astype(DTYPE)


def sample_categorical(rng: Rng, shape, probs: Sequence[float]) -> np.ndarray:
    p = np.asarray(probs, dtype=DTYPE)
    if p.ndim != 1 or p.size == 0 or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise ParameterError(f"invalid probability vector {list(p)}")
    # inverse-CDF keeps zero-probability categories unreachable
    cdf = np.cumsum(p)
    cdf[-1] = 1.0
    u = rng.gen.random(size=shape)
    idx = np.searchsorted(cdf, u, side="right")
    return np.minimum(idx, p.size - 1)


@dataclass(eq=False)
class ParamTensor:
    name: str
    value: np.ndarray
    lars_enabled: bool = False
    grad: np.ndarray = field(default=None, repr=False)
    adam_m: np.ndarray = field(default=None, repr=False)
    adam_v: np.ndarray = field(default=None, repr=False)
    # bumped on every in-place update; caches use it to detect staleness
    version: int = 0

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=DTYPE)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.adam_m is None:
            self.adam_m = np.zeros_like(self.value)
        if self.adam_v is None:
            self.adam_v = np.zeros_like(self.value)
        for buf in ("grad", "adam_m", "adam_v"):
            if getattr(self, buf).shape != self.value.shape:
                raise ShapeError(f"{self.name}.{buf} shape {getattr(self, buf).shape} "
                                 f"!= value shape {self.value.shape}")

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0.0


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != (b.shape[0] if b.ndim == 1 else b.shape[-2]):
        raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}")
    return a @ b


def global_norm(params: Iterable[ParamTensor], field: str = "grad") -> float:
    if field not in ("value", "grad"):
        raise ParameterError(f"field must be 'value' or 'grad', got {field!r}")
    total = 0.0
    for p in params:
        arr = getattr(p, field)
        total += float(np.dot(arr.ravel(), arr.ravel()))
    return float(np.sqrt(total))


def check_names_unique(params: Iterable[ParamTensor]):
    seen = set()
    for p in params:
        if p.name in seen:
            raise ContractError(f"duplicate parameter name {p.name!r}")
        seen.add(p.name)
