"""Sequence-wise batch normalization and layer normalization.

SBN normalizes each feature channel over every unpadded (batch, time) element;
LN normalizes each (batch, time) vector over its feature channels. Both carry a
per-channel affine ``gamma * x_hat + beta``. The denominator is
``sqrt(variance + eps)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensorcore import DTYPE, ContractError, ParamTensor, ShapeError


class DegenerateBatchError(ValueError):
    pass


@dataclass(eq=False)
class SbnState:
    gamma: ParamTensor
    beta: ParamTensor
    eps: float = 1e-5
    momentum: float = 0.1
    training: bool = True
    # ablation switch: normalize with batch statistics even in eval mode
    eval_batch_stats: bool = False
    running_mean: np.ndarray = None
    running_var: np.ndarray = None

    def __post_init__(self):
        p = self.gamma.value.shape[0]
        if self.beta.value.shape != (p,):
            raise ShapeError(f"gamma {self.gamma.shape} / beta {self.beta.shape} mismatch")
        if self.running_mean is None:
            self.running_mean = np.zeros(p, dtype=DTYPE)
        if self.running_var is None:
            self.running_var = np.ones(p, dtype=DTYPE)

    @classmethod
    def create(cls, name: str, size: int, **kw) -> "SbnState":
        return cls(ParamTensor(f"{name}.gamma", np.ones(size)),
                   ParamTensor(f"{name}.beta", np.zeros(size)), **kw)

    @property
    def size(self):
        return self.gamma.value.shape[0]

    def params(self):
        return [self.gamma, self.beta]


@dataclass(eq=False)
class LnState:
    gamma: ParamTensor
    beta: ParamTensor
    eps: float = 1e-5

    @classmethod
    def create(cls, name: str, size: int, eps: float = 1e-5) -> "LnState":
        return cls(ParamTensor(f"{name}.gamma", np.ones(size)),
                   ParamTensor(f"{name}.beta", np.zeros(size)), eps)

    @property
    def size(self):
        return self.gamma.value.shape[0]

    def params(self):
        return [self.gamma, self.beta]


def _full_mask(x):
    return np.ones(x.shape[:-1], dtype=bool)


def sbn_forward(state: SbnState, x: np.ndarray, mask: np.ndarray | None = None):
    """Normalize ``x`` of shape (B, T, P) with statistics over unpadded elements.

    Padded outputs are zero. Training mode updates the running statistics.
    """
    x = np.asarray(x, dtype=DTYPE)
    if x.shape[-1] != state.size:
        raise ShapeError(f"SBN expects {state.size} channels, got input shape {x.shape}")
    if mask is None:
        mask = _full_mask(x)
    m = mask.astype(DTYPE)[..., None]
    batch_stats = state.training or state.eval_batch_stats
    if batch_stats:
        count = float(mask.sum())
        if count < 2:
            raise DegenerateBatchError(f"SBN needs at least 2 unpadded elements, got {int(count)}")
        axes = tuple(range(x.ndim - 1))
        mu = (x * m).sum(axis=axes) / count
        centered = (x - mu) * m
        var = (centered * centered).sum(axis=axes) / count
        if state.training:
            state.running_mean = (1 - state.momentum) * state.running_mean + state.momentum * mu
            state.running_var = (1 - state.momentum) * state.running_var + state.momentum * var
    else:
        count = None
        mu, var = state.running_mean, state.running_var
    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = (x - mu) * inv_std * m
    y = (state.gamma.value * xhat + state.beta.value) * m
    cache = dict(state=state, xhat=xhat, inv_std=inv_std, m=m, count=count,
                 batch_stats=batch_stats, version=state.gamma.version)
    return y, cache


def sbn_backward(cache, dy: np.ndarray):
    """Return grad wrt input; accumulates into gamma.grad / beta.grad."""
    state = cache["state"]
    if cache["version"] != state.gamma.version or dy.shape != cache["xhat"].shape:
        raise ContractError("SBN cache does not match this gradient or parameters changed")
    m, xhat, inv_std = cache["m"], cache["xhat"], cache["inv_std"]
    dy = dy * m
    axes = tuple(range(dy.ndim - 1))
    state.gamma.grad += (dy * xhat).sum(axis=axes)
    state.beta.grad += dy.sum(axis=axes)
    dxhat = dy * state.gamma.value
    if not cache["batch_stats"]:
        return dxhat * inv_std
    n = cache["count"]
    mean_d = dxhat.sum(axis=axes) / n
    mean_dx = (dxhat * xhat).sum(axis=axes) / n
    return inv_std * (dxhat - mean_d - xhat * mean_dx) * m


def ln_forward(state: LnState, x: np.ndarray):
    """Normalize the trailing axis of ``x`` (any leading shape)."""
    x = np.asarray(x, dtype=DTYPE)
    p = x.shape[-1]
    if p != state.size:
        raise ShapeError(f"LN expects {state.size} channels, got input shape {x.shape}")
    if p < 2:
        raise DegenerateBatchError("layer norm needs at least 2 dimensions")
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = centered * inv_std
    y = state.gamma.value * xhat + state.beta.value
    return y, dict(state=state, xhat=xhat, inv_std=inv_std, version=state.gamma.version)


def ln_backward(cache, dy: np.ndarray):
    state = cache["state"]
    if cache["version"] != state.gamma.version or dy.shape != cache["xhat"].shape:
        raise ContractError("LN cache does not match this gradient or parameters changed")
    xhat, inv_std = cache["xhat"], cache["inv_std"]
    lead = tuple(range(dy.ndim - 1))
    state.gamma.grad += (dy * xhat).sum(axis=lead)
    state.beta.grad += dy.sum(axis=lead)
    dxhat = dy * state.gamma.value
    return inv_std * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                      - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))


def ln_lstm_forward(params, x, mask=None, h0=None, c0=None):
    """LSTM whose gate pre-activations and cell state are layer-normalized.

    ``params`` must carry LN states on every layer (see ``layers.LstmParams``).
    """
    from .layers import lstm_forward

    if not params.layer_norm:
        raise ContractError("ln_lstm_forward needs LstmParams built with layer_norm=True")
    return lstm_forward(params, x, mask, h0, c0)


def ln_lstm_backward(cache, dh, **kw):
    from .layers import lstm_backward

    return lstm_backward(cache, dh, **kw)
