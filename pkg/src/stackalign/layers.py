"""Fully connected layers and (optionally layer-normalized) LSTMs with analytic gradients.

Gate blocks are stored in the order [input, forget, candidate, output] along
the first axis of ``Wx``, ``Wh`` and ``b``. A backward-in-time LSTM reads its
sequence from the last valid element to the first.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .normalization import LnState, ln_backward, ln_forward
from .tensorcore import DTYPE, ContractError, ParamTensor, Rng, ShapeError, sample_uniform


def sigmoid(z):
    # split on sign to avoid overflow in exp
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass(eq=False)
class SequenceBatch:
    features: np.ndarray  # (B, T, D)
    mask: np.ndarray      # (B, T) bool

    @property
    def lengths(self):
        return self.mask.sum(axis=1)

    @classmethod
    def from_list(cls, seqs: Sequence[np.ndarray], dim: int | None = None) -> "SequenceBatch":
        dim = dim if dim is not None else seqs[0].shape[-1]
        T = max(len(s) for s in seqs)
        feats = np.zeros((len(seqs), T, dim), dtype=DTYPE)
        mask = np.zeros((len(seqs), T), dtype=bool)
        for b, s in enumerate(seqs):
            feats[b, :len(s)] = s
            mask[b, :len(s)] = True
        return cls(feats, mask)


# ---------------------------------------------------------------- FC

def fc_init(name: str, in_dim: int, out_dim: int, rng: Rng):
    bound = 1.0 / np.sqrt(in_dim)
    W = ParamTensor(f"{name}.W", sample_uniform(rng, (out_dim, in_dim), -bound, bound), lars_enabled=True)
    b = ParamTensor(f"{name}.b", np.zeros(out_dim))
    return W, b


def fc_forward(W: ParamTensor, b: ParamTensor, x: np.ndarray, activation: str = "none"):
    x = np.asarray(x, dtype=DTYPE)
    if x.shape[-1] != W.value.shape[1]:
        raise ShapeError(f"FC {W.name} expects input dim {W.value.shape[1]}, got {x.shape}")
    z = x @ W.value.T + b.value
    if activation == "none":
        y = z
    elif activation == "tanh":
        y = np.tanh(z)
    elif activation == "relu":
        y = np.maximum(z, 0.0)
    else:
        raise ValueError(f"unknown activation {activation!r}")
    return y, dict(W=W, b=b, x=x, y=y, z=z, act=activation, version=W.version)


def fc_backward(cache, dy: np.ndarray):
    W, b = cache["W"], cache["b"]
    if cache["version"] != W.version or dy.shape != cache["y"].shape:
        raise ContractError(f"stale or mismatched cache for {W.name}")
    act = cache["act"]
    if act == "tanh":
        dz = dy * (1.0 - cache["y"] ** 2)
    elif act == "relu":
        dz = dy * (cache["z"] > 0)
    else:
        dz = dy
    x = cache["x"]
    W.grad += dz.reshape(-1, dz.shape[-1]).T @ x.reshape(-1, x.shape[-1])
    b.grad += dz.reshape(-1, dz.shape[-1]).sum(axis=0)
    return dz @ W.value


def dropout_forward(x, rate: float, rng: Rng | None, training: bool):
    if not training or rate <= 0.0:
        return x, None
    keep = (rng.gen.random(x.shape) >= rate) / (1.0 - rate)
    return x * keep, keep


def dropout_backward(keep, dy):
    return dy if keep is None else dy * keep


# ---------------------------------------------------------------- LSTM

@dataclass(eq=False)
class LstmLayer:
    Wx: ParamTensor
    Wh: ParamTensor
    b: ParamTensor | None = None
    ln_x: LnState | None = None
    ln_h: LnState | None = None
    ln_c: LnState | None = None

    @property
    def layer_norm(self):
        return self.ln_x is not None

    def params(self):
        out = [self.Wx, self.Wh]
        if self.b is not None:
            out.append(self.b)
        for ln in (self.ln_x, self.ln_h, self.ln_c):
            if ln is not None:
                out.extend(ln.params())
        return out


@dataclass(eq=False)
class LstmParams:
    layers: list
    hidden_size: int
    direction: str = "forward"

    def __post_init__(self):
        if self.direction not in ("forward", "backward"):
            raise ValueError(f"direction must be 'forward' or 'backward', got {self.direction!r}")
        D = self.hidden_size
        for i, layer in enumerate(self.layers):
            if layer.Wx.shape[0] != 4 * D or layer.Wh.shape != (4 * D, D):
                raise ShapeError(f"layer {i}: Wx {layer.Wx.shape}, Wh {layer.Wh.shape} "
                                 f"inconsistent with hidden size {D}")
            if i > 0 and layer.Wx.shape[1] != D:
                raise ShapeError(f"layer {i} input dim {layer.Wx.shape[1]} != hidden size {D}")

    @property
    def num_layers(self):
        return len(self.layers)

    @property
    def input_size(self):
        return self.layers[0].Wx.shape[1]

    @property
    def layer_norm(self):
        return all(layer.layer_norm for layer in self.layers)

    def params(self):
        return [p for layer in self.layers for p in layer.params()]

    @classmethod
    def create(cls, name: str, input_size: int, hidden_size: int, rng: Rng, num_layers: int = 1,
               direction: str = "forward", layer_norm: bool = False, ln_eps: float = 1e-5):
        D = hidden_size
        bound = 1.0 / np.sqrt(D)
        layers = []
        for li in range(num_layers):
            din = input_size if li == 0 else D
            pre = f"{name}.l{li}"
            Wx = ParamTensor(f"{pre}.Wx", sample_uniform(rng, (4 * D, din), -bound, bound), lars_enabled=True)
            Wh = ParamTensor(f"{pre}.Wh", sample_uniform(rng, (4 * D, D), -bound, bound), lars_enabled=True)
            if layer_norm:
                layers.append(LstmLayer(Wx, Wh, None,
                                        LnState.create(f"{pre}.ln_x", 4 * D, ln_eps),
                                        LnState.create(f"{pre}.ln_h", 4 * D, ln_eps),
                                        LnState.create(f"{pre}.ln_c", D, ln_eps)))
            else:
                b = np.zeros(4 * D)
                b[D:2 * D] = 1.0  # forget gate
                layers.append(LstmLayer(Wx, Wh, ParamTensor(f"{pre}.b", b)))
        return cls(layers, D, direction)


def _cell_step(layer: LstmLayer, zx, h, c):
    """One recurrence step given the precomputed input contribution ``zx``."""
    D = h.shape[-1]
    hw = h @ layer.Wh.value.T
    ln_h_cache = None
    if layer.layer_norm:
        hw, ln_h_cache = ln_forward(layer.ln_h, hw)
    z = zx + hw
    si = sigmoid(z[:, :D])
    sf = sigmoid(z[:, D:2 * D])
    tg = np.tanh(z[:, 2 * D:3 * D])
    so = sigmoid(z[:, 3 * D:])
    c_new = sf * c + si * tg
    ln_c_cache = None
    if layer.layer_norm:
        c_new, ln_c_cache = ln_forward(layer.ln_c, c_new)
    tc = np.tanh(c_new)
    h_new = so * tc
    return h_new, c_new, (h, c, si, sf, tg, so, tc, ln_h_cache, ln_c_cache)


def _cell_step_backward(layer: LstmLayer, sc, dh, dc):
    h, c, si, sf, tg, so, tc, ln_h_cache, ln_c_cache = sc
    do = dh * tc * so * (1.0 - so)
    dcn = dc + dh * so * (1.0 - tc * tc)
    if ln_c_cache is not None:
        dcn = ln_backward(ln_c_cache, dcn)
    dc_prev = dcn * sf
    df = dcn * c * sf * (1.0 - sf)
    di = dcn * tg * si * (1.0 - si)
    dg = dcn * si * (1.0 - tg * tg)
    dz = np.concatenate([di, df, dg, do], axis=-1)
    dhw = ln_backward(ln_h_cache, dz) if ln_h_cache is not None else dz
    layer.Wh.grad += dhw.T @ h
    return dz, dhw @ layer.Wh.value, dc_prev


def _versions(params: LstmParams):
    return tuple(p.version for p in params.params())


def lstm_layer_forward(layer: LstmLayer, x, mask, h0, c0, reverse: bool):
    B, T, _ = x.shape
    D = layer.Wh.shape[1]
    xw = x @ layer.Wx.value.T
    ln_x_cache = None
    if layer.layer_norm:
        zx, ln_x_cache = ln_forward(layer.ln_x, xw)
    else:
        zx = xw + layer.b.value
    m = mask.astype(DTYPE)[..., None]
    h = np.zeros((B, D)) if h0 is None else h0
    c = np.zeros((B, D)) if c0 is None else c0
    hs = np.zeros((B, T, D))
    hc = np.zeros((B, T, D))
    cs = np.zeros((B, T, D))
    steps = [None] * T
    order = range(T - 1, -1, -1) if reverse else range(T)
    for t in order:
        h_new, c_new, sc = _cell_step(layer, zx[:, t], h, c)
        mt = m[:, t]
        hs[:, t] = mt * h_new
        h = mt * h_new + (1.0 - mt) * h
        c = mt * c_new + (1.0 - mt) * c
        hc[:, t] = h
        cs[:, t] = c
        steps[t] = sc
    cache = dict(layer=layer, x=x, m=m, steps=steps, ln_x_cache=ln_x_cache, reverse=reverse)
    return hs, hc, cs, cache


def lstm_layer_backward(cache, d_emit, dh_carry_extra=None, dc_carry_extra=None):
    layer = cache["layer"]
    x, m, steps = cache["x"], cache["m"], cache["steps"]
    B, T, _ = x.shape
    D = layer.Wh.shape[1]
    dzx = np.zeros((B, T, 4 * D))
    dh = np.zeros((B, D))
    dc = np.zeros((B, D))
    order = range(T) if cache["reverse"] else range(T - 1, -1, -1)
    for t in order:
        mt = m[:, t]
        if dh_carry_extra is not None:
            dh = dh + dh_carry_extra[:, t]
        if dc_carry_extra is not None:
            dc = dc + dc_carry_extra[:, t]
        dh_new = mt * (dh + d_emit[:, t])
        dc_new = mt * dc
        dz, dh_prev, dc_prev = _cell_step_backward(layer, steps[t], dh_new, dc_new)
        dzx[:, t] = dz
        dh = dh_prev + (1.0 - mt) * dh
        dc = dc_prev + (1.0 - mt) * dc
    if cache["ln_x_cache"] is not None:
        dxw = ln_backward(cache["ln_x_cache"], dzx)
    else:
        dxw = dzx
        layer.b.grad += dzx.reshape(-1, 4 * D).sum(axis=0)
    layer.Wx.grad += dxw.reshape(-1, 4 * D).T @ x.reshape(-1, x.shape[-1])
    return dxw @ layer.Wx.value, dh, dc


def lstm_forward(params: LstmParams, x, mask=None, h0=None, c0=None):
    """Run a stacked LSTM over ``x`` of shape (B, T, D_in).

    Padded steps (``mask`` False) carry the state through unchanged and emit
    zeros. ``h0``/``c0`` are optional per-layer lists of (B, D) initial states.

    Returns ``(hidden, cells, cache)`` for the top layer; ``cache["h_layers"]``
    and ``cache["c_layers"]`` hold the carried states of every layer.
    """
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim != 3 or x.shape[-1] != params.input_size:
        raise ShapeError(f"LSTM expects (B, T, {params.input_size}) input, got {x.shape}")
    if mask is None:
        mask = np.ones(x.shape[:2], dtype=bool)
    if mask.shape != x.shape[:2]:
        raise ShapeError(f"mask shape {mask.shape} does not match input {x.shape}")
    reverse = params.direction == "backward"
    inp = x
    layer_caches, h_layers, c_layers = [], [], []
    for li, layer in enumerate(params.layers):
        hs, hc, cs, lc = lstm_layer_forward(
            layer, inp, mask,
            None if h0 is None else h0[li], None if c0 is None else c0[li], reverse)
        layer_caches.append(lc)
        h_layers.append(hc)
        c_layers.append(cs)
        inp = hs
    cache = dict(params=params, layer_caches=layer_caches, h_layers=h_layers,
                 c_layers=c_layers, out_shape=inp.shape, versions=_versions(params))
    return inp, c_layers[-1], cache


def lstm_backward(cache, dh, dh_layers=None, dc_layers=None, return_initial=False):
    """Backpropagate through ``lstm_forward``.

    ``dh`` is the gradient of the emitted top-layer hidden sequence.
    ``dh_layers``/``dc_layers`` optionally add gradients on the carried state
    of every layer at every position. Parameter gradients are accumulated into
    the ``ParamTensor.grad`` buffers. Returns the input gradient (and the
    initial-state gradients when ``return_initial``).
    """
    params = cache["params"]
    if cache["versions"] != _versions(params):
        raise ContractError("LSTM parameters changed since forward; cache is stale")
    if dh.shape != cache["out_shape"]:
        raise ContractError(f"gradient shape {dh.shape} != forward output {cache['out_shape']}")
    d_emit = dh
    dh0, dc0 = [None] * params.num_layers, [None] * params.num_layers
    for li in range(params.num_layers - 1, -1, -1):
        d_emit, dh0[li], dc0[li] = lstm_layer_backward(
            cache["layer_caches"][li], d_emit,
            None if dh_layers is None else dh_layers[li],
            None if dc_layers is None else dc_layers[li])
    if return_initial:
        return d_emit, dh0, dc0
    return d_emit


def lstm_step(params: LstmParams, x_t, h, c):
    """Single forward step for all layers; ``h``/``c`` are per-layer lists of (B, D)."""
    new_h, new_c = [], []
    inp = x_t
    for li, layer in enumerate(params.layers):
        xw = inp @ layer.Wx.value.T
        zx = ln_forward(layer.ln_x, xw)[0] if layer.layer_norm else xw + layer.b.value
        hn, cn, _ = _cell_step(layer, zx, h[li], c[li])
        new_h.append(hn)
        new_c.append(cn)
        inp = hn
    return new_h, new_c
