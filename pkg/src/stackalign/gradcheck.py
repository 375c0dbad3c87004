"""Central finite-difference checks of every analytic backward pass.

The error reported for a tensor is ``||analytic - numeric|| / max(||analytic||, ||numeric||)``;
tensors whose gradients are both below 1e-10 in norm count as exact.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import layers, normalization
from .alignment import derive_oracle_actions, GoldAlignment
from .layers import LstmParams
from .normalization import LnState, SbnState
from .tensorcore import Rng, ParamTensor

STEP = 1e-5
TOLERANCE = 1e-4
SCOPES = ("fc", "lstm", "sbn", "ln", "ln_lstm", "loss", "model")


@dataclass
class CheckResult:
    op: str
    worst: float
    passed: bool
    seconds: float

    def line(self):
        return f"{'PASS' if self.passed else 'FAIL'} {self.op:<22} worst rel err {self.worst:.3e} ({self.seconds:.2f}s)"


def rel_error(a: np.ndarray, n: np.ndarray) -> float:
    na, nn = np.linalg.norm(a), np.linalg.norm(n)
    if max(na, nn) < 1e-10:
        return 0.0
    return float(np.linalg.norm(a - n) / max(na, nn))


def numeric_grad(f, arr: np.ndarray, idx=None, h: float = STEP) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. entries of ``arr`` (mutated in place, restored)."""
    g = np.zeros_like(arr)
    flat, gflat = arr.reshape(-1), g.reshape(-1)
    for i in (range(flat.size) if idx is None else idx):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def check(f, backward, params, inputs=(), max_entries=None, rng=None):
    """Compare analytic and numeric gradients; returns the worst relative error.

    ``f()`` computes the scalar loss; ``backward()`` runs forward+backward,
    accumulates parameter grads and returns input grads matching ``inputs``.
    """
    for p in params:
        p.zero_grad()
    dinputs = backward()
    worst = 0.0
    targets = [(p.value, p.grad.copy()) for p in params] + list(zip(inputs, dinputs))
    for arr, analytic in targets:
        idx = None
        if max_entries is not None and arr.size > max_entries:
            idx = np.sort((rng or np.random.default_rng(0)).choice(arr.size, max_entries, replace=False))
        numeric = numeric_grad(f, arr, idx)
        if idx is not None:
            analytic = analytic.reshape(-1)[idx]
            numeric = numeric.reshape(-1)[idx]
        worst = max(worst, rel_error(analytic, numeric))
    return worst


def _proj(rng, shape):
    return Rng(rng.seed, rng.stream + 777).gen.standard_normal(shape)


def _mask(B, T, lengths):
    m = np.zeros((B, T), dtype=bool)
    for b, n in enumerate(lengths):
        m[b, :n] = True
    return m


def check_fc(seed=0):
    rng = Rng(seed)
    worst = 0.0
    for act in ("none", "tanh", "relu"):
        W, b = layers.fc_init("fc", 4, 5, rng)
        b.value[...] = rng.gen.standard_normal(5) * 0.1
        x = rng.gen.standard_normal((3, 4))
        R = _proj(rng, (3, 5))

        def f():
            return float((layers.fc_forward(W, b, x, act)[0] * R).sum())

        def bw():
            y, c = layers.fc_forward(W, b, x, act)
            return [layers.fc_backward(c, R)]

        worst = max(worst, check(f, bw, [W, b], [x]))
    return worst


def _lstm_case(seed, direction, layer_norm, B=2, T=3, D=4, Din=3, lengths=(3, 2), num_layers=2):
    rng = Rng(seed)
    params = LstmParams.create("lstm", Din, D, rng, num_layers, direction, layer_norm=layer_norm)
    for p in params.params():
        p.value[...] += 0.1 * rng.gen.standard_normal(p.value.shape)
    x = rng.gen.standard_normal((B, T, Din))
    mask = _mask(B, T, lengths)
    x[~mask] = 0.0
    R = _proj(rng, (B, T, D))

    def f():
        return float((layers.lstm_forward(params, x, mask)[0] * R).sum())

    def bw():
        _, _, c = layers.lstm_forward(params, x, mask)
        return [layers.lstm_backward(c, R)]

    return check(f, bw, params.params(), [x])


def check_lstm(seed=0):
    return max(_lstm_case(seed, d, False) for d in ("forward", "backward"))


def check_ln_lstm(seed=0):
    return max(_lstm_case(seed, d, True, T=2, D=3) for d in ("forward", "backward"))


def check_sbn(seed=0):
    rng = Rng(seed)
    st = SbnState.create("sbn", 4)
    st.gamma.value[...] = 1 + 0.3 * rng.gen.standard_normal(4)
    st.beta.value[...] = 0.3 * rng.gen.standard_normal(4)
    x = rng.gen.standard_normal((3, 2, 4))
    mask = _mask(3, 2, (2, 1, 2))
    R = _proj(rng, (3, 2, 4))

    def f():
        return float((normalization.sbn_forward(st, x, mask)[0] * R).sum())

    def bw():
        _, c = normalization.sbn_forward(st, x, mask)
        return [normalization.sbn_backward(c, R)]

    return check(f, bw, st.params(), [x])


def check_ln(seed=0):
    rng = Rng(seed)
    st = LnState.create("ln", 5)
    st.gamma.value[...] = 1 + 0.3 * rng.gen.standard_normal(5)
    st.beta.value[...] = 0.3 * rng.gen.standard_normal(5)
    x = rng.gen.standard_normal((2, 3, 5))
    R = _proj(rng, (2, 3, 5))

    def f():
        return float((normalization.ln_forward(st, x)[0] * R).sum())

    def bw():
        _, c = normalization.ln_forward(st, x)
        return [normalization.ln_backward(c, R)]

    return check(f, bw, st.params(), [x])


def _micro_model(normalization_kind, seed=0, n_episodes=2):
    from .model import AlignmentModel, ModelConfig
    rng = Rng(seed, 5)
    cfg = ModelConfig(video_in_dim=5, text_in_dim=6, projected_dim=4, stack_hidden=4, matched_hidden=3,
                      action_hidden=3, fc_hidden=5, lstm_layers=2, normalization=normalization_kind,
                      use_rp=normalization_kind != "none", seed=seed)
    model = AlignmentModel(cfg)
    golds = [GoldAlignment.from_lists([[0, 1], [2]], 3), GoldAlignment.from_lists([[1], [2, 3]], 4)]
    inputs, plans = [], []
    for g in golds[:n_episodes]:
        v = rng.gen.standard_normal((g.n_video, 5))
        s = rng.gen.standard_normal((g.n_text, 6))
        inputs.append(model.prepare_inputs(v, s))
        plans.append(model.plan(g.n_video, g.n_text, derive_oracle_actions(g, cfg.actions)))
    return model, inputs, plans


def check_model(seed=0, kinds=("sbn", "ln2", "ln4", "none"), max_entries=12):
    from .model import make_batch
    worst = 0.0
    for kind in kinds:
        model, inputs, plans = _micro_model(kind, seed)
        for p in model.params():
            if not p.name.endswith("gamma"):
                p.value[...] += 0.05 * Rng(seed, 9).gen.standard_normal(p.value.shape)
        batch = make_batch(inputs, plans, len(model.config.action_set))

        def f():
            return model.forward(batch)[0]

        def bw():
            _, _, c = model.forward(batch)
            return list(model.backward(c))

        worst = max(worst, check(f, bw, model.params(), [batch.video, batch.text],
                                 max_entries=max_entries, rng=np.random.default_rng(seed)))
    return worst


def check_loss(seed=0):
    """Masked softmax + smoothed cross-entropy through the classifier head."""
    from .model import make_batch
    model, inputs, plans = _micro_model("none", seed, n_episodes=1)
    batch = make_batch(inputs, plans, len(model.config.action_set))
    batch.valid[0, 0, 1] = False  # one masked action
    head = list(model.head1) + list(model.head2)

    def f():
        return model.forward(batch)[0]

    def bw():
        _, _, c = model.forward(batch)
        model.backward(c)
        return []

    return check(f, bw, head)


CHECKS = dict(fc=check_fc, lstm=check_lstm, sbn=check_sbn, ln=check_ln, ln_lstm=check_ln_lstm,
              loss=check_loss, model=check_model)


def run_suite(scope: str = "all", seed: int = 0, tolerance: float = TOLERANCE):
    if scope != "all" and scope not in CHECKS:
        raise KeyError(f"unknown gradcheck scope {scope!r}; choose from {('all',) + SCOPES}")
    names = SCOPES if scope == "all" else (scope,)
    results = []
    for name in names:
        t0 = time.perf_counter()
        worst = CHECKS[name](seed)
        ok = bool(np.isfinite(worst) and worst < tolerance)
        results.append(CheckResult(name, worst, ok, time.perf_counter() - t0))
    return results
