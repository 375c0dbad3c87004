"""The four-stack alignment network.

Video and text features are projected, passed through an FC layer and a
backward-in-time stacked LSTM, then normalized (SBN on the LSTM outputs, or
LN inside the LSTM cells). The action stack is a forward LSTM over one-hot
past actions; the matched stack is a forward LSTM over matched slots, each
slot represented by the mean of its video vectors concatenated with the mean
of its text vectors. The state vector

    [video top; text top; action summary; matched summary; 10 positional features]

goes through two FC layers and a softmax restricted to the valid actions.

Training is teacher forced and batched: for every decision step the cursor
positions and slot contents are known from the oracle, so all gathers become
matrix products with fixed selection/averaging matrices.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .alignment import (ALL_ACTIONS, YMS_ACTIONS, Action, AlignmentState, IllegalActionError,
                        state_to_alignment, step, valid_actions)
from .layers import (LstmParams, dropout_backward, dropout_forward, fc_backward, fc_forward, fc_init,
                     lstm_backward, lstm_forward, lstm_step)
from .normalization import SbnState, sbn_backward, sbn_forward
from .projection import RandomProjection, rp_apply, rp_from_seed
from .tensorcore import DTYPE, ContractError, ParameterError, Rng, ShapeError, check_names_unique

NORMALIZATIONS = ("sbn", "ln2", "ln4", "none")
N_POSITIONAL = 10
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    video_in_dim: int = 512
    text_in_dim: int = 768
    projected_dim: int = 300
    stack_hidden: int = 300
    matched_hidden: int = 20
    action_hidden: int = 8
    fc_hidden: int = 300
    lstm_layers: int = 2
    normalization: str = "sbn"
    use_rp: bool = True
    action_set: tuple = tuple(a.value for a in YMS_ACTIONS)
    label_smoothing: float = 0.03
    dropout: float = 0.0
    sbn_eps: float = 1e-5
    sbn_momentum: float = 0.1
    ln_eps: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        self.action_set = tuple(Action(a).value for a in self.action_set)
        if self.normalization not in NORMALIZATIONS:
            raise ParameterError(f"normalization must be one of {NORMALIZATIONS}, got {self.normalization!r}")
        for name in ("video_in_dim", "text_in_dim", "projected_dim", "stack_hidden",
                     "matched_hidden", "action_hidden", "fc_hidden", "lstm_layers"):
            if int(getattr(self, name)) < 1:
                raise ParameterError(f"{name} must be positive")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ParameterError(f"label smoothing must lie in [0, 1), got {self.label_smoothing}")
        if len(set(self.action_set)) != len(self.action_set) or not self.action_set:
            raise ParameterError(f"invalid action set {self.action_set}")

    @property
    def actions(self):
        return tuple(Action(a) for a in self.action_set)

    @property
    def state_dim(self):
        return 2 * self.stack_hidden + self.action_hidden + self.matched_hidden + N_POSITIONAL

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        for k in d:
            if k not in known:
                raise ParameterError(f"unknown model config key {k!r}")
        return cls(**d)


# ------------------------------------------------------------------ helpers

def positional_features(n_video_left: int, n_text_left: int, n_matched: int) -> np.ndarray:
    nv, nt, nm = float(n_video_left), float(n_text_left), float(n_matched)
    return np.array([nv / 100, nt / 100, nm / 100,
                     nv / (nt + 1), nt / (nv + 1), nm / (nv + 1), nm / (nt + 1),
                     1 / (1 + nv), 1 / (1 + nt), 1 / (1 + nm)], dtype=DTYPE)


def smoothing_target(true_index: int, eps: float, k: int) -> np.ndarray:
    if not 0.0 <= eps < 1.0:
        raise ParameterError(f"label smoothing must lie in [0, 1), got {eps}")
    y = np.full(k, eps / k)
    y[true_index] += 1.0 - eps
    return y


def smoothed_cross_entropy(probs, true_index: int, eps: float, k: int | None = None) -> float:
    """Cross-entropy of ``probs`` against ``(1 - eps) * onehot + eps / K``."""
    probs = np.asarray(probs, dtype=DTYPE)
    k = probs.shape[-1] if k is None else k
    target = smoothing_target(true_index, eps, k)
    with np.errstate(divide="ignore"):
        logp = np.log(probs)
    nz = target > 0
    return float(-(target[nz] * logp[nz]).sum())


def masked_softmax(logits: np.ndarray, valid: np.ndarray) -> np.ndarray:
    if not np.all(valid.any(axis=-1)):
        raise ContractError("no valid action to classify")
    z = np.where(valid, logits, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.where(valid, np.exp(z), 0.0)
    return e / e.sum(axis=-1, keepdims=True)


def _masked_log_softmax(logits, valid):
    z = np.where(valid, logits, -np.inf)
    zmax = z.max(axis=-1, keepdims=True)
    lse = np.log(np.where(valid, np.exp(z - zmax), 0.0).sum(axis=-1, keepdims=True)) + zmax
    return np.where(valid, logits - lse, 0.0)


def _slot_weights(slot, n_video, n_text):
    vids, txts = slot
    wv = np.zeros(n_video)
    ws = np.zeros(n_text)
    wv[list(vids)] = 1.0 / len(vids)
    ws[list(txts)] = 1.0 / len(txts)
    return wv, ws


@dataclass(eq=False)
class EpisodePlan:
    """Teacher-forced decision steps of one episode, derived from its oracle actions."""
    n_video: int
    n_text: int
    actions: list
    targets: np.ndarray       # (T,)
    valid: np.ndarray         # (T, K) bool
    video_cursor: np.ndarray  # (T,)
    text_cursor: np.ndarray   # (T,)
    positional: np.ndarray    # (T, 10)
    partial_video_w: np.ndarray  # (T, N) averaging weights of the newest slot
    partial_text_w: np.ndarray   # (T, M)
    prev_slot: np.ndarray     # (T,) index of the last closed slot, -1 if none
    has_slot: np.ndarray      # (T,) bool
    slot_video_w: np.ndarray  # (S, N) final slots
    slot_text_w: np.ndarray   # (S, M)

    @property
    def n_steps(self):
        return len(self.actions)


def make_plan(n_video: int, n_text: int, actions: Sequence[Action], action_set: Sequence[Action]) -> EpisodePlan:
    action_set = tuple(Action(a) for a in action_set)
    index = {a: i for i, a in enumerate(action_set)}
    T, K = len(actions), len(action_set)
    plan = dict(targets=np.zeros(T, dtype=np.int64), valid=np.zeros((T, K), dtype=bool),
                video_cursor=np.zeros(T, dtype=np.int64), text_cursor=np.zeros(T, dtype=np.int64),
                positional=np.zeros((T, N_POSITIONAL)), partial_video_w=np.zeros((T, n_video)),
                partial_text_w=np.zeros((T, n_text)), prev_slot=np.full(T, -1, dtype=np.int64),
                has_slot=np.zeros(T, dtype=bool))
    state = AlignmentState.initial(n_video, n_text)
    for t, a in enumerate(actions):
        a = Action(a)
        if state.done:
            raise ContractError(f"oracle continues after the episode ended (step {t})")
        if a not in index:
            raise ContractError(f"oracle action {a.value} not in the configured action set")
        plan["targets"][t] = index[a]
        for v in valid_actions(state, action_set):
            plan["valid"][t, index[v]] = True
        plan["video_cursor"][t] = state.video_cursor
        plan["text_cursor"][t] = state.text_cursor
        slots = state.matched_slots
        plan["positional"][t] = positional_features(n_video - state.video_cursor,
                                                    n_text - state.text_cursor, len(slots))
        if slots:
            plan["has_slot"][t] = True
            plan["prev_slot"][t] = len(slots) - 2
            plan["partial_video_w"][t], plan["partial_text_w"][t] = _slot_weights(slots[-1], n_video, n_text)
        state = step(state, a, n_video, n_text)
    if not state.done:
        raise ContractError("oracle action sequence does not finish the episode")
    S = len(state.matched_slots)
    sv, st = np.zeros((S, n_video)), np.zeros((S, n_text))
    for k, slot in enumerate(state.matched_slots):
        sv[k], st[k] = _slot_weights(slot, n_video, n_text)
    return EpisodePlan(n_video, n_text, list(actions), slot_video_w=sv, slot_text_w=st, **plan)


@dataclass(eq=False)
class Batch:
    video: np.ndarray        # (B, N, Din_v)
    video_mask: np.ndarray   # (B, N)
    text: np.ndarray
    text_mask: np.ndarray
    step_mask: np.ndarray    # (B, T)
    targets: np.ndarray      # (B, T)
    valid: np.ndarray        # (B, T, K)
    action_inputs: np.ndarray  # (B, T, K) one-hot of the action taken at each step
    gather_video: np.ndarray   # (B, T, N)
    gather_text: np.ndarray    # (B, T, M)
    positional: np.ndarray     # (B, T, 10)
    partial_video_w: np.ndarray
    partial_text_w: np.ndarray
    has_slot: np.ndarray       # (B, T)
    gather_prev: np.ndarray    # (B, T, S)
    slot_video_w: np.ndarray   # (B, S, N)
    slot_text_w: np.ndarray    # (B, S, M)
    slot_mask: np.ndarray      # (B, S)

    @property
    def n_steps(self):
        return int(self.step_mask.sum())


def make_batch(inputs: Sequence[tuple], plans: Sequence[EpisodePlan], k: int) -> Batch:
    """Pad per-episode (video, text) inputs and plans into one batch."""
    B = len(plans)
    N = max(p.n_video for p in plans)
    M = max(p.n_text for p in plans)
    T = max(p.n_steps for p in plans)
    S = max(1, max(p.slot_video_w.shape[0] for p in plans))
    dv, dt = inputs[0][0].shape[1], inputs[0][1].shape[1]
    z = lambda *shape, dtype=DTYPE: np.zeros(shape, dtype=dtype)
    b = dict(video=z(B, N, dv), video_mask=z(B, N, dtype=bool), text=z(B, M, dt), text_mask=z(B, M, dtype=bool),
             step_mask=z(B, T, dtype=bool), targets=z(B, T, dtype=np.int64), valid=z(B, T, k, dtype=bool),
             action_inputs=z(B, T, k), gather_video=z(B, T, N), gather_text=z(B, T, M),
             positional=z(B, T, N_POSITIONAL), partial_video_w=z(B, T, N), partial_text_w=z(B, T, M),
             has_slot=z(B, T, dtype=bool), gather_prev=z(B, T, S), slot_video_w=z(B, S, N),
             slot_text_w=z(B, S, M), slot_mask=z(B, S, dtype=bool))
    for i, ((v, s), p) in enumerate(zip(inputs, plans)):
        n, m, t = p.n_video, p.n_text, p.n_steps
        b["video"][i, :n] = v
        b["video_mask"][i, :n] = True
        b["text"][i, :m] = s
        b["text_mask"][i, :m] = True
        b["step_mask"][i, :t] = True
        b["targets"][i, :t] = p.targets
        b["valid"][i, :t] = p.valid
        b["valid"][i, t:, 0] = True  # keeps the softmax defined on padding
        b["action_inputs"][i, np.arange(t), p.targets] = 1.0
        b["gather_video"][i, np.arange(t), p.video_cursor] = 1.0
        b["gather_text"][i, np.arange(t), p.text_cursor] = 1.0
        b["positional"][i, :t] = p.positional
        b["partial_video_w"][i, :t, :n] = p.partial_video_w
        b["partial_text_w"][i, :t, :m] = p.partial_text_w
        b["has_slot"][i, :t] = p.has_slot
        steps = np.nonzero(p.prev_slot >= 0)[0]
        b["gather_prev"][i, steps, p.prev_slot[steps]] = 1.0
        ns = p.slot_video_w.shape[0]
        b["slot_video_w"][i, :ns, :n] = p.slot_video_w
        b["slot_text_w"][i, :ns, :m] = p.slot_text_w
        b["slot_mask"][i, :ns] = True
    return Batch(**b)


# -------------------------------------------------------------------- model

class AlignmentModel:
    def __init__(self, config: ModelConfig):
        self.config = cfg = config
        rng = Rng(cfg.seed, 10)
        H, L = cfg.stack_hidden, cfg.lstm_layers
        K = len(cfg.action_set)
        ln_stacks = cfg.normalization in ("ln2", "ln4")
        ln_context = cfg.normalization == "ln4"
        self.training = True
        self.dropout_rng = Rng(cfg.seed, 13)
        self.rp = {}
        self.proj = {}
        self.fc = {}
        self.lstm = {}
        self.sbn = {}
        for mod, din, stream in (("video", cfg.video_in_dim, 11), ("text", cfg.text_in_dim, 12)):
            if cfg.use_rp:
                self.rp[mod] = rp_from_seed(cfg.seed, stream, din, cfg.projected_dim)
            else:
                self.proj[mod] = fc_init(f"{mod}.proj", din, cfg.projected_dim, rng)
            self.fc[mod] = fc_init(f"{mod}.fc", cfg.projected_dim, H, rng)
            self.lstm[mod] = LstmParams.create(f"{mod}.lstm", H, H, rng, L, "backward",
                                               layer_norm=ln_stacks, ln_eps=cfg.ln_eps)
            if cfg.normalization == "sbn":
                self.sbn[mod] = SbnState.create(f"{mod}.sbn", H, eps=cfg.sbn_eps, momentum=cfg.sbn_momentum)
        self.lstm["action"] = LstmParams.create("action.lstm", K, cfg.action_hidden, rng, L, "forward",
                                                layer_norm=ln_context, ln_eps=cfg.ln_eps)
        self.lstm["matched"] = LstmParams.create("matched.lstm", 2 * H, cfg.matched_hidden, rng, L, "forward",
                                                 layer_norm=ln_context, ln_eps=cfg.ln_eps)
        self.head1 = fc_init("head.fc1", cfg.state_dim, cfg.fc_hidden, rng)
        self.head2 = fc_init("head.fc2", cfg.fc_hidden, K, rng)
        check_names_unique(self.params())

    # -- bookkeeping

    def params(self):
        out = []
        for mod in ("video", "text"):
            if mod in self.proj:
                out.extend(self.proj[mod])
            out.extend(self.fc[mod])
            out.extend(self.lstm[mod].params())
            if mod in self.sbn:
                out.extend(self.sbn[mod].params())
        out.extend(self.lstm["action"].params())
        out.extend(self.lstm["matched"].params())
        out.extend(self.head1)
        out.extend(self.head2)
        return out

    def named_params(self):
        return {p.name: p for p in self.params()}

    def zero_grad(self):
        for p in self.params():
            p.zero_grad()

    def train(self, mode: bool = True):
        self.training = mode
        for s in self.sbn.values():
            s.training = mode
        return self

    def eval(self):
        return self.train(False)

    def prepare_inputs(self, video: np.ndarray, text: np.ndarray):
        """Apply the fixed random projections (standardized features in, stack inputs out)."""
        if video.shape[-1] != self.config.video_in_dim or text.shape[-1] != self.config.text_in_dim:
            raise ShapeError(f"expected feature dims ({self.config.video_in_dim}, {self.config.text_in_dim}), "
                             f"got ({video.shape[-1]}, {text.shape[-1]})")
        if self.config.use_rp:
            return rp_apply(self.rp["video"], video), rp_apply(self.rp["text"], text)
        return np.asarray(video, dtype=DTYPE), np.asarray(text, dtype=DTYPE)

    def plan(self, n_video, n_text, actions):
        return make_plan(n_video, n_text, actions, self.config.actions)

    # -- encoders

    def _encode(self, mod, x, mask):
        caches = {}
        if mod in self.proj:
            x, caches["proj"] = fc_forward(*self.proj[mod], x, "none")
        x, caches["fc"] = fc_forward(*self.fc[mod], x, "tanh")
        h, _, caches["lstm"] = lstm_forward(self.lstm[mod], x, mask)
        if mod in self.sbn:
            h, caches["sbn"] = sbn_forward(self.sbn[mod], h, mask)
        return h, caches

    def _encode_backward(self, mod, caches, dh):
        if "sbn" in caches:
            dh = sbn_backward(caches["sbn"], dh)
        dx = lstm_backward(caches["lstm"], dh)
        dx = fc_backward(caches["fc"], dx)
        if "proj" in caches:
            dx = fc_backward(caches["proj"], dx)
        return dx

    def encode_sequences(self, video_in, video_mask, text_in, text_mask):
        """Return the normalized stack outputs (B, N, H) and (B, M, H)."""
        v, _ = self._encode("video", video_in, video_mask)
        s, _ = self._encode("text", text_in, text_mask)
        return v, s

    # -- batched teacher-forced pass

    def forward(self, batch: Batch):
        cfg = self.config
        c = {}
        vt_seq, c["video"] = self._encode("video", batch.video, batch.video_mask)
        st_seq, c["text"] = self._encode("text", batch.text, batch.text_mask)
        v_top = np.einsum("btn,bnh->bth", batch.gather_video, vt_seq)
        s_top = np.einsum("btm,bmh->bth", batch.gather_text, st_seq)

        B, T, _ = batch.action_inputs.shape
        ha, _, c["action"] = lstm_forward(self.lstm["action"], batch.action_inputs, batch.step_mask)
        a_ctx = np.zeros_like(ha)
        a_ctx[:, 1:] = ha[:, :-1]

        x_slots = np.concatenate([np.einsum("bsn,bnh->bsh", batch.slot_video_w, vt_seq),
                                  np.einsum("bsm,bmh->bsh", batch.slot_text_w, st_seq)], axis=-1)
        _, _, c["slots"] = lstm_forward(self.lstm["matched"], x_slots, batch.slot_mask)
        h0 = [np.einsum("bts,bsh->bth", batch.gather_prev, h).reshape(B * T, -1) for h in c["slots"]["h_layers"]]
        c0 = [np.einsum("bts,bsh->bth", batch.gather_prev, cc).reshape(B * T, -1) for cc in c["slots"]["c_layers"]]
        x_part = np.concatenate([np.einsum("btn,bnh->bth", batch.partial_video_w, vt_seq),
                                 np.einsum("btm,bmh->bth", batch.partial_text_w, st_seq)], axis=-1)
        m_ctx, _, c["partial"] = lstm_forward(self.lstm["matched"], x_part.reshape(B * T, 1, -1),
                                              batch.has_slot.reshape(B * T, 1), h0, c0)
        m_ctx = m_ctx.reshape(B, T, -1)

        sv = np.concatenate([v_top, s_top, a_ctx, m_ctx, batch.positional], axis=-1)
        z1, c["head1"] = fc_forward(*self.head1, sv, "relu")
        z1, c["drop"] = dropout_forward(z1, cfg.dropout, self.dropout_rng, self.training)
        logits, c["head2"] = fc_forward(*self.head2, z1, "none")
        probs = masked_softmax(logits, batch.valid)

        n_valid = batch.valid.sum(axis=-1, keepdims=True)
        eps = cfg.label_smoothing
        target = np.where(batch.valid, eps / n_valid, 0.0)
        np.put_along_axis(target, batch.targets[..., None],
                          np.take_along_axis(target, batch.targets[..., None], -1) + (1 - eps), -1)
        logp = _masked_log_softmax(logits, batch.valid)
        step_loss = -(target * logp).sum(axis=-1)
        steps = batch.step_mask.astype(DTYPE)
        n = max(1.0, steps.sum())
        loss = float((step_loss * steps).sum() / n)
        c.update(batch=batch, probs=probs, target=target, steps=steps, n=n,
                 dims=(vt_seq.shape, st_seq.shape))
        return loss, probs, c

    def backward(self, c):
        batch = c["batch"]
        cfg = self.config
        H = cfg.stack_hidden
        B, T, _ = batch.action_inputs.shape
        dlogits = (c["probs"] - c["target"]) * c["steps"][..., None] / c["n"]
        dz1 = fc_backward(c["head2"], dlogits)
        dz1 = dropout_backward(c["drop"], dz1)
        dsv = fc_backward(c["head1"], dz1)
        Ha = cfg.action_hidden
        dv_top, ds_top = dsv[..., :H], dsv[..., H:2 * H]
        da_ctx = dsv[..., 2 * H:2 * H + Ha]
        dm_ctx = dsv[..., 2 * H + Ha:2 * H + Ha + cfg.matched_hidden]

        dvt = np.einsum("btn,bth->bnh", batch.gather_video, dv_top)
        dst = np.einsum("btm,bth->bmh", batch.gather_text, ds_top)

        dha = np.zeros_like(da_ctx)
        dha[:, :-1] = da_ctx[:, 1:]
        lstm_backward(c["action"], dha)

        dx_part, dh0, dc0 = lstm_backward(c["partial"], dm_ctx.reshape(B * T, 1, -1), return_initial=True)
        dx_part = dx_part.reshape(B, T, -1)
        dvt += np.einsum("btn,bth->bnh", batch.partial_video_w, dx_part[..., :H])
        dst += np.einsum("btm,bth->bmh", batch.partial_text_w, dx_part[..., H:])
        dh_layers = [np.einsum("bts,bth->bsh", batch.gather_prev, d.reshape(B, T, -1)) for d in dh0]
        dc_layers = [np.einsum("bts,bth->bsh", batch.gather_prev, d.reshape(B, T, -1)) for d in dc0]
        S = batch.slot_mask.shape[1]
        dx_slots = lstm_backward(c["slots"], np.zeros((B, S, cfg.matched_hidden)), dh_layers, dc_layers)
        dvt += np.einsum("bsn,bsh->bnh", batch.slot_video_w, dx_slots[..., :H])
        dst += np.einsum("bsm,bsh->bmh", batch.slot_text_w, dx_slots[..., H:])

        dvideo = self._encode_backward("video", c["video"], dvt)
        dtext = self._encode_backward("text", c["text"], dst)
        return dvideo, dtext

    def step_accuracy(self, c) -> tuple:
        """(correct, total) teacher-forced argmax predictions over real steps."""
        batch = c["batch"]
        pred = c["probs"].argmax(axis=-1)
        hits = (pred == batch.targets) & batch.step_mask
        return int(hits.sum()), int(batch.step_mask.sum())

    # -- single-state API and greedy decoding

    def _context(self, enc_v, enc_s, state: AlignmentState):
        """Action and matched summaries for ``state`` computed from scratch."""
        cfg = self.config
        K = len(cfg.action_set)
        index = {a: i for i, a in enumerate(cfg.actions)}
        hist = state.action_history
        if hist:
            onehot = np.zeros((1, len(hist), K))
            onehot[0, np.arange(len(hist)), [index[Action(a)] for a in hist]] = 1.0
            ha, _, _ = lstm_forward(self.lstm["action"], onehot)
            a_ctx = ha[0, -1]
        else:
            a_ctx = np.zeros(cfg.action_hidden)
        if state.matched_slots:
            x = np.stack([self._slot_input(enc_v, enc_s, slot) for slot in state.matched_slots])[None]
            hm, _, _ = lstm_forward(self.lstm["matched"], x)
            m_ctx = hm[0, -1]
        else:
            m_ctx = np.zeros(cfg.matched_hidden)
        return a_ctx, m_ctx

    @staticmethod
    def _slot_input(enc_v, enc_s, slot):
        vids, txts = slot
        return np.concatenate([enc_v[sorted(vids)].mean(axis=0), enc_s[sorted(txts)].mean(axis=0)])

    def build_state(self, state: AlignmentState, enc_v: np.ndarray, enc_s: np.ndarray) -> np.ndarray:
        """State vector for one episode given its encoded (N, H) / (M, H) sequences."""
        if state.done:
            raise ContractError("cannot build a state vector for a finished episode")
        a_ctx, m_ctx = self._context(enc_v, enc_s, state)
        N, M = enc_v.shape[0], enc_s.shape[0]
        pos = positional_features(N - state.video_cursor, M - state.text_cursor, len(state.matched_slots))
        return np.concatenate([enc_v[state.video_cursor], enc_s[state.text_cursor], a_ctx, m_ctx, pos])

    def classify(self, sv: np.ndarray, valid: set) -> np.ndarray:
        """Action probabilities over the configured action set, zero on invalid actions."""
        if not valid:
            raise ContractError("classify needs at least one valid action")
        mask = np.array([a in valid for a in self.config.actions])
        z1, _ = fc_forward(*self.head1, sv, "relu")
        logits, _ = fc_forward(*self.head2, z1, "none")
        return masked_softmax(logits, mask)

    def encode_episode(self, video_in, text_in):
        v, s = self.encode_sequences(video_in[None], np.ones((1, len(video_in)), bool),
                                     text_in[None], np.ones((1, len(text_in)), bool))
        return v[0], s[0]

    def decode(self, video_in: np.ndarray, text_in: np.ndarray, forced: Sequence[Action] | None = None):
        """Greedy decoding of one episode (inputs already passed through ``prepare_inputs``).

        Returns ``(prediction, actions, step_probs)``. With ``forced`` the given
        actions are executed instead of the argmax (used to check consistency
        with the batched teacher-forced pass).
        """
        cfg = self.config
        if cfg.normalization == "sbn" and self.training:
            raise ContractError("decode requires eval mode (call model.eval())")
        actions_cfg = cfg.actions
        K = len(actions_cfg)
        N, M = len(video_in), len(text_in)
        enc_v, enc_s = self.encode_episode(video_in, text_in)
        L = cfg.lstm_layers
        ah = [np.zeros((1, cfg.action_hidden)) for _ in range(L)]
        ac = [np.zeros((1, cfg.action_hidden)) for _ in range(L)]
        closed_h = [np.zeros((1, cfg.matched_hidden)) for _ in range(L)]
        closed_c = [np.zeros((1, cfg.matched_hidden)) for _ in range(L)]
        n_closed = 0
        state = AlignmentState.initial(N, M)
        taken, step_probs = [], []
        while not state.done:
            slots = state.matched_slots
            # fold slots that can no longer grow into the closed prefix
            while n_closed < len(slots) - 1:
                x = self._slot_input(enc_v, enc_s, slots[n_closed])[None]
                closed_h, closed_c = lstm_step(self.lstm["matched"], x, closed_h, closed_c)
                n_closed += 1
            if slots:
                x = self._slot_input(enc_v, enc_s, slots[-1])[None]
                m_ctx = lstm_step(self.lstm["matched"], x, closed_h, closed_c)[0][-1][0]
            else:
                m_ctx = np.zeros(cfg.matched_hidden)
            pos = positional_features(N - state.video_cursor, M - state.text_cursor, len(slots))
            sv = np.concatenate([enc_v[state.video_cursor], enc_s[state.text_cursor], ah[-1][0], m_ctx, pos])
            probs = self.classify(sv, valid_actions(state, actions_cfg))
            step_probs.append(probs)
            if forced is not None:
                a = Action(forced[len(taken)])
            else:
                a = actions_cfg[int(np.argmax(probs))]
            taken.append(a)
            state = step(state, a, N, M)
            onehot = np.zeros((1, K))
            onehot[0, actions_cfg.index(a)] = 1.0
            ah, ac = lstm_step(self.lstm["action"], onehot, ah, ac)
        return state_to_alignment(state, N, M), taken, np.array(step_probs)

    # -- checkpoints

    def state_arrays(self):
        arrays = {}
        for p in self.params():
            arrays[f"value/{p.name}"] = p.value
            arrays[f"adam_m/{p.name}"] = p.adam_m
            arrays[f"adam_v/{p.name}"] = p.adam_v
        for mod, s in self.sbn.items():
            arrays[f"sbn/{mod}/running_mean"] = s.running_mean
            arrays[f"sbn/{mod}/running_var"] = s.running_var
        return arrays

    def load_state_arrays(self, arrays):
        for p in self.params():
            key = f"value/{p.name}"
            if key not in arrays:
                raise ContractError(f"checkpoint lacks parameter {p.name}")
            if arrays[key].shape != p.value.shape:
                raise ShapeError(f"checkpoint {p.name} has shape {arrays[key].shape}, model expects {p.value.shape}")
            p.value[...] = arrays[key]
            p.adam_m[...] = arrays[f"adam_m/{p.name}"]
            p.adam_v[...] = arrays[f"adam_v/{p.name}"]
            p.version += 1
        for mod, s in self.sbn.items():
            s.running_mean = np.array(arrays[f"sbn/{mod}/running_mean"])
            s.running_var = np.array(arrays[f"sbn/{mod}/running_var"])


def model_config_dict(cfg: ModelConfig) -> dict:
    d = asdict(cfg)
    d["action_set"] = list(cfg.action_set)
    return d


def save_checkpoint(path, model: AlignmentModel, extra: dict | None = None):
    """Write parameters, Adam moments, SBN statistics and metadata into one ``.npz`` file."""
    meta = dict(version=CHECKPOINT_VERSION, model=model_config_dict(model.config),
                rp_seeds={m: [rp.seed, rp.stream] for m, rp in model.rp.items()},
                extra=extra or {})
    arrays = dict(model.state_arrays())
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        np.savez(f, **arrays)
    tmp.replace(path)


def load_checkpoint(path, expect: ModelConfig | None = None):
    """Return ``(model, extra_metadata)``; raises on version or configuration mismatch."""
    with np.load(path) as z:
        arrays = {k: z[k] for k in z.files}
    meta = json.loads(arrays.pop("__meta__").tobytes().decode("utf-8"))
    if meta.get("version") != CHECKPOINT_VERSION:
        raise ContractError(f"unsupported checkpoint version {meta.get('version')}")
    cfg = ModelConfig.from_dict(meta["model"])
    if expect is not None and model_config_dict(expect) != model_config_dict(cfg):
        raise ShapeError("checkpoint model configuration differs from the requested one")
    model = AlignmentModel(cfg)
    model.load_state_arrays(arrays)
    return model, meta.get("extra", {})
