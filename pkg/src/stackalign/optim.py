"""Adam, layer-wise adaptive rate scaling on top of Adam, clipping and LR schedules."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensorcore import ContractError, ParameterError, ParamTensor, ShapeError, global_norm


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class AdamConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0

    def __post_init__(self):
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ParameterError(f"Adam betas must lie in [0, 1), got {self.beta1}, {self.beta2}")


@dataclass
class LarsConfig:
    enabled: bool = True
    eta: float = 0.007
    weight_norm_floor: float = 1e-12
    # "weights": matrices only; "all": every parameter tensor
    policy: str = "weights"

    def __post_init__(self):
        if self.eta <= 0:
            raise ParameterError(f"LARS eta must be positive, got {self.eta}")
        if self.policy not in ("weights", "all"):
            raise ParameterError(f"unknown LARS policy {self.policy!r}")

    def applies_to(self, param: ParamTensor) -> bool:
        if not self.enabled:
            return False
        return True if self.policy == "all" else param.lars_enabled


def clip_global_norm(params, cap: float = 2.0) -> float:
    """Scale all gradients so their joint L2 norm is at most ``cap``; return the pre-clip norm."""
    if cap <= 0:
        raise ParameterError(f"clip cap must be positive, got {cap}")
    params = list(params)
    g = global_norm(params, "grad")
    if g > cap:
        scale = cap / g
        for p in params:
            p.grad *= scale
    return g


def adam_step_direction(param: ParamTensor, cfg: AdamConfig) -> np.ndarray:
    """Update the moment buffers and return the bias-corrected direction ``m_hat / (sqrt(v_hat) + eps)``.

    ``cfg.step`` must already count the current step (1 on the first update).
    """
    if param.adam_m is None or param.adam_v is None or param.adam_m.shape != param.value.shape:
        raise ContractError(f"Adam moments of {param.name} are not initialized")
    if cfg.step < 1:
        raise ContractError("AdamConfig.step must be >= 1 when computing a direction")
    g = param.grad
    param.adam_m *= cfg.beta1
    param.adam_m += (1 - cfg.beta1) * g
    param.adam_v *= cfg.beta2
    param.adam_v += (1 - cfg.beta2) * g * g
    m_hat = param.adam_m / (1 - cfg.beta1 ** cfg.step)
    v_hat = param.adam_v / (1 - cfg.beta2 ** cfg.step)
    return m_hat / (np.sqrt(v_hat) + cfg.eps)


def apply_update(param: ParamTensor, direction: np.ndarray, lr: float, lars: LarsConfig | None) -> np.ndarray:
    """Apply ``w <- w - delta`` and return ``delta``.

    With LARS the step has norm exactly ``lr * ||w||`` along ``direction``;
    a zero direction skips the update.
    """
    if direction.shape != param.value.shape:
        raise ShapeError(f"direction {direction.shape} does not match {param.name} {param.value.shape}")
    if lars is not None and lars.applies_to(param):
        d_norm = float(np.linalg.norm(direction))
        w_norm = float(np.linalg.norm(param.value))
        if d_norm == 0.0 or w_norm <= lars.weight_norm_floor:
            return np.zeros_like(direction)
        delta = (lr * w_norm / d_norm) * direction
    else:
        delta = lr * direction
    param.value -= delta
    param.version += 1
    return delta


@dataclass
class LrSchedule:
    initial_lr: float
    patience: int = 10
    factor: float = 0.5
    warmup_start: float | None = None
    warmup_end: float | None = None
    warmup_epochs: int = 0
    lr: float = field(default=None)
    best_loss: float = math.inf
    epochs_since_improve: int = 0
    epoch: int = 0

    def __post_init__(self):
        if self.initial_lr <= 0:
            raise ParameterError(f"learning rate must be positive, got {self.initial_lr}")
        if self.patience < 1:
            raise ParameterError(f"patience must be >= 1, got {self.patience}")
        if self.warmup_epochs and (self.warmup_start is None or self.warmup_end is None):
            raise ParameterError("warm-up needs start and end learning rates")
        if self.lr is None:
            self.lr = self.warmup_start if self.warmup_epochs else self.initial_lr

    def state_dict(self):
        return dict(self.__dict__)

    @classmethod
    def from_state(cls, state):
        return cls(**state)


def warmup_lr(sched: LrSchedule, epoch: int) -> float:
    """Learning rate at ``epoch`` (0-based) of the linear warm-up."""
    frac = min(epoch, sched.warmup_epochs) / sched.warmup_epochs
    return sched.warmup_start + frac * (sched.warmup_end - sched.warmup_start)


def schedule_epoch_end(sched: LrSchedule, train_loss: float) -> float:
    """Advance one epoch and return the learning rate for the next one.

    During warm-up the rate is linearly interpolated; afterwards the rate is
    multiplied by ``factor`` once ``patience`` epochs pass without a new best loss.
    """
    if not math.isfinite(train_loss):
        raise TrainingDiverged(f"training loss is {train_loss}")
    sched.epoch += 1
    if sched.warmup_epochs and sched.epoch <= sched.warmup_epochs:
        sched.lr = warmup_lr(sched, sched.epoch)
        sched.best_loss = min(sched.best_loss, train_loss)
        return sched.lr
    if train_loss < sched.best_loss:
        sched.best_loss = train_loss
        sched.epochs_since_improve = 0
    else:
        sched.epochs_since_improve += 1
        if sched.epochs_since_improve >= sched.patience:
            sched.lr *= sched.factor
            sched.epochs_since_improve = 0
    return sched.lr


class Optimizer:
    """Adam with optional per-tensor LARS scaling and global-norm clipping."""

    def __init__(self, params, lr: float, lars: LarsConfig | None = None,
                 adam: AdamConfig | None = None, clip: float | None = 2.0):
        self.params = list(params)
        self.lr = lr
        self.lars = lars
        self.adam = adam or AdamConfig()
        self.clip = clip
        self.last_deltas = {}
        self.last_directions = {}

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def clip_grads(self) -> float:
        if self.clip is None:
            return global_norm(self.params, "grad")
        return clip_global_norm(self.params, self.clip)

    def step(self, record: bool = False):
        self.adam.step += 1
        self.last_deltas.clear()
        self.last_directions.clear()
        for p in self.params:
            d = adam_step_direction(p, self.adam)
            delta = apply_update(p, d, self.lr, self.lars)
            if record:
                self.last_directions[p.name] = d
                self.last_deltas[p.name] = delta

    def state_dict(self):
        return dict(step=self.adam.step, lr=self.lr)
