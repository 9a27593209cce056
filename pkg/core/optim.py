"""AdamW with decoupled weight decay, and the two learning-rate schedules."""

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from core.errors import DimensionError, ParameterError
from core.tensor import Parameter

logger = logging.getLogger(__name__)

SCHEDULES = ("cosine", "plateau")


@dataclass
class AdamState:
    step: int = 0
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls(0, [np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adamw_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState,
               lr: float, betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
               weight_decay: float = 1e-2) -> List[np.ndarray]:
    """One AdamW update.  ``state`` advances in place; new parameter arrays are returned.

    Decay is applied to the parameter first, p <- p * (1 - lr * wd), and is
    never folded into the gradient moments.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise DimensionError("adamw_step", [len(params)], [len(grads)], [len(state.m)])
    beta1, beta2 = betas
    state.step += 1
    bias1 = 1.0 - beta1 ** state.step
    bias2 = 1.0 - beta2 ** state.step

    updated = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape or p.shape != state.m[i].shape:
            raise DimensionError("adamw_step", p.shape, g.shape, state.m[i].shape)
        p = p * (1.0 - lr * weight_decay)
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g
        m_hat = state.m[i] / bias1
        v_hat = state.v[i] / bias2
        updated.append(p - lr * m_hat / (np.sqrt(v_hat) + eps))
    return updated


class AdamW:
    """Applies ``adamw_step`` to a list of Parameters using their ``.grad``."""

    def __init__(self, params: Sequence[Parameter], lr: float = 1e-3,
                 betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 1e-2):
        if lr <= 0:
            raise ParameterError(f"lr must be positive, got {lr}")
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.state = AdamState.zeros_like([p.value for p in self.params])

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.value) for p in self.params]
        updated = adamw_step([p.value for p in self.params], grads, self.state,
                             self.lr, self.betas, self.eps, self.weight_decay)
        for p, value in zip(self.params, updated):
            p.assign(value)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


def cosine_lr(epoch: int, epochs: int, lr_max: float, lr_min: float = 0.0) -> float:
    if epochs < 1:
        raise ParameterError(f"epochs must be >= 1, got {epochs}")
    progress = min(epoch, epochs) / epochs
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * progress))


@dataclass
class PlateauState:
    lr: float
    best: float = math.inf
    bad_epochs: int = 0


def plateau_update(state: PlateauState, val_loss: float, patience: int = 5, factor: float = 0.5,
                   threshold: float = 1e-4, lr_min: float = 0.0) -> PlateauState:
    """A loss counts as an improvement when it beats best * (1 - threshold)."""
    if val_loss < state.best * (1.0 - threshold):
        return PlateauState(state.lr, val_loss, 0)
    bad = state.bad_epochs + 1
    if bad >= patience:
        lr = max(lr_min, state.lr * factor)
        logger.info("validation loss stalled for %d epochs; lr %.3g -> %.3g", bad, state.lr, lr)
        return PlateauState(lr, state.best, 0)
    return PlateauState(state.lr, state.best, bad)


def lr_schedule(kind: str, epoch: int, lr_max: float, epochs: int, lr_min: float = 0.0,
                val_losses: Optional[Sequence[float]] = None, patience: int = 5,
                factor: float = 0.5, threshold: float = 1e-4) -> float:
    """Learning rate for ``epoch``.  Plateau replays the validation losses of epochs before it."""
    if epoch < 0:
        raise ParameterError(f"epoch must be >= 0, got {epoch}")
    if kind == "cosine":
        return cosine_lr(epoch, epochs, lr_max, lr_min)
    if kind == "plateau":
        state = PlateauState(lr_max)
        for loss in list(val_losses or [])[:epoch]:
            state = plateau_update(state, loss, patience, factor, threshold, lr_min)
        return state.lr
    raise ParameterError(f"unknown schedule '{kind}' (expected one of {', '.join(SCHEDULES)})")


class LRSchedule:
    """Stateful wrapper used by the training loop: ``lr`` before an epoch, ``step`` after it."""

    def __init__(self, kind: str, lr_max: float, epochs: int, lr_min: float = 0.0):
        if kind not in SCHEDULES:
            raise ParameterError(f"unknown schedule '{kind}' (expected one of {', '.join(SCHEDULES)})")
        self.kind = kind
        self.lr_max = lr_max
        self.lr_min = lr_min
        self.epochs = epochs
        self.epoch = 0
        self._plateau = PlateauState(lr_max)

    @property
    def lr(self) -> float:
        if self.kind == "cosine":
            return cosine_lr(self.epoch, self.epochs, self.lr_max, self.lr_min)
        return self._plateau.lr

    def step(self, val_loss: float) -> float:
        if self.kind == "plateau":
            self._plateau = plateau_update(self._plateau, val_loss, lr_min=self.lr_min)
        self.epoch += 1
        return self.lr
