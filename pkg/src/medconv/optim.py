"""SGD with momentum, sharpness-aware minimization, and schedule-free SGD.

The ``*_step`` functions work on plain numpy arrays and are what the
optimizer classes call; the classes bind them to model parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class OptimState:
    velocity: List[np.ndarray] = field(default_factory=list)
    z: List[np.ndarray] = field(default_factory=list)
    x: List[np.ndarray] = field(default_factory=list)
    t: int = 0


def _check_shapes(params: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> None:
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} parameters but {len(grads)} gradients")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")


def sgd_momentum_step(params, grads, state: OptimState, lr: float, momentum: float, weight_decay: float = 0.0):
    """v <- mu * v + g;  w <- w - lr * v  (in place)."""
    _check_shapes(params, grads)
    if not state.velocity:
        state.velocity = [np.zeros_like(p) for p in params]
    for p, g, v in zip(params, grads, state.velocity):
        if weight_decay:
            g = g + weight_decay * p
        v *= momentum
        v += g
        p -= lr * v
    state.t += 1
    return params, state


def global_norm(grads: Sequence[np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads)))


def sam_step(
    params,
    loss_and_grads: Callable[[], tuple],
    state: OptimState,
    lr: float,
    momentum: float,
    rho: float,
    weight_decay: float = 0.0,
):
    """One sharpness-aware step.

    ``loss_and_grads()`` evaluates the loss at the current contents of
    ``params`` and returns ``(loss, grads)``. It is called at w and at
    w + rho * g / ||g||; the update uses the second gradient from the
    restored point w.
    """
    if rho < 0:
        raise ValueError(f"rho must be nonnegative, got {rho}")
    loss, grads = loss_and_grads()
    if not np.isfinite(loss):
        raise FloatingPointError(f"non-finite loss {loss} in SAM step")
    norm = global_norm(grads)
    if norm > 0 and rho > 0:
        scale = rho / norm
        saved = [p.copy() for p in params]
        for p, g in zip(params, grads):
            p += (scale * g).astype(p.dtype)
        perturbed_loss, grads = loss_and_grads()
        for p, s in zip(params, saved):
            p[...] = s
        if not np.isfinite(perturbed_loss):
            raise FloatingPointError(f"non-finite loss {perturbed_loss} at SAM perturbation")
    sgd_momentum_step(params, grads, state, lr, momentum, weight_decay)
    return loss


def schedulefree_init(params) -> OptimState:
    return OptimState(z=[p.copy() for p in params], x=[p.copy() for p in params], t=0)


def schedulefree_step(grads, state: OptimState, lr: float, beta: float, weight_decay: float = 0.0) -> List[np.ndarray]:
    """Advance (z, x) given the gradient at y = (1 - beta) z + beta x.

    z <- z - lr * g;  x <- (1 - c) x + c z with c = 1 / (t + 1).
    Returns the next gradient point y.
    """
    if lr < 0:
        raise ValueError(f"lr must be nonnegative, got {lr}")
    if not 0 <= beta < 1:
        raise ValueError(f"beta must lie in [0, 1), got {beta}")
    _check_shapes(state.z, grads)
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite gradient in schedule-free step")
    c = 1.0 / (state.t + 1)
    ys = []
    for z, x, g in zip(state.z, state.x, grads):
        if weight_decay:
            y = (1 - beta) * z + beta * x
            g = g + weight_decay * y
        z -= lr * g
        x *= 1 - c
        x += c * z
        ys.append(((1 - beta) * z + beta * x).astype(z.dtype))
    state.t += 1
    return ys


# ---------------------------------------------------------------------------
# Optimizers bound to Tensor parameters
# ---------------------------------------------------------------------------


class Optimizer:
    def __init__(self, params: Sequence[Tensor], lr: float):
        self.params = list(params)
        self.lr = lr
        self.state = OptimState()

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def _grads(self) -> List[np.ndarray]:
        return [np.zeros_like(p.data) if p.grad is None else p.grad for p in self.params]

    def eval_params(self) -> Optional[List[np.ndarray]]:
        """Parameter values to evaluate/checkpoint, if different from ``params``."""
        return None


class SGD(Optimizer):
    def __init__(self, params, lr: float = 0.01, momentum: float = 0.9, weight_decay: float = 0.0):
        super().__init__(params, lr)
        self.momentum = momentum
        self.weight_decay = weight_decay

    def step(self, closure: Optional[Callable[[], float]] = None) -> Optional[float]:
        loss = closure() if closure is not None else None
        sgd_momentum_step([p.data for p in self.params], self._grads(), self.state, self.lr,
                          self.momentum, self.weight_decay)
        return loss


class SAM(Optimizer):
    """Needs a closure that zeroes grads, runs forward/backward and returns the loss."""

    def __init__(self, params, lr: float = 0.01, momentum: float = 0.9, rho: float = 0.05, weight_decay: float = 0.0):
        super().__init__(params, lr)
        self.momentum = momentum
        self.rho = rho
        self.weight_decay = weight_decay

    def step(self, closure: Callable[[], float]) -> float:
        def loss_and_grads():
            loss = closure()
            return loss, [g.copy() for g in self._grads()]

        return sam_step([p.data for p in self.params], loss_and_grads, self.state, self.lr,
                        self.momentum, self.rho, self.weight_decay)


class ScheduleFree(Optimizer):
    """Parameters hold the gradient point y during training.

    Call ``eval_params()`` for the averaged iterate x used at evaluation.
    """

    def __init__(self, params, lr: float = 0.01, beta: float = 0.9, weight_decay: float = 0.0):
        super().__init__(params, lr)
        self.beta = beta
        self.weight_decay = weight_decay
        self.state = schedulefree_init([p.data for p in self.params])

    def step(self, closure: Optional[Callable[[], float]] = None) -> Optional[float]:
        loss = closure() if closure is not None else None
        ys = schedulefree_step(self._grads(), self.state, self.lr, self.beta, self.weight_decay)
        for p, y in zip(self.params, ys):
            p.data[...] = y
        return loss

    def eval_params(self) -> List[np.ndarray]:
        return [x.copy() for x in self.state.x]


def make_optimizer(name: str, params, lr: float, momentum: float = 0.9, rho: float = 0.05,
                   beta: float = 0.9, weight_decay: float = 0.0) -> Optimizer:
    if name == "sgd":
        return SGD(params, lr, momentum, weight_decay)
    if name == "sam":
        return SAM(params, lr, momentum, rho, weight_decay)
    if name == "schedulefree":
        return ScheduleFree(params, lr, beta, weight_decay)
    raise ValueError(f"unknown optimizer {name!r}; expected sgd, sam or schedulefree")
