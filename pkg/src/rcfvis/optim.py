"""AdamW with decoupled weight decay, per-group LR multipliers, poly schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError
from .tensor import Tensor

BETA1 = 0.9
BETA2 = 0.999
ADAM_EPS = 1e-8
POLY_POWER = 0.9


@dataclass
class ParamGroup:
    lr_mult: float = 1.0
    weight_decay: float = 0.0


@dataclass
class OptimState:
    """Per-parameter first/second moments plus schedule bookkeeping."""

    lr0: float
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    groups: dict[str, ParamGroup] = field(default_factory=dict)
    step: int = 0

    @staticmethod
    def create(params: dict[str, Tensor], lr0: float, groups: dict[str, ParamGroup] | None = None) -> "OptimState":
        state = OptimState(lr0=lr0)
        for name, p in params.items():
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
            state.groups[name] = (groups or {}).get(name, ParamGroup())
        return state


def adamw_step(
    state: OptimState,
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    lr: float,
) -> None:
    """One decoupled-weight-decay adaptive-moment update, in place.

    Decay shrinks each parameter by (1 - lr_eff * wd) before the moment
    update; lr_eff folds in the parameter group's LR multiplier.
    """
    if lr < 0:
        raise ArgumentError("learning rate must be nonnegative")
    state.step += 1
    t = state.step
    bc1 = 1.0 - BETA1**t
    bc2 = 1.0 - BETA2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ArgumentError(f"gradient shape {g.shape} mismatches parameter {name} {p.data.shape}")
        grp = state.groups[name]
        lr_eff = lr * grp.lr_mult
        if grp.weight_decay:
            p.data *= 1.0 - lr_eff * grp.weight_decay
        m = state.m[name]
        v = state.v[name]
        m *= BETA1
        m += (1.0 - BETA1) * g
        v *= BETA2
        v += (1.0 - BETA2) * g * g
        p.data -= lr_eff * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)


def poly_lr(iteration: int, iter_max: int, lr0: float) -> float:
    """Poly schedule lr0 * (1 - iter/iter_max)^0.9."""
    if iter_max <= 0:
        raise ArgumentError("iter_max must be positive")
    if not 0 <= iteration <= iter_max:
        raise ArgumentError(f"iteration {iteration} outside [0, {iter_max}]")
    return lr0 * (1.0 - iteration / iter_max) ** POLY_POWER
