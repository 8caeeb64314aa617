"""AdamW (decoupled weight decay) and exponential moving averages of weights."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class AdamWState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adamw_init(params: list[Tensor], lr: float, beta1: float = 0.9,
               beta2: float = 0.999, eps: float = 1e-8,
               weight_decay: float = 0.0) -> AdamWState:
    state = AdamWState(lr=lr, beta1=beta1, beta2=beta2, eps=eps,
                       weight_decay=weight_decay)
    state.m = [np.zeros_like(p.data) for p in params]
    state.v = [np.zeros_like(p.data) for p in params]
    return state


def adamw_step(state: AdamWState, params: list[Tensor], grads: list[Tensor]) -> None:
    """One in-place update. The decay term is applied directly to the weights,
    never routed through the moment estimates."""
    if len(params) != len(grads):
        raise ValueError(f"adamw_step: {len(params)} params vs {len(grads)} grads")
    if len(params) != len(state.m):
        raise ValueError(f"adamw_step: state tracks {len(state.m)} params, got {len(params)}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        gd = g.data
        if gd.shape != p.data.shape:
            raise ValueError(
                f"adamw_step: grad shape {list(gd.shape)} != param shape {list(p.data.shape)}"
            )
        m *= b1
        m += (1.0 - b1) * gd
        v *= b2
        v += (1.0 - b2) * gd * gd
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        if state.weight_decay:
            p.data -= np.float32(state.lr * state.weight_decay) * p.data
        p.data -= np.float32(state.lr) * update.astype(np.float32)


@dataclass
class EmaState:
    decay: float
    shadow: list[np.ndarray] = field(default_factory=list)


def ema_init(params: list[Tensor], decay: float) -> EmaState:
    if not 0.0 <= decay < 1.0:
        raise ValueError(f"ema decay must be in [0, 1), got {decay}")
    return EmaState(decay=decay, shadow=[p.data.copy() for p in params])


def ema_update(state: EmaState, params: list[Tensor]) -> None:
    """shadow <- decay * shadow + (1 - decay) * params, elementwise."""
    if len(params) != len(state.shadow):
        raise ValueError(f"ema_update: {len(state.shadow)} shadows vs {len(params)} params")
    d = np.float32(state.decay)
    one_minus = np.float32(1.0 - state.decay)
    for s, p in zip(state.shadow, params):
        if s.shape != p.data.shape:
            raise ValueError(
                f"ema_update: shadow shape {list(s.shape)} != param shape {list(p.data.shape)}"
            )
        s *= d
        s += one_minus * p.data
