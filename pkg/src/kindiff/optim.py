"""AdamW: bias-corrected adaptive moments with decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, NumericFailure
from .tensor import Tensor


@dataclass
class OptimizerState:
    """Per-parameter moment accumulators plus the shared hyperparameters.

    ``step`` counts completed updates and strictly increases by one per
    ``optimizer_step`` call.
    """

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-2
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def init_for(self, params: list[Tensor]) -> "OptimizerState":
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        return self


def grads_for(params: list[Tensor]) -> list[np.ndarray]:
    """Gradients after a backward pass; leaves untouched by the tape read as zero."""
    return [
        p.grad if p.grad is not None else np.zeros_like(p.data) for p in params
    ]


def optimizer_step(
    params: list[Tensor], grads: list[np.ndarray], state: OptimizerState
) -> OptimizerState:
    """One decoupled-weight-decay update, in place on ``params``.

    Rejects the whole update (no state mutation) if any gradient is
    non-finite.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise DimensionError(
            f"optimizer_step arity mismatch: {len(params)} params, "
            f"{len(grads)} grads, {len(state.m)} accumulators"
        )
    for p, g, m in zip(params, grads, state.m):
        if p.data.shape != g.shape or p.data.shape != m.shape:
            raise DimensionError(
                f"optimizer_step shape mismatch: param {p.data.shape}, "
                f"grad {g.shape}, accumulator {m.shape}"
            )
        if not np.all(np.isfinite(g)):
            raise NumericFailure("non-finite gradient; update rejected")

    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        mhat = m / bc1
        vhat = v / bc2
        if state.weight_decay != 0.0:
            p.data -= state.lr * state.weight_decay * p.data
        p.data -= state.lr * mhat / (np.sqrt(vhat) + state.eps)
    return state
