"""Adam with bias correction, and global-norm gradient clipping."""

from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

from catch_prolong.nn.kernel import Params, ShapeError


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: Params, lr: float = 1e-3, beta1: float = 0.9,
                   beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        return cls(
            lr=lr, beta1=beta1, beta2=beta2, eps=eps,
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


def adam_step(params: Params, grads: Params, state: AdamState) -> Tuple[Params, AdamState]:
    """
    One Adam update. Returns new parameter arrays; the moment estimates in
    `state` are updated in place and its step counter incremented.
    """
    if state.step < 0:
        raise ValueError(f"Adam step counter must be non-negative, got {state.step}")
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step

    updated = {}
    for key, param in params.items():
        g = grads[key]
        if g.shape != param.shape:
            raise ShapeError(f"{key}: gradient shape {g.shape} does not match parameter {param.shape}")
        if key not in state.m:
            state.m[key] = np.zeros_like(param)
            state.v[key] = np.zeros_like(param)
        state.m[key] = state.beta1 * state.m[key] + (1.0 - state.beta1) * g
        state.v[key] = state.beta2 * state.v[key] + (1.0 - state.beta2) * (g * g)
        m_hat = state.m[key] / bc1
        v_hat = state.v[key] / bc2
        updated[key] = param - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return updated, state


def global_norm(grads: Params) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for _, g in sorted(grads.items()))))


def clip_by_global_norm(grads: Params, max_norm: Optional[float]) -> Tuple[Params, float]:
    """Scale all gradients down together when their joint norm exceeds max_norm."""
    norm = global_norm(grads)
    if max_norm is None or max_norm <= 0 or norm <= max_norm:
        return grads, norm
    factor = max_norm / norm
    return {k: g * factor for k, g in grads.items()}, norm
