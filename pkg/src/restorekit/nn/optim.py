"""Parameter-space update rules over ParamSets."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layers import ParamSet


def sgd_step(params: ParamSet, grads: ParamSet, alpha: float) -> ParamSet:
    """theta - alpha * g, elementwise; returns a new ParamSet."""
    params.check_aligned(grads)
    return params.combine(grads, -alpha)


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: ParamSet) -> "AdamState":
        return cls(
            step=0,
            m={k: np.zeros_like(vv) for k, vv in params.tensors.items()},
            v={k: np.zeros_like(vv) for k, vv in params.tensors.items()},
        )


def adam_step(
    params: ParamSet,
    grads: ParamSet,
    state: AdamState,
    lr: float = 1e-3,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> tuple[ParamSet, AdamState]:
    """Standard bias-corrected moment update; params and state are not
    mutated, fresh copies come back."""
    params.check_aligned(grads)
    b1, b2 = betas
    t = state.step + 1
    new_m, new_v, new_p = {}, {}, {}
    for k, theta in params.tensors.items():
        g = grads.tensors[k]
        if g.shape != theta.shape:
            raise ValueError(f"gradient shape mismatch for {k!r}")
        m = b1 * state.m[k] + (1.0 - b1) * g
        v = b2 * state.v[k] + (1.0 - b2) * (g * g)
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        new_m[k] = m
        new_v[k] = v
        new_p[k] = theta - lr * m_hat / (np.sqrt(v_hat) + eps)
    return ParamSet(new_p), AdamState(step=t, m=new_m, v=new_v)
