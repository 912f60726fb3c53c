"""Adam with bias correction, and the polyak soft target update."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .mlp import DimensionError, MlpParams


@dataclass
class AdamState:
    """First/second moment accumulators shaped like the parameters."""

    lr: float
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params: MlpParams, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    flat = params.flat()
    return AdamState(lr=lr, m=[np.zeros_like(a) for a in flat],
                     v=[np.zeros_like(a) for a in flat],
                     beta1=beta1, beta2=beta2, eps=eps)


def adam_step(params: MlpParams, grads: MlpParams,
              state: AdamState) -> tuple[MlpParams, AdamState]:
    """One bias-corrected Adam update; returns fresh params and state."""
    p_flat, g_flat = params.flat(), grads.flat()
    if len(p_flat) != len(state.m):
        raise DimensionError("optimizer state does not match the parameters")
    t = state.step + 1
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(p_flat, g_flat, state.m, state.v):
        if p.shape != g.shape:
            raise DimensionError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        p = p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_p.append(p)
        new_m.append(m)
        new_v.append(v)
    it = iter(new_p)
    out_params = MlpParams([(next(it), next(it)) for _ in params.layers], params.output)
    out_state = AdamState(lr=state.lr, m=new_m, v=new_v, step=t,
                          beta1=state.beta1, beta2=state.beta2, eps=state.eps)
    return out_params, out_state


def soft_update(target: MlpParams, source: MlpParams, rate: float) -> MlpParams:
    """target' = rate * source + (1 - rate) * target, elementwise."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"soft-update rate must lie in [0, 1], got {rate}")
    t_flat, s_flat = target.flat(), source.flat()
    if len(t_flat) != len(s_flat) or any(t.shape != s.shape for t, s in zip(t_flat, s_flat)):
        raise DimensionError("target and source parameter shapes differ")
    mixed = [rate * s + (1.0 - rate) * t for t, s in zip(t_flat, s_flat)]
    it = iter(mixed)
    return MlpParams([(next(it), next(it)) for _ in target.layers], target.output)
