"""Shared oracles for the test suite, independent of the code paths they check."""

import numpy as np

from cpqlab.nn import autodiff as ad


def flatten(arrays):
    return np.concatenate([a.reshape(-1) for a in arrays])


def directional_fd_check(build_loss, arrays, rng, n_points=10, h=1e-5,
                         rel_tol=1e-4, jitter=0.05):
    """Central-difference check of analytic gradients at random parameter points.

    `build_loss(list_of_ndarrays) -> float` must be deterministic;
    `build_loss_graph` is derived by wrapping the same arrays as leaves.
    At each point the full gradient is compared against a random-direction
    central difference, which exercises every coordinate in aggregate.
    """
    def loss_value(arrs):
        leaves = [ad.Var(a) for a in arrs]
        return float(build_loss(leaves).value)

    for _ in range(n_points):
        point = [a + jitter * rng.standard_normal(a.shape) for a in arrays]
        leaves = [ad.Var(p, requires_grad=True) for p in point]
        loss = build_loss(leaves)
        grads = ad.grads_of(loss, leaves)
        direction = [rng.standard_normal(a.shape) for a in arrays]
        norm = np.linalg.norm(flatten(direction))
        direction = [d / norm for d in direction]
        plus = loss_value([p + h * d for p, d in zip(point, direction)])
        minus = loss_value([p - h * d for p, d in zip(point, direction)])
        fd = (plus - minus) / (2.0 * h)
        analytic = float(sum((g * d).sum() for g, d in zip(grads, direction)))
        scale = max(abs(fd), abs(analytic), 1e-6)
        assert abs(fd - analytic) / scale <= rel_tol, (
            f"gradient mismatch: finite-difference {fd:.10g} vs analytic "
            f"{analytic:.10g}")


def value_iteration_q(transitions, table, gamma, policy, iters=100000, tol=0.0):
    """Plain fixed-point iteration oracle for policy evaluation."""
    s_n, a_n, _ = transitions.shape
    q = np.zeros((s_n, a_n))
    for _ in range(iters):
        v = (policy * q).sum(axis=1)
        q_new = table + gamma * transitions @ v
        if tol and np.max(np.abs(q_new - q)) < tol:
            return q_new
        q = q_new
    return q
