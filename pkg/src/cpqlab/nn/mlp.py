"""Fully connected networks with relu hidden layers, plus the squashed-Gaussian head.

Parameters are plain numpy arrays held in :class:`MlpParams`; gradient-based
code wraps them in autodiff leaves via :func:`leaves` and runs the same
forward (:func:`forward_graph`).  The two forward paths share their layer
arithmetic through the autodiff ops, so there is a single source of truth.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


class DimensionError(ValueError):
    """Input/parameter shapes do not compose."""


@dataclass
class MlpParams:
    """Layer list of (weight, bias) with relu hidden activations.

    output: "identity" leaves the final affine output untouched; "tanh"
    squashes it into (-1, 1).
    """

    layers: list[tuple[np.ndarray, np.ndarray]]
    output: str = "identity"

    @property
    def in_dim(self) -> int:
        return self.layers[0][0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.layers[-1][0].shape[1]

    def copy(self) -> "MlpParams":
        return MlpParams([(w.copy(), b.copy()) for w, b in self.layers], self.output)

    def flat(self) -> list[np.ndarray]:
        out: list[np.ndarray] = []
        for w, b in self.layers:
            out.extend((w, b))
        return out

    def n_params(self) -> int:
        return sum(a.size for a in self.flat())


def init_mlp(sizes: list[int], rng: np.random.Generator,
             output: str = "identity") -> MlpParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init for weights and biases."""
    if len(sizes) < 2:
        raise DimensionError("an MLP needs at least an input and an output width")
    layers = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        b = rng.uniform(-bound, bound, size=(fan_out,))
        layers.append((w, b))
    return MlpParams(layers, output=output)


def zeros_like(params: MlpParams) -> MlpParams:
    return MlpParams([(np.zeros_like(w), np.zeros_like(b)) for w, b in params.layers],
                     params.output)


def leaves(params: MlpParams, requires_grad: bool = True) -> list[ad.Var]:
    """Wrap every parameter array as an autodiff leaf, layer order (w0, b0, w1, ...)."""
    return [ad.Var(a, requires_grad=requires_grad) for a in params.flat()]


def grads_to_params(grads: list[np.ndarray], params: MlpParams) -> MlpParams:
    """Reshape a flat gradient list back into the MlpParams layer structure."""
    it = iter(grads)
    layers = [(next(it), next(it)) for _ in params.layers]
    return MlpParams(layers, params.output)


def forward_graph(param_leaves: list[ad.Var], x, output: str = "identity") -> ad.Var:
    """Run the MLP inside the autodiff graph; `x` may be a Var or an ndarray."""
    h = ad.as_var(x)
    n_layers = len(param_leaves) // 2
    for i in range(n_layers):
        w, b = param_leaves[2 * i], param_leaves[2 * i + 1]
        if h.value.shape[-1] != w.value.shape[0]:
            raise DimensionError(
                f"layer {i}: input width {h.value.shape[-1]} != {w.value.shape[0]}")
        h = ad.affine(h, w, b)
        if i < n_layers - 1:
            h = ad.relu(h)
    if output == "tanh":
        h = ad.tanh(h)
    elif output != "identity":
        raise ValueError(f"unknown output transform {output!r}")
    return h


def mlp_forward(params: MlpParams, x: np.ndarray) -> np.ndarray:
    """Plain-ndarray forward pass, batched over the leading dimension."""
    h = np.asarray(x, dtype=np.float64)
    for i, (w, b) in enumerate(params.layers):
        if h.shape[-1] != w.shape[0]:
            raise DimensionError(f"layer {i}: input width {h.shape[-1]} != {w.shape[0]}")
        h = h @ w + b
        if i < len(params.layers) - 1:
            h = np.maximum(h, 0.0)
    if params.output == "tanh":
        h = np.tanh(h)
    return h


def split_heads(out: ad.Var, head_dim: int) -> tuple[ad.Var, ad.Var]:
    """Split a (n, 2*head_dim) output into two heads, differentiably.

    Realized as two constant projection matmuls so the graph stays inside
    the supported op set.
    """
    width = out.value.shape[1]
    if width != 2 * head_dim:
        raise DimensionError(f"cannot split width {width} into two {head_dim} heads")
    first = np.zeros((width, head_dim))
    first[:head_dim, :] = np.eye(head_dim)
    second = np.zeros((width, head_dim))
    second[head_dim:, :] = np.eye(head_dim)
    return ad.matmul(out, first), ad.matmul(out, second)


def compute_gradients(params: MlpParams, loss_fn) -> tuple[MlpParams, float]:
    """Gradients of a scalar loss with respect to every parameter.

    `loss_fn` receives the list of parameter leaves (layer order) and must
    return a scalar Var built from the supported ops.  Returns a gradient
    structure shaped like `params` together with the loss value.
    """
    lv = leaves(params)
    loss = loss_fn(lv)
    gs = ad.grads_of(loss, lv)
    return grads_to_params(gs, params), float(loss.value)


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def tanh_gaussian_sample(mean: np.ndarray, log_std: np.ndarray,
                         noise: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Reparameterized squashed-Gaussian sample and its log-density.

    action = tanh(mean + exp(log_std) * noise); the log-density includes the
    tanh change-of-variables term, computed in the overflow-safe form
    log(1 - tanh(u)^2) = 2*(log 2 - u - softplus(-2u)).
    Returns (actions, per-row log-densities summed over the action dimension).
    """
    mean = np.asarray(mean, dtype=np.float64)
    log_std = np.asarray(log_std, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if mean.shape != log_std.shape or mean.shape != noise.shape:
        raise DimensionError("mean, log_std and noise must share a shape")
    log_std = np.clip(log_std, LOG_STD_MIN, LOG_STD_MAX)
    u = mean + np.exp(log_std) * noise
    action = np.tanh(u)
    gauss = -log_std - _HALF_LOG_2PI - 0.5 * noise * noise
    correction = 2.0 * (np.log(2.0) - u - _softplus(-2.0 * u))
    log_density = (gauss - correction).sum(axis=-1)
    return action, log_density


def gaussian_log_prob_presquash(mean: np.ndarray, log_std: np.ndarray,
                                u: np.ndarray) -> np.ndarray:
    """Diagonal-Gaussian log-density of pre-squash values, summed over dims."""
    log_std = np.clip(np.asarray(log_std, float), LOG_STD_MIN, LOG_STD_MAX)
    z = (np.asarray(u, float) - np.asarray(mean, float)) * np.exp(-log_std)
    return (-log_std - _HALF_LOG_2PI - 0.5 * z * z).sum(axis=-1)
