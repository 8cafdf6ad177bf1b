"""Small dense networks with hand-written backprop, Adam and a tanh-Gaussian head.

Parameters of a network live in one flat float64 vector; per-layer weight and
bias arrays are views into it. That keeps Adam, Polyak mixing, federated
averaging and checkpointing as single vector operations.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels

LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
_LOG2 = math.log(2.0)


class ParamSet:
    """Flat parameter vector with per-layer views (W[l] is out x in)."""

    def __init__(self, layer_sizes, flat: np.ndarray):
        self.layer_sizes = tuple(int(n) for n in layer_sizes)
        if flat.shape != (n_params(self.layer_sizes),):
            raise ValueError(
                f"flat vector has {flat.shape} entries, layout {self.layer_sizes} needs {n_params(self.layer_sizes)}"
            )
        self.flat = flat

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1

    def _slices(self):
        off = 0
        for fan_in, fan_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            w = slice(off, off + fan_in * fan_out)
            off += fan_in * fan_out
            b = slice(off, off + fan_out)
            off += fan_out
            yield fan_in, fan_out, w, b

    @property
    def weights(self) -> list[np.ndarray]:
        return [self.flat[w].reshape(fo, fi) for fi, fo, w, _ in self._slices()]

    @property
    def biases(self) -> list[np.ndarray]:
        return [self.flat[b] for _, _, _, b in self._slices()]

    def block_names(self) -> list[tuple[str, slice]]:
        out = []
        for l, (_, _, w, b) in enumerate(self._slices()):
            out.append((f"weights[{l}]", w))
            out.append((f"biases[{l}]", b))
        return out


class Mlp(ParamSet):
    """ReLU hidden layers, linear output."""

    def copy(self) -> "Mlp":
        return Mlp(self.layer_sizes, self.flat.copy())


class ParamGradients(ParamSet):
    pass


def n_params(layer_sizes) -> int:
    return sum(a * b + b for a, b in zip(layer_sizes[:-1], layer_sizes[1:]))


def mlp_init(layer_sizes, seed: int) -> Mlp:
    """Glorot-uniform weights (limit sqrt(6 / (fan_in + fan_out))), zero biases."""
    sizes = list(layer_sizes)
    if len(sizes) < 2:
        raise ValueError("an Mlp needs at least an input and an output layer")
    if any(int(n) <= 0 for n in sizes):
        raise ValueError(f"layer sizes must be positive, got {sizes}")
    rng = np.random.default_rng(seed)
    net = Mlp(sizes, np.zeros(n_params(sizes)))
    for fi, fo, w, _ in net._slices():
        limit = math.sqrt(6.0 / (fi + fo))
        net.flat[w] = rng.uniform(-limit, limit, size=fi * fo)
    return net


def _as_batch(net: ParamSet, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.ndim != 2 or X.shape[1] != net.layer_sizes[0]:
        raise ValueError(f"input shape {x.shape} does not match input width {net.layer_sizes[0]}")
    return X, single


def forward_cache(net: Mlp, X: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Batched forward pass; returns the output and the input of every layer."""
    acts = [X]
    h = X
    W, b = net.weights, net.biases
    last = net.n_layers - 1
    for l in range(net.n_layers):
        h = h @ W[l].T + b[l]
        if l < last:
            h = np.maximum(h, 0.0)
            acts.append(h)
    return h, acts


def mlp_forward(net: Mlp, x) -> np.ndarray:
    X, single = _as_batch(net, x)
    out, _ = forward_cache(net, X)
    return out[0] if single else out


def mlp_backward(net: Mlp, x, output_grad, cache=None) -> tuple[ParamGradients, np.ndarray]:
    """Reverse-mode gradient of sum(output_grad * output) w.r.t. parameters and input.

    For a batch the parameter gradient is summed over rows; the input gradient
    keeps one row per sample.
    """
    X, single = _as_batch(net, x)
    G = np.asarray(output_grad, dtype=np.float64)
    G = G[None, :] if G.ndim == 1 else G
    if G.shape != (X.shape[0], net.layer_sizes[-1]):
        raise ValueError(f"output_grad shape {np.shape(output_grad)} does not match the network output")
    acts = forward_cache(net, X)[1] if cache is None else cache
    grads = ParamGradients(net.layer_sizes, np.zeros_like(net.flat))
    W = net.weights
    gW, gb = grads.weights, grads.biases
    delta = G
    for l in range(net.n_layers - 1, -1, -1):
        gW[l][...] = delta.T @ acts[l]
        gb[l][...] = delta.sum(axis=0)
        delta = delta @ W[l]
        if l > 0:
            delta = delta * (acts[l] > 0.0)
    return grads, (delta[0] if single else delta)


@dataclass
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def zeros_like(cls, params: ParamSet, **kw) -> "AdamState":
        return cls(np.zeros_like(params.flat), np.zeros_like(params.flat), **kw)

    def copy(self) -> "AdamState":
        return AdamState(self.first_moment.copy(), self.second_moment.copy(), self.step_count,
                         self.beta1, self.beta2, self.epsilon)


def adam_step(params: ParamSet, grads: ParamSet, state: AdamState, lr: float):
    """One in-place Adam update; returns (params, state) for chaining."""
    if not lr > 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if grads.flat.shape != params.flat.shape:
        raise ValueError("gradient and parameter layouts differ")
    if not np.all(np.isfinite(grads.flat)):
        bad = [name for name, sl in grads.block_names() if not np.all(np.isfinite(grads.flat[sl]))]
        raise FloatingPointError(f"non-finite gradient in {', '.join(bad)}")
    state.step_count += 1
    kernels.adam_update(params.flat, grads.flat, state.first_moment, state.second_moment,
                        float(lr), state.beta1, state.beta2, state.epsilon, float(state.step_count))
    return params, state


# --------------------------------------------------------------------------- #
# tanh-squashed Gaussian
# --------------------------------------------------------------------------- #
def _softplus(x):
    return np.logaddexp(0.0, x)


def log1m_tanh_sq(x):
    """log(1 - tanh(x)^2) computed as 2 (log 2 - x - softplus(-2x))."""
    return 2.0 * (_LOG2 - x - _softplus(-2.0 * x))


@dataclass
class SquashedSample:
    action: np.ndarray      # tanh(pre), shape (..., d)
    log_prob: np.ndarray    # summed over the last axis
    pre: np.ndarray
    std: np.ndarray
    noise: np.ndarray
    log_std_active: np.ndarray = field(repr=False)  # 1 where the clamp is inactive


def sample_squashed(mean, log_std, noise) -> SquashedSample:
    mean = np.asarray(mean, dtype=np.float64)
    log_std = np.asarray(log_std, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if not (mean.shape == log_std.shape == noise.shape):
        raise ValueError(f"shape mismatch: mean {mean.shape}, log_std {log_std.shape}, noise {noise.shape}")
    ls = np.clip(log_std, LOG_STD_MIN, LOG_STD_MAX)
    std = np.exp(ls)
    pre = mean + std * noise
    action = np.tanh(pre)
    logp = -0.5 * noise**2 - ls - _HALF_LOG_2PI - log1m_tanh_sq(pre)
    active = ((log_std >= LOG_STD_MIN) & (log_std <= LOG_STD_MAX)).astype(np.float64)
    return SquashedSample(action, logp.sum(axis=-1), pre, std, noise, active)


def squashed_gaussian(mean, log_std, noise):
    """Reparameterized tanh-Gaussian sample: returns (action, log_prob)."""
    s = sample_squashed(mean, log_std, noise)
    return s.action, s.log_prob


def squashed_backward(s: SquashedSample, grad_action, grad_logp):
    """Chain dL/daction (..., d) and dL/dlog_prob (...) back to (dL/dmean, dL/dlog_std).

    With noise held fixed: dlogp/dmean = 2a, dlogp/dlog_std = -1 + 2 a std noise,
    da/dmean = 1 - a^2, da/dlog_std = (1 - a^2) std noise.
    """
    a = s.action
    one_m = 1.0 - a * a
    gl = np.asarray(grad_logp, dtype=np.float64)[..., None]
    d_pre = grad_action * one_m + gl * 2.0 * a
    g_mean = d_pre
    g_log_std = (d_pre * s.std * s.noise - gl) * s.log_std_active
    return g_mean, g_log_std
