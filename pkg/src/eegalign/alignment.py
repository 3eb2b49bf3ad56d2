"""Per-subject feature alignment.

Two mechanisms operate on the trials of a single subject (or session):

* statistical alignment: standardise every channel with its mean and
  population std taken over the subject's trials and time, then apply a
  shared trainable per-channel affine;
* deep-set alignment: average the subject's feature vectors, compress the
  average with a trainable map, and feed it back into every trial.

All set reductions use :func:`set_mean`, which is bitwise invariant to trial
order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, as_tensor, broadcast_to, clamp_min, concat, elu, linear, set_mean, transpose

DEFAULT_EPS = 1e-5


class EmptySetError(ValueError):
    """A subject group contains no trials."""


@dataclass
class AlignmentStats:
    mean: Tensor  # [C]
    std: Tensor   # [C], population definition
    n_trials: int
    n_timepoints: int


def _reduce_axes(x: Tensor) -> tuple:
    if x.ndim == 2:
        return (0,)
    if x.ndim == 3:
        return (0, 2)
    raise ValueError(f"features must be [K, C] or [K, C, T], got shape {x.shape}")


def _broadcastable(v: Tensor, ndim: int) -> Tensor:
    return v.reshape(1, -1) if ndim == 2 else v.reshape(1, -1, 1)


def compute_stats(features) -> AlignmentStats:
    """Per-channel mean and population std over trials (and time)."""
    x = as_tensor(features)
    axes = _reduce_axes(x)
    if x.shape[0] == 0:
        raise EmptySetError("cannot compute alignment statistics over zero trials")
    mean = set_mean(x, axes)
    centred = x - _broadcastable(mean, x.ndim)
    var = set_mean(centred * centred, axes)
    return AlignmentStats(mean=mean, std=var.sqrt(), n_trials=x.shape[0],
                          n_timepoints=x.shape[2] if x.ndim == 3 else 1)


class StatAlignLayer:
    """Trainable per-channel weight and bias applied after standardisation."""

    def __init__(self, channels: int, eps: float = DEFAULT_EPS):
        if eps <= 0:
            raise ValueError("epsilon must be positive")
        self.channels = channels
        self.eps = eps
        self.weight = Tensor(np.ones(channels), requires_grad=True)
        self.bias = Tensor(np.zeros(channels), requires_grad=True)

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def __call__(self, x: Tensor, boundaries) -> Tensor:
        return apply_per_subject(lambda g: standardize(g, compute_stats(g), self), x, boundaries)


def standardize(features, stats: AlignmentStats, layer: StatAlignLayer) -> Tensor:
    """``weight * (x - mean) / max(std, eps) + bias`` per channel.

    The std is floored at ``eps`` rather than offset by it, so positive
    rescaling of a channel (std >= eps) cancels exactly.
    """
    x = as_tensor(features)
    if stats.mean.shape[0] != x.shape[1] or layer.channels != x.shape[1]:
        raise ValueError(f"statistics for {stats.mean.shape[0]} channels, layer for {layer.channels}, "
                         f"features have {x.shape[1]}")
    scale = clamp_min(stats.std, layer.eps)
    z = (x - _broadcastable(stats.mean, x.ndim)) / _broadcastable(scale, x.ndim)
    return z * _broadcastable(layer.weight, x.ndim) + _broadcastable(layer.bias, x.ndim)


def apply_per_subject(fn, x: Tensor, boundaries) -> Tensor:
    """Run ``fn`` on each contiguous subject group and restack the results."""
    bounds = list(boundaries)
    if bounds[0] != 0 or bounds[-1] != x.shape[0] or any(b <= a for a, b in zip(bounds, bounds[1:])):
        if any(b == a for a, b in zip(bounds, bounds[1:])):
            raise EmptySetError(f"empty subject group in boundaries {bounds}")
        raise ValueError(f"boundaries {bounds} do not partition {x.shape[0]} trials")
    if len(bounds) == 2:
        return fn(x)
    return concat([fn(x[a:b]) for a, b in zip(bounds, bounds[1:])], axis=0)


class DeepSetAlign:
    """Deep-set update ``out_k = elu(L([x_k, elu(G(mean_k x_k))]))``.

    ``G`` maps N features to a readout of size R < N, ``L`` maps N + R back
    to N. For [K, C, T] inputs the set is every (trial, time) position of the
    subject and the update acts pointwise in time.
    """

    def __init__(self, n_features: int, rng: np.random.Generator, readout_dim: int | None = None):
        r = readout_dim if readout_dim is not None else max(1, n_features // 4)
        if not 1 <= r < n_features or n_features < 2:
            raise ValueError(f"readout dim {r} must be in [1, {n_features})")
        self.n_features = n_features
        self.readout_dim = r
        self.gamma_w = _uniform(rng, (r, n_features), n_features)
        self.gamma_b = Tensor(np.zeros(r), requires_grad=True)
        self.lambda_w = _uniform(rng, (n_features, n_features + r), n_features + r)
        self.lambda_b = Tensor(np.zeros(n_features), requires_grad=True)

    def parameters(self) -> list[Tensor]:
        return [self.gamma_w, self.gamma_b, self.lambda_w, self.lambda_b]

    def readout(self, x: Tensor) -> Tensor:
        axes = _reduce_axes(x)
        if x.shape[0] == 0:
            raise EmptySetError("deep-set readout over zero trials")
        return elu(linear(set_mean(x, axes).reshape(1, -1), self.gamma_w, self.gamma_b))

    def forward(self, x: Tensor) -> Tensor:
        x = as_tensor(x)
        r = self.readout(x)
        if x.ndim == 2:
            joined = concat([x, broadcast_to(r, (x.shape[0], self.readout_dim))], axis=1)
            return elu(linear(joined, self.lambda_w, self.lambda_b))
        K, C, T = x.shape
        xt = transpose(x, (0, 2, 1))
        joined = concat([xt, broadcast_to(r.reshape(1, 1, -1), (K, T, self.readout_dim))], axis=2)
        return transpose(elu(linear(joined, self.lambda_w, self.lambda_b)), (0, 2, 1))

    def __call__(self, x: Tensor, boundaries) -> Tensor:
        return apply_per_subject(self.forward, x, boundaries)


def deepset_forward(features, module: DeepSetAlign) -> Tensor:
    """Apply ``module`` to the trials of one subject."""
    return module.forward(as_tensor(features))


def _uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)
