"""Cross-modality correlation modelling and multi-representation fusion.

Each imaging modality is encoded independently; this module turns the
per-modality features into *correlated* representations (each one a
learned per-channel linear combination of the other modalities'
features) and then fuses a set of representations into a single map,
either by mean/max pooling across the set or by a combined
channel + spatial attention gate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import PreconditionError

NUM_MODALITIES = 4


@dataclass
class CorrelationParams:
    """Per-channel combination coefficients for one modality.

    ``alpha``, ``beta``, ``gamma`` weight the other three modalities'
    features (in ascending modality order); ``delta`` is an additive
    per-channel bias. All four are [1, C] tensors.
    """

    alpha: Tensor
    beta: Tensor
    gamma: Tensor
    delta: Tensor

    def __post_init__(self):
        c = self.alpha.shape[-1]
        for name in ("beta", "gamma", "delta"):
            t = getattr(self, name)
            if t.shape[-1] != c:
                raise PreconditionError(
                    f"{name} length {t.shape[-1]} != alpha length {c}")

    @property
    def channels(self) -> int:
        return self.alpha.shape[-1]


def _per_channel(v: Tensor) -> Tensor:
    """[1, C] -> [1, C, 1, 1, 1] for broadcasting over space."""
    return ag.reshape(v, (1, v.shape[-1], 1, 1, 1))


def correlation_combine(params: CorrelationParams, f_j: Tensor,
                        f_k: Tensor, f_m: Tensor) -> Tensor:
    """Weighted per-channel combination of three feature maps plus bias."""
    if f_j.shape != f_k.shape or f_j.shape != f_m.shape:
        raise PreconditionError(
            f"feature shapes differ: {f_j.shape}, {f_k.shape}, {f_m.shape}")
    if f_j.shape[1] != params.channels:
        raise PreconditionError(
            f"feature channels {f_j.shape[1]} != parameter length "
            f"{params.channels}")
    out = ag.mul(f_j, _per_channel(params.alpha))
    out = ag.add(out, ag.mul(f_k, _per_channel(params.beta)))
    out = ag.add(out, ag.mul(f_m, _per_channel(params.gamma)))
    return ag.add(out, _per_channel(params.delta))


class ParamEstimator:
    """Two dense layers mapping one modality's pooled features to its
    combination coefficients (4 per-channel vectors)."""

    def __init__(self, channels: int, rng: np.random.Generator, dtype):
        self.channels = channels
        self.w1 = _he(rng, (channels, channels), channels, dtype)
        self.b1 = _zeros(channels, dtype)
        self.w2 = _he(rng, (4 * channels, channels), channels, dtype)
        self.b2 = _zeros(4 * channels, dtype)

    def parameters(self):
        return [("fc1.w", self.w1), ("fc1.b", self.b1),
                ("fc2.w", self.w2), ("fc2.b", self.b2)]

    def __call__(self, f_i: Tensor) -> CorrelationParams:
        pooled = ag.global_avg_pool(f_i)  # [1, C]
        hidden = ag.leaky_relu(ag.dense(pooled, self.w1, self.b1))
        packed = ag.dense(hidden, self.w2, self.b2)  # [1, 4C]
        c = self.channels
        return CorrelationParams(
            alpha=ag.narrow(packed, 1, 0, c),
            beta=ag.narrow(packed, 1, c, c),
            gamma=ag.narrow(packed, 1, 2 * c, c),
            delta=ag.narrow(packed, 1, 3 * c, c))


class CorrelationModel:
    """One estimator per modality at a given feature resolution.

    Produces exactly as many correlated representations as there are
    modalities; representation i combines the features of the other
    three modalities (ascending index order -> alpha, beta, gamma).
    """

    def __init__(self, channels: int, rng: np.random.Generator, dtype):
        self.estimators = [ParamEstimator(channels, rng, dtype)
                           for _ in range(NUM_MODALITIES)]

    def parameters(self):
        for i, est in enumerate(self.estimators):
            for suffix, t in est.parameters():
                yield f"mpe{i}.{suffix}", t

    def __call__(self, feats: list[Tensor]) -> list[Tensor]:
        if len(feats) != NUM_MODALITIES:
            raise PreconditionError(
                f"expected {NUM_MODALITIES} feature maps, got {len(feats)}")
        reps = []
        for i, est in enumerate(self.estimators):
            others = [feats[j] for j in range(NUM_MODALITIES) if j != i]
            reps.append(correlation_combine(est(feats[i]), *others))
        return reps


def channel_attention(stacked: Tensor, group_channels: int,
                      w1: Tensor, w2: Tensor) -> Tensor:
    """Scale each C-channel block of a concatenation by a learned gate.

    ``stacked`` is [1, N*C, D, H, W] holding N representations of
    ``group_channels`` channels each. Each block's gate is the sigmoid
    of a two-layer bottleneck applied to the blocks' global means.
    """
    nc = stacked.shape[1]
    if nc % group_channels:
        raise PreconditionError(
            f"channel extent {nc} not divisible by group size {group_channels}")
    n = nc // group_channels
    pooled = ag.global_avg_pool(stacked)               # [1, N*C]
    grouped = ag.reshape(pooled, (1, n, group_channels))
    g = ag.mean_axis(grouped, 2)                       # [1, N]
    gate = ag.sigmoid(ag.dense(ag.relu(ag.dense(g, w2)), w1))
    weights = ag.repeat_channels(gate, group_channels)  # [1, N*C]
    return ag.mul(stacked, ag.reshape(weights, (1, nc, 1, 1, 1)))


def spatial_attention(stacked: Tensor, ws_w: Tensor, ws_b: Tensor) -> Tensor:
    """Scale every spatial position by the sigmoid of a channel squeeze."""
    q = ag.conv3d(stacked, ws_w, ws_b)  # [1, 1, D, H, W]
    return ag.mul(stacked, ag.sigmoid(q))


class AttentionFusion:
    """Channel + spatial attention over N stacked representations,
    reduced back to one representation's width by a pointwise conv."""

    def __init__(self, n_inputs: int, channels: int,
                 rng: np.random.Generator, dtype):
        if n_inputs not in (4, 5):
            raise PreconditionError(
                f"fusion takes 4 or 5 representations, got {n_inputs}")
        self.n_inputs = n_inputs
        self.channels = channels
        hidden = max(1, n_inputs // 2)
        self.w1 = _he(rng, (n_inputs, hidden), hidden, dtype)
        self.w2 = _he(rng, (hidden, n_inputs), n_inputs, dtype)
        nc = n_inputs * channels
        self.ws_w = _he(rng, (1, nc, 1, 1, 1), nc, dtype)
        self.ws_b = _zeros(1, dtype)
        self.reduce_w = _he(rng, (channels, nc, 1, 1, 1), nc, dtype)
        self.reduce_b = _zeros(channels, dtype)

    def parameters(self):
        return [("w1", self.w1), ("w2", self.w2),
                ("ws.w", self.ws_w), ("ws.b", self.ws_b),
                ("reduce.w", self.reduce_w), ("reduce.b", self.reduce_b)]

    def __call__(self, reps: list[Tensor]) -> Tensor:
        if len(reps) != self.n_inputs:
            raise PreconditionError(
                f"expected {self.n_inputs} inputs, got {len(reps)}")
        stacked = ag.concat(reps, axis=1)
        gated = ag.add(
            channel_attention(stacked, self.channels, self.w1, self.w2),
            spatial_attention(stacked, self.ws_w, self.ws_b))
        return ag.conv3d(gated, self.reduce_w, self.reduce_b)


def fuse(reps: list[Tensor], mode: str,
         attention: AttentionFusion | None = None) -> Tensor:
    """Combine equal-shape representations into one."""
    if not reps:
        raise PreconditionError("cannot fuse an empty representation list")
    ref = reps[0].shape
    for r in reps[1:]:
        if r.shape != ref:
            raise PreconditionError(
                f"representation shapes differ: {ref} vs {r.shape}")
    if mode == "mean":
        acc = reps[0]
        for r in reps[1:]:
            acc = ag.add(acc, r)
        return acc * (1.0 / len(reps))
    if mode == "max":
        acc = reps[0]
        for r in reps[1:]:
            acc = ag.maximum(acc, r)
        return acc
    if mode == "attention":
        if attention is None:
            raise PreconditionError("attention fusion requires weights")
        return attention(reps)
    raise PreconditionError(f"unknown fusion mode {mode!r}")


def _he(rng: np.random.Generator, shape, fan_in: int, dtype,
        gain: float = 1.0) -> Tensor:
    """Uniform fan-in init; gain < 1 damps layers that would otherwise
    inflate the activation scale (residual branches, output heads)."""
    limit = gain * float(np.sqrt(6.0 / fan_in))
    return Tensor(rng.uniform(-limit, limit, size=shape),
                  requires_grad=True, dtype=dtype)


def _zeros(n: int, dtype) -> Tensor:
    return Tensor(np.zeros(n), requires_grad=True, dtype=dtype)
