"""Point-set layers: shared per-point MLPs, set aggregators, canonical sorting."""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError

AGGREGATORS = ("max", "average", "attention", "sorted_mlp")


@dataclass(frozen=True)
class ParamSpec:
    name: str
    shape: tuple
    init: str  # glorot | zeros | ones | identity


class Scope:
    """Binds parameter tensors, normalization statistics and the run mode.

    Layers look their parameters up by dotted name relative to ``prefix``.
    """

    def __init__(self, params, bn, mode="eval", momentum=0.5, rng=None, prefix=""):
        if mode not in ("train", "eval"):
            raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
        self.params = params
        self.bn = bn
        self.mode = mode
        self.momentum = momentum
        self.rng = rng
        self.prefix = prefix

    def child(self, name):
        return Scope(self.params, self.bn, self.mode, self.momentum, self.rng,
                     self._key(name))

    def _key(self, name):
        return f"{self.prefix}.{name}" if self.prefix else name

    def __getitem__(self, name):
        return self.params[self._key(name)]

    def __contains__(self, name):
        return self._key(name) in self.params

    def stats(self, name):
        return self.bn[self._key(name)]


@dataclass(frozen=True)
class SharedMLPSpec:
    """A dense stack applied to every point with one shared parameter set."""

    in_width: int
    layer_widths: tuple
    use_batch_norm: bool = True
    final_activation: str = "relu"

    @property
    def out_width(self):
        return self.layer_widths[-1] if self.layer_widths else self.in_width

    def param_specs(self, prefix):
        specs = []
        width = self.in_width
        for i, out in enumerate(self.layer_widths):
            specs += layer_param_specs(f"{prefix}.{i}", width, out, self.use_batch_norm)
            width = out
        return specs

    def bn_widths(self, prefix):
        if not self.use_batch_norm:
            return {}
        return {f"{prefix}.{i}": w for i, w in enumerate(self.layer_widths)}


def layer_param_specs(name, fan_in, fan_out, batch_norm, weight_init="glorot", bias_init="zeros"):
    specs = [ParamSpec(f"{name}.weight", (fan_in, fan_out), weight_init),
             ParamSpec(f"{name}.bias", (fan_out,), bias_init)]
    if batch_norm:
        specs += [ParamSpec(f"{name}.gamma", (fan_out,), "ones"),
                  ParamSpec(f"{name}.beta", (fan_out,), "zeros")]
    return specs


def dense_layer(x, scope, name, batch_norm=True, activation="relu"):
    """Dense, optional batch norm, optional ReLU over the last axis."""
    layer = scope.child(name)
    y = T.dense(x, layer["weight"], layer["bias"])
    if batch_norm:
        y = T.batch_norm(y, layer["gamma"], layer["beta"], scope.stats(name),
                         mode=scope.mode, momentum=scope.momentum)
    if activation == "relu":
        y = T.relu(y)
    elif activation not in (None, "none"):
        raise ConfigError(f"unknown activation {activation!r}")
    return y


def shared_mlp_forward(points, spec, scope):
    """Map each point of ``(..., n, d)`` through the same dense stack.

    Batch-norm statistics in train mode pool every point of every cloud in
    the batch, which is how a 1x1 convolution over the point axis behaves.
    """
    if points.shape[-1] != spec.in_width:
        raise DimensionError(f"shared MLP expects width {spec.in_width}, got {points.shape[-1]}")
    x = points
    last = len(spec.layer_widths) - 1
    for i in range(len(spec.layer_widths)):
        act = spec.final_activation if i == last else "relu"
        x = dense_layer(x, scope, str(i), spec.use_batch_norm, act)
    return x


@dataclass(frozen=True)
class Aggregator:
    kind: str = "max"

    def __post_init__(self):
        if self.kind not in ("max", "average", "attention"):
            raise ConfigError(f"unknown aggregator {self.kind!r}")

    def param_specs(self, prefix, width):
        if self.kind != "attention":
            return []
        # zero scores start the attention pool as an exact average
        return [ParamSpec(f"{prefix}.weight", (width, 1), "zeros"),
                ParamSpec(f"{prefix}.bias", (1,), "zeros")]


def aggregate(features, agg, scope=None):
    """Reduce ``(..., n, K)`` point features to one ``(..., K)`` vector."""
    if agg.kind == "max":
        return T.max_over_set(features)[0]
    if agg.kind == "average":
        return T.mean_over_set(features)
    return T.attention_pool(features, scope["weight"], scope["bias"])


def canonical_order(points):
    """Indices sorting rows lexicographically (column 0 first), stably."""
    points = np.asarray(points)
    if points.ndim == 2:
        return np.lexsort(points.T[::-1])
    return np.stack([np.lexsort(p.T[::-1]) for p in points])


def sort_canonical(points):
    """Rows of ``points`` in lexicographic order; any permutation of the
    same rows yields the same result."""
    points = T.as_tensor(points)
    return T.gather_rows(points, canonical_order(points.data))
