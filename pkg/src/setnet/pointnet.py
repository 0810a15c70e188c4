"""PointNet classification, segmentation and normal-estimation networks.

All forward functions take a batch of equally sized clouds as a
``(B, n, d)`` array (a single ``(n, d)`` cloud or a :class:`PointCloud`
is promoted to ``B = 1``) and return the intermediate quantities the
analysis code needs next to the network outputs.
"""

import json
import struct
from dataclasses import dataclass, field, fields

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, EmptySetError, ParseError
from .layers import (
    AGGREGATORS,
    Aggregator,
    ParamSpec,
    Scope,
    SharedMLPSpec,
    aggregate,
    canonical_order,
    dense_layer,
    layer_param_specs,
    shared_mlp_forward,
)

MAGIC = b"PNET1"


# --------------------------------------------------------------------- specs


@dataclass(frozen=True)
class TNetSpec:
    input_dim: int
    mlp_widths: tuple = (64, 128, 1024)
    fc_widths: tuple = (512, 256)

    def param_specs(self, prefix):
        mlp = SharedMLPSpec(self.input_dim, self.mlp_widths)
        specs = mlp.param_specs(f"{prefix}.mlp")
        width = self.mlp_widths[-1]
        for i, out in enumerate(self.fc_widths):
            specs += layer_param_specs(f"{prefix}.fc.{i}", width, out, True)
            width = out
        d2 = self.input_dim * self.input_dim
        specs += layer_param_specs(f"{prefix}.out", width, d2, False,
                                   weight_init="zeros", bias_init="identity")
        return specs

    def bn_widths(self, prefix):
        widths = SharedMLPSpec(self.input_dim, self.mlp_widths).bn_widths(f"{prefix}.mlp")
        widths.update({f"{prefix}.fc.{i}": w for i, w in enumerate(self.fc_widths)})
        return widths


@dataclass(frozen=True)
class BackboneSpec:
    """Fields shared by every PointNet variant."""

    input_dim: int = 3
    use_input_transform: bool = True
    use_feature_transform: bool = True
    pre_widths: tuple = (64, 64)
    post_widths: tuple = (64, 128)
    bottleneck: int = 1024
    aggregator: str = "max"
    tnet_mlp_widths: tuple = (64, 128, 1024)
    tnet_fc_widths: tuple = (512, 256)
    reg_weight: float = 0.001
    num_points: int = 0  # only the sorted_mlp baseline needs a fixed size

    def __post_init__(self):
        if self.aggregator not in AGGREGATORS:
            raise ConfigError(f"unknown aggregator {self.aggregator!r}")
        if self.aggregator == "sorted_mlp":
            if self.use_input_transform or self.use_feature_transform:
                raise ConfigError("the sorted_mlp baseline takes no transforms")
            if self.num_points < 1:
                raise ConfigError("the sorted_mlp baseline needs num_points")
        if self.bottleneck < 1 or not self.pre_widths:
            raise ConfigError("bottleneck and pre_widths must be positive")
        if self.reg_weight < 0:
            raise ConfigError("reg_weight must be non-negative")

    @property
    def local_width(self):
        return self.pre_widths[-1]

    @property
    def global_width(self):
        return self.bottleneck

    def input_tnet(self):
        return TNetSpec(self.input_dim, self.tnet_mlp_widths, self.tnet_fc_widths)

    def feature_tnet(self):
        return TNetSpec(self.local_width, self.tnet_mlp_widths, self.tnet_fc_widths)

    def pre_mlp(self):
        return SharedMLPSpec(self.input_dim, tuple(self.pre_widths))

    def post_mlp(self):
        return SharedMLPSpec(self.local_width, tuple(self.post_widths) + (self.bottleneck,))

    def sorted_mlp(self):
        widths = tuple(self.pre_widths) + tuple(self.post_widths) + (self.bottleneck,)
        return SharedMLPSpec(self.num_points * self.input_dim, widths)

    def backbone_params(self):
        if self.aggregator == "sorted_mlp":
            return self.sorted_mlp().param_specs("sorted")
        specs = []
        if self.use_input_transform:
            specs += self.input_tnet().param_specs("input_tnet")
        specs += self.pre_mlp().param_specs("pre")
        if self.use_feature_transform:
            specs += self.feature_tnet().param_specs("feature_tnet")
        specs += self.post_mlp().param_specs("post")
        specs += Aggregator(self.aggregator).param_specs("pool", self.bottleneck)
        return specs

    def backbone_bn(self):
        if self.aggregator == "sorted_mlp":
            return self.sorted_mlp().bn_widths("sorted")
        widths = {}
        if self.use_input_transform:
            widths.update(self.input_tnet().bn_widths("input_tnet"))
        widths.update(self.pre_mlp().bn_widths("pre"))
        if self.use_feature_transform:
            widths.update(self.feature_tnet().bn_widths("feature_tnet"))
        widths.update(self.post_mlp().bn_widths("post"))
        return widths


@dataclass(frozen=True)
class ClassifierSpec(BackboneSpec):
    num_classes: int = 40
    fc_widths: tuple = (512, 256)
    dropout_keep: float = 0.7

    kind = "classifier"

    def param_specs(self):
        specs = self.backbone_params()
        width = self.bottleneck
        for i, out in enumerate(self.fc_widths):
            specs += layer_param_specs(f"head.{i}", width, out, True)
            width = out
        specs += layer_param_specs("logits", width, self.num_classes, False)
        return specs

    def bn_widths(self):
        widths = self.backbone_bn()
        widths.update({f"head.{i}": w for i, w in enumerate(self.fc_widths)})
        return widths


@dataclass(frozen=True)
class SegmenterSpec(BackboneSpec):
    """Per-point head over ``local ++ global`` features.

    ``num_outputs`` is the number of part labels, or 3 for normal estimation.
    ``category_conditioning`` appends a one-hot object category to the
    global feature before it is copied to every point.
    """

    num_outputs: int = 50
    head_widths: tuple = (512, 256, 128, 128)
    category_conditioning: bool = False
    num_categories: int = 16

    kind = "segmenter"

    def __post_init__(self):
        super().__post_init__()
        if self.aggregator == "sorted_mlp":
            raise ConfigError("segmentation needs a per-point backbone")

    @property
    def head_input_width(self):
        extra = self.num_categories if self.category_conditioning else 0
        return self.local_width + self.bottleneck + extra

    def head_mlp(self):
        return SharedMLPSpec(self.head_input_width, tuple(self.head_widths))

    def param_specs(self):
        specs = self.backbone_params() + self.head_mlp().param_specs("seg")
        width = self.head_widths[-1] if self.head_widths else self.head_input_width
        specs += layer_param_specs("out", width, self.num_outputs, False)
        return specs

    def bn_widths(self):
        widths = self.backbone_bn()
        widths.update(self.head_mlp().bn_widths("seg"))
        return widths


def spec_to_dict(spec):
    d = {"kind": spec.kind}
    for f in fields(spec):
        value = getattr(spec, f.name)
        d[f.name] = list(value) if isinstance(value, tuple) else value
    return d


def spec_from_dict(d):
    d = dict(d)
    kind = d.pop("kind")
    cls = {"classifier": ClassifierSpec, "segmenter": SegmenterSpec}.get(kind)
    if cls is None:
        raise ConfigError(f"unknown model kind {kind!r}")
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown spec fields {sorted(unknown)}")
    return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def count_parameters(spec):
    """Learnable scalars: weights, biases, BN scale and shift."""
    return int(np.sum([np.prod(p.shape) for p in spec.param_specs()], dtype=np.int64))


# --------------------------------------------------------------------- state


class ModelState:
    """Learnable parameters as views into one flat vector, plus BN statistics."""

    def __init__(self, spec, seed=0):
        self.spec = spec
        self.seed = seed
        self.param_specs = spec.param_specs()
        total = count_parameters(spec)
        self._bind(np.zeros(total))
        self.bn = {name: T.BatchNormStats(w) for name, w in spec.bn_widths().items()}
        self.bn_momentum = 0.5
        self._initialize(np.random.default_rng(seed))

    def _bind(self, flat):
        self.flat = flat
        self.flat_grad = np.zeros_like(flat)
        self.params = {}
        offset = 0
        for p in self.param_specs:
            size = int(np.prod(p.shape))
            view = slice(offset, offset + size)
            self.params[p.name] = T.Tensor(self.flat[view].reshape(p.shape), requires_grad=True,
                                           grad=self.flat_grad[view].reshape(p.shape))
            offset += size

    def _initialize(self, rng):
        for p in self.param_specs:
            data = self.params[p.name].data
            if p.init == "glorot":
                limit = np.sqrt(6.0 / (p.shape[0] + p.shape[1]))
                data[...] = rng.uniform(-limit, limit, size=p.shape)
            elif p.init == "ones":
                data[...] = 1.0
            elif p.init == "identity":
                d = int(round(np.sqrt(p.shape[0])))
                data[...] = np.eye(d).reshape(-1)
            else:
                data[...] = 0.0

    def zero_grad(self):
        self.flat_grad[...] = 0.0

    def scope(self, mode="eval", rng=None):
        return Scope(self.params, self.bn, mode, self.bn_momentum, rng)

    def copy(self):
        other = ModelState.__new__(ModelState)
        other.__dict__.update(self.__dict__)
        other._bind(self.flat.copy())
        other.bn = {}
        for name, s in self.bn.items():
            c = T.BatchNormStats(s.mean.size)
            c.mean[...] = s.mean
            c.var[...] = s.var
            other.bn[name] = c
        return other


# -------------------------------------------------------------- checkpoints


def _pack_array(a):
    a = np.ascontiguousarray(a, dtype="<f8")
    return struct.pack("<Q", a.size) + a.tobytes()


def _pack_bytes(b):
    return struct.pack("<Q", len(b)) + b


def save_checkpoint(state, path):
    """Write ``state`` in the PNET1 binary layout (see docs/formats.md)."""
    spec_json = json.dumps(spec_to_dict(state.spec), sort_keys=True).encode()
    parts = [MAGIC, _pack_bytes(spec_json), struct.pack("<q", int(state.seed)),
             _pack_array(state.flat), struct.pack("<Q", len(state.bn))]
    for name in sorted(state.bn):
        s = state.bn[name]
        parts += [_pack_bytes(name.encode()), _pack_array(s.mean), _pack_array(s.var)]
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(MAGIC):
        raise ParseError("not a PNET1 checkpoint", path=path)
    pos = len(MAGIC)

    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise ParseError("truncated checkpoint", path=path)
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    def u64():
        return struct.unpack("<Q", take(8))[0]

    def array():
        n = u64()
        return np.frombuffer(take(8 * n), dtype="<f8").astype(np.float64)

    spec = spec_from_dict(json.loads(take(u64()).decode()))
    seed = struct.unpack("<q", take(8))[0]
    state = ModelState(spec, seed)
    flat = array()
    if flat.size != state.flat.size:
        raise ParseError(f"parameter vector has {flat.size} entries, spec needs {state.flat.size}",
                         path=path)
    state.flat[...] = flat
    for _ in range(u64()):
        name = take(u64()).decode()
        if name not in state.bn:
            raise ParseError(f"unknown normalization layer {name!r}", path=path)
        state.bn[name].mean[...] = array()
        state.bn[name].var[...] = array()
    return state


# ----------------------------------------------------------------- forwards


@dataclass
class Stage:
    """One max-pooled stage: per-point features, pooled vector, argmax rows."""

    name: str
    features: np.ndarray  # (B, n, K)
    pooled: np.ndarray  # (B, K)
    argmax: np.ndarray  # (B, K)


@dataclass
class BackboneOutput:
    global_feature: T.Tensor  # (B, K)
    point_features: T.Tensor  # (B, n, K), the pre-pooling map h
    local_features: T.Tensor  # (B, n, 64) after the feature transform
    argmax: object = None  # (B, K) for max pooling
    input_transform: T.Tensor = None
    feature_transform: T.Tensor = None
    stages: list = field(default_factory=list)


@dataclass
class ClassifierOutput:
    logits: T.Tensor  # (B, C)
    penultimate: T.Tensor  # (B, 256) before dropout
    backbone: BackboneOutput


@dataclass
class SegmenterOutput:
    logits: T.Tensor  # (B, n, m)
    backbone: BackboneOutput


def as_batch(points):
    """Promote a cloud, an ``(n, d)`` or a ``(B, n, d)`` array to ``(B, n, d)``."""
    data = getattr(points, "points", points)
    data = np.asarray(data, dtype=np.float64)
    if data.ndim == 2:
        data = data[None]
    if data.ndim != 3:
        raise DimensionError(f"expected (n, d) or (B, n, d) points, got {data.shape}")
    if data.shape[1] == 0:
        raise EmptySetError("cloud has no points")
    return data


def tnet_forward(points, spec, scope):
    """Predict a ``(B, d, d)`` alignment matrix; exactly I at initialization.

    Returns ``(matrix, stage)`` where ``stage`` records the T-net's own
    per-point features and pooled vector.
    """
    x = T.as_tensor(points)
    if x.shape[-1] != spec.input_dim:
        raise DimensionError(f"T-net expects dim {spec.input_dim}, got {x.shape[-1]}")
    h = shared_mlp_forward(x, SharedMLPSpec(spec.input_dim, spec.mlp_widths), scope.child("mlp"))
    u, arg = T.max_over_set(h)
    y = u
    for i in range(len(spec.fc_widths)):
        y = dense_layer(y, scope.child("fc"), str(i))
    y = dense_layer(y, scope, "out", batch_norm=False, activation=None)
    d = spec.input_dim
    matrix = T.reshape(y, (y.shape[0], d, d))
    return matrix, Stage("", h.data, u.data, arg)


def apply_transform(points, matrix):
    """Replace every row ``x`` by ``x @ M`` (per cloud for batched input)."""
    points, matrix = T.as_tensor(points), T.as_tensor(matrix)
    if points.shape[-1] != matrix.shape[-2] or matrix.shape[-1] != matrix.shape[-2]:
        raise DimensionError(f"cannot apply {matrix.shape} to points {points.shape}")
    return T.matmul(points, matrix)


def backbone_forward(state, points, scope, transforms=None):
    """Shared feature extractor of all heads.

    ``transforms`` (``{"input": M1, "feature": M2}``) pins the alignment
    matrices instead of predicting them from ``points``, which turns the
    network into a fixed per-point function for upper-bound analysis.
    """
    spec = state.spec
    x = T.Tensor(as_batch(points))
    stages = []
    if spec.aggregator == "sorted_mlp":
        order = canonical_order(x.data)
        xs = T.gather_rows(x, order)
        flat = T.reshape(xs, (xs.shape[0], -1))
        if flat.shape[1] != spec.num_points * spec.input_dim:
            raise DimensionError(f"sorted_mlp expects {spec.num_points} points")
        g = shared_mlp_forward(flat, spec.sorted_mlp(), scope.child("sorted"))
        return BackboneOutput(g, g, g)
    m1 = m2 = None
    if spec.use_input_transform:
        if transforms is not None:
            m1 = T.Tensor(transforms["input"])
            h = shared_mlp_forward(x, SharedMLPSpec(spec.input_dim, spec.tnet_mlp_widths),
                                   scope.child("input_tnet").child("mlp"))
            u, arg = T.max_over_set(h)
            stage = Stage("input_tnet", h.data, u.data, arg)
        else:
            m1, stage = tnet_forward(x, spec.input_tnet(), scope.child("input_tnet"))
            stage.name = "input_tnet"
        stages.append(stage)
        x = apply_transform(x, m1)
    local = shared_mlp_forward(x, spec.pre_mlp(), scope.child("pre"))
    if spec.use_feature_transform:
        if transforms is not None:
            m2 = T.Tensor(transforms["feature"])
            h = shared_mlp_forward(local, SharedMLPSpec(spec.local_width, spec.tnet_mlp_widths),
                                   scope.child("feature_tnet").child("mlp"))
            u, arg = T.max_over_set(h)
            stage = Stage("feature_tnet", h.data, u.data, arg)
        else:
            m2, stage = tnet_forward(local, spec.feature_tnet(), scope.child("feature_tnet"))
            stage.name = "feature_tnet"
        stages.append(stage)
        local = apply_transform(local, m2)
    h = shared_mlp_forward(local, spec.post_mlp(), scope.child("post"))
    arg = None
    if spec.aggregator == "max":
        g, arg = T.max_over_set(h)
        stages.append(Stage("main", h.data, g.data, arg))
    else:
        g = aggregate(h, Aggregator(spec.aggregator), scope.child("pool"))
    return BackboneOutput(g, h, local, arg, m1, m2, stages)


def classify_forward(state, points, mode="eval", rng=None):
    """Logits ``(B, num_classes)`` plus every intermediate the analysis uses."""
    spec = state.spec
    scope = state.scope(mode, rng)
    bb = backbone_forward(state, points, scope)
    y = bb.global_feature
    for i in range(len(spec.fc_widths)):
        y = dense_layer(y, scope.child("head"), str(i))
    penultimate = y
    y = T.dropout(y, spec.dropout_keep, mode, rng)
    logits = dense_layer(y, scope, "logits", batch_norm=False, activation=None)
    return ClassifierOutput(logits, penultimate, bb)


def segment_forward(state, points, mode="eval", categories=None, rng=None, transforms=None):
    """Per-point scores ``(B, n, num_outputs)``; no dropout in this head."""
    spec = state.spec
    scope = state.scope(mode, rng)
    bb = backbone_forward(state, points, scope, transforms)
    n = bb.local_features.shape[1]
    g = bb.global_feature
    if spec.category_conditioning:
        if categories is None:
            raise ConfigError("category_conditioning needs the object categories")
        onehot = np.zeros((g.shape[0], spec.num_categories))
        onehot[np.arange(g.shape[0]), np.asarray(categories)] = 1.0
        g = T.concat([g, T.Tensor(onehot)], axis=-1)
    x = T.concat([bb.local_features, T.expand_points(g, n)], axis=-1)
    x = shared_mlp_forward(x, spec.head_mlp(), scope.child("seg"))
    logits = dense_layer(x, scope, "out", batch_norm=False, activation=None)
    return SegmenterOutput(logits, bb)


def normal_head_forward(state, points, mode="eval", rng=None):
    """Unnormalized per-point normal predictions ``(B, n, 3)``."""
    if state.spec.num_outputs != 3:
        raise ConfigError("normal estimation needs a segmenter with num_outputs=3")
    return segment_forward(state, points, mode, rng=rng)


# -------------------------------------------------------------------- losses


def orthogonality_loss(matrix):
    """``||I - A A^T||_F^2``; for a batch of matrices, the mean over the batch."""
    a = T.as_tensor(matrix)
    if a.ndim not in (2, 3) or a.shape[-1] != a.shape[-2]:
        raise DimensionError(f"orthogonality loss needs square matrices, got {a.shape}")
    d = a.shape[-1]
    eye = np.broadcast_to(np.eye(d), a.shape).copy()
    diff = T.sub(T.Tensor(eye), T.matmul(a, T.transpose(a)))
    total = T.sum_all(T.square(diff))
    if a.ndim == 3:
        total = T.mul(total, 1.0 / a.shape[0])
    return total


def total_loss(task_loss, feature_transform, reg_weight):
    """Task loss plus the weighted orthogonality term, when a transform exists."""
    if reg_weight < 0:
        raise ConfigError("reg_weight must be non-negative")
    if feature_transform is None or reg_weight == 0:
        return task_loss
    return T.add(task_loss, T.mul(orthogonality_loss(feature_transform), reg_weight))


def normal_loss(pred, gt, eps=1e-12):
    """Mean over points of ``1 - |cos(pred, gt)|``; sign flips cost nothing."""
    pred = T.as_tensor(pred)
    g = np.asarray(getattr(gt, "data", gt), dtype=np.float64)
    if pred.shape != g.shape:
        raise DimensionError(f"prediction {pred.shape} and ground truth {g.shape} differ")
    p = pred.data
    pn = np.sqrt((p * p).sum(axis=-1))
    gn = np.sqrt((g * g).sum(axis=-1))
    dot = (p * g).sum(axis=-1)
    denom = pn * gn + eps
    cos = dot / denom
    count = cos.size
    loss = np.mean(1.0 - np.abs(cos))

    def backward(up):
        safe_pn = np.where(pn > 0, pn, 1.0)
        dcos = g / denom[..., None] - (dot * gn / denom ** 2)[..., None] * p / safe_pn[..., None]
        return (-(np.sign(cos))[..., None] * dcos * (float(up) / count),)

    return T.record("normal_loss", np.array(loss), (pred,), backward)
