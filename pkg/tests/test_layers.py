import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from setnet import tensor as T
from setnet.errors import ConfigError, DimensionError
from setnet.layers import (
    Aggregator,
    Scope,
    SharedMLPSpec,
    aggregate,
    canonical_order,
    dense_layer,
    shared_mlp_forward,
    sort_canonical,
)


def make_scope(spec, rng, prefix="mlp", mode="eval"):
    params = {}
    for p in spec.param_specs(prefix):
        params[p.name] = T.Tensor(rng.normal(size=p.shape), requires_grad=True)
    bn = {name: T.BatchNormStats(w) for name, w in spec.bn_widths(prefix).items()}
    return Scope(params, bn, mode).child(prefix), params


def test_single_dense_layer_parameter_count():
    spec = SharedMLPSpec(3, (64,), use_batch_norm=False)
    assert sum(np.prod(p.shape) for p in spec.param_specs("x")) == 256


def test_dense_layer_matches_manual_formula(rng):
    spec = SharedMLPSpec(3, (4,), use_batch_norm=False)
    scope, params = make_scope(spec, rng)
    x = rng.normal(size=(5, 3))
    y = dense_layer(T.Tensor(x), scope, "0", batch_norm=False)
    expected = np.maximum(x @ params["mlp.0.weight"].data + params["mlp.0.bias"].data, 0)
    np.testing.assert_allclose(y.data, expected, rtol=1e-14)


def test_shared_mlp_is_pointwise_and_bitwise(rng):
    spec = SharedMLPSpec(3, (16, 8))
    scope, _ = make_scope(spec, rng)
    x = rng.normal(size=(2, 7, 3))
    full = shared_mlp_forward(T.Tensor(x), spec, scope).data
    for b in range(2):
        for i in range(7):
            one = shared_mlp_forward(T.Tensor(x[b, i:i + 1]), spec, scope).data
            assert np.array_equal(one[0], full[b, i])


def test_shared_mlp_gradient_in_train_mode(rng):
    spec = SharedMLPSpec(3, (6, 4), final_activation=None)
    scope, params = make_scope(spec, rng, mode="train")
    x = T.Tensor(rng.normal(size=(2, 5, 3)))
    w = T.Tensor(rng.normal(size=(2, 5, 4)))
    names = sorted(params)

    def f(*tensors):
        bound = dict(zip(names, tensors))
        bn = {k: T.BatchNormStats(v.mean.size) for k, v in scope.bn.items()}
        s = Scope(bound, bn, "train").child("mlp")
        return T.sum_all(T.mul(shared_mlp_forward(x, spec, s), w))

    assert T.finite_difference_check(f, [params[n] for n in names]) < 1e-6


def test_shared_mlp_width_mismatch(rng):
    spec = SharedMLPSpec(3, (4,))
    scope, _ = make_scope(spec, rng)
    with pytest.raises(DimensionError):
        shared_mlp_forward(T.Tensor(np.zeros((2, 4))), spec, scope)


def test_scope_mode_and_aggregator_validation():
    with pytest.raises(ConfigError):
        Scope({}, {}, mode="predict")
    with pytest.raises(ConfigError):
        Aggregator("median")


def test_dense_layer_rejects_unknown_activation(rng):
    spec = SharedMLPSpec(3, (4,), use_batch_norm=False)
    scope, _ = make_scope(spec, rng)
    with pytest.raises(ConfigError):
        dense_layer(T.Tensor(np.zeros((2, 3))), scope, "0", batch_norm=False, activation="tanh")


@pytest.mark.parametrize("kind", ["max", "average", "attention"])
def test_aggregators_are_permutation_invariant(kind, rng):
    agg = Aggregator(kind)
    params = {p.name: T.Tensor(rng.normal(size=p.shape)) for p in agg.param_specs("pool", 6)}
    scope = Scope(params, {}).child("pool")
    x = rng.normal(size=(3, 9, 6))
    ref = aggregate(T.Tensor(x), agg, scope).data
    for _ in range(5):
        perm = rng.permutation(9)
        assert np.array_equal(aggregate(T.Tensor(x[:, perm]), agg, scope).data, ref)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 15), st.integers(0, 2**31 - 1), st.booleans())
def test_canonical_sort_forgets_the_input_order(n, seed, coarse):
    rng = np.random.default_rng(seed)
    pts = rng.integers(-2, 3, size=(n, 3)).astype(float) if coarse else rng.normal(size=(n, 3))
    perm = rng.permutation(n)
    a = sort_canonical(pts).data
    b = sort_canonical(pts[perm]).data
    assert np.array_equal(a, b)
    # rows come out in lexicographic order
    rows = [tuple(r) for r in a]
    assert rows == sorted(rows)


def test_canonical_order_batched(rng):
    pts = rng.normal(size=(2, 6, 3))
    idx = canonical_order(pts)
    assert idx.shape == (2, 6)
    for b in range(2):
        assert np.array_equal(idx[b], canonical_order(pts[b]))
