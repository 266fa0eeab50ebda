import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flowc.deep_net import (
    DeepNet,
    checkpoint_gadget,
    compose_deep,
    compose_many,
    deserialize,
    embed_affine,
    eval_deep,
    hidden_states,
    identity_net,
    invert_deep,
    lift_scalar,
    serialize,
)
from flowc.errors import IncompatibleNets, InvalidInput, NotInvertible, ParseError
from flowc.monotone import MonotoneTarget, compile_monotone
from flowc.scalar_nets import ScalarNet, eval_scalar, random_scalar_net


def random_net(rng, dim, depth, alpha=0.5):
    layers = []
    for _ in range(depth + 1):
        W = rng.normal(size=(dim, dim)) + 2 * np.eye(dim)
        layers.append((W, rng.normal(size=dim)))
    return DeepNet(alpha, dim, tuple(layers))


def naive_eval(net, x):
    z = net.layers[0][0] @ x + net.layers[0][1]
    for W, b in net.layers[1:]:
        z = W @ np.where(z >= 0, z, net.alpha * z) + b
    return z


def test_eval_examples():
    x = np.array([1.5, -2.0])
    assert np.array_equal(identity_net(2, 0.5)(x), x)
    gadget = checkpoint_gadget(2, 0.5, 0.0)
    assert np.array_equal(gadget(np.array([3.0, -3.0])), np.array([3.0, -3.0]))
    rng = np.random.default_rng(0)
    net = random_net(rng, 3, 4)
    pts = rng.normal(size=(100, 3))
    expect = np.array([naive_eval(net, p) for p in pts])
    assert np.allclose(eval_deep(net, pts), expect, rtol=1e-13, atol=1e-13)


def test_dimension_mismatch():
    with pytest.raises(InvalidInput):
        eval_deep(identity_net(2, 0.5), np.zeros(3))


def test_compose_examples():
    rng = np.random.default_rng(1)
    net = random_net(rng, 2, 3)
    pts = rng.normal(size=(100, 2))
    assert np.allclose(compose_deep(net, identity_net(2, 0.5))(pts), net(pts))
    A, a = rng.normal(size=(2, 2)), rng.normal(size=2)
    B, b = rng.normal(size=(2, 2)), rng.normal(size=2)
    c = compose_deep(embed_affine(A, a), embed_affine(B, b))
    assert len(c.layers) == 1
    assert np.allclose(c.layers[0][0], B @ A) and np.allclose(c.layers[0][1], B @ a + b)
    n2 = random_net(rng, 2, 2)
    assert np.allclose(compose_deep(net, n2)(pts), n2(net(pts)), rtol=1e-12)
    with pytest.raises(IncompatibleNets):
        compose_deep(net, identity_net(2, 0.3))


def test_compose_depth_and_associativity():
    rng = np.random.default_rng(2)
    a, b, c = (random_net(rng, 2, d) for d in (2, 3, 1))
    ab_c = compose_deep(compose_deep(a, b), c)
    a_bc = compose_deep(a, compose_deep(b, c))
    pts = rng.normal(size=(50, 2))
    assert ab_c.depth == a.depth + b.depth + c.depth
    assert np.allclose(ab_c(pts), a_bc(pts), rtol=1e-12, atol=1e-12)


def test_checkpoints_track_inputs():
    rng = np.random.default_rng(3)
    blocks = [random_net(rng, 2, 2, 0.5) for _ in range(3)]
    parts = []
    for k, blk in enumerate(blocks):
        parts += [checkpoint_gadget(2, 0.5, float(k)), blk]
    net = compose_many(parts)
    x = rng.normal(size=(20, 2))
    states = hidden_states(net, x, [l for l, _ in net.checkpoints])
    y = x
    for (layer, t), blk in zip(net.checkpoints, blocks):
        assert np.allclose(states[layer], y, rtol=1e-12, atol=1e-12)
        y = blk(y)


def test_lift_examples():
    ident = ScalarNet(0.5, ((1.0, 0.0),))
    pts = np.random.default_rng(4).normal(size=(100, 2))
    assert np.array_equal(lift_scalar(ident, 0, 2)(pts), pts)
    sig = ScalarNet(0.5, ((1.0, 0.0), (1.0, 0.0)))
    assert np.allclose(lift_scalar(sig, 1, 2)(np.array([5.0, -2.0])), [5.0, -1.0])
    with pytest.raises(InvalidInput):
        lift_scalar(sig, 2, 2)


def test_lift_compiled_tanh_protects_other_coords():
    s = compile_monotone(MonotoneTarget(np.tanh, (-1, 1)), 0.01, 0.5)
    net = lift_scalar(s, 0, 3)
    pts = np.random.default_rng(5).uniform(-1, 1, size=(500, 3))
    out = net(pts)
    assert np.allclose(out[:, 0], eval_scalar(s, pts[:, 0]), atol=1e-9)
    assert np.array_equal(out[:, 1:], pts[:, 1:])


@given(st.integers(0, 9), st.integers(2, 4), st.integers(0, 2**31), st.sampled_from([0.3, 0.5, 0.7]))
@settings(max_examples=60, deadline=None)
def test_lift_exact_on_protected(depth, dim, seed, alpha):
    rng = np.random.default_rng(seed)
    s = random_scalar_net(rng, depth, alpha)
    coord = int(rng.integers(dim))
    net = lift_scalar(s, coord, dim, reach=1e3)
    pts = rng.uniform(-1, 1, size=(50, dim))
    out = net(pts)
    other = [i for i in range(dim) if i != coord]
    assert np.max(np.abs(out[:, other] - pts[:, other])) <= 1e-12
    ref = eval_scalar(s, pts[:, coord])
    assert np.max(np.abs(out[:, coord] - ref)) <= 1e-9 * max(1.0, np.max(np.abs(ref)))
    assert net.is_nonsingular()


def test_embed_affine_examples():
    x = np.array([1.0, 2.0])
    assert np.array_equal(embed_affine(np.eye(2), np.zeros(2))(x), x)
    assert np.array_equal(embed_affine([[0, 1], [1, 0]], [0, 0])(x), [2.0, 1.0])
    F0 = embed_affine([[2, 1], [0, 1]], [0.5, 0])
    assert np.allclose(F0(np.array([1.0, 1.0])), [3.5, 1.0])
    with pytest.warns(UserWarning):
        embed_affine([[1, 1], [1, 1]], [0, 0])


def test_invert_examples():
    y = np.array([0.3, -0.7])
    assert np.array_equal(invert_deep(identity_net(2, 0.5), y), y)
    net = DeepNet(0.5, 2, ((2 * np.eye(2), np.ones(2)),))
    assert np.allclose(invert_deep(net, np.array([3.0, 3.0])), [1.0, 1.0])
    sing = DeepNet(0.5, 2, ((np.ones((2, 2)), np.zeros(2)),))
    with pytest.raises(NotInvertible):
        invert_deep(sing, y)


@given(st.integers(0, 6), st.integers(1, 4), st.integers(0, 2**31))
@settings(max_examples=60, deadline=None)
def test_invert_round_trip(depth, dim, seed):
    rng = np.random.default_rng(seed)
    net = random_net(rng, dim, depth)
    pts = rng.normal(size=(30, dim))
    back = invert_deep(net, net(pts))
    assert np.max(np.abs(back - pts)) <= 1e-9 * max(1.0, np.max(np.abs(pts)))


def test_serialize_round_trip():
    rng = np.random.default_rng(6)
    parts = [checkpoint_gadget(2, 0.5, 0.0), random_net(rng, 2, 3), checkpoint_gadget(2, 0.5, 1.0)]
    net = compose_many(parts)
    text = serialize(net, {"task_hash": "abc"})
    back = deserialize(text)
    pts = rng.normal(size=(50, 2))
    assert np.array_equal(back(pts), net(pts))
    assert back.checkpoints == net.checkpoints
    doc = json.loads(text)
    assert doc["format_version"] == 1 and doc["meta"]["depth"] == net.depth
    assert doc["meta"]["task_hash"] == "abc"
    assert serialize(back, {"task_hash": "abc"}) == text


@pytest.mark.parametrize(
    "text",
    [
        "not json",
        "[]",
        json.dumps({"format_version": 2, "alpha": 0.5, "dim": 1, "layers": [{"W": [1], "b": [0]}]}),
        json.dumps({"format_version": 1, "alpha": 0.5, "dim": 1, "layers": []}),
        json.dumps({"format_version": 1, "alpha": 0.5, "dim": 2, "layers": [{"W": [1], "b": [0]}]}),
        json.dumps({"format_version": 1, "alpha": 0.5, "dim": 1}),
    ],
)
def test_deserialize_rejects(text):
    with pytest.raises(ParseError):
        deserialize(text)
