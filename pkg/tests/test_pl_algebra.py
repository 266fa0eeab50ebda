import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flowc.errors import InvalidParameter, InvalidSlope, UnsupportedShape
from flowc.pl_algebra import (
    AlphaPL,
    PLFunc,
    affine_post,
    apply_activation,
    classify_alpha_power,
    compose_leaky,
    eval_pl,
    identity_pl,
    leaky_relu,
    piece_count,
    pl_from_points,
    quantize_slope,
    simplify,
)

alphas = st.sampled_from([0.1, 0.3, 0.5, 0.7, 0.9])


@st.composite
def monotone_pl(draw, sign=None):
    n = draw(st.integers(0, 5))
    xs = sorted(set(draw(st.lists(st.floats(-5, 5), min_size=n, max_size=n))))
    xs = [x for i, x in enumerate(xs) if i == 0 or x - xs[i - 1] > 1e-3]
    s = sign if sign is not None else draw(st.sampled_from([-1.0, 1.0]))
    slopes = [s * draw(st.floats(0.05, 4.0)) for _ in range(len(xs) + 1)]
    if not xs:
        return PLFunc((), (slopes[0],), (), draw(st.floats(-3, 3)))
    v0 = draw(st.floats(-3, 3))
    vals = [v0]
    for i in range(1, len(xs)):
        vals.append(vals[-1] + slopes[i] * (xs[i] - xs[i - 1]))
    return PLFunc(tuple(xs), tuple(slopes), tuple(vals))


def test_leaky_relu_examples():
    assert leaky_relu(2, 0.5) == 2
    assert leaky_relu(-2, 0.5) == -1
    assert leaky_relu(0, 0.3) == 0


@pytest.mark.parametrize("alpha", [0.0, 1.0, -0.2, 1.5])
def test_leaky_relu_rejects_alpha(alpha):
    with pytest.raises(InvalidParameter):
        leaky_relu(1.0, alpha)


def test_eval_pl_examples():
    f = PLFunc((0.0,), (1.0, 2.0), (0.0,))
    assert eval_pl(f, -1.0) == -1.0
    assert eval_pl(f, 1.0) == 2.0
    assert eval_pl(f, 0.0) == 0.0


def test_plfunc_rejects_discontinuity_and_unsorted():
    with pytest.raises(InvalidParameter):
        PLFunc((0.0, 1.0), (1.0, 1.0, 1.0), (0.0, 5.0))
    with pytest.raises(InvalidParameter):
        PLFunc((1.0, 0.0), (1.0, 1.0, 1.0), (0.0, -1.0))
    with pytest.raises(InvalidParameter):
        PLFunc((0.0,), (1.0,), (0.0,))


def test_compose_leaky_identity_and_shift():
    g = compose_leaky(identity_pl(), 0.5)
    assert g.breakpoints == (0.0,) and g.slopes == (0.5, 1.0) and g.node_values == (0.0,)
    h = compose_leaky(PLFunc((), (1.0,), (), 1.0), 0.5)
    assert h.breakpoints == (-1.0,) and h.slopes == (0.5, 1.0)


def test_compose_leaky_decreasing_three_piece():
    f = PLFunc((-1.0, 1.0), (-2.0, -1.0, -3.0), (1.5, -0.5))
    g = compose_leaky(f, 0.5)
    assert g.n_pieces == 4
    allowed = set(f.slopes) | {0.5 * s for s in f.slopes}
    assert all(any(math.isclose(s, a) for a in allowed) for s in g.slopes)
    xs = np.linspace(-4, 4, 2001)
    assert np.max(np.abs(eval_pl(g, xs) - leaky_relu(eval_pl(f, xs), 0.5))) < 1e-12


def test_compose_leaky_rejects_nonmonotone():
    f = PLFunc((0.0,), (1.0, -1.0), (0.0,))
    with pytest.raises(UnsupportedShape):
        compose_leaky(f, 0.5)


def test_affine_post_examples():
    assert affine_post(identity_pl(), 1, 0) == identity_pl()
    g = affine_post(identity_pl(), -2, 3)
    assert eval_pl(g, 0.0) == 3.0 and eval_pl(g, 2.0) == -1.0
    f = PLFunc((-1.0, 1.0), (1.0, 2.0, 3.0), (0.0, 4.0))
    h = affine_post(f, 0.25, -1.0)
    assert h.slopes == (0.25, 0.5, 0.75)
    xs = np.linspace(-3, 3, 501)
    assert np.allclose(eval_pl(h, xs), 0.25 * eval_pl(f, xs) - 1.0, atol=1e-14)


def test_classify_alpha_power_examples():
    f = PLFunc((0.0, 1.0), (1.0, 0.5, 0.25), (0.0, 0.5))
    g = classify_alpha_power(f, 0.5, 1e-12)
    assert g is not None and g.c == 1.0 and g.exponents == (0, 1, 2)
    assert classify_alpha_power(PLFunc((0.0,), (1.0, 0.7), (0.0,)), 0.5, 1e-9) is None
    assert classify_alpha_power(PLFunc((0.0,), (1.0, -0.5), (0.0,)), 0.5, 1e-9) is None
    assert classify_alpha_power(PLFunc((0.0,), (1.0, 0.0), (0.0,)), 0.5, 1e-9) is None


def test_quantize_slope_examples():
    assert quantize_slope(0.7, 0.5, 1) == (1, 0)
    assert quantize_slope(1.0, 0.5, 1) == (0, -1)
    assert quantize_slope(0.03, 0.5, 1) == (6, 5)
    with pytest.raises(InvalidSlope):
        quantize_slope(0.0, 0.5, 1)
    with pytest.raises(InvalidSlope):
        quantize_slope(-1.0, 0.5, 1)


@given(st.floats(1e-6, 1e6), alphas, st.floats(0.01, 100))
def test_quantize_slope_brackets(s, alpha, c):
    lo, hi = quantize_slope(s, alpha, c)
    assert lo == hi + 1
    assert c * alpha**lo <= s < c * alpha**hi


@given(monotone_pl(), alphas)
@settings(max_examples=200)
def test_compose_leaky_matches_pointwise(f, alpha):
    g = compose_leaky(f, alpha)
    assert g.n_pieces <= f.n_pieces + 1
    xs = np.linspace(-8, 8, 801)
    expect = leaky_relu(eval_pl(f, xs), alpha)
    assert np.max(np.abs(eval_pl(g, xs) - expect)) <= 1e-12 * max(1.0, f.scale) * 10


@given(st.floats(-1e3, 1e3), st.floats(1e-3, 1e3), alphas)
def test_positive_homogeneity(x, a, alpha):
    assert math.isclose(leaky_relu(a * x, alpha), a * leaky_relu(x, alpha), rel_tol=1e-12, abs_tol=1e-12)


@given(st.floats(-1e6, 1e6), alphas)
def test_identity_representation(x, alpha):
    y = (1 / alpha) * leaky_relu(-leaky_relu(-x, alpha), alpha)
    assert math.isclose(y, x, rel_tol=1e-12, abs_tol=1e-12)


def test_apply_activation_relu_and_merge():
    f = PLFunc((0.0,), (1.0, -1.0), (1.0,))  # tent peaking at 1
    g = apply_activation(f, 0.0)
    xs = np.linspace(-3, 3, 601)
    assert np.allclose(eval_pl(g, xs), np.maximum(eval_pl(f, xs), 0.0))
    # root on an existing breakpoint is merged, not duplicated
    h = apply_activation(PLFunc((0.0,), (1.0, 2.0), (0.0,)), 0.5)
    assert h.breakpoints == (0.0,)


def test_simplify_and_piece_count():
    f = PLFunc((0.0, 1.0), (1.0, 1.0, 2.0), (0.0, 1.0))
    assert piece_count(f) == 2
    assert simplify(PLFunc((0.0,), (3.0, 3.0), (1.0,))) == PLFunc((), (3.0,), (), 1.0)


def test_pl_from_points():
    f = pl_from_points([0, 1, 3], [0, 2, 3])
    assert f.slopes == (2.0, 2.0, 0.5, 0.5)
    assert eval_pl(f, 2.0) == 2.5


def test_alpha_pl_validation():
    base = PLFunc((0.0,), (1.0, 0.5), (0.0,))
    g = AlphaPL(base, 0.5, 1.0, (0, 1))
    assert g(2.0) == 1.0
    with pytest.raises(InvalidParameter):
        AlphaPL(base, 0.5, 1.0, (0, 2))
    with pytest.raises(InvalidParameter):
        AlphaPL(base, 0.5, 0.0, (0, 1))
    assert AlphaPL(PLFunc((), (0.0,), (), 4.0), 0.5, 0.0, (0,)).is_constant
