"""Width-one leaky-ReLU networks and their exact alpha-power PL form."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, List, Sequence, Tuple

import numpy as np

from .errors import InternalError, InvalidParameter, UnsupportedShape
from .pl_algebra import (
    AlphaPL,
    PLFunc,
    affine_post,
    apply_activation,
    classify_alpha_power,
    compose_leaky,
    eval_pl,
    piece_count,
)

__all__ = [
    "ScalarNet",
    "ScalarNetBuilder",
    "eval_scalar",
    "extract_pl",
    "expand_power",
    "from_alpha_pl",
    "relu_piece_count",
    "random_scalar_net",
]


@dataclass(frozen=True)
class ScalarNet:
    """``f_0 = w_0 x + b_0``, ``f_k = w_k sigma_alpha(f_{k-1}) + b_k``.

    ``layers`` has ``L + 1`` entries for ``L`` activations.  A zero weight
    anywhere makes the function constant, which must be declared through
    ``constant``.
    """

    alpha: float
    layers: tuple
    constant: bool = False

    def __post_init__(self):
        if not (0.0 < self.alpha < 1.0):
            raise InvalidParameter(f"alpha must lie in (0, 1), got {self.alpha!r}")
        layers = tuple((float(w), float(b)) for w, b in self.layers)
        if not layers:
            raise InvalidParameter("a ScalarNet needs at least one affine layer")
        object.__setattr__(self, "layers", layers)
        has_zero = any(w == 0.0 for w, _ in layers)
        if has_zero != bool(self.constant):
            raise InvalidParameter("constant flag must be set exactly when some weight is zero")

    @property
    def depth(self) -> int:
        """Number of activations ``L``."""
        return len(self.layers) - 1

    def __call__(self, x):
        return eval_scalar(self, x)


def eval_scalar(net: ScalarNet, x):
    a = net.alpha
    w0, b0 = net.layers[0]
    z = w0 * np.asarray(x, dtype=float) + b0
    for w, b in net.layers[1:]:
        z = w * np.maximum(a * z, z) + b
    return float(z) if np.ndim(z) == 0 else z


def extract_pl(net: ScalarNet) -> AlphaPL:
    """Exact alpha-power PL form of a width-one net (at most ``L + 1`` pieces)."""
    if net.constant:
        value = eval_scalar(net, 0.0)
        return AlphaPL(PLFunc((), (0.0,), (), value), net.alpha, 0.0, (0,))
    w0, b0 = net.layers[0]
    f = PLFunc((), (w0,), (), b0)
    for w, b in net.layers[1:]:
        f = affine_post(compose_leaky(f, net.alpha), w, b)
    g = classify_alpha_power(f, net.alpha, tol=1e-9)
    if g is None:
        raise InternalError("extracted PL function failed the alpha-power check")
    return g


class ScalarNetBuilder:
    """Accumulates affine maps and activations; adjacent affines are merged."""

    def __init__(self, alpha: float):
        if not (0.0 < alpha < 1.0):
            raise InvalidParameter(f"alpha must lie in (0, 1), got {alpha!r}")
        self.alpha = alpha
        self._layers: List[List[float]] = [[1.0, 0.0]]

    def affine(self, w: float, b: float = 0.0) -> "ScalarNetBuilder":
        last = self._layers[-1]
        last[0], last[1] = w * last[0], w * last[1] + b
        return self

    def activate(self, times: int = 1) -> "ScalarNetBuilder":
        for _ in range(times):
            self._layers.append([1.0, 0.0])
        return self

    def leaky_power(self, q: int) -> "ScalarNetBuilder":
        """Apply the leaky unit with left slope ``alpha**q`` and right slope 1."""
        if q > 0:
            self.activate(q)
        elif q < 0:
            self.affine(-1.0)
            self.activate(-q)
            self.affine(-self.alpha ** q)
        return self

    def build(self) -> ScalarNet:
        return ScalarNet(self.alpha, tuple(tuple(l) for l in self._layers))


def expand_power(p: int, alpha: float) -> ScalarNet:
    """Width-one net for the leaky unit of slope ``alpha**p`` on the negative axis.

    ``p > 0`` stacks ``p`` activations.  ``p < 0`` uses
    ``-alpha**p * sigma^|p|(-x)``, whose left slope is ``alpha**p > 1`` and
    right slope 1.  Either way ``expand_power(-p) o expand_power(p)`` is the
    identity.
    """
    if int(p) != p or p == 0:
        raise InvalidParameter("expand_power needs a nonzero integer; use the identity for p = 0")
    return ScalarNetBuilder(alpha).leaky_power(int(p)).build()


def from_alpha_pl(g: AlphaPL) -> ScalarNet:
    """Exact width-one representation of a strictly monotone alpha-power PL function.

    The function is normalised so its rightmost slope is 1, then rebuilt right
    to left: each breakpoint ``x_i`` contributes
    ``f_i = sigma_{alpha^q}(f_{i-1} - g(x_i)) + g(x_i)`` with ``q`` the
    exponent jump across ``x_i``.  Decreasing functions go through negation.
    """
    if g.is_constant:
        raise UnsupportedShape("from_alpha_pl needs a strictly monotone function")
    alpha = g.alpha
    base, c = g.base, g.c
    sign = 1.0
    if c < 0:
        base = affine_post(base, -1.0, 0.0)
        c = -c
        sign = -1.0
    exps = g.exponents
    e_right = exps[-1]
    unit = c * alpha ** e_right
    builder = ScalarNetBuilder(alpha)
    bp = base.breakpoints
    if not bp:
        return builder.affine(sign * base.slopes[0], sign * base.offset).build()
    # right-to-left: x_1 is the largest breakpoint
    xs = bp[::-1]
    hs = [v / unit for v in base.node_values[::-1]]
    rel = [e - e_right for e in exps[::-1]]  # rel[0] == 0 on [x_1, inf)
    builder.affine(1.0, -xs[0] + hs[0])
    prev = 0
    for i, (x_i, h_i) in enumerate(zip(xs, hs)):
        q = rel[i + 1] - prev
        prev = rel[i + 1]
        if q == 0:
            continue
        builder.affine(1.0, -h_i)
        builder.leaky_power(q)
        builder.affine(1.0, h_i)
    builder.affine(sign * unit, 0.0)
    return builder.build()


def relu_piece_count(layers: Sequence[Tuple[float, float]]) -> int:
    """Exact number of linear pieces of a width-one ReLU network."""
    layers = [(float(w), float(b)) for w, b in layers]
    if not layers:
        raise InvalidParameter("need at least one layer")
    w0, b0 = layers[0]
    f = PLFunc((), (w0,), (), b0)
    for w, b in layers[1:]:
        f = affine_post(apply_activation(f, 0.0), w, b)
    return piece_count(f)


def random_scalar_net(rng: np.random.Generator, depth: int, alpha: float, scale: float = 2.0) -> ScalarNet:
    """Random nonconstant width-one net with ``depth`` activations."""
    layers = []
    for _ in range(depth + 1):
        w = rng.uniform(0.25, scale) * rng.choice([-1.0, 1.0])
        layers.append((w, rng.normal()))
    return ScalarNet(alpha, tuple(layers))
