"""Scalar continuous piecewise-linear functions and the leaky-ReLU primitive.

A :class:`PLFunc` stores breakpoints, per-piece slopes and the function value
at each breakpoint.  Functions without breakpoints (pure affine maps) carry
their value at ``x = 0`` in ``offset``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import InvalidParameter, InvalidSlope, UnsupportedShape

__all__ = [
    "PLFunc",
    "AlphaPL",
    "leaky_relu",
    "eval_pl",
    "compose_leaky",
    "apply_activation",
    "affine_post",
    "classify_alpha_power",
    "quantize_slope",
    "simplify",
    "piece_count",
    "identity_pl",
]

# relative tolerance for breakpoint collisions
REL_TOL = 1e-12
# deep compositions accumulate rounding in node values
CONTINUITY_TOL = 1e-10


def _check_alpha(alpha: float) -> None:
    if not (0.0 < alpha < 1.0):
        raise InvalidParameter(f"alpha must lie in (0, 1), got {alpha!r}")


def leaky_relu(x, alpha: float):
    """max(alpha*x, x), elementwise for arrays."""
    _check_alpha(alpha)
    return np.maximum(alpha * np.asarray(x, dtype=float), x) if np.ndim(x) else max(alpha * x, x)


@dataclass(frozen=True)
class PLFunc:
    breakpoints: tuple = ()
    slopes: tuple = (1.0,)
    node_values: tuple = ()
    offset: float = 0.0

    def __post_init__(self):
        bp = tuple(float(b) for b in self.breakpoints)
        sl = tuple(float(s) for s in self.slopes)
        nv = tuple(float(v) for v in self.node_values)
        object.__setattr__(self, "breakpoints", bp)
        object.__setattr__(self, "slopes", sl)
        object.__setattr__(self, "node_values", nv)
        object.__setattr__(self, "offset", float(self.offset))
        if len(sl) != len(bp) + 1 or len(nv) != len(bp):
            raise InvalidParameter("PLFunc needs len(slopes) == len(breakpoints) + 1 == len(node_values) + 1")
        if not all(math.isfinite(v) for v in bp + sl + nv):
            raise InvalidParameter("PLFunc entries must be finite")
        if any(b1 <= b0 for b0, b1 in zip(bp, bp[1:])):
            raise InvalidParameter("breakpoints must be strictly increasing")
        scale = self.scale
        for i in range(len(bp) - 1):
            rise = sl[i + 1] * (bp[i + 1] - bp[i])
            if abs(nv[i + 1] - nv[i] - rise) > CONTINUITY_TOL * (scale + abs(rise)):
                raise InvalidParameter(f"continuity violated between breakpoints {i} and {i + 1}")

    @property
    def scale(self) -> float:
        vals = [abs(v) for v in self.breakpoints + self.node_values] + [abs(self.offset), 1.0]
        return max(vals)

    @property
    def n_pieces(self) -> int:
        return len(self.slopes)

    def is_increasing(self, strict: bool = True) -> bool:
        return all(s > 0 for s in self.slopes) if strict else all(s >= 0 for s in self.slopes)

    def is_decreasing(self, strict: bool = True) -> bool:
        return all(s < 0 for s in self.slopes) if strict else all(s <= 0 for s in self.slopes)

    def __call__(self, x):
        return eval_pl(self, x)


def identity_pl() -> PLFunc:
    return PLFunc((), (1.0,), (), 0.0)


def eval_pl(f: PLFunc, x):
    """Evaluate ``f`` exactly (up to rounding); outer slopes extrapolate."""
    xa = np.asarray(x, dtype=float)
    if not f.breakpoints:
        out = f.offset + f.slopes[0] * xa
    else:
        bp = np.asarray(f.breakpoints)
        sl = np.asarray(f.slopes)
        nv = np.asarray(f.node_values)
        idx = np.searchsorted(bp, xa, side="right") - 1
        left = idx < 0
        i = np.where(left, 0, idx)
        slope = np.where(left, sl[0], sl[i + 1])
        out = nv[i] + slope * (xa - bp[i])
    return float(out) if np.ndim(out) == 0 else out


def _piece_root(f: PLFunc, k: int) -> Optional[float]:
    """Root of the affine extension of piece ``k`` if it lies inside the piece."""
    s = f.slopes[k]
    if s == 0.0:
        return None
    bp = f.breakpoints
    if not bp:
        xi = -f.offset / s + 0.0
        return xi if math.isfinite(xi) else None
    anchor = bp[0] if k == 0 else bp[k - 1]
    v = f.node_values[0] if k == 0 else f.node_values[k - 1]
    xi = anchor - v / s + 0.0
    lo = -math.inf if k == 0 else bp[k - 1]
    hi = math.inf if k == len(bp) else bp[k]
    if math.isfinite(xi) and lo < xi < hi:
        return xi
    return None


def apply_activation(f: PLFunc, alpha: float) -> PLFunc:
    """Exact PL form of ``max(alpha*f, f)`` for any PL ``f`` and ``alpha`` in [0, 1).

    ``alpha = 0`` gives plain ReLU.  New breakpoints are the sign changes of
    ``f``; a root within ``REL_TOL * scale`` of an existing breakpoint is
    merged into it.
    """
    if not (0.0 <= alpha < 1.0):
        raise InvalidParameter(f"alpha must lie in [0, 1), got {alpha!r}")
    tol = REL_TOL * f.scale
    bp, nv = f.breakpoints, f.node_values
    n = len(bp)
    if n == 0:
        xi = _piece_root(f, 0)
        s = f.slopes[0]
        if xi is None:
            off = f.offset if f.offset >= 0 else alpha * f.offset
            return PLFunc((), (s,), (), off)
        return PLFunc((xi,), (alpha * s, s) if s > 0 else (s, alpha * s), (0.0,))
    new_bp, values, slopes = [], [], []
    for k in range(n + 1):
        s = f.slopes[k]
        xi = _piece_root(f, k)
        if xi is not None and ((k > 0 and xi - bp[k - 1] <= tol) or (k < n and bp[k] - xi <= tol)):
            xi = None
        if xi is None:
            # the sign of f is constant on this piece
            if k == 0:
                fm = nv[0] - s
            elif k == n:
                fm = nv[n - 1] + s
            else:
                fm = 0.5 * (nv[k - 1] + nv[k])
            slopes.append(alpha * s if fm < 0 else s)
        else:
            slopes.extend((alpha * s, s) if s > 0 else (s, alpha * s))
            new_bp.append(xi)
            values.append(0.0)
        if k < n:
            new_bp.append(bp[k])
            values.append(nv[k] if nv[k] >= 0 else alpha * nv[k])
    return PLFunc(tuple(new_bp), tuple(slopes), tuple(values))


def compose_leaky(f: PLFunc, alpha: float) -> PLFunc:
    """Return ``sigma_alpha o f`` for strictly monotone ``f``.

    The breakpoint count grows by at most one and every slope of the result
    lies in ``S(f) | alpha*S(f)``.
    """
    _check_alpha(alpha)
    if not (f.is_increasing() or f.is_decreasing()):
        raise UnsupportedShape("compose_leaky needs a strictly monotone PL function")
    return apply_activation(f, alpha)


def affine_post(f: PLFunc, w: float, b: float) -> PLFunc:
    """``w*f + b``; breakpoints unchanged."""
    return PLFunc(
        f.breakpoints,
        tuple(w * s for s in f.slopes),
        tuple(w * v + b for v in f.node_values),
        w * f.offset + b,
    )


def simplify(f: PLFunc, rel_tol: float = 1e-12) -> PLFunc:
    """Drop breakpoints whose neighbouring slopes agree within ``rel_tol``."""
    if not f.breakpoints:
        return f
    bp, sl, nv = [], [f.slopes[0]], []
    for b, s, v in zip(f.breakpoints, f.slopes[1:], f.node_values):
        prev = sl[-1]
        if abs(s - prev) <= rel_tol * max(abs(s), abs(prev), 1e-300) or (s == 0 and prev == 0):
            continue
        bp.append(b)
        nv.append(v)
        sl.append(s)
    if not bp:
        return PLFunc((), (sl[0],), (), eval_pl(f, 0.0))
    return PLFunc(tuple(bp), tuple(sl), tuple(nv))


def piece_count(f: PLFunc, rel_tol: float = 1e-12) -> int:
    """Number of linear pieces after merging collinear neighbours."""
    return simplify(f, rel_tol).n_pieces


@dataclass(frozen=True)
class AlphaPL:
    """PL function whose slopes are ``c * alpha**k`` for integer ``k``.

    ``c == 0`` is reserved for the constant function (single zero slope).
    """

    base: PLFunc
    alpha: float
    c: float
    exponents: tuple = field(default=())

    def __post_init__(self):
        _check_alpha(self.alpha)
        exps = tuple(int(k) for k in self.exponents)
        object.__setattr__(self, "exponents", exps)
        if len(exps) != self.base.n_pieces:
            raise InvalidParameter("one exponent per piece required")
        if self.c == 0.0:
            if any(s != 0.0 for s in self.base.slopes):
                raise InvalidParameter("c == 0 only allowed for constant functions")
            return
        for s, k in zip(self.base.slopes, exps):
            target = self.c * self.alpha ** k
            if abs(s - target) > 1e-9 * abs(target):
                raise InvalidParameter(f"slope {s!r} is not c*alpha^{k} = {target!r}")

    @property
    def is_constant(self) -> bool:
        return self.c == 0.0

    def __call__(self, x):
        return eval_pl(self.base, x)


def classify_alpha_power(f: PLFunc, alpha: float, tol: float = 1e-9) -> Optional[AlphaPL]:
    """Recognise ``f`` as alpha-power PL with ``c`` pinned to the leftmost slope.

    Returns ``None`` when some slope is zero, changes sign, or is not within
    relative ``tol`` of an integer power of ``alpha`` times ``c``.
    """
    _check_alpha(alpha)
    c = f.slopes[0]
    if c == 0.0:
        return None
    exps = []
    la = math.log(alpha)
    for s in f.slopes:
        if s == 0.0 or (s > 0) != (c > 0):
            return None
        k = round(math.log(s / c) / la)
        if abs(s / (c * alpha ** k) - 1.0) > tol:
            return None
        exps.append(k)
    # store exact powers so downstream constructions see clean slopes
    return AlphaPL(f, alpha, c, tuple(exps))


def quantize_slope(s: float, alpha: float, c: float = 1.0) -> tuple:
    """Tightest bracket ``c*alpha**j_lo <= s < c*alpha**j_hi`` with ``j_lo = j_hi + 1``."""
    _check_alpha(alpha)
    if not s > 0:
        raise InvalidSlope(f"slope must be positive, got {s!r}")
    if not c > 0:
        raise InvalidParameter(f"c must be positive, got {c!r}")
    j_lo = math.ceil(math.log(s / c) / math.log(alpha))
    # repair rounding in the logarithm
    while c * alpha ** j_lo > s:
        j_lo += 1
    while c * alpha ** (j_lo - 1) <= s:
        j_lo -= 1
    return j_lo, j_lo - 1


def pl_from_points(xs: Sequence[float], ys: Sequence[float], left_slope=None, right_slope=None) -> PLFunc:
    """Interpolating PLFunc through sorted nodes; outer slopes default to the end chords."""
    xs = [float(x) for x in xs]
    ys = [float(y) for y in ys]
    if len(xs) < 2:
        raise InvalidParameter("need at least two nodes")
    inner = [(ys[i + 1] - ys[i]) / (xs[i + 1] - xs[i]) for i in range(len(xs) - 1)]
    ls = inner[0] if left_slope is None else left_slope
    rs = inner[-1] if right_slope is None else right_slope
    return PLFunc(tuple(xs), tuple([ls] + inner + [rs]), tuple(ys))
