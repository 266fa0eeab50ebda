"""Compile continuous monotone scalar functions into width-one leaky-ReLU nets.

Two grid strategies are available:

``"unit_slope"``
    The textbook construction: add ``(eps/2) x`` to make the target strictly
    increasing on ``[-1, 1]``, interpolate it with node-value gaps of
    ``eps/4``, fold every interpolation segment into at most two slopes of
    the form ``alpha**j``, and convert the result into a network.

``"adaptive"``
    Same ingredients, but segment ends are placed by measuring the folded
    piece against the target, and the slope anchor ``c`` is the mean slope of
    the target.  Nearly-linear targets then need only a handful of pieces,
    which keeps the flow-map networks shallow.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np

from .errors import ContractViolation, InternalError, InvalidParameter, InvalidTarget
from .pl_algebra import AlphaPL, PLFunc, eval_pl, quantize_slope
from .scalar_nets import ScalarNet, eval_scalar, from_alpha_pl

__all__ = [
    "MonotoneTarget",
    "CompileResult",
    "strictify",
    "build_value_grid",
    "fold_to_alpha",
    "compile_monotone",
    "compile_monotone_detailed",
    "negate_net",
    "precompose_affine",
]

AUDIT_POINTS = 10_000
BISECT_XTOL = 1e-12


def _vectorize(fn: Callable) -> Callable:
    def wrapped(x):
        xa = np.asarray(x, dtype=float)
        try:
            out = np.asarray(fn(xa), dtype=float)
            if out.shape == xa.shape:
                return out
        except Exception:
            pass
        return np.vectorize(lambda t: float(fn(float(t))), otypes=[float])(xa)

    return wrapped


@dataclass(frozen=True)
class MonotoneTarget:
    eval: Callable
    interval: Tuple[float, float]
    direction: str = "increasing"
    continuity_hint: Optional[Callable] = None

    def __post_init__(self):
        a, b = (float(v) for v in self.interval)
        if not a < b:
            raise InvalidParameter(f"interval needs a < b, got {self.interval!r}")
        if self.direction not in ("increasing", "decreasing"):
            raise InvalidParameter(f"direction must be increasing or decreasing, got {self.direction!r}")
        object.__setattr__(self, "interval", (a, b))
        object.__setattr__(self, "eval", _vectorize(self.eval))

    def check(self, samples: int = 513) -> None:
        """Spot-check monotonicity in the declared direction."""
        a, b = self.interval
        xs = np.linspace(a, b, samples)
        ys = self.eval(xs)
        if not np.all(np.isfinite(ys)):
            raise InvalidTarget("target is not finite on its interval")
        d = np.diff(ys)
        slack = 1e-12 * max(1.0, float(np.max(np.abs(ys))))
        bad = d < -slack if self.direction == "increasing" else d > slack
        if np.any(bad):
            i = int(np.argmax(bad))
            raise ContractViolation(
                f"target is not {self.direction} near x = {xs[i]!r} (sampled step {d[i]!r})"
            )


def strictify(u: Callable, eps: float, direction: str = "increasing") -> Callable:
    """``u + (eps/2) x`` (minus for decreasing); within ``eps/2`` of ``u`` on [-1, 1]."""
    if not eps > 0:
        raise InvalidParameter(f"eps must be positive, got {eps!r}")
    u = _vectorize(u)
    k = 0.5 * eps if direction == "increasing" else -0.5 * eps

    def u_strict(x):
        x = np.asarray(x, dtype=float)
        return u(x) + k * x

    return u_strict


def build_value_grid(u_strict: Callable, delta_h: float, interval=(-1.0, 1.0)) -> PLFunc:
    """Interpolating PL function with consecutive node-value gaps at most ``delta_h``.

    Nodes start at the left end; each next node is found by bisection on
    the strictly increasing ``u_strict`` so that its value rises by at most
    ``delta_h``.
    """
    if not delta_h > 0:
        raise InvalidParameter(f"delta_h must be positive, got {delta_h!r}")
    u = _vectorize(u_strict)
    lo_end, hi_end = (float(v) for v in interval)
    ends = u(np.array([lo_end, hi_end]))
    if not np.all(np.isfinite(ends)):
        raise InvalidTarget("non-finite target samples")
    y_end = float(ends[1])
    xs, ys = [lo_end], [float(ends[0])]
    while xs[-1] < hi_end:
        x0, y0 = xs[-1], ys[-1]
        goal = y0 + delta_h
        if y_end <= goal:
            xs.append(hi_end)
            ys.append(y_end)
            break
        lo, hi = x0, hi_end
        y_lo = y0
        while hi - lo > BISECT_XTOL * max(1.0, abs(lo)):
            mid = 0.5 * (lo + hi)
            ym = float(u(mid))
            if not math.isfinite(ym):
                raise InvalidTarget(f"non-finite target sample at {mid!r}")
            if ym <= goal:
                lo, y_lo = mid, ym
            else:
                hi = mid
        if lo == x0:
            # value jump below bisection resolution; accept the right end
            lo, y_lo = hi, float(u(hi))
        xs.append(lo)
        ys.append(y_lo)
    if len(xs) < 2:
        raise InvalidTarget("degenerate value grid")
    return _interpolant(xs, ys)


def _interpolant(xs, ys) -> PLFunc:
    inner = [(ys[i + 1] - ys[i]) / (xs[i + 1] - xs[i]) for i in range(len(xs) - 1)]
    return PLFunc(tuple(xs), tuple([inner[0]] + inner + [inner[-1]]), tuple(ys))


def _fold_segment(x0, y0, x1, y1, alpha, c, prev_exp):
    """Fold one increasing chord into one or two alpha-power pieces.

    Returns ``(pieces, exps)`` where ``pieces`` is a list of
    ``(x_start, y_start)`` anchors (the first is the segment start) and
    ``exps`` the matching slope exponents.
    """
    ell = x1 - x0
    rise = y1 - y0
    k = rise / ell
    if not k > 0:
        raise ContractViolation(f"segment [{x0!r}, {x1!r}] is not strictly increasing")
    j_lo, j_hi = quantize_slope(k, alpha, c)
    s_lo, s_hi = c * alpha ** j_lo, c * alpha ** j_hi
    if abs(k - s_lo) <= 1e-13 * k:
        return [(x0, y0)], [j_lo]
    # greedy junction matching: start with the slope we ended on if possible
    if prev_exp == j_hi:
        first, second, s1, s2 = j_hi, j_lo, s_hi, s_lo
    else:
        first, second, s1, s2 = j_lo, j_hi, s_lo, s_hi
    t = (s2 * ell - rise) / (s2 - s1)
    if t <= 1e-13 * ell:
        return [(x0, y0)], [second]
    if ell - t <= 1e-13 * ell:
        return [(x0, y0)], [first]
    xi = x0 + t
    return [(x0, y0), (xi, y0 + s1 * t)], [first, second]


def fold_to_alpha(h: PLFunc, alpha: float, c: float = 1.0) -> AlphaPL:
    """Alpha-power PL function matching ``h`` at each of its breakpoints.

    Each segment of ``h`` between consecutive breakpoints becomes at most two
    pieces with slopes ``c*alpha**j_lo <= k < c*alpha**j_hi``.  The outer
    pieces continue the neighbouring inner slopes.
    """
    if not h.is_increasing():
        raise ContractViolation("fold_to_alpha needs a strictly increasing PL function")
    bp, nv = h.breakpoints, h.node_values
    if len(bp) < 2:
        raise InvalidParameter("fold_to_alpha needs at least two breakpoints")
    anchors, exps = [], []
    prev = None
    for i in range(len(bp) - 1):
        pcs, es = _fold_segment(bp[i], nv[i], bp[i + 1], nv[i + 1], alpha, c, prev)
        anchors.extend(pcs)
        exps.extend(es)
        prev = es[-1]
    return _assemble(anchors, exps, (bp[-1], nv[-1]), alpha, c)


def _assemble(anchors, exps, last, alpha, c) -> AlphaPL:
    """Build the AlphaPL from piece anchors, merging equal neighbouring exponents."""
    xs, ys, es = [], [], []
    for (x, y), e in zip(anchors, exps):
        if es and es[-1] == e:
            continue
        xs.append(x)
        ys.append(y)
        es.append(e)
    # piece i runs from xs[i] to xs[i+1]; the end node closes the last piece
    bps = xs + [last[0]]
    vals = ys + [last[1]]
    slopes = [c * alpha ** e for e in es]
    # outer pieces repeat the first/last inner exponent, so those nodes merge away
    breakpoints = tuple(bps[1:-1])
    values = tuple(vals[1:-1])
    if not breakpoints:
        s = slopes[0]
        return AlphaPL(PLFunc((), (s,), (), vals[0] - s * bps[0]), alpha, c, (es[0],))
    base = PLFunc(breakpoints, tuple(slopes), values)
    return AlphaPL(base, alpha, c, tuple(es))


def precompose_affine(net: ScalarNet, scale: float, shift: float) -> ScalarNet:
    """Net computing ``net(scale * x + shift)``."""
    layers = list(net.layers)
    w0, b0 = layers[0]
    layers[0] = (w0 * scale, w0 * shift + b0)
    return ScalarNet(net.alpha, tuple(layers), net.constant)


def negate_net(net: ScalarNet) -> ScalarNet:
    layers = list(net.layers)
    w, b = layers[-1]
    layers[-1] = (-w, -b)
    return ScalarNet(net.alpha, tuple(layers), net.constant)


@dataclass(frozen=True)
class CompileResult:
    net: ScalarNet
    alpha_pl: AlphaPL
    n_nodes: int
    n_pieces: int
    audit_error: float
    strategy: str

    @property
    def depth(self) -> int:
        return self.net.depth


def _adaptive_grid(u, tol, alpha, c, samples=33):
    """Greedy segments whose folded pieces stay within ``tol`` of ``u`` on [-1, 1]."""
    anchors, exps = [], []
    x0 = -1.0
    y0 = float(u(x0))
    prev = None
    n_nodes = 1
    t_unit = np.linspace(0.0, 1.0, samples)

    def trial(x1):
        y1 = float(u(x1))
        pcs, es = _fold_segment(x0, y0, x1, y1, alpha, c, prev)
        xs = x0 + (x1 - x0) * t_unit
        g = _piece_values(xs, pcs, es, alpha, c)
        err = float(np.max(np.abs(g - u(xs))))
        return err, y1, pcs, es

    step = 2.0 / 8
    while x0 < 1.0:
        hi = min(1.0, x0 + step)
        err, y1, pcs, es = trial(hi)
        if err <= tol:
            # grow while it keeps fitting
            while hi < 1.0:
                cand = min(1.0, x0 + 2.0 * (hi - x0))
                e2, y2, p2, s2 = trial(cand)
                if e2 > tol:
                    break
                hi, err, y1, pcs, es = cand, e2, y2, p2, s2
        else:
            lo = x0
            best = None
            for _ in range(60):
                mid = 0.5 * (lo + hi)
                e2, y2, p2, s2 = trial(mid)
                if e2 <= tol:
                    lo, best = mid, (mid, e2, y2, p2, s2)
                else:
                    hi = mid
                if best is not None and hi - lo <= 0.05 * (lo - x0):
                    break
            if best is None:
                raise InternalError("adaptive grid could not place a segment")
            hi, err, y1, pcs, es = best
        anchors.extend(pcs)
        exps.extend(es)
        prev = es[-1]
        step = hi - x0
        x0, y0 = hi, y1
        n_nodes += 1
    return anchors, exps, (x0, y0), n_nodes


def _piece_values(xs, anchors, exps, alpha, c):
    out = np.empty_like(xs)
    starts = np.array([a[0] for a in anchors])
    idx = np.searchsorted(starts, xs, side="right") - 1
    idx = np.clip(idx, 0, len(anchors) - 1)
    for k, ((xa, ya), e) in enumerate(zip(anchors, exps)):
        m = idx == k
        out[m] = ya + c * alpha ** e * (xs[m] - xa)
    return out


def compile_monotone_detailed(
    u: MonotoneTarget,
    eps: float,
    alpha: float,
    strategy: str = "unit_slope",
    audit_points: int = AUDIT_POINTS,
) -> CompileResult:
    if not eps > 0:
        raise InvalidParameter(f"eps must be positive, got {eps!r}")
    if not (0.0 < alpha < 1.0):
        raise InvalidParameter(f"alpha must lie in (0, 1), got {alpha!r}")
    if strategy not in ("unit_slope", "adaptive"):
        raise InvalidParameter(f"unknown strategy {strategy!r}")
    u.check()
    if u.direction == "decreasing":
        flipped = MonotoneTarget(lambda x: -u.eval(x), u.interval, "increasing")
        res = compile_monotone_detailed(flipped, eps, alpha, strategy, audit_points)
        return CompileResult(
            negate_net(res.net),
            AlphaPL(_negated(res.alpha_pl.base), alpha, -res.alpha_pl.c, res.alpha_pl.exponents),
            res.n_nodes,
            res.n_pieces,
            res.audit_error,
            strategy,
        )
    a, b = u.interval
    mid, half = 0.5 * (a + b), 0.5 * (b - a)

    def on_unit(s):
        return u.eval(mid + half * np.asarray(s, dtype=float))

    exact = _affine_shortcut(u, alpha)
    if exact is not None:
        return exact

    if strategy == "unit_slope":
        u_strict = strictify(on_unit, eps)
        h = build_value_grid(u_strict, eps / 4.0)
        g = fold_to_alpha(h, alpha, 1.0)
        n_nodes = len(h.breakpoints)
        attempts = [None]
    else:
        attempts = [0.8, 0.4, 0.2]
    audit_x = np.linspace(a, b, audit_points)
    audit_u = u.eval(audit_x)
    for share in attempts:
        if strategy == "adaptive":
            g, n_nodes = _adaptive_alpha_pl(on_unit, eps, alpha, share)
        net_unit = from_alpha_pl(g)
        net = precompose_affine(net_unit, 1.0 / half, -mid / half)
        err = float(np.max(np.abs(eval_scalar(net, audit_x) - audit_u)))
        if err <= eps:
            return CompileResult(net, g, n_nodes, g.base.n_pieces, err, strategy)
    if strategy == "unit_slope":
        raise InternalError(f"unit-slope construction missed its budget: audit error {err!r} > {eps!r}")
    raise InternalError(f"adaptive construction missed its budget: audit error {err!r} > {eps!r}")


def _affine_shortcut(u: MonotoneTarget, alpha: float) -> Optional[CompileResult]:
    """Exact single-layer net when the target is affine with positive slope."""
    a, b = u.interval
    xs = np.linspace(a, b, 1025)
    ys = u.eval(xs)
    k = (ys[-1] - ys[0]) / (b - a)
    if not k > 0:
        return None
    line = ys[0] + k * (xs - a)
    if np.max(np.abs(line - ys)) > 1e-12 * max(1.0, float(np.max(np.abs(ys)))):
        return None
    net = ScalarNet(alpha, ((k, ys[0] - k * a),))
    g = AlphaPL(PLFunc((), (k,), (), ys[0] - k * a), alpha, k, (0,))
    err = float(np.max(np.abs(eval_scalar(net, xs) - ys)))
    return CompileResult(net, g, 2, 1, err, "exact")


def _negated(f: PLFunc) -> PLFunc:
    return PLFunc(f.breakpoints, tuple(-s for s in f.slopes), tuple(-v for v in f.node_values), -f.offset)


def _adaptive_alpha_pl(on_unit, eps, alpha, share):
    xs = np.linspace(-1.0, 1.0, 2049)
    ys = on_unit(xs)
    d = np.diff(ys)
    if np.all(d > 0):
        strict_budget = 0.0
        u_s = on_unit
    else:
        strict_budget = 0.1 * eps
        u_s = strictify(on_unit, strict_budget * 2.0)
    tol = share * (eps - strict_budget)
    c = float((ys[-1] - ys[0]) / 2.0) if ys[-1] > ys[0] else 1.0
    c = max(c, strict_budget) if c > 0 else 1.0
    anchors, exps, last, n_nodes = _adaptive_grid(u_s, tol, alpha, c)
    return _assemble(anchors, exps, last, alpha, c), n_nodes


def compile_monotone(u: MonotoneTarget, eps: float, alpha: float, strategy: str = "unit_slope") -> ScalarNet:
    """Width-one net within ``eps`` of ``u`` on its interval (audited on 10^4 points)."""
    return compile_monotone_detailed(u, eps, alpha, strategy).net
