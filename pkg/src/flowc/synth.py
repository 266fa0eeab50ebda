"""Substep synthesis and end-to-end flow-map compilation.

A substep adds ``k * tanh(w . x + beta)`` to coordinate ``j`` (``k = a * dt``).
Three constructions are used:

* ``diagonal``: ``w`` vanishes off ``j``; one scalar monotone stage on ``j``.
* ``self_pivot``: ``w_j != 0``; an exact affine map writes ``nu = w . x + beta``
  into slot ``j``, the scalar map ``nu -> nu + w_j k tanh(nu)`` is applied there
  and an exact affine map recovers the new ``x_j``.  Other coordinates never
  leave the identity gadget, so they come out bitwise unchanged.
* ``pivot``: ``nu`` goes into another slot ``m``; tanh is approximated there,
  added to ``x_j``, undone by the exact inverse of the tanh approximant,
  corrected by ``nu -> nu + w_j k tanh(nu)`` and mapped back to ``x_m``.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .deep_net import (
    DeepNet,
    checkpoint_gadget,
    compose_many,
    eval_deep,
    identity_net,
    lift_scalar,
)
from .errors import (
    BudgetInfeasible,
    FitShortfall,
    FlowcError,
    InvalidParameter,
    StepTooLarge,
    SynthesisFailure,
)
from .monotone import MonotoneTarget, compile_monotone_detailed
from .ode import (
    BoxDomain,
    FieldSpec,
    TanhField,
    estimate_bounds,
    fit_tanh_field,
    gronwall_delta,
    omega_tau,
    reference_flow_batch,
)
from .pl_algebra import AlphaPL, PLFunc
from .scalar_nets import ScalarNet, extract_pl, from_alpha_pl
from .splitting import SubStep, apply_substep, make_schedule, required_steps, run_splitting, splitting_constant

__all__ = [
    "Stage",
    "StageChain",
    "Budget",
    "budget_composition",
    "SubstepResult",
    "synth_substep",
    "synth_substep_detailed",
    "invert_alpha_pl",
    "FlowConfig",
    "CertReport",
    "compile_flow",
]

# relative size below which w_j is treated as unusable for the self-pivot route
SELF_PIVOT_MIN = 1e-3
MAX_STIFFNESS = 0.5


@dataclass(frozen=True)
class Stage:
    name: str
    kind: str  # "exact_affine" | "approx_monotone"
    lip: float
    coord: Optional[int] = None
    interval: Optional[Tuple[float, float]] = None
    max_delta: float = math.inf

    def __post_init__(self):
        if self.kind not in ("exact_affine", "approx_monotone"):
            raise InvalidParameter(f"unknown stage kind {self.kind!r}")
        if not (math.isfinite(self.lip) and self.lip > 0):
            raise InvalidParameter(f"stage {self.name!r} needs a finite positive Lipschitz factor")


@dataclass(frozen=True)
class StageChain:
    stages: tuple

    @property
    def n_approx(self) -> int:
        return sum(s.kind == "approx_monotone" for s in self.stages)


def budget_composition(chain: StageChain, eps: float) -> tuple:
    """Per-stage tolerances, allocated backwards.

    With ``m`` approximate stages the last gets ``eps/2`` and earlier ones
    ``eps/4, eps/8, ...`` (the first takes the remainder so the shares sum to
    ``eps``), each divided by the product of downstream Lipschitz factors.
    Exact stages get 0.  A stage whose ``max_delta`` margin is not positive
    makes the chain infeasible.
    """
    if not eps > 0:
        raise InvalidParameter("eps must be positive")
    stages = chain.stages
    m = chain.n_approx
    deltas = [0.0] * len(stages)
    seen = 0
    downstream = 1.0
    for idx in range(len(stages) - 1, -1, -1):
        st = stages[idx]
        if st.kind == "approx_monotone":
            seen += 1
            share = eps / 2.0 ** (m - 1) if seen == m else eps / 2.0 ** seen
            if not st.max_delta > 0:
                raise BudgetInfeasible(f"stage {st.name!r} has no room for approximation error")
            deltas[idx] = min(share / downstream, st.max_delta)
        downstream *= st.lip
    return tuple(deltas)


@dataclass(frozen=True)
class Budget:
    eps_total: float
    eps_field: float
    eps_split: float
    eps_synth: float
    per_substep: float = 0.0

    def __post_init__(self):
        parts = (self.eps_field, self.eps_split, self.eps_synth)
        if not all(p > 0 for p in parts):
            raise InvalidParameter("budget parts must be positive")
        if sum(parts) > self.eps_total * (1 + 1e-12):
            raise InvalidParameter("budget parts exceed the total")

    @classmethod
    def thirds(cls, eps: float, n_substeps: int = 1) -> "Budget":
        return cls(eps, eps / 3, eps / 3, eps / 3, eps / 3 / max(1, n_substeps))


def invert_alpha_pl(g: AlphaPL) -> AlphaPL:
    """Exact inverse of a strictly increasing alpha-power PL function."""
    f = g.base
    if not (g.c > 0 and f.is_increasing()):
        raise InvalidParameter("only strictly increasing functions are inverted here")
    if not f.breakpoints:
        s = f.slopes[0]
        return AlphaPL(PLFunc((), (1.0 / s,), (), -f.offset / s), g.alpha, 1.0 / s, (0,))
    inv = PLFunc(f.node_values, tuple(1.0 / s for s in f.slopes), f.breakpoints)
    exps = tuple(-e for e in g.exponents)
    return AlphaPL(inv, g.alpha, 1.0 / g.c, exps)


@dataclass
class SubstepResult:
    net: DeepNet
    branch: str
    audit_error: float
    deltas: dict
    gains: dict
    attempts: int
    pieces: int


def _affine_layer(M, b, alpha):
    return DeepNet(alpha, M.shape[0], ((np.asarray(M, float), np.asarray(b, float)),))


def _box_range(w, beta, lo, hi):
    lo_v = beta + float(np.sum(np.minimum(w * lo, w * hi)))
    hi_v = beta + float(np.sum(np.maximum(w * lo, w * hi)))
    if hi_v <= lo_v:
        hi_v = lo_v + 1e-9 * max(1.0, abs(lo_v))
    return lo_v, hi_v


def _reach(interval, fn) -> float:
    xs = np.linspace(interval[0], interval[1], 65)
    scale = max(float(np.max(np.abs(xs))), float(np.max(np.abs(fn(xs)))))
    return 1e4 * (1.0 + scale)


def _scalar_stage(fn, interval, delta, alpha, strategy):
    target = MonotoneTarget(fn, interval)
    res = compile_monotone_detailed(target, delta, alpha, strategy=strategy, audit_points=2001)
    return res


def _build_substep(s: SubStep, lo, hi, eps, alpha, strategy, method, scale):
    d = s.dim
    k = s.a * s.dt
    w, beta, j = np.asarray(s.w), s.beta, s.j
    off = np.delete(np.abs(w), j)
    wmax = float(np.max(np.abs(w)))
    if k == 0.0 or wmax == 0.0:
        shift = np.zeros(d)
        shift[j] = k * math.tanh(beta)
        return [_affine_layer(np.eye(d), shift, alpha)], "exact", {}, {}, 0
    if not np.any(off):
        branch = "diagonal"
    elif method == "auto" and abs(w[j]) >= SELF_PIVOT_MIN * wmax:
        branch = "self_pivot"
    else:
        branch = "pivot"

    if branch == "diagonal":
        wj = w[j]
        interval = (float(lo[j]), float(hi[j]))
        chain = StageChain((Stage("update", "approx_monotone", 1.0, j, interval),))
        (delta,) = budget_composition(chain, eps * scale)
        fn = lambda y: y + k * np.tanh(wj * y + beta)
        res = _scalar_stage(fn, interval, delta, alpha, strategy)
        net = lift_scalar(res.net, j, d, reach=_reach(interval, fn))
        return [net], branch, {"update": delta}, {"update": 1.0}, res.n_pieces

    if branch == "self_pivot":
        wj = w[j]
        kappa = wj * k
        interval = _box_range(w, beta, lo, hi)
        gain = 1.0 / abs(wj)
        chain = StageChain(
            (
                Stage("to_nu", "exact_affine", 1.0),
                Stage("nu_update", "approx_monotone", 1.0 + abs(kappa), j, interval),
                Stage("from_nu", "exact_affine", gain),
            )
        )
        deltas = budget_composition(chain, eps * scale)
        fn = lambda v: v + kappa * np.tanh(v)
        res = _scalar_stage(fn, interval, deltas[1], alpha, strategy)
        M0 = np.eye(d)
        M0[j] = w
        b0 = np.zeros(d)
        b0[j] = beta
        M1 = np.eye(d)
        M1[j] = -w / wj
        M1[j, j] = 1.0 / wj
        b1 = np.zeros(d)
        b1[j] = -beta / wj
        nets = [
            _affine_layer(M0, b0, alpha),
            lift_scalar(res.net, j, d, reach=_reach(interval, fn)),
            _affine_layer(M1, b1, alpha),
        ]
        return nets, branch, {"nu_update": deltas[1]}, {"nu_update": gain}, res.n_pieces

    # pivot route
    cand = np.abs(w).copy()
    cand[j] = -1.0
    m = int(np.argmax(cand))
    wm, wj = w[m], w[j]
    kappa = wj * k
    interval = _box_range(w, beta, lo, hi)
    g23 = abs(k) * (abs(wm) + abs(wj))
    stages = [Stage("tanh", "approx_monotone", 1.0, m, interval, max_delta=0.5)]
    stages.append(Stage("add_and_invert", "exact_affine", g23))
    if wj != 0.0:
        stages.append(Stage("nu_update", "approx_monotone", 1.0 + abs(kappa), m, interval))
    stages.append(Stage("recover", "exact_affine", 1.0 / abs(wm)))
    deltas = budget_composition(StageChain(tuple(stages)), eps * scale / math.sqrt(2.0))
    res1 = _scalar_stage(np.tanh, interval, deltas[0], alpha, strategy)
    g1 = extract_pl(res1.net)
    g1_inv = from_alpha_pl(invert_alpha_pl(g1))
    M0 = np.eye(d)
    M0[m] = w
    b0 = np.zeros(d)
    b0[m] = beta
    M2 = np.eye(d)
    M2[j, m] = k
    tanh_range = (math.tanh(interval[0]) - 1.0, math.tanh(interval[1]) + 1.0)
    nets = [
        _affine_layer(M0, b0, alpha),
        lift_scalar(res1.net, m, d, reach=_reach(interval, np.tanh)),
        _affine_layer(M2, np.zeros(d), alpha),
        lift_scalar(g1_inv, m, d, reach=1e4 * (2.0 + max(abs(interval[0]), abs(interval[1])))),
    ]
    out_deltas = {"tanh": deltas[0]}
    gains = {"tanh": abs(k) * (1.0 + abs(wj) / abs(wm))}
    pieces = res1.n_pieces
    if wj != 0.0:
        fn = lambda v: v + kappa * np.tanh(v)
        res4 = _scalar_stage(fn, interval, deltas[2], alpha, strategy)
        nets.append(lift_scalar(res4.net, m, d, reach=_reach(interval, fn)))
        out_deltas["nu_update"] = deltas[2]
        gains["nu_update"] = 1.0 / abs(wm)
        pieces += res4.n_pieces
    M5 = np.eye(d)
    M5[m] = -w / wm
    M5[m, m] = 1.0 / wm
    b5 = np.zeros(d)
    b5[m] = -beta / wm
    nets.append(_affine_layer(M5, b5, alpha))
    return nets, "pivot", out_deltas, gains, pieces


def synth_substep_detailed(
    s: SubStep,
    domain: BoxDomain,
    eps: float,
    alpha: float,
    audit_points: int = 1000,
    seed: int = 0,
    strategy: str = "adaptive",
    method: str = "auto",
    retries: int = 2,
) -> SubstepResult:
    """Network within ``eps`` (Euclidean, audited) of the substep on ``domain``."""
    if not eps > 0:
        raise InvalidParameter("eps must be positive")
    if not (0.0 < alpha < 1.0):
        raise InvalidParameter(f"alpha must lie in (0, 1), got {alpha!r}")
    if method not in ("auto", "pivot"):
        raise InvalidParameter(f"unknown method {method!r}")
    if domain.dim != s.dim:
        raise InvalidParameter("domain and substep dimensions differ")
    if s.stiffness >= 1.0:
        raise StepTooLarge(f"dt*|a|*max|w| = {s.stiffness:.4g} must be below 1")
    lo, hi = np.array(domain.lo), np.array(domain.hi)
    rng = np.random.default_rng(seed)
    pts = np.vstack([domain.sample(rng, audit_points), domain.corners()])
    exact = apply_substep(pts, s)
    scale = 1.0
    history = []
    for attempt in range(retries + 1):
        nets, branch, deltas, gains, pieces = _build_substep(s, lo, hi, eps, alpha, strategy, method, scale)
        net = compose_many(nets) if len(nets) > 1 else nets[0]
        err = float(np.max(np.linalg.norm(eval_deep(net, pts) - exact, axis=1)))
        history.append({"scale": scale, "audit_error": err, "deltas": deltas})
        if err <= eps:
            return SubstepResult(net, branch, err, deltas, gains, attempt + 1, pieces)
        scale *= 0.5
    exc = SynthesisFailure(
        f"substep (k={s.k}, i={s.i}, j={s.j}) missed eps = {eps:.3e} after {retries} retries; "
        f"last audit error {err:.3e}"
    )
    exc.diagnostics = {"branch": branch, "history": history}
    raise exc


def synth_substep(s: SubStep, domain: BoxDomain, eps: float, alpha: float, **kw) -> DeepNet:
    return synth_substep_detailed(s, domain, eps, alpha, **kw).net


# ---------------------------------------------------------------------------
# end-to-end


@dataclass(frozen=True)
class FlowConfig:
    N_candidates: tuple = (8, 16, 24, 32)
    seed: int = 0
    n_floor: int = 8
    n_max: int = 4096
    n_override: Optional[int] = None
    audit_points: int = 2048
    fit_samples: int = 4000
    cloud_points: int = 2000
    substep_audit_points: int = 400
    strategy: str = "adaptive"
    outer_retries: int = 2
    ref_tol: float = 1e-10


@dataclass
class CertReport:
    eps: float
    eps_parts: dict
    measured: dict
    achieved_delta: float
    target_delta: float
    n: int
    N: int
    n_bound: int
    depth: int
    layers: int
    M: float
    L: float
    safety_factor: float
    per_substep_eps: float
    audit: dict
    runtime_s: float
    certified: bool

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":"))


def _audit_points(domain: BoxDomain, n: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed + 7919)
    per_axis = max(2, int(round((n / 2) ** (1.0 / domain.dim))))
    grid = domain.grid(per_axis)
    extra = max(0, n - len(grid))
    return np.vstack([grid, domain.sample(rng, extra)]) if extra else grid[:n]


def _substep_boxes(schedule, cloud: np.ndarray, margin: float):
    """Input bounding box of every substep, from a cloud pushed through the splitting."""
    x = cloud.copy()
    boxes = []
    for s in schedule.substeps:
        lo, hi = x.min(axis=0), x.max(axis=0)
        pad = margin + 0.02 * (hi - lo)
        boxes.append(BoxDomain(tuple(lo - pad), tuple(hi + pad)))
        x[:, s.j] = x[:, s.j] + s.dt * s.a * np.tanh(x @ s.w + s.beta)
    return boxes


def _fit(field, Om, tau, delta, cfg, n_intervals):
    last = None
    for N in cfg.N_candidates:
        try:
            return fit_tanh_field(field, Om, tau, N, delta, seed=cfg.seed, n_intervals=n_intervals,
                                  samples=cfg.fit_samples)
        except FitShortfall as exc:
            last = exc
    raise last


def _choose_n(tf, tau, pts, ref, target, cfg, stiff):
    m = tf.n_intervals
    n = max(cfg.n_floor, m)
    n = int(math.ceil(n / m) * m)
    n = max(n, int(math.ceil(stiff * tau / MAX_STIFFNESS / m)) * m)
    err = math.inf
    while True:
        err = float(np.max(np.linalg.norm(run_splitting(pts, make_schedule(tf, n, tau))[-1] - ref, axis=1)))
        if err <= target or n * 2 > cfg.n_max:
            return n, err
        n *= 2


def compile_flow(
    field: FieldSpec,
    domain: BoxDomain,
    tau: float,
    eps: float,
    alpha: float = 0.5,
    config: Optional[FlowConfig] = None,
):
    """Width-d leaky-ReLU network for the time-``tau`` flow map on ``domain``.

    Returns ``(net, report)``.  The net is only returned when its measured
    sup error against the reference flow is at most ``eps``; otherwise
    :class:`SynthesisFailure` is raised with the report attached.
    """
    cfg = config or FlowConfig()
    if not eps > 0:
        raise InvalidParameter(f"eps must be positive, got {eps!r}")
    if not (0.0 < alpha < 1.0):
        raise InvalidParameter(f"alpha must lie in (0, 1), got {alpha!r}")
    if not tau > 0:
        raise InvalidParameter(f"tau must be positive, got {tau!r}")
    if domain.dim != field.dim:
        raise InvalidParameter("domain and field dimensions differ")
    t_start = time.perf_counter()
    budget = Budget.thirds(eps)

    # step 1: tanh field
    M, L = estimate_bounds(field, domain, tau, seed=cfg.seed)
    Om = omega_tau(domain, M, L, tau)
    delta = gronwall_delta(budget.eps_field, tau, L)
    n_int = field.tanh.n_intervals if field.tanh is not None else 1
    try:
        tf, achieved = _fit(field, Om, tau, delta, cfg, n_int)
    except FitShortfall as exc:
        exc.stage = "field"
        raise
    tfield = FieldSpec.from_tanh(tf)

    pts = _audit_points(domain, cfg.audit_points, cfg.seed)
    ref = reference_flow_batch(field, pts, tau, cfg.ref_tol)
    ref_tanh = reference_flow_batch(tfield, pts, tau, cfg.ref_tol)
    field_err = float(np.max(np.linalg.norm(ref_tanh - ref, axis=1)))

    # step 2: step count
    stiff = max(float(np.max(np.abs(A) * np.max(np.abs(W), axis=1)[None, :])) for A, W, _ in tf.params)
    n_bound = required_steps(splitting_constant(tf), max(L, 1e-12), tau, budget.eps_split)
    if cfg.n_override is not None:
        n = int(cfg.n_override)
        split_err = float(np.max(np.linalg.norm(run_splitting(pts, make_schedule(tf, n, tau))[-1] - ref_tanh, axis=1)))
    else:
        n, split_err = _choose_n(tf, tau, pts, ref_tanh, budget.eps_split, cfg, stiff)
    schedule = make_schedule(tf, n, tau)
    for s in schedule.substeps:
        if s.stiffness >= 1.0:
            raise StepTooLarge(f"n = {n} leaves dt*|a|*max|w| = {s.stiffness:.3g} >= 1")

    # step 3: synthesis
    rng = np.random.default_rng(cfg.seed + 1)
    cloud = np.vstack([domain.sample(rng, cfg.cloud_points), domain.corners(), pts])
    boxes = _substep_boxes(schedule, cloud, margin=eps)
    per = schedule.N * schedule.dim
    per_sub = budget.eps_synth / (n * per)
    sub_budget = per_sub
    for outer in range(cfg.outer_retries + 1):
        parts: List[DeepNet] = []
        worst_sub = 0.0
        for k in range(n):
            parts.append(checkpoint_gadget(field.dim, alpha, k * schedule.dt))
            for idx in range(k * per, (k + 1) * per):
                s = schedule.substeps[idx]
                try:
                    res = synth_substep_detailed(
                        s, boxes[idx], sub_budget, alpha,
                        audit_points=cfg.substep_audit_points, seed=cfg.seed + idx, strategy=cfg.strategy,
                    )
                except FlowcError as exc:
                    exc.stage = f"synthesis (substep {idx})"
                    raise
                worst_sub = max(worst_sub, res.audit_error)
                parts.append(res.net)
        parts.append(checkpoint_gadget(field.dim, alpha, tau))
        net = compose_many(parts)
        out = eval_deep(net, pts)
        errs = np.linalg.norm(out - ref, axis=1)
        max_err = float(np.max(errs))
        if max_err <= eps:
            break
        sub_budget *= 0.5
    synth_err = float(np.max(np.linalg.norm(out - run_splitting(pts, schedule)[-1], axis=1)))
    worst = int(np.argmax(errs))
    report = CertReport(
        eps=eps,
        eps_parts={"field": budget.eps_field, "split": budget.eps_split, "synth": budget.eps_synth},
        measured={"field": field_err, "split": split_err, "synth": synth_err, "worst_substep": worst_sub},
        achieved_delta=achieved,
        target_delta=delta,
        n=n,
        N=tf.N,
        n_bound=n_bound,
        depth=net.depth,
        layers=len(net.layers),
        M=M,
        L=L,
        safety_factor=1.5,
        per_substep_eps=sub_budget,
        audit={
            "points": int(len(pts)),
            "max_err": max_err,
            "mean_err": float(np.mean(errs)),
            "argmax_point": [float(v) for v in pts[worst]],
        },
        runtime_s=time.perf_counter() - t_start,
        certified=max_err <= eps,
    )
    if not report.certified:
        exc = SynthesisFailure(f"final audit error {max_err:.4g} exceeds eps = {eps}")
        exc.diagnostics = report.to_dict()
        exc.report = report
        exc.stage = "audit"
        raise exc
    net = DeepNet(net.alpha, net.dim, net.layers, net.checkpoints, {})
    return net, report
