import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flowc.deep_net import invert_deep, serialize
from flowc.errors import BudgetInfeasible, InvalidParameter, StepTooLarge
from flowc.ode import BoxDomain, FieldSpec, preset_field, reference_flow_batch
from flowc.pl_algebra import AlphaPL, PLFunc
from flowc.splitting import SubStep, apply_substep
from flowc.synth import (
    Budget,
    FlowConfig,
    Stage,
    StageChain,
    budget_composition,
    compile_flow,
    invert_alpha_pl,
    synth_substep,
    synth_substep_detailed,
)


def _audit(net, s, dom, n=1000, seed=9):
    pts = dom.sample(np.random.default_rng(seed), n)
    return np.max(np.linalg.norm(net(pts) - apply_substep(pts, s), axis=1))


def test_budget_examples():
    two = StageChain((Stage("a", "approx_monotone", 1.0), Stage("b", "approx_monotone", 1.0)))
    assert budget_composition(two, 0.1) == pytest.approx((0.05, 0.05))
    one = StageChain((Stage("a", "approx_monotone", 1.0),))
    assert budget_composition(one, 0.1) == pytest.approx((0.1,))
    aff = StageChain(
        (Stage("a", "approx_monotone", 1.0), Stage("M", "exact_affine", 3.0), Stage("b", "approx_monotone", 1.0))
    )
    d = budget_composition(aff, 0.1)
    assert d[1] == 0.0 and d[2] == pytest.approx(0.05) and d[0] == pytest.approx(0.05 / 3)
    with pytest.raises(BudgetInfeasible):
        budget_composition(StageChain((Stage("a", "approx_monotone", 1.0, max_delta=0.0),)), 0.1)


@given(st.lists(st.tuples(st.booleans(), st.floats(0.5, 4.0)), min_size=1, max_size=7), st.floats(1e-4, 1.0))
def test_budget_shares_sum_to_eps(stages, eps):
    chain = StageChain(
        tuple(Stage(f"s{i}", "approx_monotone" if ap else "exact_affine", lip) for i, (ap, lip) in enumerate(stages))
    )
    deltas = budget_composition(chain, eps)
    # error reaching the output, stage by stage
    total = 0.0
    for i, st_ in enumerate(chain.stages):
        gain = math.prod(s.lip for s in chain.stages[i + 1 :])
        total += deltas[i] * gain
    if chain.n_approx:
        assert total == pytest.approx(eps, rel=1e-9)
    else:
        assert total == 0.0


def test_budget_thirds():
    b = Budget.thirds(0.3)
    assert b.eps_field + b.eps_split + b.eps_synth == pytest.approx(0.3)
    with pytest.raises(InvalidParameter):
        Budget(0.1, 0.05, 0.05, 0.05)


def test_invert_alpha_pl():
    g = AlphaPL(PLFunc((0.0, 1.0), (0.5, 1.0, 0.25), (0.0, 1.0)), 0.5, 1.0, (1, 0, 2))
    inv = invert_alpha_pl(g)
    xs = np.linspace(-3, 3, 301)
    assert np.allclose(inv(g(xs)), xs, atol=1e-14)


def test_trivial_branch():
    s = SubStep(0, 0, 1, 0.1, 1.5, [0.0, 2.0], 0.3)
    dom = BoxDomain.cube(2)
    res = synth_substep_detailed(s, dom, 0.01, 0.5)
    assert res.branch == "diagonal"
    assert _audit(res.net, s, dom) <= 0.01


def test_general_substep_example():
    s = SubStep(0, 0, 1, 0.05, 1.0, [1.0, 1.0], 0.0)
    dom = BoxDomain.cube(2)
    for method in ("auto", "pivot"):
        net = synth_substep(s, dom, 0.01, 0.5, method=method)
        assert _audit(net, s, dom) <= 0.01


def test_step_too_large():
    s = SubStep(0, 0, 0, 1.5, 1.0, [1.0, 0.5], 0.0)
    with pytest.raises(StepTooLarge):
        synth_substep(s, BoxDomain.cube(2), 0.01, 0.5)


def test_pivot_exact_when_update_coordinate_absent():
    # w_j = 0: the pivot coordinate comes back through an exact inverse
    s = SubStep(0, 0, 0, 0.2, 1.0, [0.0, 1.5, -0.5], 0.2)
    dom = BoxDomain.cube(3)
    res = synth_substep_detailed(s, dom, 0.01, 0.5)
    assert res.branch == "pivot"
    pts = dom.sample(np.random.default_rng(2), 500)
    out = res.net(pts)
    assert np.max(np.abs(out[:, 1:] - pts[:, 1:])) <= 1e-10
    assert np.max(np.abs(out[:, 0] - apply_substep(pts, s)[:, 0])) <= 0.01


@given(st.integers(2, 3), st.integers(0, 2**31), st.sampled_from(["auto", "pivot"]))
@settings(max_examples=25, deadline=None)
def test_substep_certified_and_invertible(d, seed, method):
    rng = np.random.default_rng(seed)
    w = rng.uniform(-1, 1, d)
    a = rng.normal()
    j = int(rng.integers(d))
    dt = rng.uniform(0.05, 0.5) / (abs(a) * np.max(np.abs(w)))
    s = SubStep(0, 0, j, dt, a, w, rng.normal())
    dom = BoxDomain.cube(d)
    res = synth_substep_detailed(s, dom, 0.01, 0.5, method=method)
    assert _audit(res.net, s, dom) <= 0.01
    assert res.net.is_nonsingular()
    pts = dom.sample(rng, 50)
    assert np.max(np.abs(invert_deep(res.net, res.net(pts)) - pts)) <= 1e-9
    if res.branch != "pivot":
        out = res.net(pts)
        assert np.max(np.abs(np.delete(out, j, axis=1) - np.delete(pts, j, axis=1))) <= 1e-10


@given(st.integers(0, 2**31))
@settings(max_examples=15, deadline=None)
def test_composition_error_domination(seed):
    rng = np.random.default_rng(seed)
    w = rng.uniform(-1, 1, 2)
    a = rng.normal()
    dt = 0.4 / (abs(a) * np.max(np.abs(w)))
    s = SubStep(0, 0, 1, dt, a, w, rng.normal())
    dom = BoxDomain.cube(2)
    res = synth_substep_detailed(s, dom, 0.02, 0.5, method="pivot")
    bound = sum(res.deltas[k] * res.gains[k] for k in res.deltas)
    assert _audit(res.net, s, dom) <= bound * math.sqrt(2) + 1e-12


def test_compile_flow_rejects_bad_eps():
    with pytest.raises(InvalidParameter):
        compile_flow(preset_field("decay1d"), BoxDomain.cube(1), 1.0, 0.0)


def test_compile_flow_decay():
    spec = preset_field("decay1d")
    dom = BoxDomain.cube(1)
    net, rep = compile_flow(spec, dom, 1.0, 0.05, 0.5)
    xs = np.linspace(-1, 1, 1001)[:, None]
    assert np.max(np.abs(net(xs) - math.exp(-1) * xs)) <= 0.05
    assert rep.certified and rep.audit["max_err"] <= 0.05
    assert rep.measured["field"] <= rep.eps_parts["field"]
    assert rep.measured["split"] <= rep.eps_parts["split"]
    assert rep.measured["synth"] <= rep.eps_parts["synth"]
    assert net.checkpoints[0] == (0, 0.0) and net.checkpoints[-1][1] == 1.0
    assert len(net.checkpoints) == rep.n + 1
    assert np.all(np.abs(net.determinants()) > 0)
    # identical inputs give identical files
    net2, _ = compile_flow(spec, dom, 1.0, 0.05, 0.5)
    assert serialize(net) == serialize(net2)


def test_checkpoints_follow_trajectory():
    from flowc.deep_net import hidden_states

    spec = preset_field("decay1d")
    net, rep = compile_flow(spec, BoxDomain.cube(1), 1.0, 0.05, 0.5)
    x0 = np.array([[0.8]])
    states = hidden_states(net, x0, [l for l, _ in net.checkpoints])
    for layer, t in net.checkpoints:
        exact = 0.8 * math.exp(-t)
        assert abs(states[layer][0, 0] - exact) <= 0.05
