import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mvlab.transport import (
    CostSpec,
    EmpiricalMeasure,
    brute_force_wasserstein,
    cost_matrix,
    dual_lower_bound,
    eta_cost,
    exact_wasserstein_eta,
    product_tensorization_bound,
    sinkhorn_wasserstein_eta,
    wasserstein_1_uniform,
)


def test_cost_examples():
    c = CostSpec(0.5, 1, 1)
    assert eta_cost([0.0], [4.0], c) == pytest.approx(2.0)
    c2 = CostSpec(0.5, 2, 1)
    assert eta_cost([0.0, 0.0], [4.0, 9.0], c2) == pytest.approx(5.0)
    c3 = CostSpec(1.0, 1, 2)
    assert eta_cost([0.0, 0.0], [3.0, 4.0], c3) == pytest.approx(5.0)


def test_dirac_distance():
    cost = CostSpec(0.5)
    res = exact_wasserstein_eta(EmpiricalMeasure([[0.0]]), EmpiricalMeasure([[4.0]]), cost)
    assert res.value == pytest.approx(2.0)


def test_shift_on_line():
    a = EmpiricalMeasure([0.0, 1.0, 2.0])
    b = EmpiricalMeasure([0.5, 1.5, 2.5])
    assert exact_wasserstein_eta(a, b, CostSpec(1.0)).value == pytest.approx(0.5)
    assert exact_wasserstein_eta(a, b, CostSpec(0.5)).value == pytest.approx(math.sqrt(0.5))


def test_weighted_lp():
    a = EmpiricalMeasure([0.0, 1.0], weights=[0.25, 0.75])
    b = EmpiricalMeasure([0.0], weights=[1.0])
    res = exact_wasserstein_eta(a, b, CostSpec(1.0))
    assert res.value == pytest.approx(0.75)
    assert res.method == "exact-lp"
    assert res.plan.sum(0) == pytest.approx([1.0])


def test_input_errors():
    with pytest.raises(ValueError):
        CostSpec(0.0)
    with pytest.raises(ValueError):
        CostSpec(1.5)
    with pytest.raises(ValueError):
        EmpiricalMeasure([[0.0, np.nan]])
    with pytest.raises(ValueError):
        EmpiricalMeasure([0.0, 1.0], weights=[0.6, 0.6])
    with pytest.raises(ValueError):
        EmpiricalMeasure(np.zeros((3, 3)), m=2)
    with pytest.raises(ValueError):
        exact_wasserstein_eta(EmpiricalMeasure(np.zeros((2, 2)), m=2), EmpiricalMeasure([0.0]), CostSpec(1.0, 2))
    with pytest.raises(ValueError):
        brute_force_wasserstein(EmpiricalMeasure(np.arange(9.0)), EmpiricalMeasure(np.arange(9.0)), CostSpec(1.0))
    with pytest.raises(ValueError):
        product_tensorization_bound([0.1, -0.2])


def test_tensorization_examples():
    assert product_tensorization_bound([0.1, 0.2, 0.3]) == pytest.approx(0.6)
    rng = np.random.default_rng(0)
    x, y = rng.normal(size=(5, 1)), rng.normal(size=(5, 1)) + 1
    u, v = rng.normal(size=(5, 1)), rng.normal(size=(5, 1)) * 2
    cost1, cost2 = CostSpec(0.5), CostSpec(0.5, 2)
    w1 = exact_wasserstein_eta(EmpiricalMeasure(x), EmpiricalMeasure(y), cost1).value
    w2 = exact_wasserstein_eta(EmpiricalMeasure(u), EmpiricalMeasure(v), cost1).value
    # product of two uniform 5-point measures: 25 points each
    px = np.array([[a[0], b[0]] for a in x for b in u])
    py = np.array([[a[0], b[0]] for a in y for b in v])
    wp = exact_wasserstein_eta(EmpiricalMeasure(px, m=2), EmpiricalMeasure(py, m=2), cost2).value
    assert wp <= product_tensorization_bound([w1, w2]) + 1e-10


def test_w1_uniform_helper():
    a = np.array([0.0, 2.0, 1.0])
    b = np.array([1.0, 3.0, 2.0])
    assert wasserstein_1_uniform(a, b) == pytest.approx(1.0)
    A = np.array([[0.0, 0.0], [1.0, 1.0]])
    assert wasserstein_1_uniform(A, A + [3.0, 4.0]) == pytest.approx(5.0)


def test_sinkhorn_close_to_exact_and_bias_monotone():
    rng = np.random.default_rng(1)
    a = EmpiricalMeasure(rng.normal(size=(60, 2)), m=2)
    b = EmpiricalMeasure(rng.normal(size=(60, 2)) + 0.5, m=2)
    cost = CostSpec(0.5, 2)
    exact = exact_wasserstein_eta(a, b, cost).value
    vals = []
    for reg in (0.2, 0.05, 0.02):
        res = sinkhorn_wasserstein_eta(a, b, cost, reg=reg)
        assert res.converged
        assert res.value >= exact - 1e-10
        vals.append(res.value)
    assert vals[0] >= vals[1] >= vals[2]
    default = sinkhorn_wasserstein_eta(a, b, cost)
    assert default.value <= 1.05 * exact
    plan = default.coupling()
    assert plan.sum(1) == pytest.approx(a.weights, abs=1e-12)
    assert plan.sum(0) == pytest.approx(b.weights, abs=1e-12)


def test_sinkhorn_zero_iterations_flags():
    a = EmpiricalMeasure([0.0, 1.0])
    b = EmpiricalMeasure([0.3, 2.0])
    res = sinkhorn_wasserstein_eta(a, b, CostSpec(1.0), max_iter=0)
    assert not res.converged
    assert res.value >= exact_wasserstein_eta(a, b, CostSpec(1.0)).value - 1e-12


def test_dual_bound_dirac_tight():
    cost = CostSpec(0.5)
    lb = dual_lower_bound(EmpiricalMeasure([[0.0]]), EmpiricalMeasure([[4.0]]), cost)
    assert lb == pytest.approx(2.0)
    same = EmpiricalMeasure([[1.0], [2.0]])
    assert dual_lower_bound(same, same, cost) == 0.0


def _measures(draw, max_size=6, m=None, weighted=False):
    m = draw(st.integers(1, 2)) if m is None else m
    d = draw(st.integers(1, 2))
    P = draw(st.integers(1, max_size))
    Q = P if not weighted else draw(st.integers(1, max_size))
    seed = draw(st.integers(0, 10 ** 6))
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(P, m, d)) * rng.uniform(0.1, 3)
    Y = rng.normal(size=(Q, m, d)) * rng.uniform(0.1, 3) + rng.normal()
    if weighted:
        wa, wb = rng.dirichlet(np.ones(P)), rng.dirichlet(np.ones(Q))
        return EmpiricalMeasure(X, wa), EmpiricalMeasure(Y, wb), m, d, rng
    return EmpiricalMeasure(X), EmpiricalMeasure(Y), m, d, rng


etas = st.sampled_from([0.1, 0.25, 0.5, 0.75, 1.0])


@settings(max_examples=60, deadline=None)
@given(data=st.data(), eta=etas)
def test_exact_matches_brute_force_and_duality(data, eta):
    a, b, m, d, _ = _measures(data.draw, max_size=6)
    cost = CostSpec(eta, m, d)
    ex = exact_wasserstein_eta(a, b, cost)
    assert ex.value == pytest.approx(brute_force_wasserstein(a, b, cost), rel=1e-9, abs=1e-12)
    assert dual_lower_bound(a, b, cost, family_size=32) <= ex.value + 1e-9
    # symmetry
    assert exact_wasserstein_eta(b, a, cost).value == pytest.approx(ex.value, rel=1e-9, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(data=st.data(), eta=etas)
def test_triangle_inequality(data, eta):
    a, b, m, d, rng = _measures(data.draw, max_size=5)
    c = EmpiricalMeasure(rng.normal(size=(a.size, m, d)))
    cost = CostSpec(eta, m, d)
    ab = exact_wasserstein_eta(a, b, cost).value
    bc = exact_wasserstein_eta(b, c, cost).value
    ac = exact_wasserstein_eta(a, c, cost).value
    assert ac <= ab + bc + 1e-9
    assert exact_wasserstein_eta(a, a, cost).value == pytest.approx(0.0, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(data=st.data(), eta=etas)
def test_jensen_single_block(data, eta):
    a, b, _, d, _ = _measures(data.draw, max_size=6, m=1)
    w_eta = exact_wasserstein_eta(a, b, CostSpec(eta, 1, d)).value
    w_one = exact_wasserstein_eta(a, b, CostSpec(1.0, 1, d)).value
    assert w_eta <= w_one ** eta + 1e-9


@settings(max_examples=30, deadline=None)
@given(data=st.data(), eta=etas)
def test_weighted_plans_are_couplings(data, eta):
    a, b, m, d, _ = _measures(data.draw, max_size=6, weighted=True)
    cost = CostSpec(eta, m, d)
    res = exact_wasserstein_eta(a, b, cost)
    plan = res.coupling()
    assert np.all(plan >= 0)
    assert plan.sum(1) == pytest.approx(a.weights, abs=1e-8)
    assert plan.sum(0) == pytest.approx(b.weights, abs=1e-8)
    C = cost_matrix(a.points, b.points, eta)
    assert np.sum(plan * C) == pytest.approx(res.value, abs=1e-9)
    assert dual_lower_bound(a, b, cost, family_size=16) <= res.value + 1e-7
    sk = sinkhorn_wasserstein_eta(a, b, cost)
    assert sk.value >= res.value - 1e-7
