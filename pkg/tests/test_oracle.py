import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import linprog

from fairfl.oracle import (
    DiscreteInstance,
    StochasticRule,
    bayes_rule,
    fair_optimal_risk_closed_form,
    fair_optimum_bruteforce,
    fair_optimum_grid,
    load_instances,
    pooled_majority,
    personalization_gap_bound,
    personalization_gap_rhs,
    rule_disparity,
    rule_risk,
)


def binary_instance(p_s0, py_s0, py_s1):
    """Deterministic labels: x=0 carries y=1, x=1 carries y=0, in each group."""
    pxs = np.array([[py_s0, py_s1], [1 - py_s0, 1 - py_s1]])
    cy = np.array([[1.0, 1.0], [0.0, 0.0]])
    return DiscreteInstance.from_conditionals(1 - p_s0, pxs, cy)


REFERENCE = binary_instance(0.8, 0.7, 0.3)


def random_instance(rng, nx=None, deterministic=False):
    nx = nx or int(rng.integers(2, 5))
    pxs = rng.dirichlet(np.ones(nx), size=2).T
    cy = rng.integers(0, 2, size=(nx, 2)).astype(float) if deterministic else rng.uniform(size=(nx, 2))
    return DiscreteInstance.from_conditionals(rng.uniform(0.1, 0.9), pxs, cy)


def lp_fair_risk(inst, eps):
    """Independent oracle: the fair program as an LP over (q, t) with t >= |r0 - r1|."""
    nx = inst.nx
    ps = inst.p_s()
    pxs = inst.p_x_given_s()
    c = np.r_[(inst.p[:, :, 0] - inst.p[:, :, 1]).ravel(), 0.0]
    a = np.zeros(2 * nx + 1)
    a[0::2][:nx] = pxs[:, 0]
    a[1::2][:nx] = -pxs[:, 1]
    # disparity = 2 P0 P1 |r0 - r1|
    k = 2 * ps[0] * ps[1]
    A = np.array([np.r_[a[:-1], -1.0], np.r_[-a[:-1], -1.0], np.r_[np.zeros(2 * nx), k]])
    res = linprog(c, A_ub=A, b_ub=[0.0, 0.0, eps], bounds=[(0, 1)] * (2 * nx) + [(0, None)], method="highs")
    return res.fun + inst.p[:, :, 1].sum()


# -- instance ---------------------------------------------------------------


def test_instance_validation():
    with pytest.raises(ValueError, match="sum"):
        DiscreteInstance(np.full((2, 2, 2), 0.1))
    with pytest.raises(ValueError, match="non-negative"):
        DiscreteInstance(np.array([[[0.5, 0.5], [0.5, -0.5]]]))
    with pytest.raises(ValueError, match="both sensitive groups"):
        DiscreteInstance(np.array([[[0.5, 0.5], [0.0, 0.0]]]))
    with pytest.raises(ValueError, match="shape"):
        DiscreteInstance(np.ones((2, 3, 2)) / 12)


def test_instance_json_round_trip(tmp_path):
    doc = REFERENCE.to_json()
    assert doc["sizes"] == [2, 2, 2]
    back = DiscreteInstance.from_json(json.loads(json.dumps(doc)))
    np.testing.assert_array_equal(back.p, REFERENCE.p)
    path = tmp_path / "fam.json"
    path.write_text(json.dumps({"clients": [doc, doc]}))
    assert len(load_instances(path)) == 2


def test_reference_instance_marginals():
    np.testing.assert_allclose(REFERENCE.p_s(), [0.8, 0.2])
    np.testing.assert_allclose(REFERENCE.p_y1_given_s(), [0.7, 0.3])
    assert REFERENCE.is_deterministic()


# -- Bayes rule, risk, disparity --------------------------------------------


def test_bayes_risk_zero_on_deterministic_labels():
    assert rule_risk(REFERENCE, bayes_rule(REFERENCE)) == 0.0


def test_half_labels_make_every_rule_cost_half(rng):
    inst = DiscreteInstance.from_conditionals(0.3, np.array([[0.4, 0.6], [0.6, 0.4]]), np.full((2, 2), 0.5))
    for _ in range(20):
        assert rule_risk(inst, StochasticRule(rng.uniform(size=(2, 2)))) == pytest.approx(0.5)


def test_two_point_bayes_rule():
    # P(y=1|x0)=0.8, P(y=1|x1)=0.3, identical in both groups
    pxs = np.array([[0.6, 0.6], [0.4, 0.4]])
    inst = DiscreteInstance.from_conditionals(0.5, pxs, np.array([[0.8, 0.8], [0.3, 0.3]]))
    rule = bayes_rule(inst)
    np.testing.assert_array_equal(rule.q, [[1, 1], [0, 0]])
    assert rule_risk(inst, rule) == pytest.approx(0.2 * 0.6 + 0.3 * 0.4)


def test_bayes_tie_and_empty_cell():
    pxs = np.array([[1.0, 0.5], [0.0, 0.5]])
    inst = DiscreteInstance.from_conditionals(0.5, pxs, np.array([[0.5, 0.9], [0.2, 0.1]]))
    rule = bayes_rule(inst)
    assert rule.q[0, 0] == 0.0  # tie at 0.5 predicts 0
    assert rule.q[1, 0] == 0.0 and rule.undefined == ((1, 0),)


def test_bayes_beats_random_rules(rng):
    for _ in range(20):
        inst = random_instance(rng)
        best = rule_risk(inst, bayes_rule(inst))
        qs = rng.uniform(size=(1000, inst.nx, 2))
        risks = [rule_risk(inst, StochasticRule(q)) for q in qs]
        assert best <= min(risks) + 1e-15


def test_constant_rules_have_zero_disparity(rng):
    for _ in range(10):
        inst = random_instance(rng)
        for v in (0.0, 0.37, 1.0):
            assert rule_disparity(inst, StochasticRule.constant(inst.nx, v)) <= 1e-15


def test_risk_matches_monte_carlo():
    rng = np.random.default_rng(7)
    inst = random_instance(rng, nx=3)
    rule = StochasticRule(rng.uniform(size=(3, 2)))
    n = 1_000_000
    cells = rng.choice(inst.p.size, size=n, p=inst.p.ravel())
    x, s, y = np.unravel_index(cells, inst.p.shape)
    yhat = rng.uniform(size=n) < rule.q[x, s]
    err = np.mean(yhat != y)
    risk = rule_risk(inst, rule)
    assert abs(err - risk) < 3 * np.sqrt(risk * (1 - risk) / n)


# -- constrained optimum ----------------------------------------------------


def test_reference_fair_optimum():
    opt = fair_optimum_grid(REFERENCE, 0.0)
    assert abs(opt.risk - 0.08) <= 0.02
    assert opt.achieved_disparity <= 1e-9
    fine = fair_optimum_grid(REFERENCE, 0.0, grid_n=1001)
    assert abs(fine.risk - fair_optimal_risk_closed_form(REFERENCE)) <= 0.002


def test_slack_constraint_returns_bayes_risk(rng):
    for _ in range(5):
        inst = random_instance(rng)
        assert fair_optimum_grid(inst, 1.0).risk == pytest.approx(rule_risk(inst, bayes_rule(inst)), abs=1e-12)


def test_risk_nonincreasing_in_epsilon(rng):
    for _ in range(5):
        inst = random_instance(rng)
        risks = [fair_optimum_grid(inst, e).risk for e in np.linspace(0, 1, 11)]
        assert all(b <= a + 1e-12 for a, b in zip(risks, risks[1:]))


def test_grid_guards():
    with pytest.raises(ValueError, match="epsilon"):
        fair_optimum_grid(REFERENCE, -0.1)
    with pytest.raises(ValueError, match="grid_n"):
        fair_optimum_grid(REFERENCE, 0.0, grid_n=5)
    big = DiscreteInstance(np.full((5, 2, 2), 1 / 20))
    with pytest.raises(ValueError, match="cells"):
        fair_optimum_grid(big, 0.0)


def test_grid_matches_per_cell_bruteforce(rng):
    for _ in range(6):
        inst = random_instance(rng, nx=2)
        eps = float(rng.choice([0.0, 0.05, 0.2]))
        brute = fair_optimum_bruteforce(inst, eps, grid_n=11)
        grid = fair_optimum_grid(inst, eps, grid_n=101)
        # the rate grid contains every rate reachable on the per-cell grid
        assert grid.risk <= brute.risk + 1e-12


@pytest.mark.parametrize("eps", [0.0, 0.03, 0.1])
def test_grid_matches_linear_program(rng, eps):
    for _ in range(10):
        inst = random_instance(rng)
        opt = fair_optimum_grid(inst, eps, grid_n=101)
        assert opt.achieved_disparity <= eps + 1e-9
        assert opt.risk == pytest.approx(lp_fair_risk(inst, eps), abs=2 / 101)


def test_closed_form_agrees_with_grid_on_random_deterministic_instances():
    rng = np.random.default_rng(11)
    for _ in range(50):
        inst = random_instance(rng, deterministic=True)
        assert abs(fair_optimum_grid(inst, 0.0).risk - fair_optimal_risk_closed_form(inst)) <= 2 / 101


def test_closed_form_examples():
    assert fair_optimal_risk_closed_form(binary_instance(0.6, 0.4, 0.4)) == pytest.approx(0.0)
    assert fair_optimal_risk_closed_form(REFERENCE) == pytest.approx(0.08)
    assert fair_optimal_risk_closed_form(binary_instance(0.5, 0.9, 0.2)) == pytest.approx(0.5 * 0.7)


def test_closed_form_rejects_noisy_labels():
    inst = DiscreteInstance.from_conditionals(0.5, np.full((2, 2), 0.5), np.full((2, 2), 0.7))
    with pytest.raises(ValueError, match="deterministic"):
        fair_optimal_risk_closed_form(inst)


# -- multi-client gap bound -------------------------------------------------


def shared_family(p_s1_list, py_s0=0.7, py_s1=0.3):
    return [binary_instance(1 - p, py_s0, py_s1) for p in p_s1_list]


def test_identical_clients_have_no_gap():
    b = personalization_gap_bound(shared_family([0.3, 0.3]))
    assert b.rhs == 0.0
    assert abs(b.lhs_best_global) <= 2 / 1001


def test_rhs_two_client_example():
    # client 1: P(S=1)=0.9, client 2: P(S=0)=0.7, label conditionals differ by 0.4
    fam = shared_family([0.9, 0.3])
    assert pooled_majority(fam) == 1
    assert personalization_gap_rhs(fam) == pytest.approx((2 * 0.7 - 1) * 0.4)
    b = personalization_gap_bound(fam)
    assert b.holds
    # the bound is tight on deterministic labels
    assert b.lhs_best_global == pytest.approx(b.rhs, abs=2 / 1001)


def test_rhs_zero_without_label_shift():
    assert personalization_gap_rhs(shared_family([0.9, 0.3], 0.5, 0.5)) == 0.0


def test_pooled_tie_rejected():
    with pytest.raises(ValueError, match="tied"):
        personalization_gap_bound(shared_family([0.8, 0.2]))


def test_family_must_share_conditionals():
    a = binary_instance(0.3, 0.7, 0.3)
    b = binary_instance(0.6, 0.5, 0.3)  # different P(x|s)
    with pytest.raises(ValueError, match="P\\(x\\|s\\)"):
        personalization_gap_bound([a, b])
    noisy = DiscreteInstance.from_conditionals(0.4, np.array([[0.7, 0.3], [0.3, 0.7]]), np.full((2, 2), 0.6))
    with pytest.raises(ValueError, match="P\\(y\\|x,s\\)"):
        personalization_gap_bound([a, noisy])
    with pytest.raises(ValueError):
        personalization_gap_bound([a])


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10**6))
def test_gap_bound_holds_on_random_families(seed):
    rng = np.random.default_rng(seed)
    nx = int(rng.integers(2, 5))
    pxs = rng.dirichlet(np.ones(nx), size=2).T
    cy = rng.integers(0, 2, size=(nx, 2)).astype(float)
    while True:
        ps1 = rng.uniform(0.05, 0.95, size=int(rng.integers(2, 5)))
        if ps1.max() > 0.5 > ps1.min() and abs(ps1.mean() - 0.5) > 0.01:
            break
    fam = [DiscreteInstance.from_conditionals(p, pxs, cy) for p in ps1]
    assert personalization_gap_bound(fam, grid_n=401).holds
