"""Brute-force fairness theory on finite joint tables ``P(x, s, y)``.

Decision rules are stochastic kernels ``q[x, s] = Q(yhat=1 | x, s)``.
Disparity is ``sum_s P(s) * TV(Q_{yhat|s}, Q_yhat)``; with binary
predictions each TV is the absolute gap between positive rates.

The constrained optimum is found by exhaustive search over a grid of
group positive rates ``(r0, r1)``.  This is exact in the inner step: for a
fixed rate, a group's risk is minimized by switching cells to ``yhat=1`` in
decreasing order of ``P(y=1|x,s)`` (a fractional knapsack), and the
disparity depends on the rule only through ``(r0, r1)``.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

MAX_CELLS = 8
PROB_TOL = 1e-12


@dataclass(frozen=True)
class DiscreteInstance:
    """Joint table indexed ``p[x, s, y]`` with ``s, y`` in {0, 1}."""

    p: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.p, dtype=np.float64)
        if p.ndim != 3 or p.shape[1:] != (2, 2):
            raise ValueError(f"table must have shape (nx, 2, 2), got {p.shape}")
        if p.shape[0] < 1 or p.shape[0] > 16:
            raise ValueError("alphabet size of X must be between 1 and 16")
        if np.any(p < 0) or not np.all(np.isfinite(p)):
            raise ValueError("probabilities must be finite and non-negative")
        if abs(p.sum() - 1.0) > PROB_TOL * max(1, p.size):
            raise ValueError(f"probabilities sum to {p.sum()!r}, not 1")
        if np.any(p.sum(axis=(0, 2)) <= 0):
            raise ValueError("both sensitive groups need positive probability")
        object.__setattr__(self, "p", p)

    @property
    def nx(self) -> int:
        return self.p.shape[0]

    def p_s(self) -> np.ndarray:
        return self.p.sum(axis=(0, 2))

    def p_xs(self) -> np.ndarray:
        return self.p.sum(axis=2)

    def p_x_given_s(self) -> np.ndarray:
        return self.p_xs() / self.p_s()[None, :]

    def p_y1_given_xs(self) -> np.ndarray:
        """``P(y=1|x,s)``; NaN on zero-probability cells."""
        pxs = self.p_xs()
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(pxs > 0, self.p[:, :, 1] / np.where(pxs > 0, pxs, 1.0), np.nan)

    def p_y1_given_s(self) -> np.ndarray:
        return self.p[:, :, 1].sum(axis=0) / self.p_s()

    def is_deterministic(self, tol: float = 1e-12) -> bool:
        c = self.p_y1_given_xs()
        c = c[~np.isnan(c)]
        return bool(np.all((c <= tol) | (c >= 1.0 - tol)))

    @classmethod
    def from_conditionals(cls, p_s1: float, p_x_given_s, p_y1_given_xs) -> "DiscreteInstance":
        """Assemble ``P(s) P(x|s) P(y|x,s)``; arrays are indexed ``[x, s]``."""
        pxs = np.asarray(p_x_given_s, dtype=np.float64)
        cy = np.asarray(p_y1_given_xs, dtype=np.float64)
        ps = np.array([1.0 - p_s1, p_s1])
        joint = pxs * ps[None, :]
        p = np.stack([joint * (1.0 - cy), joint * cy], axis=2)
        return cls(p / p.sum())

    def to_json(self) -> dict:
        return {"sizes": [self.nx, 2, 2], "table": self.p.ravel().tolist()}

    @classmethod
    def from_json(cls, doc: dict) -> "DiscreteInstance":
        sizes = doc.get("sizes")
        table = doc.get("table")
        if sizes is None or table is None:
            raise ValueError("instance document needs 'sizes' and 'table'")
        if len(sizes) != 3 or list(sizes[1:]) != [2, 2]:
            raise ValueError("sizes must be [nx, 2, 2]")
        arr = np.asarray(table, dtype=np.float64)
        if arr.size != sizes[0] * 4:
            raise ValueError(f"table has {arr.size} entries, sizes imply {sizes[0] * 4}")
        return cls(arr.reshape(sizes))


@dataclass(frozen=True)
class StochasticRule:
    q: np.ndarray
    undefined: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        q = np.asarray(self.q, dtype=np.float64)
        if q.ndim != 2 or q.shape[1] != 2:
            raise ValueError("rule must have shape (nx, 2)")
        if np.any(q < 0) or np.any(q > 1):
            raise ValueError("rule entries must lie in [0, 1]")
        object.__setattr__(self, "q", q)

    @classmethod
    def constant(cls, nx: int, value: float) -> "StochasticRule":
        return cls(np.full((nx, 2), float(value)))


@dataclass(frozen=True)
class FairOptimum:
    rule: StochasticRule
    risk: float
    achieved_disparity: float
    epsilon: float

    def to_json(self) -> dict:
        return {
            "risk": self.risk,
            "achieved_disparity": self.achieved_disparity,
            "epsilon": self.epsilon,
            "rule": self.rule.q.tolist(),
        }


def _check_rule(inst: DiscreteInstance, rule: StochasticRule) -> None:
    if rule.q.shape != (inst.nx, 2):
        raise ValueError(f"rule shape {rule.q.shape} does not match instance ({inst.nx}, 2)")


def rule_risk(inst: DiscreteInstance, rule: StochasticRule) -> float:
    """Expected 0/1 loss of the randomized rule."""
    _check_rule(inst, rule)
    q = rule.q
    return float(np.sum(inst.p[:, :, 0] * q + inst.p[:, :, 1] * (1.0 - q)))


def group_rates(inst: DiscreteInstance, rule: StochasticRule) -> np.ndarray:
    _check_rule(inst, rule)
    return np.sum(inst.p_x_given_s() * rule.q, axis=0)


def disparity_from_rates(ps: np.ndarray, r0, r1):
    rbar = ps[0] * r0 + ps[1] * r1
    return ps[0] * np.abs(r0 - rbar) + ps[1] * np.abs(r1 - rbar)


def rule_disparity(inst: DiscreteInstance, rule: StochasticRule) -> float:
    r = group_rates(inst, rule)
    return float(disparity_from_rates(inst.p_s(), r[0], r[1]))


def bayes_rule(inst: DiscreteInstance) -> StochasticRule:
    """Deterministic ``argmax_y P(y|x,s)``; ties and empty cells predict 0."""
    c = inst.p_y1_given_xs()
    empty = np.isnan(c)
    q = np.where(empty, 0.0, (np.nan_to_num(c) > 0.5).astype(np.float64))
    undefined = tuple((int(x), int(s)) for x, s in zip(*np.nonzero(empty)))
    return StochasticRule(q, undefined)


# --------------------------------------------------------------------------
# per-group greedy frontier
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class _Frontier:
    order: np.ndarray     # cells of group s, most positive-leaning first
    cum_w: np.ndarray     # cumulative P(x|s), starts at 0
    cum_c: np.ndarray     # cumulative risk change (joint units), starts at 0
    base: float           # risk of the all-zero rule on this group
    weights: np.ndarray   # P(x|s) in `order`


def _frontier(inst: DiscreteInstance, s: int) -> _Frontier:
    w = inst.p_x_given_s()[:, s]
    cells = np.flatnonzero(w > 0)
    cond = inst.p_y1_given_xs()[cells, s]
    # stable sort keeps lower x first on ties
    order = cells[np.argsort(-cond, kind="stable")]
    delta = inst.p[order, s, 0] - inst.p[order, s, 1]
    cum_w = np.concatenate([[0.0], np.cumsum(w[order])])
    cum_w[-1] = 1.0
    cum_c = np.concatenate([[0.0], np.cumsum(delta)])
    return _Frontier(order, cum_w, cum_c, float(inst.p[:, s, 1].sum()), w[order])


def group_min_risk(inst: DiscreteInstance, s: int, rates) -> np.ndarray:
    """Smallest joint-probability risk on group ``s`` for each target rate."""
    f = _frontier(inst, s)
    return f.base + np.interp(np.asarray(rates, dtype=np.float64), f.cum_w, f.cum_c)


def group_rule_column(inst: DiscreteInstance, s: int, rate: float) -> np.ndarray:
    f = _frontier(inst, s)
    q = np.zeros(inst.nx)
    remaining = rate
    for cell, w in zip(f.order, f.weights):
        take = min(1.0, max(0.0, remaining / w))
        q[cell] = take
        remaining -= take * w
        if remaining <= 0:
            break
    return q


def rule_for_rates(inst: DiscreteInstance, r0: float, r1: float) -> StochasticRule:
    return StochasticRule(np.stack([group_rule_column(inst, 0, r0), group_rule_column(inst, 1, r1)], axis=1))


# --------------------------------------------------------------------------
# constrained optimum
# --------------------------------------------------------------------------


def _refine(inst: DiscreteInstance, rule: StochasticRule, epsilon: float, start_step: float) -> StochasticRule:
    """Coordinate descent on single cells; only feasible, improving moves."""
    q = rule.q.copy()
    best = rule_risk(inst, StochasticRule(q))
    step = start_step
    while step > 1e-9:
        improved = False
        for x in range(inst.nx):
            for s in (0, 1):
                for d in (step, -step):
                    cand = q.copy()
                    cand[x, s] = min(1.0, max(0.0, cand[x, s] + d))
                    r = StochasticRule(cand)
                    if rule_disparity(inst, r) > epsilon + 1e-12:
                        continue
                    risk = rule_risk(inst, r)
                    if risk < best - 1e-15:
                        q, best, improved = cand, risk, True
        if not improved:
            step /= 2
    return StochasticRule(q)


def fair_optimum_grid(inst: DiscreteInstance, epsilon: float, grid_n: int = 101,
                      refine: bool = True) -> FairOptimum:
    """Minimum-risk rule with disparity at most ``epsilon``.

    Scans every ``(r0, r1)`` pair on a uniform ``grid_n`` grid in ``[0, 1]``
    (row-major, first minimum wins), then runs a coordinate-descent pass on
    the winning rule.
    """
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    if grid_n < 11:
        raise ValueError("grid_n must be >= 11")
    if inst.nx * 2 > MAX_CELLS:
        raise ValueError(f"instance has {inst.nx * 2} cells; exhaustive search capped at {MAX_CELLS}")
    grid = np.linspace(0.0, 1.0, grid_n)
    risk = group_min_risk(inst, 0, grid)[:, None] + group_min_risk(inst, 1, grid)[None, :]
    disp = disparity_from_rates(inst.p_s(), grid[:, None], grid[None, :])
    risk = np.where(disp <= epsilon + 1e-12, risk, np.inf)
    i, j = np.unravel_index(int(np.argmin(risk)), risk.shape)
    rule = rule_for_rates(inst, grid[i], grid[j])
    if refine:
        rule = _refine(inst, rule, epsilon, 1.0 / (grid_n - 1))
    return FairOptimum(rule, rule_risk(inst, rule), rule_disparity(inst, rule), float(epsilon))


def fair_optimum_bruteforce(inst: DiscreteInstance, epsilon: float, grid_n: int = 11,
                            max_evals: int = 5_000_000) -> FairOptimum:
    """Literal per-cell enumeration of ``q`` on a grid; small instances only."""
    cells = inst.nx * 2
    if grid_n ** cells > max_evals:
        raise ValueError(f"{grid_n}^{cells} rules exceeds the evaluation budget")
    grid = np.linspace(0.0, 1.0, grid_n)
    best = None
    for combo in itertools.product(grid, repeat=cells):
        rule = StochasticRule(np.asarray(combo).reshape(inst.nx, 2))
        if rule_disparity(inst, rule) > epsilon + 1e-12:
            continue
        risk = rule_risk(inst, rule)
        if best is None or risk < best[0] - 1e-15:
            best = (risk, rule)
    risk, rule = best
    return FairOptimum(rule, risk, rule_disparity(inst, rule), float(epsilon))


def fair_optimal_risk_closed_form(inst: DiscreteInstance) -> float:
    """Bayes risk plus ``P(s_min) * TV(P_{Y|S=0}, P_{Y|S=1})``.

    Only valid when the label is a deterministic function of ``(x, s)``.
    """
    if not inst.is_deterministic():
        raise ValueError("closed form requires a deterministic labeling y = g(x, s)")
    ps = inst.p_s()
    py = inst.p_y1_given_s()
    bayes = rule_risk(inst, bayes_rule(inst))
    return float(bayes + ps.min() * abs(py[0] - py[1]))


# --------------------------------------------------------------------------
# multi-client gap bound
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class GapBound:
    rhs: float
    lhs_best_global: float
    s_max: int
    slack: float

    @property
    def holds(self) -> bool:
        return bool(self.lhs_best_global >= self.rhs - self.slack)

    def to_json(self) -> dict:
        return {"rhs": self.rhs, "lhs_best_global": self.lhs_best_global, "s_max": self.s_max,
                "slack": self.slack, "holds": self.holds}


def _check_shared(instances: Sequence[DiscreteInstance]) -> None:
    ref = instances[0]
    for k, inst in enumerate(instances[1:], start=1):
        if inst.nx != ref.nx:
            raise ValueError(f"client {k} has a different X alphabet")
        a, b = ref.p_y1_given_xs(), inst.p_y1_given_xs()
        both = ~np.isnan(a) & ~np.isnan(b)
        if not np.allclose(a[both], b[both], atol=1e-9):
            raise ValueError(f"client {k} does not share P(y|x,s) with client 0")
        if not np.allclose(ref.p_x_given_s(), inst.p_x_given_s(), atol=1e-9):
            raise ValueError(
                f"client {k}: P(x|s) differs from client 0; the bound compares rules "
                "through a common P(f(X)), so only P(s) may vary across clients"
            )


def pooled_majority(instances: Sequence[DiscreteInstance]) -> int:
    p1 = float(np.mean([inst.p_s()[1] for inst in instances]))
    if abs(p1 - 0.5) <= 1e-12:
        raise ValueError("pooled sensitive attribute is tied; the bound needs a strict majority")
    return int(p1 > 0.5)


def personalization_gap_rhs(instances: Sequence[DiscreteInstance]) -> float:
    """Sum over clients of ``(2 P_i(s_max_i) - 1) * TV(P_i(Y|s_max), P_i(Y|s_max_i))``."""
    s_max = pooled_majority(instances)
    total = 0.0
    for inst in instances:
        ps = inst.p_s()
        s_loc = int(ps[1] > ps[0])
        py = inst.p_y1_given_s()
        total += (2.0 * ps[s_loc] - 1.0) * abs(py[s_max] - py[s_loc])
    return total


def personalization_gap_bound(instances: Sequence[DiscreteInstance], grid_n: int = 1001) -> GapBound:
    """Compare the best DP-feasible global rule against the per-client optima.

    A global rule is fair at every client only if both groups share one
    positive rate ``r``; the scan covers ``r`` on the grid and uses the
    optimal group fill at each rate.
    """
    if len(instances) < 2:
        raise ValueError("need at least two clients")
    _check_shared(instances)
    rhs = personalization_gap_rhs(instances)
    s_max = pooled_majority(instances)
    grid = np.linspace(0.0, 1.0, grid_n)
    ref = instances[0]
    # conditional group risks are shared; only P(s) weights differ per client
    cond = [group_min_risk(ref, s, grid) / ref.p_s()[s] for s in (0, 1)]
    total = np.zeros(grid_n)
    for inst in instances:
        ps = inst.p_s()
        total += ps[0] * cond[0] + ps[1] * cond[1]
    best_local = sum(fair_optimum_grid(inst, 0.0, grid_n).risk for inst in instances)
    lhs = float(total.min() - best_local)
    return GapBound(rhs=float(rhs), lhs_best_global=lhs, s_max=s_max, slack=2.0 / grid_n)


def load_instances(path) -> list[DiscreteInstance]:
    with open(path) as fh:
        doc = json.load(fh)
    if "clients" in doc:
        return [DiscreteInstance.from_json(d) for d in doc["clients"]]
    return [DiscreteInstance.from_json(doc)]


# contract name
prop1_gap_bound = personalization_gap_bound
