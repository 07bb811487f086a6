"""Dense simplex solver and the three capacity LPs built on it.

``solve_lp`` is a two-phase tableau simplex with Bland's smallest-index rule,
sized for the handful of variables these models need.  On top of it sit

* :func:`solve_flp`, the fundamental capacity LP of an informed decision maker,
* :func:`workload_vector`, the Adaptive-stage inspection plan for one job, and
* :func:`lower_bound`, the finite-delta correction to the FLP benchmark.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import NumericalInstability, WorkloadLpInfeasible
from .model import DerivedConstants, Instance, PolicyParams

log = logging.getLogger(__name__)

PIVOT_TOL = 1e-9
FEAS_TOL = 1e-8
COST_TOL = 1e-10  # relative to max |c|
TINY_PIVOT = 1e-11

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"


@dataclass
class LpProblem:
    """``minimize c.x`` subject to ``A[i].x (<=|>=|=) b[i]``.

    ``nonneg[j]`` False makes variable ``j`` free.
    """

    c: np.ndarray
    A: np.ndarray
    b: np.ndarray
    senses: Sequence[str]
    nonneg: np.ndarray | None = None

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float).reshape(-1)
        n = self.c.size
        self.A = np.asarray(self.A, dtype=float).reshape(-1, n) if n else np.zeros((len(self.senses), 0))
        self.b = np.asarray(self.b, dtype=float).reshape(-1)
        self.senses = tuple(self.senses)
        if self.nonneg is None:
            self.nonneg = np.ones(n, dtype=bool)
        self.nonneg = np.asarray(self.nonneg, dtype=bool)
        if self.A.shape != (self.b.size, n) or len(self.senses) != self.b.size:
            raise ValueError("inconsistent LP dimensions")
        if self.nonneg.shape != (n,):
            raise ValueError("nonneg flags must match the number of variables")
        bad = set(self.senses) - {"<=", ">=", "="}
        if bad:
            raise ValueError(f"unknown constraint senses {bad}")
        for arr in (self.c, self.A, self.b):
            if not np.all(np.isfinite(arr)):
                raise ValueError("LP coefficients must be finite")


@dataclass
class LpSolution:
    status: str
    value: float = math.nan
    x: np.ndarray = field(default_factory=lambda: np.zeros(0))
    active: tuple[int, ...] = ()
    duals: np.ndarray = field(default_factory=lambda: np.zeros(0))
    reduced_costs: np.ndarray = field(default_factory=lambda: np.zeros(0))
    slack_reduced_costs: np.ndarray = field(default_factory=lambda: np.zeros(0))
    iterations: int = 0


class _Tableau:
    """Row-form tableau ``[A | b]`` over a basis, with Bland pivoting."""

    def __init__(self, A: np.ndarray, b: np.ndarray, basis: list[int]):
        self.T = np.hstack([A, b[:, None]])
        self.basis = basis
        self.iterations = 0

    def pivot(self, row: int, col: int) -> None:
        T = self.T
        T[row] /= T[row, col]
        colv = T[:, col].copy()
        colv[row] = 0.0
        T -= np.outer(colv, T[row])
        self.basis[row] = col
        self.iterations += 1

    def run(self, cost: np.ndarray, allowed: np.ndarray, max_iter: int) -> str:
        T = self.T
        scale = float(np.abs(cost).max()) if cost.size else 0.0
        tol = COST_TOL * scale if scale > 0 else COST_TOL
        while True:
            if self.iterations > max_iter:
                raise NumericalInstability("simplex iteration limit reached")
            y_cost = cost[self.basis]
            reduced = cost - y_cost @ T[:, :-1]
            cand = np.flatnonzero((reduced < -tol) & allowed)
            if cand.size == 0:
                return OPTIMAL
            col = int(cand[0])
            column = T[:, col]
            rows = np.flatnonzero(column > PIVOT_TOL)
            if rows.size == 0:
                return UNBOUNDED
            ratios = T[rows, -1] / column[rows]
            best = ratios.min()
            ties = rows[ratios <= best + 1e-12 * max(1.0, abs(best))]
            # Bland: among tied rows leave the smallest basic index
            row = int(min(ties, key=lambda i: self.basis[i]))
            self.pivot(row, col)


def solve_lp(problem: LpProblem) -> LpSolution:
    """Solve ``problem`` with a two-phase Bland-rule simplex.

    Deterministic for identical inputs.  When optimal, ``x`` is a basic
    (vertex) solution, ``duals`` are row multipliers with
    ``value = duals . b`` and ``reduced_costs = c - A^T duals``.
    """
    c, A, b, senses = problem.c, problem.A, problem.b, problem.senses
    n_orig = c.size
    m = b.size

    # free variables are split into a positive and a negative part
    cols = []
    for j in range(n_orig):
        cols.append((j, 1.0))
        if not problem.nonneg[j]:
            cols.append((j, -1.0))
    n = len(cols)
    As = np.zeros((m, n))
    cs = np.zeros(n)
    for t, (j, sgn) in enumerate(cols):
        As[:, t] = sgn * A[:, j]
        cs[t] = sgn * c[j]

    row_sign = np.where(b < 0, -1.0, 1.0)
    As = As * row_sign[:, None]
    bs = b * row_sign
    eff = []
    for s, sense in zip(row_sign, senses):
        if sense == "=" or s > 0:
            eff.append(sense)
        else:
            eff.append(">=" if sense == "<=" else "<=")

    n_slack = sum(1 for e in eff if e != "=")
    n_art = sum(1 for e in eff if e != "<=")
    width = n + n_slack + n_art
    full = np.zeros((m, width))
    full[:, :n] = As
    slack_col = [-1] * m
    slack_sign = np.zeros(m)
    basis = [-1] * m
    si, ai = n, n + n_slack
    for i, e in enumerate(eff):
        if e != "=":
            sgn = 1.0 if e == "<=" else -1.0
            full[i, si] = sgn
            slack_col[i] = si
            slack_sign[i] = sgn * row_sign[i]
            if e == "<=":
                basis[i] = si
            si += 1
        if e != "<=":
            full[i, ai] = 1.0
            basis[i] = ai
            ai += 1

    max_iter = 50 * (width + m) + 100
    tab = _Tableau(full, bs.astype(float), basis)
    is_art = np.zeros(width, dtype=bool)
    is_art[n + n_slack:] = True

    if n_art:
        phase1 = is_art.astype(float)
        tab.run(phase1, np.ones(width, dtype=bool), max_iter)
        infeas = float(phase1[tab.basis] @ tab.T[:, -1])
        scale = max(1.0, float(np.abs(bs).max()) if m else 1.0)
        if infeas > FEAS_TOL * scale:
            return LpSolution(status=INFEASIBLE, iterations=tab.iterations)
        # drive remaining artificials out of the basis; drop redundant rows
        keep = []
        for i in range(m):
            if not is_art[tab.basis[i]]:
                keep.append(i)
                continue
            row = tab.T[i, :-1]
            cand = np.flatnonzero((np.abs(row) > TINY_PIVOT) & ~is_art)
            if cand.size:
                tab.pivot(i, int(cand[0]))
                keep.append(i)
        if len(keep) < m:
            tab.T = tab.T[keep]
            tab.basis = [tab.basis[i] for i in keep]
        kept_rows = keep
    else:
        kept_rows = list(range(m))

    cost = np.zeros(width)
    cost[:n] = cs
    status = tab.run(cost, ~is_art, max_iter)
    if status == UNBOUNDED:
        return LpSolution(status=UNBOUNDED, iterations=tab.iterations)

    z = np.zeros(width)
    z[tab.basis] = tab.T[:, -1]
    xs = z[:n]
    x = np.zeros(n_orig)
    for t, (j, sgn) in enumerate(cols):
        x[j] += sgn * xs[t]
    x[problem.nonneg & (x < 0) & (x > -FEAS_TOL)] = 0.0

    # duals from the final basis on the kept rows, mapped back to original row signs
    B = full[np.ix_(kept_rows, tab.basis)]
    try:
        y_kept = np.linalg.solve(B.T, cost[tab.basis])
    except np.linalg.LinAlgError:
        raise NumericalInstability("singular final basis") from None
    y_std = np.zeros(m)
    y_std[kept_rows] = y_kept
    duals = y_std * row_sign
    reduced = c - A.T @ duals
    slack_rc = np.zeros(m)
    for i in range(m):
        if slack_col[i] >= 0:
            slack_rc[i] = -full[i, slack_col[i]] * y_std[i]

    resid = A @ x - b
    viol = np.zeros(m)
    for i, sense in enumerate(senses):
        if sense == "<=":
            viol[i] = max(resid[i], 0.0)
        elif sense == ">=":
            viol[i] = max(-resid[i], 0.0)
        else:
            viol[i] = abs(resid[i])
    scale = 1.0 + (float(np.abs(b).max()) if m else 0.0)
    if m and viol.max() > 1e-6 * scale:
        raise NumericalInstability(f"solution violates constraints by {viol.max():.3g}")
    active = tuple(int(i) for i in np.flatnonzero(np.abs(resid) <= FEAS_TOL * scale))
    return LpSolution(
        status=OPTIMAL,
        value=float(c @ x),
        x=x,
        active=active,
        duals=duals,
        reduced_costs=reduced,
        slack_reduced_costs=slack_rc,
        iterations=tab.iterations,
    )


def lexicographic_solve(
    A: np.ndarray,
    b: np.ndarray,
    senses: Sequence[str],
    objectives: Sequence[np.ndarray],
) -> LpSolution | None:
    """Minimise ``objectives`` in priority order over ``{x >= 0: A x (senses) b}``.

    After each stage the feasible set shrinks to that stage's optimal face,
    identified exactly through complementary slackness: variables with
    positive reduced cost are fixed at zero and inequality rows with positive
    slack reduced cost become equalities.  Later stages therefore never see
    earlier objective coefficients, which keeps the result invariant under
    positive rescaling of any objective.  Returns None when infeasible.
    """
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    n = A.shape[1]
    senses = list(senses)
    free_cols = np.ones(n, dtype=bool)
    sol = None
    for c in objectives:
        c = np.asarray(c, dtype=float)
        idx = np.flatnonzero(free_cols)
        sub = solve_lp(LpProblem(c[idx], A[:, idx], b, senses))
        if sub.status == INFEASIBLE:
            return None
        if sub.status != OPTIMAL:
            raise NumericalInstability(f"lexicographic stage returned {sub.status}")
        x = np.zeros(n)
        x[idx] = sub.x
        sol = sub
        sol.x = x
        scale = float(np.abs(c).max())
        tol = 1e-9 * scale if scale > 0 else math.inf
        fixed = idx[sub.reduced_costs > tol]
        free_cols[fixed] = False
        for i, s in enumerate(senses):
            if s != "=" and sub.slack_reduced_costs[i] > tol:
                senses[i] = "="
    return sol


# ----------------------------------------------------------------------------
# Fundamental LP


@dataclass(frozen=True, eq=False)
class FlpResult:
    m_star_f: float
    allocation: np.ndarray  # n*[h, k]
    delta: float
    prior: np.ndarray

    def to_dict(self) -> dict:
        return {
            "m_star_f": self.m_star_f,
            "allocation": self.allocation.tolist(),
            "delta": self.delta,
            "prior": self.prior.tolist(),
        }


def flp_violations(result: FlpResult, constants: DerivedConstants, tol: float = 1e-8) -> list[str]:
    """Check the invariants every FLP optimum must satisfy; empty list means clean."""
    D, r = constants.kl_tensor, constants.r
    n, pi, m = result.allocation, result.prior, result.m_star_f
    L = math.log(1.0 / result.delta)
    H, K = n.shape
    out = []
    load = pi @ n
    for k in range(K):
        if load[k] > r[k] * m + tol:
            out.append(f"capacity row {k} exceeded: {load[k]} > {r[k] * m}")
    for h in range(H):
        for l in range(H):
            if h != l and D[h, l] @ n[h] < L - tol:
                out.append(f"information row ({h},{l}) short: {D[h, l] @ n[h]} < {L}")
        if n[h].sum() / L < 1.0 / constants.d_bar - tol:
            out.append(f"label {h} total allocation below ln(1/delta)/d_bar")
    if np.any(n < -tol):
        out.append("negative allocation")
    if m < L / constants.d_bar - tol:
        out.append(f"m*_F = {m} below ln(1/delta)/d_bar = {L / constants.d_bar}")
    return out


def solve_flp(instance: Instance, constants: DerivedConstants, delta: float) -> FlpResult:
    """Minimum system size for a decision maker who already knows every label.

    Variables are the per-label inspection counts ``n[h, k]`` and ``m``.
    """
    if not (0.0 < delta < 1.0):
        raise ValueError("delta must lie in (0, 1)")
    H, K = instance.n_labels, instance.n_types
    D, r, pi = constants.kl_tensor, constants.r, instance.prior
    L = math.log(1.0 / delta)
    nv = H * K + 1
    rows, rhs, senses = [], [], []
    for k in range(K):
        row = np.zeros(nv)
        for h in range(H):
            row[h * K + k] = pi[h]
        row[-1] = -r[k]
        rows.append(row)
        rhs.append(0.0)
        senses.append("<=")
    for h in range(H):
        for l in range(H):
            if h == l:
                continue
            row = np.zeros(nv)
            row[h * K:(h + 1) * K] = D[h, l]
            rows.append(row)
            rhs.append(L)
            senses.append(">=")
    c = np.zeros(nv)
    c[-1] = 1.0
    sol = solve_lp(LpProblem(c, np.array(rows), np.array(rhs), senses))
    if sol.status != OPTIMAL:
        raise NumericalInstability(f"FLP solve returned {sol.status}")
    alloc = sol.x[:-1].reshape(H, K).copy()
    alloc[alloc < 0] = 0.0
    alloc.setflags(write=False)
    result = FlpResult(m_star_f=float(sol.x[-1]), allocation=alloc, delta=float(delta), prior=instance.prior)
    bad = flp_violations(result, constants)
    if bad:
        raise NumericalInstability("FLP solution breaks invariants: " + "; ".join(bad))
    totals = alloc.sum(axis=1) / L
    if np.any(totals > 1.0 / constants.d_under + 1e-8):
        log.info("FLP vertex exceeds the ln(1/delta)/d_under per-label total for some label: %s", totals)
    return result


def b_delta(delta: float) -> float:
    """Finite-delta factor of the converse bound; increases to 1 as delta -> 0."""
    L = math.log(1.0 / delta)
    return (1.0 - delta) * (1.0 - (math.log(1.0 / (1.0 - delta)) + math.exp(-1.0)) / L)


def lower_bound(delta: float, m_star_f: float) -> float:
    """System size no delta-accurate policy can stabilise below."""
    if not (0.0 < delta < 1.0):
        raise ValueError("delta must lie in (0, 1)")
    if m_star_f <= 0:
        raise ValueError("m_star_f must be positive")
    return b_delta(delta) * m_star_f


# ----------------------------------------------------------------------------
# Adaptive workload LP


@dataclass(frozen=True, eq=False)
class WorkloadVector:
    lam: np.ndarray  # integer inspections per type
    pre_floor: np.ndarray

    @property
    def total(self) -> int:
        return int(self.lam.sum())


def _workload_rows(constants: DerivedConstants, params: PolicyParams, h: int, budget: bool = True):
    D = constants.kl_tensor
    H, _, K = D.shape
    target = params.threshold_adapt + params.g_delta
    rows, rhs, senses = [], [], []
    for l in range(H):
        if l != h:
            rows.append(D[h, l].copy())
            rhs.append(target)
            senses.append(">=")
    if budget:
        rows.append(np.ones(K))
        rhs.append(params.v_delta)
        senses.append("<=")
    return np.array(rows), np.array(rhs), senses


def min_workload_total(constants: DerivedConstants, params: PolicyParams, h: int) -> float:
    """Fewest Adaptive inspections (ignoring the budget) that can verify label ``h``."""
    A, b, senses = _workload_rows(constants, params, h, budget=False)
    K = A.shape[1]
    sol = solve_lp(LpProblem(np.ones(K), A, b, senses))
    if sol.status != OPTIMAL:
        return math.inf
    return sol.value


def workload_solution(
    constants: DerivedConstants,
    params: PolicyParams,
    h: int,
    weights: Sequence[float],
) -> np.ndarray:
    """Real-valued optimum ``n*_h(W)``, tie-broken by total then lexicographically."""
    W = np.asarray(weights, dtype=float)
    if W.shape != constants.r.shape or not np.all(np.isfinite(W)) or np.any(W < 0):
        raise ValueError("weights must be a finite nonnegative vector, one entry per type")
    A, b, senses = _workload_rows(constants, params, h)
    K = W.size
    objectives = [W, np.ones(K)] + [np.eye(K)[k] for k in range(K - 1)]
    sol = lexicographic_solve(A, b, senses, objectives)
    if sol is None:
        raise WorkloadLpInfeasible(f"no feasible Adaptive workload for label index {h}")
    x = sol.x.copy()
    x[x < 1e-12 * max(1.0, float(x.max()))] = 0.0  # pivoting residue
    return x


def workload_vector(
    instance: Instance,
    constants: DerivedConstants,
    params: PolicyParams,
    h: int,
    weights: Sequence[float],
) -> WorkloadVector:
    """Adaptive-stage workload for a job whose coarse estimate is label index ``h``."""
    if not (0 <= h < instance.n_labels):
        raise ValueError(f"label index {h} out of range")
    x = workload_solution(constants, params, h, weights)
    lam = np.floor(x).astype(int)
    x.setflags(write=False)
    lam.setflags(write=False)
    return WorkloadVector(lam=lam, pre_floor=x)
