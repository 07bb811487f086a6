"""Capacity experiments: stability verdicts, minimum stable system size,
Preparation error estimates and accuracy sweeps."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import binomtest

from .engine import SimReport, run
from .errors import InfeasibleRegime, InsufficientHorizon, RangeError, WorkloadLpInfeasible
from .inference import TIE_TOL
from .lpsolve import b_delta, solve_flp
from .model import DerivedConstants, Instance, policy_params
from .rng import derive_seed, generator

log = logging.getLogger(__name__)

STABLE, UNSTABLE, INCONCLUSIVE = "stable", "unstable", "inconclusive"


@dataclass
class StabilityVerdict:
    verdict: str
    slopes: list[float]
    tail_ratios: list[float]  # final-third mean over middle-third mean
    end_ratios: list[float]  # Q(T) over overall mean
    replica_stable: list[bool]

    @property
    def agreeing(self) -> int:
        return sum(self.replica_stable) if self.verdict != UNSTABLE else len(self.replica_stable) - sum(self.replica_stable)

    def to_dict(self) -> dict:
        return {
            "verdict": self.verdict,
            "slopes": self.slopes,
            "tail_ratios": self.tail_ratios,
            "end_ratios": self.end_ratios,
            "replica_stable": self.replica_stable,
            "agreeing": self.agreeing,
        }


def _ratio(num: float, den: float) -> float:
    if den > 0:
        return num / den
    return 0.0 if num <= 0 else math.inf


def replica_diagnostics(t: np.ndarray, q: np.ndarray, horizon: float,
                        warmup_fraction: float, slope_tol: float) -> tuple[bool, float, float, float]:
    """Three-part stability test on one sampled queue path."""
    if horizon <= 0 or not (0.0 <= warmup_fraction <= 0.1):
        raise InsufficientHorizon(
            f"horizon {horizon} must be at least 10x the warmup ({warmup_fraction:.3g} of it)")
    keep = t >= warmup_fraction * horizon
    t, q = t[keep], q[keep].astype(float)
    if t.size < 30:
        raise InsufficientHorizon(f"only {t.size} grid points after warmup; need at least 30")
    mean = float(q.mean())
    slope = float(np.polyfit(t, q, 1)[0]) if np.ptp(q) > 0 else 0.0
    n = t.size
    middle = q[n // 3: 2 * n // 3].mean()
    final = q[2 * n // 3:].mean()
    tail = _ratio(float(final), float(middle))
    end = _ratio(float(q[-1]), mean)
    ok = slope <= slope_tol * mean and final <= 1.1 * middle and q[-1] <= 5.0 * mean
    return bool(ok), slope, tail, end


def detect_stability(reports, warmup_fraction: float = 0.1, slope_tol: float = 1e-3) -> StabilityVerdict:
    """Empirical stability verdict over one or more replicas.

    A replica is stable when, after warmup, the least-squares slope of Q(t)
    is at most ``slope_tol`` times the mean queue, the final third's mean
    queue is at most 1.1x the middle third's, and Q(T) is at most 5x the mean.
    """
    if isinstance(reports, SimReport):
        reports = [reports]
    if not reports:
        raise ValueError("need at least one report")
    flags, slopes, tails, ends = [], [], [], []
    for rep in reports:
        ok, slope, tail, end = replica_diagnostics(
            np.asarray(rep.grid), np.asarray(rep.queue), rep.horizon, warmup_fraction, slope_tol)
        flags.append(ok)
        slopes.append(slope)
        tails.append(tail)
        ends.append(end)
    if all(flags):
        verdict = STABLE
    elif not any(flags):
        verdict = UNSTABLE
    else:
        verdict = INCONCLUSIVE
    return StabilityVerdict(verdict, slopes, tails, ends, flags)


@dataclass
class CapacityResult:
    m_psi: int
    m_star_f: float
    b_delta: float
    lower_bound: float
    ratio: float
    delta: float
    policy: str
    replicas: int
    horizon: float
    seed: int
    overrides: dict
    bracket: tuple[int, int]
    verdicts: dict[int, str] = field(default_factory=dict)
    residual_checks: list[dict] = field(default_factory=list)

    @property
    def residual_ok(self) -> bool:
        return all(c["ok"] for c in self.residual_checks)

    def to_dict(self) -> dict:
        return {
            "m_psi": self.m_psi,
            "m_star_f": self.m_star_f,
            "b_delta": self.b_delta,
            "lower_bound": self.lower_bound,
            "ratio": self.ratio,
            "delta": self.delta,
            "policy": self.policy,
            "replicas": self.replicas,
            "horizon": self.horizon,
            "seed": self.seed,
            "overrides": dict(self.overrides),
            "bracket": list(self.bracket),
            "verdicts": {str(m): v for m, v in sorted(self.verdicts.items())},
            "residual_checks": self.residual_checks,
            "residual_ok": self.residual_ok,
        }


def _replica(args) -> SimReport:
    instance, constants, params, policy, horizon, seed, flp, grid_step = args
    return run(instance, constants, params, policy, horizon, seed, flp=flp, grid_step=grid_step)


class _Prober:
    """Runs replicas at a given m and caches the verdict."""

    def __init__(self, instance, constants, delta, policy, overrides, replicas, horizon,
                 seed, warmup_fraction, slope_tol, workers):
        self.instance = instance
        self.constants = constants
        self.delta = delta
        self.policy = policy
        self.overrides = dict(overrides or {})
        self.replicas = replicas
        self.horizon = horizon
        self.seed = seed
        self.warmup_fraction = warmup_fraction
        self.slope_tol = slope_tol
        self.workers = workers
        # fine sampling so the third-of-horizon means are close to exact time averages
        self.grid_step = max(horizon / 50_000, min(1.0, horizon / 1000))
        self.flp = solve_flp(instance, constants, delta)
        self.verdicts: dict[int, str] = {}
        self.residual_checks: list[dict] = []

    def __call__(self, m: int) -> bool:
        if m not in self.verdicts:
            self.verdicts[m] = self._probe(m)
            log.info("m = %d: %s", m, self.verdicts[m])
        return self.verdicts[m] == STABLE

    def _probe(self, m: int) -> str:
        strict = self.policy == "three-stage"
        try:
            params = policy_params(self.instance, self.constants, self.delta, m,
                                   self.overrides, strict=strict)
        except (InfeasibleRegime, WorkloadLpInfeasible):
            return "infeasible"
        # common random numbers: replica r uses the same seed at every m
        jobs = [(self.instance, self.constants, params, self.policy, self.horizon,
                 derive_seed(self.seed, r), self.flp, self.grid_step) for r in range(self.replicas)]
        if self.workers and self.workers > 1:
            with ProcessPoolExecutor(self.workers) as pool:
                reports = list(pool.map(_replica, jobs))
        else:
            reports = [_replica(j) for j in jobs]
        verdict = detect_stability(reports, self.warmup_fraction, self.slope_tol).verdict
        if verdict == STABLE and self.policy == "three-stage":
            for r, rep in enumerate(reports):
                rate = rep.residual_entries / rep.horizon
                load = rate * params.n_resid
                cap = params.q_resid * m
                ok = load <= 1.2 * cap
                if not ok:
                    log.warning("Residual load %.3f exceeds 1.2 x m q^R = %.3f at m = %d", load, 1.2 * cap, m)
                self.residual_checks.append(
                    {"m": m, "replica": r, "residual_load": load, "capacity": cap, "ok": bool(ok)})
        return verdict


def min_feasible_m(instance: Instance, constants: DerivedConstants, delta: float,
                   overrides: dict | None = None) -> int:
    """Smallest m at which the three-stage visit probabilities are valid."""
    p = policy_params(instance, constants, delta, 1, overrides, strict=False)
    m = int(math.floor(p.prep_numerator + p.resid_numerator)) + 1
    while True:
        try:
            policy_params(instance, constants, delta, m, overrides, strict=True)
            return m
        except InfeasibleRegime:
            m += 1


def min_stable_m(
    instance: Instance,
    constants: DerivedConstants,
    delta: float,
    policy: str,
    overrides: dict | None = None,
    m_lo: int | None = None,
    m_hi: int | None = None,
    replicas: int = 5,
    horizon: float = 2e4,
    seed: int = 0,
    *,
    warmup_fraction: float = 0.1,
    slope_tol: float = 1e-3,
    workers: int | None = None,
    max_doublings: int = 8,
) -> CapacityResult:
    """Bisect for the smallest stable m, assuming stability is monotone in m.

    ``m_lo`` defaults to ``floor(b_delta m*_F)`` and ``m_hi`` to a doubling
    search from ``2 ceil(m*_F)`` (or the smallest feasible m for the
    three-stage policy).  Infeasible and inconclusive sizes count as unstable.
    """
    probe = _Prober(instance, constants, delta, policy, overrides, replicas, horizon,
                    seed, warmup_fraction, slope_tol, workers)
    m_star_f = probe.flp.m_star_f
    b = b_delta(delta)
    explicit_hi = m_hi is not None
    if m_lo is None:
        m_lo = max(1, int(math.floor(b * m_star_f)))
    if m_hi is None:
        m_hi = max(m_lo + 1, 2 * int(math.ceil(m_star_f)))
        if policy == "three-stage":
            m_hi = max(m_hi, min_feasible_m(instance, constants, delta, overrides))
    if m_lo >= m_hi:
        raise ValueError(f"need m_lo < m_hi, got [{m_lo}, {m_hi}]")

    if not probe(m_hi):
        if explicit_hi:
            raise RangeError(f"m_hi = {m_hi} is not stable ({probe.verdicts[m_hi]})")
        for _ in range(max_doublings):
            m_lo, m_hi = m_hi, 2 * m_hi
            if probe(m_hi):
                break
        else:
            raise RangeError(f"no stable m found up to {m_hi}")
    if m_lo >= 1 and probe(m_lo):
        raise RangeError(f"m_lo = {m_lo} is already stable; range does not bracket")

    lo, hi = m_lo, m_hi
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if probe(mid):
            hi = mid
        else:
            lo = mid
    bound = b * m_star_f
    if hi < bound - 1:
        log.warning("m_psi = %d is below the lower bound %.3f", hi, bound)
    return CapacityResult(
        m_psi=hi,
        m_star_f=m_star_f,
        b_delta=b,
        lower_bound=bound,
        ratio=hi / bound,
        delta=delta,
        policy=policy,
        replicas=replicas,
        horizon=horizon,
        seed=seed,
        overrides=dict(overrides or {}),
        bracket=(m_lo, m_hi),
        verdicts=dict(probe.verdicts),
        residual_checks=probe.residual_checks,
    )


@dataclass
class PrepErrorResult:
    epsilon_p: float  # max over labels of the conditional error
    interval: tuple[float, float]  # Wilson interval of the worst label
    upper: float  # max over labels of the Wilson upper bound
    per_label: list[float]
    per_label_intervals: list[tuple[float, float]]
    overall: float  # prior-weighted error
    pi_p: list[float]
    bound: float
    n_prep: int
    samples: int

    def to_dict(self) -> dict:
        return {
            "epsilon_p": self.epsilon_p,
            "interval": list(self.interval),
            "upper": self.upper,
            "per_label": self.per_label,
            "per_label_intervals": [list(i) for i in self.per_label_intervals],
            "overall": self.overall,
            "pi_p": self.pi_p,
            "bound": self.bound,
            "within_bound": self.upper <= self.bound,
            "n_prep": self.n_prep,
            "samples": self.samples,
        }


def wilson(k: int, n: int, confidence: float = 0.95) -> tuple[float, float]:
    ci = binomtest(k, n).proportion_ci(confidence_level=confidence, method="wilson")
    return float(ci.low), float(ci.high)


def estimate_prep_error(
    instance: Instance,
    constants: DerivedConstants,
    delta: float,
    samples: int,
    seed: int,
    overrides: dict | None = None,
    confidence: float = 0.95,
) -> PrepErrorResult:
    """Monte Carlo error of the coarse estimate after ``n^P`` random-type inspections.

    ``samples`` isolated jobs are simulated per label; each inspection's type
    is drawn from ``r`` and the coarse estimate is the tie-broken ML label.
    """
    if samples < 1:
        raise ValueError("samples must be positive")
    params = policy_params(instance, constants, delta, 1, overrides, strict=False)
    n = params.n_prep
    H, K = instance.n_labels, instance.n_types
    with np.errstate(divide="ignore"):
        logp = np.log(instance.outcome_tensor)  # [label, type, outcome]
    r_cdf = np.cumsum(constants.r)
    r_cdf[-1] = 1.0

    errors = []
    counts = np.zeros((H, H))
    for h in range(H):
        gen = generator(seed, f"prep/{h}")
        ks = np.minimum(np.searchsorted(r_cdf, gen.random((samples, n)), side="right"), K - 1)
        cdf = np.cumsum(instance.outcome_tensor[h], axis=1)
        cdf[:, -1] = 1.0
        u = gen.random((samples, n))
        xs = (u[..., None] >= cdf[ks]).sum(axis=-1)
        xs = np.minimum(xs, instance.n_outcomes - 1)
        # loglik[s, l] = sum_j log p(l, k_j, x_j); impossible outcomes never occur by the support rule
        loglik = logp[:, ks, xs].sum(axis=-1).T if n else np.zeros((samples, H))
        best = loglik.max(axis=1, keepdims=True)
        est = np.argmax(loglik >= best - TIE_TOL, axis=1)
        counts[h] = np.bincount(est, minlength=H)
        errors.append(int(samples - counts[h, h]))

    per_label = [e / samples for e in errors]
    intervals = [wilson(e, samples, confidence) for e in errors]
    worst = int(np.argmax(per_label))
    pi_p = instance.prior @ (counts / samples)
    L = math.log(1.0 / delta)
    return PrepErrorResult(
        epsilon_p=per_label[worst],
        interval=intervals[worst],
        upper=max(i[1] for i in intervals),
        per_label=per_label,
        per_label_intervals=intervals,
        overall=float(instance.prior @ np.array(per_label)),
        pi_p=[float(x) for x in pi_p],
        bound=2.0 * H / L,
        n_prep=n,
        samples=samples,
    )


SWEEP_COLUMNS = ("delta", "m_psi", "m_star_f", "b_delta", "ratio", "envelope", "error")


def envelope(delta: float, c0: float) -> float:
    if not (0.0 < delta < math.exp(-1.0)):
        raise ValueError("envelope needs delta in (0, 1/e)")
    L = math.log(1.0 / delta)
    return 1.0 + c0 * math.sqrt(math.log(L) / L)


def sweep(
    instance: Instance,
    constants: DerivedConstants,
    policy: str,
    deltas,
    *,
    c0: float = 1.0,
    overrides: dict | None = None,
    replicas: int = 3,
    horizon: float = 1e4,
    seed: int = 0,
    warmup_fraction: float = 0.1,
    slope_tol: float = 1e-3,
    workers: int | None = None,
) -> list[dict]:
    """Minimum stable m per accuracy level; failed rows carry their error text."""
    rows = []
    for delta in sorted(deltas, reverse=True):
        row = {"delta": delta, "m_psi": None, "m_star_f": None, "b_delta": None,
               "ratio": None, "envelope": None, "error": ""}
        try:
            row["b_delta"] = b_delta(delta)
            row["envelope"] = envelope(delta, c0)
            row["m_star_f"] = solve_flp(instance, constants, delta).m_star_f
            res = min_stable_m(instance, constants, delta, policy, overrides,
                               replicas=replicas, horizon=horizon, seed=seed,
                               warmup_fraction=warmup_fraction, slope_tol=slope_tol,
                               workers=workers)
            row["m_psi"] = res.m_psi
            row["ratio"] = res.ratio
        except Exception as exc:  # recorded per row, the sweep carries on
            log.warning("delta = %g failed: %s", delta, exc)
            row["error"] = f"{type(exc).__name__}: {exc}"
        rows.append(row)
    return rows
