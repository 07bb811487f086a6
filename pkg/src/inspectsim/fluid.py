"""Fluid model of the Preparation and Adaptive workloads.

State ``w = (w_0, w_1, ..., w_K)``: Preparation workload followed by the
per-type Adaptive workloads.  Arrivals to the Adaptive pools follow the
workload LP optimum at the current state, which turns the fluid dynamics
into a differential inclusion; we integrate the deterministic tie-broken
selection with explicit Euler steps projected onto the nonnegative orthant.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ThresholdNotMet
from .lpsolve import solve_flp, workload_solution
from .model import DerivedConstants, Instance, PolicyParams

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class FluidState:
    w: np.ndarray
    pi_p: np.ndarray


@dataclass
class FluidTrajectory:
    times: np.ndarray
    states: np.ndarray  # [step, K + 1]
    lyapunov: np.ndarray
    selections: list[np.ndarray]  # n*[h, k] used on each step
    max_drift: float

    def rows(self) -> list[list[float]]:
        return [[float(t), *map(float, w), float(L)]
                for t, w, L in zip(self.times, self.states, self.lyapunov)]

    def header(self) -> list[str]:
        return ["time"] + [f"w_{k}" for k in range(self.states.shape[1])] + ["L"]


@dataclass
class ContractionReport:
    threshold: float
    adaptive_capacity: float
    threshold_met: bool
    samples: int
    tau: float
    epsilon: float
    max_lyapunov_at_tau: float
    max_min_lyapunov: float
    lyapunov_at_tau: list[float]
    monotone: list[bool]
    success: bool
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "adaptive_capacity": self.adaptive_capacity,
            "threshold_met": self.threshold_met,
            "samples": self.samples,
            "tau": self.tau,
            "epsilon": self.epsilon,
            "max_lyapunov_at_tau": self.max_lyapunov_at_tau,
            "max_min_lyapunov": self.max_min_lyapunov,
            "all_monotone": all(self.monotone),
            "success": self.success,
            "warnings": self.warnings,
        }


def adaptive_threshold(instance: Instance, constants: DerivedConstants,
                       params: PolicyParams, m_star_f: float | None = None) -> float:
    """Adaptive service capacity ``m q^A`` above which the fluid model contracts."""
    H = instance.n_labels
    L = math.log(1.0 / params.delta)
    if m_star_f is None:
        m_star_f = solve_flp(instance, constants, params.delta).m_star_f
    f1 = 1.0 + (math.log(2 * H) + params.g_delta) / L
    f2 = 1.0 + 2.0 * H**2 * constants.d_bar / (constants.d_under * constants.r_min * L)
    f3 = 1.0 + 1.0 / L
    return f1 * f2 * f3 * m_star_f


class _Drift:
    def __init__(self, constants, params, pi_p, m_qa, check_scale):
        self.constants = constants
        self.params = params
        self.pi_p = np.asarray(pi_p, dtype=float)
        self.H = self.pi_p.size
        self.r = constants.r
        self.mqp = params.prep_numerator  # m q^P
        self.mqa = params.q_adapt * params.m if m_qa is None else float(m_qa)
        self.inflate = 1.0 + 1.0 / params.log_inv_delta
        self.check_scale = check_scale
        self._cache: dict[tuple[int, bytes], np.ndarray] = {}

    def selection(self, weights: np.ndarray) -> np.ndarray:
        out = np.empty((self.H, weights.size))
        for h in range(self.H):
            key = (h, weights.tobytes())
            n = self._cache.get(key)
            if n is None:
                n = workload_solution(self.constants, self.params, h, weights)
                if self.check_scale and weights.any():
                    again = workload_solution(self.constants, self.params, h, 2.0 * weights)
                    if not np.array_equal(again, n):
                        raise AssertionError(f"workload optimum not scale invariant at w = {weights}")
                if len(self._cache) > 50_000:
                    self._cache.clear()
                self._cache[key] = n
            out[h] = n
        return out

    def __call__(self, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        n_star = self.selection(w[1:])
        arrive = np.empty_like(w)
        depart = np.empty_like(w)
        n_prep = float(self.params.n_prep)
        arrive[0] = n_prep
        depart[0] = self.mqp if w[0] > 0 else n_prep
        arrive[1:] = self.inflate * (self.pi_p @ n_star)
        drain = self.r * self.mqa
        depart[1:] = np.where(w[1:] > 0, drain, arrive[1:])
        return arrive - depart, n_star


def fluid_integrate(
    instance: Instance,
    constants: DerivedConstants,
    params: PolicyParams,
    pi_p,
    w0,
    T: float,
    dt: float,
    *,
    m_qa: float | None = None,
    check_scale: bool = False,
    _drift: _Drift | None = None,
) -> FluidTrajectory:
    """Projected Euler integration of the fluid workload dynamics.

    ``m_qa`` replaces the Adaptive service capacity ``m q^A`` implied by
    ``params``.  With ``check_scale`` every LP selection is re-solved at
    twice the weights and must come back identical.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    w = np.asarray(w0, dtype=float).copy()
    K = instance.n_types
    if w.shape != (K + 1,) or np.any(w < 0):
        raise ValueError("w0 must be a nonnegative vector of length n_types + 1")
    pi_p = instance.prior if pi_p is None else np.asarray(pi_p, dtype=float)
    if abs(pi_p.sum() - 1.0) > 1e-9 or np.any(pi_p < 0):
        raise ValueError("pi_p must be a probability vector")
    drift = _drift or _Drift(constants, params, pi_p, m_qa, check_scale)

    steps = int(math.ceil(T / dt - 1e-9))
    times = np.empty(steps + 1)
    states = np.empty((steps + 1, K + 1))
    times[0] = 0.0
    states[0] = w
    selections = []
    max_drift = 0.0
    for i in range(steps):
        g, n_star = drift(w)
        selections.append(n_star)
        max_drift = max(max_drift, float(np.abs(g).max()))
        w = np.maximum(w + dt * g, 0.0)
        times[i + 1] = (i + 1) * dt
        states[i + 1] = w
    return FluidTrajectory(
        times=times,
        states=states,
        lyapunov=np.linalg.norm(states, axis=1),
        selections=selections,
        max_drift=max_drift,
    )


def sphere_samples(n_samples: int, dim: int, seed: int) -> np.ndarray:
    """Points on the nonnegative part of the unit sphere."""
    rng = np.random.default_rng(seed)
    pts = np.abs(rng.standard_normal((n_samples, dim)))
    return pts / np.linalg.norm(pts, axis=1, keepdims=True)


def check_contraction(
    instance: Instance,
    constants: DerivedConstants,
    params: PolicyParams,
    pi_p,
    samples: int,
    T: float,
    dt: float,
    seed: int,
    *,
    m_qa: float | None = None,
    strict: bool = True,
    min_epsilon: float = 0.01,
) -> ContractionReport:
    """Integrate from random unit-norm states and look for a common contraction time.

    ``tau`` is the grid time minimising the worst-case ``L(w(tau))`` over all
    samples and ``epsilon = 1 - max_samples L(w(tau))``.  Raises
    :class:`ThresholdNotMet` when the capacity conditions fail unless
    ``strict`` is False, in which case the run proceeds with a warning.
    """
    m_star_f = solve_flp(instance, constants, params.delta).m_star_f
    threshold = adaptive_threshold(instance, constants, params, m_star_f)
    mqa = params.q_adapt * params.m if m_qa is None else float(m_qa)
    warns = []
    met = mqa > threshold and params.prep_numerator > params.n_prep
    if not met:
        msg = (f"capacity condition fails: m q^A = {mqa:.4g} vs threshold {threshold:.4g}, "
               f"m q^P = {params.prep_numerator:.4g} vs n^P = {params.n_prep}")
        if strict:
            raise ThresholdNotMet(msg)
        log.warning(msg)
        warns.append(msg)

    pi_p = instance.prior if pi_p is None else pi_p
    drift = _Drift(constants, params, pi_p, mqa, check_scale=False)
    starts = sphere_samples(samples, instance.n_types + 1, seed)
    curves = []
    monotone = []
    for w0 in starts:
        traj = fluid_integrate(instance, constants, params, pi_p, w0, T, dt, _drift=drift)
        L = traj.lyapunov
        tol = 5.0 * dt * traj.max_drift
        monotone.append(bool(np.all(np.diff(L) <= tol)))
        curves.append(L)
    curves = np.array(curves)
    worst = curves.max(axis=0)
    i_tau = int(np.argmin(worst))
    tau = float(i_tau * dt)
    eps = float(1.0 - worst[i_tau])
    return ContractionReport(
        threshold=threshold,
        adaptive_capacity=mqa,
        threshold_met=met,
        samples=samples,
        tau=tau,
        epsilon=eps,
        max_lyapunov_at_tau=float(worst[i_tau]),
        max_min_lyapunov=float(curves.min(axis=1).max()),
        lyapunov_at_tau=curves[:, i_tau].tolist(),
        monotone=monotone,
        success=eps > min_epsilon,
        warnings=warns,
    )
