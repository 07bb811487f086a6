"""Problem instances, information constants and policy constants.

An :class:`Instance` bundles the primitives of an inspection system: job labels
with a prior, expert types with a mixture and inspection rates, and the known
outcome distribution ``p(h, k, .)`` of a type-``k`` inspection of a label-``h``
job.  Arrival rate and average inspection rate are both normalised to one.

All logarithms are natural (nats).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .errors import (
    AbsoluteContinuityError,
    DegenerateLabels,
    InfeasibleRegime,
    InstanceError,
    NormalizationError,
    SimplexError,
    SupportMismatch,
    WorkloadLpInfeasible,
)

PROB_TOL = 1e-12
RATE_TOL = 1e-9

OVERRIDE_KEYS = (
    "zeta0",
    "zeta0_scale",
    "g_delta",
    "v_delta",
    "n_prep",
    "n_resid",
    "q_prep_numerator",
    "q_resid_numerator",
)


def _frozen(a: Any) -> np.ndarray:
    arr = np.array(a, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Instance:
    labels: tuple[str, ...]
    expert_types: tuple[str, ...]
    outcomes: tuple[str, ...]
    prior: np.ndarray
    mixture: np.ndarray
    rates: np.ndarray
    outcome_tensor: np.ndarray  # [label, type, outcome]

    @property
    def n_labels(self) -> int:
        return len(self.labels)

    @property
    def n_types(self) -> int:
        return len(self.expert_types)

    @property
    def n_outcomes(self) -> int:
        return len(self.outcomes)

    def to_config(self) -> dict:
        return {
            "labels": list(self.labels),
            "expert_types": list(self.expert_types),
            "outcomes": list(self.outcomes),
            "prior": self.prior.tolist(),
            "mixture": self.mixture.tolist(),
            "rates": self.rates.tolist(),
            "outcome_tensor": self.outcome_tensor.tolist(),
        }


@dataclass(frozen=True, eq=False)
class DerivedConstants:
    kl_tensor: np.ndarray  # D[h, l, k]
    d_bar: float
    d_under: float
    d_avg: np.ndarray  # d(h, l)
    d_a: float
    z_bar: float
    zeta0: float
    r: np.ndarray

    @property
    def r_min(self) -> float:
        return float(self.r.min())


@dataclass(frozen=True)
class PolicyParams:
    delta: float
    m: int
    zeta0: float
    n_prep: int
    n_resid: int
    g_delta: float
    v_delta: float
    q_prep: float
    q_adapt: float
    q_resid: float
    threshold_adapt: float
    threshold_heuristic: float
    prep_numerator: float
    resid_numerator: float
    overridden: tuple[str, ...] = field(default=())

    @property
    def log_inv_delta(self) -> float:
        return math.log(1.0 / self.delta)

    def to_dict(self) -> dict:
        return {
            "delta": self.delta,
            "m": self.m,
            "zeta0": self.zeta0,
            "n_prep": self.n_prep,
            "n_resid": self.n_resid,
            "g_delta": self.g_delta,
            "v_delta": self.v_delta,
            "q_prep": self.q_prep,
            "q_adapt": self.q_adapt,
            "q_resid": self.q_resid,
            "threshold_adapt": self.threshold_adapt,
            "threshold_heuristic": self.threshold_heuristic,
            "prep_numerator": self.prep_numerator,
            "resid_numerator": self.resid_numerator,
            "overridden": list(self.overridden),
        }


def _check_simplex(name: str, vec: np.ndarray) -> None:
    if vec.ndim != 1 or vec.size == 0:
        raise SimplexError(f"{name} must be a non-empty vector")
    if not np.all(np.isfinite(vec)) or np.any(vec <= 0):
        raise SimplexError(f"{name} must have strictly positive entries")
    if abs(vec.sum() - 1.0) > PROB_TOL:
        raise SimplexError(f"{name} sums to {vec.sum()!r}, not 1")


def build_instance(config: Mapping[str, Any]) -> Instance:
    """Validate a structured instance description and freeze it.

    Raises:
        InstanceError: a required key is missing or shapes disagree.
        SimplexError: prior, mixture or an outcome row is not a probability vector.
        NormalizationError: ``sum_k rho_k mu_k`` differs from 1.
        SupportMismatch: some outcome is possible under some labels but not others.
        DegenerateLabels: two labels cannot be told apart by any expert type.
    """
    missing = [k for k in ("labels", "expert_types", "outcomes", "prior",
                           "mixture", "rates", "outcome_tensor") if k not in config]
    if missing:
        raise InstanceError(f"instance config missing keys: {', '.join(missing)}")

    labels = tuple(str(x) for x in config["labels"])
    types = tuple(str(x) for x in config["expert_types"])
    outcomes = tuple(str(x) for x in config["outcomes"])
    if len(labels) < 2:
        raise InstanceError("need at least two labels")
    if len(types) < 1:
        raise InstanceError("need at least one expert type")
    if len(outcomes) < 2:
        raise InstanceError("need at least two outcomes")
    for name, seq in (("labels", labels), ("expert_types", types), ("outcomes", outcomes)):
        if len(set(seq)) != len(seq):
            raise InstanceError(f"duplicate entries in {name}")

    prior = np.asarray(config["prior"], dtype=float)
    mixture = np.asarray(config["mixture"], dtype=float)
    rates = np.asarray(config["rates"], dtype=float)
    try:
        tensor = np.asarray(config["outcome_tensor"], dtype=float)
    except ValueError as exc:
        raise InstanceError(f"outcome_tensor is ragged: {exc}") from None

    if prior.shape != (len(labels),):
        raise InstanceError("prior length must equal number of labels")
    if mixture.shape != (len(types),):
        raise InstanceError("mixture length must equal number of expert types")
    if rates.shape != (len(types),):
        raise InstanceError("rates length must equal number of expert types")
    if tensor.shape != (len(labels), len(types), len(outcomes)):
        raise InstanceError(
            f"outcome_tensor shape {tensor.shape} != "
            f"{(len(labels), len(types), len(outcomes))}"
        )

    _check_simplex("prior", prior)
    _check_simplex("mixture", mixture)
    if not np.all(np.isfinite(rates)) or np.any(rates <= 0):
        raise InstanceError("rates must be positive")
    if not np.all(np.isfinite(tensor)) or np.any(tensor < 0) or np.any(tensor > 1):
        raise SimplexError("outcome_tensor entries must lie in [0, 1]")
    row_sums = tensor.sum(axis=2)
    bad = np.argwhere(np.abs(row_sums - 1.0) > PROB_TOL)
    if bad.size:
        h, k = bad[0]
        raise SimplexError(f"outcome row p({labels[h]}, {types[k]}, .) sums to {row_sums[h, k]!r}")

    avg_rate = float(mixture @ rates)
    if abs(avg_rate - 1.0) > RATE_TOL:
        raise NormalizationError(f"average inspection rate is {avg_rate!r}, expected 1")

    positive = tensor > 0
    mixed = positive.any(axis=0) & ~positive.all(axis=0)  # [type, outcome]
    if mixed.any():
        k, x = np.argwhere(mixed)[0]
        raise SupportMismatch(
            f"outcome {outcomes[x]!r} for type {types[k]!r} has zero probability "
            "under some labels but not others"
        )

    inst = Instance(
        labels=labels,
        expert_types=types,
        outcomes=outcomes,
        prior=_frozen(prior),
        mixture=_frozen(mixture),
        rates=_frozen(rates),
        outcome_tensor=_frozen(tensor),
    )
    D = kl_tensor(inst)
    info = D.max(axis=2)
    np.fill_diagonal(info, np.inf)
    if info.min() <= 0:
        h, l = np.unravel_index(np.argmin(info), info.shape)
        raise DegenerateLabels(
            f"labels {labels[h]!r} and {labels[l]!r} have identical outcome "
            "distributions for every expert type"
        )
    return inst


def load_instance(path: str | Path) -> Instance:
    """Read an instance JSON file.  ``json.JSONDecodeError`` carries the line number."""
    with open(path, encoding="utf-8") as fh:
        config = json.load(fh)
    if not isinstance(config, dict):
        raise InstanceError("instance file must contain a JSON object")
    return build_instance(config)


def kl_divergence(p: Sequence[float], q: Sequence[float]) -> float:
    """KL divergence ``sum_x p(x) ln(p(x)/q(x))`` in nats, with ``0 ln 0 = 0``."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise ValueError("distributions must have the same length")
    total = 0.0
    for px, qx in zip(p, q):
        if px == 0.0:
            continue
        if qx == 0.0:
            raise AbsoluteContinuityError("p puts mass where q has none")
        total += px * math.log(px / qx)
    # rounding can leave a tiny negative value for near-identical inputs
    return max(total, 0.0)


def kl_tensor(instance: Instance) -> np.ndarray:
    p = instance.outcome_tensor
    H, K = instance.n_labels, instance.n_types
    D = np.zeros((H, H, K))
    for h in range(H):
        for l in range(H):
            if h == l:
                continue
            for k in range(K):
                D[h, l, k] = kl_divergence(p[h, k], p[l, k])
    return D


def derive_constants(instance: Instance) -> DerivedConstants:
    D = kl_tensor(instance)
    H = instance.n_labels
    off = ~np.eye(H, dtype=bool)

    d_bar = float(D[off].max())
    d_under = float(D.max(axis=2)[off].min())
    r = instance.rates * instance.mixture
    d_avg = D @ r
    d_a = float(d_avg[off].min())

    p = instance.outcome_tensor
    z_bar = 0.0
    for k in range(instance.n_types):
        for x in range(instance.n_outcomes):
            col = p[:, k, x]
            if col[0] == 0.0:
                continue  # support condition: zero for every label
            logs = np.log(col)
            z_bar = max(z_bar, float(logs.max() - logs.min()))

    zeta0 = (8.0 * z_bar**2 + 2.0 * d_a) / d_a**2
    return DerivedConstants(
        kl_tensor=_frozen(D),
        d_bar=d_bar,
        d_under=d_under,
        d_avg=_frozen(d_avg),
        d_a=d_a,
        z_bar=z_bar,
        zeta0=zeta0,
        r=_frozen(r),
    )


def slack_constant(z_bar: float, d_under: float, delta: float) -> float:
    """Verification slack ``g_delta`` added to the Adaptive-stage LLR target."""
    L = math.log(1.0 / delta)
    return 3.0 * z_bar / math.sqrt(d_under) * math.sqrt(L * math.log(L))


def budget_constant(d_under: float, g_delta: float, n_labels: int, delta: float) -> float:
    """Per-job Adaptive inspection budget ``v_delta``."""
    L = math.log(1.0 / delta)
    return 2.0 / d_under * L * (1.0 + (math.log(2 * n_labels) + g_delta) / L)


def policy_params(
    instance: Instance,
    constants: DerivedConstants,
    delta: float,
    m: int,
    overrides: Mapping[str, float] | None = None,
    strict: bool = True,
) -> PolicyParams:
    """Three-stage policy constants for accuracy ``delta`` and ``m`` experts.

    ``overrides`` may replace ``zeta0`` (or scale it via ``zeta0_scale``),
    ``g_delta``, ``v_delta``, ``n_prep``, ``n_resid`` and the visit-probability
    numerators.  Overridden names are recorded on the result.

    With ``strict=False`` the visit-probability and workload-LP feasibility
    checks are skipped; the heuristic and oracle policies only need ``delta``
    and ``m`` and run at system sizes where the three-stage constants are
    meaningless.
    """
    if not (0.0 < delta < math.exp(-1.0)):
        raise ValueError(f"delta must lie in (0, 1/e), got {delta!r}")
    if int(m) != m or m < 1:
        raise ValueError(f"m must be a positive integer, got {m!r}")
    m = int(m)
    overrides = dict(overrides or {})
    unknown = set(overrides) - set(OVERRIDE_KEYS)
    if unknown:
        raise ValueError(f"unknown overrides: {sorted(unknown)}")
    if "zeta0" in overrides and "zeta0_scale" in overrides:
        raise ValueError("give either zeta0 or zeta0_scale, not both")

    H = instance.n_labels
    L = math.log(1.0 / delta)
    LL = math.log(L)

    zeta0 = constants.zeta0
    if "zeta0" in overrides:
        zeta0 = float(overrides["zeta0"])
    elif "zeta0_scale" in overrides:
        zeta0 = constants.zeta0 * float(overrides["zeta0_scale"])
    if zeta0 <= 0:
        raise ValueError("zeta0 must be positive")

    n_prep = int(overrides.get("n_prep", math.ceil(zeta0 * LL)))
    n_resid = int(overrides.get("n_resid", math.ceil(zeta0 * math.log(4 * H / delta))))
    if n_prep < 0 or n_resid < 0:
        raise ValueError("workloads must be nonnegative")
    g_delta = float(overrides.get("g_delta", slack_constant(constants.z_bar, constants.d_under, delta)))
    v_delta = float(overrides.get("v_delta", budget_constant(constants.d_under, g_delta, H, delta)))

    # the Preparation numerator uses the rounded workload so that m q^P > n^P holds exactly
    prep_num = float(overrides.get("q_prep_numerator", n_prep + 1.0 / L))
    resid_num = float(overrides.get(
        "q_resid_numerator",
        3.0 * H * zeta0 * (1.0 + math.log(4 * H) / L) + 1.0,
    ))
    q_prep = prep_num / m
    q_resid = resid_num / m
    q_adapt = 1.0 - q_prep - q_resid
    for name, q in (("q_prep", q_prep), ("q_resid", q_resid), ("q_adapt", q_adapt)):
        if strict and not (0.0 < q < 1.0):
            raise InfeasibleRegime(
                f"{name} = {q:.6g} outside (0, 1) at m = {m} "
                f"(prep numerator {prep_num:.4g}, residual numerator {resid_num:.4g})"
            )

    params = PolicyParams(
        delta=float(delta),
        m=m,
        zeta0=zeta0,
        n_prep=n_prep,
        n_resid=n_resid,
        g_delta=g_delta,
        v_delta=v_delta,
        q_prep=q_prep,
        q_adapt=q_adapt,
        q_resid=q_resid,
        threshold_adapt=math.log(2 * H / delta),
        threshold_heuristic=math.log(H / delta),
        prep_numerator=prep_num,
        resid_numerator=resid_num,
        overridden=tuple(k for k in OVERRIDE_KEYS if k in overrides),
    )

    if not strict:
        return params

    from .lpsolve import min_workload_total

    for h in range(H):
        need = min_workload_total(constants, params, h)
        if need > v_delta * (1 + 1e-12) + 1e-9:
            raise WorkloadLpInfeasible(
                f"label {instance.labels[h]!r} needs {need:.4f} Adaptive inspections "
                f"but v_delta = {v_delta:.4f}"
            )
    return params


def with_constants(constants: DerivedConstants, **changes: Any) -> DerivedConstants:
    """Copy of ``constants`` with fields replaced; used for sensitivity checks."""
    return replace(constants, **changes)


def animals_config(p: float = 0.75, q: float = 0.25) -> dict:
    """Three-label example: each expert type is blind to one label pair.

    Rows of the tensor are labels (cat, dog, rabbit); entries per type are
    Bernoulli(p) ("A") or Bernoulli(q) ("B"), laid out so that type 3 is the
    only type separating cat from both other labels.
    """
    A = [1.0 - p, p]
    B = [1.0 - q, q]
    return {
        "labels": ["cat", "dog", "rabbit"],
        "expert_types": ["1", "2", "3"],
        "outcomes": ["0", "1"],
        "prior": [1 / 3, 1 / 3, 1 / 3],
        "mixture": [1 / 3, 1 / 3, 1 / 3],
        "rates": [1.0, 1.0, 1.0],
        "outcome_tensor": [[A, A, B], [A, B, A], [B, A, A]],
    }
