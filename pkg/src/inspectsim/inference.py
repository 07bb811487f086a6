"""Per-job log-likelihood bookkeeping and certificate tests."""

from __future__ import annotations

import weakref
from dataclasses import dataclass

import numpy as np

from .errors import SupportMismatch
from .model import Instance


@dataclass(frozen=True)
class InspectionRecord:
    expert_type: int
    outcome: int


class LlrState:
    """Antisymmetric matrix ``S[h, l]`` of cumulative log-likelihood ratios.

    ``S[h, l] > 0`` means the inspections so far favour label ``h`` over ``l``.
    Mutating ``update`` is the hot path used by the simulator; the functional
    :func:`llr_update` wraps it for callers that want value semantics.
    """

    __slots__ = ("s", "n")

    def __init__(self, n_labels: int):
        self.s = np.zeros((n_labels, n_labels))
        self.n = 0

    @property
    def s_matrix(self) -> np.ndarray:
        return self.s

    @property
    def n_inspections(self) -> int:
        return self.n

    def copy(self) -> "LlrState":
        out = LlrState.__new__(LlrState)
        out.s = self.s.copy()
        out.n = self.n
        return out

    def reset(self) -> None:
        self.s[:] = 0.0
        self.n = 0

    def add(self, increment: np.ndarray) -> None:
        self.s += increment
        self.n += 1


class LlrTable:
    """Precomputed ``ln p(h,k,x) - ln p(l,k,x)`` matrices for every ``(k, x)``."""

    def __init__(self, instance: Instance):
        p = instance.outcome_tensor
        K, X = instance.n_types, instance.n_outcomes
        self.possible = p[0] > 0  # [type, outcome]; support is label-independent
        self.table: list[list[np.ndarray | None]] = []
        for k in range(K):
            row = []
            for x in range(X):
                if not self.possible[k, x]:
                    row.append(None)
                    continue
                lg = np.log(p[:, k, x])
                inc = lg[:, None] - lg[None, :]
                inc.setflags(write=False)
                row.append(inc)
            self.table.append(row)

    def increment(self, k: int, x: int) -> np.ndarray:
        inc = self.table[k][x]
        if inc is None:
            raise SupportMismatch(f"outcome {x} is impossible for expert type {k}")
        return inc


_tables: "weakref.WeakKeyDictionary[Instance, LlrTable]" = weakref.WeakKeyDictionary()


def llr_table(instance: Instance) -> LlrTable:
    tab = _tables.get(instance)
    if tab is None:
        tab = _tables[instance] = LlrTable(instance)
    return tab


def llr_update(state: LlrState, instance: Instance, record: InspectionRecord) -> LlrState:
    """Return a new state with one more inspection folded in."""
    out = state.copy()
    out.add(llr_table(instance).increment(record.expert_type, record.outcome))
    return out


TIE_TOL = 1e-9


def ml_estimate(state: LlrState | np.ndarray) -> int:
    """Maximum-likelihood label index; the lowest index wins ties.

    Likelihoods within ``TIE_TOL`` nats count as tied, so that summation
    order cannot decide a tie between labels with equal likelihood.
    """
    s = state.s if isinstance(state, LlrState) else np.asarray(state)
    idx = np.flatnonzero((s >= -TIE_TOL).all(axis=1))
    if idx.size:
        return int(idx[0])
    return int(np.argmax(s.min(axis=1)))


def check_certificate(state: LlrState | np.ndarray, x: float) -> int | None:
    """Label ``h`` with ``S[h, l] >= x`` for every ``l != h``, if one exists."""
    if x <= 0:
        raise ValueError("certificate level must be positive")
    s = state.s if isinstance(state, LlrState) else np.asarray(state)
    H = s.shape[0]
    masked = s + np.diag(np.full(H, np.inf))
    hit = np.flatnonzero(masked.min(axis=1) >= x)
    return int(hit[0]) if hit.size else None


@dataclass
class CertificateExperiment:
    level: float
    jobs: int
    certified: int
    errors: int
    capped: int
    bound: float  # c_H exp(-level)

    @property
    def error_rate(self) -> float:
        return self.errors / self.certified if self.certified else 0.0


def certificate_experiment(instance: Instance, x: float, jobs: int, seed: int,
                           type_probs=None, cap: int = 1000) -> CertificateExperiment:
    """Inspect independent jobs with random expert types until a certificate at ``x`` fires.

    Labels follow the prior and each inspection's type is drawn from
    ``type_probs`` (default ``mu_k rho_k``).  Jobs still uncertified after
    ``cap`` inspections are dropped and counted in ``capped``.
    """
    from .rng import generator

    if x <= 0:
        raise ValueError("certificate level must be positive")
    H, K = instance.n_labels, instance.n_types
    gen = generator(seed, "certificates")
    if type_probs is None:
        type_probs = instance.mixture * instance.rates
    type_probs = np.asarray(type_probs, dtype=float) / np.sum(type_probs)
    with np.errstate(divide="ignore"):
        logp = np.log(instance.outcome_tensor)  # [label, type, outcome]
    cdf = np.cumsum(instance.outcome_tensor, axis=2)
    cdf[..., -1] = 1.0

    labels = gen.choice(H, size=jobs, p=instance.prior)
    ll = np.zeros((jobs, H))
    active = np.arange(jobs)
    certified = errors = 0
    for _ in range(cap):
        if active.size == 0:
            break
        ks = gen.choice(K, size=active.size, p=type_probs)
        u = gen.random(active.size)
        xs = (u[:, None] >= cdf[labels[active], ks]).sum(axis=1)
        ll[active] += logp[:, ks, xs].T
        top2 = np.sort(ll[active], axis=1)[:, -2:]
        done = top2[:, 1] - top2[:, 0] >= x
        if done.any():
            fin = active[done]
            est = np.argmax(ll[fin], axis=1)
            certified += fin.size
            errors += int(np.count_nonzero(est != labels[fin]))
            active = active[~done]
    return CertificateExperiment(x, jobs, certified, errors, int(active.size), H * float(np.exp(-x)))
