"""Inspection policies driven by the event engine.

Every policy exposes the same three callbacks:

``arrive(job, t)``
    a new job entered the system.
``idle(expert, k, t) -> job | None``
    expert ``expert`` of type ``k`` is free; return the job to inspect, or
    None to send the expert on a vacation.
``complete(expert, k, job, outcome, t) -> (job, label) | None``
    an inspection finished; return ``(job, label)`` if the job departs.

Policies also maintain ``stage_counts`` (jobs in Preparation, Adaptive,
Residual) and ``work`` (uninitiated Preparation inspections followed by the
per-type Adaptive workload) for the engine's time series.  Only
:class:`OraclePolicy` is told true labels.
"""

from __future__ import annotations

import heapq
import math
from collections import deque
from typing import Callable

import numpy as np

from .errors import InfeasibleRegime, ProtocolViolation
from .inference import LlrState, check_certificate, llr_table, ml_estimate
from .lpsolve import FlpResult, WorkloadVector, workload_vector
from .model import DerivedConstants, Instance, PolicyParams
from .rng import Streams

PREPARATION, ADAPTIVE, RESIDUAL = 0, 1, 2
STAGE_NAMES = ("Preparation", "Adaptive", "Residual")

POLICY_NAMES = ("three-stage", "heuristic", "oracle")


class ThreeStageJobState:
    __slots__ = (
        "stage", "remaining_prep", "received_prep", "coarse_estimate", "workload",
        "remaining_adaptive", "received_adaptive", "outstanding", "remaining_resid",
        "received_resid", "llr",
    )

    def __init__(self, n_labels: int, n_prep: int):
        self.stage = PREPARATION
        self.remaining_prep = n_prep
        self.received_prep = 0
        self.coarse_estimate: int | None = None
        self.workload: WorkloadVector | None = None
        self.remaining_adaptive: list[int] = []
        self.received_adaptive = 0
        self.outstanding = 0
        self.remaining_resid = 0
        self.received_resid = 0
        self.llr = LlrState(n_labels)


class ThreeStagePolicy:
    """Preparation -> Adaptive -> (depart | Residual -> depart).

    Experts pick a stage at random on every idle event and serve that stage's
    FCFS queue of uninitiated inspections, or take a vacation if it is empty.
    """

    name = "three-stage"

    def __init__(self, instance: Instance, constants: DerivedConstants,
                 params: PolicyParams, streams: Streams):
        for q in (params.q_prep, params.q_adapt, params.q_resid):
            if not (0.0 < q < 1.0):
                raise InfeasibleRegime(f"visit probabilities out of range at m = {params.m}")
        self.instance = instance
        self.constants = constants
        self.params = params
        self.streams = streams
        self.H = instance.n_labels
        self.K = instance.n_types
        self.llr = llr_table(instance)
        self.visit_cdf = [params.q_prep, params.q_prep + params.q_adapt, 1.0]
        self.jobs: dict[int, ThreeStageJobState] = {}
        self.prep_queue: deque[int] = deque()
        self.adapt_queues: list[deque[int]] = [deque() for _ in range(self.K)]
        self.resid_queue: deque[int] = deque()
        self.work = [0] * (self.K + 1)
        self.stage_counts = [0, 0, 0]
        self.residual_entries = 0
        self.adaptive_exits = 0
        self._wv_cache: dict[tuple, WorkloadVector] = {}

    # -- callbacks -----------------------------------------------------------

    def arrive(self, job: int, t: float) -> tuple[int, int] | None:
        js = ThreeStageJobState(self.H, self.params.n_prep)
        self.jobs[job] = js
        self.stage_counts[PREPARATION] += 1
        if self.params.n_prep == 0:
            return self._enter_adaptive(job, js)
        self.prep_queue.append(job)
        self.work[0] += self.params.n_prep
        return None

    def idle(self, expert: int, k: int, t: float) -> int | None:
        stage = self.streams[f"visit/{expert}"].categorical(self.visit_cdf)
        return self.visit(stage, k)

    def visit(self, stage: int, k: int) -> int | None:
        """Serve ``stage`` as a type-``k`` expert; None means vacation."""
        if stage == PREPARATION:
            if not self.prep_queue:
                return None
            job = self.prep_queue[0]
            js = self.jobs[job]
            js.remaining_prep -= 1
            if js.remaining_prep == 0:
                self.prep_queue.popleft()
            self.work[0] -= 1
        elif stage == ADAPTIVE:
            queue = self.adapt_queues[k]
            if not queue:
                return None
            job = queue[0]
            js = self.jobs[job]
            js.remaining_adaptive[k] -= 1
            if js.remaining_adaptive[k] == 0:
                queue.popleft()
            self.work[k + 1] -= 1
        else:
            if not self.resid_queue:
                return None
            job = self.resid_queue[0]
            js = self.jobs[job]
            js.remaining_resid -= 1
            if js.remaining_resid == 0:
                self.resid_queue.popleft()
        js.outstanding += 1
        return job

    def complete(self, expert: int, k: int, job: int, outcome: int, t: float) -> tuple[int, int] | None:
        js = self.jobs.get(job)
        if js is None or js.outstanding <= 0:
            raise ProtocolViolation(f"outcome for job {job} without an outstanding inspection")
        js.outstanding -= 1
        js.llr.add(self.llr.increment(k, outcome))
        p = self.params
        if js.stage == PREPARATION:
            js.received_prep += 1
            if js.received_prep > p.n_prep:
                raise ProtocolViolation(f"job {job} received too many Preparation outcomes")
            if js.received_prep == p.n_prep:
                return self._enter_adaptive(job, js)
        elif js.stage == ADAPTIVE:
            js.received_adaptive += 1
            total = js.workload.total
            if js.received_adaptive > total:
                raise ProtocolViolation(f"job {job} received too many Adaptive outcomes")
            if js.received_adaptive == total:
                return self._leave_adaptive(job, js)
        else:
            js.received_resid += 1
            if js.received_resid > p.n_resid:
                raise ProtocolViolation(f"job {job} received too many Residual outcomes")
            if js.received_resid == p.n_resid:
                return self._depart(job, js, ml_estimate(js.llr))
        return None

    # -- transitions ---------------------------------------------------------

    def _workload(self, h: int) -> WorkloadVector:
        key = (h, tuple(self.work[1:]))
        wv = self._wv_cache.get(key)
        if wv is None:
            if len(self._wv_cache) > 4096:
                self._wv_cache.clear()
            wv = workload_vector(self.instance, self.constants, self.params, h, self.work[1:])
            self._wv_cache[key] = wv
        return wv

    def _enter_adaptive(self, job: int, js: ThreeStageJobState):
        if js.remaining_prep or js.outstanding:
            raise ProtocolViolation(f"job {job} left Preparation with work pending")
        js.coarse_estimate = ml_estimate(js.llr)
        js.workload = wv = self._workload(js.coarse_estimate)
        js.stage = ADAPTIVE
        self.stage_counts[PREPARATION] -= 1
        self.stage_counts[ADAPTIVE] += 1
        js.remaining_adaptive = [int(v) for v in wv.lam]
        if wv.total == 0:
            return self._leave_adaptive(job, js)
        for k, n in enumerate(js.remaining_adaptive):
            if n > 0:
                self.adapt_queues[k].append(job)
                self.work[k + 1] += n
        return None

    def _leave_adaptive(self, job: int, js: ThreeStageJobState):
        if any(js.remaining_adaptive) or js.outstanding:
            raise ProtocolViolation(f"job {job} left Adaptive with work pending")
        self.adaptive_exits += 1
        h = check_certificate(js.llr, self.params.threshold_adapt)
        if h is not None:
            return self._depart(job, js, h)
        js.stage = RESIDUAL
        self.stage_counts[ADAPTIVE] -= 1
        self.stage_counts[RESIDUAL] += 1
        self.residual_entries += 1
        js.llr.reset()
        js.remaining_resid = self.params.n_resid
        if self.params.n_resid == 0:
            return self._depart(job, js, ml_estimate(js.llr))
        self.resid_queue.append(job)
        return None

    def _depart(self, job: int, js: ThreeStageJobState, label: int):
        p = self.params
        if js.received_prep != p.n_prep:
            raise ProtocolViolation(f"job {job}: {js.received_prep} Preparation outcomes, expected {p.n_prep}")
        if js.received_adaptive != js.workload.total:
            raise ProtocolViolation(f"job {job}: Adaptive outcomes do not match its workload")
        if js.stage == RESIDUAL and js.received_resid != p.n_resid:
            raise ProtocolViolation(f"job {job}: {js.received_resid} Residual outcomes, expected {p.n_resid}")
        self.stage_counts[js.stage] -= 1
        del self.jobs[job]
        return job, label

    def on_expert_idle(self, expert: int, k: int, t: float = 0.0) -> int | None:
        return self.idle(expert, k, t)

    def on_inspection_complete(self, expert: int, k: int, job: int, outcome: int, t: float = 0.0):
        return self.complete(expert, k, job, outcome, t)


class HeuristicJob:
    __slots__ = ("llr", "cls", "row")

    def __init__(self, llr: LlrState, cls: int, row: np.ndarray):
        self.llr = llr
        self.cls = cls
        self.row = row


class HeuristicPolicy:
    """Single-stage max-weight rule on residual log-likelihood workloads.

    A job's residual workload against label pair ``(h, l)`` is
    ``(ln(c_H/delta) - S[h, l])^+``; jobs are grouped by current ML estimate
    and an idle type-``k`` expert serves the oldest job of the group with the
    largest ``sum_l D[h, l, k] * Wbar[h, l]``.
    """

    name = "heuristic"
    RECOMPUTE_EVERY = 2000

    def __init__(self, instance: Instance, constants: DerivedConstants,
                 params: PolicyParams, streams: Streams):
        self.instance = instance
        self.H = instance.n_labels
        self.K = instance.n_types
        self.D = constants.kl_tensor
        self.threshold = params.threshold_heuristic
        self.streams = streams
        self.llr = llr_table(instance)
        self.jobs: dict[int, HeuristicJob] = {}
        self.classes: list[list[int]] = [[] for _ in range(self.H)]
        self.wbar = np.zeros((self.H, self.H))
        self.work = [0] * (self.K + 1)
        self.stage_counts = [0, 0, 0]
        self.residual_entries = 0
        off = ~np.eye(self.H, dtype=bool)
        self.assumption_ok = bool(np.all(self.D[off] > 0))
        self._updates = 0
        self._offdiag = off.astype(float)

    def _row(self, llr: LlrState, h: int) -> np.ndarray:
        return np.maximum(self.threshold - llr.s[h], 0.0) * self._offdiag[h]

    def _push(self, job: int, js: HeuristicJob) -> None:
        heapq.heappush(self.classes[js.cls], job)

    def arrive(self, job: int, t: float):
        llr = LlrState(self.H)
        h = self.streams["policy"].integers(self.H)
        js = HeuristicJob(llr, h, self._row(llr, h))
        self.jobs[job] = js
        self.wbar[h] += js.row
        self._push(job, js)
        self.stage_counts[ADAPTIVE] += 1
        return None

    def members_oldest(self, h: int) -> int | None:
        heap = self.classes[h]
        while heap:
            job = heap[0]
            js = self.jobs.get(job)
            if js is not None and js.cls == h:
                return job
            heapq.heappop(heap)
        return None

    def scores(self, k: int) -> np.ndarray:
        return (self.D[:, :, k] * self.wbar).sum(axis=1)

    def idle(self, expert: int, k: int, t: float) -> int | None:
        if not self.jobs:
            return None
        s = self.scores(k)
        for h in sorted(range(self.H), key=lambda i: (-s[i], i)):
            job = self.members_oldest(h)
            if job is not None:
                return job
        raise ProtocolViolation("jobs present but every label class is empty")

    def complete(self, expert: int, k: int, job: int, outcome: int, t: float):
        js = self.jobs.get(job)
        if js is None:
            return None  # departed while this inspection was in flight
        self.wbar[js.cls] -= js.row
        js.llr.add(self.llr.increment(k, outcome))
        cert = check_certificate(js.llr, self.threshold)
        if cert is not None:
            del self.jobs[job]
            self.stage_counts[ADAPTIVE] -= 1
            self._maybe_recompute()
            return job, cert
        cls = ml_estimate(js.llr)
        js.row = self._row(js.llr, cls)
        self.wbar[cls] += js.row
        if cls != js.cls:
            js.cls = cls
            self._push(job, js)
        self._maybe_recompute()
        return None

    def _maybe_recompute(self) -> None:
        self._updates += 1
        if self._updates % self.RECOMPUTE_EVERY == 0:
            self.recompute()

    def recompute(self) -> None:
        wbar = np.zeros((self.H, self.H))
        for js in self.jobs.values():
            wbar[js.cls] += js.row
        self.wbar = wbar

    def on_expert_idle(self, expert: int, k: int, t: float = 0.0) -> int | None:
        return self.idle(expert, k, t)


def heuristic_departure_check(llr: LlrState | np.ndarray, constants: DerivedConstants, delta: float) -> int | None:
    """Label whose residual workloads are all zero, i.e. certified at ``ln(c_H/delta)``."""
    H = constants.kl_tensor.shape[0]
    return check_certificate(llr, math.log(H / delta))


def oracle_quotas(flp: FlpResult) -> np.ndarray:
    # the 1e-9 guard keeps 6.0000000001 from becoming 7
    return np.ceil(flp.allocation - 1e-9).astype(int)


class OraclePolicy:
    """Baseline that knows true labels and executes the FLP allocation.

    A label-``h`` job receives ``ceil(n*[h, k])`` type-``k`` inspections and
    departs correctly classified once all of them are back.
    """

    name = "oracle"

    def __init__(self, instance: Instance, flp: FlpResult, true_label: Callable[[int], int]):
        self.quota = oracle_quotas(flp)
        if np.any(self.quota.sum(axis=1) == 0):
            raise ValueError("oracle quota is empty for some label")
        self.K = instance.n_types
        self.true_label = true_label
        self.jobs: dict[int, list] = {}
        self.queues: list[deque[int]] = [deque() for _ in range(self.K)]
        self.work = [0] * (self.K + 1)
        self.stage_counts = [0, 0, 0]
        self.residual_entries = 0

    def arrive(self, job: int, t: float):
        h = self.true_label(job)
        q = self.quota[h]
        self.jobs[job] = [h, [0] * self.K, [0] * self.K]
        for k in range(self.K):
            if q[k] > 0:
                self.queues[k].append(job)
                self.work[k + 1] += int(q[k])
        self.stage_counts[ADAPTIVE] += 1
        return None

    def idle(self, expert: int, k: int, t: float) -> int | None:
        queue = self.queues[k]
        if not queue:
            return None
        job = queue[0]
        h, initiated, _ = self.jobs[job]
        initiated[k] += 1
        if initiated[k] >= self.quota[h, k]:
            queue.popleft()
        self.work[k + 1] -= 1
        return job

    def complete(self, expert: int, k: int, job: int, outcome: int, t: float):
        h, _, received = self.jobs[job]
        received[k] += 1
        if received[k] > self.quota[h, k]:
            raise ProtocolViolation(f"oracle job {job} over-inspected by type {k}")
        if all(received[j] == self.quota[h, j] for j in range(self.K)):
            del self.jobs[job]
            self.stage_counts[ADAPTIVE] -= 1
            return job, h
        return None

    def on_expert_idle(self, expert: int, k: int, t: float = 0.0) -> int | None:
        return self.idle(expert, k, t)
