"""Continuous-time discrete-event simulator for inspection systems.

Jobs arrive as a unit-rate Poisson process with i.i.d. labels drawn from the
prior.  Experts are never idle for positive time: whenever one frees up the
policy either hands it a job or sends it on a vacation, and both occupy it
for an exponential time with mean ``1/mu_k``.

Randomness comes from named streams (see :mod:`inspectsim.rng`), so a run is
a pure function of its inputs and seed.
"""

from __future__ import annotations

import hashlib
import heapq
import json
import math
import time as _time
from dataclasses import dataclass, field
from itertools import accumulate

import numpy as np

from .errors import ProtocolViolation
from .lpsolve import FlpResult, solve_flp
from .model import DerivedConstants, Instance, PolicyParams
from .policies import HeuristicPolicy, OraclePolicy, ThreeStagePolicy
from .rng import Stream, Streams

ARRIVAL, DONE = 0, 1


def expert_counts(mixture: np.ndarray, m: int) -> list[int]:
    """Split ``m`` experts across types by largest remainder; ties go to the lower index."""
    quotas = np.asarray(mixture, dtype=float) * m
    counts = np.floor(quotas + 1e-9).astype(int)
    rest = m - int(counts.sum())
    frac = quotas - counts
    order = sorted(range(len(counts)), key=lambda k: (-round(frac[k], 12), k))
    for k in order[:max(rest, 0)]:
        counts[k] += 1
    return [int(c) for c in counts]


def sample_outcome(instance: Instance, h: int, k: int, stream: Stream) -> int:
    """Draw an outcome index from ``p(h, k, .)`` by inverse CDF."""
    cdf = list(accumulate(instance.outcome_tensor[h, k].tolist()))
    cdf[-1] = 1.0
    return stream.categorical(cdf)


def digest(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


@dataclass
class SimReport:
    policy: str
    horizon: float
    seed: int
    m: int
    delta: float
    labels: list[str]
    arrivals: list[int]
    departures: list[int]
    misclassified: list[int]
    grid: list[float]
    queue: list[int]
    queue_stage: list[list[int]]  # [P, A, R] per grid point
    work: list[list[int]]  # W_0..W_K per grid point
    mean_queue: float
    inspect_fraction: list[float]  # share of expert time spent inspecting, per type
    busy_fraction: list[float]
    inspections: list[int]
    vacations: list[int]
    residual_entries: int
    adaptive_exits: int
    final_queue: int
    notes: list[str]
    config_digest: str
    wall_seconds: float = field(default=0.0, compare=False)

    def summary(self) -> dict:
        """JSON-ready summary; wall-clock time is left out so reruns match byte for byte."""
        d = {
            "policy": self.policy,
            "horizon": self.horizon,
            "seed": self.seed,
            "m": self.m,
            "delta": self.delta,
            "labels": self.labels,
            "arrivals": self.arrivals,
            "departures": self.departures,
            "misclassified": self.misclassified,
            "mean_queue": self.mean_queue,
            "final_queue": self.final_queue,
            "inspect_fraction": self.inspect_fraction,
            "busy_fraction": self.busy_fraction,
            "inspections": self.inspections,
            "vacations": self.vacations,
            "residual_entries": self.residual_entries,
            "adaptive_exits": self.adaptive_exits,
            "notes": self.notes,
            "config_digest": self.config_digest,
        }
        d["report_digest"] = digest([d, self.grid, self.queue, self.queue_stage, self.work])
        return d

    @property
    def report_digest(self) -> str:
        return self.summary()["report_digest"]

    def error_rates(self) -> list[float]:
        return [e / d if d else 0.0 for e, d in zip(self.misclassified, self.departures)]

    def timeseries_rows(self) -> list[list]:
        rows = []
        for t, q, st, w in zip(self.grid, self.queue, self.queue_stage, self.work):
            rows.append([t, q, *st, *w])
        return rows

    def timeseries_header(self) -> list[str]:
        K = len(self.work[0]) - 1 if self.work else 0
        return ["time", "Q", "Q_P", "Q_A", "Q_R"] + [f"W_{k}" for k in range(K + 1)]


def run(
    instance: Instance,
    constants: DerivedConstants,
    params: PolicyParams,
    policy: str,
    horizon: float,
    seed: int,
    *,
    grid_step: float | None = None,
    flp: FlpResult | None = None,
) -> SimReport:
    """Simulate ``policy`` on ``[0, horizon]`` with ``params.m`` experts.

    Identical arguments give identical reports.
    """
    if horizon < 0:
        raise ValueError("horizon must be nonnegative")
    wall = _time.perf_counter()
    H, K = instance.n_labels, instance.n_types
    streams = Streams(seed)
    labels_of: dict[int, int] = {}

    if policy == "three-stage":
        pol = ThreeStagePolicy(instance, constants, params, streams)
    elif policy == "heuristic":
        pol = HeuristicPolicy(instance, constants, params, streams)
    elif policy == "oracle":
        if flp is None:
            flp = solve_flp(instance, constants, params.delta)
        pol = OraclePolicy(instance, flp, labels_of.__getitem__)
    else:
        raise ValueError(f"unknown policy {policy!r}")

    config = {
        "instance": instance.to_config(),
        "params": params.to_dict(),
        "policy": policy,
        "horizon": horizon,
        "seed": int(seed),
        "grid_step": grid_step,
    }
    notes = []
    if policy == "heuristic" and not pol.assumption_ok:
        notes.append("heuristic run on an instance where some D(h,l,k) = 0")

    counts = expert_counts(instance.mixture, params.m)
    expert_type = [k for k, c in enumerate(counts) for _ in range(c)]
    m = len(expert_type)
    means = [1.0 / float(instance.rates[k]) for k in range(K)]
    durations = [streams[f"duration/{e}"] for e in range(m)]
    arrivals_s = streams["arrivals"]
    labels_s = streams["labels"]
    outcomes_s = streams["outcomes"]
    prior_cdf = list(accumulate(instance.prior.tolist()))
    prior_cdf[-1] = 1.0
    outcome_cdf = [[None] * K for _ in range(H)]
    for h in range(H):
        for k in range(K):
            c = list(accumulate(instance.outcome_tensor[h, k].tolist()))
            c[-1] = 1.0
            outcome_cdf[h][k] = c

    if grid_step is None:
        grid_step = horizon / 1000.0 if horizon > 0 else 1.0
    grid: list[float] = []
    g_queue: list[int] = []
    g_stage: list[list[int]] = []
    g_work: list[list[int]] = []
    next_grid = 0.0
    n_grid = int(math.floor(horizon / grid_step + 1e-9)) + 1 if horizon > 0 else 1

    arrivals = [0] * H
    departures = [0] * H
    misclassified = [0] * H
    inspections = [0] * K
    vacations = [0] * K
    inspect_time = [0.0] * K
    assignment: list[int | None] = [None] * m  # job id, or None on vacation
    started = [0.0] * m
    q_integral = 0.0
    last_t = 0.0
    seq = 0
    heap: list[tuple[float, int, int, int]] = []
    stage_counts = pol.stage_counts
    work = pol.work

    def record_departure(dep, t):
        job, label = dep
        h = labels_of.pop(job)
        departures[h] += 1
        if label != h:
            misclassified[h] += 1

    def dispatch(e: int, t: float) -> None:
        nonlocal seq
        k = expert_type[e]
        if assignment[e] is not None and assignment[e] >= 0:
            raise ProtocolViolation(f"expert {e} assigned while busy")
        job = pol.idle(e, k, t)
        if job is None:
            vacations[k] += 1
            assignment[e] = -1
        else:
            if job not in labels_of:
                raise ProtocolViolation(f"policy assigned unknown job {job}")
            assignment[e] = job
        started[e] = t
        seq += 1
        heapq.heappush(heap, (t + durations[e].exponential(means[k]), seq, DONE, e))

    def sample_grid(upto: float) -> None:
        nonlocal next_grid
        while len(grid) < n_grid and next_grid <= upto:
            grid.append(next_grid)
            g_queue.append(len(labels_of))
            g_stage.append(list(stage_counts))
            g_work.append(list(work))
            next_grid = len(grid) * grid_step

    if horizon > 0:
        seq += 1
        heapq.heappush(heap, (arrivals_s.exponential(1.0), seq, ARRIVAL, 0))
        for e in range(m):
            dispatch(e, 0.0)

    next_job = 0
    while heap:
        t, _, kind, who = heap[0]
        if t > horizon:
            break
        heapq.heappop(heap)
        sample_grid(t)
        q_integral += len(labels_of) * (t - last_t)
        last_t = t
        if kind == ARRIVAL:
            job = next_job
            next_job += 1
            h = labels_s.categorical(prior_cdf)
            labels_of[job] = h
            arrivals[h] += 1
            dep = pol.arrive(job, t)
            if dep is not None:
                record_departure(dep, t)
            seq += 1
            heapq.heappush(heap, (t + arrivals_s.exponential(1.0), seq, ARRIVAL, 0))
        else:
            e = who
            k = expert_type[e]
            job = assignment[e]
            if job is not None and job >= 0:
                inspections[k] += 1
                inspect_time[k] += t - started[e]
                h = labels_of.get(job)
                if h is not None:
                    x = outcomes_s.categorical(outcome_cdf[h][k])
                    dep = pol.complete(e, k, job, x, t)
                    if dep is not None:
                        record_departure(dep, t)
            assignment[e] = None
            dispatch(e, t)

    if horizon > 0:
        sample_grid(horizon)
        q_integral += len(labels_of) * (horizon - last_t)
        # inspections still running at the horizon count up to the horizon
        for e in range(m):
            job = assignment[e]
            if job is not None and job >= 0:
                inspect_time[expert_type[e]] += horizon - started[e]
    else:
        sample_grid(0.0)

    busy_time = [c * horizon for c in counts]
    inspect_fraction = [inspect_time[k] / busy_time[k] if busy_time[k] > 0 else 0.0 for k in range(K)]
    busy_fraction = [1.0 if busy_time[k] > 0 else 0.0 for k in range(K)]

    return SimReport(
        policy=policy,
        horizon=float(horizon),
        seed=int(seed),
        m=params.m,
        delta=params.delta,
        labels=list(instance.labels),
        arrivals=arrivals,
        departures=departures,
        misclassified=misclassified,
        grid=grid,
        queue=g_queue,
        queue_stage=g_stage,
        work=g_work,
        mean_queue=q_integral / horizon if horizon > 0 else 0.0,
        inspect_fraction=inspect_fraction,
        busy_fraction=busy_fraction,
        inspections=inspections,
        vacations=vacations,
        residual_entries=pol.residual_entries,
        adaptive_exits=getattr(pol, "adaptive_exits", 0),
        final_queue=len(labels_of),
        notes=notes,
        config_digest=digest(config),
        wall_seconds=_time.perf_counter() - wall,
    )
