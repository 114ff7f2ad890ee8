"""Best-first search for the most probable trajectory between an OD pair.

Costs are cumulative negative log-probabilities.  The label ``phi`` and the
partial trajectory are kept per segment, and stale heap entries are skipped.
Any object with ``score(prefix, r_dest) -> (candidates, probs, dt_minutes)``
can act as the policy.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .data import ODRequest, Trajectory
from .roadnet import RoadNetwork


class Policy(Protocol):
    def score(self, prefix: Sequence[tuple[int, float]], r_dest: int) -> tuple[list[int], np.ndarray, np.ndarray]: ...


class SearchFailure(RuntimeError):
    """Destination not reached within the expansion budget (or the heap ran dry)."""

    def __init__(self, request: ODRequest, stats: "SearchStats", reason: str):
        self.request = request
        self.stats = stats
        self.reason = reason
        super().__init__(
            f"destination unreachable within budget ({reason}): {request.r_org}->{request.r_dest}, "
            f"{stats.pops} pops, {stats.expansions} expansions, {stats.pushes} pushes"
        )


@dataclass
class SearchStats:
    pops: int = 0
    expansions: int = 0
    pushes: int = 0
    stale: int = 0
    # (cost, segment, stale?) for every pop, filled when tracing
    pop_log: list[tuple[float, int, bool]] = field(default_factory=list)
    # (segment, new phi, prefix) for every relaxation, filled when tracing
    relaxations: list[tuple[int, float, list[tuple[int, float]]]] = field(default_factory=list)


def default_budget(net: RoadNetwork) -> int:
    return 50 * len(net)


def generate_trajectory(
    policy: Policy,
    net: RoadNetwork,
    request: ODRequest,
    budget: int | None = None,
    trace: bool = False,
) -> tuple[Trajectory, SearchStats]:
    """Most probable trajectory from ``request.r_org`` to ``request.r_dest``.

    Raises SearchFailure when the heap is exhausted or more than ``budget``
    entries have been popped.
    """
    net.check_id(request.r_org)
    net.check_id(request.r_dest)
    budget = default_budget(net) if budget is None else budget
    stats = SearchStats()
    phi: dict[int, float] = {request.r_org: 0.0}
    paths: dict[int, list[tuple[int, float]]] = {request.r_org: [(request.r_org, float(request.t_org))]}
    counter = 0
    heap: list[tuple[float, int, int]] = [(0.0, counter, request.r_org)]
    while heap:
        if stats.pops >= budget:
            raise SearchFailure(request, stats, "budget exceeded")
        cost, _, r = heapq.heappop(heap)
        stats.pops += 1
        if r == request.r_dest:
            if trace:
                stats.pop_log.append((cost, r, False))
            return Trajectory(list(paths[r])), stats
        stale = cost > phi[r]
        if trace:
            stats.pop_log.append((cost, r, stale))
        if stale:
            stats.stale += 1
            continue
        stats.expansions += 1
        prefix = paths[r]
        cands, probs, dts = policy.score(prefix, request.r_dest)
        t_last = prefix[-1][1]
        for c, p, dt in zip(cands, probs, dts):
            if p <= 0.0:
                continue
            new = phi[r] - math.log(p)
            if new < phi.get(c, math.inf):
                phi[c] = new
                paths[c] = prefix + [(int(c), t_last + 60.0 * float(dt))]
                counter += 1
                heapq.heappush(heap, (new, counter, int(c)))
                stats.pushes += 1
                if trace:
                    stats.relaxations.append((int(c), new, paths[c]))
    raise SearchFailure(request, stats, "heap exhausted")


@dataclass
class BatchResult:
    trajectories: list[Trajectory | None]
    failures: list[tuple[int, ODRequest, str]]
    stats: list[SearchStats | None]

    @property
    def succeeded(self) -> list[Trajectory]:
        return [t for t in self.trajectories if t is not None]

    @property
    def success_rate(self) -> float:
        n = len(self.trajectories)
        return 1.0 if n == 0 else len(self.succeeded) / n


def generate_batch(policy: Policy, net: RoadNetwork, requests: Sequence[ODRequest], budget: int | None = None, id_prefix: str = "gen") -> BatchResult:
    trajs: list[Trajectory | None] = []
    stats: list[SearchStats | None] = []
    failures = []
    for i, req in enumerate(requests):
        try:
            t, st = generate_trajectory(policy, net, req, budget)
            t.id = f"{id_prefix}-{i}"
            trajs.append(t)
            stats.append(st)
        except SearchFailure as exc:
            trajs.append(None)
            stats.append(exc.stats)
            failures.append((i, req, str(exc)))
    return BatchResult(trajs, failures, stats)


class TablePolicy:
    """Memoryless policy from a fixed per-segment distribution (tests, Markov baselines)."""

    def __init__(self, net: RoadNetwork, probs: dict[int, np.ndarray], dts: dict[int, float] | float = 1.0):
        self.net = net
        self.probs = probs
        self.dts = dts

    def score(self, prefix, r_dest):
        r = prefix[-1][0]
        cands = self.net.successors(r)
        p = self.probs.get(r, np.full(len(cands), 1.0 / max(len(cands), 1)))
        dt = self.dts if isinstance(self.dts, float) else self.dts.get(r, 1.0)
        return list(cands), np.asarray(p, dtype=np.float64), np.full(len(cands), dt)
