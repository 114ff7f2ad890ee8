"""Reference generators: first-order Markov chain (greedy and searched), shortest path, random walk."""

from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np

from .data import ODRequest, Trajectory
from .roadnet import RoadNetwork
from .search import SearchFailure, SearchStats, generate_trajectory


class GenerationFailure(RuntimeError):
    pass


@dataclass
class MarkovModel:
    net: RoadNetwork
    counts: dict[int, np.ndarray]  # per segment, aligned with net.successors(r)
    mean_dt: np.ndarray  # minutes spent per segment
    global_dt: float

    def probabilities(self, r: int) -> np.ndarray:
        """Add-one smoothed transition probabilities over the reachable successors."""
        cands = self.net.successors(r)
        c = self.counts.get(r, np.zeros(len(cands)))
        return (c + 1.0) / (c.sum() + len(cands)) if cands else np.zeros(0)

    def score(self, prefix, r_dest):
        r = prefix[-1][0]
        cands = self.net.successors(r)
        return list(cands), self.probabilities(r), np.full(len(cands), self.mean_dt[r])


def markov_fit(trajectories, net: RoadNetwork) -> MarkovModel:
    n = len(net)
    counts: dict[int, np.ndarray] = {}
    dt_sum = np.zeros(n)
    dt_cnt = np.zeros(n)
    for t in trajectories:
        segs, times = t.segments, t.times
        for i in range(len(segs) - 1):
            a, b = segs[i], segs[i + 1]
            cands = net.successors(a)
            if b in cands:
                counts.setdefault(a, np.zeros(len(cands)))[cands.index(b)] += 1
            dt_sum[a] += (times[i + 1] - times[i]) / 60.0
            dt_cnt[a] += 1
    global_dt = float(dt_sum.sum() / dt_cnt.sum()) if dt_cnt.sum() else 1.0
    mean_dt = np.where(dt_cnt > 0, dt_sum / np.maximum(dt_cnt, 1), global_dt)
    mean_dt = np.maximum(mean_dt, 1e-6)
    return MarkovModel(net, counts, mean_dt, global_dt)


def markov_generate(model: MarkovModel, request: ODRequest, max_steps: int | None = None) -> Trajectory:
    """Greedy rollout: always take the most probable successor (lowest id on ties)."""
    net = model.net
    max_steps = max_steps if max_steps is not None else 4 * len(net)
    pts = [(request.r_org, float(request.t_org))]
    r, t = request.r_org, float(request.t_org)
    for _ in range(max_steps):
        if r == request.r_dest:
            return Trajectory(pts)
        cands = net.successors(r)
        if not cands:
            raise GenerationFailure(f"dead end at segment {r}")
        nxt = cands[int(np.argmax(model.probabilities(r)))]
        t += 60.0 * model.mean_dt[r]
        pts.append((nxt, t))
        r = nxt
    if r == request.r_dest:
        return Trajectory(pts)
    raise GenerationFailure(f"step cap {max_steps} exceeded before reaching {request.r_dest}")


def markov_star_generate(model: MarkovModel, request: ODRequest, budget: int | None = None) -> Trajectory:
    """Best-first search with the Markov transition table as policy."""
    return generate_trajectory(model, model.net, request, budget)[0]


def shortest_path(net: RoadNetwork, origin: int, dest: int, weight) -> list[int]:
    """Heap Dijkstra; ``weight(a, b)`` is the cost of stepping a->b. Ties go to the earlier push."""
    dist = {origin: 0.0}
    prev: dict[int, int] = {}
    heap = [(0.0, 0, origin)]
    counter = 0
    done = set()
    while heap:
        d, _, u = heapq.heappop(heap)
        if u in done:
            continue
        done.add(u)
        if u == dest:
            path = [u]
            while path[-1] != origin:
                path.append(prev[path[-1]])
            return path[::-1]
        for v in net.successors(u):
            nd = d + weight(u, v)
            if nd < dist.get(v, np.inf):
                dist[v] = nd
                prev[v] = u
                counter += 1
                heapq.heappush(heap, (nd, counter, v))
    raise GenerationFailure(f"segment {dest} unreachable from {origin}")


def dijkstra_generate(net: RoadNetwork, request: ODRequest, speed_kmh: float = 30.0) -> Trajectory:
    """Minimum total length path; each segment takes length / speed."""
    lengths = net.lengths
    path = shortest_path(net, request.r_org, request.r_dest, lambda a, b: lengths[b])
    t = float(request.t_org)
    pts = [(path[0], t)]
    for a, b in zip(path[:-1], path[1:]):
        t += lengths[a] / 1000.0 / speed_kmh * 3600.0
        pts.append((b, t))
    return Trajectory(pts)


def random_walk_generate(net: RoadNetwork, request: ODRequest, rng: np.random.Generator, dt_minutes: float = 1.0, max_steps: int | None = None) -> Trajectory:
    """Uniform random successor choice until the destination or the step cap (control, never fails)."""
    max_steps = max_steps if max_steps is not None else 4 * int(np.sqrt(len(net)) + 1)
    pts = [(request.r_org, float(request.t_org))]
    r, t = request.r_org, float(request.t_org)
    for _ in range(max_steps):
        if r == request.r_dest:
            break
        cands = net.successors(r)
        if not cands:
            break
        r = int(cands[rng.integers(len(cands))])
        t += 60.0 * dt_minutes
        pts.append((r, t))
    return Trajectory(pts)
