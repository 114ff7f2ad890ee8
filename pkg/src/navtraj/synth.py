"""Synthetic grid city and noisy shortest-path trajectories with known generating process."""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .data import Trajectory, rejection_reason
from .roadnet import EARTH_RADIUS_KM, Intersection, RoadNetwork, RoadSegment, fold_angle, haversine_km

NORTH, EAST, SOUTH, WEST = 0.0, math.pi / 2, math.pi, 3 * math.pi / 2
LOCAL, ARTERIAL = 0, 1
BASE_TIME = 1704067200.0  # 2024-01-01T00:00:00Z


@dataclass
class GridSpec:
    rows: int = 8
    cols: int = 8
    spacing: float = 500.0  # meters between junctions
    origin_lat: float = 39.90
    origin_lon: float = 116.30
    arterial_every: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.rows < 2 or self.cols < 2:
            raise ValueError("grid needs at least 2x2 junctions")
        if not self.spacing > 0:
            raise ValueError("spacing must be positive")


@dataclass
class SynthPolicy:
    beta: float = 1.0  # softmax temperature over -remaining km; 0 = pure shortest path
    speeds_kmh: tuple[float, ...] = (30.0, 50.0)  # per road type
    noise: float = 0.10  # multiplicative interval noise (log-normal sigma)
    noise_scope: str = "trip"  # "trip": one speed factor per driver; "step": fresh factor per segment
    arterial_bias: float = 0.5  # km-equivalent bonus for arterials, for trips that prefer them
    arterial_share: float = 0.5  # fraction of trips with that preference
    rush_slowdown: float = 0.35
    seed: int = 0

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        if self.noise_scope not in ("trip", "step"):
            raise ValueError(f"noise_scope must be 'trip' or 'step', got {self.noise_scope!r}")


def junction_coords(spec: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    km = spec.spacing / 1000.0
    dlat = math.degrees(km / EARTH_RADIUS_KM)
    dlon = math.degrees(km / (EARTH_RADIUS_KM * math.cos(math.radians(spec.origin_lat))))
    r = np.arange(spec.rows)[:, None]
    c = np.arange(spec.cols)[None, :]
    lat = spec.origin_lat + r * dlat + 0 * c
    lon = spec.origin_lon + c * dlon + 0 * r
    return lon, lat


def n_grid_segments(rows: int, cols: int) -> int:
    return 2 * (rows * (cols - 1) + cols * (rows - 1))


def grid_network(spec: GridSpec) -> RoadNetwork:
    """Each block between neighbouring junctions becomes two directed segments.

    Every segment ending at a junction connects to every segment starting
    there; the exact reverse (a U-turn) is emitted as a non-reachable record.
    """
    lon, lat = junction_coords(spec)
    blocks = []  # (start junction, end junction, heading, type)
    for r in range(spec.rows):
        for c in range(spec.cols - 1):
            t = ARTERIAL if spec.arterial_every and r % spec.arterial_every == 0 else LOCAL
            blocks.append(((r, c), (r, c + 1), EAST, t))
            blocks.append(((r, c + 1), (r, c), WEST, t))
    for c in range(spec.cols):
        for r in range(spec.rows - 1):
            t = ARTERIAL if spec.arterial_every and c % spec.arterial_every == 0 else LOCAL
            blocks.append(((r, c), (r + 1, c), NORTH, t))
            blocks.append(((r + 1, c), (r, c), SOUTH, t))
    segments = []
    for i, (a, b, h, t) in enumerate(blocks):
        length_m = 1000.0 * float(haversine_km(lon[a], lat[a], lon[b], lat[b]))
        segments.append(RoadSegment(i, length_m, t, float((lon[a] + lon[b]) / 2), float((lat[a] + lat[b]) / 2), h))
    starts: dict[tuple[int, int], list[int]] = {}
    for i, (a, _, _, _) in enumerate(blocks):
        starts.setdefault(a, []).append(i)
    inters = []
    for i, (a, b, h, _) in enumerate(blocks):
        for j in sorted(starts.get(b, [])):
            reverse = blocks[j][1] == a
            inters.append(Intersection(i, j, not reverse, float(fold_angle(blocks[j][2] - h))))
    return RoadNetwork(segments, inters)


def distances_to(net: RoadNetwork, dest: int) -> np.ndarray:
    """Shortest travelled length (km) from each segment to ``dest``, counting both end segments."""
    n = len(net)
    pred: list[list[int]] = [[] for _ in range(n)]
    for r in range(n):
        for s in net.successors(r):
            pred[s].append(r)
    L = net.lengths / 1000.0
    dist = np.full(n, np.inf)
    dist[dest] = L[dest]
    heap = [(dist[dest], dest)]
    while heap:
        d, u = heapq.heappop(heap)
        if d > dist[u]:
            continue
        for p in pred[u]:
            nd = d + L[p]
            if nd < dist[p]:
                dist[p] = nd
                heapq.heappush(heap, (nd, p))
    return dist


def rush_factor(minute_of_day: float, slowdown: float) -> float:
    """Speed multiplier in (0, 1]: dips around 08:00 and 18:00."""
    h = minute_of_day / 60.0
    dip = math.exp(-(((h - 8.0) / 1.5) ** 2)) + math.exp(-(((h - 18.0) / 1.5) ** 2))
    return 1.0 - slowdown * min(dip, 1.0)


def segment_minutes(net: RoadNetwork, r: int, t_unix: float, policy: SynthPolicy, factor: float = 1.0) -> float:
    """Minutes spent on ``r`` when entering it at ``t_unix``, scaled by the noise ``factor``."""
    speed = policy.speeds_kmh[min(int(net.road_types[r]), len(policy.speeds_kmh) - 1)]
    base = net.lengths[r] / 1000.0 / speed * 60.0
    tod = (t_unix % 86400.0) / 60.0
    return base / rush_factor(tod, policy.rush_slowdown) * factor


def uniform_od_sampler(net: RoadNetwork) -> Callable[[np.random.Generator], tuple[int, int, float]]:
    n = len(net)

    def sample(rng):
        o = int(rng.integers(n))
        d = int(rng.integers(n - 1))
        d = d + 1 if d >= o else d
        t = BASE_TIME + float(rng.uniform(0, 86400.0))
        return o, d, t

    return sample


def walk(net: RoadNetwork, origin: int, dest: int, t0: float, policy: SynthPolicy, rng, dist_cache: dict, prefers_arterial: bool, max_steps: int):
    """One policy rollout; None when it revisits a segment or runs out of steps."""
    if dest not in dist_cache:
        dist_cache[dest] = distances_to(net, dest)
    remaining = dist_cache[dest]
    if not np.isfinite(remaining[origin]):
        return None
    bias = policy.arterial_bias if prefers_arterial else 0.0
    trip_factor = math.exp(policy.noise * rng.standard_normal()) if policy.noise_scope == "trip" else None
    pts = [(origin, t0)]
    seen = {origin}
    r, t = origin, t0
    for _ in range(max_steps):
        if r == dest:
            return pts
        cands = np.array(net.successors(r))
        cands = cands[np.isfinite(remaining[cands])]
        if cands.size == 0:
            return None
        art = (net.road_types[cands] == ARTERIAL).astype(np.float64)
        if policy.beta == 0:
            # lexicographic argmax: shortest remaining distance, then preference, then id
            best = min(range(len(cands)), key=lambda i: (remaining[cands[i]], -bias * art[i], cands[i]))
            nxt = int(cands[best])
        else:
            score = (-remaining[cands] + bias * art) / policy.beta
            p = np.exp(score - score.max())
            p /= p.sum()
            nxt = int(cands[rng.choice(len(cands), p=p)])
        factor = trip_factor if trip_factor is not None else math.exp(policy.noise * rng.standard_normal())
        t = t + 60.0 * segment_minutes(net, r, t, policy, factor)
        if nxt in seen:
            return None
        seen.add(nxt)
        pts.append((nxt, t))
        r = nxt
    return None


def synth_trajectories(
    net: RoadNetwork,
    n: int,
    policy: SynthPolicy | None = None,
    od_sampler: Callable[[np.random.Generator], tuple[int, int, float]] | None = None,
    max_attempts_factor: int = 200,
) -> list[Trajectory]:
    """Sample ``n`` trajectories that pass the preprocessing filters.

    Each trip walks a softmax over (-remaining shortest km + arterial bonus)/beta
    and integrates intervals from the per-type speeds, a rush-hour slowdown and
    log-normal noise;
    trips that loop, end up shorter than 5 points or have a >15 min gap are
    discarded and a fresh OD pair is drawn.
    """
    policy = policy or SynthPolicy()
    od_sampler = od_sampler or uniform_od_sampler(net)
    rng = np.random.default_rng(policy.seed)
    cache: dict[int, np.ndarray] = {}
    out: list[Trajectory] = []
    attempts = 0
    while len(out) < n:
        attempts += 1
        if attempts > max_attempts_factor * max(n, 1):
            raise RuntimeError(f"could only sample {len(out)} of {n} valid trajectories")
        o, d, t0 = od_sampler(rng)
        prefers = bool(rng.random() < policy.arterial_share)
        pts = walk(net, o, d, t0, policy, rng, cache, prefers, max_steps=4 * len(net))
        if pts is None:
            continue
        traj = Trajectory(pts, f"syn-{len(out)}")
        if rejection_reason(traj, net) is not None:
            continue
        out.append(traj)
    return out
