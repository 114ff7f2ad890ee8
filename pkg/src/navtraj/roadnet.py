"""Road network graph, geometry helpers, zone partitioning and zone flows.

Road segments are the graph nodes; intersections are directed edges between
segments.  Each segment carries a representative midpoint (lon, lat) and a
compass heading used for turning and steering angles.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

EARTH_RADIUS_KM = 6371.0088


class NetworkFormatError(ValueError):
    """Raised when a network file cannot be parsed or fails validation."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class RoadSegment:
    id: int
    length: float  # meters
    road_type: int
    lon: float
    lat: float
    heading: float | None = None  # compass bearing of travel, radians


@dataclass(frozen=True)
class Intersection:
    src: int
    dst: int
    reachable: bool
    angle: float  # radians, [0, pi]


@dataclass
class RoadNetwork:
    segments: list[RoadSegment]
    intersections: list[Intersection]
    _succ: list[list[int]] = field(init=False, repr=False)

    def __post_init__(self):
        n = len(self.segments)
        for i, s in enumerate(self.segments):
            if s.id != i:
                raise NetworkFormatError(f"segment ids must be dense 0..{n - 1}, got {s.id} at position {i}")
            if not s.length > 0:
                raise NetworkFormatError(f"segment {s.id}: length must be positive, got {s.length}")
            if not (-90.0 <= s.lat <= 90.0 and -180.0 <= s.lon <= 180.0):
                raise NetworkFormatError(f"segment {s.id}: lon/lat out of range")
        seen = set()
        succ: list[list[int]] = [[] for _ in range(n)]
        for e in self.intersections:
            if not (0 <= e.src < n and 0 <= e.dst < n):
                raise NetworkFormatError(f"intersection ({e.src},{e.dst}) references unknown segment")
            if (e.src, e.dst) in seen:
                raise NetworkFormatError(f"duplicate intersection ({e.src},{e.dst})")
            if not (0.0 <= e.angle <= math.pi + 1e-12):
                raise NetworkFormatError(f"intersection ({e.src},{e.dst}): angle {e.angle} outside [0, pi]")
            seen.add((e.src, e.dst))
            if e.reachable:
                succ[e.src].append(e.dst)
        self._succ = [sorted(s) for s in succ]

    def __len__(self) -> int:
        return len(self.segments)

    @property
    def n_segments(self) -> int:
        return len(self.segments)

    @cached_property
    def lon(self) -> np.ndarray:
        return np.array([s.lon for s in self.segments], dtype=np.float64)

    @cached_property
    def lat(self) -> np.ndarray:
        return np.array([s.lat for s in self.segments], dtype=np.float64)

    @cached_property
    def lengths(self) -> np.ndarray:
        return np.array([s.length for s in self.segments], dtype=np.float64)

    @cached_property
    def road_types(self) -> np.ndarray:
        return np.array([s.road_type for s in self.segments], dtype=np.int64)

    @cached_property
    def headings(self) -> np.ndarray:
        """Segment headings; missing ones are inferred from neighbouring midpoints."""
        out = np.zeros(len(self.segments))
        pred: list[list[int]] = [[] for _ in self.segments]
        for e in self.intersections:
            pred[e.dst].append(e.src)
        for s in self.segments:
            if s.heading is not None:
                out[s.id] = s.heading
                continue
            before = pred[s.id] or [s.id]
            after = self._succ[s.id] or [s.id]
            lon0, lat0 = self.lon[before].mean(), self.lat[before].mean()
            lon1, lat1 = self.lon[after].mean(), self.lat[after].mean()
            out[s.id] = bearing(lon0, lat0, lon1, lat1) if (lon0, lat0) != (lon1, lat1) else 0.0
        return out

    @property
    def bbox(self) -> tuple[float, float, float, float]:
        """(lon_min, lat_min, lon_max, lat_max)."""
        return float(self.lon.min()), float(self.lat.min()), float(self.lon.max()), float(self.lat.max())

    def successors(self, r: int) -> list[int]:
        return self._succ[r]

    @cached_property
    def undirected_neighbors(self) -> list[list[int]]:
        nbrs: list[set[int]] = [set() for _ in self.segments]
        for e in self.intersections:
            if e.src != e.dst:
                nbrs[e.src].add(e.dst)
                nbrs[e.dst].add(e.src)
        return [sorted(s) for s in nbrs]

    def check_id(self, r: int) -> None:
        if not (0 <= r < len(self.segments)):
            raise IndexError(f"invalid segment id {r}")


def reachable_successors(net: RoadNetwork, r: int) -> list[int]:
    net.check_id(r)
    return list(net.successors(r))


def haversine_km(lon1, lat1, lon2, lat2):
    """Great-circle distance in km; works elementwise on arrays."""
    lon1, lat1, lon2, lat2 = map(np.radians, (lon1, lat1, lon2, lat2))
    a = np.sin((lat2 - lat1) / 2) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin((lon2 - lon1) / 2) ** 2
    return 2 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


def bearing(lon1, lat1, lon2, lat2):
    """Initial compass bearing from point 1 to point 2, radians in [0, 2pi)."""
    lon1, lat1, lon2, lat2 = map(np.radians, (lon1, lat1, lon2, lat2))
    y = np.sin(lon2 - lon1) * np.cos(lat2)
    x = np.cos(lat1) * np.sin(lat2) - np.sin(lat1) * np.cos(lat2) * np.cos(lon2 - lon1)
    return np.mod(np.arctan2(y, x), 2 * np.pi)


def fold_angle(a):
    """Absolute angular difference folded into [0, pi]."""
    a = np.mod(np.abs(a), 2 * np.pi)
    return np.minimum(a, 2 * np.pi - a)


def segment_distance(net: RoadNetwork, ri: int, rj: int) -> float:
    """Great-circle distance between segment midpoints, km."""
    net.check_id(ri)
    net.check_id(rj)
    if ri == rj:
        return 0.0
    return float(haversine_km(net.lon[ri], net.lat[ri], net.lon[rj], net.lat[rj]))


def pairwise_distance(net: RoadNetwork, segs: Sequence[int]) -> np.ndarray:
    segs = np.asarray(segs, dtype=np.int64)
    lon, lat = net.lon[segs], net.lat[segs]
    return haversine_km(lon[:, None], lat[:, None], lon[None, :], lat[None, :])


def turning_angle(net: RoadNetwork, ri: int, rj: int) -> float:
    """Angle between the headings of two segments, in [0, pi]."""
    net.check_id(ri)
    net.check_id(rj)
    h = net.headings
    return float(fold_angle(h[rj] - h[ri]))


def steering_angle(net: RoadNetwork, ri: int, rj: int) -> float:
    """Angle between the heading of ``ri`` and the bearing from ``ri`` toward ``rj``'s midpoint.

    Coincident midpoints give 0.
    """
    net.check_id(ri)
    net.check_id(rj)
    return float(steering_angles(net, np.array([ri]), rj)[0])


def steering_angles(net: RoadNetwork, segs: np.ndarray, target: int) -> np.ndarray:
    segs = np.asarray(segs, dtype=np.int64)
    lon, lat = net.lon[segs], net.lat[segs]
    same = (lon == net.lon[target]) & (lat == net.lat[target])
    b = bearing(lon, lat, net.lon[target], net.lat[target])
    out = fold_angle(b - net.headings[segs])
    return np.where(same, 0.0, out)


# ---------------------------------------------------------------------------
# file format


def load_network(path: str | Path) -> RoadNetwork:
    """Read the sectioned CSV network format.

    ::

        [segments]
        id,length_m,type,lon,lat[,heading_rad]
        ...
        [intersections]
        from,to,reachable,angle_rad
        ...
    """
    path = Path(path)
    segments: list[RoadSegment] = []
    inters: list[Intersection] = []
    section = None
    header: list[str] | None = None
    with path.open(encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("[") and line.endswith("]"):
                section = line[1:-1].strip().lower()
                if section not in ("segments", "intersections"):
                    raise NetworkFormatError(f"unknown section [{section}]", lineno)
                header = None
                continue
            if section is None:
                raise NetworkFormatError("data before any section tag", lineno)
            cells = [c.strip() for c in line.split(",")]
            if header is None:
                header = cells
                want = ["id", "length_m", "type", "lon", "lat"] if section == "segments" else ["from", "to", "reachable", "angle_rad"]
                if header[: len(want)] != want:
                    raise NetworkFormatError(f"bad header for [{section}]: expected {','.join(want)}", lineno)
                continue
            if len(cells) != len(header):
                raise NetworkFormatError(f"expected {len(header)} fields, got {len(cells)}", lineno)
            try:
                if section == "segments":
                    heading = float(cells[5]) if len(cells) > 5 and cells[5] != "" else None
                    segments.append(RoadSegment(int(cells[0]), float(cells[1]), int(cells[2]), float(cells[3]), float(cells[4]), heading))
                else:
                    reach = cells[2].lower() in ("1", "true", "t", "yes")
                    if cells[2].lower() not in ("0", "1", "true", "false", "t", "f", "yes", "no"):
                        raise ValueError(f"bad reachable flag {cells[2]!r}")
                    inters.append(Intersection(int(cells[0]), int(cells[1]), reach, float(cells[3])))
            except ValueError as exc:
                raise NetworkFormatError(str(exc), lineno) from None
            if section == "segments" and not segments[-1].length > 0:
                raise NetworkFormatError(f"segment {segments[-1].id}: length must be positive", lineno)
    segments.sort(key=lambda s: s.id)
    return RoadNetwork(segments, inters)


def save_network(net: RoadNetwork, path: str | Path) -> None:
    with_heading = all(s.heading is not None for s in net.segments)
    lines = ["[segments]", "id,length_m,type,lon,lat" + (",heading_rad" if with_heading else "")]
    for s in net.segments:
        row = f"{s.id},{s.length!r},{s.road_type},{s.lon!r},{s.lat!r}"
        if with_heading:
            row += f",{s.heading!r}"
        lines.append(row)
    lines += ["[intersections]", "from,to,reachable,angle_rad"]
    for e in net.intersections:
        lines.append(f"{e.src},{e.dst},{int(e.reachable)},{e.angle!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# zones


@dataclass
class ZonePartition:
    k: int
    zone_of: np.ndarray  # segment id -> zone id
    flow: np.ndarray | None = None  # k x k symmetric inter-zone counts

    def sizes(self) -> np.ndarray:
        return np.bincount(self.zone_of, minlength=self.k)

    def with_flow(self, flow: np.ndarray) -> "ZonePartition":
        return ZonePartition(self.k, self.zone_of, flow)


def default_zone_count(n_segments: int) -> int:
    return max(2, math.ceil(n_segments / 500))


def balance_limit(n: int, k: int, eps: float) -> int:
    # small tolerance so (1+eps)*n/k landing exactly on an integer is not bumped up by rounding noise
    return math.ceil((1 + eps) * n / k - 1e-9)


def cut_size(net: RoadNetwork, zone_of: np.ndarray) -> int:
    """Number of undirected neighbour pairs whose endpoints lie in different zones."""
    cut = 0
    for i, nb in enumerate(net.undirected_neighbors):
        for j in nb:
            if i < j and zone_of[i] != zone_of[j]:
                cut += 1
    return cut


def _weighted_adjacency(net: RoadNetwork) -> list[dict[int, float]]:
    adj: list[dict[int, float]] = [dict() for _ in net.segments]
    for e in net.intersections:
        if e.src == e.dst:
            continue
        adj[e.src][e.dst] = adj[e.src].get(e.dst, 0.0) + 1.0
        adj[e.dst][e.src] = adj[e.dst].get(e.src, 0.0) + 1.0
    return adj


def _coarsen(adj, weights, rng, max_weight):
    """One level of heavy-edge matching. Returns (coarse adj, coarse weights, fine->coarse map)."""
    n = len(adj)
    match = -np.ones(n, dtype=np.int64)
    for u in rng.permutation(n):
        if match[u] >= 0:
            continue
        best, best_w = -1, -1.0
        for v, w in sorted(adj[u].items()):
            if match[v] < 0 and v != u and weights[u] + weights[v] <= max_weight and w > best_w:
                best, best_w = v, w
        if best >= 0:
            match[u], match[best] = best, u
        else:
            match[u] = u
    cmap = -np.ones(n, dtype=np.int64)
    nc = 0
    for u in range(n):
        if cmap[u] < 0:
            cmap[u] = nc
            cmap[match[u]] = nc
            nc += 1
    cweights = np.zeros(nc)
    np.add.at(cweights, cmap, weights)
    cadj: list[dict[int, float]] = [dict() for _ in range(nc)]
    for u in range(n):
        cu = cmap[u]
        for v, w in adj[u].items():
            cv = cmap[v]
            if cu != cv:
                cadj[cu][cv] = cadj[cu].get(cv, 0.0) + w
    return cadj, cweights, cmap


def _grow_initial(adj, weights, k, rng):
    """Greedy graph growing: fill zones one by one from a seed, absorbing the most connected node."""
    n = len(adj)
    total = weights.sum()
    part = -np.ones(n, dtype=np.int64)
    order = list(rng.permutation(n))
    filled = 0.0
    for z in range(k):
        target = (total - filled) / (k - z)
        unassigned = [u for u in order if part[u] < 0]
        if not unassigned:
            break
        remaining_zones = k - z
        if z == k - 1:
            for u in unassigned:
                part[u] = z
            filled = total
            break
        zw = 0.0
        gain: dict[int, float] = {}
        seed = unassigned[0]
        frontier_pick = seed
        while True:
            u = frontier_pick
            part[u] = z
            zw += weights[u]
            gain.pop(u, None)
            for v, w in adj[u].items():
                if part[v] < 0:
                    gain[v] = gain.get(v, 0.0) + w
            left = sum(1 for x in part if x < 0)
            if zw >= target or left <= remaining_zones - 1:
                break
            if gain:
                frontier_pick = max(gain.items(), key=lambda kv: (kv[1], -kv[0]))[0]
            else:
                rest = [x for x in order if part[x] < 0]
                frontier_pick = rest[0]
            if zw + weights[frontier_pick] > target * 1.5 and zw > 0:
                break
        filled += zw
    return part


def _refine(adj, weights, part, k, limit, passes=4):
    """Greedy boundary moves that reduce the cut without breaking balance or emptying a zone."""
    zw = np.zeros(k)
    np.add.at(zw, part, weights)
    zc = np.bincount(part, minlength=k)
    for _ in range(passes):
        moved = 0
        for u in range(len(adj)):
            own = part[u]
            conn: dict[int, float] = {}
            for v, w in adj[u].items():
                conn[part[v]] = conn.get(part[v], 0.0) + w
            if not conn or (len(conn) == 1 and own in conn):
                continue
            inside = conn.get(own, 0.0)
            best, best_gain = own, 0.0
            for z, c in sorted(conn.items()):
                if z == own:
                    continue
                g = c - inside
                if g > best_gain and zw[z] + weights[u] <= limit and zc[own] > 1:
                    best, best_gain = z, g
            if best != own:
                part[u] = best
                zw[own] -= weights[u]
                zw[best] += weights[u]
                zc[own] -= 1
                zc[best] += 1
                moved += 1
        if not moved:
            break
    return part


def _rebalance(adj, part, k, limit):
    """Unit-weight fix-up: empty zones get a node, overweight zones shed boundary nodes."""
    n = len(adj)
    size = np.bincount(part, minlength=k)

    def move_cost(u, z):
        own = part[u]
        c_own = sum(w for v, w in adj[u].items() if part[v] == own)
        c_new = sum(w for v, w in adj[u].items() if part[v] == z)
        return c_own - c_new

    for z in range(k):
        if size[z] == 0:
            donor = int(np.argmax(size))
            cand = [u for u in range(n) if part[u] == donor]
            u = min(cand, key=lambda u: (move_cost(u, z), u))
            part[u] = z
            size[donor] -= 1
            size[z] += 1
    while size.max() > limit:
        src = int(np.argmax(size))
        best = None
        for u in range(n):
            if part[u] != src:
                continue
            targets = {part[v] for v in adj[u]} - {src}
            targets = [z for z in targets if size[z] < limit] or [z for z in range(k) if size[z] < limit and z != src]
            for z in targets:
                key = (move_cost(u, z), u, z)
                if best is None or key < best:
                    best = key
        _, u, z = best
        part[u] = z
        size[src] -= 1
        size[z] += 1
    return part


def partition_zones(net: RoadNetwork, k: int | None = None, eps: float = 0.1, seed: int = 0) -> ZonePartition:
    """Balanced k-way partition of the undirected segment graph.

    Multilevel scheme: heavy-edge matching coarsening, greedy growing on the
    coarsest graph, then boundary refinement at every level on the way back.
    Coverage and the balance bound ``ceil((1+eps)|V|/k)`` are guaranteed;
    cut quality is best effort.
    """
    n = len(net)
    if k is None:
        k = default_zone_count(n)
    if not 1 <= k <= n:
        raise ValueError(f"zone count k={k} must be in [1, {n}]")
    if k == 1:
        return ZonePartition(1, np.zeros(n, dtype=np.int64))
    if k == n:
        return ZonePartition(n, np.arange(n, dtype=np.int64))
    rng = np.random.default_rng(seed)
    limit = balance_limit(n, k, eps)

    levels = []
    adj = _weighted_adjacency(net)
    weights = np.ones(n)
    max_w = max(1.0, limit / 2)
    while len(adj) > max(20 * k, 40):
        cadj, cw, cmap = _coarsen(adj, weights, rng, max_w)
        if len(cadj) > 0.95 * len(adj):
            break
        levels.append((adj, weights, cmap))
        adj, weights = cadj, cw

    part = _grow_initial(adj, weights, k, rng)
    part = _refine(adj, weights, part, k, limit)
    for fadj, fweights, cmap in reversed(levels):
        part = part[cmap]
        part = _refine(fadj, fweights, part, k, limit)
    fadj = _weighted_adjacency(net)
    part = _rebalance(fadj, part, k, limit)
    part = _refine(fadj, np.ones(n), part, k, limit)
    return ZonePartition(k, part.astype(np.int64))


def zone_flow_matrix(partition: ZonePartition, trajectories: Iterable) -> np.ndarray:
    """Symmetric counts of consecutive steps that cross between two different zones."""
    F = np.zeros((partition.k, partition.k))
    z = partition.zone_of
    for traj in trajectories:
        segs = np.asarray(_segments_of(traj), dtype=np.int64)
        if len(segs) < 2:
            continue
        a, b = z[segs[:-1]], z[segs[1:]]
        cross = a != b
        np.add.at(F, (a[cross], b[cross]), 1.0)
        np.add.at(F, (b[cross], a[cross]), 1.0)
    return F


def _segments_of(traj) -> Sequence[int]:
    if hasattr(traj, "segments"):
        return traj.segments
    return [p[0] if isinstance(p, (tuple, list)) else p for p in traj]


def save_partition(partition: ZonePartition, path: str | Path) -> None:
    lines = ["segment_id,zone"] + [f"{i},{int(z)}" for i, z in enumerate(partition.zone_of)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_partition(path: str | Path, n_segments: int | None = None) -> ZonePartition:
    rows = Path(path).read_text(encoding="utf-8").split()
    if not rows or rows[0] != "segment_id,zone":
        raise NetworkFormatError("partition file must start with header segment_id,zone", 1)
    pairs = []
    for lineno, row in enumerate(rows[1:], start=2):
        try:
            s, z = (int(x) for x in row.split(","))
        except ValueError:
            raise NetworkFormatError(f"bad partition row {row!r}", lineno) from None
        pairs.append((s, z))
    pairs.sort()
    if [s for s, _ in pairs] != list(range(len(pairs))):
        raise NetworkFormatError("partition must list every segment id exactly once")
    if n_segments is not None and len(pairs) != n_segments:
        raise NetworkFormatError(f"partition covers {len(pairs)} segments, network has {n_segments}")
    zone_of = np.array([z for _, z in pairs], dtype=np.int64)
    k = int(zone_of.max()) + 1
    if np.any(np.bincount(zone_of, minlength=k) == 0):
        raise NetworkFormatError("partition has an empty zone")
    return ZonePartition(k, zone_of)
