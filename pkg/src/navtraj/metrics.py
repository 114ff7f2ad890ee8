"""Global distribution metrics (JSD over histograms) and OD-matched local similarity metrics."""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import Trajectory
from .roadnet import EARTH_RADIUS_KM, RoadNetwork, haversine_km

LN2 = math.log(2.0)


# ---------------------------------------------------------------------------
# per-trajectory quantities


def travel_distance(traj: Trajectory, net: RoadNetwork) -> float:
    """Sum of segment lengths along the trajectory, km."""
    return float(net.lengths[np.asarray(traj.segments)].sum() / 1000.0)


def gyration_radius(traj: Trajectory, net: RoadNetwork) -> float:
    segs = np.asarray(traj.segments)
    lon, lat = net.lon[segs], net.lat[segs]
    d = haversine_km(lon, lat, lon.mean(), lat.mean())
    return float(np.sqrt(np.mean(d**2)))


def dwell_durations(traj: Trajectory) -> np.ndarray:
    """Consecutive intervals in minutes."""
    gaps = np.diff(traj.times) / 60.0
    if np.any(gaps < 0):
        raise ValueError(f"trajectory {traj.id}: timestamps decrease")
    return gaps


# ---------------------------------------------------------------------------
# histograms and JSD


@dataclass
class Histogram:
    edges: np.ndarray
    counts: np.ndarray

    @classmethod
    def from_values(cls, values, upper: float, bins: int = 100) -> "Histogram":
        """Uniform bins over [0, upper]; values above ``upper`` land in the last bin."""
        upper = float(upper) if upper > 0 else 1e-9
        edges = np.linspace(0.0, upper, bins + 1)
        v = np.clip(np.asarray(values, dtype=np.float64), 0.0, upper)
        counts, _ = np.histogram(v, bins=edges)
        return cls(edges, counts.astype(np.float64))

    @property
    def mass(self) -> np.ndarray:
        s = self.counts.sum()
        return self.counts / s if s > 0 else self.counts.copy()


def jsd_mass(p, q) -> float:
    """0.5 KL(P || M) + 0.5 KL(Q || M), natural log; bins empty in both contribute nothing."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"binning mismatch: {p.shape} vs {q.shape}")
    m = p + q
    out = 0.0
    nz = p > 0
    out += 0.5 * float(np.sum(p[nz] * np.log(2 * p[nz] / m[nz])))
    nz = q > 0
    out += 0.5 * float(np.sum(q[nz] * np.log(2 * q[nz] / m[nz])))
    return max(out, 0.0)


def jsd(P: Histogram, Q: Histogram) -> float:
    if P.edges.shape != Q.edges.shape or not np.allclose(P.edges, Q.edges):
        raise ValueError("histograms use different binning")
    return jsd_mass(P.mass, Q.mass)


# ---------------------------------------------------------------------------
# local similarity


def _points(traj: Trajectory, net: RoadNetwork):
    segs = np.asarray(traj.segments)
    if segs.size == 0:
        raise ValueError("empty trajectory")
    return net.lon[segs], net.lat[segs]


def point_distances(a: Trajectory, b: Trajectory, net: RoadNetwork) -> np.ndarray:
    """|a| x |b| great-circle km between segment midpoints."""
    alon, alat = _points(a, net)
    blon, blat = _points(b, net)
    return haversine_km(alon[:, None], alat[:, None], blon[None, :], blat[None, :])


def hausdorff(a: Trajectory, b: Trajectory, net: RoadNetwork) -> float:
    D = point_distances(a, b, net)
    return float(max(D.min(axis=1).max(), D.min(axis=0).max()))


def dtw_matrix(C: np.ndarray) -> float:
    n, m = C.shape
    acc = np.full((n + 1, m + 1), np.inf)
    acc[0, 0] = 0.0
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            acc[i, j] = C[i - 1, j - 1] + min(acc[i - 1, j], acc[i, j - 1], acc[i - 1, j - 1])
    return float(acc[n, m])


def dtw(a: Trajectory, b: Trajectory, net: RoadNetwork) -> float:
    """Classic unconstrained DTW with km costs; both ends aligned."""
    return dtw_matrix(point_distances(a, b, net))


def edr_matrix(match: np.ndarray) -> float:
    n, m = match.shape
    E = np.zeros((n + 1, m + 1))
    E[:, 0] = np.arange(n + 1)
    E[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            sub = 0.0 if match[i - 1, j - 1] else 1.0
            E[i, j] = min(E[i - 1, j - 1] + sub, E[i - 1, j] + 1.0, E[i, j - 1] + 1.0)
    return float(E[n, m] / max(n, m))


def edr(a: Trajectory, b: Trajectory, net: RoadNetwork, threshold_m: float = 200.0) -> float:
    """Edit distance on real sequences normalised by the longer length; points match within ``threshold_m``."""
    if not threshold_m > 0:
        raise ValueError("EDR threshold must be positive")
    return edr_matrix(point_distances(a, b, net) * 1000.0 <= threshold_m)


# ---------------------------------------------------------------------------
# OD grid


@dataclass
class GridIndex:
    lon0: float
    lat0: float
    cell_m: float = 200.0
    lat_ref: float = 0.0

    @classmethod
    def for_network(cls, net: RoadNetwork, cell_m: float = 200.0) -> "GridIndex":
        lon_min, lat_min, _, lat_max = net.bbox
        return cls(lon_min, lat_min, cell_m, (lat_min + lat_max) / 2)

    def cell(self, lon, lat) -> tuple[int, int]:
        """(row, col) of a point, local equirectangular projection anchored at the SW corner."""
        k = math.pi / 180.0 * EARTH_RADIUS_KM * 1000.0
        north = (lat - self.lat0) * k
        east = (lon - self.lon0) * k * math.cos(math.radians(self.lat_ref))
        return int(math.floor(north / self.cell_m)), int(math.floor(east / self.cell_m))

    def od_key(self, traj: Trajectory, net: RoadNetwork):
        o, d = traj.origin, traj.destination
        return self.cell(net.lon[o], net.lat[o]), self.cell(net.lon[d], net.lat[d])


# ---------------------------------------------------------------------------
# report


GLOBAL_METRICS = ("distance", "radius", "duration")
LOCAL_METRICS = ("hausdorff", "dtw", "edr")
UNITS = {"distance": "km", "radius": "km", "duration": "min", "hausdorff": "km", "dtw": "km", "edr": "ratio"}


@dataclass
class MetricsReport:
    jsd: dict[str, float]
    local: dict[str, float] | None
    match_rate: float
    n_real: int
    n_generated: int
    n_od_keys: int
    histograms: dict[str, tuple[Histogram, Histogram]] = field(default_factory=dict)

    def rows(self) -> list[tuple[str, str, float | str, str]]:
        out = [("global", f"{m}_jsd", self.jsd[m], "nats") for m in GLOBAL_METRICS]
        for m in LOCAL_METRICS:
            out.append(("local", m, self.local[m] if self.local is not None else "absent", UNITS[m]))
        out += [
            ("local", "od_match_rate", self.match_rate, "ratio"),
            ("local", "od_keys_matched", self.n_od_keys, "count"),
            ("count", "n_real", self.n_real, "count"),
            ("count", "n_generated", self.n_generated, "count"),
        ]
        return out

    def write(self, outdir: str | Path, label: str = "") -> None:
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        with open(outdir / "metrics.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["section", "metric", "value", "unit"])
            for sec, name, val, unit in self.rows():
                w.writerow([sec, name, repr(val) if isinstance(val, float) else val, unit])
        with open(outdir / "histograms.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["metric", "bin", "lower", "upper", "real_mass", "generated_mass"])
            for m, (P, Q) in self.histograms.items():
                pm, qm = P.mass, Q.mass
                for i in range(len(P.counts)):
                    w.writerow([m, i, repr(float(P.edges[i])), repr(float(P.edges[i + 1])), repr(float(pm[i])), repr(float(qm[i]))])
        (outdir / "summary.txt").write_text(self.summary(label), encoding="utf-8")

    def summary(self, label: str = "") -> str:
        lines = [f"evaluation {label}".rstrip(), f"real={self.n_real} generated={self.n_generated}"]
        for m in GLOBAL_METRICS:
            lines.append(f"  {m:<9} JSD = {self.jsd[m]:.6f}")
        if self.local is None:
            lines.append("  local metrics absent: no shared OD grid cells")
        else:
            for m in LOCAL_METRICS:
                lines.append(f"  {m:<9} = {self.local[m]:.6f} {UNITS[m]}")
        lines.append(f"  OD match rate = {self.match_rate:.4f} over {self.n_od_keys} keys")
        return "\n".join(lines) + "\n"


def evaluate(
    real: Sequence[Trajectory],
    generated: Sequence[Trajectory],
    net: RoadNetwork,
    bins: int = 100,
    cell_m: float = 200.0,
    edr_threshold_m: float = 200.0,
    max_pairs: int = 10,
) -> MetricsReport:
    if not real or not generated:
        raise ValueError("evaluate needs non-empty real and generated sets")
    values = {
        "distance": ([travel_distance(t, net) for t in real], [travel_distance(t, net) for t in generated]),
        "radius": ([gyration_radius(t, net) for t in real], [gyration_radius(t, net) for t in generated]),
        "duration": (
            np.concatenate([dwell_durations(t) for t in real] or [np.zeros(0)]),
            np.concatenate([dwell_durations(t) for t in generated] or [np.zeros(0)]),
        ),
    }
    hists, scores = {}, {}
    for m, (rv, gv) in values.items():
        upper = float(np.max(rv)) if len(rv) else 0.0
        P = Histogram.from_values(rv, upper, bins)
        Q = Histogram.from_values(gv, upper, bins)
        hists[m] = (P, Q)
        scores[m] = jsd(P, Q)

    grid = GridIndex.for_network(net, cell_m)
    by_key_real: dict = {}
    by_key_gen: dict = {}
    for t in real:
        by_key_real.setdefault(grid.od_key(t, net), []).append(t)
    for t in generated:
        by_key_gen.setdefault(grid.od_key(t, net), []).append(t)
    shared = [k for k in by_key_gen if k in by_key_real]
    matched_gen = sum(len(by_key_gen[k]) for k in shared)
    local = None
    if shared:
        per_key = {m: [] for m in LOCAL_METRICS}
        for key in shared:
            pairs = list(itertools.islice(itertools.product(by_key_real[key], by_key_gen[key]), max_pairs))
            acc = {m: [] for m in LOCAL_METRICS}
            for a, b in pairs:
                D = point_distances(a, b, net)
                acc["hausdorff"].append(float(max(D.min(axis=1).max(), D.min(axis=0).max())))
                acc["dtw"].append(dtw_matrix(D))
                acc["edr"].append(edr_matrix(D * 1000.0 <= edr_threshold_m))
            for m in LOCAL_METRICS:
                per_key[m].append(float(np.mean(acc[m])))
        local = {m: float(np.mean(v)) for m, v in per_key.items()}
    return MetricsReport(
        jsd=scores,
        local=local,
        match_rate=matched_gen / len(generated),
        n_real=len(real),
        n_generated=len(generated),
        n_od_keys=len(shared),
        histograms=hists,
    )
