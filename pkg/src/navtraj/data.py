"""Trajectory records, file formats, preprocessing filters and dataset splits."""

from __future__ import annotations

import csv
import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .roadnet import RoadNetwork

MAX_GAP_SECONDS = 15 * 60
MIN_LENGTH = 5


class DataError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass
class Trajectory:
    points: list[tuple[int, float]]  # (segment id, unix seconds)
    id: str = ""

    @property
    def segments(self) -> list[int]:
        return [p[0] for p in self.points]

    @property
    def times(self) -> np.ndarray:
        return np.array([p[1] for p in self.points], dtype=np.float64)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def origin(self) -> int:
        return self.points[0][0]

    @property
    def destination(self) -> int:
        return self.points[-1][0]

    def request(self) -> "ODRequest":
        return ODRequest(self.points[0][0], self.points[0][1], self.points[-1][0])


@dataclass(frozen=True)
class ODRequest:
    r_org: int
    t_org: float
    r_dest: int


def minutes_of_day(unix_seconds) -> np.ndarray:
    return np.mod(np.asarray(unix_seconds, dtype=np.float64), 86400.0) / 60.0


# ---------------------------------------------------------------------------
# files


def write_trajectories(trajs: Iterable[Trajectory], path: str | Path) -> None:
    """JSON lines: {"id": ..., "points": [[segment, unix_seconds], ...]}."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for t in trajs:
            fh.write(json.dumps({"id": t.id, "points": [[int(s), float(ts)] for s, ts in t.points]}) + "\n")


def read_trajectories(path: str | Path) -> list[Trajectory]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                pts = [(int(s), float(ts)) for s, ts in rec["points"]]
            except (ValueError, KeyError, TypeError) as exc:
                raise DataError(f"malformed trajectory record ({exc})", lineno) from None
            if not pts:
                raise DataError("empty trajectory", lineno)
            out.append(Trajectory(pts, str(rec.get("id", lineno))))
    return out


def write_requests(reqs: Iterable[ODRequest], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["r_org", "t_org", "r_dest"])
        for r in reqs:
            w.writerow([r.r_org, repr(float(r.t_org)), r.r_dest])


def read_requests(path: str | Path) -> list[ODRequest]:
    out = []
    with open(path, encoding="utf-8") as fh:
        rows = csv.reader(fh)
        header = next(rows, None)
        if header != ["r_org", "t_org", "r_dest"]:
            raise DataError("request file header must be r_org,t_org,r_dest", 1)
        for lineno, row in enumerate(rows, start=2):
            if not row:
                continue
            try:
                out.append(ODRequest(int(row[0]), float(row[1]), int(row[2])))
            except (ValueError, IndexError):
                raise DataError(f"malformed request row {row!r}", lineno) from None
    return out


# ---------------------------------------------------------------------------
# preprocessing


def rejection_reason(traj: Trajectory, net: RoadNetwork | None = None) -> str | None:
    """Why a trajectory fails preprocessing, or None if it is kept.

    Reasons, checked in order: ``too_short`` (< 5 points), ``loop`` (a segment
    repeats), ``long_gap`` (an interval over 15 minutes).  Structural problems
    (``non_monotonic_time``, ``unreachable_step``, ``unknown_segment``) are
    reported as well.
    """
    segs = traj.segments
    times = traj.times
    if len(segs) < MIN_LENGTH:
        return "too_short"
    if len(set(segs)) != len(segs):
        return "loop"
    gaps = np.diff(times)
    if np.any(gaps > MAX_GAP_SECONDS):
        return "long_gap"
    if np.any(gaps < 0):
        return "non_monotonic_time"
    if net is not None:
        n = len(net)
        if any(not 0 <= s < n for s in segs):
            return "unknown_segment"
        for a, b in zip(segs[:-1], segs[1:]):
            if b not in net.successors(a):
                return "unreachable_step"
    return None


def filter_trajectories(trajs: Sequence[Trajectory], net: RoadNetwork | None = None) -> tuple[list[Trajectory], Counter]:
    kept, report = [], Counter()
    for t in trajs:
        why = rejection_reason(t, net)
        if why is None:
            kept.append(t)
            report["kept"] += 1
        else:
            report[why] += 1
    return kept, report


def split_sizes(n: int, ratios: Sequence[float] = (7, 1, 2)) -> tuple[int, int, int]:
    r = np.asarray(ratios, dtype=np.float64)
    r = r / r.sum()
    n_train = int(round(n * r[0]))
    n_val = int(round(n * r[1]))
    n_val = min(n_val, n - n_train)
    return n_train, n_val, n - n_train - n_val


def split_dataset(trajs: Sequence[Trajectory], ratios=(7, 1, 2), seed: int = 0):
    order = np.random.default_rng(seed).permutation(len(trajs))
    shuffled = [trajs[i] for i in order]
    a, b, _ = split_sizes(len(trajs), ratios)
    return shuffled[:a], shuffled[a : a + b], shuffled[a + b :]


def validate_and_split(path: str | Path, net: RoadNetwork | None = None, ratios=(7, 1, 2), seed: int = 0):
    """Read, filter and split a trajectory file. Returns (train, val, test, filter report)."""
    trajs = read_trajectories(path)
    kept, report = filter_trajectories(trajs, net)
    train, val, test = split_dataset(kept, ratios, seed)
    return train, val, test, report
