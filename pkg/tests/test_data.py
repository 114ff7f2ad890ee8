import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import chain_net, make_net
from navtraj.data import (
    DataError,
    ODRequest,
    Trajectory,
    filter_trajectories,
    read_requests,
    read_trajectories,
    rejection_reason,
    split_dataset,
    split_sizes,
    validate_and_split,
    write_requests,
    write_trajectories,
)

T0 = 1704100000.0


def tr(segs, gaps=None, tid=""):
    gaps = gaps if gaps is not None else [60.0] * (len(segs) - 1)
    times = np.concatenate([[T0], T0 + np.cumsum(gaps)]) if segs else []
    return Trajectory([(s, float(t)) for s, t in zip(segs, times)], tid)


def crafted_ten():
    """Ten trajectories on a 12-segment chain: three violate one preprocessing rule each."""
    return [
        tr([0, 1, 2, 3, 4], tid="ok-min-length"),
        tr([0, 1, 2, 3], tid="short"),
        tr([1, 2, 3, 4, 5, 6]),
        tr([2, 3, 4, 5, 2], tid="loop"),
        tr([3, 4, 5, 6, 7], [60, 60, 900, 60], tid="ok-15-min"),
        tr([3, 4, 5, 6, 7], [60, 60, 960, 60], tid="gap"),
        tr(list(range(12))),
        tr([5, 6, 7, 8, 9]),
        tr([6, 7, 8, 9, 10, 11]),
        tr([0, 1, 2, 3, 4, 5, 6, 7]),
    ]


def test_crafted_fixture_rejects_exactly_three():
    trajs = crafted_ten()
    kept, report = filter_trajectories(trajs, chain_net(12))
    assert len(trajs) == 10
    assert [rejection_reason(t) for t in trajs] == [None, "too_short", None, "loop", None, "long_gap", None, None, None, None]
    assert report == {"kept": 7, "too_short": 1, "loop": 1, "long_gap": 1}
    assert {"ok-min-length", "ok-15-min"} <= {t.id for t in kept}


def test_structural_rejections():
    net = chain_net(6)
    assert rejection_reason(tr([0, 1, 2, 3, 4], [60, -5, 60, 60])) == "non_monotonic_time"
    assert rejection_reason(tr([0, 1, 2, 4, 5]), net) == "unreachable_step"
    assert rejection_reason(tr([2, 3, 4, 5, 9]), net) == "unknown_segment"
    # a non-reachable intersection record does not count as a successor
    assert rejection_reason(tr([0, 1, 2, 3, 4]), make_net(5, [(0, 1), (1, 2), (2, 3, False), (3, 4)])) == "unreachable_step"


@given(st.integers(0, 5000))
def test_split_sizes_respect_ratios(n):
    a, b, c = split_sizes(n)
    assert a + b + c == n
    for got, share in zip((a, b, c), (0.7, 0.1, 0.2)):
        assert abs(got - share * n) <= 1.0
        assert got >= 0


def test_split_is_a_seeded_permutation():
    trajs = [tr([i, i + 1], tid=str(i)) for i in range(50)]
    a1, b1, c1 = split_dataset(trajs, seed=3)
    a2, b2, c2 = split_dataset(trajs, seed=3)
    assert [t.id for t in a1 + b1 + c1] == [t.id for t in a2 + b2 + c2]
    assert sorted(t.id for t in a1 + b1 + c1) == sorted(t.id for t in trajs)
    assert (len(a1), len(b1), len(c1)) == (35, 5, 10)
    assert [t.id for t in split_dataset(trajs, seed=4)[0]] != [t.id for t in a1]


def test_trajectory_round_trip(tmp_path):
    trajs = crafted_ten()
    write_trajectories(trajs, tmp_path / "t.jsonl")
    back = read_trajectories(tmp_path / "t.jsonl")
    assert [(t.id, t.points) for t in back] == [(t.id, t.points) for t in trajs]


@pytest.mark.parametrize(
    "line",
    ['{"id": "x"}', "not json", '{"points": [[1]]}', '{"points": []}', '{"points": [["a", 3]]}'],
)
def test_malformed_lines_name_the_line(tmp_path, line):
    p = tmp_path / "bad.jsonl"
    p.write_text(json.dumps({"id": "fine", "points": [[0, 1.0]]}) + "\n" + line + "\n")
    with pytest.raises(DataError) as info:
        read_trajectories(p)
    assert info.value.line == 2
    assert "line 2" in str(info.value)


def test_request_round_trip_and_header(tmp_path):
    reqs = [ODRequest(1, 1704067200.5, 9), ODRequest(3, 0.0, 2)]
    write_requests(reqs, tmp_path / "od.csv")
    assert read_requests(tmp_path / "od.csv") == reqs
    (tmp_path / "bad.csv").write_text("org,t,dest\n1,2,3\n")
    with pytest.raises(DataError):
        read_requests(tmp_path / "bad.csv")
    (tmp_path / "bad2.csv").write_text("r_org,t_org,r_dest\n1,x,3\n")
    with pytest.raises(DataError, match="line 2"):
        read_requests(tmp_path / "bad2.csv")


def test_validate_and_split(tmp_path):
    write_trajectories(crafted_ten(), tmp_path / "t.jsonl")
    train, val, test, report = validate_and_split(tmp_path / "t.jsonl", chain_net(12))
    assert len(train) + len(val) + len(test) == 7
    assert (len(train), len(val), len(test)) == split_sizes(7)
    assert report["kept"] == 7


def test_request_of_trajectory():
    t = tr([4, 5, 6])
    assert t.request() == ODRequest(4, T0, 6)
    assert (t.origin, t.destination, len(t)) == (4, 6, 3)
