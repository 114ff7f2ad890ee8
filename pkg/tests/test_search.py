import math
import time

import numpy as np
import pytest

from helpers import chain_net, make_net, random_digraph
from navtraj.data import ODRequest
from navtraj.search import SearchFailure, TablePolicy, default_budget, generate_batch, generate_trajectory


def random_table(rng, net):
    return {r: rng.dirichlet(np.ones(len(net.successors(r)))) for r in range(len(net)) if net.successors(r)}


def dijkstra_oracle(net, probs, org, dest):
    """Textbook label-setting over -log p with (cost, path) keys; returns the path or None."""
    best = {org: (0.0, (org,))}
    done = set()
    while True:
        open_ = [(c, p, r) for r, (c, p) in best.items() if r not in done]
        if not open_:
            return None
        cost, path, r = min(open_)
        if r == dest:
            return list(path)
        done.add(r)
        for c, p in zip(net.successors(r), probs.get(r, [])):
            if p <= 0 or c in done:
                continue
            cand = (cost - math.log(p), path + (c,))
            if c not in best or cand < best[c]:
                best[c] = cand


def path_cost(net, probs, path):
    cost = 0.0
    for a, b in zip(path, path[1:]):
        cost -= math.log(probs[a][net.successors(a).index(b)])
    return cost


def test_origin_is_destination():
    net = chain_net(3)
    traj, stats = generate_trajectory(TablePolicy(net, {}), net, ODRequest(1, 1000.0, 1))
    assert traj.points == [(1, 1000.0)]
    assert stats.pops == 1 and stats.expansions == 0


def test_matches_dijkstra_on_random_graphs():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    reached = 0
    for trial in range(200):
        n = int(rng.integers(2, 51))
        net = random_digraph(rng, n, float(rng.uniform(0.05, 0.3)))
        probs = random_table(rng, net)
        org, dest = (int(x) for x in rng.choice(n, 2, replace=False))
        want = dijkstra_oracle(net, probs, org, dest)
        policy = TablePolicy(net, probs)
        if want is None:
            with pytest.raises(SearchFailure):
                generate_trajectory(policy, net, ODRequest(org, 0.0, dest))
            continue
        traj, _ = generate_trajectory(policy, net, ODRequest(org, 0.0, dest))
        assert traj.segments == want, f"trial {trial}"
        reached += 1
    assert reached > 100
    assert time.perf_counter() - t0 < 60


def stale_net():
    # 0 -> 1 directly (p=0.1) or via 2 (p=0.9 then 1.0); 1 -> 3 is unlikely, so the stale entry for 1 pops first
    net = make_net(4, [(0, 1), (0, 2), (2, 1), (1, 3)])
    probs = {0: np.array([0.1, 0.9]), 2: np.array([1.0]), 1: np.array([0.01])}
    return net, probs


def test_stale_entry_is_skipped():
    net, probs = stale_net()
    traj, stats = generate_trajectory(TablePolicy(net, probs), net, ODRequest(0, 0.0, 3), trace=True)
    assert traj.segments == [0, 2, 1, 3]
    assert [(seg, stale) for _, seg, stale in stats.pop_log] == [(0, False), (2, False), (1, False), (1, True), (3, False)]
    assert stats.stale == 1
    assert stats.pop_log[3][0] == pytest.approx(-math.log(0.1))
    assert stats.expansions == 3


def test_pop_log_and_relaxations_on_random_graphs():
    rng = np.random.default_rng(7)
    for _ in range(30):
        n = int(rng.integers(5, 30))
        net = random_digraph(rng, n, 0.25)
        probs = random_table(rng, net)
        policy = TablePolicy(net, probs, dts=0.5)
        org, dest = (int(x) for x in rng.choice(n, 2, replace=False))
        try:
            traj, stats = generate_trajectory(policy, net, ODRequest(org, 100.0, dest), trace=True)
        except SearchFailure as exc:
            stats, traj = exc.stats, None
        accepted = [c for c, _, stale in stats.pop_log if not stale]
        assert all(a <= b for a, b in zip(accepted, accepted[1:]))
        for seg, phi, prefix in stats.relaxations:
            segs = [s for s, _ in prefix]
            assert segs[0] == org and segs[-1] == seg
            assert path_cost(net, probs, segs) == pytest.approx(phi, abs=1e-12)
        if traj is not None:
            t = traj.times
            assert np.all(np.diff(t) == 30.0)
            for a, b in zip(traj.segments, traj.segments[1:]):
                assert b in net.successors(a)


def test_separate_component_is_unreachable():
    net = make_net(4, [(0, 1), (2, 3)])
    with pytest.raises(SearchFailure, match="heap exhausted"):
        generate_trajectory(TablePolicy(net, {}), net, ODRequest(0, 0.0, 3))


def test_budget_exceeded():
    net = chain_net(10)
    with pytest.raises(SearchFailure, match="budget") as info:
        generate_trajectory(TablePolicy(net, {}), net, ODRequest(0, 0.0, 9), budget=4)
    assert info.value.stats.pops == 4
    assert default_budget(net) == 500


def test_zero_probability_moves_are_never_taken():
    net = make_net(3, [(0, 1), (0, 2), (1, 2)])
    probs = {0: np.array([1.0, 0.0]), 1: np.array([1.0])}
    traj, _ = generate_trajectory(TablePolicy(net, probs), net, ODRequest(0, 0.0, 2))
    assert traj.segments == [0, 1, 2]


def test_invalid_segment():
    net = chain_net(3)
    with pytest.raises(IndexError):
        generate_trajectory(TablePolicy(net, {}), net, ODRequest(0, 0.0, 7))


def test_batch_empty_and_duplicates():
    net = chain_net(5)
    policy = TablePolicy(net, {})
    assert generate_batch(policy, net, []).trajectories == []
    assert generate_batch(policy, net, []).success_rate == 1.0
    req = ODRequest(0, 50.0, 4)
    res = generate_batch(policy, net, [req, req, ODRequest(4, 0.0, 0)])
    assert res.trajectories[0].points == res.trajectories[1].points
    assert res.trajectories[2] is None
    assert [i for i, _, _ in res.failures] == [2]
    assert res.success_rate == pytest.approx(2 / 3)
    assert [t.id for t in res.succeeded] == ["gen-0", "gen-1"]
