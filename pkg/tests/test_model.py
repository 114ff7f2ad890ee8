import math

import numpy as np
import pytest

from helpers import chain_net, make_net
from navtraj import diffcore as dc
from navtraj.data import Trajectory
from navtraj.model import DataConsistencyError, NavModel, ModelConfig, collate, prepare_sample
from navtraj.roadnet import ZonePartition, partition_zones, zone_flow_matrix

R_KM = 6371.0088
TINY = ModelConfig(d=8, road_layers=1, zone_layers=1, traj_layers=1, n_heads=2)


def ring_net(n=12):
    """n segments on a circle, each feeding the next two, plus one non-reachable back-reference."""
    ang = [2 * math.pi * i / n for i in range(n)]
    coords = [(116.3 + 0.01 * math.cos(a), 39.9 + 0.01 * math.sin(a)) for a in ang]
    edges = [(i, (i + 1) % n, True, 0.3) for i in range(n)] + [(i, (i + 2) % n, True, 0.9) for i in range(n)]
    edges.append((3, 2, False, math.pi))
    lengths = [100.0 + 37.0 * i for i in range(n)]
    types = [i % 2 for i in range(n)]
    return make_net(n, edges, coords=coords, lengths=lengths, types=types)


def tiny_model(net, config=TINY, seed=0, k=3, trajs=()):
    part = partition_zones(net, k, seed=0)
    part = part.with_flow(zone_flow_matrix(part, trajs))
    return NavModel(net, part, config, seed=seed)


def traj_of(segs, t0=1704096000.0, step=75.0):
    return Trajectory([(s, t0 + step * i + 7.0 * (i % 2)) for i, s in enumerate(segs)])


# -- an independent numpy forward pass -----------------------------------------------


def _gelu(x):
    return x / (1.0 + np.exp(-1.702 * x))


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _ln(x, g, b):
    mu = x.mean()
    var = ((x - mu) ** 2).mean()
    return (x - mu) / math.sqrt(var + 1e-5) * g + b


def _dist_km(lon1, lat1, lon2, lat2):
    def vec(lon, lat):
        lon, lat = math.radians(lon), math.radians(lat)
        return np.array([math.cos(lat) * math.cos(lon), math.cos(lat) * math.sin(lon), math.sin(lat)])

    chord = np.linalg.norm(vec(lon1, lat1) - vec(lon2, lat2))
    return 2 * R_KM * math.asin(min(1.0, chord / 2))


def _bearing(lon1, lat1, lon2, lat2):
    l1, p1, l2, p2 = map(math.radians, (lon1, lat1, lon2, lat2))
    y = math.sin(l2 - l1) * math.cos(p2)
    x = math.cos(p1) * math.sin(p2) - math.sin(p1) * math.cos(p2) * math.cos(l2 - l1)
    return math.atan2(y, x) % (2 * math.pi)


def _fold(a):
    a = abs(a) % (2 * math.pi)
    return min(a, 2 * math.pi - a)


def _bucket(v, edges):
    for k in range(len(edges) - 1):
        if v <= edges[k + 1]:
            return k
    return len(edges) - 2


def oracle_step_loss(model, traj):
    """Scalar loop-by-loop evaluation of the training objective for one trajectory."""
    P = {k: t.data for k, t in model.store.items()}
    net, c = model.net, model.config
    n, d, H = len(net), c.d, c.n_heads
    lon, lat = net.lon, net.lat

    # road features and embedding
    len_edges = np.geomspace(net.lengths.min(), net.lengths.max(), 33)
    lon_edges = np.linspace(lon.min(), lon.max(), 65)
    lat_edges = np.linspace(lat.min(), lat.max(), 65)
    V = np.stack([
        np.concatenate([
            P["rne.road.id"][i],
            P["rne.road.len"][_bucket(net.lengths[i], len_edges)],
            P["rne.road.type"][net.road_types[i]],
            P["rne.road.lon"][_bucket(lon[i], lon_edges)],
            P["rne.road.lat"][_bucket(lat[i], lat_edges)],
        ])
        for i in range(n)
    ])
    records = {(e.src, e.dst): (int(e.reachable), e.angle) for e in net.intersections}
    nbrs = {i: {i: (1, 0.0)} for i in range(n)}
    for (a, b), f in records.items():
        nbrs[a][b] = f
    for (a, b), f in records.items():
        nbrs[b].setdefault(a, f)
    for l in range(c.road_layers):
        ts, tt, av = P[f"rne.road.gat{l}.theta_s"], P[f"rne.road.gat{l}.theta_t"], P[f"rne.road.gat{l}.a"]
        out = np.zeros_like(V)
        for i in range(n):
            js = sorted(nbrs[i])
            s = []
            for j in js:
                reach, ang = nbrs[i][j]
                e = np.concatenate([P["rne.road.reach"][reach], P["rne.road.angle"][min(int(36 * ang / math.pi), 35)]])
                z = V[i] @ ts + V[j] @ tt + e
                s.append(np.where(z > 0, z, 0.2 * z) @ av)
            w = np.exp(np.array(s) - max(s))
            w /= w.sum()
            out[i] = sum(wk * (V[j] @ tt) for wk, j in zip(w, js))
        V = out

    # zones
    k = model.partition.k
    F = model.flow
    Fh = (F / F.max() if F.max() > 0 else np.zeros_like(F)) + np.eye(k)
    Dm = np.diag(1 / np.sqrt(Fh.sum(axis=1)))
    Z = P["rne.zone.id"]
    for l in range(c.zone_layers):
        Z = Dm @ Fh @ Dm @ Z @ P[f"rne.zone.gcn{l}.theta"]
    zone = model.partition.zone_of

    # points
    segs, times = traj.segments, traj.times
    L = len(segs)
    omega = P["traje.omega"]
    X = []
    for r, t in zip(segs, times):
        v, zr = V[r], Z[zone[r]]
        g = _sigmoid(_gelu(np.concatenate([v, zr]) @ P["traje.gate.w1"] + P["traje.gate.b1"]) @ P["traje.gate.w2"] + P["traje.gate.b2"])
        tod = (t % 86400) / 60
        temporal = math.sqrt(1 / (2 * d)) * np.concatenate([np.cos(omega * tod), np.sin(omega * tod)])
        X.append(np.concatenate([v + g * zr, temporal]))
    X = np.array(X)
    dist = np.array([[_dist_km(lon[a], lat[a], lon[b], lat[b]) if a != b else 0.0 for b in segs] for a in segs])
    mins = (times - times[0]) / 60
    D2, dk = 2 * d, 2 * d // H
    for l in range(c.traj_layers):
        p = f"traje.l{l}"
        h = np.array([_ln(x, P[f"{p}.ln1_g"], P[f"{p}.ln1_b"]) for x in X])
        q, kk, vv = h @ P[f"{p}.wq"], h @ P[f"{p}.wk"], h @ P[f"{p}.wv"]
        att = np.zeros((L, D2))
        for hd in range(H):
            sl = slice(hd * dk, (hd + 1) * dk)
            for i in range(L):
                s, vals = [], []
                for j in range(i + 1):
                    dt_ij = mins[i] - mins[j]
                    ak = np.concatenate([dist[i, j] * P[f"{p}.rel_dk"][hd], dt_ij * P[f"{p}.rel_tk"][hd]])
                    avec = np.concatenate([dist[i, j] * P[f"{p}.rel_dv"][hd], dt_ij * P[f"{p}.rel_tv"][hd]])
                    s.append(q[i, sl] @ (kk[j, sl] + ak) / math.sqrt(dk))
                    vals.append(vv[j, sl] + avec)
                w = np.exp(np.array(s) - max(s))
                w /= w.sum()
                att[i, sl] = sum(wj * vj for wj, vj in zip(w, vals))
        X = X + att
        h = np.array([_ln(x, P[f"{p}.ln2_g"], P[f"{p}.ln2_b"]) for x in X])
        X = X + _gelu(h @ P[f"{p}.ff_w1"] + P[f"{p}.ff_b1"]) @ P[f"{p}.ff_w2"] + P[f"{p}.ff_b2"]
    tau = np.array([_ln(x, P["traje.lnf_g"], P["traje.lnf_b"]) for x in X])

    # navigator and interval head
    dest = segs[-1]
    total = 0.0
    for i in range(L - 1):
        cands = net.successors(segs[i])
        dd = [0.0 if cc == dest else _dist_km(lon[cc], lat[cc], lon[dest], lat[dest]) for cc in cands]
        logits = []
        for cc, dc_km in zip(cands, dd):
            same = lon[cc] == lon[dest] and lat[cc] == lat[dest]
            phi = 0.0 if same else _fold(_bearing(lon[cc], lat[cc], lon[dest], lat[dest]) - net.headings[cc])
            hvec = np.concatenate([math.log1p(dc_km - min(dd)) * P["nav.theta_d"], phi / math.pi * P["nav.theta_phi"]])
            qv = np.concatenate([tau[i], Z[zone[dest]]]) @ P["nav.w_q"]
            kv = np.concatenate([V[cc], hvec]) @ P["nav.w_k"]
            logits.append(np.tanh(qv + kv) @ P["nav.w_v"])
        logits = np.array(logits)
        logp = logits - logits.max() - math.log(np.exp(logits - logits.max()).sum())
        nll = -logp[cands.index(segs[i + 1])]
        hid = _gelu(np.concatenate([tau[i], V[segs[i + 1]]]) @ P["nav.time.w1"] + P["nav.time.b1"])
        dt_hat = float(np.logaddexp(0.0, hid @ P["nav.time.w2"] + P["nav.time.b2"]))
        total += nll + abs(dt_hat - (times[i + 1] - times[i]) / 60)
    return total / (L - 1)


def test_step_loss_matches_independent_oracle():
    net = ring_net()
    trajs = [traj_of([0, 1, 3, 4, 6]), traj_of([5, 7, 8, 9])]
    model = tiny_model(net, trajs=trajs, seed=3)
    for t in trajs + [traj_of([2, 3, 5])]:
        assert float(model.step_loss(t).data) == pytest.approx(oracle_step_loss(model, t), abs=1e-10)


def test_batched_loss_is_mean_of_step_losses():
    net = ring_net()
    trajs = [traj_of([0, 1, 3, 4, 6]), traj_of([5, 7, 8]), traj_of([9, 11, 1, 2])]
    model = tiny_model(net, trajs=trajs)
    batch_loss = float(model.loss(collate([prepare_sample(net, t) for t in trajs]))[0].data)
    assert batch_loss == pytest.approx(np.mean([float(model.step_loss(t).data) for t in trajs]), abs=1e-12)


def test_loss_zero_for_certain_successor_and_exact_interval():
    net = chain_net(6)
    model = tiny_model(net, k=2)
    for name in ("nav.time.w1", "nav.time.b1", "nav.time.w2", "nav.time.b2"):
        model.store[name].data[...] = 0.0
    traj = Trajectory([(i, 60 * math.log(2) * i) for i in range(6)])
    assert abs(float(model.step_loss(traj).data)) <= 1e-12


def test_uniform_policy_loss_is_log_candidates(grid4):
    model = tiny_model(grid4, k=4)
    for name in ("nav.w_v", "nav.time.w1", "nav.time.b1", "nav.time.w2", "nav.time.b2"):
        model.store[name].data[...] = 0.0
    segs = [0]
    while len(segs) < 6:
        nxt = [s for s in grid4.successors(segs[-1]) if s not in segs]
        segs.append(nxt[0])
    traj = Trajectory([(s, 60 * math.log(2) * i) for i, s in enumerate(segs)])
    expect = np.mean([math.log(len(grid4.successors(s))) for s in segs[:-1]])
    assert float(model.step_loss(traj).data) == pytest.approx(expect, abs=1e-12)


def test_unreachable_step_rejected():
    net = ring_net()
    with pytest.raises(DataConsistencyError):
        prepare_sample(net, traj_of([0, 5, 6]))


def test_gradient_matches_finite_differences():
    net = ring_net()
    traj = traj_of([0, 2, 3])
    model = tiny_model(net, trajs=[traj], seed=1)
    grads = dc.backward(model.step_loss(traj), model.store)
    rng = np.random.default_rng(0)
    worst = 0.0
    for name, t in model.store.items():
        flat = t.data.reshape(-1)
        for idx in rng.choice(flat.size, size=min(flat.size, 6), replace=False):
            old = flat[idx]
            flat[idx] = old + 1e-5
            fp = float(model.step_loss(traj).data)
            flat[idx] = old - 1e-5
            fm = float(model.step_loss(traj).data)
            flat[idx] = old
            num = (fp - fm) / 2e-5
            ana = grads[name].reshape(-1)[idx]
            worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), 1e-7))
    assert worst < 1e-4


# -- ablations -----------------------------------------------------------------------


def names(model):
    return set(model.store.names())


def test_ablation_parameter_sets():
    net = ring_net()
    full = names(tiny_model(net))
    no_rne = names(tiny_model(net, ModelConfig(**{**TINY.__dict__, "disable_rne": True})))
    no_traje = names(tiny_model(net, ModelConfig(**{**TINY.__dict__, "disable_traje": True})))
    no_nav = names(tiny_model(net, ModelConfig(**{**TINY.__dict__, "disable_nav": True})))
    assert not any(n.startswith("rne.") for n in no_rne) and {"plain.road", "plain.zone"} <= no_rne
    assert not any(n.startswith("traje.l") for n in no_traje) and "plain.traj_proj" in no_traje
    assert full - no_nav == {"nav.theta_d", "nav.theta_phi"}
    assert {n for n in full if n.startswith("rne.")} and {n for n in full if n.startswith("traje.l0")}


def test_every_parameter_receives_gradient():
    net = ring_net()
    trajs = [traj_of([0, 1, 3, 4, 6])]
    for flag in ("", "disable_rne", "disable_traje", "disable_nav"):
        cfg = ModelConfig(**{**TINY.__dict__, **({flag: True} if flag else {})})
        model = tiny_model(net, cfg, trajs=trajs)
        reached = dc.parameters_reached(model.step_loss(trajs[0]), model.store)
        assert reached == names(model), flag


def test_disable_nav_uses_zero_destination_and_metrics():
    net = ring_net()
    cfg = ModelConfig(**{**TINY.__dict__, "disable_nav": True})
    model = tiny_model(net, cfg)
    V, Z = model.encode_network()
    tau = dc.Tensor(np.ones((2, 16)))
    q, key = model._query_key(V, Z, tau, np.array([4, 5]), np.array([1, 2, 3]), np.ones(3), np.ones(3))
    assert not q.data[:, 16:].any()
    assert not key.data[:, 8:].any()


# -- inference and persistence -------------------------------------------------------------


def test_policy_agrees_with_training_path():
    net = ring_net()
    traj = traj_of([0, 1, 3, 5, 6, 8])
    model = tiny_model(net, trajs=[traj], seed=2)
    sample = prepare_sample(net, traj)
    batch = collate([sample])
    V, Z = model.encode_network()
    B, L = batch.segs.shape
    tau = model.encode_points(V, Z, batch.segs, batch.tod, batch.dist, batch.dt, batch.lengths)
    tau_s = dc.take(dc.reshape(tau, (B * L, -1)), batch.state_flat)
    from navtraj import navigator as nav

    q, key = model._query_key(V, Z, tau_s, batch.state_dest, batch.cand, batch.dhat, batch.phihat)
    logp = dc.segment_log_softmax(nav.candidate_logits(model.store, q, key, batch.cand_state), batch.cand_state, batch.n_states).data
    policy = model.policy()
    for i in range(len(traj) - 1):
        cands, probs, dts = policy.score(traj.points[: i + 1], traj.destination)
        rows = batch.cand_state == i
        assert cands == batch.cand[rows].tolist()
        assert np.allclose(probs, np.exp(logp[rows]), atol=1e-12)
        assert np.all(dts > 0)


def test_checkpoint_round_trip_preserves_policy(tmp_path):
    net = ring_net()
    traj = traj_of([0, 1, 3, 5])
    model = tiny_model(net, trajs=[traj], seed=4)
    model.save(tmp_path / "m.ckpt")
    back = NavModel.load(tmp_path / "m.ckpt", net)
    a = model.policy().score(traj.points[:2], 5)
    b = back.policy().score(traj.points[:2], 5)
    assert a[0] == b[0]
    assert np.array_equal(a[1], b[1]) and np.array_equal(a[2], b[2])
    assert np.array_equal(back.zone_of, model.zone_of)


def test_checkpoint_for_other_network_rejected(tmp_path):
    model = tiny_model(ring_net())
    model.save(tmp_path / "m.ckpt")
    with pytest.raises(ValueError):
        NavModel.load(tmp_path / "m.ckpt", ring_net(10))


def test_single_zone_partition_works():
    net = ring_net()
    model = NavModel(net, ZonePartition(1, np.zeros(12, dtype=np.int64)), TINY)
    assert np.isfinite(float(model.step_loss(traj_of([0, 1, 2])).data))
