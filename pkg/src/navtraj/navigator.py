"""Destination-aware scoring of next-segment candidates and travel-time prediction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .roadnet import RoadNetwork, haversine_km, steering_angles

PREFIX = "nav"


class DeadEndError(LookupError):
    """The current segment has no reachable successor."""


@dataclass(frozen=True)
class CandidateScore:
    candidate: int
    logit: float
    probability: float
    dt_minutes: float


def init_nav_params(store: dc.ParamStore, rng, d: int, with_metric: bool = True) -> None:
    store.add(f"{PREFIX}.w_q", dc.xavier_uniform(rng, 3 * d, d))
    store.add(f"{PREFIX}.w_k", dc.xavier_uniform(rng, 3 * d, d))
    store.add(f"{PREFIX}.w_v", dc.xavier_uniform(rng, d, 1, shape=(d,)))
    if with_metric:
        store.add(f"{PREFIX}.theta_d", dc.xavier_uniform(rng, 1, d, shape=(d,)))
        store.add(f"{PREFIX}.theta_phi", dc.xavier_uniform(rng, 1, d, shape=(d,)))
    store.add(f"{PREFIX}.time.w1", dc.xavier_uniform(rng, 3 * d, d))
    store.add(f"{PREFIX}.time.b1", np.zeros(d))
    store.add(f"{PREFIX}.time.w2", dc.xavier_uniform(rng, d, 1, shape=(d,)))
    store.add(f"{PREFIX}.time.b2", np.zeros(()))


def normalized_metrics(net: RoadNetwork, candidates, r_dest: int) -> tuple[np.ndarray, np.ndarray]:
    """(log1p(d - min_d), angle / pi) for each candidate toward the destination.

    Distances are midpoint great-circle km; the angle is between the candidate's
    heading and the bearing from its midpoint to the destination midpoint.
    """
    c = np.asarray(candidates, dtype=np.int64)
    if c.size == 0:
        raise DeadEndError("no candidates")
    d = haversine_km(net.lon[c], net.lat[c], net.lon[r_dest], net.lat[r_dest])
    d = np.where(c == r_dest, 0.0, d)
    dhat = np.log1p(d - d.min())
    phihat = steering_angles(net, c, r_dest) / np.pi
    return dhat, phihat


def metric_vectors(store: dc.ParamStore, dhat, phihat) -> dc.Tensor:
    """h = dhat * theta_d | phihat * theta_phi, one row per candidate."""
    dh = dc.Tensor(np.asarray(dhat, dtype=np.float64)[:, None])
    ph = dc.Tensor(np.asarray(phihat, dtype=np.float64)[:, None])
    return dc.concat([dc.mul(dh, store[f"{PREFIX}.theta_d"]), dc.mul(ph, store[f"{PREFIX}.theta_phi"])], axis=1)


def metric_features(store: dc.ParamStore, net: RoadNetwork, r_c: int, r_dest: int, candidates) -> np.ndarray:
    cands = list(candidates)
    if r_c not in cands:
        raise ValueError(f"candidate {r_c} not in candidate set")
    dhat, phihat = normalized_metrics(net, cands, r_dest)
    with dc.no_grad():
        h = metric_vectors(store, dhat, phihat)
    return h.data[cands.index(r_c)]


def candidate_logits(store: dc.ParamStore, query, key, cand_state: np.ndarray) -> dc.Tensor:
    """p_c = tanh(query W_q + key_c W_k) . w_v.

    ``query`` is (S, 3d) = tau | z_dest per search state; ``key`` is (C, 3d) = v_c | h_c;
    ``cand_state`` maps each candidate row to its state.
    """
    qw = dc.matmul(query, store[f"{PREFIX}.w_q"])
    kw = dc.matmul(key, store[f"{PREFIX}.w_k"])
    return dc.matmul(dc.tanh(dc.take(qw, cand_state) + kw), store[f"{PREFIX}.w_v"])


def predict_time_interval(store: dc.ParamStore, tau, v_c) -> dc.Tensor:
    """Strictly positive interval in minutes: softplus(MLP(tau | v_c))."""
    h = dc.gelu(dc.matmul(dc.concat([tau, v_c], axis=-1), store[f"{PREFIX}.time.w1"]) + store[f"{PREFIX}.time.b1"])
    return dc.softplus(dc.matmul(h, store[f"{PREFIX}.time.w2"]) + store[f"{PREFIX}.time.b2"])


def next_segment_distribution(
    store: dc.ParamStore,
    tau_out: np.ndarray,
    z_dest: np.ndarray,
    V: np.ndarray,
    net: RoadNetwork,
    r_i: int,
    r_dest: int,
    use_destination: bool = True,
) -> list[CandidateScore]:
    """Score every reachable successor of ``r_i`` for one state (inference, no gradient)."""
    cands = net.successors(r_i)
    if not cands:
        raise DeadEndError(f"segment {r_i} has no reachable successor")
    d = V.shape[1]
    with dc.no_grad():
        c = np.asarray(cands)
        if use_destination:
            h = metric_vectors(store, *normalized_metrics(net, c, r_dest)).data
            zq = z_dest
        else:
            h = np.zeros((len(c), 2 * d))
            zq = np.zeros(d)
        query = np.concatenate([tau_out, zq])[None]
        key = np.concatenate([V[c], h], axis=1)
        logits = candidate_logits(store, query, key, np.zeros(len(c), dtype=np.int64)).data
        probs = dc.softmax(logits).data
        dts = predict_time_interval(store, np.repeat(tau_out[None], len(c), axis=0), V[c]).data
    return [CandidateScore(int(ci), float(l), float(p), float(t)) for ci, l, p, t in zip(c, logits, probs, dts)]
