"""Road-level (edge-featured graph attention) and zone-level (flow GCN) encoders."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .roadnet import RoadNetwork

N_LENGTH_BUCKETS = 32
N_COORD_BUCKETS = 64
N_ANGLE_BUCKETS = 36


def bucketize(values: np.ndarray, edges: np.ndarray) -> np.ndarray:
    """Bins are (e_k, e_k+1]; the lowest edge itself falls in bin 0.

    A value sitting exactly on an interior edge goes to the lower bin.
    """
    idx = np.searchsorted(edges, values, side="left") - 1
    return np.clip(idx, 0, len(edges) - 2)


def length_edges(lengths: np.ndarray, n: int = N_LENGTH_BUCKETS) -> np.ndarray:
    lo, hi = float(lengths.min()), float(lengths.max())
    if hi <= lo:
        hi = lo * 1.0001 + 1e-9
    return np.geomspace(lo, hi, n + 1)


def uniform_edges(values: np.ndarray, n: int = N_COORD_BUCKETS) -> np.ndarray:
    lo, hi = float(values.min()), float(values.max())
    if hi <= lo:
        hi = lo + 1e-9
    return np.linspace(lo, hi, n + 1)


def angle_bucket(angle) -> np.ndarray:
    """36 uniform buckets over [0, pi]; pi itself clamps into the last bucket."""
    b = np.floor(N_ANGLE_BUCKETS * np.asarray(angle, dtype=np.float64) / np.pi).astype(np.int64)
    return np.clip(b, 0, N_ANGLE_BUCKETS - 1)


@dataclass
class RoadFeatures:
    """Integer features of a network, computed once."""

    n: int
    len_idx: np.ndarray
    type_idx: np.ndarray
    lon_idx: np.ndarray
    lat_idx: np.ndarray
    n_types: int
    # attention edges (receiver i gathers from neighbour j), self loops included
    recv: np.ndarray
    nbr: np.ndarray
    reach_idx: np.ndarray
    angle_idx: np.ndarray

    @classmethod
    def from_network(cls, net: RoadNetwork, n_types: int | None = None) -> "RoadFeatures":
        n = len(net)
        rt = net.road_types
        if n_types is None:
            n_types = int(rt.max()) + 1
        # neighbourhood is taken in both directions; a reverse-only pair reuses the record's features
        feats: dict[tuple[int, int], tuple[int, float]] = {}
        for e in net.intersections:
            if e.src != e.dst:
                feats[(e.src, e.dst)] = (int(e.reachable), e.angle)
        for e in net.intersections:
            if e.src != e.dst:
                feats.setdefault((e.dst, e.src), (int(e.reachable), e.angle))
        for i in range(n):
            feats[(i, i)] = (1, 0.0)
        keys = sorted(feats)
        recv = np.array([k[0] for k in keys], dtype=np.int64)
        nbr = np.array([k[1] for k in keys], dtype=np.int64)
        reach = np.array([feats[k][0] for k in keys], dtype=np.int64)
        ang = angle_bucket(np.array([feats[k][1] for k in keys]))
        return cls(
            n=n,
            len_idx=bucketize(net.lengths, length_edges(net.lengths)),
            type_idx=np.clip(rt, 0, n_types - 1),
            lon_idx=bucketize(net.lon, uniform_edges(net.lon)),
            lat_idx=bucketize(net.lat, uniform_edges(net.lat)),
            n_types=n_types,
            recv=recv,
            nbr=nbr,
            reach_idx=reach,
            angle_idx=ang,
        )


def init_road_params(store: dc.ParamStore, rng, n: int, n_types: int, d: int, n_layers: int, prefix: str = "rne.road") -> None:
    if d % 8:
        raise ValueError(f"embedding width d={d} must be divisible by 8")
    h, e = d // 2, d // 8
    store.add(f"{prefix}.id", dc.embedding_init(rng, n, h))
    store.add(f"{prefix}.len", dc.embedding_init(rng, N_LENGTH_BUCKETS, e))
    store.add(f"{prefix}.type", dc.embedding_init(rng, max(n_types, 1), e))
    store.add(f"{prefix}.lon", dc.embedding_init(rng, N_COORD_BUCKETS, e))
    store.add(f"{prefix}.lat", dc.embedding_init(rng, N_COORD_BUCKETS, e))
    store.add(f"{prefix}.reach", dc.embedding_init(rng, 2, h))
    store.add(f"{prefix}.angle", dc.embedding_init(rng, N_ANGLE_BUCKETS, h))
    for l in range(n_layers):
        store.add(f"{prefix}.gat{l}.theta_s", dc.xavier_uniform(rng, d, d))
        store.add(f"{prefix}.gat{l}.theta_t", dc.xavier_uniform(rng, d, d))
        store.add(f"{prefix}.gat{l}.a", dc.xavier_uniform(rng, d, 1, shape=(d,)))


def init_zone_params(store: dc.ParamStore, rng, k: int, d: int, n_layers: int, prefix: str = "rne.zone") -> None:
    store.add(f"{prefix}.id", dc.embedding_init(rng, k, d))
    for l in range(n_layers):
        store.add(f"{prefix}.gcn{l}.theta", dc.xavier_uniform(rng, d, d))


def road_embedding(store: dc.ParamStore, feats: RoadFeatures, prefix: str = "rne.road") -> dc.Tensor:
    """|V| x d matrix: ID (d/2) | length | type | lon | lat (d/8 each)."""
    return dc.concat(
        [
            dc.take(store[f"{prefix}.id"], np.arange(feats.n)),
            dc.take(store[f"{prefix}.len"], feats.len_idx),
            dc.take(store[f"{prefix}.type"], feats.type_idx),
            dc.take(store[f"{prefix}.lon"], feats.lon_idx),
            dc.take(store[f"{prefix}.lat"], feats.lat_idx),
        ],
        axis=1,
    )


def intersection_embedding(store: dc.ParamStore, reach_idx, angle_idx, prefix: str = "rne.road") -> dc.Tensor:
    return dc.concat([dc.take(store[f"{prefix}.reach"], reach_idx), dc.take(store[f"{prefix}.angle"], angle_idx)], axis=-1)


def gat_layer(V, E, recv, nbr, n, theta_s, theta_t, a, slope: float = 0.2, return_attention: bool = False):
    """One edge-featured attention layer.

    score_ij = LeakyReLU(v_i Ts + v_j Tt + e_ij) . a, softmax over j in N(i) u {i},
    out_i = sum_j alpha_ij v_j Tt.
    """
    hs = dc.matmul(V, theta_s)
    ht = dc.matmul(V, theta_t)
    ht_j = dc.take(ht, nbr)
    z = dc.leaky_relu(dc.take(hs, recv) + ht_j + E, slope)
    alpha = dc.segment_softmax(dc.matmul(z, a), recv, n)
    out = dc.segment_sum(dc.mul(dc.reshape(alpha, (-1, 1)), ht_j), recv, n)
    if return_attention:
        return out, alpha
    return out


def normalized_flow(F: np.ndarray | None, k: int) -> np.ndarray:
    """D^-1/2 (F/max F + I) D^-1/2, with F_hat = I when F has no mass."""
    if F is None or F.size == 0 or float(np.max(F)) <= 0:
        Fh = np.eye(k)
    else:
        Fh = F / float(np.max(F)) + np.eye(k)
    deg = Fh.sum(axis=1)
    dinv = 1.0 / np.sqrt(deg)
    return dinv[:, None] * Fh * dinv[None, :]


def zone_gcn_layer(A_norm: np.ndarray, Z, theta) -> dc.Tensor:
    return dc.matmul(dc.matmul(dc.Tensor(A_norm), Z), theta)


def encode_roads(store: dc.ParamStore, feats: RoadFeatures, n_layers: int, slope: float = 0.2, prefix: str = "rne.road") -> dc.Tensor:
    V = road_embedding(store, feats, prefix)
    E = intersection_embedding(store, feats.reach_idx, feats.angle_idx, prefix)
    for l in range(n_layers):
        V = gat_layer(
            V, E, feats.recv, feats.nbr, feats.n,
            store[f"{prefix}.gat{l}.theta_s"], store[f"{prefix}.gat{l}.theta_t"], store[f"{prefix}.gat{l}.a"],
            slope,
        )
    return V


def encode_zones(store: dc.ParamStore, A_norm: np.ndarray, n_layers: int, prefix: str = "rne.zone") -> dc.Tensor:
    Z = store[f"{prefix}.id"]
    for l in range(n_layers):
        Z = zone_gcn_layer(A_norm, Z, store[f"{prefix}.gcn{l}.theta"])
    return Z
