"""The full generator: road/zone encoders, trajectory encoder and navigator wired together.

``NavModel.loss`` runs teacher-forced batches for training; ``NavModel.policy``
freezes the encoders and scores next segments for search.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import diffcore as dc
from . import navigator as nav
from . import net_encoder as ne
from . import traj_encoder as te
from .data import Trajectory, minutes_of_day
from .roadnet import RoadNetwork, ZonePartition, pairwise_distance


@dataclass
class ModelConfig:
    d: int = 32
    road_layers: int = 2
    zone_layers: int = 2
    traj_layers: int = 2
    n_heads: int = 4
    slope: float = 0.2
    scale_mode: str = "sqrt"  # "sqrt" -> 1/sqrt(d_k); "literal" -> 1/d_k
    window: int = 64
    disable_rne: bool = False
    disable_traje: bool = False
    disable_nav: bool = False


@dataclass
class Sample:
    """Precomputed teacher-forcing arrays for one trajectory."""

    segs: np.ndarray
    tod: np.ndarray
    dist: np.ndarray
    dt: np.ndarray
    dest: int
    cand: np.ndarray
    cand_step: np.ndarray
    true_pos: np.ndarray
    dhat: np.ndarray
    phihat: np.ndarray
    dt_true: np.ndarray

    @property
    def n(self) -> int:
        return len(self.segs)


class DataConsistencyError(ValueError):
    """A trajectory step is not a reachable transition."""


def prefix_arrays(net: RoadNetwork, segs: Sequence[int], times: np.ndarray):
    segs = np.asarray(segs, dtype=np.int64)
    minutes = (times - times[0]) / 60.0
    return segs, minutes_of_day(times), pairwise_distance(net, segs), te.pairwise_intervals(minutes)


def prepare_sample(net: RoadNetwork, traj: Trajectory, dest: int | None = None) -> Sample:
    segs, tod, dist, dt = prefix_arrays(net, traj.segments, traj.times)
    dest = traj.destination if dest is None else dest
    times = traj.times
    cand, step, true_pos, dh, ph = [], [], [], [], []
    offset = 0
    for i in range(len(segs) - 1):
        c = net.successors(int(segs[i]))
        nxt = int(segs[i + 1])
        if nxt not in c:
            raise DataConsistencyError(f"trajectory {traj.id}: {nxt} is not reachable from {segs[i]}")
        dhat, phihat = nav.normalized_metrics(net, c, dest)
        cand.extend(c)
        step.extend([i] * len(c))
        true_pos.append(offset + c.index(nxt))
        dh.append(dhat)
        ph.append(phihat)
        offset += len(c)
    dt_true = np.diff(times) / 60.0
    return Sample(
        segs=segs,
        tod=tod,
        dist=dist,
        dt=dt,
        dest=int(dest),
        cand=np.asarray(cand, dtype=np.int64),
        cand_step=np.asarray(step, dtype=np.int64),
        true_pos=np.asarray(true_pos, dtype=np.int64),
        dhat=np.concatenate(dh) if dh else np.zeros(0),
        phihat=np.concatenate(ph) if ph else np.zeros(0),
        dt_true=dt_true,
    )


@dataclass
class Batch:
    lengths: np.ndarray
    segs: np.ndarray
    tod: np.ndarray
    dist: np.ndarray
    dt: np.ndarray
    state_flat: np.ndarray  # index into B*L
    state_dest: np.ndarray
    next_seg: np.ndarray
    dt_true: np.ndarray
    weights: np.ndarray
    cand: np.ndarray
    cand_state: np.ndarray
    dhat: np.ndarray
    phihat: np.ndarray
    true_pos: np.ndarray

    @property
    def n_states(self) -> int:
        return len(self.state_flat)


def collate(samples: Sequence[Sample]) -> Batch:
    """Pad to the longest trajectory; each trajectory's steps are weighted 1/(n-1)/B."""
    B = len(samples)
    L = max(s.n for s in samples)
    segs = np.zeros((B, L), dtype=np.int64)
    tod = np.zeros((B, L))
    dist = np.zeros((B, L, L))
    dt = np.zeros((B, L, L))
    lengths = np.array([s.n for s in samples])
    sf, sd, ns, dtt, w, cand, cs, dh, ph, tp = ([] for _ in range(10))
    s_off = c_off = 0
    for b, s in enumerate(samples):
        n = s.n
        segs[b, :n] = s.segs
        tod[b, :n] = s.tod
        dist[b, :n, :n] = s.dist
        dt[b, :n, :n] = s.dt
        steps = n - 1
        sf.append(b * L + np.arange(steps))
        sd.append(np.full(steps, s.dest))
        ns.append(s.segs[1:])
        dtt.append(s.dt_true)
        w.append(np.full(steps, 1.0 / (steps * B)))
        cand.append(s.cand)
        cs.append(s.cand_step + s_off)
        dh.append(s.dhat)
        ph.append(s.phihat)
        tp.append(s.true_pos + c_off)
        s_off += steps
        c_off += len(s.cand)
    cat = np.concatenate
    return Batch(
        lengths, segs, tod, dist, dt,
        cat(sf).astype(np.int64), cat(sd).astype(np.int64), cat(ns).astype(np.int64),
        cat(dtt), cat(w), cat(cand).astype(np.int64), cat(cs).astype(np.int64),
        cat(dh), cat(ph), cat(tp).astype(np.int64),
    )


class NavModel:
    def __init__(self, net: RoadNetwork, partition: ZonePartition, config: ModelConfig | None = None, seed: int = 0, n_types: int | None = None):
        self.net = net
        self.partition = partition
        self.config = config or ModelConfig()
        self.seed = seed
        c = self.config
        self.feats = ne.RoadFeatures.from_network(net, n_types)
        flow = partition.flow if partition.flow is not None else np.zeros((partition.k, partition.k))
        self.flow = np.asarray(flow, dtype=np.float64)
        self.A_norm = ne.normalized_flow(self.flow, partition.k)
        self.zone_of = np.asarray(partition.zone_of, dtype=np.int64)
        self.store = dc.ParamStore()
        rng = np.random.default_rng(seed)
        if c.disable_rne:
            self.store.add("plain.road", dc.embedding_init(rng, len(net), c.d))
            self.store.add("plain.zone", dc.embedding_init(rng, partition.k, c.d))
        else:
            ne.init_road_params(self.store, rng, len(net), self.feats.n_types, c.d, c.road_layers)
            ne.init_zone_params(self.store, rng, partition.k, c.d, c.zone_layers)
        if c.disable_traje:
            te.init_traj_params(self.store, rng, c.d, 0, c.n_heads)
            self.store.add("plain.traj_proj", dc.xavier_uniform(rng, 2 * c.d, 2 * c.d))
        else:
            te.init_traj_params(self.store, rng, c.d, c.traj_layers, c.n_heads)
        nav.init_nav_params(self.store, rng, c.d, with_metric=not c.disable_nav)

    # -- pieces -----------------------------------------------------------

    def encode_network(self) -> tuple[dc.Tensor, dc.Tensor]:
        c = self.config
        if c.disable_rne:
            return self.store["plain.road"], self.store["plain.zone"]
        V = ne.encode_roads(self.store, self.feats, c.road_layers, c.slope)
        Z = ne.encode_zones(self.store, self.A_norm, c.zone_layers)
        return V, Z

    def encode_points(self, V, Z, segs, tod, dist, dt, lengths) -> dc.Tensor:
        c = self.config
        vr = dc.take(V, segs)
        zr = dc.take(Z, self.zone_of[segs])
        x = te.point_representation(self.store, vr, zr, tod)
        if c.disable_traje:
            return dc.matmul(x, self.store["plain.traj_proj"])
        return te.encode_trajectory(self.store, x, dist, dt, lengths, c.traj_layers, c.n_heads, c.scale_mode)

    def _query_key(self, V, Z, tau_s, state_dest, cand, dhat, phihat):
        d = self.config.d
        if self.config.disable_nav:
            zq = dc.Tensor(np.zeros((len(state_dest), d)))
            h = dc.Tensor(np.zeros((len(cand), 2 * d)))
        else:
            zq = dc.take(Z, self.zone_of[state_dest])
            h = nav.metric_vectors(self.store, dhat, phihat)
        return dc.concat([tau_s, zq], axis=1), dc.concat([dc.take(V, cand), h], axis=1)

    # -- training ---------------------------------------------------------

    def loss(self, batch: Batch, encoded=None):
        """Weighted NLL + absolute interval error. Returns (loss, nll-part, interval-part)."""
        V, Z = encoded if encoded is not None else self.encode_network()
        B, L = batch.segs.shape
        tau = self.encode_points(V, Z, batch.segs, batch.tod, batch.dist, batch.dt, batch.lengths)
        tau_s = dc.take(dc.reshape(tau, (B * L, -1)), batch.state_flat)
        query, key = self._query_key(V, Z, tau_s, batch.state_dest, batch.cand, batch.dhat, batch.phihat)
        logits = nav.candidate_logits(self.store, query, key, batch.cand_state)
        logp = dc.segment_log_softmax(logits, batch.cand_state, batch.n_states)
        nll = dc.scale(dc.take(logp, batch.true_pos), -1.0)
        dt_hat = nav.predict_time_interval(self.store, tau_s, dc.take(V, batch.next_seg))
        lt = dc.abs_(dt_hat - batch.dt_true)
        w = dc.Tensor(batch.weights)
        lr_part = dc.sum_(dc.mul(w, nll))
        lt_part = dc.sum_(dc.mul(w, lt))
        return lr_part + lt_part, float(lr_part.data), float(lt_part.data)

    def step_loss(self, traj: Trajectory, r_dest: int | None = None) -> dc.Tensor:
        """Mean over the n-1 steps of -log P(true next) + |dt_hat - dt|."""
        if len(traj) < 2:
            raise ValueError("step_loss needs at least two points")
        return self.loss(collate([prepare_sample(self.net, traj, r_dest)]))[0]

    # -- inference --------------------------------------------------------

    def policy(self) -> "ModelPolicy":
        return ModelPolicy(self)

    # -- persistence ------------------------------------------------------

    def save(self, path: str | Path, extra_meta: dict | None = None) -> None:
        arrays = self.store.snapshot()
        arrays["buffer.zone_flow"] = self.flow
        arrays["buffer.zone_of"] = self.zone_of.astype(np.float64)
        meta = {
            "config": asdict(self.config),
            "n_segments": len(self.net),
            "k": int(self.partition.k),
            "n_types": int(self.feats.n_types),
            "seed": self.seed,
        }
        meta.update(extra_meta or {})
        dc.save_checkpoint(path, arrays, meta)

    @classmethod
    def load(cls, path: str | Path, net: RoadNetwork) -> "NavModel":
        arrays, meta = dc.load_checkpoint(path)
        if meta.get("n_segments") != len(net):
            raise ValueError(f"checkpoint was trained on {meta.get('n_segments')} segments, network has {len(net)}")
        zone_of = arrays.pop("buffer.zone_of").astype(np.int64)
        flow = arrays.pop("buffer.zone_flow")
        part = ZonePartition(int(meta["k"]), zone_of, flow)
        model = cls(net, part, ModelConfig(**meta["config"]), seed=meta.get("seed", 0), n_types=meta.get("n_types"))
        model.store.load_snapshot(arrays)
        return model


class ModelPolicy:
    """Frozen scorer: P(next | prefix, destination) and interval for each candidate."""

    def __init__(self, model: NavModel):
        self.model = model
        with dc.no_grad():
            V, Z = model.encode_network()
        self.V, self.Z = V.data.copy(), Z.data.copy()
        self.window = model.config.window

    def tau_last(self, segs: Sequence[int], times: Sequence[float]) -> np.ndarray:
        segs = list(segs)[-self.window :]
        times = np.asarray(times, dtype=np.float64)[-self.window :]
        s, tod, dist, dt = prefix_arrays(self.model.net, segs, times)
        with dc.no_grad():
            tau = self.model.encode_points(
                dc.Tensor(self.V), dc.Tensor(self.Z), s[None], tod[None], dist[None], dt[None], np.array([len(s)])
            )
        return tau.data[0, -1]

    def score(self, prefix: Sequence[tuple[int, float]], r_dest: int):
        """Returns (candidates, probabilities, intervals in minutes) for the prefix's last segment."""
        r = prefix[-1][0]
        cands = self.model.net.successors(r)
        if not cands:
            return [], np.zeros(0), np.zeros(0)
        tau = self.tau_last([p[0] for p in prefix], [p[1] for p in prefix])
        scores = nav.next_segment_distribution(
            self.model.store, tau, self.Z[self.model.zone_of[r_dest]], self.V, self.model.net, r, r_dest,
            use_destination=not self.model.config.disable_nav,
        )
        return (
            [c.candidate for c in scores],
            np.array([c.probability for c in scores]),
            np.array([c.dt_minutes for c in scores]),
        )
