"""Teacher-forced training with Adam, global-norm clipping and best-validation retention."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .data import Trajectory
from .model import NavModel, ModelConfig, Sample, collate, prepare_sample
from .roadnet import RoadNetwork, ZonePartition, zone_flow_matrix

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    d: int = 32
    road_layers: int = 2
    zone_layers: int = 2
    traj_layers: int = 2
    n_heads: int = 4
    lr: float = 1e-3
    epochs: int = 10
    batch_size: int = 32
    clip: float = 1.0
    seed: int = 0
    scale_mode: str = "sqrt"
    window: int = 64
    disable_rne: bool = False
    disable_traje: bool = False
    disable_nav: bool = False

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            d=self.d,
            road_layers=self.road_layers,
            zone_layers=self.zone_layers,
            traj_layers=self.traj_layers,
            n_heads=self.n_heads,
            scale_mode=self.scale_mode,
            window=self.window,
            disable_rne=self.disable_rne,
            disable_traje=self.disable_traje,
            disable_nav=self.disable_nav,
        )


@dataclass
class TrainReport:
    loss: list[float] = field(default_factory=list)
    loss_r: list[float] = field(default_factory=list)
    loss_t: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int = -1

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "loss", "loss_r", "loss_t", "val_loss"])
            for i, row in enumerate(zip(self.loss, self.loss_r, self.loss_t, self.val_loss), start=1):
                w.writerow([i] + [repr(float(x)) for x in row])


class Adam:
    def __init__(self, store: dc.ParamStore, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.store = store
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(t.data) for k, t in store.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in store.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for k, t in self.store.items():
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            t.data = t.data - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if norm > max_norm:
        s = max_norm / (norm + 1e-12)
        for k in grads:
            grads[k] = grads[k] * s
    return norm


class NonFiniteLoss(FloatingPointError):
    pass


def mean_step_loss(model: NavModel, samples: Sequence[Sample], batch_size: int = 64) -> float:
    """Average per-trajectory step loss without building a graph."""
    if not samples:
        return float("nan")
    total = 0.0
    with dc.no_grad():
        enc = model.encode_network()
        for i in range(0, len(samples), batch_size):
            chunk = samples[i : i + batch_size]
            loss, _, _ = model.loss(collate(chunk), enc)
            total += float(loss.data) * len(chunk)
    return total / len(samples)


def prepare_samples(net: RoadNetwork, trajs: Sequence[Trajectory]) -> list[Sample]:
    return [prepare_sample(net, t) for t in trajs if len(t) >= 2]


def train(
    config: TrainConfig,
    net: RoadNetwork,
    partition: ZonePartition,
    train_set: Sequence[Trajectory],
    val_set: Sequence[Trajectory] = (),
    steps: int | None = None,
    progress=None,
) -> tuple[NavModel, TrainReport]:
    """Fit all parameters; the returned model holds the best-validation weights.

    The zone flow matrix is counted from ``train_set`` when the partition has none.
    ``steps`` caps the number of optimizer steps (overfitting checks).
    """
    if partition.flow is None:
        partition = partition.with_flow(zone_flow_matrix(partition, train_set))
    model = NavModel(net, partition, config.model_config(), seed=config.seed)
    tr = prepare_samples(net, train_set)
    va = prepare_samples(net, val_set)
    if not tr:
        raise ValueError("empty training set")
    opt = Adam(model.store, lr=config.lr)
    rng = np.random.default_rng(config.seed)
    report = TrainReport()
    best = (np.inf, None)
    done = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(tr))
        sums = np.zeros(3)
        count = 0
        for start in range(0, len(order), config.batch_size):
            batch = collate([tr[i] for i in order[start : start + config.batch_size]])
            try:
                loss, lr_part, lt_part = model.loss(batch)
            except dc.NonFiniteError as exc:
                raise NonFiniteLoss(f"epoch {epoch + 1}: {exc}") from exc
            if not np.isfinite(loss.data):
                raise NonFiniteLoss(f"epoch {epoch + 1}: loss is {float(loss.data)}")
            grads = dc.backward(loss, model.store)
            clip_global_norm(grads, config.clip)
            opt.step(grads)
            nb = len(batch.lengths)
            sums += np.array([float(loss.data), lr_part, lt_part]) * nb
            count += nb
            done += 1
            if steps is not None and done >= steps:
                break
        report.loss.append(sums[0] / count)
        report.loss_r.append(sums[1] / count)
        report.loss_t.append(sums[2] / count)
        # without a validation set, score the post-update weights on the training data
        val = mean_step_loss(model, va if va else tr)
        report.val_loss.append(val)
        if val < best[0]:
            best = (val, model.store.snapshot())
            report.best_epoch = epoch + 1
        msg = f"epoch {epoch + 1}/{config.epochs} loss={report.loss[-1]:.4f} (r={report.loss_r[-1]:.4f} t={report.loss_t[-1]:.4f}) val={val:.4f}"
        log.info(msg)
        if progress:
            progress(msg)
        if steps is not None and done >= steps:
            break
    if best[1] is not None:
        model.store.load_snapshot(best[1])
    return model, report
