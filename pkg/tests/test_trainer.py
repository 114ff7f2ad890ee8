import math

import numpy as np
import pytest

from test_model import ring_net, traj_of
from navtraj import diffcore as dc
from navtraj.roadnet import partition_zones
from navtraj.synth import GridSpec, SynthPolicy, grid_network, synth_trajectories
from navtraj.trainer import Adam, TrainConfig, TrainReport, clip_global_norm, mean_step_loss, prepare_samples, train

SMALL = dict(d=8, road_layers=1, zone_layers=1, traj_layers=1, n_heads=2)


@pytest.fixture(scope="module")
def small_city():
    net = grid_network(GridSpec(rows=4, cols=4))
    trajs = synth_trajectories(net, 120, SynthPolicy(seed=0))
    return net, partition_zones(net, 4, seed=0), trajs


def test_adam_matches_hand_formula():
    store = dc.ParamStore()
    store.add("w", np.array([1.0, -2.0]))
    opt = Adam(store, lr=0.1)
    g1, g2 = np.array([0.5, -1.0]), np.array([0.2, 0.3])
    opt.step({"w": g1})
    # first step with bias correction is lr * sign(g) up to eps
    assert np.allclose(store["w"].data, [1.0 - 0.1 * 0.5 / (0.5 + 1e-8), -2.0 + 0.1 * 1.0 / (1.0 + 1e-8)], atol=1e-15)
    w1 = store["w"].data.copy()
    opt.step({"w": g2})
    m = 0.9 * (0.1 * g1) + 0.1 * g2
    v = 0.999 * (0.001 * g1**2) + 0.001 * g2**2
    mhat, vhat = m / (1 - 0.9**2), v / (1 - 0.999**2)
    assert np.allclose(store["w"].data, w1 - 0.1 * mhat / (np.sqrt(vhat) + 1e-8), atol=1e-15)


def test_clip_global_norm():
    grads = {"a": np.array([3.0, 0.0]), "b": np.array([[4.0]])}
    norm = clip_global_norm(grads, 1.0)
    assert norm == 5.0
    total = math.sqrt(sum(float((g**2).sum()) for g in grads.values()))
    assert total == pytest.approx(1.0, abs=1e-9)
    assert np.allclose(grads["a"], [0.6, 0.0], atol=1e-9)


def test_clip_leaves_small_gradients_alone():
    grads = {"a": np.array([0.3, 0.4])}
    assert clip_global_norm(grads, 1.0) == pytest.approx(0.5)
    assert grads["a"].tolist() == [0.3, 0.4]


def test_same_seed_same_report(small_city):
    net, part, trajs = small_city
    cfg = TrainConfig(epochs=2, **SMALL)
    _, r1 = train(cfg, net, part, trajs[:60], trajs[60:80])
    _, r2 = train(cfg, net, part, trajs[:60], trajs[60:80])
    assert r1 == r2
    assert len(r1.loss) == len(r1.loss_r) == len(r1.loss_t) == len(r1.val_loss) == 2


def test_loss_parts_add_up(small_city):
    net, part, trajs = small_city
    _, rep = train(TrainConfig(epochs=1, **SMALL), net, part, trajs[:40])
    assert rep.loss[0] == pytest.approx(rep.loss_r[0] + rep.loss_t[0], rel=1e-12)


def test_overfit_single_trajectory():
    net = ring_net(12)
    traj = traj_of([0, 1, 3, 4, 6, 7, 8])
    model, rep = train(TrainConfig(epochs=500, batch_size=1), net, partition_zones(net, 3, seed=0), [traj])
    assert len(rep.loss) == 500
    assert float(model.step_loss(traj).data) < 0.01


@pytest.mark.parametrize("seed", range(5))
def test_training_loss_decreases(small_city, seed):
    net, part, trajs = small_city
    _, rep = train(TrainConfig(epochs=10, seed=seed, **SMALL), net, part, trajs)
    assert rep.loss[-1] < rep.loss[0]


def test_disabled_navigator_still_learns(small_city):
    net, part, trajs = small_city
    _, rep = train(TrainConfig(epochs=10, disable_nav=True, **SMALL), net, part, trajs)
    assert rep.loss[-1] < rep.loss[0]


def test_best_validation_weights_are_kept(small_city):
    net, part, trajs = small_city
    tr, va = trajs[:80], trajs[80:]
    # a large step size makes validation loss bounce, so the best epoch is rarely the last
    model, rep = train(TrainConfig(epochs=6, lr=0.05, **SMALL), net, part, tr, va)
    best = int(np.argmin(rep.val_loss))
    assert rep.best_epoch == best + 1
    assert mean_step_loss(model, prepare_samples(net, va)) == pytest.approx(rep.val_loss[best], rel=1e-12)


def test_step_cap(small_city):
    net, part, trajs = small_city
    _, rep = train(TrainConfig(epochs=50, batch_size=8, **SMALL), net, part, trajs[:40], steps=7)
    # 5 batches per epoch: the cap ends the second epoch early
    assert len(rep.loss) == 2


def test_empty_training_set(small_city):
    net, part, _ = small_city
    with pytest.raises(ValueError):
        train(TrainConfig(**SMALL), net, part, [])


def test_report_csv(tmp_path):
    rep = TrainReport(loss=[1.0, 0.5], loss_r=[0.75, 0.25], loss_t=[0.25, 0.25], val_loss=[0.9, 0.6], best_epoch=2)
    rep.write_csv(tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "epoch,loss,loss_r,loss_t,val_loss"
    assert lines[2] == "2,0.5,0.25,0.25,0.6"
