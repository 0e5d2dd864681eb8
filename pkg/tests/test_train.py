import json

import numpy as np
import pytest

from structsieve import architect, synth
from structsieve import network as nw
from structsieve import train as tr
from structsieve.data import Dataset
from structsieve.network import Layer, NetworkSpec


def test_losses_and_gradients():
    loss, g = tr.loss_squared(np.array([[1.0, 2.0]]), np.array([[0.5, 2.5]]))
    assert loss[0] == pytest.approx(0.5)
    np.testing.assert_allclose(g, [[-1.0, 1.0]])
    l, g = tr.loss_nll(2, np.array([0.2, 0.5, 0.3]))
    assert l == pytest.approx(-np.log(0.5))
    np.testing.assert_allclose(g, [0.0, -2.0, 0.0])
    l, g = tr.loss_nll(1, np.array([0.0, 1.0]))
    assert l == pytest.approx(-np.log(tr.NLL_FLOOR)) and g[0] == 0.0
    with pytest.raises(ValueError):
        tr.loss_nll(0, np.array([0.5, 0.5]))
    with pytest.raises(ValueError):
        tr.loss_nll(3, np.array([0.5, 0.5]))
    with pytest.raises(ValueError):
        tr.loss_squared(np.ones((1, 2)), np.ones((1, 3)))


def test_config_validation():
    with pytest.raises(ValueError):
        tr.TrainConfig(lr=-1)
    with pytest.raises(ValueError):
        tr.TrainConfig(optimizer="sgd2")
    with pytest.raises(ValueError):
        tr.TrainConfig(lr_decay=0.0)
    with pytest.raises(ValueError):
        tr.TrainConfig.from_dict({"epochs": 3, "learning_rate": 0.1})
    assert tr.TrainConfig.from_dict({"epochs": 3}).epochs == 3


def test_projection_rules():
    net = synth.random_production_net([2, 2, 1], seed=0, tau_range=(0.5, 1.0))
    net.layers[0].rho[:] = [0.4, -0.4]
    th = net.get_theta()
    slots = net.theta_slots()
    wild = th.copy()
    for i, (s, name, j) in enumerate(slots):
        wild[i] = {"beta": -1.0, "rho": 5.0 if (s, j) == (0, 0) else -5e-4, "tau": 3.0, "beta0": -1.0}[name]
    out, k = tr.project(wild, net)
    assert k == wild.size
    for i, (s, name, j) in enumerate(slots):
        if name == "beta":
            assert out[i] == tr.BETA_FLOOR
        elif name == "tau":
            assert out[i] == 1.0
        elif name == "rho" and s == 0:
            # positive rho may not cross zero or exceed one; negative rho stays negative
            assert out[i] == (1.0 if j == 0 else -tr.RHO_GAP)
    ch = synth.random_choice_net(3, 1, seed=0)
    lo, hi = tr.bounds_for(ch, tr.TrainConfig(rho_max=7.0))
    rho_slots = [i for i, (_, n, _) in enumerate(ch.theta_slots()) if n == "rho"]
    assert np.all(lo[rho_slots] == 1.0) and np.all(hi[rho_slots] == 7.0)


def test_output_direction():
    np.testing.assert_allclose(tr.output_direction([[1.0, 3.0], [0.0, 0.0]]), [[0.25, 0.75], [0.5, 0.5]])


def small_production(n=120, seed=0):
    truth = synth.cobb_douglas(0.4, 0.4)
    return synth.sample_production(truth, n, 0.02, seed=seed)


@pytest.mark.parametrize("opt", ["adam", "momentum", "plain", "lbfgs"])
def test_fit_reduces_loss_and_keeps_constraints(opt):
    ds = small_production()
    net = tr.calibrate_scale(architect.build_ces_sieve(2, 3, seed=1), ds)
    cfg = tr.TrainConfig(optimizer=opt, epochs=8, lr=0.02 if opt != "plain" else 0.05, batch_size=32, seed=3)
    res = tr.fit(net, ds, cfg)
    h = res.history
    assert h[-1]["train_loss"] < h[0]["train_loss"]
    assert len(h) <= cfg.epochs + 1 and h[0]["epoch"] == 0
    assert nw.validate(res.net) == []
    for l in res.net.layers:
        assert np.all(l.rho <= 1) and np.all(l.tau <= 1) and np.all(l.beta >= 0)


def test_fit_is_deterministic():
    ds = small_production(80)
    net = architect.build_ces_sieve(2, 2, seed=0)
    cfg = tr.TrainConfig(epochs=3, batch_size=16, seed=5)
    a = tr.fit(net, ds, cfg)
    b = tr.fit(net, ds, cfg)
    assert tr.history_lines(a.history) == tr.history_lines(b.history)
    assert nw.dumps(a.net) == nw.dumps(b.net)


def test_early_stopping_window():
    ds = small_production(80)
    net = architect.build_ces_sieve(2, 2, seed=0)
    res = tr.fit(net, ds, tr.TrainConfig(epochs=50, lr=0.0, window=2, batch_size=40))
    assert len(res.history) == 3  # initial record, then two epochs without improvement


def test_choice_fit_recovers_weight_ratio():
    truth = NetworkSpec("choice", [1, 3], [Layer.create(1, 3, beta=[[1.0, 2.0, 0.5]], rho=1.0,
                                                         frozen={"rho": True, "tau": True, "beta0": True})])
    ds = synth.simulate_choices(truth, n=4000, seed=1)
    start = truth.copy()
    start.layers[0].beta[:] = 1.0
    res = tr.fit(start, ds, tr.TrainConfig(optimizer="lbfgs", epochs=40, val_frac=0.0))
    b = res.net.layers[0].beta[0]
    np.testing.assert_allclose(b / b[0], [1.0, 2.0, 0.5], rtol=0.12)
    ev = tr.evaluate(res.net, ds)
    assert 0 <= ev["accuracy"] <= 1 and len(ev["calibration"]) == 3


def test_calibration_matches_mean_output():
    ds = small_production(200)
    net = tr.calibrate_scale(architect.build_ces_sieve(2, 3, seed=2), ds)
    assert np.mean(tr.predict(net, ds)) == pytest.approx(np.mean(ds.y), rel=1e-8)
    ch = synth.random_choice_net(3, 1)
    assert tr.calibrate_scale(ch, ds) is ch


def test_prediction_bound_and_metrics():
    ds = small_production(30)
    net = architect.build_ces_sieve(2, 2, seed=0)
    yhat = tr.predict(net, ds, output_bound=0.1)
    assert np.all(yhat <= 0.2 + 1e-15)
    ev = tr.evaluate(net, ds)
    assert set(ev) == {"n", "loss", "rmse", "sup_error"} and ev["n"] == 30


def test_split_and_history_format():
    a, b = tr.split_indices(50, 0.2, seed=1)
    assert len(b) == 10 and not set(a) & set(b)
    np.testing.assert_array_equal(tr.split_indices(50, 0.2, seed=1)[0], a)
    hist = [dict(epoch=0, train_loss=1.0, val_loss=None, grad_norm=0.5, projections=0, lr=0.1, extra=1)]
    lines = tr.history_lines(hist, header={"version": 1}).splitlines()
    assert json.loads(lines[0]) == {"version": 1}
    assert "extra" not in json.loads(lines[1])


def test_invalid_inputs_raise():
    ds = small_production(10)
    bad = architect.build_ces_sieve(2, 2)
    bad.layers[0].rho[0] = 2.0
    with pytest.raises(ValueError):
        tr.fit(bad, ds)
    with pytest.raises(ValueError):
        tr.fit(architect.build_ces_sieve(2, 2), Dataset("production", x=np.zeros((0, 2)), y=np.zeros((0, 1))))
