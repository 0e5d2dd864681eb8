import numpy as np
import pytest

from structsieve import cnl, synth
from structsieve import network as nw
from structsieve.network import Layer, NetworkSpec


def test_cobb_douglas_unit_point_and_noiseless_samples():
    cd = synth.cobb_douglas(0.3, 0.5)
    assert cd(np.ones((1, 2)))[0, 0] == 1.0
    ds = synth.sample_production(cd, 50, 0.0, seed=1)
    np.testing.assert_array_equal(ds.y, cd(ds.x))
    assert ds.x.min() >= 0.5 and ds.x.max() <= 2.0
    with pytest.raises(ValueError):
        synth.cobb_douglas(-0.1, 0.5)
    with pytest.raises(ValueError):
        cd(np.ones((1, 3)))


def test_noise_is_centred():
    cd = synth.cobb_douglas(0.3, 0.5)
    n, sd = 100_000, 0.05
    ds = synth.sample_production(cd, n, sd, seed=2)
    assert abs(np.mean(ds.y - cd(ds.x))) <= 3 * sd / np.sqrt(n)
    assert np.all(ds.y >= 0)


def test_sampling_is_seed_deterministic_and_validates():
    t = synth.ces_technology([1.0, 0.8], -0.5, 0.8)
    a = synth.sample_production(t, 20, 0.1, seed=3)
    b = synth.sample_production(t, 20, 0.1, seed=3)
    np.testing.assert_array_equal(a.x, b.x)
    np.testing.assert_array_equal(a.y, b.y)
    for bad in (dict(n=0), dict(n=5, noise_sd=-1.0), dict(n=5, box=(0.0, 1.0))):
        with pytest.raises(ValueError):
            synth.sample_production(t, **bad)


def test_technology_configs():
    assert synth.technology_from_config({"type": "cobb_douglas", "alpha": [0.5, 0.5]})(np.array([[4.0, 1.0]]))[0, 0] \
        == pytest.approx(2.0)
    ces = synth.technology_from_config({"type": "ces", "beta": [1, 1], "rho": 0.5})
    assert ces(np.array([[1.0, 4.0]]))[0, 0] == pytest.approx(9.0)
    net = nw.NetworkSpec("production", [2, 1], [Layer.create(1, 2, rho=1.0)])
    tl = synth.technology_from_config({"type": "two_layer", "network": nw.to_dict(net)})
    assert tl(np.array([[1.0, 2.0]]))[0, 0] == pytest.approx(3.0)
    with pytest.raises(ValueError):
        synth.technology_from_config({"type": "translog"})


def test_logit_simulation_frequencies():
    net = NetworkSpec("choice", [1, 2], [Layer.create(1, 2, rho=1.0)])
    ds = synth.simulate_choices(net, x_sampler=lambda rng, n: np.tile([0.0, np.log(3.0)], (n, 1)), n=100_000, seed=4)
    freq = np.bincount(ds.labels, minlength=2) / ds.n
    np.testing.assert_allclose(freq, [0.25, 0.75], atol=0.01)


def test_nested_simulation_frequencies():
    top = Layer.create(1, 2, beta=[[1.0, 1.0]], rho=1.0)
    nests = Layer.create(2, 3, beta=[[1, 1, 0], [0, 0, 1]], mask=[[1, 1, 0], [0, 0, 1]], rho=[2.0, 1.0])
    net = NetworkSpec("choice", [1, 2, 3], [top, nests])
    ds = synth.simulate_choices(net, x_sampler=lambda rng, n: np.zeros((n, 3)), n=100_000, seed=5)
    np.testing.assert_allclose(np.bincount(ds.labels, minlength=3) / ds.n, [0.292893, 0.292893, 0.414214], atol=0.01)


def test_degenerate_single_path():
    net = NetworkSpec("choice", [1, 1, 1], [Layer.create(1, 1, rho=1.0), Layer.create(1, 1, rho=2.0)])
    ds = synth.simulate_choices(net, n=200, seed=0)
    assert np.all(ds.labels == 0)


def test_choice_simulation_with_utility_map_and_errors():
    net = synth.random_choice_net(3, 2, seed=1)
    ds = synth.simulate_choices(net, U=lambda x: 2 * x, x_sampler=lambda rng, n: rng.normal(size=(n, 3)), n=10, seed=1)
    assert ds.x.shape == (10, 3)
    with pytest.raises(ValueError):
        synth.simulate_choices(nw.NetworkSpec("production", [1, 1], [Layer.create(1, 1)]))
    bad = net.copy()
    bad.layers[0].rho[:] = 0.2
    with pytest.raises(ValueError):
        synth.simulate_choices(bad)


def test_random_fleets_are_valid():
    for seed in range(20):
        assert nw.validate(synth.random_choice_net(5, 3, seed=seed)) == []
        assert nw.validate(synth.random_production_net([3, 4, 1], seed=seed, tau_range=(0.8, 1.0),
                                                       beta0_max=0.2)) == []


def test_generating_configs():
    F, M = synth.generating_from_config({"type": "nested", "nests": [[1, 2], [3]], "rho": [2.0, 1.0]})
    assert M == 3 and F(np.array([3.0, 4.0, 2.0])) == pytest.approx(7.0)
    np.testing.assert_allclose(synth.gev_ccp(F, np.zeros(3)), [0.292893, 0.292893, 0.414214], atol=1e-6)
    F, M = synth.generating_from_config({"type": "ces", "M": 2, "rho": 2.0})
    assert F(np.array([3.0, 4.0])) == pytest.approx(5.0)
    for bad in ({"type": "ces", "M": 2, "rho": 0.5}, {"type": "nested", "nests": [[1], [3]]}, {"type": "x"}):
        with pytest.raises(ValueError):
            synth.generating_from_config(bad)
    F, M = synth.generating_from_config({"type": "logit", "M": 4})
    np.testing.assert_allclose(synth.gev_ccp(F, np.zeros(4)), 0.25, atol=1e-9)
