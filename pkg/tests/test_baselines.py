import math

import jax.numpy as jnp
import numpy as np
import pytest
from scipy import stats
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from stochweave.baselines import MeanMLPRegressor, NoiseMLPRegressor


def linear_data(n=2000, noise=0.0, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-1, 1, size=(n, 1))
    Y = 2 * X[:, 0] + 1 + noise * rng.standard_normal(n)
    return X, Y


def test_mean_mlp_fits_a_line():
    X, Y = linear_data()
    model = MeanMLPRegressor(hidden=(16,), n_steps=3000, random_state=0).fit(X, Y)
    pred = model.predict(X)
    assert pred.shape == (2000,)
    assert np.mean((pred - Y) ** 2) < 1e-3
    assert model.loss_curve_.shape == (3000,)
    assert model.score(X, Y) > 0.999


def test_mean_mlp_is_deterministic_given_seed():
    X, Y = linear_data(200)
    a = MeanMLPRegressor(hidden=(8,), n_steps=50, random_state=3).fit(X, Y).predict(X)
    b = MeanMLPRegressor(hidden=(8,), n_steps=50, random_state=3).fit(X, Y).predict(X)
    np.testing.assert_array_equal(a, b)


def test_multi_output_shapes():
    X, Y = linear_data(300)
    Y2 = np.column_stack([Y, -Y])
    model = MeanMLPRegressor(hidden=(8,), n_steps=20, random_state=0).fit(X, Y2)
    assert model.predict(X).shape == (300, 2)
    noisy = NoiseMLPRegressor(hidden=(8,), n_steps=20, random_state=0).fit(X, Y2)
    assert noisy.sample(X[:5], 7).shape == (7, 5, 2)
    assert noisy.score_samples(X[:5], Y2[:5], n_samples=10).shape == (5,)


def test_noise_mlp_density_of_a_fixed_network():
    X, Y = linear_data(100)
    model = NoiseMLPRegressor(hidden=(), n_noise=2, n_steps=1, random_state=0).fit(X, Y)
    # Zero weights: mu = 0.3 and log-std = log 2 whatever the input and noise.
    model.params_ = {"net/0/W": jnp.zeros((3, 2)), "net/0/b": jnp.array([0.3, math.log(2.0)])}
    y = np.array([0.0, 1.0, -2.5])
    np.testing.assert_allclose(model.score_samples(np.zeros((3, 1)), y, n_samples=5),
                               stats.norm.logpdf(y, 0.3, 2.0), atol=1e-12)
    draws = model.sample(np.zeros((1, 1)), 20000, random_state=1)[:, 0, 0]
    assert abs(draws.mean() - 0.3) < 0.05 and abs(draws.std() - 2.0) < 0.05


def test_noise_mlp_learns_noise_scale():
    X, Y = linear_data(4000, noise=0.5, seed=1)
    model = NoiseMLPRegressor(hidden=(16,), n_steps=4000, random_state=0).fit(X, Y)
    Xt, Yt = linear_data(2000, noise=0.5, seed=2)
    true_nll = 0.5 * math.log(2 * math.pi * math.e * 0.25)
    assert model.nll(Xt, Yt, n_samples=200, random_state=0) == pytest.approx(true_nll, abs=0.1)


def test_sklearn_protocol():
    model = NoiseMLPRegressor(hidden=(4,), n_noise=5, n_steps=7)
    params = model.get_params()
    assert params["n_noise"] == 5 and params["hidden"] == (4,)
    copy = clone(model)
    assert copy.get_params() == params
    with pytest.raises(NotFittedError):
        copy.predict(np.zeros((1, 1)))
    with pytest.raises(ValueError):
        MeanMLPRegressor(n_steps=5).fit(np.zeros((3, 1)), np.zeros(4))
    with pytest.raises(ValueError):
        MeanMLPRegressor(n_steps=5).fit(np.array([[np.nan]]), np.zeros(1))
