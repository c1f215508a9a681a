import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from stochweave import ConditionalVAE, ConfigError
from stochweave.cvae import TransitionModel
from stochweave.envs import GridLayout, toy_dataset, uncorrelated_batch

SMALL = dict(generative_hidden=(16,), inference_hidden=(8,), batch_size=32, eval_every=50)


def toy(n, seed):
    return toy_dataset(n, np.random.default_rng(seed))


@pytest.fixture(scope="module")
def fitted():
    X, Y = toy(500, 0)
    Xv, Yv = toy(100, 1)
    return ConditionalVAE(n_steps=200, random_state=0, **SMALL).fit(X, Y, Xv, Yv)


def test_get_params_and_clone():
    est = ConditionalVAE(latent="discrete", n_latent=4, n_categories=5, n_steps=10)
    params = est.get_params()
    assert params["latent"] == "discrete" and params["n_categories"] == 5
    copy = clone(est)
    assert copy.get_params() == params
    copy.set_params(n_latent=2)
    assert copy.n_latent == 2 and est.n_latent == 4


def test_unfitted_and_bad_inputs():
    est = ConditionalVAE(n_steps=5, **SMALL)
    with pytest.raises(NotFittedError):
        est.sample(np.zeros((1, 1)))
    with pytest.raises(ValueError):
        est.fit(np.zeros((3, 1)), np.zeros((4, 1)))
    with pytest.raises(ValueError):
        est.fit(np.array([[np.inf]]), np.zeros((1, 1)))
    with pytest.raises(ConfigError):
        ConditionalVAE(decoder="poisson", n_steps=5).fit(np.zeros((2, 1)), np.zeros((2, 1)))
    with pytest.raises(ConfigError):
        ConditionalVAE(decoder="categorical", n_steps=5).fit(np.zeros((2, 1)), np.zeros((2, 1)))
    with pytest.raises(ConfigError):
        ConditionalVAE(latent="gaussian-flow", n_flow=0, n_steps=5).fit(np.zeros((2, 1)),
                                                                         np.zeros((2, 1)))


def test_fit_records_history_and_selects_on_validation(fitted):
    assert fitted.steps_done_ == 200
    assert [r["step"] for r in fitted.history_] == [50, 100, 150, 200]
    assert all(np.isfinite(r["val_log_lik"]) for r in fitted.history_)
    assert fitted.n_features_in_ == 1 and fitted.n_outputs_ == 1


def test_inference_shapes(fitted):
    X = np.linspace(-0.9, 0.9, 6)
    assert fitted.sample(X, 11).shape == (11, 6, 1)
    assert fitted.predict(X).shape == (6,)
    Xt, Yt = toy(40, 2)
    scores = fitted.score_samples(Xt, Yt, n_samples=20)
    assert scores.shape == (40,) and np.all(np.isfinite(scores))
    assert fitted.score(Xt, Yt, n_samples=20, random_state=0) == pytest.approx(
        -fitted.nll(Xt, Yt, n_samples=20, random_state=0))
    assert np.isfinite(fitted.elbo(Xt, Yt, random_state=0))
    assert np.isfinite(fitted.vr_bound(Xt, Yt, random_state=0))


def test_random_state_reproducibility(fitted):
    X, Y = toy(300, 3)
    a = ConditionalVAE(n_steps=60, random_state=7, **SMALL).fit(X, Y)
    b = ConditionalVAE(n_steps=60, random_state=7, **SMALL).fit(X, Y)
    np.testing.assert_array_equal(a.sample(X[:5], 4, random_state=1), b.sample(X[:5], 4, random_state=1))


def test_discrete_selection_waits_for_annealing():
    X, Y = toy(300, 4)
    est = ConditionalVAE(latent="discrete", n_steps=200, tau_fraction=0.5, random_state=0,
                         **SMALL).fit(X, Y, X, Y)
    scored = [r["step"] for r in est.history_ if "val_log_lik" in r]
    assert scored == [100, 150, 200]


def test_partial_fit_steps_on_one_batch():
    X, Y = toy(64, 5)
    est = ConditionalVAE(n_steps=1000, random_state=0, **SMALL)
    est.partial_fit(X, Y)
    est.partial_fit(X, Y, n_steps=3)
    assert est.steps_done_ == 4
    assert np.isfinite(est.last_loss_)


def test_fit_stream_draws_fresh_rows():
    layout = GridLayout()
    calls = []

    def sampler(n, rng):
        calls.append(n)
        return uncorrelated_batch(layout, n, rng)

    est = ConditionalVAE(decoder="categorical", x_cardinalities=(7,) * 6 + (4,), y_cardinality=7,
                         n_latent=2, n_steps=100, random_state=0, **SMALL)
    est.fit_stream(sampler)
    # One width probe, then eval_every * batch_size rows per block.
    assert calls == [1, 50 * 32, 50 * 32]
    draws = est.sample(np.array([[0, 0, 3, 3, 0, 3, 3]]), 20)
    assert draws.shape == (20, 1, 6) and draws.dtype.kind == "i"
    assert draws.min() >= 0 and draws.max() <= 6


def test_categorical_input_validation():
    est = ConditionalVAE(decoder="categorical", x_cardinalities=(7,) * 6 + (4,), y_cardinality=7,
                         n_steps=5, **SMALL)
    X, Y = uncorrelated_batch(GridLayout(), 10, np.random.default_rng(0))
    est.fit(X, Y)
    bad = X.copy()
    bad[0, 6] = 4
    with pytest.raises(Exception, match="column 6"):
        est.sample(bad)


def test_from_model_round_trip(tmp_path, fitted):
    fitted.transition_model_.save(tmp_path / "m")
    wrapped = ConditionalVAE.from_model(TransitionModel.load(tmp_path / "m"))
    X, Y = toy(30, 6)
    assert wrapped.nll(X, Y, n_samples=10, random_state=0) == pytest.approx(
        fitted.nll(X, Y, n_samples=10, random_state=0), abs=1e-12)
    assert wrapped.get_params()["latent"] == "gaussian"


@pytest.mark.parametrize("latent, width", [("gaussian", 3), ("gaussian-flow", 3), ("discrete", 9)])
def test_transform_returns_latent_codes(latent, width):
    X, Y = toy(200, 7)
    est = ConditionalVAE(latent=latent, n_flow=2 if latent == "gaussian-flow" else 0, n_steps=20,
                         random_state=0, **SMALL).fit(X, Y)
    prior, post = est.transform(X[:10]), est.transform(X[:10], Y[:10])
    assert prior.shape == post.shape == (10, width)
    assert not np.allclose(prior, post)
    if latent == "discrete":
        # Three categories per latent variable: each block is a probability vector.
        np.testing.assert_allclose(post.reshape(10, 3, 3).sum(-1), 1.0, atol=1e-12)
    np.testing.assert_array_equal(est.transform(X[:10], Y[:10]), post)
