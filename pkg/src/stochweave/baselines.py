"""Feed-forward regression baselines without an inference network."""

from __future__ import annotations

import math
from functools import partial

import jax
import jax.numpy as jnp
import numpy as np
from jax.scipy.special import logsumexp
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from stochweave.diffcore import MlpSpec, Schedule, adam_update, forward, init_mlp, schedule_value
from stochweave.estimators import as_generator

LOG_2PI = math.log(2 * math.pi)


def _key(rng):
    return jax.random.PRNGKey(int(rng.integers(2**62)))


def _gaussian_log_pdf(y, mu, log_std):
    r = (y - mu) * jnp.exp(-log_std)
    return -0.5 * r * r - log_std - 0.5 * LOG_2PI


@partial(jax.jit, static_argnames=("net", "kind", "n_noise", "lr", "batch_size", "n_steps"))
def _train(params, m, v, step, key, X, Y, *, net, kind, n_noise, lr, batch_size, n_steps):
    def loss(p, x, y, eps):
        if kind == "mse":
            return jnp.mean((forward(net, p, x, "net") - y) ** 2)
        mu, log_std = forward(net, p, jnp.concatenate([x, eps], axis=-1), "net")
        return -jnp.mean(jnp.sum(_gaussian_log_pdf(y, mu, log_std), axis=-1))

    def body(carry, k):
        p, m_, v_, s = carry
        k_idx, k_eps = jax.random.split(k)
        idx = jax.random.randint(k_idx, (batch_size,), 0, X.shape[0])
        eps = jax.random.normal(k_eps, (batch_size, n_noise))
        value, g = jax.value_and_grad(loss)(p, X[idx], Y[idx], eps)
        s = s + 1
        p, m_, v_ = adam_update(p, m_, v_, s, g, schedule_value(lr, s - 1))
        return (p, m_, v_, s), value

    (params, m, v, step), losses = jax.lax.scan(
        body, (params, m, v, step), jax.random.split(key, n_steps))
    return params, m, v, step, losses


class _MlpBase(BaseEstimator, RegressorMixin):
    _kind = "mse"

    def _n_noise(self) -> int:
        return 0

    def _net(self, n_x, n_y) -> MlpSpec:
        raise NotImplementedError

    def fit(self, X, Y):
        X, Y = check_X_y(X, Y, multi_output=True, y_numeric=True, dtype=np.float64)
        Y = Y.reshape(len(Y), -1)
        rng = as_generator(self.random_state)
        self.n_features_in_ = X.shape[1]
        self.n_outputs_ = Y.shape[1]
        self.net_ = self._net(X.shape[1], Y.shape[1])
        params = {k: jnp.asarray(a) for k, a in init_mlp(self.net_, rng, "net").items()}
        zeros = jax.tree_util.tree_map(jnp.zeros_like, params)
        lr = Schedule(self.lr_start, self.lr_end, self.lr_fraction, self.n_steps)
        params, _, _, _, losses = _train(
            params, zeros, zeros, 0, _key(rng), jnp.asarray(X), jnp.asarray(Y),
            net=self.net_, kind=self._kind, n_noise=self._n_noise(), lr=lr,
            batch_size=self.batch_size, n_steps=self.n_steps)
        self.params_ = params
        self.loss_curve_ = np.asarray(losses)
        self._rng = rng
        return self

    def _check(self, X):
        check_is_fitted(self, "params_")
        return check_array(X, dtype=np.float64)


class MeanMLPRegressor(_MlpBase):
    """Deterministic ReLU network trained on squared error: predicts E[y|x]."""

    def __init__(self, hidden=(50, 50, 50), n_steps=30000, batch_size=64,
                 lr_start=0.005, lr_end=0.0005, lr_fraction=0.9, random_state=None):
        self.hidden = hidden
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.lr_start = lr_start
        self.lr_end = lr_end
        self.lr_fraction = lr_fraction
        self.random_state = random_state

    def _net(self, n_x, n_y):
        return MlpSpec(n_x, tuple(self.hidden), n_y)

    def predict(self, X):
        out = np.asarray(forward(self.net_, self.params_, self._check(X), "net"))
        return out[:, 0] if out.shape[1] == 1 else out


class NoiseMLPRegressor(_MlpBase):
    """ReLU network fed ``(x, eps)`` with ``eps ~ N(0, I)``, emitting a Gaussian over y.

    Trained on the Gaussian negative log-likelihood of one noise draw per
    example.  The predictive density is the Monte-Carlo mixture over ``eps``.
    """

    _kind = "nll"

    def __init__(self, hidden=(50, 50, 50), n_noise=3, n_steps=30000, batch_size=64,
                 lr_start=0.005, lr_end=0.0005, lr_fraction=0.9, n_eval_samples=500,
                 random_state=None):
        self.hidden = hidden
        self.n_noise = n_noise
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.lr_start = lr_start
        self.lr_end = lr_end
        self.lr_fraction = lr_fraction
        self.n_eval_samples = n_eval_samples
        self.random_state = random_state

    def _n_noise(self):
        return self.n_noise

    def _net(self, n_x, n_y):
        return MlpSpec(n_x + self.n_noise, tuple(self.hidden), 2 * n_y, head="mean-and-log-std")

    def _heads(self, X, n, rng):
        eps = rng.standard_normal((n, len(X), self.n_noise))
        xb = np.broadcast_to(X, (n,) + X.shape)
        return forward(self.net_, self.params_, jnp.concatenate([xb, eps], axis=-1), "net")

    def sample(self, X, n_samples=1, random_state=None):
        """``(n_samples, len(X), n_outputs)`` draws."""
        X = self._check(X)
        rng = as_generator(random_state) if random_state is not None else self._rng
        mu, log_std = self._heads(X, n_samples, rng)
        return np.asarray(mu + jnp.exp(log_std) * rng.standard_normal(mu.shape))

    def predict(self, X, random_state=None):
        out = self.sample(X, 1, random_state)[0]
        return out[:, 0] if out.shape[1] == 1 else out

    def score_samples(self, X, Y, n_samples=None, random_state=None):
        """Monte-Carlo ``log p(y|x) = log mean_eps N(y; mu(x, eps), sigma(x, eps))``."""
        X = self._check(X)
        Y = check_array(Y, dtype=np.float64, ensure_2d=False).reshape(len(X), -1)
        rng = as_generator(random_state) if random_state is not None else self._rng
        n = n_samples or self.n_eval_samples
        mu, log_std = self._heads(X, n, rng)
        lp = jnp.sum(_gaussian_log_pdf(jnp.asarray(Y), mu, log_std), axis=-1)
        return np.asarray(logsumexp(lp, axis=0) - math.log(n))

    def nll(self, X, Y, n_samples=None, random_state=None) -> float:
        return -float(np.mean(self.score_samples(X, Y, n_samples, random_state)))
