"""scikit-learn style estimators around the conditional VAE."""

from __future__ import annotations

import numpy as np
import jax.numpy as jnp
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from stochweave import cvae
from stochweave.cvae import Architecture, InputEncoding, ObjectiveConfig, TransitionModel
from stochweave.diffcore import ConfigError, Schedule
from stochweave.latents import LatentSpec, flow_forward


def as_generator(random_state) -> np.random.Generator:
    if isinstance(random_state, np.random.Generator):
        return random_state
    return np.random.default_rng(random_state)


class ConditionalVAE(BaseEstimator):
    """Conditional VAE estimating p(y | x).

    Parameters
    ----------
    latent : {"gaussian", "gaussian-flow", "discrete"}
    n_latent : int
        Number of latent variables.
    n_categories : int
        Categories per discrete latent variable.
    n_flow : int
        Coupling layers applied to posterior draws (``gaussian-flow`` only).
    decoder : {"gaussian", "categorical"}
        Outcome family: a Gaussian per real output column, or an independent
        categorical per integer output column.
    x_cardinalities : tuple of int or None
        If given, X columns are integers one-hot encoded with these sizes.
    y_cardinality : int or None
        Number of classes per output column for the categorical decoder.
    n_steps, batch_size : int
        Minibatch Adam steps and minibatch size.
    lr_start, lr_end, lr_fraction : float
        Learning rate annealed linearly over ``lr_fraction`` of the steps.
    tau_start, tau_end, tau_fraction : float
        Gumbel-Softmax temperature schedule (discrete latents).
    n_importance, alpha, free_bits : training objective settings.
    eval_every : int
        Steps between validation checks; the best validation parameters are kept.
    n_eval_samples : int
        Importance samples for ``score_samples``.
    """

    def __init__(self, latent="gaussian", n_latent=3, n_categories=3, n_flow=0,
                 decoder="gaussian", x_cardinalities=None, y_cardinality=None,
                 generative_hidden=(50, 50, 50), inference_hidden=(30, 30), prior_hidden=None,
                 flow_hidden=(32, 32), n_steps=30000, batch_size=64,
                 lr_start=0.005, lr_end=0.0005, lr_fraction=0.9,
                 tau_start=2.0, tau_end=0.001, tau_fraction=0.7, tau_kind="linear",
                 n_importance=3, alpha=0.5, free_bits=0.07,
                 eval_every=1000, n_val_samples=20, n_eval_samples=500, random_state=None):
        self.latent = latent
        self.n_latent = n_latent
        self.n_categories = n_categories
        self.n_flow = n_flow
        self.decoder = decoder
        self.x_cardinalities = x_cardinalities
        self.y_cardinality = y_cardinality
        self.generative_hidden = generative_hidden
        self.inference_hidden = inference_hidden
        self.prior_hidden = prior_hidden
        self.flow_hidden = flow_hidden
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.lr_start = lr_start
        self.lr_end = lr_end
        self.lr_fraction = lr_fraction
        self.tau_start = tau_start
        self.tau_end = tau_end
        self.tau_fraction = tau_fraction
        self.tau_kind = tau_kind
        self.n_importance = n_importance
        self.alpha = alpha
        self.free_bits = free_bits
        self.eval_every = eval_every
        self.n_val_samples = n_val_samples
        self.n_eval_samples = n_eval_samples
        self.random_state = random_state

    # -- construction ------------------------------------------------------

    def _build(self, n_x: int, n_y: int):
        if self.decoder not in ("gaussian", "categorical"):
            raise ConfigError(f"decoder must be 'gaussian' or 'categorical', got {self.decoder!r}")
        temperature = None
        if self.latent == "discrete":
            temperature = Schedule(self.tau_start, self.tau_end, self.tau_fraction, self.n_steps,
                                   self.tau_kind)
        latent = LatentSpec(
            family=self.latent, n=self.n_latent,
            k=self.n_categories if self.latent == "discrete" else 2,
            n_flow=self.n_flow if self.latent == "gaussian-flow" else 0,
            temperature=temperature, flow_hidden=tuple(self.flow_hidden),
        )
        if self.x_cardinalities is None:
            x_enc = InputEncoding(None, n_x)
        else:
            x_enc = InputEncoding(tuple(self.x_cardinalities))
            if len(x_enc.cardinalities) != n_x:
                raise ConfigError("x_cardinalities does not match the number of X columns")
        if self.decoder == "categorical":
            if not self.y_cardinality:
                raise ConfigError("categorical decoder needs y_cardinality")
            y_enc = InputEncoding((int(self.y_cardinality),) * n_y)
            family, classes = "factored-categorical", int(self.y_cardinality)
        else:
            y_enc = InputEncoding(None, n_y)
            family, classes = "gaussian-1d", 1
        arch = Architecture(
            latent=latent, x_encoding=x_enc, y_encoding=y_enc, decoder=family,
            y_classes=classes, generative_hidden=tuple(self.generative_hidden),
            inference_hidden=tuple(self.inference_hidden),
            prior_hidden=tuple(self.prior_hidden or self.inference_hidden),
        )
        objective = ObjectiveConfig(self.n_importance, self.alpha, self.free_bits)
        return arch, objective

    def _validate(self, X, Y=None):
        dtype = np.float64 if self.x_cardinalities is None else np.int64
        X = check_array(X, dtype=dtype, ensure_2d=False)
        if X.ndim == 1:
            X = X[:, None]
        if Y is None:
            return X, None
        Y = check_array(Y, dtype=np.float64 if self.decoder == "gaussian" else np.int64,
                        ensure_2d=False)
        if Y.ndim == 1:
            Y = Y[:, None]
        if len(X) != len(Y):
            raise ValueError(f"X and Y have different lengths: {len(X)} vs {len(Y)}")
        return X, Y

    def _encode(self, X, Y=None):
        arch = self.arch_ if hasattr(self, "arch_") else None
        xe = cvae.encode_input(arch.x_encoding, X)
        if Y is None:
            return jnp.asarray(xe)
        ye = cvae.encode_input(arch.y_encoding, Y)
        y = Y.astype(np.float64) if arch.decoder == "gaussian-1d" else Y.astype(np.int64)
        return jnp.asarray(xe), jnp.asarray(ye), jnp.asarray(y)

    def _initialize(self, X, Y):
        self.arch_, self.objective_ = self._build(X.shape[1], Y.shape[1])
        self._rng = as_generator(self.random_state)
        self.transition_model_ = TransitionModel.create(self.arch_, self._rng, self.objective_)
        self.n_features_in_ = X.shape[1]
        self.n_outputs_ = Y.shape[1]
        self.history_ = []
        self.steps_done_ = 0

    # -- training ----------------------------------------------------------

    def _run(self, xe, ye, y, n, lr, tau, batch_size):
        store = self.transition_model_.params
        state = cvae.train_chunk(
            store.as_jax(), store.m, store.v, store.step, cvae._key(self._rng), xe, ye, y,
            arch=self.arch_, objective=self.objective_, lr=lr, tau=tau,
            batch_size=batch_size, n_steps=n)
        params, m, v, step, losses, divs = state
        cvae.check_finite(losses, "training objective", store.step)
        store.update(params, m, v, int(step))
        self.steps_done_ = store.step
        return float(np.mean(losses)), float(np.mean(divs))

    def fit(self, X, Y, X_val=None, Y_val=None):
        """Minibatch training on a fixed dataset; keeps the best validation parameters."""
        X, Y = self._validate(X, Y)
        self._initialize(X, Y)
        data = self._encode(X, Y)
        return self._train_loop(lambda n: data, X_val, Y_val)

    def fit_stream(self, sampler, X_val=None, Y_val=None):
        """Train on fresh data: ``sampler(n, rng)`` returns ``(X, Y)`` with ``n`` rows.

        Each block of ``eval_every`` steps draws ``eval_every * batch_size`` new rows.
        """
        # One throwaway row fixes the input/output widths.
        X, Y = self._validate(*sampler(1, np.random.default_rng(0)))
        self._initialize(X, Y)
        return self._train_loop(
            lambda n: self._encode(*self._validate(*sampler(n * self.batch_size, self._rng))),
            X_val, Y_val)

    def _train_loop(self, data_for, X_val, Y_val):
        val = None
        if X_val is not None:
            val = self._encode(*self._validate(X_val, Y_val))
        lr = Schedule(self.lr_start, self.lr_end, self.lr_fraction, self.n_steps)
        tau = self.arch_.latent.temperature
        best, best_score = None, -np.inf
        done = 0
        while done < self.n_steps:
            n = min(self.eval_every, self.n_steps - done)
            loss, div = self._run(*data_for(n), n, lr, tau, self.batch_size)
            done += n
            record = {"step": done, "train_objective": -loss, "divergence": div}
            # Relaxed discrete models are only scored once the temperature has bottomed out.
            annealed = tau is None or done >= tau.anneal_steps
            if val is not None and annealed:
                score = -cvae.test_nll_estimate(self.transition_model_, *val,
                                                m=self.n_val_samples, rng=self._rng)
                record["val_log_lik"] = score
                if score > best_score:
                    best, best_score = self.transition_model_.params.copy(), score
            self.history_.append(record)
        if best is not None:
            self.transition_model_.params = best
        return self

    def partial_fit(self, X, Y, n_steps=1):
        """Adam steps on exactly this minibatch (no resampling across calls)."""
        X, Y = self._validate(X, Y)
        if not hasattr(self, "transition_model_"):
            self._initialize(X, Y)
        xe, ye, y = self._encode(X, Y)
        lr = Schedule(self.lr_start, self.lr_end, self.lr_fraction, self.n_steps)
        tau = self.arch_.latent.temperature
        loss, _ = self._run(xe, ye, y, n_steps, lr, tau, -1)
        self.last_loss_ = loss
        return self

    # -- inference ---------------------------------------------------------

    def sample(self, X, n_samples=1, random_state=None) -> np.ndarray:
        """``(n_samples, len(X), n_outputs)`` draws from the learned p(y|x)."""
        check_is_fitted(self, "transition_model_")
        X, _ = self._validate(X)
        rng = as_generator(random_state) if random_state is not None else self._rng
        return cvae.sample_prediction(self.transition_model_, self._encode(X), n_samples, rng)

    def predict(self, X, random_state=None) -> np.ndarray:
        """One stochastic draw per row."""
        out = self.sample(X, 1, random_state)[0]
        return out[:, 0] if out.shape[1] == 1 else out

    def transform(self, X, Y=None) -> np.ndarray:
        """Latent code per row, shape ``(len(X), width)``.

        With ``Y`` this is the inference-network mean of z given (x, y);
        without it, the prior mean given x.  Discrete latents give flattened
        class probabilities.  For the flow variant the posterior base mean is
        pushed through the flow, while the prior side has no flow.
        """
        check_is_fitted(self, "transition_model_")
        X, Y = self._validate(X, Y)
        arch, params = self.arch_, self.transition_model_.params.as_jax()
        if Y is None:
            inputs, which = self._encode(X), "prior"
        else:
            xe, ye, _ = self._encode(X, Y)
            inputs, which = jnp.concatenate([xe, ye], axis=-1), "inference"
        out = cvae.latent_params(arch, params, inputs, which)
        if arch.latent.is_discrete:
            return np.asarray(cvae._flat(jnp.exp(out)))
        mu = out[0]
        if which == "inference" and arch.latent.family == "gaussian-flow":
            mu = flow_forward(arch.latent, params, mu)[0]
        return np.asarray(mu)

    def score_samples(self, X, Y, n_samples=None, random_state=None) -> np.ndarray:
        """Importance-sampled ``log p(y|x)`` per row."""
        check_is_fitted(self, "transition_model_")
        rng = as_generator(random_state) if random_state is not None else self._rng
        xe, ye, y = self._encode(*self._validate(X, Y))
        w = cvae.log_weight_matrix(self.transition_model_, xe, ye, y,
                                   n_samples or self.n_eval_samples, rng)
        return np.asarray(cvae.log_lik_terms(jnp.asarray(w)))

    def score(self, X, Y, n_samples=None, random_state=None) -> float:
        return float(np.mean(self.score_samples(X, Y, n_samples, random_state)))

    def nll(self, X, Y, n_samples=None, random_state=None) -> float:
        check_is_fitted(self, "transition_model_")
        rng = as_generator(random_state) if random_state is not None else self._rng
        xe, ye, y = self._encode(*self._validate(X, Y))
        return cvae.test_nll_estimate(self.transition_model_, xe, ye, y,
                                      n_samples or self.n_eval_samples, rng)

    def elbo(self, X, Y, random_state=None) -> float:
        check_is_fitted(self, "transition_model_")
        rng = as_generator(random_state) if random_state is not None else self._rng
        xe, ye, y = self._encode(*self._validate(X, Y))
        return cvae.elbo_estimate(self.transition_model_, xe, ye, y, rng)

    def vr_bound(self, X, Y, n_samples=3, random_state=None) -> float:
        check_is_fitted(self, "transition_model_")
        rng = as_generator(random_state) if random_state is not None else self._rng
        xe, ye, y = self._encode(*self._validate(X, Y))
        return cvae.vr_bound_estimate(self.transition_model_, xe, ye, y, n_samples,
                                      self.alpha, rng)

    @classmethod
    def from_model(cls, model: TransitionModel, **params) -> "ConditionalVAE":
        """Wrap an existing (e.g. loaded) transition model."""
        lat = model.arch.latent
        est = cls(latent=lat.family, n_latent=lat.n, n_categories=lat.k, n_flow=lat.n_flow,
                  decoder="gaussian" if model.arch.decoder == "gaussian-1d" else "categorical",
                  x_cardinalities=model.arch.x_encoding.cardinalities,
                  y_cardinality=model.arch.y_classes if model.arch.decoder != "gaussian-1d" else None,
                  n_importance=model.objective.k, alpha=model.objective.alpha,
                  free_bits=model.objective.free_bits, **params)
        est.arch_ = model.arch
        est.objective_ = model.objective
        est.transition_model_ = model
        est._rng = as_generator(est.random_state)
        est.n_features_in_ = model.arch.x_encoding.n_columns
        est.n_outputs_ = model.arch.y_dims
        est.history_ = []
        est.steps_done_ = model.params.step
        return est
