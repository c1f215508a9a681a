"""Conditional VAE for transition distributions p(y|x).

The model is split into a hashable :class:`Architecture` (static under
``jax.jit``) and a flat parameter dict.  All objective functions are pure in
``(architecture, params, data, noise)``.  Noise is always supplied by the
caller; the ``*_estimate`` wrappers draw it from an injected generator.

Shapes: ``M`` latent draws per datapoint, ``B`` datapoints.  Gaussian noise
is ``(M, B, n)``; Gumbel noise for discrete latents is ``(M, B, n, k)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from functools import partial
from pathlib import Path

import jax
import jax.numpy as jnp
import numpy as np
from jax.scipy.special import logsumexp

from stochweave.diffcore import (
    ConfigError,
    DomainError,
    MlpSpec,
    NumericalFailure,
    ParameterStore,
    Schedule,
    adam_update,
    forward,
    init_mlp,
    schedule_value,
)
from stochweave.latents import (
    LatentSpec,
    flow_forward,
    flow_log_density,
    gaussian_log_density,
    gumbel_max,
    gumbel_sample,
    gumbel_softmax,
    init_flow,
)
from stochweave.metrics import kl_categorical_logits, kl_gaussian_per_dim

DECODERS = ("gaussian-1d", "factored-categorical")
TINY = float(np.finfo(np.float64).tiny)


# --------------------------------------------------------------------------
# Configuration


@dataclass(frozen=True)
class InputEncoding:
    """How raw values become network inputs.

    ``cardinalities=None`` passes ``width`` raw reals through; otherwise each
    column is an integer one-hot encoded over its cardinality.
    """

    cardinalities: tuple[int, ...] | None = None
    raw_width: int = 1

    def __post_init__(self):
        if self.cardinalities is not None:
            object.__setattr__(self, "cardinalities", tuple(int(c) for c in self.cardinalities))

    @property
    def width(self) -> int:
        return self.raw_width if self.cardinalities is None else sum(self.cardinalities)

    @property
    def n_columns(self) -> int:
        return self.raw_width if self.cardinalities is None else len(self.cardinalities)


def encode_input(encoding: InputEncoding, values) -> np.ndarray:
    """Encode raw rows (``(..., n_columns)``) into network inputs."""
    values = np.asarray(values)
    if values.ndim == 0:
        values = values.reshape(1)
    if values.shape[-1] != encoding.n_columns:
        raise DomainError(f"expected {encoding.n_columns} columns, got {values.shape[-1]}")
    if encoding.cardinalities is None:
        return values.astype(np.float64)
    parts = []
    for col, card in enumerate(encoding.cardinalities):
        v = values[..., col]
        if np.any(v != np.round(v)) or np.any(v < 0) or np.any(v >= card):
            raise DomainError(f"column {col} outside 0..{card - 1}")
        parts.append(np.eye(card)[v.astype(np.int64)])
    return np.concatenate(parts, axis=-1)


@dataclass(frozen=True)
class ObjectiveConfig:
    k: int = 3
    alpha: float = 0.5
    free_bits: float = 0.07

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if not 0 < self.alpha < 1:
            raise ConfigError("alpha must lie in (0, 1)")
        if self.free_bits < 0:
            raise ConfigError("free_bits must be >= 0")


@dataclass(frozen=True)
class Architecture:
    latent: LatentSpec
    x_encoding: InputEncoding
    y_encoding: InputEncoding
    decoder: str = "gaussian-1d"
    y_classes: int = 1
    generative_hidden: tuple[int, ...] = (50, 50, 50)
    inference_hidden: tuple[int, ...] = (30, 30)
    prior_hidden: tuple[int, ...] = (30, 30)

    def __post_init__(self):
        for name in ("generative_hidden", "inference_hidden", "prior_hidden"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.decoder not in DECODERS:
            raise ConfigError(f"unknown decoder family {self.decoder!r}")
        if self.decoder == "factored-categorical" and self.y_classes < 2:
            raise ConfigError("categorical decoder needs y_classes >= 2")

    @property
    def y_dims(self) -> int:
        return self.y_encoding.n_columns

    def _latent_head(self, n_in, hidden) -> MlpSpec:
        lat = self.latent
        if lat.is_discrete:
            return MlpSpec(n_in, hidden, lat.n * lat.k, head="softmax-logits", blocks=lat.n)
        return MlpSpec(n_in, hidden, 2 * lat.n, head="mean-and-log-std")

    @property
    def prior_net(self) -> MlpSpec:
        return self._latent_head(self.x_encoding.width, self.prior_hidden)

    @property
    def inference_net(self) -> MlpSpec:
        return self._latent_head(self.x_encoding.width + self.y_encoding.width,
                                 self.inference_hidden)

    @property
    def decoder_net(self) -> MlpSpec:
        n_in = self.latent.width + self.x_encoding.width
        if self.decoder == "gaussian-1d":
            return MlpSpec(n_in, self.generative_hidden, 2 * self.y_dims, head="mean-and-log-std")
        return MlpSpec(n_in, self.generative_hidden, self.y_dims * self.y_classes,
                       head="softmax-logits", blocks=self.y_dims)

    def to_dict(self) -> dict:
        d = asdict(self)
        return json.loads(json.dumps(d))

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        lat = dict(d["latent"])
        if lat.get("temperature"):
            lat["temperature"] = Schedule(**lat["temperature"])
        return cls(
            latent=LatentSpec(**lat),
            x_encoding=InputEncoding(**d["x_encoding"]),
            y_encoding=InputEncoding(**d["y_encoding"]),
            **{k: d[k] for k in ("decoder", "y_classes", "generative_hidden",
                                 "inference_hidden", "prior_hidden")},
        )


def init_params(arch: Architecture, rng: np.random.Generator) -> dict[str, np.ndarray]:
    params = {}
    params.update(init_mlp(arch.prior_net, rng, "prior"))
    params.update(init_mlp(arch.inference_net, rng, "inference"))
    params.update(init_mlp(arch.decoder_net, rng, "decoder"))
    if arch.latent.family == "gaussian-flow":
        params.update(init_flow(arch.latent, rng))
    return params


@dataclass
class TransitionModel:
    """Architecture + trained parameters + the objective it was trained with."""

    arch: Architecture
    params: ParameterStore
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)

    @classmethod
    def create(cls, arch: Architecture, rng: np.random.Generator,
               objective: ObjectiveConfig | None = None) -> "TransitionModel":
        return cls(arch, ParameterStore(init_params(arch, rng)), objective or ObjectiveConfig())

    def save(self, path) -> None:
        """Write ``<path>.swve`` parameters and a ``<path>.json`` sidecar."""
        path = Path(path)
        self.params.save(path.with_suffix(".swve"))
        sidecar = {"architecture": self.arch.to_dict(), "objective": asdict(self.objective)}
        path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2))

    @classmethod
    def load(cls, path) -> "TransitionModel":
        path = Path(path)
        sidecar = json.loads(path.with_suffix(".json").read_text())
        return cls(Architecture.from_dict(sidecar["architecture"]),
                   ParameterStore.load(path.with_suffix(".swve")),
                   ObjectiveConfig(**sidecar["objective"]))


# --------------------------------------------------------------------------
# Network pieces


def latent_params(arch: Architecture, params, inputs, which: str):
    """Prior (``which='prior'``) or inference distribution parameters.

    Gaussian families: ``(mu, sigma)``.  Discrete: log class probabilities
    of shape ``(..., n, k)``.
    """
    net = arch.prior_net if which == "prior" else arch.inference_net
    out = forward(net, params, inputs, which)
    if arch.latent.is_discrete:
        return out
    mu, log_std = out
    return mu, jnp.exp(log_std)


def decoder_log_lik(arch: Architecture, params, z, xe, y):
    """``log p(y | z, x)`` for each leading index of ``z``."""
    xb = jnp.broadcast_to(xe, z.shape[:-1] + xe.shape[-1:])
    out = forward(arch.decoder_net, params, jnp.concatenate([z, xb], axis=-1), "decoder")
    if arch.decoder == "gaussian-1d":
        mu, log_std = out
        return gaussian_log_density(y, mu, jnp.exp(log_std))
    idx = jnp.broadcast_to(y, out.shape[:-1]).astype(jnp.int32)
    return jnp.sum(jnp.take_along_axis(out, idx[..., None], axis=-1)[..., 0], axis=-1)


def _flat(z):
    return z.reshape(z.shape[:-2] + (z.shape[-2] * z.shape[-1],))


def posterior_draws(arch: Architecture, params, xe, ye, noise, tau=None):
    """Reparametrized draws from q(z|x,y).

    Returns ``(z, log_q, log_prior, div)``: decoder-ready ``z`` ``(M, B, width)``;
    ``log q`` and ``log p(z|x)`` of each draw ``(M, B)`` (``None`` for relaxed
    discrete draws, which have no tractable density here); per-dimension
    divergences ``(B, D_z)``.  Discrete draws are hard Gumbel-Max one-hots
    when ``tau`` is ``None`` and Gumbel-Softmax relaxations otherwise.
    """
    lat = arch.latent
    inputs = jnp.concatenate([xe, ye], axis=-1)
    if lat.is_discrete:
        log_wq = latent_params(arch, params, inputs, "inference")
        log_wp = latent_params(arch, params, xe, "prior")
        div = kl_categorical_logits(log_wq, log_wp)
        if tau is None:
            z = gumbel_max(log_wq, noise)
            log_q = jnp.sum(z * log_wq, axis=(-2, -1))
            log_p = jnp.sum(z * log_wp, axis=(-2, -1))
            return _flat(z), log_q, log_p, div
        return _flat(gumbel_softmax(log_wq, noise, tau)), None, None, div

    mu_q, s_q = latent_params(arch, params, inputs, "inference")
    mu_p, s_p = latent_params(arch, params, xe, "prior")
    z0 = mu_q + s_q * noise
    base = gaussian_log_density(z0, mu_q, s_q)
    if lat.family == "gaussian":
        log_p = gaussian_log_density(z0, mu_p, s_p)
        return z0, base, log_p, kl_gaussian_per_dim(mu_q, s_q, mu_p, s_p)
    zL, log_dets = flow_forward(lat, params, z0)
    log_q = flow_log_density(base, log_dets)
    log_p = gaussian_log_density(zL, mu_p, s_p)
    # No closed form once the flow is applied: Monte-Carlo log-ratio, one group.
    return zL, log_q, log_p, jnp.mean(log_q - log_p, axis=0)[:, None]


# --------------------------------------------------------------------------
# Objectives


def elbo_terms(arch: Architecture, params, xe, ye, y, noise, tau=None):
    """Per-datapoint ELBO from the first noise draw: ``log p(y|z,x) - D(q||p)``."""
    noise = noise[:1]
    z, log_q, log_p, div = posterior_draws(arch, params, xe, ye, noise, tau)
    ll = decoder_log_lik(arch, params, z, xe, y)[0]
    if arch.latent.family == "gaussian-flow":
        return ll - (log_q - log_p)[0]
    return ll - jnp.sum(div, axis=-1)


def elbo(arch: Architecture, params, xe, ye, y, noise, tau=None):
    return jnp.mean(elbo_terms(arch, params, xe, ye, y, noise, tau))


def log_weights(arch: Architecture, params, xe, ye, y, noise):
    """Importance log-weights ``log p(y, z|x) - log q(z|x, y)``, shape ``(M, B)``."""
    z, log_q, log_p, _ = posterior_draws(arch, params, xe, ye, noise)
    return decoder_log_lik(arch, params, z, xe, y) + log_p - log_q


def vr_bound_terms(log_w, alpha):
    m = log_w.shape[0]
    return (logsumexp((1 - alpha) * log_w, axis=0) - math.log(m)) / (1 - alpha)


def vr_bound(arch: Architecture, params, xe, ye, y, noise, alpha=0.5):
    """Variational Renyi bound averaged over the batch (``M = noise.shape[0]``)."""
    return jnp.mean(vr_bound_terms(log_weights(arch, params, xe, ye, y, noise), alpha))


def log_lik_terms(log_w):
    return logsumexp(log_w, axis=0) - math.log(log_w.shape[0])


def test_nll(arch: Architecture, params, xe, ye, y, noise):
    """Importance-sampled negative log-likelihood, proposal q(z|x,y)."""
    return -jnp.mean(log_lik_terms(log_weights(arch, params, xe, ye, y, noise)))


def free_bits_objective(reconstruction, divergences, lam):
    """``reconstruction - sum_j max(lam, mean_batch D_j)``; ``divergences`` is ``(B, D_z)``."""
    per_dim = jnp.maximum(jnp.mean(divergences, axis=0), 0.0)
    return reconstruction - jnp.sum(jnp.maximum(lam, per_dim))


def training_objective(arch: Architecture, params, xe, ye, y, noise, tau, objective: ObjectiveConfig):
    """Renyi-weighted reconstruction over ``k`` draws with the free-bits floor.

    Returns ``(value, terms)``; maximise ``value``.
    """
    z, _, _, div = posterior_draws(arch, params, xe, ye, noise, tau)
    ll = decoder_log_lik(arch, params, z, xe, y)
    recon = jnp.mean(vr_bound_terms(ll, objective.alpha))
    value = free_bits_objective(recon, div, objective.free_bits)
    return value, {"reconstruction": recon, "divergence": jnp.sum(jnp.mean(div, axis=0))}


# --------------------------------------------------------------------------
# Noise


def latent_noise(arch: Architecture, key, m: int, b: int):
    lat = arch.latent
    if lat.is_discrete:
        u = jax.random.uniform(key, (m, b, lat.n, lat.k), minval=TINY, maxval=1.0)
        return gumbel_sample(u)
    return jax.random.normal(key, (m, b, lat.n))


def _key(rng: np.random.Generator):
    return jax.random.PRNGKey(int(rng.integers(2**62)))


# --------------------------------------------------------------------------
# Training


@partial(jax.jit, static_argnames=("arch", "objective", "lr", "tau", "batch_size", "n_steps"))
def train_chunk(params, m, v, step, key, xe_all, ye_all, y_all, *, arch, objective, lr, tau,
                batch_size, n_steps):
    """Run ``n_steps`` Adam steps on random minibatches; returns state and per-step losses.

    ``batch_size=-1`` uses the whole supplied data as the batch every step.
    """
    n_data = xe_all.shape[0]
    full = batch_size < 0
    batch_size = n_data if full else batch_size

    def loss(p, xe, ye, y, noise, t):
        value, terms = training_objective(arch, p, xe, ye, y, noise, t, objective)
        return -value, terms

    def body(carry, k):
        p, m_, v_, s = carry
        k_idx, k_noise = jax.random.split(k)
        idx = jnp.arange(n_data) if full else jax.random.randint(k_idx, (batch_size,), 0, n_data)
        noise = latent_noise(arch, k_noise, objective.k, batch_size)
        t = None if tau is None or not arch.latent.is_discrete else schedule_value(tau, s)
        (value, terms), g = jax.value_and_grad(loss, has_aux=True)(
            p, xe_all[idx], ye_all[idx], y_all[idx], noise, t)
        s = s + 1
        p, m_, v_ = adam_update(p, m_, v_, s, g, schedule_value(lr, s - 1))
        return (p, m_, v_, s), (value, terms["divergence"])

    (params, m, v, step), (losses, divs) = jax.lax.scan(
        body, (params, m, v, step), jax.random.split(key, n_steps))
    return params, m, v, step, losses, divs


def check_finite(values, term: str, step0: int = 0) -> None:
    values = np.asarray(values)
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        raise NumericalFailure(term, step=step0 + int(bad[0]))


# --------------------------------------------------------------------------
# Evaluation with injected randomness


def _chunks(n, size):
    for lo in range(0, n, size):
        yield slice(lo, min(lo + size, n))


@partial(jax.jit, static_argnames=("arch", "m"))
def _log_lik_batch(params, key, xe, ye, y, *, arch, m):
    noise = latent_noise(arch, key, m, xe.shape[0])
    return log_weights(arch, params, xe, ye, y, noise)


def log_weight_matrix(model: TransitionModel, xe, ye, y, m: int, rng: np.random.Generator,
                      batch: int = 256) -> np.ndarray:
    """``(M, N)`` importance log-weights; raises on a degenerate proposal."""
    params = model.params.as_jax()
    out = []
    for sl in _chunks(len(xe), batch):
        out.append(np.asarray(_log_lik_batch(params, _key(rng), xe[sl], ye[sl], y[sl],
                                             arch=model.arch, m=m)))
    w = np.concatenate(out, axis=1)
    if np.any(np.isnan(w)) or np.any(w == np.inf):
        raise NumericalFailure("log q(z|x,y)")
    return w


def test_nll_estimate(model: TransitionModel, xe, ye, y, m: int, rng: np.random.Generator) -> float:
    w = jnp.asarray(log_weight_matrix(model, xe, ye, y, m, rng))
    value = -float(jnp.mean(log_lik_terms(w)))
    if not np.isfinite(value):
        raise NumericalFailure("test_nll")
    return value


def vr_bound_estimate(model: TransitionModel, xe, ye, y, m: int, alpha: float,
                      rng: np.random.Generator) -> float:
    w = jnp.asarray(log_weight_matrix(model, xe, ye, y, m, rng))
    return float(jnp.mean(vr_bound_terms(w, alpha)))


@partial(jax.jit, static_argnames=("arch",))
def _elbo_batch(params, key, xe, ye, y, *, arch):
    return elbo_terms(arch, params, xe, ye, y, latent_noise(arch, key, 1, xe.shape[0]))


def elbo_estimate(model: TransitionModel, xe, ye, y, rng: np.random.Generator,
                  batch: int = 1024) -> float:
    params = model.params.as_jax()
    terms = [np.asarray(_elbo_batch(params, _key(rng), xe[sl], ye[sl], y[sl], arch=model.arch))
             for sl in _chunks(len(xe), batch)]
    value = float(np.mean(np.concatenate(terms)))
    if not np.isfinite(value):
        raise NumericalFailure("elbo")
    return value


@partial(jax.jit, static_argnames=("arch", "n"))
def _predict(params, key, xe, *, arch, n):
    """``n`` outcome draws per row of ``xe``: shape ``(n, B, y_dims)``."""
    lat = arch.latent
    k_z, k_y = jax.random.split(key)
    b = xe.shape[0]
    if lat.is_discrete:
        log_wp = latent_params(arch, params, xe, "prior")
        z = _flat(gumbel_max(log_wp, latent_noise(arch, k_z, n, b)))
    else:
        mu_p, s_p = latent_params(arch, params, xe, "prior")
        z = mu_p + s_p * latent_noise(arch, k_z, n, b)
    xb = jnp.broadcast_to(xe, z.shape[:-1] + xe.shape[-1:])
    out = forward(arch.decoder_net, params, jnp.concatenate([z, xb], axis=-1), "decoder")
    if arch.decoder == "gaussian-1d":
        mu, log_std = out
        return mu + jnp.exp(log_std) * jax.random.normal(k_y, mu.shape)
    u = jax.random.uniform(k_y, out.shape, minval=TINY, maxval=1.0)
    return jnp.argmax(out + gumbel_sample(u), axis=-1)


def sample_prediction(model: TransitionModel, xe, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``n`` outcomes per input row: z from the prior, then y from the decoder.

    Discrete latents use hard Gumbel-Max draws.  Returns ``(n, B, y_dims)``.
    """
    xe = jnp.atleast_2d(jnp.asarray(xe, dtype=jnp.float64))
    return np.asarray(_predict(model.params.as_jax(), _key(rng), xe, arch=model.arch, n=n))
