"""Reparametrized latent-variable families.

Every sampler takes its noise as an explicit argument (``eps``, ``g`` or
``u``) so the same draw can be replayed when differentiating or when
comparing against finite differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, NamedTuple

import jax
import jax.numpy as jnp
import numpy as np

from stochweave.diffcore import (
    ConfigError,
    DomainError,
    MlpSpec,
    Schedule,
    forward,
    init_mlp,
    is_concrete,
)

FAMILIES = ("gaussian", "gaussian-flow", "discrete")
S_LIMIT = 5.0
LOG_2PI = math.log(2 * math.pi)


@dataclass(frozen=True)
class LatentSpec:
    family: str = "gaussian"
    n: int = 3
    k: int = 2
    n_flow: int = 0
    temperature: Schedule | None = None
    masking: str = "alternating-halves"
    flow_hidden: tuple[int, ...] = (32, 32)

    def __post_init__(self):
        object.__setattr__(self, "flow_hidden", tuple(self.flow_hidden))
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown latent family {self.family!r}")
        if self.n < 1:
            raise ConfigError("latent dimensionality must be >= 1")
        if self.family == "discrete" and self.k < 2:
            raise ConfigError("discrete latents need k >= 2 categories")
        if self.family == "gaussian-flow" and (self.n_flow < 1 or self.n < 2):
            raise ConfigError("flow latents need n_flow >= 1 and n >= 2")
        if self.family != "gaussian-flow" and self.n_flow:
            raise ConfigError("n_flow is only meaningful for the gaussian-flow family")
        if self.masking != "alternating-halves":
            raise ConfigError(f"unsupported masking {self.masking!r}")

    @property
    def is_discrete(self) -> bool:
        return self.family == "discrete"

    @property
    def width(self) -> int:
        """Width of ``z`` as seen by the decoder."""
        return self.n * self.k if self.is_discrete else self.n

    @property
    def param_width(self) -> int:
        """Raw output width of the prior / inference networks."""
        return self.n * self.k if self.is_discrete else 2 * self.n


class LatentSample(NamedTuple):
    z: jax.Array
    base_log_q: jax.Array
    log_dets: tuple


def _check(cond, message):
    if is_concrete(cond) and not bool(np.all(np.asarray(cond))):
        raise DomainError(message)


def gaussian_reparam(mu, sigma, eps):
    _check(jnp.asarray(sigma) > 0, "sigma must be positive")
    return mu + sigma * eps


def gaussian_log_density(z, mu, sigma):
    """Diagonal Gaussian log-density summed over the last axis."""
    r = (z - mu) / sigma
    return jnp.sum(-0.5 * r * r - jnp.log(sigma) - 0.5 * LOG_2PI, axis=-1)


def gumbel_sample(u):
    u = jnp.asarray(u, dtype=jnp.float64)
    _check((u > 0) & (u < 1), "u must lie strictly inside (0, 1)")
    return -jnp.log(-jnp.log(u))


def gumbel_max(log_w, g):
    """One-hot of ``argmax(g + log_w)``; ties go to the lowest index."""
    log_w = jnp.asarray(log_w, dtype=jnp.float64)
    idx = jnp.argmax(g + log_w, axis=-1)
    return jax.nn.one_hot(idx, log_w.shape[-1], dtype=jnp.float64)


def gumbel_softmax(log_w, g, tau):
    _check(jnp.asarray(tau) > 0, "temperature must be positive")
    return jax.nn.softmax((log_w + g) / tau, axis=-1)


def coupling_forward(z, d: int, s: Callable, t: Callable):
    """Affine coupling: keep ``z[:d]``, scale-and-shift the rest.

    Returns ``(z', log_det)`` with ``log_det = sum(s(z[:d]))``.
    """
    if not 1 <= d < z.shape[-1]:
        raise ConfigError(f"split d={d} must satisfy 1 <= d < {z.shape[-1]}")
    head, tail = z[..., :d], z[..., d:]
    scale = s(head)
    out = jnp.concatenate([head, t(head) + tail * jnp.exp(scale)], axis=-1)
    return out, jnp.sum(scale, axis=-1)


def coupling_inverse(zp, d: int, s: Callable, t: Callable):
    if not 1 <= d < zp.shape[-1]:
        raise ConfigError(f"split d={d} must satisfy 1 <= d < {zp.shape[-1]}")
    head, tail = zp[..., :d], zp[..., d:]
    return jnp.concatenate([head, (tail - t(head)) * jnp.exp(-s(head))], axis=-1)


def flow_log_density(base_log_q, log_dets):
    """Change of variables: ``log q0(z0) - sum_l log|det J_l|``."""
    total = base_log_q
    for ld in log_dets:
        total = total - ld
    return total


# --------------------------------------------------------------------------
# Stacked coupling flow with alternating halves


def flow_layers(spec: LatentSpec) -> list[tuple[int, MlpSpec]]:
    """Per layer: the split used on the (possibly rotated) vector, and the s/t net shape.

    Even layers condition on the first ``n // 2`` coordinates and transform the
    rest; odd layers condition on that rest and transform the first half.
    """
    n, d = spec.n, spec.n // 2
    layers = []
    for layer in range(spec.n_flow):
        split = d if layer % 2 == 0 else n - d
        layers.append((split, MlpSpec(split, spec.flow_hidden, n - split)))
    return layers


def init_flow(spec: LatentSpec, rng: np.random.Generator) -> dict[str, np.ndarray]:
    params = {}
    for layer, (_, net) in enumerate(flow_layers(spec)):
        params.update(init_mlp(net, rng, f"flow/{layer}/s"))
        params.update(init_mlp(net, rng, f"flow/{layer}/t"))
    return params


def _layer_fns(net: MlpSpec, params, layer: int):
    def s(h):
        return S_LIMIT * jnp.tanh(forward(net, params, h, f"flow/{layer}/s") / S_LIMIT)

    def t(h):
        return forward(net, params, h, f"flow/{layer}/t")

    return s, t


def _rotate(z, k):
    return jnp.concatenate([z[..., k:], z[..., :k]], axis=-1)


def flow_forward(spec: LatentSpec, params, z0):
    """Push ``z0`` through every coupling layer; returns ``(zL, log_dets)``."""
    z = z0
    log_dets = []
    n, d = spec.n, spec.n // 2
    for layer, (split, net) in enumerate(flow_layers(spec)):
        s, t = _layer_fns(net, params, layer)
        if layer % 2 == 0:
            z, ld = coupling_forward(z, split, s, t)
        else:
            z, ld = coupling_forward(_rotate(z, d), split, s, t)
            z = _rotate(z, n - d)
        log_dets.append(ld)
    return z, tuple(log_dets)


def flow_inverse(spec: LatentSpec, params, zL):
    z = zL
    n, d = spec.n, spec.n // 2
    for layer, (split, net) in reversed(list(enumerate(flow_layers(spec)))):
        s, t = _layer_fns(net, params, layer)
        if layer % 2 == 0:
            z = coupling_inverse(z, split, s, t)
        else:
            z = _rotate(coupling_inverse(_rotate(z, d), split, s, t), n - d)
    return z


def sample_flow_posterior(spec: LatentSpec, params, mu, sigma, eps) -> LatentSample:
    """Gaussian base draw followed by the flow; carries the density bookkeeping."""
    z0 = gaussian_reparam(mu, sigma, eps)
    base = gaussian_log_density(z0, mu, sigma)
    zL, log_dets = flow_forward(spec, params, z0)
    return LatentSample(zL, base, log_dets)
