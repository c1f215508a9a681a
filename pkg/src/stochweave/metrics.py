"""Exact divergences between finite distributions and diagonal Gaussians (nats)."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass
from typing import Any, Hashable, Iterable, Mapping

import jax.numpy as jnp
import numpy as np

from stochweave.diffcore import DomainError, is_concrete

SUM_TOL = 1e-12


def _key(k):
    # JSON round-trips turn tuples into lists; keep keys hashable and orderable.
    return tuple(_key(v) for v in k) if isinstance(k, (list, tuple)) else k


@dataclass(frozen=True)
class DistTable:
    """Finite distribution with sorted, unique support keys."""

    support: tuple
    probs: np.ndarray

    def __post_init__(self):
        support = tuple(_key(k) for k in self.support)
        probs = np.asarray(self.probs, dtype=np.float64)
        if len(support) != probs.size:
            raise DomainError("support and probabilities differ in length")
        if len(set(support)) != len(support):
            raise DomainError("support keys must be unique")
        if np.any(probs < 0):
            raise DomainError("probabilities must be non-negative")
        if abs(probs.sum() - 1.0) > SUM_TOL * max(1, probs.size):
            raise DomainError(f"probabilities sum to {probs.sum()!r}, not 1")
        order = sorted(range(len(support)), key=lambda i: support[i])
        object.__setattr__(self, "support", tuple(support[i] for i in order))
        object.__setattr__(self, "probs", probs[order])

    @classmethod
    def from_mapping(cls, mapping: Mapping[Hashable, float]) -> "DistTable":
        return cls(tuple(mapping), np.fromiter(mapping.values(), dtype=np.float64))

    def as_dict(self) -> dict:
        return dict(zip(self.support, self.probs.tolist()))

    def prob(self, key) -> float:
        return self.as_dict().get(_key(key), 0.0)

    def __len__(self) -> int:
        return len(self.support)

    def to_json(self) -> str:
        return json.dumps({"support": [_jsonable(k) for k in self.support],
                           "probs": self.probs.tolist()})

    @classmethod
    def from_json(cls, text: str) -> "DistTable":
        obj = json.loads(text)
        return cls(tuple(obj["support"]), np.asarray(obj["probs"]))


def _jsonable(k: Any):
    return [_jsonable(v) for v in k] if isinstance(k, tuple) else k


def _aligned(p: DistTable, q: DistTable):
    keys = sorted(set(p.support) | set(q.support))
    pd, qd = p.as_dict(), q.as_dict()
    return (np.array([pd.get(k, 0.0) for k in keys]),
            np.array([qd.get(k, 0.0) for k in keys]))


def kl_categorical(p: DistTable, q: DistTable) -> float:
    """``sum p ln(p/q)``; ``inf`` when ``q`` misses mass that ``p`` has."""
    pa, qa = _aligned(p, q)
    mask = pa > 0
    if np.any(qa[mask] == 0):
        return math.inf
    return max(0.0, float(np.sum(pa[mask] * (np.log(pa[mask]) - np.log(qa[mask])))))


def hellinger(p: DistTable, q: DistTable) -> float:
    pa, qa = _aligned(p, q)
    bc = float(np.sum(np.sqrt(pa * qa)))
    return math.sqrt(max(0.0, 1.0 - bc))


def empirical_dist(samples: Iterable[Hashable]) -> DistTable:
    counts = Counter(_key(s) for s in samples)
    total = sum(counts.values())
    if total == 0:
        raise DomainError("empirical_dist needs at least one sample")
    return DistTable(tuple(counts), np.array([c / total for c in counts.values()]))


def kl_gaussian_per_dim(mu1, sigma1, mu2, sigma2):
    """Elementwise KL(N(mu1, sigma1^2) || N(mu2, sigma2^2))."""
    if is_concrete(sigma1) and is_concrete(sigma2):
        if np.any(np.asarray(sigma1) <= 0) or np.any(np.asarray(sigma2) <= 0):
            raise DomainError("standard deviations must be positive")
    return (jnp.log(sigma2 / sigma1)
            + (sigma1**2 + (mu1 - mu2) ** 2) / (2 * sigma2**2) - 0.5)


def kl_gaussian_diag(mu1, sigma1, mu2, sigma2):
    return jnp.sum(kl_gaussian_per_dim(mu1, sigma1, mu2, sigma2), axis=-1)


def kl_categorical_logits(log_q, log_p):
    """KL between categorical rows given as log-probabilities along the last axis."""
    return jnp.sum(jnp.exp(log_q) * (log_q - log_p), axis=-1)
