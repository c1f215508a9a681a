"""Differentiable-computation substrate.

Parameters live in flat ``name -> float64 array`` mappings so they can be
passed straight through ``jax.jit`` as pytrees and written to the SWVE
checkpoint format without a translation layer.  Reverse-mode gradients come
from JAX; everything else here (networks, Adam, schedules, the finite
difference oracle, serialization) is plain code.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping

import jax
import jax.numpy as jnp
import numpy as np
from jax.flatten_util import ravel_pytree

LOG_STD_MIN = math.log(1e-3)
LOG_STD_MAX = math.log(10.0)

CHECKPOINT_MAGIC = b"SWVE"
CHECKPOINT_VERSION = 1

HEADS = ("linear", "softmax-logits", "mean-and-log-std")


class ConfigError(ValueError):
    """Invalid configuration or shape mismatch."""


class DomainError(ValueError):
    """Argument outside the mathematical domain of an operation."""


class NumericalFailure(ArithmeticError):
    """A non-finite value appeared in a named term."""

    def __init__(self, term: str, step: int | None = None):
        self.term = term
        self.step = step
        where = f" at step {step}" if step is not None else ""
        super().__init__(f"non-finite value in {term!r}{where}")


def is_concrete(x) -> bool:
    return not isinstance(x, jax.core.Tracer)


# --------------------------------------------------------------------------
# Networks


@dataclass(frozen=True)
class MlpSpec:
    """Fully connected ReLU network.

    ``n_out`` is the raw output width.  The ``mean-and-log-std`` head splits it
    in two halves; ``softmax-logits`` reshapes it into ``blocks`` equal
    categorical blocks and returns log-probabilities.
    """

    n_in: int
    hidden: tuple[int, ...]
    n_out: int
    activation: str = "relu"
    head: str = "linear"
    blocks: int = 1

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.n_in < 1 or self.n_out < 1 or any(h < 1 for h in self.hidden):
            raise ConfigError(f"layer widths must be positive: {self}")
        if self.activation != "relu":
            raise ConfigError(f"unsupported activation {self.activation!r}")
        if self.head not in HEADS:
            raise ConfigError(f"unknown head {self.head!r}")
        if self.head == "mean-and-log-std" and self.n_out % 2:
            raise ConfigError("mean-and-log-std head needs an even output width")
        if self.head == "softmax-logits" and self.n_out % self.blocks:
            raise ConfigError("output width must be divisible by blocks")

    @property
    def sizes(self) -> tuple[int, ...]:
        return (self.n_in, *self.hidden, self.n_out)

    @property
    def n_params(self) -> int:
        s = self.sizes
        return sum(a * b + b for a, b in zip(s[:-1], s[1:]))


def init_mlp(spec: MlpSpec, rng: np.random.Generator, prefix: str) -> dict[str, np.ndarray]:
    """Glorot-uniform weights, zero biases."""
    params = {}
    s = spec.sizes
    for i, (a, b) in enumerate(zip(s[:-1], s[1:])):
        limit = math.sqrt(6.0 / (a + b))
        params[f"{prefix}/{i}/W"] = rng.uniform(-limit, limit, size=(a, b))
        params[f"{prefix}/{i}/b"] = np.zeros(b)
    return params


def forward(spec: MlpSpec, params: Mapping, x, prefix: str):
    """Evaluate the network on ``x`` (any leading batch shape)."""
    x = jnp.asarray(x, dtype=jnp.float64)
    if x.shape[-1] != spec.n_in:
        raise ConfigError(f"{prefix}: expected input width {spec.n_in}, got {x.shape[-1]}")
    n_layers = len(spec.sizes) - 1
    h = x
    for i in range(n_layers):
        h = h @ params[f"{prefix}/{i}/W"] + params[f"{prefix}/{i}/b"]
        if i < n_layers - 1:
            h = jax.nn.relu(h)
    if spec.head == "linear":
        return h
    if spec.head == "softmax-logits":
        h = h.reshape(h.shape[:-1] + (spec.blocks, spec.n_out // spec.blocks))
        return jax.nn.log_softmax(h, axis=-1)
    half = spec.n_out // 2
    return h[..., :half], jnp.clip(h[..., half:], LOG_STD_MIN, LOG_STD_MAX)


# --------------------------------------------------------------------------
# Parameter storage and optimisation


class ParameterStore:
    """Named float64 parameter arrays plus their Adam state."""

    def __init__(self, params: Mapping[str, np.ndarray] | None = None):
        self.params: dict[str, np.ndarray] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0
        for name, value in (params or {}).items():
            self.add(name, value)

    def add(self, name: str, value) -> None:
        if name in self.params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        arr = np.array(value, dtype=np.float64)
        self.params[name] = arr
        self.m[name] = np.zeros_like(arr)
        self.v[name] = np.zeros_like(arr)

    def update(self, params: Mapping, m: Mapping | None = None, v: Mapping | None = None,
               step: int | None = None) -> None:
        for name, value in params.items():
            arr = np.asarray(value, dtype=np.float64)
            if arr.shape != self.params[name].shape:
                raise ConfigError(f"shape mismatch for {name!r}")
            self.params[name] = arr
        if m is not None:
            self.m = {k: np.asarray(a, dtype=np.float64) for k, a in m.items()}
        if v is not None:
            self.v = {k: np.asarray(a, dtype=np.float64) for k, a in v.items()}
        if step is not None:
            self.step = int(step)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __len__(self) -> int:
        return len(self.params)

    def names(self) -> list[str]:
        return list(self.params)

    def as_jax(self) -> dict[str, jax.Array]:
        return {k: jnp.asarray(a) for k, a in self.params.items()}

    def copy(self) -> "ParameterStore":
        new = ParameterStore()
        new.params = {k: a.copy() for k, a in self.params.items()}
        new.m = {k: a.copy() for k, a in self.m.items()}
        new.v = {k: a.copy() for k, a in self.v.items()}
        new.step = self.step
        return new

    def save(self, path) -> None:
        save_checkpoint(path, self.params)

    @classmethod
    def load(cls, path) -> "ParameterStore":
        return cls(load_checkpoint(path))


def adam_update(params, m, v, step, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Pure Adam update on pytrees; ``step`` is the 1-based count after this update."""
    m = jax.tree_util.tree_map(lambda m_, g: b1 * m_ + (1 - b1) * g, m, grads)
    v = jax.tree_util.tree_map(lambda v_, g: b2 * v_ + (1 - b2) * g * g, v, grads)
    c1 = 1 - b1**step
    c2 = 1 - b2**step
    params = jax.tree_util.tree_map(
        lambda p, m_, v_: p - lr * (m_ / c1) / (jnp.sqrt(v_ / c2) + eps), params, m, v
    )
    return params, m, v


def adam_step(store: ParameterStore, grads: Mapping, lr: float,
              b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8) -> ParameterStore:
    if lr <= 0:
        raise ConfigError("learning rate must be positive")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalFailure(f"grad[{name}]", step=store.step)
    step = store.step + 1
    params, m, v = adam_update(store.params, store.m, store.v, step, dict(grads), lr, b1, b2, eps)
    store.update(params, m, v, step)
    return store


def grad(loss_fn: Callable, params: Mapping, *args):
    """Reverse-mode gradient of ``loss_fn(params, *args)``.

    ``loss_fn`` returns a scalar or ``(scalar, {term_name: value})``; a
    non-finite loss raises :class:`NumericalFailure` naming the first bad term.
    """

    def wrapped(p):
        out = loss_fn(p, *args)
        if isinstance(out, tuple):
            return out
        return out, {}

    (value, terms), g = jax.value_and_grad(wrapped, has_aux=True)(dict(params))
    if not np.isfinite(float(value)):
        bad = [k for k, t in terms.items() if not np.all(np.isfinite(np.asarray(t)))]
        raise NumericalFailure(bad[0] if bad else "loss")
    return {k: np.asarray(a) for k, a in g.items()}


def finite_difference_errors(loss_fn: Callable, params: Mapping, h: float = 1e-5, *args,
                             chunk: int = 512) -> np.ndarray:
    """Relative error of ``grad`` against central differences, one entry per scalar parameter.

    Entries follow ``jax.flatten_util.ravel_pytree`` order.  The error is
    ``|analytic - numeric| / max(1, |analytic|)``.
    """
    if h <= 0:
        raise DomainError("h must be positive")

    def scalar(p):
        out = loss_fn(p, *args)
        return out[0] if isinstance(out, tuple) else out

    params = {k: jnp.asarray(a, dtype=jnp.float64) for k, a in params.items()}
    analytic, _ = ravel_pytree(grad(loss_fn, params, *args))
    theta, unravel = ravel_pytree(params)
    theta = np.asarray(theta)
    batched = jax.jit(jax.vmap(lambda t: scalar(unravel(t))))

    n = theta.size
    numeric = np.empty(n)
    for lo in range(0, n, chunk):
        idx = np.arange(lo, min(lo + chunk, n))
        plus = np.tile(theta, (idx.size, 1))
        minus = plus.copy()
        plus[np.arange(idx.size), idx] += h
        minus[np.arange(idx.size), idx] -= h
        numeric[idx] = (np.asarray(batched(plus)) - np.asarray(batched(minus))) / (2 * h)
    analytic = np.asarray(analytic)
    return np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))


def grad_check(loss_fn: Callable, params: Mapping, h: float = 1e-5, *args,
               chunk: int = 512) -> float:
    """Max relative error between ``grad`` and central finite differences."""
    return float(np.max(finite_difference_errors(loss_fn, params, h, *args, chunk=chunk)))


# --------------------------------------------------------------------------
# Schedules


@dataclass(frozen=True)
class Schedule:
    """Linear anneal from ``start`` to ``end`` over ``fraction * total`` steps."""

    start: float
    end: float
    fraction: float
    total: int
    kind: str = "linear"

    def __post_init__(self):
        if self.kind not in ("linear", "geometric"):
            raise ConfigError(f"unknown schedule kind {self.kind!r}")
        if self.kind == "geometric" and (self.start <= 0 or self.end <= 0):
            raise ConfigError("geometric schedules need positive endpoints")
        if not 0 < self.fraction <= 1:
            raise ConfigError("schedule fraction must lie in (0, 1]")
        if self.total < 1:
            raise ConfigError("schedule total must be >= 1")

    @property
    def anneal_steps(self) -> float:
        return self.fraction * self.total

    def __call__(self, t):
        return schedule_value(self, t)


def schedule_value(s: Schedule, t):
    """Works on Python ints and on traced step counters inside ``jit``."""
    frac = jnp.clip(t / s.anneal_steps, 0.0, 1.0)
    if s.kind == "geometric":
        value = s.start * (s.end / s.start) ** frac
    else:
        value = s.start + (s.end - s.start) * frac
    return float(value) if is_concrete(value) else value


# --------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(path, params: Mapping[str, np.ndarray]) -> None:
    buf = bytearray(CHECKPOINT_MAGIC)
    buf += struct.pack("<I", CHECKPOINT_VERSION)
    for name, value in params.items():
        arr = np.ascontiguousarray(np.asarray(value, dtype="<f8"))
        encoded = name.encode("utf-8")
        buf += struct.pack("<I", len(encoded)) + encoded
        buf += struct.pack("<I", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        buf += arr.tobytes(order="C")
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ConfigError(f"{path}: not a SWVE checkpoint")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {version}")
    pos = 8
    params = {}
    while pos < len(data):
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos:pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<I", data, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}Q", data, pos)
        pos += 8 * rank
        count = int(np.prod(shape)) if rank else 1
        params[name] = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(shape).copy()
        pos += 8 * count
    return params

