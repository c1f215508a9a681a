import jax
import jax.numpy as jnp
import numpy as np
import pytest
from jax.flatten_util import ravel_pytree

from stochweave.diffcore import finite_difference_errors


def _relu_pattern_fn(loss_fn, unravel):
    """Jitted, vmapped map from flat parameters to the on/off state of every ReLU."""

    def pattern(theta):
        seen = []
        relu = jax.nn.relu

        def recording_relu(x):
            seen.append(x > 0)
            return relu(x)

        jax.nn.relu = recording_relu
        try:
            loss_fn(unravel(theta))
        finally:
            jax.nn.relu = relu
        return jnp.concatenate([s.ravel() for s in seen])

    return jax.jit(jax.vmap(pattern))


def smooth_gradient_errors(loss_fn, params, h, chunk=256):
    """Finite-difference errors, split by whether the +-h stencil crosses a ReLU kink.

    Returns ``(errors, crosses)``: per-coordinate relative errors and a boolean
    mask of coordinates whose perturbed evaluations switch any ReLU on or off.
    Central differences are meaningless across a kink, so only the others are
    a check of the gradient.
    """
    errors = finite_difference_errors(loss_fn, params, h)
    theta, unravel = ravel_pytree({k: jnp.asarray(v, dtype=jnp.float64) for k, v in params.items()})
    theta = np.asarray(theta)
    pattern = _relu_pattern_fn(loss_fn, unravel)
    base = np.asarray(pattern(theta[None]))[0]
    crosses = np.zeros(theta.size, dtype=bool)
    for lo in range(0, theta.size, chunk):
        idx = np.arange(lo, min(lo + chunk, theta.size))
        for sign in (1.0, -1.0):
            shifted = np.tile(theta, (idx.size, 1))
            shifted[np.arange(idx.size), idx] += sign * h
            crosses[idx] |= np.any(np.asarray(pattern(shifted)) != base, axis=1)
    return errors, crosses


@pytest.fixture
def gradient_errors():
    return smooth_gradient_errors


# --------------------------------------------------------------------------
# Acceptance summary: one line per criterion, printed after the test run.

_CRITERIA: dict[int, str] = {}


@pytest.fixture
def criterion():
    def record(number: int, ok: bool, text: str):
        _CRITERIA[number] = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {text}"

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[number])
