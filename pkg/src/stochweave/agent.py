"""Model-free DQN that generates correlated on-policy transitions.

There is no replay buffer: every update uses the most recent contiguous
fragment of experience.  The target network is a frozen copy of the online
network, refreshed every ``sync_every`` environment steps.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from functools import partial
from pathlib import Path
from typing import Callable

import jax
import jax.numpy as jnp
import numpy as np

from stochweave.diffcore import (
    ConfigError,
    MlpSpec,
    NumericalFailure,
    Schedule,
    adam_update,
    forward,
    init_mlp,
)
from stochweave.envs import Action, GridEnv, GridLayout

N_ACTIONS = len(Action)


@dataclass(frozen=True)
class DqnConfig:
    gamma: float = 0.99
    sync_every: int = 500
    eps_start: float = 1.0
    eps_end: float = 0.10
    eps_fraction: float = 0.6
    hidden: tuple[int, ...] = (50, 50, 50)
    lr: float = 1e-4
    total_steps: int = 50000
    batch_size: int = 32
    update_every: int = 4
    eval_epsilon: float = 0.05

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(self.hidden))
        # gamma = 0 is allowed for one-step sanity fixtures.
        if not 0 <= self.gamma <= 1:
            raise ConfigError("gamma must lie in [0, 1]")
        if self.sync_every < 1 or self.update_every < 1 or self.batch_size < 1:
            raise ConfigError("sync_every, update_every and batch_size must be >= 1")
        if self.total_steps < 1 or self.lr <= 0:
            raise ConfigError("total_steps and lr must be positive")

    @property
    def epsilon(self) -> Schedule:
        return Schedule(self.eps_start, self.eps_end, self.eps_fraction, self.total_steps)


def encode_states(layout: GridLayout, states) -> np.ndarray:
    """One-hot of each coordinate (x over width, y over height), concatenated."""
    s = np.atleast_2d(np.asarray(states, dtype=np.int64))
    sizes = [layout.width, layout.height] * 3
    parts = [np.eye(n)[s[:, i]] for i, n in enumerate(sizes)]
    return np.concatenate(parts, axis=1)


def q_net_spec(layout: GridLayout, config: DqnConfig) -> MlpSpec:
    return MlpSpec(3 * (layout.width + layout.height), config.hidden, N_ACTIONS)


def q_learning_loss(params, target_params, batch, net: MlpSpec, gamma: float):
    """Mean squared one-step TD error; bootstrapping is masked at terminal steps."""
    s, a, r, s2, done = batch
    q = forward(net, params, s, "q")
    q_sa = jnp.take_along_axis(q, a[:, None], axis=1)[:, 0]
    q_next = forward(net, jax.lax.stop_gradient(target_params), s2, "q")
    target = r + gamma * (1.0 - done) * jnp.max(q_next, axis=1)
    return jnp.mean((jax.lax.stop_gradient(target) - q_sa) ** 2)


@partial(jax.jit, static_argnames=("net", "gamma", "lr"))
def _update(params, m, v, step, target_params, batch, *, net, gamma, lr):
    loss, g = jax.value_and_grad(q_learning_loss)(params, target_params, batch, net, gamma)
    step = step + 1
    params, m, v = adam_update(params, m, v, step, g, lr)
    return params, m, v, step, loss


def epsilon_greedy(q_values, epsilon: float, rng: np.random.Generator) -> int:
    """Uniform action with probability ``epsilon``, else argmax (lowest index on ties)."""
    if rng.random() < epsilon:
        return int(rng.integers(len(q_values)))
    return int(np.argmax(q_values))


class DqnAgent:
    def __init__(self, layout: GridLayout, config: DqnConfig, rng: np.random.Generator):
        self.layout = layout
        self.config = config
        self.net = q_net_spec(layout, config)
        self.params = {k: jnp.asarray(a) for k, a in init_mlp(self.net, rng, "q").items()}
        self.m = jax.tree_util.tree_map(jnp.zeros_like, self.params)
        self.v = jax.tree_util.tree_map(jnp.zeros_like, self.params)
        self.step = 0
        self.sync()

    def sync(self) -> None:
        self.target = dict(self.params)
        self._np = {k: np.asarray(a) for k, a in self.params.items()}

    def q_values(self, state) -> np.ndarray:
        # Plain numpy: acting happens once per environment step, far too often for dispatch.
        h = encode_states(self.layout, state)
        n = len(self.net.sizes) - 1
        for i in range(n):
            h = h @ self._np[f"q/{i}/W"] + self._np[f"q/{i}/b"]
            if i < n - 1:
                h = np.maximum(h, 0.0)
        return h[0]

    def act(self, state, epsilon: float, rng: np.random.Generator) -> int:
        return epsilon_greedy(self.q_values(state), epsilon, rng)

    def update(self, states, actions, rewards, next_states, dones) -> float:
        batch = (jnp.asarray(encode_states(self.layout, states)),
                 jnp.asarray(actions, dtype=jnp.int32),
                 jnp.asarray(rewards, dtype=jnp.float64),
                 jnp.asarray(encode_states(self.layout, next_states)),
                 jnp.asarray(dones, dtype=jnp.float64))
        self.params, self.m, self.v, step, loss = _update(
            self.params, self.m, self.v, self.step, self.target, batch,
            net=self.net, gamma=self.config.gamma, lr=self.config.lr)
        loss = float(loss)
        if not np.isfinite(loss):
            raise NumericalFailure("q_loss", step=self.step)
        self.step = int(step)
        # Online numpy copy used for acting; the target stays frozen until sync().
        self._np = {k: np.asarray(a) for k, a in self.params.items()}
        return loss


def run_onpolicy(layout: GridLayout, config: DqnConfig,
                 model_hook: Callable[[np.ndarray, np.ndarray], float] | None,
                 rng: np.random.Generator, log_path=None):
    """Train the DQN and feed its correlated experience to ``model_hook``.

    ``model_hook(X, Y)`` receives the same fragment as each Q update: ``X`` rows
    are ``(6 state coordinates, action)`` and ``Y`` rows the next state; it
    returns the model loss.  Returns ``(agent, log)`` where ``log`` holds one
    record per environment step.
    """
    agent = DqnAgent(layout, config, rng)
    env = GridEnv(layout, rng)
    eps = config.epsilon
    state = env.reset()
    trans = []
    log = []
    sink = open(log_path, "w") if log_path else None
    try:
        for t in range(config.total_steps):
            epsilon = eps(t)
            action = agent.act(state, epsilon, rng)
            nxt, reward, done = env.step(action)
            # Timeouts end the episode but are not terminal for bootstrapping.
            terminal = nxt.agent == layout.goal
            trans.append((tuple(state), action, reward, tuple(nxt), float(terminal)))
            if len(trans) > config.batch_size:
                trans.pop(0)
            record = {"step": t, "state": list(state), "action": action, "reward": reward,
                      "epsilon": epsilon, "q_loss": None, "vae_loss": None}
            if len(trans) == config.batch_size and (t + 1) % config.update_every == 0:
                s, a, r, s2, d = map(np.asarray, zip(*trans))
                try:
                    record["q_loss"] = agent.update(s, a, r, s2, d)
                    if model_hook is not None:
                        record["vae_loss"] = float(model_hook(np.column_stack([s, a]), s2))
                except NumericalFailure as err:
                    raise NumericalFailure(err.term, step=t) from err
            if (t + 1) % config.sync_every == 0:
                agent.sync()
            log.append(record)
            if sink:
                sink.write(json.dumps(record) + "\n")
            state = env.reset() if done else nxt
    finally:
        if sink:
            sink.close()
    return agent, log


def evaluate_policy(layout: GridLayout, agent: DqnAgent, n_episodes: int, epsilon: float,
                    rng: np.random.Generator) -> float:
    """Fraction of episodes reaching the goal within the episode cap."""
    env = GridEnv(layout, rng)
    wins = 0
    for _ in range(n_episodes):
        state, done = env.reset(), False
        while not done:
            state, reward, done = env.step(agent.act(state, epsilon, rng))
        wins += state.agent == layout.goal
    return wins / n_episodes


def save_config(config: DqnConfig, path) -> None:
    Path(path).write_text(json.dumps(asdict(config), indent=2))
