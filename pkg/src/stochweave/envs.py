"""Experimental domains with exact ground-truth transition distributions."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy.stats import norm

from stochweave.diffcore import ConfigError, DomainError
from stochweave.metrics import DistTable

# --------------------------------------------------------------------------
# Toy function


@dataclass(frozen=True)
class ToySpec:
    weights: tuple[float, ...] = (0.2, 0.8, 0.3, 0.5, 0.2)
    sigma: float = 0.1
    bounds: tuple[float, float] = (-0.3, 0.3)

    def __post_init__(self):
        w = self.weights
        if not (math.isclose(w[0] + w[1], 1) and math.isclose(w[2] + w[3] + w[4], 1)):
            raise ConfigError("branch weights must sum to 1")


TOY = ToySpec()


def toy_components(x: float, spec: ToySpec = TOY) -> tuple[np.ndarray, np.ndarray]:
    """Mixture ``(weights, means)`` of p(y|x); every component has std ``spec.sigma``."""
    if not -1 <= x <= 1:
        raise DomainError(f"x={x} outside [-1, 1]")
    lo, hi = spec.bounds
    w = spec.weights
    if x < lo:
        return np.array([1.0]), np.array([2.5])
    if x < hi:
        return np.array(w[:2]), np.array([4 * x, -4 * x])
    return np.array(w[2:]), np.array([5 + math.log(x + 1), -x + 0.2, 5 * x * x])


def toy_sample(x: float, rng: np.random.Generator, spec: ToySpec = TOY) -> float:
    weights, means = toy_components(x, spec)
    c = rng.choice(len(weights), p=weights)
    return float(means[c] + spec.sigma * rng.standard_normal())


def toy_density(x: float, y, spec: ToySpec = TOY):
    weights, means = toy_components(x, spec)
    y = np.asarray(y, dtype=np.float64)
    return np.sum(weights * norm.pdf(y[..., None], means, spec.sigma), axis=-1)


def toy_mean(x: float, spec: ToySpec = TOY) -> float:
    weights, means = toy_components(x, spec)
    return float(weights @ means)


def toy_dataset(n: int, rng: np.random.Generator, spec: ToySpec = TOY):
    """``(X, Y)`` with ``x ~ Uniform(-1, 1)``; both shaped ``(n, 1)``."""
    x = rng.uniform(-1, 1, size=n)
    y = np.array([toy_sample(float(xi), rng, spec) for xi in x])
    return x[:, None], y[:, None]


# --------------------------------------------------------------------------
# Gridworld


class Action(IntEnum):
    UP = 0
    DOWN = 1
    LEFT = 2
    RIGHT = 3


MOVES = {Action.UP: (0, 1), Action.DOWN: (0, -1), Action.LEFT: (-1, 0), Action.RIGHT: (1, 0)}

# Ghost 2 preference: left/right 40% each, 10% for each vertical direction.
GHOST2_BIAS = {Action.UP: 0.1, Action.DOWN: 0.1, Action.LEFT: 0.4, Action.RIGHT: 0.4}


class GridState(NamedTuple):
    ax: int
    ay: int
    g1x: int
    g1y: int
    g2x: int
    g2y: int

    @property
    def agent(self):
        return (self.ax, self.ay)

    @property
    def ghost1(self):
        return (self.g1x, self.g1y)

    @property
    def ghost2(self):
        return (self.g2x, self.g2y)


# Layout (x right, y up; row y=6 printed first):
#   . . . . . . G
#   . # # . # # .
#   . # # . # # .
#   . . . . . . .
#   # # # . # # #
#   # # # . # # #
#   A . . . . . .
DEFAULT_WALLS = tuple(sorted(
    [(x, y) for y in (1, 2) for x in (0, 1, 2, 4, 5, 6)]
    + [(x, y) for y in (4, 5) for x in (1, 2, 4, 5)]
))


@dataclass(frozen=True)
class GridLayout:
    width: int = 7
    height: int = 7
    walls: tuple[tuple[int, int], ...] = DEFAULT_WALLS
    goal: tuple[int, int] = (6, 6)
    agent_start: tuple[int, int] = (0, 0)
    ghost1_start: tuple[int, int] = (3, 3)
    ghost2_start: tuple[int, int] = (0, 3)
    goal_reward: float = 10.0
    step_reward: float = 0.0
    max_steps: int = 100
    _wall_set: frozenset = field(init=False, repr=False, compare=False)
    _moves: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        walls = tuple(sorted(tuple(int(c) for c in w) for w in self.walls))
        object.__setattr__(self, "walls", walls)
        for name in ("goal", "agent_start", "ghost1_start", "ghost2_start"):
            object.__setattr__(self, name, tuple(int(c) for c in getattr(self, name)))
        object.__setattr__(self, "_wall_set", frozenset(walls))
        object.__setattr__(self, "_moves", {})
        for cell in walls:
            if not self.in_bounds(cell):
                raise ConfigError(f"wall {cell} outside the grid")
        for name in ("goal", "agent_start", "ghost1_start", "ghost2_start"):
            cell = getattr(self, name)
            if not self.in_bounds(cell) or cell in self._wall_set:
                raise ConfigError(f"{name} {cell} is off-grid or a wall")

    def in_bounds(self, cell) -> bool:
        return 0 <= cell[0] < self.width and 0 <= cell[1] < self.height

    def is_open(self, cell) -> bool:
        return self.in_bounds(cell) and cell not in self._wall_set

    @property
    def open_cells(self) -> list[tuple[int, int]]:
        return [(x, y) for y in range(self.height) for x in range(self.width)
                if (x, y) not in self._wall_set]

    @property
    def start_state(self) -> GridState:
        return GridState(*self.agent_start, *self.ghost1_start, *self.ghost2_start)

    def validate(self, state) -> GridState:
        state = GridState(*(int(v) for v in state))
        for cell in (state.agent, state.ghost1, state.ghost2):
            if not self.is_open(cell):
                raise DomainError(f"{cell} is off-grid or a wall in state {tuple(state)}")
        return state

    def to_dict(self) -> dict:
        return {"width": self.width, "height": self.height,
                "walls": [list(w) for w in self.walls], "goal": list(self.goal),
                "agent_start": list(self.agent_start), "ghost1_start": list(self.ghost1_start),
                "ghost2_start": list(self.ghost2_start), "goal_reward": self.goal_reward,
                "step_reward": self.step_reward, "max_steps": self.max_steps}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "GridLayout":
        d = dict(d)
        d["walls"] = tuple(tuple(w) for w in d.get("walls", DEFAULT_WALLS))
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "GridLayout":
        return cls.from_dict(json.loads(text))

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()


def _shift(cell, action):
    dx, dy = MOVES[Action(action)]
    return (cell[0] + dx, cell[1] + dy)


def agent_move(layout: GridLayout, cell, action) -> tuple[int, int]:
    target = _shift(cell, action)
    return target if layout.is_open(target) else tuple(cell)


def ghost_options(layout: GridLayout, cell, kind: int) -> list[tuple[tuple[int, int], float]]:
    """Next-cell distribution of ghost ``kind`` (1 uniform, 2 horizontally biased)."""
    key = (tuple(cell), kind)
    cached = layout._moves.get(key)
    if cached is None:
        cached = layout._moves[key] = tuple(_ghost_options(layout, key[0], kind))
    return list(cached)


def _ghost_options(layout: GridLayout, cell, kind: int):
    moves = [(a, _shift(cell, a)) for a in Action]
    moves = [(a, c) for a, c in moves if layout.is_open(c)]
    if not moves:
        return [(tuple(cell), 1.0)]
    weights = [1.0 if kind == 1 else GHOST2_BIAS[a] for a, _ in moves]
    total = sum(weights)
    return [(c, w / total) for (_, c), w in zip(moves, weights)]


def grid_step(layout: GridLayout, state, action, rng: np.random.Generator, t: int = 0):
    """One environment step from ``state``; ``t`` counts steps already taken this episode.

    Returns ``(next_state, reward, done)``.
    """
    state = layout.validate(state)
    agent = agent_move(layout, state.agent, action)
    ghosts = []
    for kind, cell in ((1, state.ghost1), (2, state.ghost2)):
        options = ghost_options(layout, cell, kind)
        u = rng.random()
        acc = 0.0
        chosen = options[-1][0]
        for c, p in options:
            acc += p
            if u < acc:
                chosen = c
                break
        ghosts.append(chosen)
    nxt = GridState(*agent, *ghosts[0], *ghosts[1])
    at_goal = agent == layout.goal
    reward = layout.goal_reward if at_goal else layout.step_reward
    done = at_goal or t + 1 >= layout.max_steps
    return nxt, reward, done


def grid_true_next_dist(layout: GridLayout, state, action) -> DistTable:
    """Exact next-state distribution by enumerating both ghosts' options."""
    state = layout.validate(state)
    agent = agent_move(layout, state.agent, action)
    table: dict[GridState, float] = {}
    for c1, p1 in ghost_options(layout, state.ghost1, 1):
        for c2, p2 in ghost_options(layout, state.ghost2, 2):
            key = GridState(*agent, *c1, *c2)
            table[key] = table.get(key, 0.0) + p1 * p2
    return DistTable.from_mapping(table)


def all_states(layout: GridLayout):
    cells = layout.open_cells
    for a in cells:
        for g1 in cells:
            for g2 in cells:
                yield GridState(*a, *g1, *g2)


def sample_uncorrelated_transition(layout: GridLayout, rng: np.random.Generator):
    """Uniform valid placement and action, then one environment step."""
    cells = layout.open_cells
    idx = rng.integers(len(cells), size=3)
    state = GridState(*cells[idx[0]], *cells[idx[1]], *cells[idx[2]])
    action = int(rng.integers(len(Action)))
    nxt, _, _ = grid_step(layout, state, action, rng)
    return (state, action), nxt


def uncorrelated_dataset(layout: GridLayout, n: int, rng: np.random.Generator):
    """``X`` rows are ``(6 coords, action)``; ``Y`` rows are the next 6 coords."""
    X = np.empty((n, 7), dtype=np.int64)
    Y = np.empty((n, 6), dtype=np.int64)
    for i in range(n):
        (s, a), nxt = sample_uncorrelated_transition(layout, rng)
        X[i, :6], X[i, 6] = s, a
        Y[i] = nxt
    return X, Y


def _transition_tables(layout: GridLayout):
    """Per open cell: agent successor per action, and ghost option cells/probs (padded to 4)."""
    cells = layout.open_cells
    index = {c: i for i, c in enumerate(cells)}
    agent = np.array([[index[agent_move(layout, c, a)] for a in Action] for c in cells])
    ghost_next = np.zeros((2, len(cells), 4), dtype=np.int64)
    ghost_prob = np.zeros((2, len(cells), 4))
    for kind in (1, 2):
        for i, c in enumerate(cells):
            for j, (cell, p) in enumerate(ghost_options(layout, c, kind)):
                ghost_next[kind - 1, i, j] = index[cell]
                ghost_prob[kind - 1, i, j] = p
    return np.array(cells), agent, ghost_next, ghost_prob


def uncorrelated_batch(layout: GridLayout, n: int, rng: np.random.Generator):
    """Vectorised :func:`uncorrelated_dataset`: same distribution, different draw order."""
    cells, agent, ghost_next, ghost_prob = _transition_tables(layout)
    idx = rng.integers(len(cells), size=(n, 3))
    action = rng.integers(len(Action), size=n)
    nxt = [agent[idx[:, 0], action]]
    for kind in (0, 1):
        cdf = np.cumsum(ghost_prob[kind, idx[:, kind + 1]], axis=1)
        u = rng.random(n)[:, None] * cdf[:, -1:]
        choice = np.minimum((u >= cdf).sum(axis=1), 3)
        nxt.append(ghost_next[kind, idx[:, kind + 1], choice])
    X = np.column_stack([cells[idx].reshape(n, 6), action])
    Y = cells[np.column_stack(nxt)].reshape(n, 6)
    return X.astype(np.int64), Y.astype(np.int64)


class GridEnv:
    """Episodic wrapper keeping the step counter."""

    def __init__(self, layout: GridLayout, rng: np.random.Generator):
        self.layout = layout
        self.rng = rng
        self.state = layout.start_state
        self.t = 0

    def reset(self) -> GridState:
        self.state = self.layout.start_state
        self.t = 0
        return self.state

    def step(self, action):
        self.state, reward, done = grid_step(self.layout, self.state, action, self.rng, self.t)
        self.t += 1
        return self.state, reward, done


# --------------------------------------------------------------------------
# Transition dataset files


def write_transitions(path, X, Y, seed: int, layout: GridLayout) -> None:
    """Binary records of 6 state bytes, 1 action byte, 6 next-state bytes, plus a JSON header."""
    path = Path(path)
    X = np.asarray(X)
    Y = np.asarray(Y)
    records = np.concatenate([X, Y], axis=1).astype("<u1")
    path.with_suffix(".bin").write_bytes(records.tobytes())
    header = {"count": int(len(X)), "seed": int(seed), "layout_hash": layout.digest(),
              "layout": layout.to_dict(), "record": "6xu8 state, u8 action, 6xu8 next state"}
    path.with_suffix(".json").write_text(json.dumps(header, indent=2))


def read_transitions(path):
    path = Path(path)
    header = json.loads(path.with_suffix(".json").read_text())
    records = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<u1")
    records = records.reshape(header["count"], 13).astype(np.int64)
    return records[:, :7], records[:, 7:], header
