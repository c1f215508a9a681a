"""Static SVG boards and model-only rollouts."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Callable
from xml.sax.saxutils import escape

import numpy as np

from stochweave.cvae import TransitionModel, encode_input, sample_prediction
from stochweave.envs import GridLayout, GridState

CELL = 40
COLORS = {"agent": "#1f5fbf", "ghost1": "#c0392b", "ghost2": "#e08e0b"}
MAX_RETRIES = 10


class RolloutAborted(RuntimeError):
    """The model kept proposing states inside walls; carries the draw counts so far."""

    def __init__(self, message: str, violations: int, samples: int):
        super().__init__(message)
        self.violations = violations
        self.samples = samples


def _xy(layout: GridLayout, cell):
    # Board y grows upward; SVG y grows downward.
    return cell[0] * CELL, (layout.height - 1 - cell[1]) * CELL


def next_cell_marginals(model: TransitionModel, state, action, n_samples: int, rng):
    """Per entity, ``{cell: probability}`` estimated from model samples."""
    x = encode_input(model.arch.x_encoding, np.array([list(state) + [int(action)]]))
    draws = sample_prediction(model, x, n_samples, rng)[:, 0, :]
    out = {}
    for name, cols in (("agent", (0, 1)), ("ghost1", (2, 3)), ("ghost2", (4, 5))):
        cells, counts = np.unique(draws[:, cols], axis=0, return_counts=True)
        out[name] = {(int(c[0]), int(c[1])): n / n_samples for c, n in zip(cells, counts)}
    return out


def board_svg(layout: GridLayout, state, marginals: dict | None = None, title: str = "") -> str:
    """SVG 1.1 board: walls black, entities as circles, predicted cells as shaded boxes."""
    w, h = layout.width * CELL, layout.height * CELL
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{w}" height="{h}" '
             f'viewBox="0 0 {w} {h}">']
    if title:
        parts.append(f"<title>{escape(title)}</title>")
    parts.append(f'<rect x="0" y="0" width="{w}" height="{h}" fill="#ffffff" stroke="#000000"/>')
    for cell in layout.walls:
        x, y = _xy(layout, cell)
        parts.append(f'<rect x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="#000000"/>')
    gx, gy = _xy(layout, layout.goal)
    parts.append(f'<rect x="{gx + 2}" y="{gy + 2}" width="{CELL - 4}" height="{CELL - 4}" '
                 'fill="none" stroke="#2e8b57" stroke-width="3"/>')
    for name, probs in (marginals or {}).items():
        for cell, p in sorted(probs.items()):
            x, y = _xy(layout, cell)
            parts.append(f'<rect x="{x}" y="{y}" width="{CELL}" height="{CELL}" '
                         f'fill="{COLORS[name]}" fill-opacity="{p:.4f}" '
                         f'class="{name}-prediction"/>')
    state = GridState(*state)
    for name, cell, r in (("agent", state.agent, 13), ("ghost1", state.ghost1, 10),
                          ("ghost2", state.ghost2, 7)):
        x, y = _xy(layout, cell)
        parts.append(f'<circle cx="{x + CELL // 2}" cy="{y + CELL // 2}" r="{r}" '
                     f'fill="{COLORS[name]}" stroke="#000000" class="{name}"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def render_grid_predictions(model: TransitionModel, layout: GridLayout, states, actions, out_dir,
                            rng: np.random.Generator, n_samples: int = 10000) -> list[Path]:
    """One SVG per (state, action) showing the model's next-cell marginals."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, (state, action) in enumerate(zip(states, actions)):
        marg = next_cell_marginals(model, state, action, n_samples, rng)
        path = out / f"prediction_{i:03d}.svg"
        path.write_text(board_svg(layout, state, marg, f"state {tuple(state)} action {action}"))
        paths.append(path)
    return paths


def policy_of(agent, epsilon: float) -> Callable:
    return lambda state, rng: agent.act(state, epsilon, rng)


def rollout_in_model(model: TransitionModel, layout: GridLayout, policy: Callable, start, steps: int,
                     rng: np.random.Generator, out_dir=None, n_render_samples: int = 1000) -> dict:
    """Roll forward using model samples only; the real environment is never stepped.

    A sampled state with an entity inside a wall is counted as a violation and
    redrawn; after ``MAX_RETRIES`` consecutive invalid draws the rollout aborts.
    """
    state = layout.validate(start)
    traj = {"states": [list(state)], "actions": [], "violations": 0, "samples": 0}
    renders = []
    for t in range(steps):
        action = int(policy(state, rng))
        x = encode_input(model.arch.x_encoding, np.array([list(state) + [action]]))
        for _ in range(MAX_RETRIES + 1):
            proposal = tuple(int(v) for v in sample_prediction(model, x, 1, rng)[0, 0])
            traj["samples"] += 1
            cells = (proposal[0:2], proposal[2:4], proposal[4:6])
            if all(layout.is_open(c) for c in cells):
                break
            traj["violations"] += 1
        else:
            raise RolloutAborted(f"step {t}: {MAX_RETRIES} consecutive wall states",
                                 traj["violations"], traj["samples"])
        if out_dir is not None:
            marg = next_cell_marginals(model, state, action, n_render_samples, rng)
            renders.append((state, marg, f"step {t} action {action}"))
        state = GridState(*proposal)
        traj["actions"].append(action)
        traj["states"].append(list(state))
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for t, (s, marg, title) in enumerate(renders):
            (out / f"step_{t:02d}.svg").write_text(board_svg(layout, s, marg, title))
        (out / "trajectory.json").write_text(json.dumps(traj, indent=2))
    return traj
