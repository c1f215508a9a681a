import math
from collections import deque

import numpy as np
import pytest
from scipy import integrate, stats

from stochweave.diffcore import ConfigError, DomainError
from stochweave.envs import (
    Action,
    GridEnv,
    GridLayout,
    GridState,
    all_states,
    agent_move,
    ghost_options,
    grid_step,
    grid_true_next_dist,
    read_transitions,
    sample_uncorrelated_transition,
    toy_components,
    toy_dataset,
    toy_density,
    toy_mean,
    toy_sample,
    uncorrelated_batch,
    uncorrelated_dataset,
    write_transitions,
)
from stochweave.metrics import empirical_dist

LAYOUT = GridLayout()
PEAK = 1 / (0.1 * math.sqrt(2 * math.pi))


# --------------------------------------------------------------------------
# Toy function


def test_toy_density_examples():
    assert toy_density(-0.5, 2.5) == pytest.approx(PEAK, rel=1e-12)
    assert PEAK == pytest.approx(3.989, abs=5e-4)
    assert toy_density(0.2, -0.8) == pytest.approx(0.8 * PEAK, rel=1e-12)
    assert 0.8 * PEAK == pytest.approx(3.191, abs=1e-3)


def test_toy_components_by_branch():
    w, m = toy_components(0.25)
    np.testing.assert_allclose(w, [0.2, 0.8])
    np.testing.assert_allclose(m, [1.0, -1.0])
    w, m = toy_components(0.5)
    np.testing.assert_allclose(w, [0.3, 0.5, 0.2])
    np.testing.assert_allclose(m, [5 + math.log(1.5), -0.3, 1.25])
    assert toy_mean(-0.9) == 2.5
    with pytest.raises(DomainError):
        toy_components(1.5)


@pytest.mark.parametrize("x", np.linspace(-0.99, 0.99, 20))
def test_toy_density_integrates_to_one(x):
    _, means = toy_components(float(x))
    points = sorted(means)
    total, _ = integrate.quad(lambda y: toy_density(float(x), y), min(points) - 2, max(points) + 2,
                              points=points, limit=200, epsabs=1e-12, epsrel=1e-12)
    assert total == pytest.approx(1.0, abs=1e-6)


def test_toy_samples_follow_density():
    rng = np.random.default_rng(0)
    for x in (-0.6, 0.1, 0.7):
        draws = np.array([toy_sample(x, rng) for _ in range(4000)])
        w, m = toy_components(x)

        def cdf(y, w=w, m=m):
            return np.sum(w * stats.norm.cdf(np.asarray(y)[..., None], m, 0.1), axis=-1)

        assert stats.kstest(draws, cdf).pvalue > 1e-3


def test_toy_dataset_shapes_and_determinism():
    a = toy_dataset(50, np.random.default_rng(3))
    b = toy_dataset(50, np.random.default_rng(3))
    assert a[0].shape == a[1].shape == (50, 1)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])
    assert np.all(np.abs(a[0]) <= 1)


# --------------------------------------------------------------------------
# Gridworld dynamics


def test_default_layout_size():
    assert len(LAYOUT.open_cells) == 29
    assert sum(1 for _ in all_states(LAYOUT)) * 4 == 97556


def test_layout_json_round_trip_and_validation():
    assert GridLayout.from_json(LAYOUT.to_json()) == LAYOUT
    assert GridLayout.from_json(LAYOUT.to_json()).digest() == LAYOUT.digest()
    with pytest.raises(ConfigError):
        GridLayout(goal=(0, 1))
    with pytest.raises(ConfigError):
        GridLayout(walls=((9, 9),))


def test_goal_reachable_from_start():
    seen, queue = {LAYOUT.agent_start}, deque([LAYOUT.agent_start])
    while queue:
        cell = queue.popleft()
        for a in Action:
            nxt = tuple(int(v) for v in np.add(cell, [(0, 1), (0, -1), (-1, 0), (1, 0)][a]))
            if LAYOUT.is_open(nxt) and nxt not in seen:
                seen.add(nxt)
                queue.append(nxt)
    assert LAYOUT.goal in seen
    assert seen == set(LAYOUT.open_cells)


def test_ghost_probabilities_open_junction():
    assert sorted(p for _, p in ghost_options(LAYOUT, (3, 3), 1)) == [0.25] * 4
    g2 = dict(ghost_options(LAYOUT, (3, 3), 2))
    assert g2 == {(2, 3): 0.4, (4, 3): 0.4, (3, 4): 0.1, (3, 2): 0.1}
    # Vertical corridor: only up and down remain, so they split evenly.
    assert dict(ghost_options(LAYOUT, (3, 1), 2)) == {(3, 2): 0.5, (3, 0): 0.5}


def test_true_next_dist_four_equal_outcomes():
    # Both ghosts sit in horizontal corridors with walls above and below.
    dist = grid_true_next_dist(LAYOUT, (0, 0, 1, 3, 5, 3), Action.UP)
    assert len(dist) == 4
    np.testing.assert_allclose(dist.probs, 0.25, atol=1e-15)


def test_true_next_dist_point_mass():
    # Bottom corners have a single open neighbour.
    dist = grid_true_next_dist(LAYOUT, (3, 3, 0, 0, 6, 0), Action.DOWN)
    assert dist.as_dict() == {(3, 2, 1, 0, 5, 0): 1.0}


def test_agent_moves_and_walls():
    rng = np.random.default_rng(0)
    nxt, r, done = grid_step(LAYOUT, (0, 0, 3, 3, 0, 3), Action.RIGHT, rng)
    assert nxt.agent == (1, 0) and r == 0 and not done
    nxt, _, _ = grid_step(LAYOUT, (0, 0, 3, 3, 0, 3), Action.UP, rng)  # wall above
    assert nxt.agent == (0, 0)
    nxt, _, _ = grid_step(LAYOUT, (0, 0, 3, 3, 0, 3), Action.LEFT, rng)  # grid edge
    assert nxt.agent == (0, 0)


def test_goal_reward_and_episode_cap():
    rng = np.random.default_rng(0)
    nxt, r, done = grid_step(LAYOUT, (5, 6, 3, 3, 0, 3), Action.RIGHT, rng)
    assert nxt.agent == LAYOUT.goal and r == 10.0 and done
    _, r, done = grid_step(LAYOUT, (0, 0, 3, 3, 0, 3), Action.RIGHT, rng, t=LAYOUT.max_steps - 1)
    assert r == 0.0 and done


def test_invalid_state_rejected():
    with pytest.raises(DomainError):
        grid_step(LAYOUT, (0, 1, 3, 3, 0, 3), Action.UP, np.random.default_rng(0))
    with pytest.raises(DomainError):
        grid_true_next_dist(LAYOUT, (0, 0, 7, 3, 0, 3), Action.UP)


def test_true_next_dist_exhaustive_sweep():
    sizes = set()
    for state in all_states(LAYOUT):
        for action in Action:
            dist = grid_true_next_dist(LAYOUT, state, action)
            assert abs(dist.probs.sum() - 1.0) < 1e-12
            agents = {s[:2] for s in dist.support}
            assert len(agents) == 1  # the agent is deterministic
            sizes.add(len(dist))
    assert max(sizes) <= 16


def test_grid_step_matches_oracle_in_total_variation():
    state, action = GridState(3, 3, 3, 3, 3, 3), Action.DOWN
    rng = np.random.default_rng(1)
    n = 10**6
    draws = [grid_step(LAYOUT, state, action, rng)[0] for _ in range(n)]
    emp = empirical_dist(draws).as_dict()
    truth = grid_true_next_dist(LAYOUT, state, action).as_dict()
    keys = set(emp) | set(truth)
    tv = 0.5 * sum(abs(emp.get(k, 0.0) - truth.get(k, 0.0)) for k in keys)
    assert len(truth) == 16
    assert tv < 0.005


def test_env_wrapper_counts_steps():
    env = GridEnv(GridLayout(max_steps=3), np.random.default_rng(0))
    assert env.reset() == env.layout.start_state
    dones = [env.step(Action.LEFT)[2] for _ in range(3)]
    assert dones == [False, False, True]
    env.reset()
    assert env.t == 0


# --------------------------------------------------------------------------
# Uncorrelated data


def test_uncorrelated_samples_valid_and_uniform_agent():
    rng = np.random.default_rng(2)
    counts = {c: 0 for c in LAYOUT.open_cells}
    n = 10**5
    for _ in range(n):
        (state, action), nxt = sample_uncorrelated_transition(LAYOUT, rng)
        counts[state.agent] += 1
    freqs = np.array(list(counts.values())) / n
    np.testing.assert_allclose(freqs, 1 / 29, atol=0.01)
    LAYOUT.validate(state)
    LAYOUT.validate(nxt)
    assert 0 <= action < 4


def test_uncorrelated_batch_matches_step_rules():
    rng = np.random.default_rng(3)
    n = 200_000
    X, Y = uncorrelated_batch(LAYOUT, n, rng)
    assert X.shape == (n, 7) and Y.shape == (n, 6)
    assert X.dtype == Y.dtype == np.int64
    freqs = np.array([np.mean((X[:, 0] == c[0]) & (X[:, 1] == c[1])) for c in LAYOUT.open_cells])
    np.testing.assert_allclose(freqs, 1 / 29, atol=0.01)
    np.testing.assert_allclose(np.bincount(X[:, 6], minlength=4) / n, 0.25, atol=0.01)
    for row, nxt in zip(X[:500], Y[:500]):
        LAYOUT.validate(row[:6])
        assert tuple(nxt) in grid_true_next_dist(LAYOUT, row[:6], row[6]).as_dict()
    # Agent is deterministic; each ghost's move frequencies match its rule, per start cell.
    moved = {tuple(r[:2]) + (r[6],): tuple(y[:2]) for r, y in zip(X, Y)}
    for (ax, ay, act), cell in moved.items():
        assert cell == agent_move(LAYOUT, (ax, ay), act)
    worst = 0.0
    for kind, cols in ((1, (2, 3)), (2, (4, 5))):
        for c in LAYOUT.open_cells:
            sel = (X[:, cols[0]] == c[0]) & (X[:, cols[1]] == c[1])
            emp = empirical_dist(map(tuple, Y[sel][:, list(cols)])).as_dict()
            truth = dict(ghost_options(LAYOUT, c, kind))
            tv = 0.5 * sum(abs(emp.get(k, 0.0) - truth.get(k, 0.0)) for k in set(emp) | set(truth))
            worst = max(worst, tv)
    # About 6900 rows per start cell and at most 4 options.
    assert worst < 0.03


def test_dataset_determinism_and_file_round_trip(tmp_path):
    a = uncorrelated_dataset(LAYOUT, 300, np.random.default_rng(9))
    b = uncorrelated_dataset(LAYOUT, 300, np.random.default_rng(9))
    assert a[0].tobytes() == b[0].tobytes() and a[1].tobytes() == b[1].tobytes()
    write_transitions(tmp_path / "d", *a, seed=9, layout=LAYOUT)
    X, Y, header = read_transitions(tmp_path / "d")
    np.testing.assert_array_equal(X, a[0])
    np.testing.assert_array_equal(Y, a[1])
    assert header["count"] == 300 and header["seed"] == 9
    assert header["layout_hash"] == LAYOUT.digest()
    assert (tmp_path / "d.bin").stat().st_size == 300 * 13
