"""Small deterministic control tasks used as offline-RL test beds.

Environments are functional: ``reset(rng, n)`` draws ``n`` start states and
``step(s, a)`` advances a batch of states. Nothing is stored on the
instance, so one object can drive any number of parallel episodes.
"""

from __future__ import annotations

import numpy as np


class ToyEnv:
    name = "toy"
    state_dim = 1
    action_dim = 1
    horizon = 50
    action_low = -1.0
    action_high = 1.0
    discrete = False

    def reset(self, rng, n=1):
        raise NotImplementedError

    def step(self, s, a):
        """Return ``(s_next, reward, terminal)`` for a batch of states."""
        raise NotImplementedError

    def expert_action(self, s):
        """Scripted near-optimal controller."""
        raise NotImplementedError

    def random_action(self, rng, n):
        return rng.uniform(self.action_low, self.action_high, size=(n, self.action_dim))

    def clip_action(self, a):
        return np.clip(a, self.action_low, self.action_high)


class LineReach(ToyEnv):
    """Move a point on ``[-1, 1]`` to ``goal``; ``s' = clip(s + 0.1 a)``.

    The reward ``-|s' - goal|`` is paid on the state reached. The fastest
    approach, ``a = clip(10 (goal - s), -1, 1)``, is optimal.
    """

    name = "line-reach"
    state_dim = 1
    action_dim = 1
    horizon = 50
    speed = 0.1

    def __init__(self, goal=0.5):
        self.goal = float(goal)

    def reset(self, rng, n=1):
        return rng.uniform(-1.0, 1.0, size=(n, 1))

    def step(self, s, a):
        a = self.clip_action(np.asarray(a, dtype=np.float64))
        s_next = np.clip(s + self.speed * a, -1.0, 1.0)
        r = -np.abs(s_next[:, 0] - self.goal)
        return s_next, r, np.zeros(len(s), dtype=bool)

    def expert_action(self, s):
        return self.clip_action((self.goal - s) / self.speed)


class PointMass2D(ToyEnv):
    """Double integrator in the unit square with damped velocity.

    State ``(x, y, vx, vy)``, action is a 2-D acceleration. Reward is the
    negative distance of the position to ``goal``.
    """

    name = "point-mass"
    state_dim = 4
    action_dim = 2
    horizon = 60

    def __init__(self, goal=(0.5, 0.5)):
        self.goal = np.asarray(goal, dtype=np.float64)

    def reset(self, rng, n=1):
        pos = rng.uniform(-1.0, 1.0, size=(n, 2))
        return np.concatenate([pos, np.zeros((n, 2))], axis=1)

    def step(self, s, a):
        a = self.clip_action(np.asarray(a, dtype=np.float64))
        v = np.clip(0.8 * s[:, 2:] + 0.2 * a, -1.0, 1.0)
        x = np.clip(s[:, :2] + 0.1 * v, -1.0, 1.0)
        r = -np.linalg.norm(x - self.goal, axis=1)
        return np.concatenate([x, v], axis=1), r, np.zeros(len(s), dtype=bool)

    def expert_action(self, s):
        return self.clip_action(4.0 * (self.goal - s[:, :2]) - 2.0 * s[:, 2:])


class ChainMaze(ToyEnv):
    """Corridor ``[0, 1]`` with a single rewarding exit at the far end.

    Each step moves by ``0.05 a``; reaching ``s >= 0.95`` pays 1 and ends the
    episode. All other rewards are zero.
    """

    name = "chain-maze"
    state_dim = 1
    action_dim = 1
    horizon = 100
    speed = 0.05
    exit = 0.95

    def reset(self, rng, n=1):
        return rng.uniform(0.0, 0.1, size=(n, 1))

    def step(self, s, a):
        a = self.clip_action(np.asarray(a, dtype=np.float64))
        s_next = np.clip(s + self.speed * a, 0.0, 1.0)
        done = s_next[:, 0] >= self.exit
        return s_next, done.astype(np.float64), done

    def expert_action(self, s):
        return np.ones((len(s), 1))


class GridDiscrete(ToyEnv):
    """``size x size`` grid with four moves (right, left, down, up).

    The state is the ``(row, col)`` pair scaled to ``[0, 1]``; the action is
    the move index stored as a float. Each step costs 1 until the
    bottom-right goal is reached.
    """

    name = "grid"
    state_dim = 2
    action_dim = 1
    discrete = True
    num_actions = 4
    _moves = np.array([[0, 1], [0, -1], [1, 0], [-1, 0]])

    def __init__(self, size=4):
        self.size = int(size)
        self.horizon = 4 * self.size

    def _cells(self, s):
        return np.rint(np.asarray(s) * (self.size - 1)).astype(int)

    def reset(self, rng, n=1):
        cells = rng.integers(0, self.size, size=(n, 2))
        return cells / (self.size - 1)

    def step(self, s, a):
        idx = np.clip(np.asarray(a).reshape(len(s)).astype(int), 0, 3)
        cells = np.clip(self._cells(s) + self._moves[idx], 0, self.size - 1)
        done = np.all(cells == self.size - 1, axis=1)
        r = np.where(done, 0.0, -1.0)
        return cells / (self.size - 1), r, done

    def random_action(self, rng, n):
        return rng.integers(0, 4, size=(n, 1)).astype(np.float64)

    def clip_action(self, a):
        return np.clip(np.rint(a), 0, 3)

    def expert_action(self, s):
        cells = self._cells(s)
        right = cells[:, 1] < self.size - 1
        return np.where(right, 0.0, 2.0)[:, None]


ENVS = {
    "line-reach": LineReach,
    "point-mass": PointMass2D,
    "chain-maze": ChainMaze,
    "grid": GridDiscrete,
}


def make_env(name: str) -> ToyEnv:
    try:
        return ENVS[name]()
    except KeyError:
        raise ValueError(f"unknown environment {name!r}; choose from {sorted(ENVS)}") from None


def rollout(env: ToyEnv, act, starts, rng=None):
    """Run one episode from each start state with policy ``act(s, rng)``.

    Returns per-episode returns and the list of per-step transition tuples
    ``(s, a, r, s_next, terminal, alive)``; ``alive`` marks episodes that had
    not terminated before the step.
    """
    s = np.asarray(starts, dtype=np.float64)
    alive = np.ones(len(s), dtype=bool)
    returns = np.zeros(len(s))
    steps = []
    for _ in range(env.horizon):
        a = env.clip_action(np.asarray(act(s, rng), dtype=np.float64).reshape(len(s), env.action_dim))
        s_next, r, done = env.step(s, a)
        returns += np.where(alive, r, 0.0)
        steps.append((s, a, r, s_next, done, alive.copy()))
        alive &= ~done
        s = s_next
        if not alive.any():
            break
    return returns, steps
