"""Small cooperative Dec-POMDPs where good play needs asymmetric duties.

* ``formation``: 6 agents on a 12-cell line must spread over the odd cells.
* ``sacrifice``: 4 agents in an 8-cell corridor; one must hold a pressure
  plate so the others can pass a gate.
* ``harvest``: 4 agents of two classes on a 5x5 grid; each class earns more
  from its own resource type.
* ``twostate``: single-agent 2-state, 2-action MDP used as a Q-learning
  sanity check against value iteration.

All dynamics are deterministic; ``seed`` only matters for ``twostate``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ENV_KINDS = ("formation", "sacrifice", "harvest", "twostate")


@dataclass
class StepResult:
    obs: np.ndarray  # [n, obs_dim]
    state: np.ndarray  # [state_dim]
    reward: float
    done: bool
    info: dict = field(default_factory=dict)


def _window(positions, own, size, radius=2):
    """Other agents per cell in ``own-radius .. own+radius`` (fraction of team); -1 off the map."""
    out = np.empty(2 * radius + 1)
    others = len(positions) - 1
    for k, c in enumerate(range(own - radius, own + radius + 1)):
        if c < 0 or c >= size:
            out[k] = -1.0
        else:
            out[k] = (np.count_nonzero(positions == c) - (c == own)) / max(others, 1)
    return out


class ToyEnv:
    kind = ""
    n_agents = 0
    obs_dim = 0
    state_dim = 0
    n_actions = 0
    horizon = 0
    action_names: tuple[str, ...] = ()

    def __init__(self):
        self.t = 0

    def reset(self, seed=None) -> StepResult:
        raise NotImplementedError

    def step(self, actions) -> StepResult:
        raise NotImplementedError

    def _check_actions(self, actions):
        a = np.asarray(actions)
        if a.shape != (self.n_agents,):
            raise ValueError(f"{self.kind}: expected {self.n_agents} actions, got shape {a.shape}")
        if not np.issubdtype(a.dtype, np.integer) or a.min() < 0 or a.max() >= self.n_actions:
            raise ValueError(f"{self.kind}: invalid action in {a.tolist()} (valid 0..{self.n_actions - 1})")
        return a.astype(np.int64)

    def success(self, result: StepResult) -> float:
        """Success flag for the terminal step (nan when the env has none)."""
        return float("nan")


class Formation(ToyEnv):
    kind = "formation"
    n_agents = 6
    size = 12
    targets = (1, 3, 5, 7, 9, 11)
    start = (5, 6, 5, 6, 5, 6)
    n_actions = 3
    horizon = 20
    obs_dim = 7
    state_dim = 7
    action_names = ("left", "right", "stay")
    _moves = np.array([-1, 1, 0])

    def reset(self, seed=None):
        self.t = 0
        self.pos = np.array(self.start)
        return StepResult(self._obs(), self._state(), 0.0, False, {"positions": self.pos.copy()})

    def step(self, actions):
        a = self._check_actions(actions)
        self.pos = np.clip(self.pos + self._moves[a], 0, self.size - 1)
        self.t += 1
        reward = self.step_reward(self.pos)
        return StepResult(self._obs(), self._state(), reward, self.t >= self.horizon, {"positions": self.pos.copy()})

    @classmethod
    def step_reward(cls, positions):
        held = len(set(cls.targets) & set(int(p) for p in positions))
        return held / len(cls.targets) - 0.01

    def _obs(self):
        return np.stack(
            [
                np.concatenate([[p / (self.size - 1), self.t / self.horizon], _window(self.pos, p, self.size)])
                for p in self.pos
            ]
        )

    def _state(self):
        return np.concatenate([self.pos / (self.size - 1), [self.t / self.horizon]])

    def success(self, result):
        return float(set(self.targets) <= set(int(p) for p in result.info["positions"]))


class Sacrifice(ToyEnv):
    """Gate between cells 4 and 5 is open while anyone stands on cell 2.

    Gate status is read before agents move, so the plate-holder must already
    be on the plate when a runner steps through.
    """

    kind = "sacrifice"
    n_agents = 4
    size = 8
    plate = 2
    gate = (4, 5)
    goal = 7
    n_actions = 3
    horizon = 10
    obs_dim = 8
    state_dim = 6
    action_names = ("left", "right", "stay")
    _moves = np.array([-1, 1, 0])

    def reset(self, seed=None):
        self.t = 0
        self.pos = np.zeros(self.n_agents, dtype=np.int64)
        self.gate_was_open = False
        return StepResult(self._obs(), self._state(), 0.0, False, {"positions": self.pos.copy(), "gate_open": False})

    @classmethod
    def transition(cls, pos, actions):
        pos = np.asarray(pos)
        gate_open = bool(np.any(pos == cls.plate))
        new = np.clip(pos + cls._moves[actions], 0, cls.size - 1)
        if not gate_open:
            lo, hi = cls.gate
            crossing = ((pos == lo) & (new == hi)) | ((pos == hi) & (new == lo))
            new = np.where(crossing, pos, new)
        return new, gate_open

    def step(self, actions):
        a = self._check_actions(actions)
        self.pos, self.gate_was_open = self.transition(self.pos, a)
        self.t += 1
        done = self.t >= self.horizon
        reward = 0.25 * np.count_nonzero(self.pos == self.goal) if done else 0.0
        info = {"positions": self.pos.copy(), "gate_open": self.gate_was_open}
        return StepResult(self._obs(), self._state(), float(reward), done, info)

    def _obs(self):
        plate = float(np.any(self.pos == self.plate))
        return np.stack(
            [
                np.concatenate([[p / (self.size - 1), float(self.gate_was_open), plate], _window(self.pos, p, self.size)])
                for p in self.pos
            ]
        )

    def _state(self):
        plate = float(np.any(self.pos == self.plate))
        return np.concatenate([self.pos / (self.size - 1), [plate, self.t / self.horizon]])

    def success(self, result):
        return float(np.count_nonzero(result.info["positions"] == self.goal) >= self.n_agents - 1)


class Harvest(ToyEnv):
    """Classes A, A, B, B start at the centre of a 5x5 grid.

    Picking a ready resource pays 1 for a class match and 0.25 otherwise; a
    picked resource is ready again two steps later. Simultaneous pickers of
    one cell are served in agent order, so only the first is paid.
    """

    kind = "harvest"
    n_agents = 4
    size = 5
    classes = ("A", "A", "B", "B")
    # (row, col, type): type 0 = a (west column), 1 = b (east column)
    resources = ((1, 0, 0), (3, 0, 0), (1, 4, 1), (3, 4, 1))
    start = (2, 2)
    respawn = 2
    n_actions = 5
    horizon = 15
    obs_dim = 12
    state_dim = 13
    action_names = ("up", "down", "left", "right", "pick")
    _moves = np.array([[-1, 0], [1, 0], [0, -1], [0, 1], [0, 0]])

    def reset(self, seed=None):
        self.t = 0
        self.pos = np.tile(np.array(self.start), (self.n_agents, 1))
        self.ready_at = np.zeros(len(self.resources), dtype=np.int64)
        return StepResult(self._obs(), self._state(), 0.0, False, {"positions": self.pos.copy()})

    def step(self, actions):
        a = self._check_actions(actions)
        reward = 0.0
        for i in range(self.n_agents):
            if a[i] != 4:
                continue
            r = self._resource_at(self.pos[i])
            if r is not None and self.t >= self.ready_at[r]:
                match = self.resources[r][2] == (0 if self.classes[i] == "A" else 1)
                reward += 1.0 if match else 0.25
                self.ready_at[r] = self.t + self.respawn
        self.pos = np.clip(self.pos + self._moves[a], 0, self.size - 1)
        self.t += 1
        done = self.t >= self.horizon
        return StepResult(self._obs(), self._state(), reward, done, {"positions": self.pos.copy()})

    def _resource_at(self, cell):
        for k, (r, c, _) in enumerate(self.resources):
            if cell[0] == r and cell[1] == c:
                return k
        return None

    def _local_map(self, cell):
        out = np.zeros(9)
        for k, (r, c, kind) in enumerate(self.resources):
            dr, dc = r - cell[0], c - cell[1]
            if abs(dr) <= 1 and abs(dc) <= 1 and self.t >= self.ready_at[k]:
                out[(dr + 1) * 3 + dc + 1] = 1.0 if kind == 0 else -1.0
        return out

    def _obs(self):
        return np.stack(
            [
                np.concatenate(
                    [self.pos[i] / (self.size - 1), [1.0 if self.classes[i] == "A" else 0.0], self._local_map(self.pos[i])]
                )
                for i in range(self.n_agents)
            ]
        )

    def _state(self):
        ready = (self.t >= self.ready_at).astype(np.float64)
        return np.concatenate([self.pos.reshape(-1) / (self.size - 1), ready, [self.t / self.horizon]])


class TwoState(ToyEnv):
    """Single agent; action 1 toggles the state, action 0 keeps it.

    Rewards: r(0,0)=0, r(0,1)=0.5, r(1,0)=1, r(1,1)=0. Start state is drawn
    from the seed so both states are visited.
    """

    kind = "twostate"
    n_agents = 1
    n_actions = 2
    horizon = 3
    obs_dim = 3
    state_dim = 3
    action_names = ("keep", "toggle")
    rewards = np.array([[0.0, 0.5], [1.0, 0.0]])

    def reset(self, seed=None):
        self.t = 0
        self.s = int(np.random.default_rng(seed).integers(2))
        return StepResult(self._obs(), self._state(), 0.0, False, {"positions": np.array([self.s])})

    def step(self, actions):
        a = self._check_actions(actions)
        reward = float(self.rewards[self.s, a[0]])
        self.s = self.s ^ int(a[0])
        self.t += 1
        return StepResult(self._obs(), self._state(), reward, self.t >= self.horizon, {"positions": np.array([self.s])})

    def _obs(self):
        return self._state().reshape(1, -1)

    def _state(self):
        return np.array([1.0 - self.s, float(self.s), self.t / self.horizon])


_REGISTRY = {cls.kind: cls for cls in (Formation, Sacrifice, Harvest, TwoState)}


def make_env(kind: str) -> ToyEnv:
    try:
        return _REGISTRY[kind]()
    except KeyError:
        raise ValueError(f"unknown env kind {kind!r}; expected one of {ENV_KINDS}") from None


def env_reset(kind: str, seed=None):
    """Fresh environment of ``kind`` and its initial step result."""
    env = make_env(kind)
    return env, env.reset(seed)


def ground_truth_partition(kind: str, positions) -> list[str]:
    """Duty label per agent for a finished episode.

    ``positions`` is the per-step position record ``[T+1, n, ...]`` including
    the reset configuration.
    """
    positions = np.asarray(positions)
    if kind == "harvest":
        return list(Harvest.classes)
    if kind == "formation":
        final = positions[-1]
        slots = np.array(Formation.targets)
        return [f"slot{int(slots[np.argmin(np.abs(slots - p))])}" for p in final]
    if kind == "sacrifice":
        on_plate = np.count_nonzero(positions[1:] == Sacrifice.plate, axis=0)
        holder = int(np.argmax(on_plate))
        return ["holder" if i == holder else "runner" for i in range(positions.shape[1])]
    if kind == "twostate":
        return ["solo"]
    raise ValueError(f"unknown env kind {kind!r}")
