"""Desk-scale environments: dense control, sparse reward, and a transfer pair.

All dynamics are deterministic given the reset seed and the action sequence.
Continuous actions are clipped to their bounds; an out-of-range discrete
action is a usage error.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import ConfigurationError, UsageError


@dataclass(frozen=True)
class ObservationSpec:
    dim: int
    low: tuple[float, ...]
    high: tuple[float, ...]


@dataclass(frozen=True)
class ActionSpec:
    kind: str  # "continuous" or "discrete"
    dim: int = 0
    low: tuple[float, ...] = ()
    high: tuple[float, ...] = ()
    n: int = 0

    def __post_init__(self):
        if self.kind == "continuous":
            if self.dim <= 0 or len(self.low) != self.dim or len(self.high) != self.dim:
                raise ConfigurationError("continuous action spec needs dim and per-dim bounds")
            if not all(np.isfinite(lo) and np.isfinite(hi) and lo < hi for lo, hi in zip(self.low, self.high)):
                raise ConfigurationError("continuous bounds must be finite with low < high")
        elif self.kind == "discrete":
            if self.n < 2:
                raise ConfigurationError("discrete action spec needs n >= 2")
        else:
            raise ConfigurationError(f"unknown action kind {self.kind!r}")

    @property
    def is_discrete(self) -> bool:
        return self.kind == "discrete"


@dataclass(frozen=True)
class EnvSpec:
    observation: ObservationSpec
    action: ActionSpec
    max_episode_length: int


@dataclass(frozen=True)
class StepResult:
    observation: np.ndarray
    reward: float
    terminal: bool   # ended by the environment rule: no bootstrap
    truncated: bool  # ended by the time limit: bootstrap from observation


class Env:
    """Common episode bookkeeping; subclasses implement ``_reset``/``_step``."""

    max_episode_length: int = 0

    def __init__(self):
        self._t = 0
        self._done = True
        self.rng = np.random.default_rng(0)

    def spec(self) -> EnvSpec:
        raise NotImplementedError

    def reset(self, seed: int) -> np.ndarray:
        self.rng = np.random.default_rng(int(seed))
        self._t = 0
        self._done = False
        return self._reset()

    def step(self, action) -> StepResult:
        if self._done:
            raise UsageError("step() called on a finished episode; call reset() first")
        obs, reward, terminal = self._step(action)
        self._t += 1
        truncated = (not terminal) and self._t >= self.max_episode_length
        self._done = terminal or truncated
        return StepResult(obs, float(reward), bool(terminal), bool(truncated))

    def _reset(self) -> np.ndarray:
        raise NotImplementedError

    def _step(self, action) -> tuple[np.ndarray, float, bool]:
        raise NotImplementedError


class PointMass2D(Env):
    """Damped point mass pushed toward the origin.

    Observation ``(px, py, vx, vy)``. Spawn: position uniform in
    ``[-1, 1]^2``, zero velocity. Force in ``[-1, 1]^2``; explicit Euler with
    ``dt = 0.1``: ``v += dt * (force - damping * v)``, speed clipped to
    ``max_speed``, then ``p += dt * v`` with position clipped to the arena
    ``[-2, 2]^2`` (velocity into a wall is zeroed). Reward ``-||p - goal||``
    measured after the move. No terminal state; 200-step time limit.
    """

    # Rolling mean return that counts as solved. Over seeds 0..49 the
    # pd_controller scores about -7.4 and zero force about -140.6; the
    # threshold is a quarter of the way from the first to the second,
    # rounded to -40.
    SOLVED_THRESHOLD = -40.0

    def __init__(self, dt=0.1, damping=1.0, max_speed=2.0, arena=2.0, spawn=1.0,
                 goal=(0.0, 0.0), max_episode_length=200):
        super().__init__()
        self.dt = float(dt)
        self.damping = float(damping)
        self.max_speed = float(max_speed)
        self.arena = float(arena)
        self.spawn = float(spawn)
        self.goal = np.asarray(goal, dtype=np.float64)
        self.max_episode_length = int(max_episode_length)
        self.pos = np.zeros(2)
        self.vel = np.zeros(2)

    def spec(self) -> EnvSpec:
        a, s = self.arena, self.max_speed
        return EnvSpec(
            ObservationSpec(4, (-a, -a, -s, -s), (a, a, s, s)),
            ActionSpec("continuous", dim=2, low=(-1.0, -1.0), high=(1.0, 1.0)),
            self.max_episode_length,
        )

    def _obs(self):
        return np.concatenate([self.pos, self.vel])

    def _reset(self):
        self.pos = self.rng.uniform(-self.spawn, self.spawn, size=2)
        self.vel = np.zeros(2)
        return self._obs()

    def _step(self, action):
        force = np.clip(np.asarray(action, dtype=np.float64).reshape(2), -1.0, 1.0)
        vel = self.vel + self.dt * (force - self.damping * self.vel)
        vel = np.clip(vel, -self.max_speed, self.max_speed)
        pos = self.pos + self.dt * vel
        hit = np.abs(pos) > self.arena
        pos = np.clip(pos, -self.arena, self.arena)
        vel[hit] = 0.0
        self.pos, self.vel = pos, vel
        reward = -float(np.linalg.norm(pos - self.goal))
        return self._obs(), reward, False


class SparseCar(Env):
    """Underpowered car in a valley; only reaching the right hilltop pays.

    Observation ``(x, v)``. Spawn ``x ~ U[-0.6, -0.4]``, ``v = 0``. With
    thrust ``a`` in ``[-1, 1]``: ``v += power * a - gravity * cos(3x)``
    (clipped to ``+-max_speed``), then ``x += v`` (unit time step). The left
    wall at ``x = -1.2`` stops the car. ``x >= goal`` gives reward 100 and
    ends the episode; every other step gives 0. 500-step time limit.

    ``power < gravity``: the car cannot hold itself at the valley floor
    slope, so it has to swing. At this power, unit-Gaussian random thrust
    reaches the goal in roughly one episode out of fifteen.
    """

    def __init__(self, power=0.0024, gravity=0.0025, max_speed=0.07, goal=0.45,
                 max_episode_length=500):
        super().__init__()
        self.power = float(power)
        self.gravity = float(gravity)
        self.max_speed = float(max_speed)
        self.goal = float(goal)
        self.max_episode_length = int(max_episode_length)
        self.x = 0.0
        self.v = 0.0

    def spec(self) -> EnvSpec:
        return EnvSpec(
            ObservationSpec(2, (-1.2, -self.max_speed), (0.6, self.max_speed)),
            ActionSpec("continuous", dim=1, low=(-1.0,), high=(1.0,)),
            self.max_episode_length,
        )

    def _obs(self):
        return np.array([self.x, self.v])

    def _reset(self):
        self.x = float(self.rng.uniform(-0.6, -0.4))
        self.v = 0.0
        return self._obs()

    def _step(self, action):
        a = min(max(float(np.asarray(action, dtype=np.float64).reshape(-1)[0]), -1.0), 1.0)
        v = self.v + self.power * a - self.gravity * np.cos(3.0 * self.x)
        v = min(max(v, -self.max_speed), self.max_speed)
        x = self.x + v
        if x < -1.2:
            x, v = -1.2, 0.0
        x = min(x, 0.6)
        self.x, self.v = x, v
        if x >= self.goal:
            return self._obs(), 100.0, True
        return self._obs(), 0.0, False


GRID_LAYOUT = (
    "#########",
    "#...#...#",
    "#...#...#",
    "#.......#",
    "#...#...#",
    "#...#...#",
    "#########",
)
GRID_SPAWN = (1, 1)
GRID_PELLETS = ((1, 3), (3, 2), (5, 1), (2, 6), (4, 7), (5, 5))
GRID_DOOR = (5, 7)
# stay, up, down, left, right
GRID_MOVES = ((0, 0), (-1, 0), (1, 0), (0, -1), (0, 1))


class GridRooms(Env):
    """Two rooms joined by a gap in the middle wall.

    Both variants share walls, spawn cell, observation layout and the five
    actions (stay, up, down, left, right). Observation: a 3x3 window around
    the agent with a wall channel and an item channel (18 values), followed
    by row and column scaled to ``[0, 1]``; ``S = 20``.

    Variant ``"A"``: six pellets worth +1 each; collecting all ends the
    episode; steps cost nothing. Variant ``"B"``: the door cell in the far
    room pays +10 and ends the episode; every step costs 0.01. Moving into a
    wall leaves the agent in place. 100-step time limit.
    """

    def __init__(self, variant="A", max_episode_length=100, step_cost=None):
        super().__init__()
        if variant not in ("A", "B"):
            raise ConfigurationError(f"GridRooms variant must be 'A' or 'B', got {variant!r}")
        self.variant = variant
        self.max_episode_length = int(max_episode_length)
        self.step_cost = float(step_cost if step_cost is not None else (0.0 if variant == "A" else 0.01))
        self.walls = np.array([[c == "#" for c in row] for row in GRID_LAYOUT], dtype=bool)
        self.height, self.width = self.walls.shape
        self.items = np.zeros_like(self.walls)
        self.agent = GRID_SPAWN

    def spec(self) -> EnvSpec:
        s = 20
        return EnvSpec(
            ObservationSpec(s, (0.0,) * s, (1.0,) * s),
            ActionSpec("discrete", n=len(GRID_MOVES)),
            self.max_episode_length,
        )

    def _obs(self):
        r, c = self.agent
        window_w = self.walls[r - 1:r + 2, c - 1:c + 2].astype(np.float64).reshape(-1)
        window_i = self.items[r - 1:r + 2, c - 1:c + 2].astype(np.float64).reshape(-1)
        pos = np.array([r / (self.height - 1), c / (self.width - 1)])
        return np.concatenate([window_w, window_i, pos])

    def _reset(self):
        self.items = np.zeros_like(self.walls)
        if self.variant == "A":
            for cell in GRID_PELLETS:
                self.items[cell] = True
        else:
            self.items[GRID_DOOR] = True
        self.agent = GRID_SPAWN
        return self._obs()

    def _step(self, action):
        a = int(np.asarray(action).reshape(-1)[0])
        if not 0 <= a < len(GRID_MOVES):
            raise UsageError(f"action {a} outside discrete range [0, {len(GRID_MOVES)})")
        dr, dc = GRID_MOVES[a]
        r, c = self.agent[0] + dr, self.agent[1] + dc
        if not self.walls[r, c]:
            self.agent = (r, c)
        reward = -self.step_cost
        terminal = False
        if self.items[self.agent]:
            if self.variant == "A":
                self.items[self.agent] = False
                reward += 1.0
                terminal = not self.items.any()
            else:
                reward += 10.0
                terminal = True
        return self._obs(), reward, terminal


ENV_REGISTRY = {
    "PointMass2D": lambda **kw: PointMass2D(**kw),
    "SparseCar": lambda **kw: SparseCar(**kw),
    "GridRooms-A": lambda **kw: GridRooms("A", **kw),
    "GridRooms-B": lambda **kw: GridRooms("B", **kw),
}


def make_env(env_id: str, **overrides) -> Env:
    try:
        factory = ENV_REGISTRY[env_id]
    except KeyError:
        raise ConfigurationError(f"unknown env id {env_id!r}; known: {sorted(ENV_REGISTRY)}") from None
    try:
        return factory(**overrides)
    except TypeError as exc:
        raise ConfigurationError(f"bad overrides for {env_id}: {exc}") from None


def pd_controller(obs: np.ndarray, kp: float = 3.0, kd: float = 2.0) -> np.ndarray:
    """Hand-tuned PD law for PointMass2D (goal at the origin)."""
    return np.clip(-kp * obs[:2] - kd * obs[2:], -1.0, 1.0)


def scripted_return(env: Env, policy, seeds) -> float:
    """Mean undiscounted episode return of a fixed observation->action map."""
    totals = []
    for seed in seeds:
        obs = env.reset(seed)
        total = 0.0
        while True:
            res = env.step(policy(obs))
            total += res.reward
            obs = res.observation
            if res.terminal or res.truncated:
                break
        totals.append(total)
    return float(np.mean(totals))
