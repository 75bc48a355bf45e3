"""
Episodic multi-agent grid worlds: Predator-Prey (pp), Predator-Capture-Prey (pcp)
and the easy Traffic Junction (tj).

Environments are stateless objects holding a GridConfig; all mutable data lives
in EnvState values. step() never modifies its input state, so replaying the
same (config, seed, actions) always yields the same results.
"""

import copy
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
from gymnasium import spaces

from dagcomm.errors import ContractError

logger = logging.getLogger(__name__)

# up, down, left, right, stay
MOVES = np.array([[-1, 0], [1, 0], [0, -1], [0, 1], [0, 0]])
STAY = 4
CAPTURE = 5
GAS, BRAKE = 0, 1

GRID_ACTIONS = ["up", "down", "left", "right", "stay"]
CAPTURE_ACTIONS = GRID_ACTIONS + ["capture"]
TJ_ACTIONS = ["gas", "brake"]


@dataclass
class GridConfig:
    """Static description of one environment instance."""

    env: str = "pp"
    grid_size: int = 10
    n_agents: int = 5
    vision: int = 1
    max_steps: int = 80
    n_prey: int = 1
    n_capture: int = 0
    p_arrive: float = 0.3
    n_max: int = 5
    step_penalty: float = -0.05
    success_bonus: float = 5.0
    capture_penalty: float = -0.05
    collision_penalty: float = -10.0
    time_penalty: float = 0.01

    def validate(self) -> "GridConfig":
        if self.env not in ENV_DEFAULTS:
            raise ContractError(f"unknown environment '{self.env}' (expected one of {sorted(ENV_DEFAULTS)})")
        if self.vision < 0:
            raise ContractError(f"vision must be >= 0, got {self.vision}")
        if self.max_steps <= 0:
            raise ContractError(f"max_steps must be positive, got {self.max_steps}")
        if self.grid_size <= 0 or self.n_agents <= 0:
            raise ContractError("grid_size and n_agents must be positive")
        if self.env == "tj":
            if self.n_agents != self.n_max:
                raise ContractError(f"tj needs one agent slot per car: n_agents {self.n_agents} "
                                    f"!= N_max {self.n_max}")
            if self.grid_size < 3 or self.grid_size % 2 == 0:
                raise ContractError(f"tj grid size must be odd and >= 3, got {self.grid_size}")
            if not 0.0 <= self.p_arrive <= 1.0:
                raise ContractError(f"p_arrive must lie in [0, 1], got {self.p_arrive}")
        else:
            if self.n_prey != 1:
                raise ContractError(f"exactly one prey is supported, got {self.n_prey}")
            n_predators = self.n_agents - self.n_capture
            if self.n_capture < 0 or n_predators < 1:
                raise ContractError(f"role counts ({n_predators} predators + {self.n_capture} capture) "
                                    f"do not sum to {self.n_agents} agents")
            if self.n_agents + self.n_prey > self.grid_size ** 2:
                raise ContractError(f"{self.n_agents + self.n_prey} entities do not fit on a "
                                    f"{self.grid_size}x{self.grid_size} grid")
        return self


ENV_DEFAULTS: Dict[str, dict] = {
    "pp": dict(grid_size=10, n_agents=5, vision=1, max_steps=80, n_capture=0),
    "pcp": dict(grid_size=10, n_agents=5, vision=1, max_steps=80, n_capture=2),
    "tj": dict(grid_size=7, n_agents=5, vision=1, max_steps=20, n_max=5, p_arrive=0.3),
}


@dataclass
class EnvState:
    """Everything that changes during an episode, including the episode's RNG stream."""

    step: int
    rng: np.random.Generator
    positions: np.ndarray                     # (n_agents, 2); -1 for inactive tj slots
    active: np.ndarray                        # (n_agents,) bool
    prey: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=int))
    captured: Optional[np.ndarray] = None     # pcp: capture executed on the prey cell
    route: Optional[np.ndarray] = None        # tj: route id, -1 when inactive
    route_pos: Optional[np.ndarray] = None    # tj: index along the route
    tau: Optional[np.ndarray] = None          # tj: steps since entry
    prev_action: Optional[np.ndarray] = None  # tj: last action, -1 before the first one
    collisions: int = 0


@dataclass
class StepResult:
    state: EnvState
    rewards: np.ndarray
    done: bool
    success: bool
    info: dict


def make_config(env: str, **overrides) -> GridConfig:
    """Default configuration of an environment with optional field overrides."""
    if env not in ENV_DEFAULTS:
        raise ContractError(f"unknown environment '{env}' (expected one of {sorted(ENV_DEFAULTS)})")
    values = dict(ENV_DEFAULTS[env])
    values.update({k: v for k, v in overrides.items() if v is not None})
    return GridConfig(env=env, **values).validate()


def make_env(config_or_name, **overrides) -> "GridEnv":
    config = config_or_name
    if isinstance(config_or_name, str):
        config = make_config(config_or_name, **overrides)
    config.validate()
    logger.debug(f"Building {config.env} environment on a {config.grid_size}x{config.grid_size} grid")
    if config.env == "tj":
        return TrafficJunction(config)
    if config.env == "pcp":
        return PredatorCapturePrey(config)
    return PredatorPrey(config)


class GridEnv:
    """Shared machinery: spaces, vision windows, action validation."""

    channels: List[str] = []

    def __init__(self, config: GridConfig):
        self.config = config.validate()
        self.n_agents = config.n_agents
        self.window = 2 * config.vision + 1

    # -- per-agent metadata ------------------------------------------------
    def agent_group(self, agent: int) -> int:
        return 0

    @property
    def agent_groups(self) -> List[int]:
        return [self.agent_group(a) for a in range(self.n_agents)]

    def action_names(self, agent: int) -> List[str]:
        raise NotImplementedError

    def n_actions(self, agent: int) -> int:
        return len(self.action_names(agent))

    def action_space(self, agent: int) -> spaces.Discrete:
        return spaces.Discrete(self.n_actions(agent))

    @property
    def obs_dim(self) -> int:
        return self.window * self.window * len(self.channels) + self._extra_dim()

    @property
    def observation_space(self) -> spaces.Box:
        return spaces.Box(low=0.0, high=1.0, shape=(self.obs_dim,), dtype=np.float64)

    def _extra_dim(self) -> int:
        return 2

    # -- helpers -----------------------------------------------------------
    def _check_actions(self, state: EnvState, joint_action) -> np.ndarray:
        joint_action = np.asarray(joint_action).astype(np.int64).reshape(-1)
        if joint_action.shape[0] != self.n_agents:
            raise ContractError(f"expected {self.n_agents} actions, got {joint_action.shape[0]}")
        for agent, a in enumerate(joint_action):
            if state.active[agent] and not self.action_space(agent).contains(int(a)):
                raise ContractError(f"agent {agent}: invalid action id {a} "
                                    f"(valid: 0..{self.n_actions(agent) - 1})")
        return joint_action

    def _in_grid(self, cell) -> bool:
        g = self.config.grid_size
        return 0 <= cell[0] < g and 0 <= cell[1] < g

    def _window(self, state: EnvState, agent: int) -> np.ndarray:
        v = self.config.vision
        win = np.zeros((self.window, self.window, len(self.channels)))
        r0, c0 = state.positions[agent]
        for dr in range(-v, v + 1):
            for dc in range(-v, v + 1):
                cell = (r0 + dr, c0 + dc)
                win[dr + v, dc + v] = self._cell_channels(state, agent, cell)
        return win

    def _cell_channels(self, state: EnvState, agent: int, cell) -> np.ndarray:
        raise NotImplementedError

    def _self_position(self, state: EnvState, agent: int) -> np.ndarray:
        return state.positions[agent] / max(self.config.grid_size - 1, 1)

    # -- public API --------------------------------------------------------
    def observe(self, state: EnvState, agent: int) -> np.ndarray:
        """Flattened vision window (rows, cols, channels) followed by the extra features."""
        if not 0 <= agent < self.n_agents:
            raise ContractError(f"agent {agent} does not exist")
        if not state.active[agent]:
            raise ContractError(f"agent {agent} is not active")
        return np.concatenate([self._window(state, agent).reshape(-1), self._extra(state, agent)])

    def observe_all(self, state: EnvState) -> np.ndarray:
        """(n_agents, obs_dim) observations; inactive slots observe all zeros."""
        obs = np.zeros((self.n_agents, self.obs_dim))
        for agent in range(self.n_agents):
            if state.active[agent]:
                obs[agent] = self.observe(state, agent)
        return obs

    def _extra(self, state: EnvState, agent: int) -> np.ndarray:
        return self._self_position(state, agent)

    def reset(self, seed) -> EnvState:
        raise NotImplementedError

    def step(self, state: EnvState, joint_action) -> StepResult:
        raise NotImplementedError

    def success(self, state: EnvState) -> bool:
        raise NotImplementedError

    def render_ascii(self, state: EnvState) -> str:
        raise NotImplementedError


class PredatorPrey(GridEnv):
    """
    Homogeneous predators chase one prey on a square grid. An agent standing on the
    prey cell stays there (its actions are ignored); the episode succeeds once every
    predator shares the prey's cell.
    """

    channels = ["wall", "predator", "prey"]

    def action_names(self, agent: int) -> List[str]:
        return GRID_ACTIONS

    def is_capture_agent(self, agent: int) -> bool:
        return False

    def predators(self) -> List[int]:
        return [a for a in range(self.n_agents) if not self.is_capture_agent(a)]

    def reset(self, seed) -> EnvState:
        rng = np.random.default_rng(seed)
        g = self.config.grid_size
        n_entities = self.n_agents + self.config.n_prey
        cells = rng.choice(g * g, size=n_entities, replace=False)
        coords = np.stack([cells // g, cells % g], axis=1).astype(np.int64)
        return EnvState(step=0, rng=rng, positions=coords[:self.n_agents].copy(),
                        active=np.ones(self.n_agents, dtype=bool), prey=coords[self.n_agents:].copy(),
                        captured=np.zeros(self.n_agents, dtype=bool))

    def _on_prey(self, state: EnvState, agent: int) -> bool:
        return bool(np.array_equal(state.positions[agent], state.prey[0]))

    def _cell_channels(self, state: EnvState, agent: int, cell) -> np.ndarray:
        out = np.zeros(len(self.channels))
        if not self._in_grid(cell):
            out[0] = 1.0
            return out
        for other in range(self.n_agents):
            if other != agent and tuple(state.positions[other]) == tuple(cell):
                out[self._agent_channel(other)] = 1.0
        if tuple(state.prey[0]) == tuple(cell) and not self.is_capture_agent(agent):
            out[self.channels.index("prey")] = 1.0
        return out

    def _agent_channel(self, other: int) -> int:
        return self.channels.index("predator")

    def _settled(self, state: EnvState, agent: int) -> bool:
        return self._on_prey(state, agent)

    def _move_agents(self, state: EnvState, actions: np.ndarray, rewards: np.ndarray) -> None:
        for agent in range(self.n_agents):
            if self._settled(state, agent):
                continue
            a = int(actions[agent])
            if a == CAPTURE:
                if self._on_prey(state, agent):
                    state.captured[agent] = True
                else:
                    rewards[agent] += self.config.capture_penalty
                continue
            target = state.positions[agent] + MOVES[a]
            if self._in_grid(target):
                state.positions[agent] = target

    def _move_prey(self, state: EnvState) -> None:
        pass

    def step(self, state: EnvState, joint_action) -> StepResult:
        actions = self._check_actions(state, joint_action)
        if state.step >= self.config.max_steps:
            raise ContractError(f"episode already finished after {state.step} steps")
        new = copy.deepcopy(state)
        rewards = np.zeros(self.n_agents)
        self._move_agents(new, actions, rewards)
        self._move_prey(new)
        new.step += 1

        won = self.success(new)
        if won:
            rewards += self.config.success_bonus
        else:
            rewards += self.config.step_penalty
        caught = sum(self._on_prey(new, a) for a in range(self.n_agents))
        done = won or new.step >= self.config.max_steps
        return StepResult(new, rewards, done, won, {"collisions": 0, "prey_caught": int(caught)})

    def success(self, state: EnvState) -> bool:
        return all(self._on_prey(state, a) for a in self.predators())

    def render_ascii(self, state: EnvState) -> str:
        g = self.config.grid_size
        grid = [["." for _ in range(g)] for _ in range(g)]
        r, c = state.prey[0]
        grid[r][c] = "X"
        for agent in range(self.n_agents):
            r, c = state.positions[agent]
            mark = "C" if self.is_capture_agent(agent) else "P"
            grid[r][c] = "*" if grid[r][c] == "X" else mark
        return "\n".join("".join(row) for row in grid)


class PredatorCapturePrey(PredatorPrey):
    """
    Heterogeneous variant: the last n_capture agents cannot see the prey and must
    stand on its cell and execute 'capture'. The prey wanders to a random free
    neighbouring cell each step until it is pinned, either by a predator reaching
    its cell or by a capture agent capturing it.
    """

    channels = ["wall", "predator", "capture", "prey"]

    def is_capture_agent(self, agent: int) -> bool:
        return agent >= self.n_agents - self.config.n_capture

    def agent_group(self, agent: int) -> int:
        return int(self.is_capture_agent(agent))

    def action_names(self, agent: int) -> List[str]:
        return CAPTURE_ACTIONS if self.is_capture_agent(agent) else GRID_ACTIONS

    def _agent_channel(self, other: int) -> int:
        return self.channels.index("capture" if self.is_capture_agent(other) else "predator")

    def _extra_dim(self) -> int:
        return 4

    def _extra(self, state: EnvState, agent: int) -> np.ndarray:
        role = np.zeros(2)
        role[self.agent_group(agent)] = 1.0
        return np.concatenate([self._self_position(state, agent), role])

    def _settled(self, state: EnvState, agent: int) -> bool:
        if self.is_capture_agent(agent):
            return bool(state.captured[agent])
        return self._on_prey(state, agent)

    def _move_prey(self, state: EnvState) -> None:
        if any(self._on_prey(state, a) for a in self.predators()) or state.captured.any():
            return
        occupied = {tuple(p) for p in state.positions}
        free = [state.prey[0] + MOVES[k] for k in range(4)]
        free = [cell for cell in free if self._in_grid(cell) and tuple(cell) not in occupied]
        if free:
            state.prey[0] = free[state.rng.integers(len(free))]

    def success(self, state: EnvState) -> bool:
        capture_agents = [a for a in range(self.n_agents) if self.is_capture_agent(a)]
        return super().success(state) and all(
            state.captured[a] and self._on_prey(state, a) for a in capture_agents)


class TrafficJunction(GridEnv):
    """
    Easy traffic junction: an eastbound row and a southbound column cross at the
    grid centre. Cars arrive at the west and north entries with probability
    p_arrive each step (while fewer than N_max are on the grid), follow one of
    the entry's two routes (straight, or turn at the junction) and leave when they
    drive off the grid. Every car pays -0.01 * tau per step, tau being its time
    since entry, and -10 for every step in which it collides.
    """

    channels = ["wall", "road", "car"]
    N_ROUTES = 4

    def __init__(self, config: GridConfig):
        super().__init__(config)
        g = config.grid_size
        mid = g // 2
        east = [(mid, c) for c in range(g)]
        south = [(r, mid) for r in range(g)]
        self.routes = [
            east,                                                   # west entry, straight
            [(mid, c) for c in range(mid + 1)] + south[mid + 1:],   # west entry, turn south
            south,                                                  # north entry, straight
            [(r, mid) for r in range(mid + 1)] + east[mid + 1:],    # north entry, turn east
        ]
        self.entries = [(0, [0, 1]), (1, [2, 3])]
        self.road = {cell for route in self.routes for cell in route}

    def action_names(self, agent: int) -> List[str]:
        return TJ_ACTIONS

    def _extra_dim(self) -> int:
        return 2 + 2 + self.N_ROUTES

    def _extra(self, state: EnvState, agent: int) -> np.ndarray:
        prev = np.zeros(2)
        if state.prev_action[agent] >= 0:
            prev[state.prev_action[agent]] = 1.0
        route = np.zeros(self.N_ROUTES)
        route[state.route[agent]] = 1.0
        return np.concatenate([self._self_position(state, agent), prev, route])

    def _cell_channels(self, state: EnvState, agent: int, cell) -> np.ndarray:
        out = np.zeros(len(self.channels))
        if not self._in_grid(cell):
            out[0] = 1.0
            return out
        if tuple(cell) in self.road:
            out[1] = 1.0
        for other in range(self.n_agents):
            if other != agent and state.active[other] and tuple(state.positions[other]) == tuple(cell):
                out[2] = 1.0
        return out

    def reset(self, seed) -> EnvState:
        n = self.n_agents
        return EnvState(step=0, rng=np.random.default_rng(seed),
                        positions=np.full((n, 2), -1, dtype=np.int64), active=np.zeros(n, dtype=bool),
                        route=np.full(n, -1, dtype=np.int64), route_pos=np.zeros(n, dtype=np.int64),
                        tau=np.zeros(n, dtype=np.int64), prev_action=np.full(n, -1, dtype=np.int64))

    def n_active(self, state: EnvState) -> int:
        return int(state.active.sum())

    def _arrive(self, state: EnvState) -> None:
        for entry, route_ids in self.entries:
            if state.rng.random() >= self.config.p_arrive:
                continue
            free_slots = np.flatnonzero(~state.active)
            if free_slots.size == 0 or self.n_active(state) >= self.config.n_max:
                continue
            route = int(route_ids[state.rng.integers(len(route_ids))])
            start = self.routes[route][0]
            if any(state.active[a] and tuple(state.positions[a]) == start for a in range(self.n_agents)):
                continue
            slot = int(free_slots[0])
            state.active[slot] = True
            state.route[slot] = route
            state.route_pos[slot] = 0
            state.positions[slot] = start
            state.tau[slot] = 0
            state.prev_action[slot] = -1

    def step(self, state: EnvState, joint_action) -> StepResult:
        actions = self._check_actions(state, joint_action)
        if state.step >= self.config.max_steps:
            raise ContractError(f"episode already finished after {state.step} steps")
        new = copy.deepcopy(state)
        rewards = np.zeros(self.n_agents)
        moving = [a for a in range(self.n_agents) if new.active[a]]
        before = {a: tuple(new.positions[a]) for a in moving}

        exited = []
        for a in moving:
            new.tau[a] += 1
            new.prev_action[a] = int(actions[a])
            if actions[a] == GAS:
                new.route_pos[a] += 1
                route = self.routes[new.route[a]]
                if new.route_pos[a] >= len(route):
                    exited.append(a)
                else:
                    new.positions[a] = route[new.route_pos[a]]
            rewards[a] -= self.config.time_penalty * new.tau[a]

        on_grid = [a for a in moving if a not in exited]
        collided = set()
        for i, a in enumerate(on_grid):
            for b in on_grid[i + 1:]:
                same_cell = tuple(new.positions[a]) == tuple(new.positions[b])
                swapped = (tuple(new.positions[a]) == before[b] and tuple(new.positions[b]) == before[a])
                if same_cell or swapped:
                    collided.update((a, b))
        for a in collided:
            rewards[a] += self.config.collision_penalty
        new.collisions += len(collided)

        for a in exited:
            new.active[a] = False
            new.route[a] = -1
            new.positions[a] = (-1, -1)
            new.prev_action[a] = -1
        new.step += 1
        if new.step < self.config.max_steps:
            self._arrive(new)

        done = new.step >= self.config.max_steps
        return StepResult(new, rewards, done, self.success(new),
                          {"collisions": len(collided), "prey_caught": 0})

    def success(self, state: EnvState) -> bool:
        return state.step >= self.config.max_steps and state.collisions == 0

    def render_ascii(self, state: EnvState) -> str:
        g = self.config.grid_size
        grid = [["." if (r, c) in self.road else "#" for c in range(g)] for r in range(g)]
        for a in range(self.n_agents):
            if state.active[a]:
                r, c = state.positions[a]
                grid[r][c] = "!" if grid[r][c].isdigit() else str(a)
        return "\n".join("".join(row) for row in grid)
