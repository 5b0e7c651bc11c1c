"""Deterministic 2D kinematic tasks with shared rewards and partial observations.

Three cooperative tasks on the arena [0, L]^2 — chase (predators vs a
scripted prey), gather (all agents meet), and navigate (per-agent goals
behind two circular obstacles) — plus a tiny two-state bandit used as a
sanity target for the trainer.

Agents pick one of 5 discrete actions (stay, +/-x, +/-y); an action adds a
velocity increment, speed is capped, and positions are clamped to the arena.
Observations are fixed-width: own position/velocity, task-relative vectors,
then the nearest-neighbor slots — layout [own pos, own vel, relative...], so
everything after the first four entries is translation-invariant.

All randomness comes through the generator handed to reset(); given that
stream and the action sequence, trajectories are fully determined.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

TASKS = ("predator_prey", "rendezvous", "navigation", "bandit")

N_ACTIONS = 5
# action index -> velocity increment direction
_ACTION_DIRS = np.array([[0.0, 0.0], [1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])

BANDIT_STATES = 2
BANDIT_OPTIMAL = {0: 1, 1: 3}  # state -> rewarded action


@dataclass(frozen=True)
class EnvConfig:
    """Task geometry and episode rules; lengths are fractions of the arena side."""

    task: str
    n_agents: int
    arena: float = 2.0
    step_limit: int = 200
    speed_frac: float = 0.05       # speed cap per step
    accel_frac: float = 0.25       # velocity increment, as a fraction of the cap
    sensing_frac: float = 0.5      # neighbor visibility radius
    n_near: int = 3                # neighbor slots in the observation
    capture_frac: float = 0.1      # chase success radius
    gather_frac: float = 0.1       # gather success: all pairwise distances below
    goal_frac: float = 0.05        # navigate success radius per agent
    agent_radius_frac: float = 0.03
    obstacle_radius_frac: float = 0.08
    min_sep_frac: float = 0.15     # minimum pairwise separation at reset
    prey_speed_mult: float = 1.2
    prey_resample_steps: int = 10
    success_bonus: float = 10.0
    collision_penalty: float = 1.0

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task '{self.task}', choose from {TASKS}")
        if self.n_agents < 1:
            raise ValueError(f"n_agents must be >= 1, got {self.n_agents}")
        if self.task == "bandit" and self.n_agents != 1:
            raise ValueError("the bandit task is single-agent")
        if self.step_limit < 1:
            raise ValueError(f"step_limit must be >= 1, got {self.step_limit}")
        if self.arena <= 0 or self.speed_frac <= 0:
            raise ValueError("arena and speed cap must be positive")

    @property
    def speed_cap(self) -> float:
        return self.speed_frac * self.arena

    @property
    def accel(self) -> float:
        return self.accel_frac * self.speed_cap

    @property
    def sensing_radius(self) -> float:
        return self.sensing_frac * self.arena

    @property
    def obs_dim(self) -> int:
        if self.task == "bandit":
            return BANDIT_STATES
        base = 4 + 2 * self.n_near  # own pos, own vel, neighbor slots
        extra = {"predator_prey": 2, "rendezvous": 0, "navigation": 6}[self.task]
        return base + extra

    @property
    def state_dim(self) -> int:
        if self.task == "bandit":
            return BANDIT_STATES
        base = 4 * self.n_agents
        if self.task == "predator_prey":
            return base + 4  # prey position and velocity
        if self.task == "navigation":
            return base + 2 * self.n_agents + 4  # goals + obstacle centers
        return base


def _sample_separated(rng, n, low, high, min_sep, retries=200):
    low = np.broadcast_to(np.asarray(low, dtype=float), (2,))
    high = np.broadcast_to(np.asarray(high, dtype=float), (2,))
    for attempt in range(retries):
        pts = rng.uniform(low, high, size=(n, 2))
        if n == 1:
            return pts
        d = np.linalg.norm(pts[:, None] - pts[None, :], axis=-1)
        if d[np.triu_indices(n, k=1)].min() >= min_sep:
            return pts
    raise ValueError(
        f"could not place {n} agents with separation {min_sep:.3f} "
        f"in x[{low[0]:.2f}, {high[0]:.2f}] x y[{low[1]:.2f}, {high[1]:.2f}] "
        f"after {retries} draws (ranges too tight?)"
    )


class Env:
    """One world instance; owns its state and the episode's random stream."""

    def __init__(self, cfg: EnvConfig):
        self.cfg = cfg
        self._rng: np.random.Generator | None = None
        self.done = True

    # -- lifecycle ----------------------------------------------------------

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        """Place everything, clear counters; returns [n_agents, obs_dim]."""
        cfg = self.cfg
        self._rng = rng
        L = cfg.arena
        self.t = 0
        self.velocities = np.zeros((cfg.n_agents, 2))
        self.success = False
        self.success_step: int | None = None
        self.collisions_last_step = 0

        if cfg.task == "bandit":
            self.bandit_state = int(rng.integers(BANDIT_STATES))
            self.positions = np.zeros((1, 2))
            self.done = False
            return self.observe_all()

        margin = 0.05 * L
        if cfg.task == "navigation":
            # start strip on the left, goals on the right, obstacles between
            self.positions = _sample_separated(
                rng, cfg.n_agents,
                (margin, margin), (0.25 * L, L - margin),
                cfg.min_sep_frac * L,
            )
            ys = (np.arange(cfg.n_agents) + 1.0) / (cfg.n_agents + 1.0) * L
            self.goals = np.column_stack([np.full(cfg.n_agents, 0.9 * L), ys])
            r = cfg.obstacle_radius_frac * L
            self.obstacles = np.array(
                [[0.5 * L, 0.35 * L, r], [0.5 * L, 0.65 * L, r]]
            )
        else:
            self.positions = _sample_separated(
                rng, cfg.n_agents, margin, L - margin, cfg.min_sep_frac * L
            )
        if cfg.task == "predator_prey":
            self.prey_pos = rng.uniform(0.3 * L, 0.7 * L, size=2)
            self._prey_steps_left = 0
            self.prey_vel = np.zeros(2)
            self._advance_prey_heading()

        self.success = self._success_predicate()
        if self.success:
            self.success_step = 0
        self.done = self.success
        return self.observe_all()

    # -- dynamics -----------------------------------------------------------

    def step(self, joint_action) -> tuple[np.ndarray, float, bool, dict]:
        """Advance one step; returns (observations, shared reward, done, info)."""
        if self.done:
            raise ValueError("episode is done; call reset() first")
        cfg = self.cfg
        actions = np.asarray(joint_action, dtype=np.intp).reshape(-1)
        if actions.shape != (cfg.n_agents,):
            raise ValueError(
                f"joint action needs {cfg.n_agents} entries, got shape {actions.shape}"
            )
        if actions.min() < 0 or actions.max() >= N_ACTIONS:
            raise ValueError(f"actions must be in [0, {N_ACTIONS}), got {actions.tolist()}")

        if cfg.task == "bandit":
            reward = 1.0 if int(actions[0]) == BANDIT_OPTIMAL[self.bandit_state] else 0.0
            self.bandit_state = int(self._rng.integers(BANDIT_STATES))
            self.t += 1
            self.done = self.t >= cfg.step_limit
            return self.observe_all(), reward, self.done, {"success": False, "collisions": 0}

        L = cfg.arena
        self.velocities += cfg.accel * _ACTION_DIRS[actions]
        speeds = np.linalg.norm(self.velocities, axis=1, keepdims=True)
        over = speeds > cfg.speed_cap
        np.divide(
            self.velocities * cfg.speed_cap, speeds,
            out=self.velocities, where=over,
        )
        self.positions += self.velocities
        for axis in range(2):
            low = self.positions[:, axis] < 0.0
            high = self.positions[:, axis] > L
            self.positions[low | high, axis] = np.clip(self.positions[low | high, axis], 0.0, L)
            self.velocities[low | high, axis] = 0.0

        if cfg.task == "predator_prey":
            self._step_prey()

        reward, info = self._reward()
        self.t += 1
        if self._success_predicate():
            if not self.success:
                self.success = True
                self.success_step = self.t
            reward += cfg.success_bonus
        self.done = self.success or self.t >= cfg.step_limit
        info["success"] = self.success
        return self.observe_all(), float(reward), self.done, info

    def _advance_prey_heading(self) -> None:
        theta = self._rng.uniform(0.0, 2.0 * math.pi)
        speed = self.cfg.prey_speed_mult * self.cfg.speed_cap
        self.prey_vel = speed * np.array([math.cos(theta), math.sin(theta)])
        self._prey_steps_left = self.cfg.prey_resample_steps

    def _step_prey(self) -> None:
        if self._prey_steps_left <= 0:
            self._advance_prey_heading()
        self._prey_steps_left -= 1
        L = self.cfg.arena
        nxt = self.prey_pos + self.prey_vel
        for axis in range(2):
            if nxt[axis] < 0.0 or nxt[axis] > L:
                self.prey_vel[axis] = -self.prey_vel[axis]
                nxt[axis] = np.clip(2.0 * np.clip(nxt[axis], 0.0, L) - nxt[axis], 0.0, L)
        self.prey_pos = nxt

    # -- rewards and success ------------------------------------------------

    def _success_predicate(self) -> bool:
        cfg = self.cfg
        L = cfg.arena
        if cfg.task == "predator_prey":
            d = np.linalg.norm(self.positions - self.prey_pos, axis=1)
            return bool(d.min() <= cfg.capture_frac * L)
        if cfg.task == "rendezvous":
            if cfg.n_agents < 2:
                return True
            d = np.linalg.norm(self.positions[:, None] - self.positions[None, :], axis=-1)
            return bool(d[np.triu_indices(cfg.n_agents, k=1)].max() < cfg.gather_frac * L)
        if cfg.task == "navigation":
            d = np.linalg.norm(self.positions - self.goals, axis=1)
            return bool(d.max() < cfg.goal_frac * L)
        return False  # bandit has no success predicate

    def _reward(self) -> tuple[float, dict]:
        cfg = self.cfg
        L = cfg.arena
        if cfg.task == "predator_prey":
            d = np.linalg.norm(self.positions - self.prey_pos, axis=1)
            return -float(d.mean()) / L, {"collisions": 0}
        if cfg.task == "rendezvous":
            if cfg.n_agents < 2:
                return 0.0, {"collisions": 0}
            d = np.linalg.norm(self.positions[:, None] - self.positions[None, :], axis=-1)
            mean_pair = d[np.triu_indices(cfg.n_agents, k=1)].mean()
            return -float(mean_pair) / L, {"collisions": 0}
        if cfg.task == "navigation":
            d = np.linalg.norm(self.positions - self.goals, axis=1)
            shaped = -float(d.mean()) / L
            collisions = 0
            if cfg.n_agents > 1:
                pair = np.linalg.norm(
                    self.positions[:, None] - self.positions[None, :], axis=-1
                )
                iu = np.triu_indices(cfg.n_agents, k=1)
                collisions += int((pair[iu] < 2.0 * cfg.agent_radius_frac * L).sum())
            for ox, oy, orad in self.obstacles:
                od = np.linalg.norm(self.positions - np.array([ox, oy]), axis=1)
                collisions += int((od < orad + cfg.agent_radius_frac * L).sum())
            self.collisions_last_step = collisions
            return shaped - cfg.collision_penalty * collisions, {"collisions": collisions}
        return 0.0, {"collisions": 0}

    # -- observations -------------------------------------------------------

    def observe(self, agent: int) -> np.ndarray:
        """Agent-local view: a pure function of the current world state."""
        cfg = self.cfg
        if not 0 <= agent < cfg.n_agents:
            raise ValueError(f"agent {agent} out of range [0, {cfg.n_agents})")
        if cfg.task == "bandit":
            out = np.zeros(BANDIT_STATES)
            out[self.bandit_state] = 1.0
            return out
        L = cfg.arena
        cap = cfg.speed_cap
        own = [self.positions[agent] / L, self.velocities[agent] / cap]
        rel = []
        if cfg.task == "predator_prey":
            rel.append((self.prey_pos - self.positions[agent]) / L)
        elif cfg.task == "navigation":
            rel.append((self.goals[agent] - self.positions[agent]) / L)
            for ox, oy, _ in self.obstacles:
                rel.append((np.array([ox, oy]) - self.positions[agent]) / L)
        rel.append(self._neighbor_slots(agent))
        return np.concatenate(own + rel)

    def observe_all(self) -> np.ndarray:
        return np.stack([self.observe(i) for i in range(self.cfg.n_agents)])

    def _neighbor_slots(self, agent: int) -> np.ndarray:
        cfg = self.cfg
        slots = np.zeros(2 * cfg.n_near)
        offsets = self.positions - self.positions[agent]
        dist = np.linalg.norm(offsets, axis=1)
        order = sorted(
            (i for i in range(cfg.n_agents)
             if i != agent and dist[i] <= cfg.sensing_radius),
            key=lambda i: (dist[i], i),
        )
        for slot, i in enumerate(order[: cfg.n_near]):
            slots[2 * slot : 2 * slot + 2] = offsets[i] / cfg.arena
        return slots

    def global_state(self) -> np.ndarray:
        """Centralized-critic input: every agent's kinematics plus task extras."""
        cfg = self.cfg
        if cfg.task == "bandit":
            return self.observe(0)
        L = cfg.arena
        cap = cfg.speed_cap
        parts = [self.positions.reshape(-1) / L, self.velocities.reshape(-1) / cap]
        if cfg.task == "predator_prey":
            parts += [self.prey_pos / L, self.prey_vel / cap]
        elif cfg.task == "navigation":
            parts += [self.goals.reshape(-1) / L, self.obstacles[:, :2].reshape(-1) / L]
        return np.concatenate(parts)

    # -- snapshots ------------------------------------------------------------

    def state(self) -> dict:
        """Everything needed to resume this episode exactly, RNG included."""
        if self._rng is None:
            raise ValueError("cannot snapshot an environment before reset()")
        s = {
            "t": self.t,
            "done": self.done,
            "success": self.success,
            "success_step": self.success_step,
            "collisions_last_step": self.collisions_last_step,
            "positions": self.positions.copy(),
            "velocities": self.velocities.copy(),
            "rng": self._rng.bit_generator.state,
        }
        if self.cfg.task == "bandit":
            s["bandit_state"] = self.bandit_state
        if self.cfg.task == "predator_prey":
            s["prey_pos"] = self.prey_pos.copy()
            s["prey_vel"] = self.prey_vel.copy()
            s["prey_steps_left"] = self._prey_steps_left
        if self.cfg.task == "navigation":
            s["goals"] = self.goals.copy()
            s["obstacles"] = self.obstacles.copy()
        return s

    def load_state(self, state: dict) -> None:
        n = self.cfg.n_agents
        self.t = int(state["t"])
        self.done = bool(state["done"])
        self.success = bool(state["success"])
        raw = state["success_step"]
        self.success_step = None if raw is None else int(raw)
        self.collisions_last_step = int(state["collisions_last_step"])
        self.positions = np.asarray(state["positions"], dtype=np.float64).reshape(n, 2)
        self.velocities = np.asarray(state["velocities"], dtype=np.float64).reshape(n, 2)
        rng = np.random.Generator(np.random.PCG64())
        rng.bit_generator.state = state["rng"]
        self._rng = rng
        if self.cfg.task == "bandit":
            self.bandit_state = int(state["bandit_state"])
        if self.cfg.task == "predator_prey":
            self.prey_pos = np.asarray(state["prey_pos"], dtype=np.float64).reshape(2)
            self.prey_vel = np.asarray(state["prey_vel"], dtype=np.float64).reshape(2)
            self._prey_steps_left = int(state["prey_steps_left"])
        if self.cfg.task == "navigation":
            self.goals = np.asarray(state["goals"], dtype=np.float64).reshape(n, 2)
            self.obstacles = np.asarray(state["obstacles"], dtype=np.float64).reshape(2, 3)


@dataclass(frozen=True)
class EpisodeResult:
    success: bool
    steps_to_complete: int
    total_reward: float

    def __post_init__(self):
        if self.steps_to_complete < 0:
            raise ValueError("steps_to_complete cannot be negative")


def episode_metrics(success_flags, rewards, step_limit: int) -> EpisodeResult:
    """Summarize one episode. success_flags[k] is the predicate after k steps
    (index 0 is the reset-time check), rewards has one entry per step taken."""
    flags = list(success_flags)
    total = float(np.sum(rewards)) if len(rewards) else 0.0
    for k, flag in enumerate(flags):
        if flag:
            return EpisodeResult(True, k, total)
    return EpisodeResult(False, step_limit, total)
