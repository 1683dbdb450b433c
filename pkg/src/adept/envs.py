"""Toy continuous-control environments with closed-form dynamics."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class ToyEnv:
    name: str
    state_dim: int
    action_dim: int
    action_low: np.ndarray
    action_high: np.ndarray
    episode_cap: int
    r_max: float  # upper bound on |r(s, a)|
    dt: float = 0.1

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def step(self, state: np.ndarray, action: np.ndarray, rng: np.random.Generator | None = None):
        """Return ``(next_state, reward, terminal)``; works on single or batched inputs."""
        raise NotImplementedError

    def clip_action(self, action: np.ndarray) -> np.ndarray:
        return np.clip(action, self.action_low, self.action_high)

    def expert_action(self, state: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class PointMass2D(ToyEnv):
    """Planar point mass driven toward the origin.

    State is (x, y, vx, vy); action is a bounded acceleration. Position and
    velocity live in the box [-2, 2]; hitting a wall clamps the coordinate.
    """

    POS_LIMIT = 2.0
    VEL_LIMIT = 2.0
    ACTION_COST = 0.01

    def __init__(self):
        super().__init__(
            name="point-mass-2d",
            state_dim=4,
            action_dim=2,
            action_low=np.full(2, -1.0),
            action_high=np.full(2, 1.0),
            episode_cap=100,
            r_max=2 * (2 * self.POS_LIMIT) ** 2 + self.ACTION_COST * 2,
        )

    def reset(self, rng):
        return np.concatenate([rng.uniform(-1.0, 1.0, 2), np.zeros(2)])

    def step(self, state, action, rng=None):
        state = np.asarray(state, dtype=np.float64)
        a = self.clip_action(np.asarray(action, dtype=np.float64))
        pos, vel = state[..., :2], state[..., 2:]
        vel2 = np.clip(vel + self.dt * a, -self.VEL_LIMIT, self.VEL_LIMIT)
        pos2 = np.clip(pos + self.dt * vel2, -self.POS_LIMIT, self.POS_LIMIT)
        reward = -np.sum(pos * pos, axis=-1) - self.ACTION_COST * np.sum(a * a, axis=-1)
        nxt = np.concatenate([pos2, vel2], axis=-1)
        return nxt, reward, np.zeros(np.shape(reward), dtype=bool)

    def expert_action(self, state):
        state = np.asarray(state, dtype=np.float64)
        # critically damped PD controller
        return self.clip_action(-1.0 * state[..., :2] - 1.8 * state[..., 2:])


class Pendulum1D(ToyEnv):
    """Torque-limited pendulum; angle 0 is upright, wrapped to [-pi, pi)."""

    MAX_SPEED = 8.0
    G, M, L = 10.0, 1.0, 1.0

    def __init__(self):
        super().__init__(
            name="pendulum-1d",
            state_dim=2,
            action_dim=1,
            action_low=np.full(1, -2.0),
            action_high=np.full(1, 2.0),
            episode_cap=100,
            r_max=np.pi**2 + 0.1 * self.MAX_SPEED**2 + 0.001 * 4.0,
            dt=0.05,
        )

    @staticmethod
    def wrap(theta):
        return (theta + np.pi) % (2 * np.pi) - np.pi

    def reset(self, rng):
        return np.array([rng.uniform(-np.pi, np.pi), rng.uniform(-1.0, 1.0)])

    def step(self, state, action, rng=None):
        state = np.asarray(state, dtype=np.float64)
        u = self.clip_action(np.asarray(action, dtype=np.float64))[..., 0]
        th, thdot = state[..., 0], state[..., 1]
        reward = -(th**2 + 0.1 * thdot**2 + 0.001 * u**2)
        acc = 3 * self.G / (2 * self.L) * np.sin(th) + 3.0 / (self.M * self.L**2) * u
        thdot2 = np.clip(thdot + acc * self.dt, -self.MAX_SPEED, self.MAX_SPEED)
        th2 = self.wrap(th + thdot2 * self.dt)
        nxt = np.stack([th2, thdot2], axis=-1)
        return nxt, reward, np.zeros(np.shape(reward), dtype=bool)

    def expert_action(self, state):
        state = np.asarray(state, dtype=np.float64)
        th, thdot = state[..., 0], state[..., 1]
        # energy pumping toward the upright energy level, PD once close
        gain = 3 * self.G / (2 * self.L)
        energy = 0.5 * thdot**2 + gain * np.cos(th)
        pump = 2.0 * np.sign(thdot + 1e-12) * np.sign(gain - energy)
        pd = -10.0 * th - 2.0 * thdot
        u = np.where((np.abs(th) < 0.5) & (np.abs(thdot) < 2.5), pd, pump)
        return self.clip_action(u[..., None])


ENVS = {"point-mass-2d": PointMass2D, "pendulum-1d": Pendulum1D}


def make_env(name: str) -> ToyEnv:
    try:
        return ENVS[name]()
    except KeyError:
        raise ConfigError(f"unknown environment {name!r}; choose from {sorted(ENVS)}") from None


def run_episode(env: ToyEnv, policy_fn, rng: np.random.Generator, max_steps: int | None = None):
    """Roll ``policy_fn(state) -> action`` for one episode; returns arrays."""
    cap = env.episode_cap if max_steps is None else max_steps
    s = env.reset(rng)
    S, A, R, S2, D = [], [], [], [], []
    for _ in range(cap):
        a = env.clip_action(np.asarray(policy_fn(s), dtype=np.float64))
        s2, r, d = env.step(s, a, rng)
        S.append(s)
        A.append(a)
        R.append(float(r))
        S2.append(s2)
        D.append(bool(d))
        s = s2
        if d:
            break
    return np.array(S), np.array(A), np.array(R), np.array(S2), np.array(D)
