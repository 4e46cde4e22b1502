"""Toy continuous-control tasks and the perturbation wrappers used for robustness sweeps.

Every environment exposes ``reset() -> obs`` and
``step(a) -> (obs, reward, done, info)``.  ``done`` marks physical termination
only; reaching the horizon sets ``info["truncated"]`` with ``done=False`` so
the critic keeps bootstrapping through time limits.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .rng import stream

DT = 0.05


class SimulationFault(FloatingPointError):
    pass


@dataclass(frozen=True)
class EnvSpec:
    env_id: str
    obs_dim: int
    action_dim: int
    horizon: int = 1000
    action_low: float = -1.0
    action_high: float = 1.0

    def __post_init__(self):
        if self.obs_dim <= 0 or self.action_dim <= 0:
            raise ValueError("dimensions must be positive")
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")


@dataclass(frozen=True)
class PerturbationConfig:
    obs_noise_sigma: float = 0.0
    action_noise_sigma: float = 0.0
    mass_scale: float = 1.0
    distractor_dims: int = 0
    distractor_sigma: float = 1.0

    def __post_init__(self):
        if self.obs_noise_sigma < 0 or self.action_noise_sigma < 0 or self.distractor_sigma < 0:
            raise ValueError("noise levels must be non-negative")
        if self.mass_scale <= 0:
            raise ValueError("mass_scale must be positive")
        if self.distractor_dims < 0:
            raise ValueError("distractor_dims must be non-negative")


OBS_NOISE_LEVELS = (0.0, 0.02, 0.04, 0.06, 0.08, 0.1)
MASS_SCALES = (0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 1.75)


def _check_action(a, dim: int) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    if a.shape != (dim,):
        raise ValueError(f"expected action of size {dim}, got {a.shape}")
    if np.any(np.abs(a) > 1.0):
        raise ValueError("actions must lie in [-1, 1]")
    return a


class ToyEnv:
    """Shared bookkeeping: horizon, RNG for resets, mass scaling."""

    env_id = ""
    obs_dim = 0
    action_dim = 0

    def __init__(self, seed: int = 0, horizon: int = 1000):
        self.horizon = horizon
        self.rng = stream(seed, f"env/{self.env_id}")
        self.mass_scale = 1.0
        self.t = 0
        self.state = None

    @property
    def spec(self) -> EnvSpec:
        return EnvSpec(self.env_id, self.obs_dim, self.action_dim, self.horizon)

    @property
    def unwrapped(self) -> "ToyEnv":
        return self

    def reset(self) -> np.ndarray:
        self.t = 0
        self.state = self._initial_state()
        return self._obs()

    def step(self, a):
        if self.state is None:
            raise RuntimeError("call reset() before step()")
        a = _check_action(a, self.action_dim)
        reward = self._reward(self.state, a)
        self.state = self._advance(self.state, a)
        if not all(math.isfinite(x) for x in self.state):
            raise SimulationFault(f"{self.env_id}: non-finite state {self.state}")
        self.t += 1
        truncated = self.t >= self.horizon
        return self._obs(), reward, False, {"truncated": truncated, "true_reward": reward}

    def _initial_state(self):
        raise NotImplementedError

    def _advance(self, state, a):
        raise NotImplementedError

    def _reward(self, state, a) -> float:
        raise NotImplementedError

    def _obs(self) -> np.ndarray:
        raise NotImplementedError

    def reward_bounds(self) -> tuple[float, float]:
        raise NotImplementedError


class Pendulum(ToyEnv):
    """Torque-limited swing-up; angle 0 is upright, pi hangs down.

    theta'' = (g/l) sin(theta) + a * tau_max / (m l^2) - c * theta'

    Each 0.05 s step is integrated with ``substeps`` kick-drift-kick substeps.
    """

    env_id = "pendulum"
    obs_dim = 3
    action_dim = 1

    def __init__(self, seed: int = 0, horizon: int = 1000, *, g: float = 10.0, length: float = 1.0,
                 mass: float = 1.0, tau_max: float = 2.0, damping: float = 0.1,
                 max_speed: float = 8.0, substeps: int = 100):
        super().__init__(seed, horizon)
        self.g, self.length, self.mass = g, length, mass
        self.tau_max, self.damping, self.max_speed = tau_max, damping, max_speed
        self.substeps = substeps

    def _initial_state(self):
        return (float(self.rng.uniform(-math.pi, math.pi)), float(self.rng.uniform(-1.0, 1.0)))

    def accel(self, theta: float, omega: float, a: float) -> float:
        m = self.mass * self.mass_scale
        return ((self.g / self.length) * math.sin(theta)
                + a * self.tau_max / (m * self.length ** 2) - self.damping * omega)

    def _advance(self, state, a):
        theta, omega = state
        m = self.mass * self.mass_scale
        grav = self.g / self.length
        torque = float(a[0]) * self.tau_max / (m * self.length ** 2)
        c, vmax = self.damping, self.max_speed
        half = 0.5 * DT / self.substeps
        # kick-drift-kick substeps: second order, so energy drift stays far below 1e-3 per step
        for _ in range(self.substeps):
            omega += half * (grav * math.sin(theta) + torque - c * omega)
            omega = max(-vmax, min(vmax, omega))
            theta += 2.0 * half * omega
            omega += half * (grav * math.sin(theta) + torque - c * omega)
            omega = max(-vmax, min(vmax, omega))
        theta = (theta + math.pi) % (2.0 * math.pi) - math.pi
        return (theta, omega)

    def energy(self, state) -> float:
        theta, omega = state
        m = self.mass * self.mass_scale
        return 0.5 * m * self.length ** 2 * omega ** 2 + m * self.g * self.length * math.cos(theta)

    def _reward(self, state, a) -> float:
        theta, omega = state
        err = (theta + math.pi) % (2.0 * math.pi) - math.pi
        return -(err ** 2 + 0.1 * omega ** 2 + 0.001 * float(a[0]) ** 2)

    def _obs(self) -> np.ndarray:
        theta, omega = self.state
        return np.array([math.cos(theta), math.sin(theta), omega])

    def reward_bounds(self):
        return -(math.pi ** 2 + 0.1 * self.max_speed ** 2 + 0.001), 0.0


class PointMass(ToyEnv):
    """2-D point mass pushed towards the origin against linear drag."""

    env_id = "pointmass"
    obs_dim = 4
    action_dim = 2

    def __init__(self, seed: int = 0, horizon: int = 1000, *, mass: float = 1.0,
                 force_max: float = 1.0, drag: float = 0.5, bound: float = 2.0):
        super().__init__(seed, horizon)
        self.mass, self.force_max, self.drag, self.bound = mass, force_max, drag, bound

    def _initial_state(self):
        x, y = self.rng.uniform(-1.0, 1.0, 2)
        return (float(x), float(y), 0.0, 0.0)

    def accel(self, v: np.ndarray, a: np.ndarray) -> np.ndarray:
        m = self.mass * self.mass_scale
        return (self.force_max * a - self.drag * v) / m

    def _advance(self, state, a):
        pos = np.array(state[:2])
        vel = np.array(state[2:])
        vel = vel + DT * self.accel(vel, a)
        pos = np.clip(pos + DT * vel, -self.bound, self.bound)
        return (float(pos[0]), float(pos[1]), float(vel[0]), float(vel[1]))

    def _reward(self, state, a) -> float:
        x, y, vx, vy = state
        return -(x * x + y * y + 0.1 * (vx * vx + vy * vy) + 0.001 * float(a @ a))

    def _obs(self) -> np.ndarray:
        return np.array(self.state)

    def reward_bounds(self):
        vmax = self.force_max / self.drag
        return -(2 * self.bound ** 2 + 0.1 * 2 * vmax ** 2 + 0.002), 0.0


class MassSpring(ToyEnv):
    """1-D mass-spring-damper tracking a per-episode constant reference position."""

    env_id = "massspring"
    obs_dim = 3
    action_dim = 1

    def __init__(self, seed: int = 0, horizon: int = 1000, *, mass: float = 1.0, stiffness: float = 4.0,
                 damping: float = 0.2, force_max: float = 4.0):
        super().__init__(seed, horizon)
        self.mass, self.stiffness, self.damping, self.force_max = mass, stiffness, damping, force_max
        self.reference = 0.0

    def _initial_state(self):
        self.reference = float(self.rng.uniform(-0.5, 0.5))
        return (float(self.rng.uniform(-1.0, 1.0)), 0.0)

    def accel(self, x: float, v: float, a: float) -> float:
        m = self.mass * self.mass_scale
        return (-self.stiffness * x - self.damping * v + self.force_max * a) / m

    def _advance(self, state, a):
        x, v = state
        v = v + DT * self.accel(x, v, float(a[0]))
        x = x + DT * v
        return (x, v)

    def _reward(self, state, a) -> float:
        x, v = state
        return -((x - self.reference) ** 2 + 0.1 * v * v + 0.001 * float(a[0]) ** 2)

    def _obs(self) -> np.ndarray:
        x, v = self.state
        return np.array([x - self.reference, v, self.reference])

    def reward_bounds(self):
        # energy with full force bounds |x| <= (F + k*1)/k and |v| accordingly
        xmax = 1.0 + 2.0 * self.force_max / self.stiffness
        vmax = xmax * math.sqrt(self.stiffness / (self.mass * min(self.mass_scale, 1.0)))
        return -((xmax + 0.5) ** 2 + 0.1 * vmax ** 2 + 0.001), 0.0


REGISTRY = {"pendulum": Pendulum, "pointmass": PointMass, "massspring": MassSpring}


class Wrapper:
    """Delegates everything it does not override to the wrapped environment."""

    def __init__(self, env):
        self.env = env

    def __getattr__(self, name):
        return getattr(self.env, name)

    @property
    def spec(self) -> EnvSpec:
        return self.env.spec

    def reset(self):
        return self.env.reset()

    def step(self, a):
        return self.env.step(a)

    @property
    def unwrapped(self):
        env = self.env
        while isinstance(env, Wrapper):
            env = env.env
        return env


class ObsNoise(Wrapper):
    """The agent sees s + N(0, sigma^2 I); rewards still come from the true state."""

    def __init__(self, env, sigma: float, seed: int = 0, tag: str = "obs_noise"):
        super().__init__(env)
        if sigma < 0:
            raise ValueError("sigma must be non-negative")
        self.sigma = sigma
        self.rng = stream(seed, f"wrappers/{tag}")

    def _noisy(self, obs):
        if self.sigma == 0:
            return obs
        return obs + self.sigma * self.rng.standard_normal(obs.shape)

    def reset(self):
        return self._noisy(self.env.reset())

    def step(self, a):
        obs, r, d, info = self.env.step(a)
        info = dict(info, clean_obs=obs)
        return self._noisy(obs), r, d, info


class ActionNoise(Wrapper):
    """Applies clip(a + N(0, sigma^2 I), -1, 1)."""

    def __init__(self, env, sigma: float, seed: int = 0, tag: str = "action_noise"):
        super().__init__(env)
        if sigma < 0:
            raise ValueError("sigma must be non-negative")
        self.sigma = sigma
        self.rng = stream(seed, f"wrappers/{tag}")

    def perturb(self, a) -> np.ndarray:
        a = np.asarray(a, dtype=np.float64)
        if self.sigma == 0:
            return a
        return np.clip(a + self.sigma * self.rng.standard_normal(a.shape), -1.0, 1.0)

    def step(self, a):
        return self.env.step(self.perturb(a))


class MassScale(Wrapper):
    """Multiplies every body mass by ``scale`` at reset."""

    def __init__(self, env, scale: float):
        super().__init__(env)
        if not scale > 0:
            raise ValueError("mass scale must be positive")
        self.scale = scale

    def reset(self):
        self.unwrapped.mass_scale = self.scale
        return self.env.reset()


class Distractors(Wrapper):
    """Appends ``n`` uncontrollable AR(1) dimensions x' = rho x + eps, eps ~ N(0, sigma^2)."""

    def __init__(self, env, n: int, sigma: float = 1.0, rho: float = 0.9, seed: int = 0,
                 tag: str = "distractors"):
        super().__init__(env)
        if n < 0:
            raise ValueError("distractor count must be non-negative")
        if not -1.0 < rho < 1.0:
            raise ValueError("rho must lie in (-1, 1)")
        self.n, self.sigma, self.rho = n, sigma, rho
        self.rng = stream(seed, f"wrappers/{tag}")
        self.x = np.zeros(n)

    @property
    def spec(self) -> EnvSpec:
        return replace(self.env.spec, obs_dim=self.env.spec.obs_dim + self.n)

    def reset(self):
        obs = self.env.reset()
        if self.n == 0:
            return obs
        self.x = self.sigma / math.sqrt(1.0 - self.rho ** 2) * self.rng.standard_normal(self.n)
        return np.concatenate([obs, self.x])

    def step(self, a):
        obs, r, d, info = self.env.step(a)
        if self.n == 0:
            return obs, r, d, info
        self.x = self.rho * self.x + self.sigma * self.rng.standard_normal(self.n)
        return np.concatenate([obs, self.x]), r, d, info


def make_env(env_id: str, seed: int = 0, horizon: int = 1000,
             perturbation: PerturbationConfig | None = None):
    """Build a registered environment wrapped according to ``perturbation``."""
    if env_id not in REGISTRY:
        raise KeyError(f"unknown env {env_id!r}; valid: {sorted(REGISTRY)}")
    env = REGISTRY[env_id](seed=seed, horizon=horizon)
    p = perturbation or PerturbationConfig()
    if p.mass_scale != 1.0:
        env = MassScale(env, p.mass_scale)
    if p.action_noise_sigma > 0:
        env = ActionNoise(env, p.action_noise_sigma, seed)
    if p.distractor_dims > 0:
        env = Distractors(env, p.distractor_dims, p.distractor_sigma, seed=seed)
    if p.obs_noise_sigma > 0:
        env = ObsNoise(env, p.obs_noise_sigma, seed)
    return env
