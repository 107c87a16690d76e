"""Deterministic toy control environments with exact state replay.

Angles are measured from the upright position, so ``theta == 0`` is the
balanced configuration and ``theta == pi`` hangs down. Dynamics are
integrated with fixed-step RK4; observations are a frozen random tanh
feature map of the encoded physical state plus optional Gaussian noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class InvalidStateError(ValueError):
    pass


class EnvNotReadyError(RuntimeError):
    pass


@dataclass(frozen=True)
class EnvConfig:
    env_id: str = "pendulum"
    obs_dim: int = 16
    obs_noise: float = 0.01
    action_repeat: int = 2
    dt: float = 0.01
    episode_length: int = 500
    seed: int = 0
    damping: float = 0.0

    def __post_init__(self):
        if self.env_id not in ENVIRONMENTS:
            raise ValueError(f"unknown environment {self.env_id!r}; choose from {sorted(ENVIRONMENTS)}")
        if self.action_repeat < 1:
            raise ValueError("action_repeat must be >= 1")
        if self.obs_noise < 0:
            raise ValueError("obs_noise must be >= 0")
        if self.obs_dim < 1 or self.dt <= 0 or self.episode_length < 1:
            raise ValueError("obs_dim, dt and episode_length must be positive")


def wrap_angle(theta):
    """Map angles into (-pi, pi]."""
    theta = np.asarray(theta, dtype=float)
    wrapped = np.mod(theta + math.pi, 2 * math.pi) - math.pi
    wrapped = np.where(wrapped == -math.pi, math.pi, wrapped)
    # leave in-range values untouched so wrapping is exactly idempotent
    return np.where((theta > -math.pi) & (theta <= math.pi), theta, wrapped)


def circular_distance(a, b):
    d = np.mod(np.abs(np.asarray(a, dtype=float) - np.asarray(b, dtype=float)), 2 * math.pi)
    return np.minimum(d, 2 * math.pi - d)


def tolerance(x, margin: float, value_at_margin: float = 0.1, sigmoid: str = "gaussian"):
    """Reward shaping that is 1 at 0 and ``value_at_margin`` at ``|x| == margin``."""
    d = np.asarray(x, dtype=float) / margin
    if sigmoid == "gaussian":
        return np.exp(math.log(value_at_margin) * d**2)
    if sigmoid == "quadratic":
        scale = math.sqrt(1 - value_at_margin)
        y = 1 - (scale * d) ** 2
        return np.where(np.abs(scale * d) < 1, y, 0.0)
    raise ValueError(sigmoid)


def rk4(f, s, u, dt):
    k1 = f(s, u)
    k2 = f(s + 0.5 * dt * k1, u)
    k3 = f(s + 0.5 * dt * k2, u)
    k4 = f(s + dt * k3, u)
    return s + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


class Environment:
    """Base class; subclasses define the physics, reward and scripted controller."""

    name = ""
    components: tuple[str, ...] = ()
    angle_mask: np.ndarray
    position_mask: np.ndarray
    excluded: tuple[str, ...] = ()
    bounds: dict[str, float] = {}
    state_scale: np.ndarray
    action_dim = 1
    ood_catalog: dict[str, tuple[np.ndarray, str]] = {}

    def __init__(self, cfg: EnvConfig):
        self.cfg = cfg
        self._state: np.ndarray | None = None
        self.clip_count = 0
        self.observation_reads = 0
        seq = np.random.SeedSequence([cfg.seed, 0x0B5])
        map_rng = np.random.default_rng(seq)
        d_in = self.encoded_dim
        hidden = 2 * cfg.obs_dim
        self._w1 = map_rng.standard_normal((hidden, d_in)) * (1.5 / math.sqrt(d_in))
        self._b1 = map_rng.standard_normal(hidden) * 0.5
        self._w2 = map_rng.standard_normal((cfg.obs_dim, hidden)) * (1.5 / math.sqrt(hidden))
        self._b2 = map_rng.standard_normal(cfg.obs_dim) * 0.1

    # -- state bookkeeping ------------------------------------------------

    @property
    def state_dim(self) -> int:
        return len(self.components)

    @property
    def encoded_dim(self) -> int:
        return self.state_dim + int(self.angle_mask.sum())

    @property
    def decoded_mask(self) -> np.ndarray:
        """Mask over encoded components kept by the physical decoder."""
        keep = []
        for name, is_angle in zip(self.components, self.angle_mask):
            flag = name not in self.excluded
            keep.extend([flag, flag] if is_angle else [flag])
        return np.array(keep, dtype=bool)

    @property
    def decoded_dim(self) -> int:
        return int(self.decoded_mask.sum())

    @property
    def state(self) -> np.ndarray:
        if self._state is None:
            raise EnvNotReadyError("environment has not been reset")
        return self._state.copy()

    def validate_state(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        if s.shape != (self.state_dim,):
            raise InvalidStateError(f"{self.name}: expected state of shape ({self.state_dim},), got {s.shape}")
        for name, value in zip(self.components, s):
            if not np.isfinite(value):
                raise InvalidStateError(f"{self.name}: component {name!r} is not finite")
            bound = self.bounds.get(name)
            if bound is not None and abs(value) > bound:
                raise InvalidStateError(f"{self.name}: |{name}| = {abs(value):g} exceeds bound {bound:g}")
        return np.where(self.angle_mask, wrap_angle(s), s)

    def encode_physical(self, s) -> np.ndarray:
        """Angles become (sin, cos) pairs in place; other components pass through."""
        s = np.asarray(s, dtype=float)
        parts = []
        for i, is_angle in enumerate(self.angle_mask):
            if is_angle:
                parts.append(np.sin(s[..., i]))
                parts.append(np.cos(s[..., i]))
            else:
                parts.append(s[..., i])
        return np.stack(parts, axis=-1)

    def decode_physical(self, y) -> np.ndarray:
        """Inverse of the decoder layout: encoded vector without excluded
        components back to raw components (angles via arctan2)."""
        y = np.asarray(y, dtype=float)
        out = []
        j = 0
        for name, is_angle in zip(self.components, self.angle_mask):
            if name in self.excluded:
                continue
            if is_angle:
                out.append(np.arctan2(y[..., j], y[..., j + 1]))
                j += 2
            else:
                out.append(y[..., j])
                j += 1
        return np.stack(out, axis=-1)

    def kept_components(self) -> list[str]:
        return [c for c in self.components if c not in self.excluded]

    def observe(self, s, rng: np.random.Generator | None = None) -> np.ndarray:
        e = self.encode_physical(s) / self.state_scale_encoded
        o = np.tanh(self._w2 @ np.tanh(self._w1 @ e + self._b1) + self._b2)
        if self.cfg.obs_noise > 0 and rng is not None:
            o = o + rng.normal(0.0, self.cfg.obs_noise, size=o.shape)
        return o

    @property
    def state_scale_encoded(self) -> np.ndarray:
        scale = []
        for sc, is_angle in zip(self.state_scale, self.angle_mask):
            scale.extend([1.0, 1.0] if is_angle else [sc])
        return np.array(scale)

    # -- dynamics ---------------------------------------------------------

    def derivatives(self, s: np.ndarray, u: float) -> np.ndarray:
        raise NotImplementedError

    def reward(self, s: np.ndarray, a: np.ndarray) -> float:
        raise NotImplementedError

    def sample_initial(self, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def _advance(self, s: np.ndarray, a: np.ndarray) -> tuple[np.ndarray, float]:
        u = float(a[0])
        rewards = 0.0
        for _ in range(self.cfg.action_repeat):
            s = rk4(self.derivatives, s, u, self.cfg.dt)
            rewards += self.reward(s, a)
        s = np.where(self.angle_mask, wrap_angle(s), s)
        return s, rewards / self.cfg.action_repeat

    def _clip(self, a) -> np.ndarray:
        a = np.asarray(a, dtype=float).reshape(self.action_dim)
        clipped = np.clip(a, -1.0, 1.0)
        if not np.array_equal(clipped, a):
            self.clip_count += 1
        return clipped

    def reset(self, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        self._state = self.sample_initial(rng)
        return self.state, self.observe(self._state, rng)

    def reset_to_state(self, s, rng: np.random.Generator | None = None) -> np.ndarray:
        self._state = self.validate_state(s)
        return self.observe(self._state, rng)

    def step(self, a, rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray, float]:
        if self._state is None:
            raise EnvNotReadyError("step() called before reset()")
        self._state, r = self._advance(self._state, self._clip(a))
        self.observation_reads += 1
        return self.state, self.observe(self._state, rng), r

    def replay(self, s0, actions) -> tuple[np.ndarray, np.ndarray]:
        """Ground-truth states and rewards after each action, noise-free."""
        s = self.validate_state(s0)
        actions = np.asarray(actions, dtype=float).reshape(-1, self.action_dim)
        states = np.zeros((len(actions), self.state_dim))
        rewards = np.zeros(len(actions))
        for t, a in enumerate(actions):
            s, rewards[t] = self._advance(s, np.clip(a, -1.0, 1.0))
            states[t] = s
        return states, rewards

    def scripted_action(self, s: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class Pendulum(Environment):
    """Torque-limited pendulum swing-up; state ``(theta, omega)``."""

    name = "pendulum"
    components = ("theta", "omega")
    angle_mask = np.array([True, False])
    position_mask = np.array([True, False])
    bounds = {"omega": 40.0}
    state_scale = np.array([1.0, 8.0])
    gravity = 9.81
    length = 1.0
    mass = 1.0
    max_torque = 2.0
    ood_catalog = {
        "hanging_fast": (np.array([math.pi, 8.0]), "hanging at rest position with max velocity +8 rad/s"),
    }

    def derivatives(self, s, u):
        theta, omega = s
        ml2 = self.mass * self.length**2
        acc = (
            (self.gravity / self.length) * math.sin(theta)
            - self.cfg.damping * omega
            + u * self.max_torque / ml2
        )
        return np.array([omega, acc])

    def energy(self, s) -> float:
        theta, omega = s
        return 0.5 * self.mass * self.length**2 * omega**2 + self.mass * self.gravity * self.length * math.cos(theta)

    def reward(self, s, a):
        return 0.5 * (1.0 + math.cos(s[0]))

    def sample_initial(self, rng):
        theta = float(wrap_angle(rng.uniform(-math.pi, math.pi)))
        return np.array([theta, rng.normal(0.0, 0.01)])

    def scripted_action(self, s):
        theta, omega = float(s[0]), float(s[1])
        if math.cos(theta) > 0.95:
            u = -(25.0 * theta + 6.0 * omega) / self.max_torque
        else:
            # energy relative to the upright rest state
            e = 0.5 * omega**2 + self.gravity * (math.cos(theta) - 1.0)
            u = -2.0 * e * omega
        return np.clip(np.array([u]), -1.0, 1.0)


class CartpoleSwingup(Environment):
    """Cart-pole swing-up; state ``(x, theta, x_dot, theta_dot)``."""

    name = "cartpole"
    components = ("x", "theta", "x_dot", "theta_dot")
    angle_mask = np.array([False, True, False, False])
    position_mask = np.array([True, True, False, False])
    excluded = ("x",)
    bounds = {"x": 10.0, "x_dot": 50.0, "theta_dot": 50.0}
    state_scale = np.array([2.0, 1.0, 3.0, 8.0])
    gravity = 9.81
    cart_mass = 1.0
    pole_mass = 0.1
    half_length = 0.5
    force_scale = 10.0
    ood_catalog = {
        "cart_right_sliding": (
            np.array([2.0, math.pi, -2.0, 0.0]),
            "cart at +2 m, pole down, cart velocity -2 m/s",
        ),
    }

    def derivatives(self, s, u):
        _, theta, x_dot, theta_dot = s
        total = self.cart_mass + self.pole_mass
        sin, cos = math.sin(theta), math.cos(theta)
        force = self.force_scale * u
        tmp = (force + self.pole_mass * self.half_length * theta_dot**2 * sin) / total
        theta_acc = (self.gravity * sin - cos * tmp) / (
            self.half_length * (4.0 / 3.0 - self.pole_mass * cos**2 / total)
        )
        x_acc = tmp - self.pole_mass * self.half_length * theta_acc * cos / total
        return np.array([x_dot, theta_dot, x_acc, theta_acc])

    def reward(self, s, a):
        x, theta, _, theta_dot = s
        upright = 0.5 * (math.cos(theta) + 1.0)
        centered = 0.5 * (1.0 + float(tolerance(x, margin=2.0)))
        small_control = (4.0 + float(tolerance(a[0], margin=1.0, value_at_margin=0.0, sigmoid="quadratic"))) / 5.0
        small_velocity = 0.5 * (1.0 + float(tolerance(theta_dot, margin=5.0)))
        return upright * centered * small_control * small_velocity

    def sample_initial(self, rng):
        x = rng.normal(0.0, 0.01)
        theta = float(wrap_angle(math.pi + rng.normal(0.0, 0.01)))
        return np.array([x, theta, rng.normal(0.0, 0.01), rng.normal(0.0, 0.01)])

    def scripted_action(self, s):
        # s may come from the physical decoder, which has no cart position
        if len(s) == 3:
            theta, x_dot, theta_dot = (float(v) for v in s)
            x = 0.0
        else:
            x, theta, x_dot, theta_dot = (float(v) for v in s)
        if math.cos(theta) > 0.9:
            u = (30.0 * theta + 6.0 * theta_dot + 1.0 * x + 2.0 * x_dot) / self.force_scale
        else:
            e = 0.5 * (self.half_length * theta_dot) ** 2 + self.gravity * self.half_length * (math.cos(theta) - 1.0)
            u = 3.0 * e * theta_dot * math.cos(theta) - 0.3 * x_dot - 0.1 * x
        return np.clip(np.array([u]), -1.0, 1.0)


ENVIRONMENTS = {"pendulum": Pendulum, "cartpole": CartpoleSwingup}


def make_env(cfg: EnvConfig) -> Environment:
    return ENVIRONMENTS[cfg.env_id](cfg)


def reset(cfg: EnvConfig, rng: np.random.Generator) -> tuple[Environment, np.ndarray, np.ndarray]:
    env = make_env(cfg)
    s, o = env.reset(rng)
    return env, s, o


def ood_state(env: Environment, name: str) -> np.ndarray:
    try:
        return env.ood_catalog[name][0].copy()
    except KeyError:
        raise KeyError(
            f"unknown OOD state {name!r} for {env.name}; catalog: {', '.join(sorted(env.ood_catalog))}"
        ) from None
