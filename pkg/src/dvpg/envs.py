"""Deterministic toy environments with closed-form dynamics and Jacobians.

Every environment is a stateless value object.  ``transition``, ``reward`` and
``jacobians`` evaluate the raw closed-form maps for any finite action;
``step`` is the agent-facing call that clips the action to the bounds first.
All three raw maps accept a leading batch axis.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nets import NonFiniteError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EnvSpec:
    name: str
    state_dim: int
    action_dim: int
    a_max: float
    init_low: tuple
    init_high: tuple
    horizon: int = 200
    # box used for visitation histograms
    box_low: tuple = ()
    box_high: tuple = ()
    loop_tol: float = 1e-6

    def __post_init__(self):
        if self.state_dim < 1 or self.action_dim < 1:
            raise ValueError("state and action dimensions must be >= 1")
        if self.horizon < 1:
            raise ValueError("truncation length must be >= 1")
        if self.a_max <= 0:
            raise ValueError("a_max must be positive")


@dataclass
class EnvJacobians:
    J_T_s: np.ndarray  # (d, d)
    J_T_a: np.ndarray  # (d, m)
    g_r_s: np.ndarray  # (d,)
    g_r_a: np.ndarray  # (m,)


class Env:
    spec: EnvSpec

    def __init__(self):
        self.clip_count = 0

    @property
    def name(self) -> str:
        return self.spec.name

    @property
    def state_dim(self) -> int:
        return self.spec.state_dim

    @property
    def action_dim(self) -> int:
        return self.spec.action_dim

    @property
    def a_max(self) -> float:
        return self.spec.a_max

    def transition(self, s, a) -> np.ndarray:
        raise NotImplementedError

    def reward(self, s, a):
        raise NotImplementedError

    def jacobians(self, s, a) -> EnvJacobians:
        raise NotImplementedError

    def sample_initial(self, rng: np.random.Generator) -> np.ndarray:
        lo = np.asarray(self.spec.init_low, dtype=float)
        hi = np.asarray(self.spec.init_high, dtype=float)
        return rng.uniform(lo, hi)

    def clip_action(self, a) -> np.ndarray:
        a = np.asarray(a, dtype=float).reshape(self.action_dim)
        clipped = np.clip(a, -self.a_max, self.a_max)
        if np.any(clipped != a):
            self.clip_count += 1
            log.debug("%s: action %s clipped to bounds (count=%d)", self.name, a, self.clip_count)
        return clipped

    def step(self, s, a):
        s = np.asarray(s, dtype=float).reshape(self.state_dim)
        a = np.asarray(a, dtype=float).reshape(self.action_dim)
        if not (np.all(np.isfinite(s)) and np.all(np.isfinite(a))):
            raise NonFiniteError(f"{self.name}: non-finite state or action")
        a = self.clip_action(a)
        return self.transition(s, a), float(self.reward(s, a))

    def __repr__(self):
        return f"{type(self).__name__}()"


class ScalarIntegrator(Env):
    """s' = s + a, r = -(s^2 + a^2)."""

    def __init__(self, a_max: float = 2.0, horizon: int = 200):
        super().__init__()
        self.spec = EnvSpec("integrator", 1, 1, a_max, (-1.0,), (1.0,), horizon,
                            box_low=(-2.0,), box_high=(2.0,))
        self.A = np.array([[1.0]])
        self.B = np.array([[1.0]])
        self.Q = np.array([[1.0]])
        self.R = np.array([[1.0]])

    def transition(self, s, a):
        return np.asarray(s, dtype=float) + np.asarray(a, dtype=float)

    def reward(self, s, a):
        s = np.asarray(s, dtype=float)
        a = np.asarray(a, dtype=float)
        return -(s[..., 0] ** 2 + a[..., 0] ** 2)

    def jacobians(self, s, a):
        s = np.asarray(s, dtype=float)
        a = np.asarray(a, dtype=float)
        batch = s.shape[:-1]
        return EnvJacobians(np.broadcast_to(self.A, batch + (1, 1)).copy(),
                            np.broadcast_to(self.B, batch + (1, 1)).copy(),
                            -2.0 * s, -2.0 * a)


class PointMassLQR(Env):
    """Double integrator s' = A s + B a with quadratic reward -(s'Qs + a'Ra)."""

    def __init__(self, dt: float = 0.2, a_max: float = 2.0, horizon: int = 200):
        super().__init__()
        self.spec = EnvSpec("lqr", 2, 1, a_max, (-1.0, -1.0), (1.0, 1.0), horizon,
                            box_low=(-2.0, -2.0), box_high=(2.0, 2.0))
        self.A = np.array([[1.0, dt], [0.0, 1.0]])
        self.B = np.array([[0.5 * dt * dt], [dt]])
        self.Q = np.eye(2)
        self.R = np.array([[0.1]])

    def transition(self, s, a):
        return np.asarray(s, dtype=float) @ self.A.T + np.asarray(a, dtype=float) @ self.B.T

    def reward(self, s, a):
        s = np.asarray(s, dtype=float)
        a = np.asarray(a, dtype=float)
        return -(np.einsum("...i,ij,...j->...", s, self.Q, s)
                 + np.einsum("...i,ij,...j->...", a, self.R, a))

    def jacobians(self, s, a):
        s = np.asarray(s, dtype=float)
        a = np.asarray(a, dtype=float)
        batch = s.shape[:-1]
        return EnvJacobians(np.broadcast_to(self.A, batch + (2, 2)).copy(),
                            np.broadcast_to(self.B, batch + (2, 1)).copy(),
                            -2.0 * s @ self.Q, -2.0 * a @ self.R)


class DeterministicPendulum(Env):
    """Frictionless pendulum swing-up, state (cos phi, sin phi, phi_dot).

    phi = 0 is upright.  Semi-implicit Euler with the usual swing-up constants
    (g=10, m=l=1, dt=0.05, torque bound 2).  The state update rotates the
    (cos, sin) pair directly, so the map is smooth everywhere.  Angular
    velocity is not clipped; bounded torque keeps it bounded over an episode.
    Reward: -(2 (1 - cos phi) + 0.1 phi_dot^2 + 0.001 u^2).
    """

    def __init__(self, g: float = 10.0, mass: float = 1.0, length: float = 1.0,
                 dt: float = 0.05, a_max: float = 2.0, horizon: int = 200):
        super().__init__()
        self.spec = EnvSpec("pendulum", 3, 1, a_max, (-np.pi, -1.0), (np.pi, 1.0), horizon,
                            box_low=(-1.0, -1.0, -8.0), box_high=(1.0, 1.0, 8.0))
        self.dt = dt
        self.k_grav = 3.0 * g / (2.0 * length)
        self.k_torque = 3.0 / (mass * length ** 2)

    def sample_initial(self, rng):
        phi = rng.uniform(-np.pi, np.pi)
        w = rng.uniform(-1.0, 1.0)
        return np.array([np.cos(phi), np.sin(phi), w])

    def _pieces(self, s, a):
        s = np.asarray(s, dtype=float)
        a = np.asarray(a, dtype=float)
        c, sn, w = s[..., 0], s[..., 1], s[..., 2]
        w_new = w + (self.k_grav * sn + self.k_torque * a[..., 0]) * self.dt
        delta = w_new * self.dt
        cd, sd = np.cos(delta), np.sin(delta)
        c_new = c * cd - sn * sd
        s_new = sn * cd + c * sd
        return c, sn, w, a[..., 0], w_new, cd, sd, c_new, s_new

    def transition(self, s, a):
        *_, w_new, cd, sd, c_new, s_new = self._pieces(s, a)
        return np.stack([c_new, s_new, w_new], axis=-1)

    def reward(self, s, a):
        s = np.asarray(s, dtype=float)
        a = np.asarray(a, dtype=float)
        return -(2.0 * (1.0 - s[..., 0]) + 0.1 * s[..., 2] ** 2 + 0.001 * a[..., 0] ** 2)

    def jacobians(self, s, a):
        c, sn, w, u, w_new, cd, sd, c_new, s_new = self._pieces(s, a)
        dt = self.dt
        batch = np.shape(c)
        J_s = np.zeros(batch + (3, 3))
        J_a = np.zeros(batch + (3, 1))
        # d w_new / d(c, s, w, u)
        dw_ds = self.k_grav * dt
        dw_du = self.k_torque * dt
        # c_new and s_new depend on delta = w_new * dt; d c_new/d delta = -s_new, d s_new/d delta = c_new
        J_s[..., 0, 0] = cd
        J_s[..., 0, 1] = -sd - s_new * dt * dw_ds
        J_s[..., 0, 2] = -s_new * dt
        J_s[..., 1, 0] = sd
        J_s[..., 1, 1] = cd + c_new * dt * dw_ds
        J_s[..., 1, 2] = c_new * dt
        J_s[..., 2, 1] = dw_ds
        J_s[..., 2, 2] = 1.0
        J_a[..., 0, 0] = -s_new * dt * dw_du
        J_a[..., 1, 0] = c_new * dt * dw_du
        J_a[..., 2, 0] = dw_du
        zeros = np.zeros(batch)
        g_r_s = np.stack([np.full(batch, 2.0), zeros, -0.2 * w], axis=-1)
        g_r_a = (-0.002 * u)[..., None]
        return EnvJacobians(J_s, J_a, g_r_s, g_r_a)


class LoopChain(Env):
    """Piecewise-affine chain whose orbits close into an exact cycle.

    State ``(x, p)`` with ``p`` a phase counter.  While the rounded phase is
    ``0..period-2`` the chain moves ``x' = decay*x + a`` and ``p' = p + 1``.
    At phase ``period-1`` (and at ``-1``, the end of an optional lead-in),
    ``x`` is reset to ``x_reset`` and the phase wraps to 0.  Every stationary
    policy therefore revisits ``(x_reset, 0)`` every ``period`` steps.  A
    lead-in of ``prefix`` steps starts the phase at ``-prefix``.

    The phase update has slope one on every branch, so the map is
    differentiable away from half-integer phases.
    """

    def __init__(self, period: int = 3, prefix: int = 0, decay: float = 0.5,
                 x_reset: float = 1.0, x_start: float = 0.3, a_max: float = 3.0,
                 horizon: int = 200):
        super().__init__()
        if period < 1 or prefix < 0:
            raise ValueError("period must be >= 1 and prefix >= 0")
        self.period = period
        self.prefix = prefix
        self.decay = decay
        self.x_reset = x_reset
        self.x_start = x_start
        self.spec = EnvSpec("loopchain", 2, 1, a_max, (-1.0, 0.0), (1.0, 0.0), horizon,
                            box_low=(-3.0, -prefix - 0.5), box_high=(3.0, period - 0.5),
                            loop_tol=1e-9)

    def start_state(self) -> np.ndarray:
        if self.prefix == 0:
            return np.array([self.x_reset, 0.0])
        return np.array([self.x_start, -float(self.prefix)])

    def _reset_mask(self, p):
        n = np.rint(p)
        return (n == self.period - 1) | (n == -1), n

    def transition(self, s, a):
        s = np.asarray(s, dtype=float)
        a = np.asarray(a, dtype=float)
        x, p = s[..., 0], s[..., 1]
        reset, n = self._reset_mask(p)
        x_new = np.where(reset, self.x_reset, self.decay * x + a[..., 0])
        p_new = np.where(reset, p - n, p + 1.0)
        return np.stack([x_new, p_new], axis=-1)

    def reward(self, s, a):
        s = np.asarray(s, dtype=float)
        a = np.asarray(a, dtype=float)
        return -(s[..., 0] ** 2 + 0.5 * a[..., 0] ** 2)

    def jacobians(self, s, a):
        s = np.asarray(s, dtype=float)
        a = np.asarray(a, dtype=float)
        reset, _ = self._reset_mask(s[..., 1])
        batch = reset.shape
        J_s = np.zeros(batch + (2, 2))
        J_a = np.zeros(batch + (2, 1))
        J_s[..., 0, 0] = np.where(reset, 0.0, self.decay)
        J_s[..., 1, 1] = 1.0
        J_a[..., 0, 0] = np.where(reset, 0.0, 1.0)
        g_r_s = np.stack([-2.0 * s[..., 0], np.zeros(batch)], axis=-1)
        g_r_a = -1.0 * a
        return EnvJacobians(J_s, J_a, g_r_s, g_r_a)


ENVIRONMENTS = {
    "integrator": ScalarIntegrator,
    "lqr": PointMassLQR,
    "pendulum": DeterministicPendulum,
    "loopchain": LoopChain,
}


def make_env(name: str, **kwargs) -> Env:
    try:
        cls = ENVIRONMENTS[name]
    except KeyError:
        raise ValueError(f"unknown environment {name!r}; choose from {sorted(ENVIRONMENTS)}") from None
    return cls(**kwargs)


def env_step(env: Env, s, a):
    return env.step(s, a)


def env_jacobians(env: Env, s, a) -> EnvJacobians:
    s = np.asarray(s, dtype=float)
    a = np.asarray(a, dtype=float)
    if not (np.all(np.isfinite(s)) and np.all(np.isfinite(a))):
        raise NonFiniteError(f"{env.name}: non-finite state or action")
    return env.jacobians(s, a)


@dataclass
class Trajectory:
    states: np.ndarray   # (H, d)
    actions: np.ndarray  # (H, m)
    rewards: np.ndarray  # (H,)
    final_state: np.ndarray = field(default=None)

    def __len__(self):
        return len(self.rewards)

    def to_csv(self, path) -> None:
        d = self.states.shape[1]
        m = self.actions.shape[1]
        with open(Path(path), "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["t"] + [f"s{i}" for i in range(d)] + [f"a{j}" for j in range(m)] + ["r"])
            for t in range(len(self)):
                w.writerow([t] + [repr(float(v)) for v in self.states[t]]
                           + [repr(float(v)) for v in self.actions[t]] + [repr(float(self.rewards[t]))])


def rollout(env: Env, policy, s0, horizon: int, gamma: float, clip: bool = True):
    """Run ``policy`` for ``horizon`` steps; returns ``(trajectory, discounted_return)``.

    ``policy`` maps a state vector to an action vector.  With ``clip=False``
    the raw transition is used (the theory code differentiates that map).
    """
    if horizon < 0:
        raise ValueError("horizon must be >= 0")
    if not 0.0 <= gamma < 1.0:
        raise ValueError("gamma must lie in [0, 1)")
    d, m = env.state_dim, env.action_dim
    states = np.zeros((horizon, d))
    actions = np.zeros((horizon, m))
    rewards = np.zeros(horizon)
    s = np.asarray(s0, dtype=float).reshape(d)
    ret = 0.0
    disc = 1.0
    for t in range(horizon):
        a = np.asarray(policy(s), dtype=float).reshape(m)
        if clip:
            s_next, r = env.step(s, a)
        else:
            if not (np.all(np.isfinite(s)) and np.all(np.isfinite(a))):
                raise NonFiniteError(f"{env.name}: non-finite state or action at step {t}")
            s_next, r = env.transition(s, a), float(env.reward(s, a))
        states[t] = s
        actions[t] = a if not clip else np.clip(a, -env.a_max, env.a_max)
        rewards[t] = r
        ret += disc * r
        disc *= gamma
        s = s_next
    return Trajectory(states, actions, rewards, s), ret
