"""Learned reward and transition networks, plus the analytic stand-in.

Both model types expose ``predict(S, A)`` and ``jacobians(S, A)`` on batches,
which is all the value-gradient estimators need.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .envs import Env
from .nets import MLP, Adam, NonFiniteError, load_checkpoint, make_mlp, save_checkpoint


@dataclass
class Batch:
    """A minibatch of transitions stored as stacked arrays."""
    s: np.ndarray       # (n, d)
    a: np.ndarray       # (n, m)
    r: np.ndarray       # (n,)
    s_next: np.ndarray  # (n, d)
    truncated: np.ndarray | None = None

    def __len__(self):
        return len(self.r)

    def __post_init__(self):
        n = len(self.r)
        if self.s.shape[0] != n or self.a.shape[0] != n or self.s_next.shape[0] != n:
            raise ValueError("batch arrays disagree on length")


class RunningNormalizer:
    """Running mean/std of model inputs, updated from each fitted batch."""

    def __init__(self, dim: int, eps: float = 1e-6):
        self.count = 0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros(dim)
        self.eps = eps

    def update(self, X: np.ndarray) -> None:
        n = X.shape[0]
        if n == 0:
            return
        mean_b = X.mean(axis=0)
        m2_b = ((X - mean_b) ** 2).sum(axis=0)
        total = self.count + n
        delta = mean_b - self.mean
        self.mean = self.mean + delta * n / total
        self.m2 = self.m2 + m2_b + delta ** 2 * self.count * n / total
        self.count = total

    @property
    def std(self) -> np.ndarray:
        if self.count < 2:
            return np.ones_like(self.mean)
        return np.sqrt(self.m2 / self.count) + self.eps

    def apply(self, X):
        return (X - self.mean) / self.std


class DynamicsModel:
    """Reward net r'(s, a) -> scalar and transition net T'(s, a) -> next state.

    With ``delta=True`` the transition net predicts ``s' - s``.  The default
    predicts the next state directly.
    """

    def __init__(self, reward_net: MLP, transition_net: MLP, state_dim: int,
                 delta: bool = False, normalize: bool = False):
        n_in = reward_net.n_in
        if transition_net.n_in != n_in or reward_net.n_out != 1 or transition_net.n_out != state_dim:
            raise ValueError("model networks do not match the state/action dimensions")
        self.reward_net = reward_net
        self.transition_net = transition_net
        self.state_dim = state_dim
        self.action_dim = n_in - state_dim
        self.delta = delta
        self.normalizer = RunningNormalizer(n_in) if normalize else None
        self.reward_opt = Adam(reward_net.n_params)
        self.transition_opt = Adam(transition_net.n_params)

    @classmethod
    def create(cls, state_dim: int, action_dim: int, rng: np.random.Generator,
               hidden=(64, 64), delta: bool = False, normalize: bool = False) -> "DynamicsModel":
        n_in = state_dim + action_dim
        reward_net = make_mlp(n_in, 1, rng, hidden=hidden, final_init=None)
        transition_net = make_mlp(n_in, state_dim, rng, hidden=hidden, final_init=None)
        return cls(reward_net, transition_net, state_dim, delta=delta, normalize=normalize)

    def _inputs(self, S, A):
        X = np.concatenate([np.atleast_2d(S), np.atleast_2d(A)], axis=1)
        if X.shape[1] != self.reward_net.n_in:
            raise ValueError(f"state/action dims {X.shape[1]} do not match model input {self.reward_net.n_in}")
        if self.normalizer is not None:
            return self.normalizer.apply(X), X
        return X, X

    def predict(self, S, A):
        S = np.atleast_2d(np.asarray(S, dtype=float))
        Xn, _ = self._inputs(S, A)
        r = self.reward_net(Xn)[:, 0]
        out = self.transition_net(Xn)
        return r, (S + out if self.delta else out)

    def jacobians(self, S, A):
        """Per-sample partials ``(r_s, r_a, T_s, T_a)`` with shapes (B,d), (B,m), (B,d,d), (B,d,m)."""
        S = np.atleast_2d(np.asarray(S, dtype=float))
        Xn, _ = self._inputs(S, A)
        d = self.state_dim
        Jr = self.reward_net.input_jacobian(Xn)[:, 0, :]
        JT = self.transition_net.input_jacobian(Xn)
        if self.normalizer is not None:
            inv = 1.0 / self.normalizer.std
            Jr = Jr * inv
            JT = JT * inv
        T_s = JT[:, :, :d]
        if self.delta:
            T_s = T_s + np.eye(d)
        return Jr[:, :d], Jr[:, d:], T_s, JT[:, :, d:]

    def loss(self, batch: Batch):
        if len(batch) == 0:
            raise ValueError("empty batch")
        r_hat, s_hat = self.predict(batch.s, batch.a)
        reward_mse = float(np.mean((r_hat - batch.r) ** 2))
        transition_mse = float(np.mean(np.sum((s_hat - batch.s_next) ** 2, axis=1)))
        return reward_mse, transition_mse

    def fit_step(self, batch: Batch, lr_reward: float, lr_transition: float | None = None,
                 l2: float = 0.0):
        """One Adam step on each net; returns the losses measured before the update."""
        if len(batch) == 0:
            raise ValueError("empty batch")
        lr_transition = lr_reward if lr_transition is None else lr_transition
        if self.normalizer is not None:
            self.normalizer.update(np.concatenate([batch.s, batch.a], axis=1))
        Xn, _ = self._inputs(batch.s, batch.a)
        n = len(batch)
        r_hat = self.reward_net(Xn)[:, 0]
        out = self.transition_net(Xn)
        s_hat = batch.s + out if self.delta else out
        r_err = r_hat - batch.r
        s_err = s_hat - batch.s_next
        reward_mse = float(np.mean(r_err ** 2))
        transition_mse = float(np.mean(np.sum(s_err ** 2, axis=1)))
        if not (np.isfinite(reward_mse) and np.isfinite(transition_mse)):
            raise NonFiniteError("non-finite model loss; fit step aborted")
        g_r = self.reward_net.param_grad(Xn, (2.0 / n) * r_err[:, None])
        g_t = self.transition_net.param_grad(Xn, (2.0 / n) * s_err)
        if l2:
            g_r += l2 * self.reward_net.params
            g_t += l2 * self.transition_net.params
        self.reward_opt.step(self.reward_net.params, g_r, lr_reward)
        self.transition_opt.step(self.transition_net.params, g_t, lr_transition)
        return reward_mse, transition_mse

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        save_checkpoint(self.reward_net, directory / "reward.net", role="model-reward")
        save_checkpoint(self.transition_net, directory / "transition.net", role="model-transition")

    @classmethod
    def load(cls, directory, delta: bool = False) -> "DynamicsModel":
        directory = Path(directory)
        reward_net, _ = load_checkpoint(directory / "reward.net")
        transition_net, _ = load_checkpoint(directory / "transition.net")
        return cls(reward_net, transition_net, transition_net.n_out, delta=delta)


class AnalyticModel:
    """Wraps an environment's true reward and transition as a model."""

    def __init__(self, env: Env):
        self.env = env
        self.state_dim = env.state_dim
        self.action_dim = env.action_dim

    def predict(self, S, A):
        S = np.atleast_2d(np.asarray(S, dtype=float))
        A = np.atleast_2d(np.asarray(A, dtype=float))
        return np.asarray(self.env.reward(S, A), dtype=float), self.env.transition(S, A)

    def jacobians(self, S, A):
        S = np.atleast_2d(np.asarray(S, dtype=float))
        A = np.atleast_2d(np.asarray(A, dtype=float))
        J = self.env.jacobians(S, A)
        return J.g_r_s, J.g_r_a, J.J_T_s, J.J_T_a


def model_predict(model, s, a):
    r, s_next = model.predict(np.atleast_2d(s), np.atleast_2d(a))
    if np.ndim(s) == 1:
        return float(r[0]), s_next[0]
    return r, s_next


def model_loss(model: DynamicsModel, batch: Batch):
    return model.loss(batch)


def model_fit_step(model: DynamicsModel, batch: Batch, lr: float, l2: float = 0.0):
    losses = model.fit_step(batch, lr, lr, l2=l2)
    return model, losses
