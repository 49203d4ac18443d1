"""Policy-gradient estimators: DPG, DVG(k), finite-horizon DVG and the DVPG ensemble.

Conventions
-----------
State gradients are row vectors.  A closed-loop Jacobian ``J(s)`` is the
total derivative of the next state w.r.t. the current one through the
policy, ``T_s + T_a @ mu_s``.  A row cotangent at ``s_t`` is carried back to
``s_1`` by right-multiplying ``J(s_{t-1}), ..., J(s_1)`` in that order.

Everything is batched: arrays carry a leading sample axis ``B``.  Batch
estimates are means over samples.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import Batch
from .nets import MLP, NonFiniteError


class MLPCritic:
    """Q^w(s, a) as an MLP on the concatenated input ``[s, a]``."""

    def __init__(self, net: MLP, state_dim: int):
        if net.n_out != 1 or net.n_in <= state_dim:
            raise ValueError("critic must map [s, a] to a scalar")
        self.net = net
        self.state_dim = state_dim

    def q(self, S, A) -> np.ndarray:
        return self.net(np.concatenate([np.atleast_2d(S), np.atleast_2d(A)], axis=1))[:, 0]

    def grads(self, S, A):
        X = np.concatenate([np.atleast_2d(S), np.atleast_2d(A)], axis=1)
        g = self.net.input_grad(X, np.ones((X.shape[0], 1)))
        return g[:, :self.state_dim], g[:, self.state_dim:]


def _policy_jacobian(actor, S) -> np.ndarray:
    J = actor.input_jacobian(S)
    return J if J.ndim == 3 else J[None]


def total_state_grad(g_s, g_a, J_mu) -> np.ndarray:
    """Row gradient of ``f(s, mu(s))`` from its partials: ``g_s + g_a @ mu_s``."""
    return g_s + np.einsum("bm,bmd->bd", g_a, J_mu)


def closed_loop_jacobian(J_T_s, J_T_a, J_mu_s) -> np.ndarray:
    """``J_T_s + J_T_a @ J_mu_s``; works on single matrices or batches."""
    J_T_s = np.asarray(J_T_s, dtype=float)
    J_T_a = np.asarray(J_T_a, dtype=float)
    J_mu_s = np.asarray(J_mu_s, dtype=float)
    d, m = J_T_a.shape[-2:]
    if J_T_s.shape[-2:] != (d, d) or J_mu_s.shape[-2:] != (m, d):
        raise ValueError(f"shape mismatch: T_s {J_T_s.shape}, T_a {J_T_a.shape}, mu_s {J_mu_s.shape}")
    return J_T_s + J_T_a @ J_mu_s


@dataclass
class ModelRolloutTrace:
    states: np.ndarray        # (B, k, d): s_1 .. s_k
    actions: np.ndarray       # (B, k, m)
    jacobians: np.ndarray     # (B, k, d, d): closed-loop Jacobian at each s_i
    reward_grads: np.ndarray  # (B, k, d): total reward gradient at each s_i
    policy_jacobians: np.ndarray  # (B, k, m, d)
    real: np.ndarray          # (k,) True where the state came from a real transition

    def __len__(self):
        return self.states.shape[1]


def build_trace(s1, actor, model, k: int, first_real: bool = True) -> ModelRolloutTrace:
    """Roll the model ``k - 1`` steps from the next states ``s1`` under ``actor``."""
    if k < 1:
        raise ValueError("trace length must be >= 1")
    S = np.atleast_2d(np.asarray(s1, dtype=float))
    B, d = S.shape
    states, actions, jacs, rgrads, mujacs = [], [], [], [], []
    for i in range(k):
        A = actor(S)
        J_mu = _policy_jacobian(actor, S)
        r_s, r_a, T_s, T_a = model.jacobians(S, A)
        jac = closed_loop_jacobian(T_s, T_a, J_mu)
        rg = total_state_grad(r_s, r_a, J_mu)
        if not (np.all(np.isfinite(jac)) and np.all(np.isfinite(rg)) and np.all(np.isfinite(A))):
            raise NonFiniteError(f"non-finite model quantity at rollout step {i + 1}")
        states.append(S)
        actions.append(A)
        jacs.append(jac)
        rgrads.append(rg)
        mujacs.append(J_mu)
        if i < k - 1:
            _, S = model.predict(S, A)
            if not np.all(np.isfinite(S)):
                raise NonFiniteError(f"non-finite predicted state at rollout step {i + 2}")
    real = np.zeros(k, dtype=bool)
    real[0] = first_real
    return ModelRolloutTrace(np.stack(states, 1), np.stack(actions, 1), np.stack(jacs, 1),
                             np.stack(rgrads, 1), np.stack(mujacs, 1), real)


def g_product(trace: ModelRolloutTrace, t: int) -> np.ndarray:
    """``J(s_{t-1}) @ ... @ J(s_1)``, shape (B, d, d); identity for ``t = 1``."""
    if not 1 <= t <= len(trace):
        raise ValueError(f"t={t} outside 1..{len(trace)}")
    B, _, d, _ = trace.jacobians.shape
    G = np.broadcast_to(np.eye(d), (B, d, d)).copy()
    for i in range(t - 1):
        G = trace.jacobians[:, i] @ G
    return G


def _terminal_cotangent(trace: ModelRolloutTrace, critic, k: int) -> np.ndarray:
    S = trace.states[:, k - 1]
    Q_s, Q_a = critic.grads(S, trace.actions[:, k - 1])
    return total_state_grad(Q_s, Q_a, trace.policy_jacobians[:, k - 1])


def l_k(trace: ModelRolloutTrace, critic, actor, gamma: float, k: int,
        terminal: bool = True) -> np.ndarray:
    """State-gradient estimate at s_1 from k-1 model rewards plus the critic at s_k.

    ``terminal=False`` drops the critic term (finite-horizon variant).
    Returns (B, d).  ``actor`` is unused beyond what the trace already holds
    and is accepted for signature symmetry with the other estimators.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(trace) < k:
        raise ValueError(f"trace of length {len(trace)} is shorter than k={k}")
    if terminal:
        lam = _terminal_cotangent(trace, critic, k)
    else:
        B, _, d = trace.states.shape
        lam = np.zeros((B, d))
    for t in range(k - 1, 0, -1):
        lam = trace.reward_grads[:, t - 1] + gamma * np.einsum("bi,bij->bj", lam, trace.jacobians[:, t - 1])
    if not np.all(np.isfinite(lam)):
        raise NonFiniteError(f"non-finite state-gradient estimate for k={k}")
    return lam


@dataclass
class GradientEstimate:
    vector: np.ndarray
    components: dict = field(default_factory=dict)
    weights: dict = field(default_factory=dict)

    @property
    def norms(self) -> dict:
        return {k: float(np.linalg.norm(v)) for k, v in self.components.items()}

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.vector))


def _leading_partials(S, actor, model):
    A = actor(S)
    _, r_a, _, T_a = model.jacobians(S, A)
    return r_a, T_a


def _check_batch(batch: Batch):
    if len(batch) == 0:
        raise ValueError("empty batch")


S1_SOURCES = ("real", "model")


def dvg_cotangents(batch: Batch, actor, critic, model, gamma: float, ks,
                   terminal: bool = True, s1_source: str = "real") -> dict:
    """Per-sample action cotangents ``r'_a + gamma * L_k @ T'_a`` for each k in ``ks``.

    ``s1_source="real"`` starts the rollout from the replayed next state;
    ``"model"`` starts it from ``T'(s, mu(s))``, the next state under the
    current policy.
    """
    _check_batch(batch)
    ks = sorted(set(int(k) for k in ks))
    if not ks or ks[0] < 1:
        raise ValueError("rollout depths must be >= 1")
    S = np.atleast_2d(batch.s)
    if s1_source not in S1_SOURCES:
        raise ValueError(f"s1_source must be one of {S1_SOURCES}, got {s1_source!r}")
    r_a, T_a = _leading_partials(S, actor, model)
    s1 = batch.s_next if s1_source == "real" else model.predict(S, actor(S))[1]
    trace = build_trace(s1, actor, model, ks[-1], first_real=s1_source == "real")
    out = {}
    for k in ks:
        L = l_k(trace, critic, actor, gamma, k, terminal=terminal)
        out[k] = r_a + gamma * np.einsum("bd,bdm->bm", L, T_a)
    return out


def dvg_gradient(batch: Batch, actor, critic, model, gamma: float, k: int,
                 s1_source: str = "real") -> GradientEstimate:
    """Batch mean of D_k: ``grad_theta r'(s, mu(s)) + gamma grad_theta T'(s, mu(s)) L_k``."""
    cot = dvg_cotangents(batch, actor, critic, model, gamma, [k], s1_source=s1_source)[k]
    g = actor.param_grad(batch.s, cot) / len(batch)
    return GradientEstimate(g, {k: g}, {k: 1.0})


def dvg_finite_gradient(batch: Batch, actor, critic, model, gamma: float, k: int,
                        s1_source: str = "real") -> GradientEstimate:
    """Batch mean of D'_k, the same estimate without the critic term."""
    cot = dvg_cotangents(batch, actor, critic, model, gamma, [k], terminal=False, s1_source=s1_source)[k]
    g = actor.param_grad(batch.s, cot) / len(batch)
    return GradientEstimate(g, {k: g}, {k: 1.0})


def dpg_gradient(batch: Batch, actor, critic) -> GradientEstimate:
    """Batch mean of ``grad_theta mu(s) grad_a Q(s, a)|_{a = mu(s)}``."""
    _check_batch(batch)
    S = np.atleast_2d(batch.s)
    _, Q_a = critic.grads(S, actor(S))
    g = actor.param_grad(S, Q_a) / len(batch)
    return GradientEstimate(g, {0: g}, {0: 1.0})


def dvpg_weights(lam: float, t: int, renormalize: bool = False) -> dict:
    if not 0.0 <= lam < 1.0:
        raise ValueError(f"lambda must lie in [0, 1), got {lam}")
    if t < 0:
        raise ValueError(f"t must be >= 0, got {t}")
    w = {k: (1.0 - lam) * lam ** k for k in range(t + 1)}
    if renormalize:
        total = 1.0 - lam ** (t + 1)
        w = {k: v / total for k, v in w.items()}
    return w


def combine(components: dict, weights: dict) -> np.ndarray:
    keys = sorted(weights)
    vec = np.zeros_like(components[keys[0]])
    for k in keys:
        vec += weights[k] * components[k]
    return vec


def dvpg_gradient(batch: Batch, actor, critic, model, gamma: float, lam: float, t: int,
                  renormalize: bool = False, s1_source: str = "real") -> GradientEstimate:
    """Weighted ensemble ``(1-lam) DPG + (1-lam) sum_{k=1..t} lam^k D_k`` (batch mean).

    Weights are not renormalised unless asked; they sum to ``1 - lam^(t+1)``.
    """
    weights = dvpg_weights(lam, t, renormalize)
    comps = {0: dpg_gradient(batch, actor, critic).vector}
    if t >= 1:
        if model is None:
            raise ValueError("a model is required for rollout depths >= 1")
        cots = dvg_cotangents(batch, actor, critic, model, gamma, range(1, t + 1), s1_source=s1_source)
        n = len(batch)
        for k, cot in cots.items():
            comps[k] = actor.param_grad(batch.s, cot) / n
    return GradientEstimate(combine(comps, weights), comps, weights)
