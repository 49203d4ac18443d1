"""Numerical witnesses for the existence of deterministic value gradients.

The functions here work on the raw closed-loop map ``s -> T(s, mu(s))`` of
an environment (no action clipping), for policies that expose
``__call__``, ``input_jacobian`` and ``param_grad`` on single states.

Gradients with respect to the state are row vectors, and products of
closed-loop Jacobians are taken in chain-rule order:
``d s_t / d s_0 = J(s_{t-1}) @ ... @ J(s_0)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .envs import Env
from .nets import NonFiniteError


class NonConvergenceError(RuntimeError):
    """A series or loop construction needed for a closed form did not converge."""


def _matches(history: np.ndarray, s: np.ndarray, tol: float) -> np.ndarray:
    """Indices of rows in ``history`` within ``tol`` of ``s`` (relative above norm 1)."""
    diff = np.max(np.abs(history - s), axis=1)
    if tol == 0.0:
        return np.flatnonzero(diff == 0.0)
    scale = np.maximum(1.0, np.max(np.abs(history), axis=1))
    return np.flatnonzero(diff <= tol * scale)


def closed_loop(env: Env, policy, s):
    """Action, closed-loop Jacobian and total reward gradient at one state."""
    s = np.asarray(s, dtype=float)
    a = np.asarray(policy(s), dtype=float).reshape(env.action_dim)
    J = env.jacobians(s, a)
    J_mu = np.asarray(policy.input_jacobian(s), dtype=float).reshape(env.action_dim, env.state_dim)
    jac = J.J_T_s + J.J_T_a @ J_mu
    rg = J.g_r_s + J.g_r_a @ J_mu
    return a, jac, rg


@dataclass
class CycleInfo:
    found: bool
    prefix: np.ndarray   # (L, d) transient states s_0 .. s_{L-1}
    cycle: np.ndarray    # (P, d) periodic states, empty when no loop was found
    match_tol: float
    closure_error: float = float("nan")

    @property
    def period(self) -> int:
        return len(self.cycle)

    @property
    def first_hit(self) -> int:
        return len(self.prefix)

    @property
    def exact(self) -> bool:
        return self.found and self.closure_error == 0.0

    @property
    def states(self) -> np.ndarray:
        return np.concatenate([self.prefix, self.cycle]) if self.found else self.prefix


def detect_loop(env: Env, policy, s0, max_steps: int = 2000, match_tol: float | None = None) -> CycleInfo:
    """Follow the closed-loop orbit from ``s0`` until a state recurs.

    A recurrence is a new state within ``match_tol`` (sup norm, relative
    for states of norm above 1) of an earlier one; ``match_tol=0`` demands
    exact equality.  When several earlier states match, the most recent one
    is taken, giving the shortest period.  If nothing recurs within
    ``max_steps`` the result has ``found=False`` and carries the orbit.
    """
    if max_steps < 1:
        raise ValueError("max_steps must be >= 1")
    tol = env.spec.loop_tol if match_tol is None else float(match_tol)
    if tol < 0:
        raise ValueError("match_tol must be >= 0")
    d = env.state_dim
    hist = np.empty((max_steps + 1, d))
    s = np.asarray(s0, dtype=float).reshape(d)
    hist[0] = s
    for n in range(1, max_steps + 1):
        s = env.transition(s, np.asarray(policy(s), dtype=float).reshape(env.action_dim))
        if not np.all(np.isfinite(s)):
            break
        idx = _matches(hist[:n], s, tol)
        if idx.size:
            j = int(idx[-1])
            err = float(np.max(np.abs(hist[j] - s)))
            return CycleInfo(True, hist[:j].copy(), hist[j:n].copy(), tol, err)
        hist[n] = s
    else:
        n = max_steps + 1
    return CycleInfo(False, hist[:n].copy(), np.empty((0, d)), tol)


def spectral_radius(A, tol: float = 1e-10, max_iter: int = 10000):
    """Dominant eigenvalue magnitude by power iteration.

    Returns ``(radius, power_iteration_converged)``.  Power iteration cannot
    settle when the dominant eigenvalues form a complex or +/- pair of a
    non-normal matrix; the estimate is therefore checked against a dense
    eigenvalue solve and replaced by it whenever they differ by more than 1e-8.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    n = A.shape[0]
    x = np.linspace(1.0, 2.0, n)
    x /= np.linalg.norm(x)
    est = 0.0
    converged = False
    for _ in range(max_iter):
        y = A @ x
        nrm = float(np.linalg.norm(y))
        if nrm == 0.0:
            est, converged = 0.0, True
            break
        x = y / nrm
        if abs(nrm - est) <= tol * max(1.0, nrm):
            est, converged = nrm, True
            break
        est = nrm
    exact = float(np.max(np.abs(np.linalg.eigvals(A)))) if n else 0.0
    if not converged or abs(est - exact) > 1e-8:
        return exact, False
    return est, True


@dataclass
class LoopMatrix:
    A: np.ndarray
    C: np.ndarray
    gamma: float
    period: int
    norm_inf: float
    norm_1: float
    spectral_radius: float
    power_iteration_converged: bool


def chain_product(jacobians) -> np.ndarray:
    """``J_{n-1} @ ... @ J_0`` for a sequence ``J_0, ..., J_{n-1}``."""
    jacobians = [np.atleast_2d(np.asarray(J, dtype=float)) for J in jacobians]
    d = jacobians[0].shape[0]
    C = np.eye(d)
    for J in jacobians:
        C = J @ C
    return C


def loop_matrix_from_jacobians(jacobians, gamma: float) -> LoopMatrix:
    C = chain_product(jacobians)
    P = len(jacobians)
    A = gamma ** P * C
    rho, ok = spectral_radius(A)
    return LoopMatrix(A, C, gamma, P, float(np.linalg.norm(C, np.inf)),
                      float(np.linalg.norm(C, 1)), rho, ok)


def loop_matrix(env: Env, policy, cycle: CycleInfo, gamma: float) -> LoopMatrix:
    if not cycle.found or cycle.period == 0:
        raise ValueError("loop_matrix needs a detected cycle")
    jacs = [closed_loop(env, policy, s)[1] for s in cycle.cycle]
    return loop_matrix_from_jacobians(jacs, gamma)


def corollary1_condition(C, gamma: float, k: int):
    """Norm test ``gamma^(k+1) max(||C||_inf, ||C||_1) < 1`` for a loop of k+1 states.

    Returns ``(holds, margin)`` with ``margin = 1 - gamma^(k+1) max(norms)``.
    """
    C = np.atleast_2d(np.asarray(C, dtype=float))
    if C.shape[0] != C.shape[1]:
        raise ValueError("C must be square")
    worst = max(np.linalg.norm(C, np.inf), np.linalg.norm(C, 1))
    margin = 1.0 - gamma ** (k + 1) * worst
    return bool(margin > 0.0), float(margin)


@dataclass
class PowerSum:
    matrix: np.ndarray
    converged: bool
    terms: int
    discrepancy: float  # relative sup-norm gap to the linear-solve answer


def power_sum(A, tol: float = 1e-10, max_m: int = 2 ** 24) -> PowerSum:
    """Truncated Neumann series ``sum_{m>=0} A^m``, checked against ``(I - A)^{-1}``.

    The partial sums are doubled (``S_2m = S_m + A^m S_m``) until ``||A^m||``
    drops below ``tol``; the truncation error is then at most
    ``tol * ||(I - A)^{-1}||``.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if A.shape[0] != A.shape[1]:
        raise ValueError("A must be square")
    n = A.shape[0]
    I = np.eye(n)
    S = I.copy()
    P = A.copy()
    terms = 1
    small = False
    with np.errstate(over="ignore", invalid="ignore"):
        while terms < max_m:
            S = S + P @ S
            terms *= 2
            P = P @ P
            pn = np.linalg.norm(P, np.inf)
            if not np.isfinite(pn) or pn > 1e150:
                break
            if pn <= tol:
                small = True
                break
    try:
        X = np.linalg.solve(I - A, I)
    except np.linalg.LinAlgError:
        return PowerSum(S, False, terms, float("inf"))
    scale = max(1.0, float(np.linalg.norm(X, np.inf)))
    with np.errstate(over="ignore", invalid="ignore"):
        gap = float(np.linalg.norm(S - X, np.inf)) / scale
    if not np.isfinite(gap):
        gap = float("inf")
    return PowerSum(S, bool(small and gap <= max(tol, 1e-12) * 10), terms, gap)


def state_value_grad_series(env: Env, policy, s, gamma: float, tol: float = 1e-12,
                            max_t: int = 5000, match_tol: float | None = None,
                            window: int = 50):
    """``grad_s V(s) = sum_t gamma^t grad r(s_t) (d s_t / d s)``, summed along the orbit.

    Returns ``(gradient, converged)``.  The sum stops once the bound
    ``gamma^t ||d s_t/d s|| max(1, ||grad r(s_t)||)`` falls below ``tol``.
    If the orbit closes into a loop the remaining passes are summed exactly
    through :func:`power_sum` of the loop matrix.  Term norms that fail to
    decrease for ``window`` consecutive steps mark the series divergent.
    """
    if not 0.0 <= gamma < 1.0:
        raise ValueError("gamma must lie in [0, 1)")
    ltol = env.spec.loop_tol if match_tol is None else float(match_tol)
    d = env.state_dim
    s = np.asarray(s, dtype=float).reshape(d)
    hist = np.empty((max_t + 1, d))
    hist[0] = s
    jacs, rgs, Gs, partial = [], [], [], []
    G = np.eye(d)
    grad = np.zeros(d)
    disc = 1.0
    prev_norm = np.inf
    rising = 0
    for t in range(max_t):
        s = hist[t]
        a, jac, rg = closed_loop(env, policy, s)
        if not (np.all(np.isfinite(jac)) and np.all(np.isfinite(rg))):
            return grad, False
        partial.append(grad.copy())
        Gs.append(G)
        jacs.append(jac)
        rgs.append(rg)
        term = disc * (rg @ G)
        grad = grad + term
        G = jac @ G
        disc *= gamma
        if disc * np.linalg.norm(G, np.inf) * max(1.0, np.max(np.abs(rg))) < tol:
            return grad, True
        tn = float(np.max(np.abs(term)))
        if tn > 0.0 and tn >= prev_norm:
            rising += 1
            if rising >= window:
                return grad, False
        else:
            rising = 0
        prev_norm = tn
        s_next = env.transition(s, a)
        if not np.all(np.isfinite(s_next)):
            return grad, False
        idx = _matches(hist[:t + 1], s_next, ltol)
        if idx.size:
            j = int(idx[-1])
            P = t + 1 - j
            w = np.zeros(d)
            Pi = np.eye(d)
            for i in range(P):
                w = w + gamma ** i * (rgs[j + i] @ Pi)
                Pi = jacs[j + i] @ Pi
            ps = power_sum(gamma ** P * Pi)
            if not ps.converged:
                return grad, False
            return partial[j] + gamma ** j * (w @ ps.matrix @ Gs[j]), True
        hist[t + 1] = s_next
    return grad, False


@dataclass
class VisitationWeight:
    source: np.ndarray
    target: np.ndarray
    gamma: float
    weight: float
    step: int            # index of the target along the orbit (0 = source)
    first_visit: int     # first t >= 1 at which the target is reached (-1 if never)
    horizon: int
    analytic_tail: bool


def discounted_visitation(env: Env, policy, s, gamma: float, horizon: int = 2000,
                          match_tol: float | None = None) -> list:
    """``rho(s, s') = sum_{t>=1} gamma^(t-1) [s' reached after t steps]`` for every visited s'.

    States on a detected loop receive their geometric tail in closed form.
    Without a loop the sum is truncated at ``horizon`` steps.
    """
    if not 0.0 <= gamma < 1.0:
        raise ValueError("gamma must lie in [0, 1)")
    info = detect_loop(env, policy, s, max_steps=horizon, match_tol=match_tol)
    src = np.asarray(s, dtype=float)
    out = []
    if info.found:
        L, P = info.first_hit, info.period
        tail = 1.0 / (1.0 - gamma ** P)
        for t, st in enumerate(info.prefix):
            w = 0.0 if t == 0 else gamma ** (t - 1)
            out.append(VisitationWeight(src, st, gamma, w, t, t if t else -1, horizon, True))
        for i, st in enumerate(info.cycle):
            t = L + i
            first = t if t >= 1 else P
            out.append(VisitationWeight(src, st, gamma, gamma ** (first - 1) * tail, t, first,
                                        horizon, True))
    else:
        for t, st in enumerate(info.prefix[:horizon]):
            w = 0.0 if t == 0 else gamma ** (t - 1)
            out.append(VisitationWeight(src, st, gamma, w, t, t if t else -1, horizon, False))
    return out


def visitation_weight(weights: list, target, tol: float = 0.0) -> float:
    """Weight of ``target`` in a visitation list; 0 for states never visited."""
    target = np.asarray(target, dtype=float)
    for vw in weights:
        if np.max(np.abs(vw.target - target)) <= tol:
            return vw.weight
    return 0.0


def theorem2_gradient(env: Env, policy, s, gamma: float, horizon: int = 2000,
                      match_tol: float | None = None, tol: float = 1e-12) -> np.ndarray:
    """Closed-form ``grad_theta V(s)`` as a visitation-weighted sum over the orbit.

    Each visited state s' contributes
    ``occ(s') * grad_theta mu(s') (grad_a r + gamma grad_a T grad_s V(T(s', a')))``
    where ``occ = [s' = s] + gamma * rho(s, s')`` counts the start state at
    weight one.
    """
    weights = discounted_visitation(env, policy, s, gamma, horizon, match_tol)
    if not weights or not weights[0].analytic_tail:
        raise NonConvergenceError("no finite loop detected; the closed form needs one")
    grad = np.zeros(policy.n_params)
    for vw in weights:
        occ = (1.0 if vw.step == 0 else 0.0) + gamma * vw.weight
        if occ == 0.0:
            continue
        sp = vw.target
        a = np.asarray(policy(sp), dtype=float).reshape(env.action_dim)
        J = env.jacobians(sp, a)
        cot = np.array(J.g_r_a, dtype=float)
        if gamma > 0.0:
            s2 = env.transition(sp, a)
            gV, ok = state_value_grad_series(env, policy, s2, gamma, tol=tol, match_tol=match_tol)
            if not ok:
                raise NonConvergenceError(f"value-gradient series diverges at orbit step {vw.step + 1}")
            cot = cot + gamma * (gV @ J.J_T_a)
        grad += occ * np.asarray(policy.param_grad(sp, cot), dtype=float).reshape(-1)
    return grad


def discounted_return(env: Env, policy, s0, gamma: float, horizon: int) -> float:
    """Truncated discounted return of the raw (unclipped) closed loop."""
    s = np.asarray(s0, dtype=float).reshape(env.state_dim)
    ret = 0.0
    disc = 1.0
    for _ in range(horizon):
        a = np.asarray(policy(s), dtype=float).reshape(env.action_dim)
        ret += disc * float(env.reward(s, a))
        s = env.transition(s, a)
        disc *= gamma
    if not np.isfinite(ret):
        raise NonFiniteError("non-finite return in finite-difference rollout")
    return ret


def finite_diff_policy_gradient(env: Env, policy, s0, gamma: float, horizon: int = 400,
                                eps: float = 1e-5) -> np.ndarray:
    """Central differences of the truncated return, one policy parameter at a time."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    p = policy.params
    g = np.zeros(p.size)
    for i in range(p.size):
        old = p[i]
        p[i] = old + eps
        up = discounted_return(env, policy, s0, gamma, horizon)
        p[i] = old - eps
        down = discounted_return(env, policy, s0, gamma, horizon)
        p[i] = old
        g[i] = (up - down) / (2.0 * eps)
    return g


def finite_diff_state_grad(env: Env, policy, s, gamma: float, horizon: int = 400,
                           eps: float = 1e-5) -> np.ndarray:
    s = np.asarray(s, dtype=float)
    g = np.zeros(s.size)
    for i in range(s.size):
        e = np.zeros(s.size)
        e[i] = eps
        g[i] = (discounted_return(env, policy, s + e, gamma, horizon)
                - discounted_return(env, policy, s - e, gamma, horizon)) / (2.0 * eps)
    return g


class QuadraticValueCritic:
    """Exact Q and V for a linear environment under a linear policy ``a = K s``.

    ``V(s) = -s' P s`` with ``P = Q + K'RK + gamma (A+BK)' P (A+BK)``.
    Exposes the same ``q``/``grads`` surface as the learned critic.
    """

    def __init__(self, env: Env, K, gamma: float):
        self.A, self.B, self.Qc, self.R = env.A, env.B, env.Q, env.R
        K = np.atleast_2d(np.asarray(K, dtype=float))
        Acl = self.A + self.B @ K
        d = self.A.shape[0]
        M = np.eye(d * d) - gamma * np.kron(Acl.T, Acl.T)
        rhs = (self.Qc + K.T @ self.R @ K).reshape(-1)
        self.P = np.linalg.solve(M, rhs).reshape(d, d)
        self.P = 0.5 * (self.P + self.P.T)
        self.gamma = gamma
        self.K = K
        self.state_dim = d

    def value(self, S):
        S = np.atleast_2d(S)
        return -np.einsum("bi,ij,bj->b", S, self.P, S)

    def q(self, S, A):
        S, A = np.atleast_2d(S), np.atleast_2d(A)
        Sn = S @ self.A.T + A @ self.B.T
        return (-np.einsum("bi,ij,bj->b", S, self.Qc, S) - np.einsum("bi,ij,bj->b", A, self.R, A)
                - self.gamma * np.einsum("bi,ij,bj->b", Sn, self.P, Sn))

    def grads(self, S, A):
        S, A = np.atleast_2d(S), np.atleast_2d(A)
        Sn = S @ self.A.T + A @ self.B.T
        back = -2.0 * self.gamma * Sn @ self.P
        return -2.0 * S @ self.Qc + back @ self.A, -2.0 * A @ self.R + back @ self.B


def integrator_value_grad(K: float, gamma: float, s: float) -> float:
    """Closed-form ``dV/ds`` on the scalar integrator under ``a = K s``."""
    f = 1.0 + K
    return -2.0 * (1.0 + K * K) * s / (1.0 - gamma * f * f)


def integrator_return_grad_K(K: float, gamma: float, s0: float) -> float:
    """Closed-form ``dJ/dK`` on the scalar integrator under ``a = K s`` from ``s0``."""
    f = 1.0 + K
    den = 1.0 - gamma * f * f
    return -s0 * s0 * (2.0 * K * den + (1.0 + K * K) * 2.0 * gamma * f) / (den * den)


def integrator_optimal_gain(gamma: float):
    """Discounted LQR optimum on the scalar integrator: returns ``(K*, P)`` with ``V*(s) = -P s^2``."""
    # P = 1 + gamma P / (1 + gamma P)  <=>  gamma P^2 + (1 - 2 gamma) P - 1 = 0
    a, b, c = gamma, 1.0 - 2.0 * gamma, -1.0
    P = (-b + np.sqrt(b * b - 4 * a * c)) / (2 * a) if gamma > 0 else 1.0
    return -gamma * P / (1.0 + gamma * P), P


@dataclass
class TheoryCase:
    name: str
    env: Env
    policy: object
    s0: np.ndarray
    gamma: float
    horizon: int  # finite-difference rollout length


def _small_mlp(n_in: int, seed: int, hidden=(6, 6), activation: str = "tanh", scale: float = 0.5):
    from .nets import make_mlp
    rng = np.random.default_rng(seed)
    net = make_mlp(n_in, 1, rng, hidden=hidden, hidden_activation=activation, final_init=None)
    net.params *= scale
    return net


def catalog() -> list:
    """Catalogued (env, policy, gamma) cases with a detectable loop and a convergent series."""
    from .envs import DeterministicPendulum, LoopChain, PointMassLQR, ScalarIntegrator
    from .nets import LinearPolicy
    integ, lqr = ScalarIntegrator(), PointMassLQR()
    cases = [
        TheoryCase("integrator-K-0.5", integ, LinearPolicy([[-0.5]]), np.array([1.0]), 0.9, 400),
        TheoryCase("integrator-K-0.8", integ, LinearPolicy([[-0.8]]), np.array([-0.7]), 0.95, 600),
        TheoryCase("integrator-K-1.2", integ, LinearPolicy([[-1.2]]), np.array([0.4]), 0.5, 200),
        TheoryCase("lqr-fast", lqr, LinearPolicy([[-1.0, -1.5]]), np.array([1.0, 0.0]), 0.9, 400),
        TheoryCase("lqr-slow", lqr, LinearPolicy([[-0.5, -1.0]]), np.array([0.5, -0.3]), 0.97, 1000),
        TheoryCase("loopchain-p3", LoopChain(3), LinearPolicy([[-0.3, 0.1]], [0.2]),
                   LoopChain(3).start_state(), 0.9, 400),
        TheoryCase("loopchain-p3-prefix2", LoopChain(3, prefix=2), LinearPolicy([[-0.3, 0.1]], [0.2]),
                   LoopChain(3, prefix=2).start_state(), 0.9, 400),
        TheoryCase("loopchain-p5-prefix1", LoopChain(5, prefix=1, decay=0.8),
                   LinearPolicy([[0.4, -0.2]], [-0.1]), LoopChain(5, prefix=1).start_state(), 0.95, 600),
        TheoryCase("loopchain-p4-prefix3-mlp", LoopChain(4, prefix=3), _small_mlp(2, 11),
                   LoopChain(4, prefix=3).start_state(), 0.8, 300),
        TheoryCase("loopchain-p2-relu-mlp", LoopChain(2, decay=0.9), _small_mlp(2, 5, activation="relu"),
                   LoopChain(2).start_state(), 0.95, 700),
        TheoryCase("pendulum-upright", DeterministicPendulum(), LinearPolicy([[0.0, -10.0, -2.0]]),
                   np.array([np.cos(0.2), np.sin(0.2), 0.1]), 0.9, 600),
    ]
    return cases
