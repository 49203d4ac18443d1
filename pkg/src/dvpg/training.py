"""Actor-critic training loops for the DPG / DVG / DVPG estimator family.

One environment step runs, in order: act, store, sample, critic update,
model update, policy update, target soft update.  Every source of
randomness has its own stream spawned from the run seed, so estimators
that consume different amounts of randomness elsewhere (for example model
initialisation) still see identical exploration noise and minibatches.
"""
from __future__ import annotations

import csv
import logging
import math
import re
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .envs import Env, make_env
from .estimators import (GradientEstimate, MLPCritic, dpg_gradient, dvg_finite_gradient,
                         dvg_gradient, dvpg_gradient)
from .model import Batch, DynamicsModel
from .nets import Adam, MLP, NonFiniteError, TargetPair, make_mlp, save_checkpoint, soft_update

log = logging.getLogger(__name__)

STREAMS = ("env", "noise", "buffer", "actor", "critic", "model", "imagination")


class TrainingError(RuntimeError):
    """A sub-operation failed; the message carries episode and step context."""


# -- estimator selection ---------------------------------------------------

@dataclass(frozen=True)
class EstimatorSpec:
    kind: str          # dpg | dvg | dvg_finite | dvpg | ddpg_model
    k: int = 0
    lam: float = 0.0
    t: int = 0
    K: int = 0
    a: int = 0

    @property
    def canonical(self) -> str:
        if self.kind == "dpg":
            return "dpg"
        if self.kind in ("dvg", "dvg_finite"):
            return f"{self.kind}({self.k})"
        if self.kind == "dvpg":
            return f"dvpg({self.lam!r},{self.t})"
        return f"ddpg_model({self.K},{self.a})"

    @property
    def needs_model(self) -> bool:
        if self.kind in ("dvg", "dvg_finite"):
            return self.k >= 1
        if self.kind == "dvpg":
            return self.t >= 1
        return self.kind == "ddpg_model"

    @property
    def max_k(self) -> int:
        if self.kind in ("dvg", "dvg_finite"):
            return self.k
        return self.t if self.kind == "dvpg" else 0


_EST_RE = re.compile(r"^\s*([a-z_]+)\s*(?:\(([^)]*)\))?\s*$")


def parse_estimator(text: str, lam: float | None = None, t: int | None = None,
                    k: int | None = None, K: int = 128, a: int = 4) -> EstimatorSpec:
    """Parse ``dpg``, ``ddpg``, ``dvg(k)``, ``dvg_finite(k)``, ``dvpg(lam,t)`` or ``ddpg_model(K,a)``.

    ``ddpg`` and ``dvg(0)`` are aliases of ``dpg``.  Arguments missing from
    the string are taken from the keyword defaults.
    """
    m = _EST_RE.match(text)
    if not m:
        raise ValueError(f"cannot parse estimator {text!r}")
    name, args = m.group(1), m.group(2)
    vals = [v.strip() for v in args.split(",")] if args and args.strip() else []

    def arg(i, default, conv):
        if i < len(vals):
            try:
                return conv(vals[i])
            except ValueError:
                raise ValueError(f"estimator {text!r}: bad argument {vals[i]!r}") from None
        if default is None:
            raise ValueError(f"estimator {text!r} needs argument {i + 1}")
        return conv(default)

    if name in ("dpg", "ddpg"):
        if vals:
            raise ValueError(f"{name} takes no arguments")
        return EstimatorSpec("dpg")
    if name in ("dvg", "dvg_finite"):
        depth = arg(0, k, int)
        if depth < 0 or (name == "dvg_finite" and depth < 1):
            raise ValueError(f"rollout depth must be >= {0 if name == 'dvg' else 1}, got {depth}")
        if name == "dvg" and depth == 0:
            return EstimatorSpec("dpg")
        return EstimatorSpec(name, k=depth)
    if name == "dvpg":
        lam_v = arg(0, lam, float)
        t_v = arg(1, t, int)
        if not 0.0 <= lam_v < 1.0:
            raise ValueError(f"lambda must lie in [0, 1), got {lam_v}")
        if t_v < 0:
            raise ValueError(f"t must be >= 0, got {t_v}")
        return EstimatorSpec("dvpg", lam=lam_v, t=t_v)
    if name == "ddpg_model":
        K_v, a_v = arg(0, K, int), arg(1, a, int)
        if K_v < 0 or a_v < 0:
            raise ValueError("ddpg_model needs K >= 0 and a >= 0")
        return EstimatorSpec("ddpg_model", K=K_v, a=a_v)
    raise ValueError(f"unknown estimator {name!r}")


# -- configuration ----------------------------------------------------------

@dataclass
class TrainConfig:
    env: str = "pendulum"
    estimator: str = "dpg"
    gamma: float = 0.99
    tau: float = 0.001
    lr_actor: float = 1e-4
    lr_critic: float = 1e-3
    lr_reward: float = 1e-3
    lr_transition: float = 1e-3
    batch_size: int = 128
    buffer_capacity: int = 100_000
    episodes: int = 150
    steps_per_episode: int = 200
    warmup: int = 1000
    ou_theta: float = 0.15
    ou_sigma: float = -1.0      # negative means 0.2 * a_max
    critic_l2: float = 1e-2
    model_l2: float = 0.0
    model_delta: bool = False
    normalize_inputs: bool = False
    renormalize: bool = False
    s1_source: str = "real"     # real | model
    model_K: int = 128
    model_a: int = 4
    seed: int = 0
    log_every: int = 10
    checkpoint_every: int = 0

    def estimator_spec(self) -> EstimatorSpec:
        return parse_estimator(self.estimator, K=self.model_K, a=self.model_a)

    def validate(self) -> "TrainConfig":
        spec = self.estimator_spec()
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"tau must lie in [0, 1], got {self.tau}")
        for name in ("lr_actor", "lr_critic", "lr_reward", "lr_transition"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if self.batch_size < 1 or self.batch_size > self.buffer_capacity:
            raise ValueError("need 1 <= batch_size <= buffer_capacity")
        if self.episodes < 0 or self.steps_per_episode < 1 or self.warmup < 0:
            raise ValueError("episodes >= 0, steps_per_episode >= 1 and warmup >= 0 required")
        if self.ou_theta < 0 or self.critic_l2 < 0 or self.model_l2 < 0:
            raise ValueError("ou_theta, critic_l2 and model_l2 must be >= 0")
        if self.s1_source not in ("real", "model"):
            raise ValueError(f"s1_source must be 'real' or 'model', got {self.s1_source!r}")
        make_env(self.env)
        self.estimator = spec.canonical
        return self

    def sigma(self, env: Env) -> float:
        return 0.2 * env.a_max if self.ou_sigma < 0 else self.ou_sigma


# -- replay -------------------------------------------------------------------

class ReplayBuffer:
    """Fixed-capacity ring of transitions; FIFO eviction, uniform sampling with replacement."""

    def __init__(self, capacity: int, state_dim: int, action_dim: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.s = np.zeros((capacity, state_dim))
        self.a = np.zeros((capacity, action_dim))
        self.r = np.zeros(capacity)
        self.s_next = np.zeros((capacity, state_dim))
        self.truncated = np.zeros(capacity, dtype=bool)
        self.inserted = 0

    def __len__(self):
        return min(self.inserted, self.capacity)

    def push(self, s, a, r, s_next, truncated: bool = False) -> "ReplayBuffer":
        i = self.inserted % self.capacity
        self.s[i] = s
        self.a[i] = a
        self.r[i] = r
        self.s_next[i] = s_next
        self.truncated[i] = truncated
        self.inserted += 1
        return self

    def items(self) -> Batch:
        """Stored transitions from oldest to newest."""
        n = len(self)
        idx = (np.arange(n) + (self.inserted - n)) % self.capacity
        return self._gather(idx)

    def _gather(self, idx) -> Batch:
        return Batch(self.s[idx], self.a[idx], self.r[idx], self.s_next[idx], self.truncated[idx])

    def sample(self, n: int, rng: np.random.Generator) -> Batch:
        if n < 1:
            raise ValueError("sample size must be >= 1")
        if len(self) == 0:
            raise ValueError("cannot sample from an empty buffer")
        return self._gather(rng.integers(0, len(self), size=n))

    def clear(self) -> None:
        self.inserted = 0


def buffer_push(buffer: ReplayBuffer, sample) -> ReplayBuffer:
    return buffer.push(*sample)


def buffer_sample(buffer: ReplayBuffer, n: int, rng: np.random.Generator) -> Batch:
    return buffer.sample(n, rng)


# -- exploration ------------------------------------------------------------------

@dataclass
class OUNoise:
    """x <- x - theta x + sigma N(0, I), one step per environment step."""
    theta: float
    sigma: float
    x: np.ndarray

    @classmethod
    def zeros(cls, dim: int, theta: float, sigma: float) -> "OUNoise":
        return cls(theta, sigma, np.zeros(dim))

    def reset(self) -> None:
        self.x = np.zeros_like(self.x)

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        self.x = self.x - self.theta * self.x + self.sigma * rng.standard_normal(self.x.shape)
        return self.x


def exploration_action(actor, s, noise: OUNoise, rng: np.random.Generator, a_max: float):
    """Policy action plus OU noise, clipped to ``[-a_max, a_max]``."""
    a = np.asarray(actor(s), dtype=float)
    if noise.sigma == 0.0:
        return a, noise
    return np.clip(a + noise.sample(rng), -a_max, a_max), noise


# -- updates ------------------------------------------------------------------------

def _weight_mask(net: MLP) -> np.ndarray:
    mask = np.zeros(net.n_params)
    offset = 0
    for W, b in zip(net.weights, net.biases):
        mask[offset:offset + W.size] = 1.0
        offset += W.size + b.size
    return mask


def critic_update(batch: Batch, critic: TargetPair, actor: TargetPair, gamma: float, lr: float,
                  opt: Adam, l2: float = 0.0, l2_mask: np.ndarray | None = None) -> float:
    """One Adam step on ``mean((r + gamma Q'(s', mu'(s')) - Q(s, a))^2)``; returns the pre-step loss.

    Truncated samples bootstrap like any other (infinite-horizon targets).
    """
    n = len(batch)
    if n == 0:
        raise ValueError("empty batch")
    q_next = critic.target(np.concatenate([batch.s_next, actor.target(batch.s_next)], axis=1))[:, 0]
    y = batch.r + gamma * q_next
    X = np.concatenate([batch.s, batch.a], axis=1)
    err = critic.online(X)[:, 0] - y
    loss = float(np.mean(err * err))
    if not math.isfinite(loss):
        raise NonFiniteError("non-finite critic loss")
    grad = critic.online.param_grad(X, (2.0 / n) * err[:, None])
    if l2:
        grad += l2 * (critic.online.params if l2_mask is None else l2_mask * critic.online.params)
    opt.step(critic.online.params, grad, lr)
    return loss


def estimate_gradient(spec: EstimatorSpec, batch: Batch, actor: MLP, critic: MLPCritic,
                      model, gamma: float, renormalize: bool = False,
                      s1_source: str = "real") -> GradientEstimate:
    if spec.kind in ("dpg", "ddpg_model"):
        return dpg_gradient(batch, actor, critic)
    if spec.kind == "dvg":
        return dvg_gradient(batch, actor, critic, model, gamma, spec.k, s1_source)
    if spec.kind == "dvg_finite":
        return dvg_finite_gradient(batch, actor, critic, model, gamma, spec.k, s1_source)
    return dvpg_gradient(batch, actor, critic, model, gamma, spec.lam, spec.t, renormalize, s1_source)


def policy_update(batch: Batch, spec: EstimatorSpec, actor: MLP, critic: MLPCritic, model,
                  gamma: float, opt: Adam, lr: float, renormalize: bool = False,
                  s1_source: str = "real") -> GradientEstimate:
    """Gradient ascent step on the actor along the selected estimator."""
    if spec.needs_model and spec.kind != "ddpg_model" and model is None:
        raise ValueError(f"estimator {spec.canonical} needs a model")
    est = estimate_gradient(spec, batch, actor, critic, model, gamma, renormalize, s1_source)
    opt.step(actor.params, -est.vector, lr)
    return est


def imagination_rollouts(actor: MLP, model, real_buffer: ReplayBuffer, model_buffer: ReplayBuffer,
                         K: int, a: int, n: int, critic: MLPCritic, opt: Adam, lr: float,
                         rng: np.random.Generator, sigma: float, a_max: float) -> int:
    """Fill ``model_buffer`` with K one-step model transitions, then run ``a`` DPG updates on it.

    Start states are drawn from the real buffer; actions are the policy's
    plus Gaussian noise of scale ``sigma``.  Returns the number of updates.
    The caller empties ``model_buffer`` at episode end.
    """
    if model is None:
        raise ValueError("imagination rollouts need a model")
    if K < 0 or a < 0:
        raise ValueError("K and a must be >= 0")
    if K == 0 or len(real_buffer) == 0:
        return 0
    S = real_buffer.sample(K, rng).s
    A = np.clip(actor(S) + sigma * rng.standard_normal((K, actor.n_out)), -a_max, a_max)
    r_hat, S_hat = model.predict(S, A)
    for j in range(K):
        model_buffer.push(S[j], A[j], r_hat[j], S_hat[j], False)
    for _ in range(a):
        policy_update(model_buffer.sample(n, rng), EstimatorSpec("dpg"), actor, critic, None,
                      0.0, opt, lr)
    return a


# -- run log ------------------------------------------------------------------------

@dataclass
class RunLog:
    metadata: dict = field(default_factory=dict)
    records: list = field(default_factory=list)
    max_k: int = 0

    @property
    def columns(self) -> list:
        return (["episode", "steps", "return", "critic_loss", "reward_mse", "transition_mse"]
                + [f"grad_norm_k{k}" for k in range(self.max_k + 1)])

    def append(self, record: dict) -> None:
        if self.records and record["steps"] < self.records[-1]["steps"]:
            raise ValueError("step counter must be monotone")
        self.records.append(record)

    def returns(self) -> np.ndarray:
        return np.array([r["return"] for r in self.records])

    def steps(self) -> np.ndarray:
        return np.array([r["steps"] for r in self.records], dtype=int)

    def csv_text(self) -> str:
        lines = [",".join(self.columns)]
        for rec in self.records:
            lines.append(",".join(_fmt(rec.get(c, float("nan"))) for c in self.columns))
        return "\n".join(lines) + "\n"

    def metadata_text(self, include_wall_time: bool = True) -> str:
        keys = sorted(k for k in self.metadata if include_wall_time or k != "wall_time")
        return "".join(f"{k}={self.metadata[k]}\n" for k in keys)

    def same_as(self, other: "RunLog") -> bool:
        """Equality of everything except wall-clock time."""
        return (self.csv_text() == other.csv_text()
                and self.metadata_text(False) == other.metadata_text(False))

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "metadata.txt").write_text(self.metadata_text())
        (directory / "episodes.csv").write_text(self.csv_text())

    @classmethod
    def load(cls, directory) -> "RunLog":
        directory = Path(directory)
        meta = {}
        for line in (directory / "metadata.txt").read_text().splitlines():
            if line.strip():
                key, _, value = line.partition("=")
                meta[key] = value
        with open(directory / "episodes.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        records = [{k: (int(v) if k in ("episode", "steps") else float(v)) for k, v in row.items()}
                   for row in rows]
        max_k = 0
        if rows:
            max_k = max(int(c[len("grad_norm_k"):]) for c in rows[0] if c.startswith("grad_norm_k"))
        return cls(meta, records, max_k)


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _mean(values) -> float:
    return float(np.mean(values)) if values else float("nan")


# -- the loop ------------------------------------------------------------------------

class Trainer:
    """Holds the full learner state; ``step`` advances one real environment step."""

    def __init__(self, config: TrainConfig, run_dir=None):
        self.config = config.validate()
        self.spec = config.estimator_spec()
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.env = make_env(config.env)
        seqs = np.random.SeedSequence(config.seed).spawn(len(STREAMS))
        self.rng = {name: np.random.default_rng(s) for name, s in zip(STREAMS, seqs)}
        d, m = self.env.state_dim, self.env.action_dim
        actor = make_mlp(d, m, self.rng["actor"], out_activation="tanh", out_scale=self.env.a_max)
        critic = make_mlp(d + m, 1, self.rng["critic"])
        self.actor = TargetPair.from_online(actor, config.tau)
        self.critic = TargetPair.from_online(critic, config.tau)
        self.critic_view = MLPCritic(critic, d)
        self.actor_opt = Adam(actor.n_params)
        self.critic_opt = Adam(critic.n_params)
        self.l2_mask = _weight_mask(critic)
        self.model = (DynamicsModel.create(d, m, self.rng["model"], delta=config.model_delta,
                                           normalize=config.normalize_inputs)
                      if self.spec.needs_model else None)
        self.buffer = ReplayBuffer(config.buffer_capacity, d, m)
        self.model_buffer = (ReplayBuffer(max(1, self.spec.K), d, m)
                             if self.spec.kind == "ddpg_model" else None)
        self.noise = OUNoise.zeros(m, config.ou_theta, config.sigma(self.env))
        self.steps = 0
        self.updates = 0
        self.episode = 0
        self.t = 0
        self.state = None
        self.log = RunLog(self._metadata(), [], self.spec.max_k)
        self._reset_episode_stats()

    def _metadata(self) -> dict:
        meta = {f"config.{k}": v for k, v in asdict(self.config).items()}
        meta["seed"] = self.config.seed
        meta["code_version"] = __version__
        meta["estimator"] = self.spec.canonical
        return meta

    def _reset_episode_stats(self):
        self.ep_return = 0.0
        self.ep_critic, self.ep_rmse, self.ep_tmse = [], [], []
        self.ep_norms = {}

    def begin_episode(self):
        self.state = self.env.sample_initial(self.rng["env"])
        self.noise.reset()
        self.t = 0
        self._reset_episode_stats()

    def step(self):
        cfg = self.config
        if self.state is None:
            self.begin_episode()
        s = self.state
        a, _ = exploration_action(self.actor.online, s, self.noise, self.rng["noise"], self.env.a_max)
        s_next, r = self.env.step(s, a)
        self.t += 1
        self.buffer.push(s, a, r, s_next, self.t >= cfg.steps_per_episode)
        self.steps += 1
        self.ep_return += r
        self.state = s_next
        if len(self.buffer) >= max(cfg.warmup, cfg.batch_size):
            self._update()

    def _update(self):
        cfg = self.config
        batch = self.buffer.sample(cfg.batch_size, self.rng["buffer"])
        self.ep_critic.append(critic_update(batch, self.critic, self.actor, cfg.gamma, cfg.lr_critic,
                                            self.critic_opt, cfg.critic_l2, self.l2_mask))
        if self.model is not None:
            rm, tm = self.model.fit_step(batch, cfg.lr_reward, cfg.lr_transition, cfg.model_l2)
            self.ep_rmse.append(rm)
            self.ep_tmse.append(tm)
        est = policy_update(batch, self.spec, self.actor.online, self.critic_view, self.model,
                            cfg.gamma, self.actor_opt, cfg.lr_actor, cfg.renormalize, cfg.s1_source)
        for k, v in est.norms.items():
            self.ep_norms.setdefault(k, []).append(v)
        soft_update(self.critic)
        soft_update(self.actor)
        self.updates += 1

    def end_episode(self) -> dict:
        cfg = self.config
        if self.spec.kind == "ddpg_model" and self.updates > 0:
            imagination_rollouts(self.actor.online, self.model, self.buffer, self.model_buffer,
                                 self.spec.K, self.spec.a, cfg.batch_size, self.critic_view,
                                 self.actor_opt, cfg.lr_actor, self.rng["imagination"],
                                 cfg.sigma(self.env), self.env.a_max)
            self.model_buffer.clear()
        rec = {"episode": self.episode, "steps": self.steps, "return": self.ep_return,
               "critic_loss": _mean(self.ep_critic), "reward_mse": _mean(self.ep_rmse),
               "transition_mse": _mean(self.ep_tmse)}
        for k in range(self.spec.max_k + 1):
            rec[f"grad_norm_k{k}"] = _mean(self.ep_norms.get(k, []))
        self.log.append(rec)
        self.episode += 1
        if cfg.log_every and self.episode % cfg.log_every == 0:
            log.info("episode %d steps %d return %.2f", self.episode, self.steps, self.ep_return)
        if self.run_dir is not None and cfg.checkpoint_every and self.episode % cfg.checkpoint_every == 0:
            self.save_checkpoint(self.run_dir / "checkpoints" / f"episode_{self.episode:05d}")
        self.state = None
        return rec

    def run_episode(self) -> dict:
        self.begin_episode()
        for _ in range(self.config.steps_per_episode):
            try:
                self.step()
            except (NonFiniteError, ValueError) as exc:
                raise TrainingError(f"episode {self.episode}, step {self.steps}: {exc}") from exc
        return self.end_episode()

    def save_checkpoint(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        save_checkpoint(self.actor.online, directory / "actor.net", role="actor")
        save_checkpoint(self.critic.online, directory / "critic.net", role="critic")
        if self.model is not None:
            self.model.save(directory / "model")

    def run(self) -> RunLog:
        start = time.perf_counter()
        for _ in range(self.config.episodes):
            self.run_episode()
        self.log.metadata["wall_time"] = f"{time.perf_counter() - start:.3f}"
        self.log.metadata["real_steps"] = self.steps
        if self.run_dir is not None:
            self.log.save(self.run_dir)
            self.save_checkpoint(self.run_dir / "final")
        return self.log


def train_run(config: TrainConfig, run_dir=None) -> RunLog:
    return Trainer(config, run_dir).run()


def config_fields() -> dict:
    """Field name -> (type, default) for every TrainConfig key."""
    return {f.name: (f.type, f.default) for f in fields(TrainConfig)}
