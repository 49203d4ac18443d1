"""Experiment orchestration: configs, manifests, aggregation and check reports."""
from __future__ import annotations

import configparser
import csv
import difflib
import logging
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import estimators, theory
from .envs import Env, LoopChain, PointMassLQR, ScalarIntegrator, make_env
from .estimators import MLPCritic, build_trace, dvg_cotangents, l_k
from .model import AnalyticModel, Batch
from .nets import LinearPolicy, MLP, load_checkpoint, make_mlp
from .training import RunLog, TrainConfig, parse_estimator, train_run

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Invalid configuration or manifest."""


# -- configs --------------------------------------------------------------------

ESTIMATOR_ARG_KEYS = ("k", "lam", "t")


def _coerce(key: str, kind: str, raw: str):
    raw = raw.strip()
    try:
        if kind == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"key {key!r}: expected {kind}, got {raw!r}") from None


def parse_config(pairs: dict, base: TrainConfig | None = None) -> TrainConfig:
    """Build a validated TrainConfig from string key/value pairs."""
    types = {f.name: f.type for f in fields(TrainConfig)}
    valid = sorted(list(types) + list(ESTIMATOR_ARG_KEYS))
    values, est_args = {}, {}
    for key, raw in pairs.items():
        if key in ESTIMATOR_ARG_KEYS:
            est_args[key] = raw.strip()
            continue
        if key not in types:
            near = difflib.get_close_matches(key, valid, n=1)
            hint = f"; did you mean {near[0]!r}?" if near else ""
            raise ConfigError(f"unknown config key {key!r}{hint}")
        values[key] = _coerce(key, types[key], raw)
    cfg = replace(base or TrainConfig(), **values)
    try:
        if est_args:
            spec = parse_estimator(cfg.estimator,
                                   lam=float(est_args["lam"]) if "lam" in est_args else None,
                                   t=int(est_args["t"]) if "t" in est_args else None,
                                   k=int(est_args["k"]) if "k" in est_args else None,
                                   K=cfg.model_K, a=cfg.model_a)
            cfg.estimator = spec.canonical
        return cfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def read_pairs(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    pairs = {}
    for n, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key=value")
        key, _, value = line.partition("=")
        pairs[key.strip()] = value.strip()
    return pairs


def load_config(path) -> TrainConfig:
    """Flat ``key = value`` file; ``#`` starts a comment; unset keys take defaults."""
    return parse_config(read_pairs(path))


# -- experiments --------------------------------------------------------------------

@dataclass
class ExperimentManifest:
    configs: dict           # name -> TrainConfig
    seeds: dict             # name -> list of seeds
    output: Path
    band: float = 0.75

    @classmethod
    def load(cls, path) -> "ExperimentManifest":
        """INI manifest: an ``[experiment]`` section plus one ``[config:NAME]`` section per config.

        ``[experiment]`` holds ``output``, ``seeds`` (comma separated) and
        optionally ``band``.  A config section may set ``file`` to a config
        file and override keys below it, and may set its own ``seeds``.
        """
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"manifest not found: {path}")
        ini = configparser.ConfigParser(interpolation=None)
        ini.optionxform = str
        ini.read(path)
        if "experiment" not in ini:
            raise ConfigError(f"{path}: missing [experiment] section")
        exp = ini["experiment"]
        output = Path(exp.get("output", "runs"))
        if not output.is_absolute():
            output = path.parent / output
        default_seeds = _parse_seeds(exp.get("seeds", "0"))
        configs, seeds = {}, {}
        for section in ini.sections():
            if not section.startswith("config:"):
                continue
            name = section.split(":", 1)[1].strip()
            pairs = dict(ini[section])
            s = _parse_seeds(pairs.pop("seeds")) if "seeds" in pairs else default_seeds
            base = None
            if "file" in pairs:
                f = Path(pairs.pop("file"))
                base = load_config(f if f.is_absolute() else path.parent / f)
            configs[name] = parse_config(pairs, base)
            seeds[name] = s
        if not configs:
            raise ConfigError(f"{path}: no [config:NAME] sections")
        band = float(exp.get("band", "0.75"))
        if not 0.0 < band <= 1.0:
            raise ConfigError("band must lie in (0, 1]")
        return cls(configs, seeds, output, band)


def _parse_seeds(text: str) -> list:
    try:
        seeds = [int(v) for v in text.replace(" ", "").split(",") if v]
    except ValueError:
        raise ConfigError(f"bad seed list {text!r}") from None
    if len(set(seeds)) != len(seeds):
        raise ConfigError(f"duplicate seeds in {text!r}")
    return seeds


@dataclass
class ExperimentResult:
    output: Path
    rows: list

    @property
    def failures(self) -> int:
        return sum(r["status"] != "ok" for r in self.rows)


def _run_one(name: str, cfg: TrainConfig, seed: int, run_dir: Path) -> dict:
    start = time.perf_counter()
    try:
        log_ = train_run(replace(cfg, seed=seed), run_dir)
        r = log_.returns()
        return {"config": name, "seed": seed, "status": "ok", "dir": str(run_dir),
                "real_steps": int(log_.steps()[-1]) if len(r) else 0,
                "final_return": repr(float(np.mean(r[-10:]))) if len(r) else "nan",
                "seconds": f"{time.perf_counter() - start:.1f}", "error": ""}
    except Exception as exc:  # isolate per-run failures
        log.error("run %s seed %d failed: %s", name, seed, exc)
        return {"config": name, "seed": seed, "status": "failed", "dir": str(run_dir),
                "real_steps": 0, "final_return": "nan",
                "seconds": f"{time.perf_counter() - start:.1f}", "error": str(exc).replace("\n", " ")}


def run_experiment(manifest: ExperimentManifest, workers: int = 1) -> ExperimentResult:
    """One RunLog directory per (config, seed) plus an ``index.csv`` summary."""
    out = manifest.output
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(name, cfg, seed, out / name / f"seed_{seed}")
            for name, cfg in manifest.configs.items() for seed in manifest.seeds[name]]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(workers) as pool:
            rows = list(pool.map(_run_one, *zip(*jobs)))
    else:
        rows = [_run_one(*job) for job in jobs]
    cols = ["config", "seed", "status", "dir", "real_steps", "final_return", "seconds", "error"]
    with open(out / "index.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        w.writerows(rows)
    return ExperimentResult(out, rows)


# -- aggregation ----------------------------------------------------------------------

def locf(steps: np.ndarray, values: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """Last observation carried forward onto ``grid``; NaN before the first observation."""
    idx = np.searchsorted(steps, grid, side="right") - 1
    out = np.full(grid.shape, np.nan)
    ok = idx >= 0
    out[ok] = values[idx[ok]]
    return out


def band_stats(values: np.ndarray, band: float = 0.75):
    """Median and central ``band`` interquantile range (linear interpolation)."""
    lo_q = 50.0 * (1.0 - band)
    return (float(np.median(values)), float(np.percentile(values, lo_q)),
            float(np.percentile(values, 100.0 - lo_q)))


def aggregate_runs(logs: list, band: float = 0.75, bucket: int | None = None) -> list:
    """Rows ``(steps, n, median, lo, hi)`` over the union step grid (or fixed buckets)."""
    logs = [lg for lg in logs if lg.records]
    if not logs:
        raise ValueError("no completed runs to aggregate")
    if bucket:
        top = max(int(lg.steps()[-1]) for lg in logs)
        grid = np.arange(bucket, top + bucket, bucket)
    else:
        grid = np.unique(np.concatenate([lg.steps() for lg in logs]))
    cols = np.stack([locf(lg.steps(), lg.returns(), grid) for lg in logs], axis=1)
    rows = []
    for g, vals in zip(grid, cols):
        vals = np.sort(vals[np.isfinite(vals)])
        if vals.size == 0:
            continue
        med, lo, hi = band_stats(vals, band)
        rows.append((int(g), int(vals.size), med, lo, hi))
    return rows


def aggregate(run_dir, band: float = 0.75, bucket: int | None = None) -> Path:
    """Write ``summary.csv`` under ``run_dir``: one block of rows per config directory."""
    run_dir = Path(run_dir)
    groups = {}
    for meta in sorted(run_dir.rglob("episodes.csv")):
        seed_dir = meta.parent
        name = seed_dir.parent.relative_to(run_dir).as_posix() if seed_dir != run_dir else "."
        groups.setdefault(name, []).append(RunLog.load(seed_dir))
    if not groups:
        raise ValueError(f"no completed runs under {run_dir}")
    path = run_dir / "summary.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["config", "steps", "n_seeds", "median", "band_lo", "band_hi"])
        for name in sorted(groups):
            for row in aggregate_runs(groups[name], band, bucket):
                w.writerow([name, row[0], row[1]] + [repr(v) for v in row[2:]])
    return path


# -- success threshold --------------------------------------------------------------

def trailing_mean(returns, window: int = 10) -> np.ndarray:
    r = np.asarray(returns, dtype=float)
    if r.size < window:
        return np.empty(0)
    c = np.cumsum(np.concatenate([[0.0], r]))
    return (c[window:] - c[:-window]) / window


def steps_to_threshold(log_: RunLog, threshold: float, window: int = 10):
    """Real steps at the first episode whose trailing mean return reaches ``threshold``."""
    tm = trailing_mean(log_.returns(), window)
    hit = np.flatnonzero(tm >= threshold)
    return int(log_.steps()[hit[0] + window - 1]) if hit.size else None


def random_policy_returns(env_name: str, episodes: int, seed: int = 0) -> np.ndarray:
    """Undiscounted episode returns under uniformly random actions."""
    env = make_env(env_name)
    rng = np.random.default_rng(seed)
    out = np.empty(episodes)
    for i in range(episodes):
        s = env.sample_initial(rng)
        total = 0.0
        for _ in range(env.spec.horizon):
            s, r = env.step(s, rng.uniform(-env.a_max, env.a_max, env.action_dim))
            total += r
        out[i] = total
    return out


def success_threshold(random_returns, best_known: float, frac: float = 0.8) -> float:
    """90th percentile of random returns plus ``frac`` of the gap to the best-known return."""
    p90 = float(np.percentile(random_returns, 90.0))
    return p90 + frac * (best_known - p90)


def calibrate_threshold(run_logs: list, env_name: str = "pendulum", random_episodes: int = 1000,
                        seed: int = 0) -> dict:
    """Threshold from pilot RunLogs: best trailing-10 mean across pilots is the best-known return."""
    best = max(float(trailing_mean(lg.returns()).max()) for lg in run_logs)
    rand = random_policy_returns(env_name, random_episodes, seed)
    return {"random_p90": float(np.percentile(rand, 90.0)), "best_known": best,
            "threshold": success_threshold(rand, best)}


# -- visitation ------------------------------------------------------------------------

@dataclass
class VisitationReport:
    counts: np.ndarray
    edges: list
    total_steps: int
    policy_id: str

    def top_share(self, frac: float = 0.1) -> float:
        """Share of visits held by the top ``frac`` of bins."""
        if self.total_steps == 0:
            return 0.0
        c = np.sort(self.counts.ravel())[::-1]
        n = max(1, int(np.ceil(frac * c.size)))
        return float(c[:n].sum() / self.total_steps)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            dims = self.counts.ndim
            w.writerow([f"bin{i}" for i in range(dims)] + [f"lo{i}" for i in range(dims)] + ["count"])
            for idx in np.ndindex(self.counts.shape):
                lows = [repr(float(self.edges[i][j])) for i, j in enumerate(idx)]
                w.writerow(list(idx) + lows + [int(self.counts[idx])])


def visitation_report(env: Env, policy, episodes: int, bins: int = 10, seed: int = 0,
                      horizon: int | None = None, policy_id: str = "policy") -> VisitationReport:
    """Histogram of visited states s_0..s_{T-1} over noise-free rollouts.

    States outside the box fall into the nearest edge bin, so bins partition it.
    """
    if bins < 1 or episodes < 0:
        raise ValueError("bins >= 1 and episodes >= 0 required")
    lo = np.asarray(env.spec.box_low, dtype=float)
    hi = np.asarray(env.spec.box_high, dtype=float)
    d = env.state_dim
    edges = [np.linspace(lo[i], hi[i], bins + 1) for i in range(d)]
    counts = np.zeros((bins,) * d, dtype=np.int64)
    horizon = env.spec.horizon if horizon is None else horizon
    rng = np.random.default_rng(seed)
    total = 0
    for _ in range(episodes):
        s = env.sample_initial(rng)
        for _ in range(horizon):
            idx = np.clip(((s - lo) / (hi - lo) * bins).astype(int), 0, bins - 1)
            counts[tuple(idx)] += 1
            total += 1
            s, _ = env.step(s, policy(s))
    return VisitationReport(counts, edges, total, policy_id)


# -- gradcheck ------------------------------------------------------------------------

@dataclass
class Check:
    name: str
    error: float
    tol: float
    detail: str = ""

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error) and self.error <= self.tol)

    def line(self) -> str:
        flag = "PASS" if self.passed else "FAIL"
        return f"{flag}  {self.name:34s} err={self.error:.3e}  tol={self.tol:.0e}  {self.detail}"


@dataclass
class CheckReport:
    checks: list = field(default_factory=list)
    tables: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def failed(self) -> list:
        return [c.name for c in self.checks if not c.passed]

    def text(self) -> str:
        lines = [c.line() for c in self.checks]
        for title, header, rows in self.tables:
            lines += ["", title, "  ".join(f"{h:>12s}" for h in header)]
            lines += ["  ".join(f"{v:12.6g}" if isinstance(v, float) else f"{v!s:>12s}" for v in row)
                      for row in rows]
        lines.append("")
        lines.append("all checks passed" if self.passed else f"FAILED: {', '.join(self.failed())}")
        return "\n".join(lines)


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))


def _fd_jacobian(f, x, eps=1e-6):
    x = np.asarray(x, dtype=float)
    cols = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = eps
        cols.append((np.asarray(f(x + e)) - np.asarray(f(x - e))).ravel() / (2 * eps))
    return np.stack(cols, axis=-1)


def net_gradient_errors(n_nets: int = 100, seed: int = 0) -> tuple:
    """Worst relative errors of param_grad and input_jacobian against central differences.

    Smooth (tanh) hidden layers keep the differences away from ReLU kinks
    for the parameter check; ReLU nets are checked on inputs whose
    pre-activations all sit at least 1e-3 from zero.
    """
    rng = np.random.default_rng(seed)
    worst_p = worst_j = 0.0
    for i in range(n_nets):
        n_in, n_out = int(rng.integers(1, 5)), int(rng.integers(1, 4))
        act = "tanh" if i % 2 == 0 else "relu"
        out_act = ("tanh", "identity")[i % 3 == 0]
        net = make_mlp(n_in, n_out, rng, hidden=(8, 8), hidden_activation=act,
                       out_activation=out_act, out_scale=2.0 if out_act == "tanh" else None,
                       final_init=None)
        x = _safe_input(net, rng)
        u = rng.standard_normal(n_out)
        p0 = net.params.copy()

        def scalar(p):
            net.params[...] = p
            return float(net(x) @ u)

        fd = _fd_jacobian(scalar, p0, 1e-6)
        net.params[...] = p0
        worst_p = max(worst_p, rel_err(net.param_grad(x, u), fd))
        worst_j = max(worst_j, rel_err(net.input_jacobian(x), _fd_jacobian(net, x, 1e-6)))
    return worst_p, worst_j


def _safe_input(net: MLP, rng, margin: float = 1e-3):
    while True:
        x = rng.standard_normal(net.n_in)
        h = x
        ok = True
        for W, b, act in zip(net.weights, net.biases, net.activations):
            z = h @ W.T + b
            if act == "relu" and np.min(np.abs(z)) < margin:
                ok = False
                break
            h = np.maximum(z, 0) if act == "relu" else (np.tanh(z) if act == "tanh" else z)
        if ok:
            return x


def env_jacobian_errors(seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    out = {}
    for name in ("integrator", "lqr", "pendulum", "loopchain"):
        env = make_env(name)
        worst = 0.0
        for _ in range(20):
            s = env.sample_initial(rng)
            if name == "loopchain":
                s = np.array([rng.uniform(-1, 1), float(rng.integers(0, 3))])
            a = rng.uniform(-env.a_max, env.a_max, env.action_dim)
            J = env.jacobians(s, a)
            worst = max(worst,
                        rel_err(J.J_T_s, _fd_jacobian(lambda x: env.transition(x, a), s)),
                        rel_err(J.J_T_a, _fd_jacobian(lambda x: env.transition(s, x), a)),
                        rel_err(J.g_r_s, _fd_jacobian(lambda x: env.reward(x, a), s)),
                        rel_err(J.g_r_a, _fd_jacobian(lambda x: env.reward(s, x), a)))
        out[name] = worst
    return out


def exact_setup(env_name: str, gamma: float):
    """Linear policy, analytic model and exact quadratic critic on a linear environment."""
    env = ScalarIntegrator() if env_name == "integrator" else PointMassLQR()
    K = np.array([[-0.5]]) if env_name == "integrator" else np.array([[-1.0, -1.5]])
    policy = LinearPolicy(K)
    critic = theory.QuadraticValueCritic(env, K, gamma)
    return env, policy, critic, AnalyticModel(env)


def k_consistency_spread(env_name: str, gamma: float = 0.9, n_states: int = 100,
                         ks=(1, 2, 3, 4, 5), seed: int = 0) -> float:
    """Worst pairwise relative spread of D_1..D_5 per state with true model and exact critic."""
    env, policy, critic, model = exact_setup(env_name, gamma)
    rng = np.random.default_rng(seed)
    S = rng.uniform(-1, 1, (n_states, env.state_dim))
    A = policy(S)
    _, S1 = model.predict(S, A)
    batch = Batch(S, A, np.zeros(n_states), S1)
    cots = dvg_cotangents(batch, policy, critic, model, gamma, ks)
    worst = 0.0
    for j in range(n_states):
        per_k = np.stack([policy.param_grad(S[j], cots[k][j]) for k in ks])
        scale = max(np.max(np.abs(per_k)), 1e-12)
        worst = max(worst, float(np.max(per_k.max(0) - per_k.min(0)) / scale))
    return worst


def l_k_fd_error(gamma: float = 0.9, ks=(1, 2, 3, 4, 5), horizon: int = 400) -> float:
    """L_k at s_1 with true model and exact critic versus central differences of the value."""
    worst = 0.0
    for env_name in ("integrator", "lqr"):
        env, policy, critic, model = exact_setup(env_name, gamma)
        rng = np.random.default_rng(3)
        S1 = rng.uniform(-1, 1, (5, env.state_dim))
        trace = build_trace(S1, policy, model, max(ks))
        for k in ks:
            L = l_k(trace, critic, policy, gamma, k)
            for j in range(len(S1)):
                fd = theory.finite_diff_state_grad(env, policy, S1[j], gamma, horizon)
                worst = max(worst, rel_err(L[j], fd))
    return worst


def unrolled_dvg_error(gamma: float = 0.9, K: float = -0.5, s0: float = 1.0,
                       horizon: int = 400) -> float:
    """sum_t gamma^t D_1(s_t) along the closed-loop orbit versus the analytic dJ/dK."""
    env, policy, critic, model = exact_setup("integrator", gamma)
    policy.K[...] = K
    critic = theory.QuadraticValueCritic(env, policy.K, gamma)
    traj_s = np.empty((horizon, 1))
    s = np.array([s0])
    for t in range(horizon):
        traj_s[t] = s
        s = env.transition(s, policy(s))
    A = policy(traj_s)
    _, S1 = model.predict(traj_s, A)
    cot = dvg_cotangents(Batch(traj_s, A, np.zeros(horizon), S1), policy, critic, model, gamma, [1])[1]
    disc = gamma ** np.arange(horizon)
    g = policy.param_grad(traj_s, disc[:, None] * cot)
    return rel_err(g[0], theory.integrator_return_grad_K(K, gamma, s0))


def dvg_vs_finite_table(gamma: float = 0.9, ks=(1, 2, 3, 4, 5), n_states: int = 50) -> list:
    """Per k: mean |D_k|, mean |D'_k| and each one's relative error to the true DPG direction."""
    env, policy, critic, model = exact_setup("integrator", gamma)
    rng = np.random.default_rng(1)
    S = rng.uniform(-1, 1, (n_states, 1))
    A = policy(S)
    _, S1 = model.predict(S, A)
    batch = Batch(S, A, np.zeros(n_states), S1)
    full = dvg_cotangents(batch, policy, critic, model, gamma, ks)
    fin = dvg_cotangents(batch, policy, critic, model, gamma, ks, terminal=False)
    _, Q_a = critic.grads(S, A)
    truth = policy.param_grad(S, Q_a) / n_states
    rows = []
    for k in ks:
        g_full = policy.param_grad(S, full[k]) / n_states
        g_fin = policy.param_grad(S, fin[k]) / n_states
        rows.append((k, float(np.linalg.norm(g_full)), float(np.linalg.norm(g_fin)),
                     rel_err(g_full, truth), rel_err(g_fin, truth)))
    return rows


def closed_form_errors(cases=None) -> list:
    """(name, relative error) of the closed form against finite differences, per catalogued case."""
    out = []
    for c in cases or theory.catalog():
        g = theory.theorem2_gradient(c.env, c.policy, c.s0, c.gamma)
        fd = theory.finite_diff_policy_gradient(c.env, c.policy, c.s0, c.gamma, c.horizon)
        out.append((c.name, float(np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-12))))
    return out


def oracle_triangle() -> tuple:
    env = ScalarIntegrator()
    pol = LinearPolicy([[-0.5]])
    series, ok = theory.state_value_grad_series(env, pol, np.array([1.0]), 0.9)
    analytic = theory.integrator_value_grad(-0.5, 0.9, 1.0)
    fd = theory.finite_diff_state_grad(env, pol, np.array([1.0]), 0.9, 400)
    return float(series[0]), analytic, float(fd[0]), ok


SCOPES = ("all", "nets", "envs", "estimators", "theory")


def gradcheck(scope: str = "all") -> CheckReport:
    """Run the catalogued gradient checks; see :data:`SCOPES`."""
    if scope not in SCOPES:
        raise ValueError(f"unknown scope {scope!r}; choose from {SCOPES}")
    rep = CheckReport()
    want = lambda s: scope in ("all", s)
    if want("nets"):
        p, j = net_gradient_errors(100)
        rep.checks.append(Check("net_param_grad_vs_fd", p, 1e-5, "100 random nets"))
        rep.checks.append(Check("net_input_jacobian_vs_fd", j, 1e-5, "100 random nets"))
    if want("envs"):
        for name, err in env_jacobian_errors().items():
            rep.checks.append(Check(f"env_jacobians_{name}", err, 1e-6))
    if want("theory"):
        series, analytic, fd, ok = oracle_triangle()
        err = max(rel_err(series, analytic), rel_err(fd, analytic)) if ok else float("inf")
        rep.checks.append(Check("oracle_triangle_integrator", err, 1e-4, f"grad_s V = {series:.8f}"))
        worst = max(e for _, e in closed_form_errors())
        rep.checks.append(Check("closed_form_vs_fd", worst, 1e-4,
                                f"{len(theory.catalog())} catalogued cases"))
    if want("estimators"):
        rep.checks.append(Check("l_k_vs_finite_difference", l_k_fd_error(), 1e-4, "k=1..5"))
        for env_name in ("integrator", "lqr"):
            rep.checks.append(Check(f"k_consistency_{env_name}", k_consistency_spread(env_name), 1e-4,
                                    "D_1..D_5, 100 states"))
        rep.checks.append(Check("unrolled_dvg_vs_analytic_dJdK", unrolled_dvg_error(), 1e-4))
        rep.tables.append(("DVG vs DVG_F on the integrator (exact model and critic, gamma=0.9)",
                           ["k", "|D_k|", "|D'_k|", "err D_k", "err D'_k"], dvg_vs_finite_table()))
    return rep


# -- theory verification report ---------------------------------------------------------

VERIFY_COLUMNS = ["case", "gamma", "prefix", "period", "exact_loop", "norm_inf", "norm_1", "margin",
                  "condition_holds", "spectral_radius", "power_sum_converged", "series_converged",
                  "closed_form_vs_fd"]


def verify(cases=None) -> list:
    """One row per catalogued case: loop structure, norm condition, radii and gradient agreement."""
    rows = []
    for c in cases or theory.catalog():
        info = theory.detect_loop(c.env, c.policy, c.s0)
        lm = theory.loop_matrix(c.env, c.policy, info, c.gamma)
        holds, margin = theory.corollary1_condition(lm.C, c.gamma, info.period - 1)
        ps = theory.power_sum(lm.A)
        _, ok = theory.state_value_grad_series(c.env, c.policy, c.s0, c.gamma)
        (_, err), = closed_form_errors([c])
        rows.append(dict(case=c.name, gamma=c.gamma, prefix=info.first_hit, period=info.period,
                         exact_loop=info.exact, norm_inf=lm.norm_inf, norm_1=lm.norm_1, margin=margin,
                         condition_holds=holds, spectral_radius=lm.spectral_radius,
                         power_sum_converged=ps.converged, series_converged=ok, closed_form_vs_fd=err))
    return rows


def verify_text(rows: list) -> str:
    head = f"{'case':28s} {'gamma':>5s} {'pre':>4s} {'per':>3s} {'margin':>9s} {'rho(A)':>9s} " \
           f"{'sum':>4s} {'ser':>4s} {'thm2 err':>9s}"
    lines = [head]
    for r in rows:
        lines.append(f"{r['case']:28s} {r['gamma']:5.2f} {r['prefix']:4d} {r['period']:3d} "
                     f"{r['margin']:9.4f} {r['spectral_radius']:9.4f} {str(r['power_sum_converged'])[0]:>4s} "
                     f"{str(r['series_converged'])[0]:>4s} {r['closed_form_vs_fd']:9.2e}")
    return "\n".join(lines)


def verify_csv(rows: list, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=VERIFY_COLUMNS)
        w.writeheader()
        w.writerows(rows)


def verify_passed(rows: list, tol: float = 1e-4) -> bool:
    return all(r["power_sum_converged"] and r["series_converged"] and r["closed_form_vs_fd"] <= tol
               for r in rows)


def load_policy(path) -> MLP:
    net, role = load_checkpoint(path)
    if role != "actor":
        log.warning("%s holds a %r network, not an actor", path, role)
    return net


# -- discounted-return evaluation ----------------------------------------------------------

def evaluation_starts(env: Env, n: int = 21) -> np.ndarray:
    """Evenly spaced start states across the initial-state box (first coordinate varied)."""
    lo = np.asarray(env.spec.init_low, dtype=float)
    hi = np.asarray(env.spec.init_high, dtype=float)
    return lo + np.linspace(0.0, 1.0, n)[:, None] * (hi - lo)


def policy_discounted_return(env: Env, policy, gamma: float, starts, horizon: int = 200) -> float:
    """Mean noise-free discounted return (clipped actions) over ``starts``."""
    total = 0.0
    for s0 in starts:
        s = np.asarray(s0, dtype=float)
        disc = 1.0
        for _ in range(horizon):
            s, r = env.step(s, policy(s))
            total += disc * r
            disc *= gamma
    return total / len(starts)


def integrator_optimal_return(gamma: float, starts) -> float:
    _, P = theory.integrator_optimal_gain(gamma)
    return float(-P * np.mean(np.asarray(starts, dtype=float) ** 2))
