import numpy as np
import pytest

from dvpg.estimators import MLPCritic
from dvpg.harness import load_policy
from dvpg.model import AnalyticModel, Batch
from dvpg.nets import Adam, LinearPolicy, MLP, TargetPair, make_mlp
from dvpg.theory import QuadraticValueCritic
from dvpg.envs import ScalarIntegrator
from dvpg.training import (EstimatorSpec, OUNoise, ReplayBuffer, RunLog, TrainConfig, Trainer,
                           TrainingError, _weight_mask, critic_update, exploration_action,
                           imagination_rollouts, parse_estimator, policy_update, train_run)


def small_config(**kw):
    base = dict(env="integrator", episodes=3, steps_per_episode=40, warmup=64, batch_size=32,
                buffer_capacity=1000, seed=3)
    base.update(kw)
    return TrainConfig(**base)


def test_parse_estimator():
    assert parse_estimator("ddpg").canonical == "dpg"
    assert parse_estimator("dvg(0)").canonical == "dpg"
    assert parse_estimator("dvg(3)") == EstimatorSpec("dvg", k=3)
    assert parse_estimator("dvpg(0.1, 2)").canonical == "dvpg(0.1,2)"
    assert parse_estimator("dvpg", lam=0.5, t=1).canonical == "dvpg(0.5,1)"
    assert parse_estimator("ddpg_model").canonical == "ddpg_model(128,4)"
    for bad in ("dvpg(1.0,2)", "dvg_finite(0)", "dvg(-1)", "dpg(2)", "foo", "dvpg(0.1)", "dvg(x)"):
        with pytest.raises(ValueError):
            parse_estimator(bad)


def test_config_validation():
    for kw in (dict(gamma=1.0), dict(tau=2.0), dict(lr_actor=0.0), dict(batch_size=0),
               dict(env="cartpole"), dict(s1_source="both")):
        with pytest.raises(ValueError):
            small_config(**kw).validate()
    assert small_config(estimator="ddpg").validate().estimator == "dpg"


def test_replay_fifo_eviction():
    buf = ReplayBuffer(3, 1, 1)
    for i in range(5):
        buf.push([i], [0], float(i), [i + 1])
    assert len(buf) == 3
    np.testing.assert_array_equal(buf.items().s[:, 0], [2, 3, 4])


def test_replay_empty_sample_raises():
    with pytest.raises(ValueError, match="empty"):
        ReplayBuffer(4, 1, 1).sample(1, np.random.default_rng(0))


def test_replay_sampling_is_uniform():
    buf = ReplayBuffer(10, 1, 1)
    for i in range(10):
        buf.push([i], [0], 0.0, [0])
    n = 100_000
    counts = np.bincount(buf.sample(n, np.random.default_rng(0)).s[:, 0].astype(int), minlength=10)
    p = 0.1
    assert np.all(np.abs(counts - n * p) < 5 * np.sqrt(n * p * (1 - p)))


def test_ou_stationary_spread():
    theta, sigma = 0.15, 0.4
    ou = OUNoise.zeros(1, theta, sigma)
    rng = np.random.default_rng(0)
    xs = np.array([ou.sample(rng)[0] for _ in range(200_000)])[1000:]
    assert abs(xs.std() / (sigma / np.sqrt(2 * theta)) - 1) < 0.1


def test_exploration_without_noise_is_the_policy():
    pol = LinearPolicy([[-0.5]])
    a, _ = exploration_action(pol, np.array([1.0]), OUNoise.zeros(1, 0.15, 0.0),
                              np.random.default_rng(0), 2.0)
    assert a[0] == -0.5


def test_exploration_is_clipped():
    pol = LinearPolicy([[0.0]])
    noise = OUNoise.zeros(1, 0.15, 100.0)
    rng = np.random.default_rng(0)
    for _ in range(50):
        a, noise = exploration_action(pol, np.array([0.0]), noise, rng, 2.0)
        assert abs(a[0]) <= 2.0


def zero_critic_pair(tau=0.01):
    net = MLP((2, 1), ("identity",))
    return TargetPair.from_online(net, tau)


def test_critic_loss_single_sample():
    critic = zero_critic_pair()
    actor = TargetPair.from_online(LinearPolicy([[0.0]]), 0.01)
    b = Batch(np.array([[0.5]]), np.array([[0.1]]), np.array([1.0]), np.array([[0.2]]))
    assert critic_update(b, critic, actor, 0.9, 1e-3, Adam(critic.online.n_params)) == 1.0


def test_critic_fits_a_frozen_batch():
    rng = np.random.default_rng(0)
    critic = TargetPair.from_online(make_mlp(2, 1, rng, hidden=(32, 32)), 0.01)
    actor = TargetPair.from_online(LinearPolicy([[0.0]]), 0.01)
    S, A = rng.uniform(-1, 1, (64, 1)), rng.uniform(-1, 1, (64, 1))
    b = Batch(S, A, -(S[:, 0] ** 2 + A[:, 0] ** 2), S + A)
    opt = Adam(critic.online.n_params)
    first = critic_update(b, critic, actor, 0.0, 1e-3, opt)
    for _ in range(199):
        last = critic_update(b, critic, actor, 0.0, 1e-3, opt)
    assert last < first / 10


def test_critic_l2_spares_biases():
    np.testing.assert_array_equal(_weight_mask(zero_critic_pair().online), [1, 1, 0])


def test_dpg_step_is_zero_when_critic_ignores_action():
    rng = np.random.default_rng(1)
    net = make_mlp(2, 1, rng, final_init=None)
    net.weights[0][:, 1] = 0.0  # no path from the action input
    actor = make_mlp(1, 1, rng, out_activation="tanh", out_scale=2.0)
    p0 = actor.params.copy()
    S = rng.standard_normal((8, 1))
    b = Batch(S, actor(S), np.zeros(8), S)
    policy_update(b, EstimatorSpec("dpg"), actor, MLPCritic(net, 1), None, 0.9, Adam(actor.n_params), 1e-3)
    np.testing.assert_array_equal(actor.params, p0)


def test_dvg_1_moves_integrator_gain_toward_optimum():
    env, gamma = ScalarIntegrator(), 0.9
    pol = LinearPolicy([[0.0]])
    opt = Adam(pol.n_params)
    S = np.linspace(-1, 1, 11)[:, None]
    gaps = []
    for _ in range(40):
        critic = QuadraticValueCritic(env, pol.K, gamma)
        b = Batch(S, pol(S), env.reward(S, pol(S)), env.transition(S, pol(S)))
        policy_update(b, EstimatorSpec("dvg", k=1), pol, critic, AnalyticModel(env), gamma, opt, 0.01)
        gaps.append(abs(1 + pol.K[0, 0]))
    assert all(b < a for a, b in zip(gaps, gaps[1:]))


def test_policy_update_requires_model():
    pol = LinearPolicy([[0.0]])
    b = Batch(np.zeros((1, 1)), np.zeros((1, 1)), np.zeros(1), np.zeros((1, 1)))
    with pytest.raises(ValueError, match="model"):
        policy_update(b, EstimatorSpec("dvg", k=2), pol, None, None, 0.9, Adam(1), 1e-3)


def test_imagination_degenerate_cases():
    env = ScalarIntegrator()
    pol = make_mlp(1, 1, np.random.default_rng(0), out_activation="tanh", out_scale=2.0)
    critic = MLPCritic(make_mlp(2, 1, np.random.default_rng(1)), 1)
    real, mb = ReplayBuffer(10, 1, 1), ReplayBuffer(10, 1, 1)
    args = (critic, Adam(pol.n_params), 1e-3, np.random.default_rng(2), 0.4, 2.0)
    assert imagination_rollouts(pol, AnalyticModel(env), real, mb, 5, 4, 8, *args) == 0
    real.push([1.0], [0.0], -1.0, [1.0])
    assert imagination_rollouts(pol, AnalyticModel(env), real, mb, 0, 4, 8, *args) == 0
    assert len(mb) == 0
    assert imagination_rollouts(pol, AnalyticModel(env), real, mb, 5, 2, 8, *args) == 2
    assert len(mb) == 5
    # imagined transitions are the model's, not copies of real ones
    b = mb.items()
    np.testing.assert_allclose(b.s_next, env.transition(b.s, b.a))


def test_zero_episodes_gives_empty_log(tmp_path):
    log = train_run(small_config(episodes=0), tmp_path)
    assert log.records == []
    back = RunLog.load(tmp_path)
    assert back.records == [] and back.csv_text() == log.csv_text()


def test_runs_are_deterministic():
    cfg = dict(estimator="dvpg(0.2,2)")
    assert train_run(small_config(**cfg)).same_as(train_run(small_config(**cfg)))
    assert not train_run(small_config()).same_as(train_run(small_config(seed=4)))


def test_dvg0_and_ddpg_logs_are_identical():
    assert train_run(small_config(estimator="dvg(0)")).same_as(train_run(small_config(estimator="ddpg")))


def test_dvpg_lambda_zero_trains_exactly_like_dpg():
    a = train_run(small_config(estimator="dvpg(0.0,2)"))
    b = train_run(small_config(estimator="dpg"))
    np.testing.assert_array_equal(a.returns(), b.returns())
    np.testing.assert_array_equal([r["critic_loss"] for r in a.records], [r["critic_loss"] for r in b.records])


def test_no_updates_during_warmup():
    tr = Trainer(small_config(warmup=500, episodes=2))
    p_actor, p_critic = tr.actor.online.params.copy(), tr.critic.online.params.copy()
    tr.run()
    assert tr.updates == 0 and len(tr.buffer) == 80
    np.testing.assert_array_equal(tr.actor.online.params, p_actor)
    np.testing.assert_array_equal(tr.critic.online.params, p_critic)
    assert np.isnan(tr.log.records[-1]["critic_loss"])


def test_targets_lag_online_networks():
    tr = Trainer(small_config(tau=0.1))
    for _ in range(63):
        tr.step()
    assert tr.updates == 0
    before = tr.critic.target.params.copy()
    tr.step()
    assert tr.updates == 1
    np.testing.assert_allclose(tr.critic.target.params, 0.1 * tr.critic.online.params + 0.9 * before,
                               atol=1e-15)


def test_run_writes_log_and_checkpoints(tmp_path):
    log = train_run(small_config(checkpoint_every=2, estimator="dvg(2)"), tmp_path)
    assert RunLog.load(tmp_path).csv_text() == log.csv_text()
    assert list(RunLog.load(tmp_path).records[0]) == log.columns
    assert (tmp_path / "checkpoints" / "episode_00002" / "actor.net").exists()
    assert (tmp_path / "final" / "model").exists()
    pol = load_policy(tmp_path / "final" / "actor.net")
    assert pol(np.zeros(1)).shape == (1,)


def test_runlog_rejects_decreasing_steps():
    log = RunLog()
    log.append({"episode": 0, "steps": 10, "return": 0.0})
    with pytest.raises(ValueError):
        log.append({"episode": 1, "steps": 5, "return": 0.0})


def test_training_error_carries_context():
    tr = Trainer(small_config())
    tr.actor.online.params[:] = np.nan
    with pytest.raises(TrainingError, match="episode 0"):
        tr.run_episode()
