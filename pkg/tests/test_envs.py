import numpy as np
import pytest

from dvpg.envs import (ENVIRONMENTS, DeterministicPendulum, LoopChain, PointMassLQR, ScalarIntegrator,
                       make_env, rollout)
from dvpg.harness import env_jacobian_errors
from dvpg.nets import LinearPolicy, NonFiniteError


def test_integrator_step():
    env = ScalarIntegrator()
    s, r = env.step(np.array([1.0]), np.array([-0.5]))
    assert s[0] == 0.5 and r == -1.25


def test_step_clips_and_counts():
    env = ScalarIntegrator(a_max=2.0)
    s, r = env.step(np.array([0.0]), np.array([5.0]))
    assert s[0] == 2.0 and r == -4.0 and env.clip_count == 1


def test_nonfinite_inputs_rejected():
    with pytest.raises(NonFiniteError):
        ScalarIntegrator().step(np.array([np.inf]), np.array([0.0]))


@pytest.mark.parametrize("name", sorted(ENVIRONMENTS))
def test_jacobians_match_finite_differences(name):
    assert env_jacobian_errors()[name] < 1e-6


def test_pendulum_upright_is_a_fixed_point():
    env = DeterministicPendulum()
    up = np.array([1.0, 0.0, 0.0])
    s, r = env.step(up, np.array([0.0]))
    np.testing.assert_array_equal(s, up)
    assert r == 0.0


def test_pendulum_stays_on_the_circle():
    env = DeterministicPendulum()
    rng = np.random.default_rng(0)
    s = env.sample_initial(rng)
    for _ in range(500):
        s, _ = env.step(s, rng.uniform(-2, 2, 1))
    assert abs(s[0] ** 2 + s[1] ** 2 - 1.0) < 1e-12


def test_loopchain_revisits_exactly():
    env = LoopChain(period=3, prefix=2)
    pol = LinearPolicy([[-0.3, 0.1]], [0.2])
    s = env.start_state()
    seen = [s]
    for _ in range(10):
        s = env.transition(s, pol(s))
        seen.append(s)
    # after the 2-step lead-in, every third state repeats bit for bit
    for t in range(2, 8):
        np.testing.assert_array_equal(seen[t], seen[t + 3])
    np.testing.assert_array_equal(seen[2], [1.0, 0.0])


def test_rollout_return_and_csv(tmp_path):
    env = ScalarIntegrator()
    traj, ret = rollout(env, LinearPolicy([[-1.0]]), np.array([1.0]), 5, 0.9)
    assert ret == -2.0  # deadbeat: s0=1, a=-1 then all zeros
    traj.to_csv(tmp_path / "t.csv")
    assert (tmp_path / "t.csv").read_text().splitlines()[0].startswith("t,")


def test_make_env_unknown():
    with pytest.raises(ValueError):
        make_env("cartpole")


def test_lqr_matches_its_matrices():
    env = PointMassLQR()
    rng = np.random.default_rng(0)
    s, a = rng.standard_normal(2), rng.standard_normal(1)
    np.testing.assert_allclose(env.transition(s, a), env.A @ s + env.B @ a)
    np.testing.assert_allclose(env.reward(s, a), -(s @ env.Q @ s + a @ env.R @ a))
