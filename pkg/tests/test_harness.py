import csv

import numpy as np
import pytest

from dvpg import estimators, harness
from dvpg.cli import main
from dvpg.envs import ScalarIntegrator
from dvpg.nets import LinearPolicy
from dvpg.training import RunLog, TrainConfig


def write(path, text):
    path.write_text(text)
    return path


def fake_log(steps, returns):
    return RunLog({}, [{"episode": i, "steps": s, "return": r} for i, (s, r) in enumerate(zip(steps, returns))])


# -- configs ---------------------------------------------------------------------

def test_load_config_defaults(tmp_path):
    cfg = harness.load_config(write(tmp_path / "c.cfg", "# only the env\nenv = integrator\n"))
    assert cfg.env == "integrator"
    assert cfg.gamma == TrainConfig().gamma and cfg.tau == 0.001 and cfg.batch_size == 128


def test_load_config_estimator_arguments(tmp_path):
    cfg = harness.load_config(write(tmp_path / "c.cfg", "estimator = dvpg\nlam = 0.1\nt = 2\n"))
    assert cfg.estimator == "dvpg(0.1,2)"


def test_unknown_key_suggests_the_nearest(tmp_path):
    with pytest.raises(harness.ConfigError, match="did you mean 'lam'"):
        harness.load_config(write(tmp_path / "c.cfg", "estimator = dvpg\nlamda = 0.1\nt = 2\n"))


def test_invalid_values_rejected(tmp_path):
    for text in ("estimator = dvpg\nlam = 1.0\nt = 2\n", "gamma = high\n", "model_delta = maybe\n",
                 "no equals sign\n"):
        with pytest.raises(harness.ConfigError):
            harness.load_config(write(tmp_path / "c.cfg", text))
    with pytest.raises(harness.ConfigError, match="not found"):
        harness.load_config(tmp_path / "missing.cfg")


# -- aggregation -------------------------------------------------------------------

def test_band_of_one_to_five():
    med, lo, hi = harness.band_stats(np.array([1.0, 2, 3, 4, 5]), 0.75)
    assert (med, lo, hi) == (3.0, 1.5, 4.5)


def test_aggregate_single_seed_band_collapses():
    rows = harness.aggregate_runs([fake_log([10, 20], [-5.0, -3.0])])
    assert rows == [(10, 1, -5.0, -5.0, -5.0), (20, 1, -3.0, -3.0, -3.0)]


def test_locf_carries_forward():
    np.testing.assert_array_equal(harness.locf(np.array([10, 30]), np.array([1.0, 2.0]),
                                               np.array([5, 10, 20, 30, 40])),
                                  [np.nan, 1.0, 1.0, 2.0, 2.0])


def test_aggregate_on_union_grid_uses_locf():
    rows = harness.aggregate_runs([fake_log([10, 30], [1.0, 3.0]), fake_log([20], [5.0])])
    assert [r[0] for r in rows] == [10, 20, 30]
    assert rows[0][1] == 1 and rows[1][2] == 3.0 and rows[2][2] == 4.0


def test_aggregate_is_order_independent():
    rng = np.random.default_rng(0)
    logs = [fake_log(np.cumsum(rng.integers(1, 50, 8)), rng.normal(size=8)) for _ in range(5)]
    assert harness.aggregate_runs(logs) == harness.aggregate_runs(logs[::-1])
    assert harness.aggregate_runs(logs, bucket=50) == harness.aggregate_runs(logs[::-1], bucket=50)


def test_aggregate_needs_completed_runs():
    with pytest.raises(ValueError):
        harness.aggregate_runs([RunLog()])


# -- experiments -----------------------------------------------------------------

MANIFEST = """[experiment]
output = runs
seeds = 0, 1

[config:dpg]
file = base.cfg
estimator = dpg

[config:dvg2]
file = base.cfg
estimator = dvg(2)
seeds = 5
"""

BASE = """env = integrator
episodes = 2
steps_per_episode = 30
warmup = 40
batch_size = 16
buffer_capacity = 500
"""


def make_manifest(tmp_path):
    write(tmp_path / "base.cfg", BASE)
    return harness.ExperimentManifest.load(write(tmp_path / "exp.ini", MANIFEST))


def test_manifest_parsing(tmp_path):
    m = make_manifest(tmp_path)
    assert m.seeds == {"dpg": [0, 1], "dvg2": [5]}
    assert m.configs["dvg2"].estimator == "dvg(2)" and m.configs["dpg"].episodes == 2
    assert m.output == tmp_path / "runs"
    write(tmp_path / "bad.ini", "[experiment]\nseeds = 1, 1\n[config:a]\n")
    with pytest.raises(harness.ConfigError, match="duplicate"):
        harness.ExperimentManifest.load(tmp_path / "bad.ini")


def test_run_experiment_index_and_rerun(tmp_path):
    m = make_manifest(tmp_path)
    res = harness.run_experiment(m)
    assert res.failures == 0
    with open(tmp_path / "runs" / "index.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert [(r["config"], r["seed"], r["status"]) for r in rows] == \
        [("dpg", "0", "ok"), ("dpg", "1", "ok"), ("dvg2", "5", "ok")]
    first = RunLog.load(tmp_path / "runs" / "dvg2" / "seed_5")
    harness.run_experiment(m)
    assert RunLog.load(tmp_path / "runs" / "dvg2" / "seed_5").same_as(first)
    summary = harness.aggregate(tmp_path / "runs")
    names = {r["config"] for r in csv.DictReader(open(summary, newline=""))}
    assert names == {"dpg", "dvg2"}


def test_failed_run_is_isolated(tmp_path, monkeypatch):
    m = make_manifest(tmp_path)
    real = harness.train_run

    def flaky(cfg, run_dir=None):
        if cfg.seed == 1:
            raise RuntimeError("boom")
        return real(cfg, run_dir)

    monkeypatch.setattr(harness, "train_run", flaky)
    res = harness.run_experiment(m)
    assert res.failures == 1
    assert [r["status"] for r in res.rows] == ["ok", "failed", "ok"]


# -- thresholds ------------------------------------------------------------------

def test_threshold_arithmetic():
    assert harness.success_threshold(np.arange(11.0) - 100, -10.0) == pytest.approx(-91 + 0.8 * 81)


def test_steps_to_threshold():
    log_ = fake_log(np.arange(1, 21) * 100, [-10.0] * 10 + [0.0] * 10)
    assert harness.steps_to_threshold(log_, -0.5) == 2000
    assert harness.steps_to_threshold(log_, -5.0) == 1500
    assert harness.steps_to_threshold(log_, 1.0) is None


# -- visitation ------------------------------------------------------------------

def test_visitation_with_no_episodes(tmp_path):
    rep = harness.visitation_report(ScalarIntegrator(), LinearPolicy([[-1.0]]), 0)
    assert rep.total_steps == 0 and rep.counts.sum() == 0 and rep.top_share() == 0.0
    rep.to_csv(tmp_path / "v.csv")
    assert len((tmp_path / "v.csv").read_text().splitlines()) == 11


def test_visitation_of_deadbeat_policy_concentrates():
    env = ScalarIntegrator()
    rep = harness.visitation_report(env, LinearPolicy([[-1.0]]), 5, bins=10, horizon=50)
    assert rep.total_steps == 250 and rep.counts.sum() == 250
    assert rep.top_share(0.1) >= 49 / 50


# -- gradcheck and verify ----------------------------------------------------------

def test_gradcheck_estimators_passes_and_prints_table():
    rep = harness.gradcheck("estimators")
    assert rep.passed, rep.text()
    assert "DVG vs DVG_F" in rep.text()
    with pytest.raises(ValueError):
        harness.gradcheck("everything")


def test_gradcheck_catches_sign_flip_in_terminal_term(monkeypatch):
    real = estimators._terminal_cotangent
    monkeypatch.setattr(estimators, "_terminal_cotangent", lambda tr, c, k: -real(tr, c, k))
    rep = harness.gradcheck("estimators")
    assert not rep.passed
    assert "l_k_vs_finite_difference" in rep.failed()


def test_verify_rows(tmp_path):
    cases = [c for c in harness.theory.catalog() if c.name in ("integrator-K-0.5", "lqr-fast")]
    if len(cases) < 2:
        cases = harness.theory.catalog()[:4]
    rows = harness.verify(cases)
    assert harness.verify_passed(rows)
    harness.verify_csv(rows, tmp_path / "v.csv")
    header = (tmp_path / "v.csv").read_text().splitlines()[0].split(",")
    assert header == harness.VERIFY_COLUMNS


# -- CLI -------------------------------------------------------------------------

def test_cli_train_and_visitation(tmp_path, capsys):
    cfg = write(tmp_path / "c.cfg", BASE)
    assert main(["train", str(cfg), "--out", str(tmp_path / "run"), "--seed", "2"]) == 0
    assert RunLog.load(tmp_path / "run").metadata["seed"] == "2"
    out = tmp_path / "vis.csv"
    assert main(["visitation", "integrator", str(tmp_path / "run" / "final" / "actor.net"),
                 "--episodes", "2", "--out", str(out)]) == 0
    assert out.exists()


def test_cli_exit_codes(tmp_path, monkeypatch):
    assert main(["train", str(write(tmp_path / "bad.cfg", "lamda = 0.1\n"))]) == 1
    assert main(["train", str(tmp_path / "missing.cfg")]) == 1
    assert main(["gradcheck", "--scope", "envs"]) == 0
    real = estimators._terminal_cotangent
    monkeypatch.setattr(estimators, "_terminal_cotangent", lambda tr, c, k: -real(tr, c, k))
    assert main(["gradcheck", "--scope", "estimators"]) == 2
    monkeypatch.setattr(harness, "train_run", lambda cfg, d=None: (_ for _ in ()).throw(RuntimeError("x")))
    write(tmp_path / "base.cfg", BASE)
    assert main(["experiment", str(write(tmp_path / "exp.ini", MANIFEST))]) == 3
    assert main(["aggregate", str(tmp_path / "empty")]) == 1
