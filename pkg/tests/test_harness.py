"""Evaluation, statistics, experiment orchestration, and report tests."""

import json
import math

import numpy as np
import pytest

from cookbench import attack, gridworld as gw, harness, nn, rl
from cookbench.harness import (
    DefenseExperimentConfig,
    EvalSpec,
    ExperimentConfig,
    Report,
    ReportRow,
    ScoreStats,
)


@pytest.fixture(scope="module")
def trained_pair():
    """Two cheap distinct policies with non-degenerate behavior."""
    cross = gw.bundled_layout("cross")
    arch = nn.ArchSpec(height=cross.height, width=cross.width, hidden=(16, 16))
    out = []
    for seed in (0, 1):
        p = nn.init_params(arch, seed=seed)
        p.weights["actor.W"] *= 50.0
        out.append(p)
    return cross, out


# ---------------------------------------------------------------------------
# evaluate / ScoreStats
# ---------------------------------------------------------------------------


def test_eval_spec_validation(trained_pair):
    cross, (p, _) = trained_pair
    with pytest.raises(ValueError):
        EvalSpec(policy=p, layout=cross, games=0)


def test_always_wait_policy_scores_zero(trained_pair):
    cross, (p, _) = trained_pair
    waiter = nn.clone_params(p)
    waiter.weights["actor.W"][:] = 0.0
    waiter.weights["actor.b"][:] = 0.0
    waiter.weights["actor.b"][0] = 1000.0  # joint (wait, wait) dominates
    stats = harness.evaluate(EvalSpec(policy=waiter, layout=cross, games=6, horizon=50))
    assert stats.grand_mean == 0.0 and stats.grand_stderr == 0.0


def test_evaluate_deterministic(trained_pair):
    cross, (p, _) = trained_pair
    spec = EvalSpec(policy=p, layout=cross, games=4, horizon=40, seed=11)
    a = harness.evaluate(spec)
    b = harness.evaluate(spec)
    assert np.array_equal(a.episodes, b.episodes)


def test_stats_match_high_precision_reference():
    rng = np.random.default_rng(0)
    episodes = rng.normal(loc=50, scale=10, size=(3, 40))
    stats = ScoreStats.from_episodes(episodes, ["a", "b", "c"])
    for i, row in enumerate(stats.per_state):
        xs = episodes[i].tolist()
        mean = math.fsum(xs) / len(xs)
        var = math.fsum((x - mean) ** 2 for x in xs) / (len(xs) - 1)
        assert row["mean"] == pytest.approx(mean, rel=1e-12)
        assert row["stderr"] == pytest.approx(math.sqrt(var / len(xs)), rel=1e-12)
    assert stats.grand_mean == pytest.approx(
        math.fsum(r["mean"] for r in stats.per_state) / 3, rel=1e-12
    )


def test_grand_mean_recomputable_from_episode_log(trained_pair):
    cross, (p, _) = trained_pair
    units = gw.enumerate_unit_perturbations(cross)
    states = [None, gw.perturbation_of([units[0]])]
    stats = harness.evaluate(EvalSpec(policy=p, layout=cross, states=states, games=5, horizon=40))
    replay = np.mean([np.mean(row) for row in stats.episodes])
    assert stats.grand_mean == pytest.approx(replay, rel=1e-12)
    assert stats.n_episodes == 10


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


def _sample_report():
    rows = [
        ReportRow("sp", "none", "cross", 123.456789, 1.23456, 40),
        ReportRow("sp", "grad", "cross", 10.0, 0.5, 40),
        ReportRow("fcp", "grad", "cross", 0.0, 0.0, 0, skipped=True),
    ]
    return Report(rows=rows, metadata={"x": 1})


def test_report_csv_md_same_numbers():
    report = _sample_report()
    csv_text = harness.render_report(report, "csv")
    md_text = harness.render_report(report, "md")
    assert "123.4568,1.2346,40" in csv_text
    assert "| 123.4568 | 1.2346 | 40 |" in md_text
    assert "skipped" in csv_text and "skipped" in md_text


def test_report_header_only_when_empty():
    text = harness.render_report(Report(rows=[]), "csv")
    assert text == "method,attack,layout,mean,stderr,n\n"


def test_emit_report_deterministic_bytes(tmp_path):
    report = _sample_report()
    harness.emit_report(report, "csv", tmp_path / "a.csv")
    harness.emit_report(report, "csv", tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_render_unknown_format():
    with pytest.raises(ValueError):
        harness.render_report(_sample_report(), "xml")


# ---------------------------------------------------------------------------
# Attack experiment
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def attack_report(trained_pair, tmp_path_factory):
    cross, policies = trained_pair
    config = ExperimentConfig(
        layout_name="cross", games=2, horizon=30, k=3, k_random=4, n_traj=2,
        p_freq=0.9, seed=1,
    )
    out = tmp_path_factory.mktemp("attack_exp")
    report, artifacts = harness.run_attack_experiment(
        policies, cross, config=config, out_dir=out
    )
    return cross, policies, config, report, artifacts, out


def test_attack_experiment_rows_complete(attack_report):
    cross, policies, config, report, artifacts, out = attack_report
    methods = {r.attack for r in report.rows}
    assert methods == set(harness.ATTACK_METHODS)
    agents = {r.method for r in report.rows}
    assert agents == {"agent0", "agent1", "all_agents"}


def test_attack_experiment_none_equals_standard_eval(attack_report):
    cross, policies, config, report, artifacts, out = attack_report
    row = next(r for r in report.rows if r.method == "agent0" and r.attack == "none")
    direct = harness.evaluate(
        EvalSpec(policy=policies[0], layout=cross, states=[None], games=config.games,
                 horizon=config.horizon, seed=config.seed + 7000)
    )
    assert row.mean == pytest.approx(direct.grand_mean)


def test_attack_experiment_transfer_swaps_states(attack_report):
    cross, policies, config, report, artifacts, out = attack_report
    # with two policies, agent0's transfer states are exactly agent1's grad states
    transfer_stats = artifacts["stats"][("transfer", 0)]
    grad_other = artifacts["grad"][1]
    assert transfer_stats.episodes.shape[0] == len(grad_other.states())


def test_attack_experiment_persists_artifacts(attack_report):
    cross, policies, config, report, artifacts, out = attack_report
    assert (out / "grad_agent0.json").exists()
    assert (out / "attack_report.csv").exists()
    loaded = attack.load_attack_result(out / "grad_agent1.json")
    assert loaded.method == "grad"
    assert loaded.policy_id == nn.params_fingerprint(policies[1])


def test_attack_experiment_transfer_needs_two():
    cross = gw.bundled_layout("cross")
    arch = nn.ArchSpec(height=cross.height, width=cross.width, hidden=(8,))
    with pytest.raises(ValueError, match="two"):
        harness.run_attack_experiment([nn.init_params(arch, 0)], cross)


def test_experiment_config_from_json(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"layout_name": "cross", "games": 3}))
    cfg = ExperimentConfig.from_json(path)
    assert cfg.games == 3 and cfg.layout_name == "cross"
    path.write_text(json.dumps({"bogus": 1}))
    with pytest.raises(ValueError, match="unknown"):
        ExperimentConfig.from_json(path)


# ---------------------------------------------------------------------------
# Defense experiment (micro budgets)
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def defense_report(tmp_path_factory):
    cross = gw.bundled_layout("cross")
    config = DefenseExperimentConfig(
        layout_name="cross",
        base_steps=64,
        extra_steps=64,
        finetune_steps=64,
        div_start_steps=64,
        n_agents=1,
        games=2,
        horizon=20,
        k=2,
        k_random=3,
        n_traj=2,
        p_freq=0.9,
        kickstart_epochs=1,
        methods=("extra_sp", "div_start", "bat_sp"),
        ppo={"n_envs": 4, "rollout_steps": 8, "horizon": 20, "minibatch": 32, "epochs": 1},
    )
    out = tmp_path_factory.mktemp("defense_exp")
    report = harness.run_defense_experiment(cross, config, out_dir=out)
    return config, report, out


def test_defense_grid_complete(defense_report):
    config, report, out = defense_report
    cells = {(r.method, r.attack) for r in report.rows}
    assert cells == {
        (m, a) for m in harness.DEFENSE_METHODS for a in harness.DEFENSE_ATTACKS
    }
    for row in report.rows:
        if row.method in ("extra_fcp", "bat_fcp"):
            assert row.skipped
        else:
            assert not row.skipped


def test_defense_reports_written(defense_report):
    config, report, out = defense_report
    assert (out / "defense_report.csv").exists()
    assert (out / "defense_report.md").exists()
    meta = json.loads((out / "defense_metadata.json").read_text())
    assert meta["white_box_reattack"] is True


def test_defense_config_round_trip(tmp_path):
    path = tmp_path / "d.json"
    path.write_text(json.dumps({"layout_name": "cross", "methods": ["bat_sp"], "n_agents": 1}))
    cfg = DefenseExperimentConfig.from_json(path)
    assert cfg.methods == ("bat_sp",)
    path.write_text(json.dumps({"nope": 2}))
    with pytest.raises(ValueError, match="unknown"):
        DefenseExperimentConfig.from_json(path)


# ---------------------------------------------------------------------------
# Reproducibility
# ---------------------------------------------------------------------------


def test_attack_experiment_reports_byte_identical(trained_pair, tmp_path):
    cross, policies = trained_pair
    config = ExperimentConfig(layout_name="cross", games=2, horizon=20, k=2, k_random=3,
                              n_traj=2, p_freq=0.9, seed=5)
    r1, _ = harness.run_attack_experiment(policies, cross, methods=("none", "grad"),
                                          config=config)
    r2, _ = harness.run_attack_experiment(policies, cross, methods=("none", "grad"),
                                          config=config)
    assert harness.render_report(r1, "csv") == harness.render_report(r2, "csv")
