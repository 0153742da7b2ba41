"""Evaluation protocol, experiment orchestration, and reports.

An evaluation runs a block of fixed-horizon games per initial state and
aggregates delivery scores: per-state mean and standard error (sample
standard deviation over the square root of the game count), then a grand
mean over per-state means (and over agents when several are evaluated).
Episodes are seeded per (state, game) and aggregated in that order, so a
report is a pure function of its config and seed.

Experiments wire the other modules together: the attack experiment pits
each policy against the gradient attack, the random baselines, and
transferred adversarial states generated against the other policies; the
defense experiment trains the baseline grid (extra training, diversified
start, hardened agents) and evaluates every cell under no attack, random
perturbations, and regenerated white-box attacks.
"""

from __future__ import annotations

import io
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import defense, featurize, nn, rl
from .attack import (
    collect_attack_trajectories,
    deviation_monitor,
    generate_attack,
    random_attack,
    save_attack_result,
)
from .gridworld import Action, Layout, Perturbation, bundled_layout, reset, step

log = logging.getLogger("cookbench.harness")


@dataclass
class EvalSpec:
    policy: nn.PolicyParams
    layout: Layout
    states: Sequence[Optional[Perturbation]] = (None,)
    games: int = 100
    horizon: int = 800
    seed: int = 0
    deterministic: bool = False  # argmax actions instead of sampling

    def __post_init__(self) -> None:
        if self.games < 1 or self.horizon < 1:
            raise ValueError("games and horizon must be at least 1")


@dataclass
class ScoreStats:
    """Per-initial-state scores and their aggregate."""

    per_state: list  # dicts: label, mean, stderr, n
    grand_mean: float
    grand_stderr: float
    n_episodes: int
    episodes: np.ndarray  # [n_states, games] raw episode scores

    @staticmethod
    def from_episodes(episodes: np.ndarray, labels: Sequence[str]) -> "ScoreStats":
        per_state = []
        for i, label in enumerate(labels):
            scores = episodes[i]
            n = len(scores)
            std = float(np.std(scores, ddof=1)) if n > 1 else 0.0
            per_state.append(
                {
                    "label": label,
                    "mean": float(np.mean(scores)),
                    "stderr": std / np.sqrt(n) if n > 1 else 0.0,
                    "n": n,
                }
            )
        pooled = episodes.reshape(-1)
        pooled_std = float(np.std(pooled, ddof=1)) if pooled.size > 1 else 0.0
        return ScoreStats(
            per_state=per_state,
            grand_mean=float(np.mean([s["mean"] for s in per_state])),
            grand_stderr=pooled_std / np.sqrt(pooled.size) if pooled.size > 1 else 0.0,
            n_episodes=int(pooled.size),
            episodes=episodes,
        )


def _play_games(
    policy: nn.PolicyParams,
    layout: Layout,
    perturbation: Optional[Perturbation],
    games: int,
    horizon: int,
    rng: np.random.Generator,
    deterministic: bool,
) -> np.ndarray:
    """Scores of `games` lockstep episodes from one initial state."""
    states = [reset(layout, perturbation) for _ in range(games)]
    scores = np.zeros(games)
    for _ in range(horizon):
        obs = np.stack([featurize.encode(layout, s, dtype=np.float32) for s in states])
        z, _, _ = nn.joint_logits(policy, obs)
        if deterministic:
            acts = np.argmax(z, axis=1)
        else:
            acts = nn.sample_actions(nn.softmax_T(z, 1.0), rng)
        for i in range(games):
            a1, a2 = divmod(int(acts[i]), 6)
            states[i], r, _ = step(layout, states[i], (Action(a1), Action(a2)))
            scores[i] += r
    return scores


def evaluate(spec: EvalSpec) -> ScoreStats:
    """Run games x states episodes and aggregate delivery scores."""
    episodes = np.zeros((len(spec.states), spec.games))
    labels = []
    for si, pert in enumerate(spec.states):
        rng = np.random.default_rng([spec.seed, si])
        episodes[si] = _play_games(
            spec.policy, spec.layout, pert, spec.games, spec.horizon, rng, spec.deterministic
        )
        labels.append("standard" if pert is None else f"D{pert.distance}@{si}")
    return ScoreStats.from_episodes(episodes, labels)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass
class ReportRow:
    method: str
    attack: str
    layout: str
    mean: float
    stderr: float
    n: int
    skipped: bool = False


@dataclass
class Report:
    rows: list
    metadata: dict = field(default_factory=dict)


def _fmt(x: float) -> str:
    return f"{x:.4f}"


def render_report(report: Report, fmt: str = "csv") -> str:
    """Deterministic text rendering; csv and md carry identical numbers."""
    if fmt == "csv":
        out = io.StringIO()
        out.write("method,attack,layout,mean,stderr,n\n")
        for r in report.rows:
            if r.skipped:
                out.write(f"{r.method},{r.attack},{r.layout},skipped,skipped,0\n")
            else:
                out.write(
                    f"{r.method},{r.attack},{r.layout},{_fmt(r.mean)},{_fmt(r.stderr)},{r.n}\n"
                )
        return out.getvalue()
    if fmt == "md":
        out = io.StringIO()
        out.write("| method | attack | layout | mean | stderr | n |\n")
        out.write("|---|---|---|---|---|---|\n")
        for r in report.rows:
            if r.skipped:
                out.write(f"| {r.method} | {r.attack} | {r.layout} | skipped | skipped | 0 |\n")
            else:
                out.write(
                    f"| {r.method} | {r.attack} | {r.layout} | {_fmt(r.mean)} | {_fmt(r.stderr)} | {r.n} |\n"
                )
        return out.getvalue()
    raise ValueError(f"unknown report format {fmt!r}")


def emit_report(report: Report, fmt: str, path) -> None:
    Path(path).write_text(render_report(report, fmt))


# ---------------------------------------------------------------------------
# Attack experiment
# ---------------------------------------------------------------------------


@dataclass
class ExperimentConfig:
    """Shared experiment knobs; desk-scale defaults, paper-scale overridable."""

    layout_name: str = "cross"
    games: int = 20
    horizon: int = 800
    epsilon: int = 3
    k: int = 10
    k_random: int = 40
    p_freq: float = 0.05
    n_traj: int = 20
    seed: int = 0
    deterministic_eval: bool = False

    @staticmethod
    def from_json(path) -> "ExperimentConfig":
        doc = json.loads(Path(path).read_text())
        known = {f for f in ExperimentConfig.__dataclass_fields__}
        extra = set(doc) - known
        if extra:
            raise ValueError(f"unknown experiment config keys: {sorted(extra)}")
        return ExperimentConfig(**doc)


ATTACK_METHODS = ("none", "random", "random_f", "grad", "transfer")


def run_attack_experiment(
    policies: Sequence[nn.PolicyParams],
    layout: Layout,
    methods: Sequence[str] = ATTACK_METHODS,
    config: Optional[ExperimentConfig] = None,
    out_dir=None,
) -> tuple[Report, dict]:
    """Evaluate each policy under each attack method.

    Transfer evaluates a policy on the union of gradient-attack states
    generated against the other policies, and therefore needs at least two.
    Returns the report plus the per-(policy, method) artifacts.
    """
    config = config or ExperimentConfig(layout_name=layout.name)
    unknown = set(methods) - set(ATTACK_METHODS)
    if unknown:
        raise ValueError(f"unknown attack methods {sorted(unknown)}")
    if "transfer" in methods and len(policies) < 2:
        raise ValueError("transfer attack needs at least two policies")

    artifacts: dict = {"grad": {}, "random": {}, "random_f": {}, "stats": {}}
    trajectories = {}
    for i, policy in enumerate(policies):
        trajectories[i] = collect_attack_trajectories(
            policy, layout, config.n_traj, config.horizon, seed=config.seed + 1000 + i
        )
        if "grad" in methods or "transfer" in methods:
            artifacts["grad"][i] = generate_attack(
                policy,
                layout,
                epsilon=config.epsilon,
                k=config.k,
                p_freq=config.p_freq,
                seed=config.seed + 1000 + i,
                trajectories=trajectories[i],
            )
            # persistence-premise diagnostic: reported, never asserted
            top = artifacts["grad"][i].states()[0]
            monitor = deviation_monitor(
                policy, layout, top, horizon=min(config.horizon, 200), seed=config.seed
            )
            artifacts["grad"][i].provenance["deviation_monitor"] = monitor
        if "random" in methods:
            artifacts["random"][i] = random_attack(
                layout, config.epsilon, config.k_random, False, None, config.p_freq,
                seed=config.seed + 2000 + i,
            )
        if "random_f" in methods:
            artifacts["random_f"][i] = random_attack(
                layout, config.epsilon, config.k_random, True, trajectories[i], config.p_freq,
                seed=config.seed + 3000 + i,
            )

    rows = []
    for method in methods:
        per_policy_means = []
        pooled_rows = []
        for i, policy in enumerate(policies):
            if method == "none":
                states: list = [None]
            elif method == "transfer":
                states = []
                for j in range(len(policies)):
                    if j != i:
                        states.extend(artifacts["grad"][j].states())
            else:
                states = artifacts[method][i].states()
            stats = evaluate(
                EvalSpec(
                    policy=policy,
                    layout=layout,
                    states=states,
                    games=config.games,
                    horizon=config.horizon,
                    seed=config.seed + 7000 + i,
                    deterministic=config.deterministic_eval,
                )
            )
            artifacts["stats"][(method, i)] = stats
            per_policy_means.append(stats.grand_mean)
            pooled_rows.append(stats)
            rows.append(
                ReportRow(
                    method=f"agent{i}",
                    attack=method,
                    layout=layout.name,
                    mean=stats.grand_mean,
                    stderr=stats.grand_stderr,
                    n=stats.n_episodes,
                )
            )
        rows.append(
            ReportRow(
                method="all_agents",
                attack=method,
                layout=layout.name,
                mean=float(np.mean(per_policy_means)),
                stderr=float(np.mean([s.grand_stderr for s in pooled_rows])),
                n=int(sum(s.n_episodes for s in pooled_rows)),
            )
        )

    report = Report(
        rows=rows,
        metadata={
            "experiment": "attack",
            "layout": layout.name,
            "config": vars(config),
            "n_policies": len(policies),
        },
    )
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for kind in ("grad", "random", "random_f"):
            for i, res in artifacts[kind].items():
                save_attack_result(res, out / f"{kind}_agent{i}.json")
        emit_report(report, "csv", out / "attack_report.csv")
        emit_report(report, "md", out / "attack_report.md")
    return report, artifacts


# ---------------------------------------------------------------------------
# Defense experiment
# ---------------------------------------------------------------------------


@dataclass
class DefenseExperimentConfig:
    """Budgets for the defense comparison grid."""

    layout_name: str = "cross"
    base_steps: int = 1_000_000
    extra_steps: int = 500_000
    finetune_steps: int = 500_000
    div_start_steps: int = 1_000_000
    n_agents: int = 2
    seed: int = 0
    games: int = 20
    horizon: int = 800
    epsilon: int = 3
    k: int = 10
    k_random: int = 40
    p_freq: float = 0.05
    n_traj: int = 20
    include_fcp: bool = False
    fcp_partner_steps: int = 200_000
    kickstart_epochs: int = 100
    methods: tuple = ("extra_sp", "div_start", "bat_sp")
    shaping: dict = field(default_factory=dict)
    ppo: dict = field(default_factory=dict)  # PPOConfig overrides

    @staticmethod
    def from_json(path) -> "DefenseExperimentConfig":
        doc = json.loads(Path(path).read_text())
        known = {f for f in DefenseExperimentConfig.__dataclass_fields__}
        extra = set(doc) - known
        if extra:
            raise ValueError(f"unknown defense config keys: {sorted(extra)}")
        if "methods" in doc:
            doc["methods"] = tuple(doc["methods"])
        return DefenseExperimentConfig(**doc)

    def ppo_config(self) -> rl.PPOConfig:
        cfg = rl.PPOConfig(shaping=dict(self.shaping))
        if self.ppo:
            cfg = replace(cfg, **self.ppo)
        return cfg


DEFENSE_METHODS = ("extra_sp", "extra_fcp", "div_start", "bat_sp", "bat_fcp")
DEFENSE_ATTACKS = ("none", "random", "grad")


def _evaluate_defended(
    policy: nn.PolicyParams,
    layout: Layout,
    config: DefenseExperimentConfig,
    seed: int,
) -> dict:
    """Evaluate one defended agent under the three attack conditions; the
    gradient attack is regenerated against the defended policy itself."""
    out = {}
    out["none"] = evaluate(
        EvalSpec(policy=policy, layout=layout, states=[None], games=config.games,
                 horizon=config.horizon, seed=seed)
    )
    rand = random_attack(layout, config.epsilon, config.k_random, False, None, seed=seed + 1)
    out["random"] = evaluate(
        EvalSpec(policy=policy, layout=layout, states=rand.states(), games=config.games,
                 horizon=config.horizon, seed=seed + 2)
    )
    fresh = generate_attack(
        policy, layout, epsilon=config.epsilon, k=config.k, p_freq=config.p_freq,
        n_traj=config.n_traj, horizon=config.horizon, seed=seed + 3,
    )
    out["grad"] = evaluate(
        EvalSpec(policy=policy, layout=layout, states=fresh.states(), games=config.games,
                 horizon=config.horizon, seed=seed + 4)
    )
    return out


def run_defense_experiment(
    layout: Layout,
    config: DefenseExperimentConfig,
    base_agents: Optional[Sequence[nn.PolicyParams]] = None,
    out_dir=None,
) -> Report:
    """Train and evaluate the defense grid.

    Grid rows: extra training (self-play and co-play variants), diversified
    start, and hardened agents; columns: no attack, random perturbations,
    regenerated white-box attack. Cells for methods not requested are
    emitted as skipped so the grid is always complete.
    """
    ppo_cfg = config.ppo_config()
    bat_cfg = defense.BATConfig(
        epochs=config.kickstart_epochs,
        n_traj=config.n_traj,
        horizon=config.horizon,
        random_epsilon=config.epsilon,
    )
    rows: list[ReportRow] = []
    metadata: dict = {
        "experiment": "defense",
        "layout": layout.name,
        "white_box_reattack": True,
        "config": {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(config).items()},
    }

    agents: dict[str, list[nn.PolicyParams]] = {"sp": [], "fcp": []}
    if base_agents is not None:
        agents["sp"] = list(base_agents)
    else:
        for a in range(config.n_agents):
            result = rl.train_self_play(
                layout, config.base_steps, seed=config.seed + a, cfg=ppo_cfg
            )
            agents["sp"].append(result.params)
    if config.include_fcp and any(m in config.methods for m in ("extra_fcp", "bat_fcp")):
        pool = rl.build_partner_pool(
            layout, config.fcp_partner_steps, seed=config.seed + 100, cfg=ppo_cfg
        )
        for a in range(config.n_agents):
            result = rl.train_fcp(
                layout, pool, config.base_steps, seed=config.seed + 200 + a, cfg=ppo_cfg
            )
            agents["fcp"].append(result.params)

    def add_rows(method: str, evals: Optional[list]) -> None:
        for attack_name in DEFENSE_ATTACKS:
            if evals is None:
                rows.append(
                    ReportRow(method=method, attack=attack_name, layout=layout.name,
                              mean=0.0, stderr=0.0, n=0, skipped=True)
                )
            else:
                means = [e[attack_name].grand_mean for e in evals]
                errs = [e[attack_name].grand_stderr for e in evals]
                ns = [e[attack_name].n_episodes for e in evals]
                rows.append(
                    ReportRow(method=method, attack=attack_name, layout=layout.name,
                              mean=float(np.mean(means)), stderr=float(np.mean(errs)),
                              n=int(sum(ns)))
                )

    def harden(base: nn.PolicyParams, idx: int) -> nn.PolicyParams:
        adv = generate_attack(
            base, layout, epsilon=config.epsilon, k=config.k, p_freq=config.p_freq,
            n_traj=config.n_traj, horizon=config.horizon, seed=config.seed + 500 + idx,
        )
        hardened, _, _ = defense.run_bat(
            base, layout, adv, bat_cfg, seed=config.seed + 600 + idx,
            ppo_cfg=ppo_cfg, finetune_steps=config.finetune_steps,
        )
        return hardened

    for method in DEFENSE_METHODS:
        if method not in config.methods:
            add_rows(method, None)
            continue
        kind = "fcp" if method.endswith("fcp") else "sp"
        bases = agents[kind]
        if not bases:
            add_rows(method, None)
            continue
        evals = []
        for idx, base in enumerate(bases):
            if method.startswith("extra"):
                trained = defense.bat_finetune(
                    base, layout, rl.InitDistribution.standard(),
                    config.extra_steps, seed=config.seed + 300 + idx, cfg=ppo_cfg,
                ).params
            elif method == "div_start":
                adv = generate_attack(
                    base, layout, epsilon=config.epsilon, k=config.k, p_freq=config.p_freq,
                    n_traj=config.n_traj, horizon=config.horizon,
                    seed=config.seed + 400 + idx,
                )
                perts = defense.perturbation_set(layout, adv, bat_cfg, config.seed + 400 + idx)
                trained = rl.train_div_start(
                    layout, defense.bat_init_distribution(perts),
                    config.div_start_steps, seed=config.seed + 450 + idx, cfg=ppo_cfg,
                ).params
            else:  # bat_sp / bat_fcp
                trained = harden(base, idx)
            evals.append(
                _evaluate_defended(trained, layout, config, seed=config.seed + 800 + 10 * idx)
            )
        add_rows(method, evals)

    report = Report(rows=rows, metadata=metadata)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        emit_report(report, "csv", out / "defense_report.csv")
        emit_report(report, "md", out / "defense_report.md")
        (out / "defense_metadata.json").write_text(json.dumps(metadata, indent=2, sort_keys=True))
    return report


def layout_by_name(name: str) -> Layout:
    return bundled_layout(name)
