"""Adversarial initial-state generation.

The attack scores every feasible unit edit of the initial arrangement with a
first-order surrogate of its effect on the policy: the gradient of the
chosen-action probability with respect to the observation, restricted to
environment channels, dotted with the (negated) observation delta the unit
introduces, summed over trajectory steps. By the Taylor reading, a unit's
score estimates the total drop in probability of the policy's original
actions across the trajectory; maximizing it seeks maximal behavioral
deviation. Because unit deltas are additive and time-invariant, the per-step
gradients are computed once and reused across all units, and subset scores
are sums of member scores.

Units whose resulting features already show up in the collected trajectories
above a frequency threshold are filtered out (in-distribution arrangements
make weak attacks), the remaining units are combined into budget-limited
perturbations ranked by estimated effect, and the top-k become adversarial
initial states. Random and filtered-random baselines sample uniformly from
the same feasible sets.
"""

from __future__ import annotations

import itertools
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import featurize, nn
from .gridworld import (
    Action,
    Item,
    Layout,
    Perturbation,
    UnitKind,
    UnitPerturbation,
    enumerate_unit_perturbations,
    perturbation_of,
    reset,
    step,
)

log = logging.getLogger("cookbench.attack")

EXHAUSTIVE_UNIT_LIMIT = 64


@dataclass
class Trajectory:
    """One fixed-horizon episode in the unperturbed environment.

    Stores per-step observations, the deterministic action (argmax of the
    joint distribution), the sampled action actually taken, value, reward,
    and compact object-arrangement features for frequency bookkeeping.
    """

    layout_name: str
    policy_id: str
    seed: int
    obs: np.ndarray  # [T, C, h, w] float32
    astar: np.ndarray  # [T] joint action index, argmax
    sampled: np.ndarray  # [T] joint action index actually played
    values: np.ndarray  # [T]
    rewards: np.ndarray  # [T]
    counter_items: np.ndarray  # [T, n_counters] int8, -1 empty else Item
    pot_onions: np.ndarray  # [T, n_pots] int8


@dataclass(frozen=True)
class UnitScore:
    unit: UnitPerturbation
    score: float
    observed_frequency: float


@dataclass
class AttackResult:
    """Ranked adversarial initial states plus generation provenance."""

    method: str  # "grad" | "random" | "random_f"
    layout_name: str
    epsilon: int
    k: int
    p_freq: Optional[float]
    policy_id: Optional[str]
    perturbations: list  # [(Perturbation, estimated score or None)]
    provenance: dict = field(default_factory=dict)

    def states(self) -> list[Perturbation]:
        return [p for p, _ in self.perturbations]

    def top(self, n: int) -> list[Perturbation]:
        return self.states()[:n]


# ---------------------------------------------------------------------------
# Trajectory collection
# ---------------------------------------------------------------------------


def collect_attack_trajectories(
    policy: nn.PolicyParams,
    layout: Layout,
    n_traj: int = 20,
    horizon: int = 800,
    seed: int = 0,
) -> list[Trajectory]:
    """Sampled-action self-play episodes from the standard initial state,
    with the per-step deterministic action recorded for scoring."""
    rng = np.random.default_rng(seed)
    counter_cells = sorted(layout.counter_cells, key=lambda c: (c[1], c[0]))
    pot_cells = sorted(layout.pot_cells, key=lambda c: (c[1], c[0]))
    c_index = {c: i for i, c in enumerate(counter_cells)}
    p_index = {c: i for i, c in enumerate(pot_cells)}
    policy_id = nn.params_fingerprint(policy)

    states = [reset(layout) for _ in range(n_traj)]
    shape = featurize.obs_shape(layout)
    obs = np.zeros((horizon, n_traj) + shape, dtype=np.float32)
    astar = np.zeros((horizon, n_traj), dtype=np.int64)
    sampled = np.zeros((horizon, n_traj), dtype=np.int64)
    values = np.zeros((horizon, n_traj), dtype=np.float64)
    rewards = np.zeros((horizon, n_traj), dtype=np.float64)
    citems = np.full((horizon, n_traj, len(counter_cells)), -1, dtype=np.int8)
    ponions = np.zeros((horizon, n_traj, len(pot_cells)), dtype=np.int8)

    for t in range(horizon):
        frame = np.stack(
            [featurize.encode(layout, s, dtype=np.float32) for s in states]
        )
        obs[t] = frame
        z, v, _ = nn.joint_logits(policy, frame)
        p = nn.softmax_T(z, 1.0)
        astar[t] = np.argmax(z, axis=1)
        acts = nn.sample_actions(p, rng)
        sampled[t] = acts
        values[t] = v
        for i, s in enumerate(states):
            for cell, item in s.counters.items():
                citems[t, i, c_index[cell]] = int(item)
            for cell, pot in s.pots.items():
                ponions[t, i, p_index[cell]] = pot.onions
            a1, a2 = divmod(int(acts[i]), 6)
            states[i], r, _ = step(layout, s, (Action(a1), Action(a2)))
            rewards[t, i] = r

    return [
        Trajectory(
            layout_name=layout.name,
            policy_id=policy_id,
            seed=seed,
            obs=obs[:, i],
            astar=astar[:, i],
            sampled=sampled[:, i],
            values=values[:, i],
            rewards=rewards[:, i],
            counter_items=citems[:, i],
            pot_onions=ponions[:, i],
        )
        for i in range(n_traj)
    ]


# ---------------------------------------------------------------------------
# Unit scoring
# ---------------------------------------------------------------------------


def _env_channel_mask(layout: Layout) -> np.ndarray:
    mask = np.zeros(featurize.obs_shape(layout), dtype=np.float64)
    mask[featurize.ENV_CHANNELS[0] :] = 1.0
    return mask


def summed_prob_gradient(
    policy: nn.PolicyParams,
    trajectories: Sequence[Trajectory],
    layout: Layout,
    chunk: int = 1024,
) -> np.ndarray:
    """Sum over all trajectory steps of the gradient of the chosen
    deterministic action's probability with respect to the observation,
    restricted to environment channels. One backward pass per chunk."""
    shape = featurize.obs_shape(layout)
    total = np.zeros(int(np.prod(shape)), dtype=np.float64)
    all_obs = np.concatenate([tr.obs.reshape(tr.obs.shape[0], -1) for tr in trajectories])
    all_astar = np.concatenate([tr.astar for tr in trajectories])
    promoted = nn.promote_f64(policy)
    for lo in range(0, all_obs.shape[0], chunk):
        total += nn.grad_action_prob_batch(
            promoted, all_obs[lo : lo + chunk], all_astar[lo : lo + chunk]
        )
    grad = total.reshape(shape)
    return grad * _env_channel_mask(layout)


def unit_frequency(
    trajectories: Sequence[Trajectory], layout: Layout, unit: UnitPerturbation
) -> float:
    """Fraction of trajectory steps where the unit's resulting feature is
    already present: same item kind on the same counter, or the same pot
    fill level."""
    counter_cells = sorted(layout.counter_cells, key=lambda c: (c[1], c[0]))
    pot_cells = sorted(layout.pot_cells, key=lambda c: (c[1], c[0]))
    hits = 0
    total = 0
    for tr in trajectories:
        total += tr.obs.shape[0]
        if unit.kind == UnitKind.ONIONS_IN_POT:
            j = pot_cells.index(unit.cell)
            hits += int(np.sum(tr.pot_onions[:, j] == unit.count))
        else:
            j = counter_cells.index(unit.cell)
            want = Item.ONION if unit.kind == UnitKind.ONION_ON_COUNTER else Item.DISH
            hits += int(np.sum(tr.counter_items[:, j] == int(want)))
    return hits / total if total else 0.0


def score_units(
    policy: nn.PolicyParams,
    trajectories: Sequence[Trajectory],
    layout: Layout,
    units: Optional[Sequence[UnitPerturbation]] = None,
) -> list[UnitScore]:
    """First-order effect estimate per unit: the summed per-step gradient of
    the chosen-action probability dotted with the negated unit delta."""
    if units is None:
        units = enumerate_unit_perturbations(layout)
    if not units:
        return []
    grad = summed_prob_gradient(policy, trajectories, layout)
    out = []
    for unit in units:
        delta = featurize.env_delta(layout, perturbation_of([unit]))
        score = 0.0
        for channel, (x, y), value in delta.entries:
            score += grad[channel, y, x] * (-value)
        out.append(
            UnitScore(
                unit=unit,
                score=float(score),
                observed_frequency=unit_frequency(trajectories, layout, unit),
            )
        )
    return out


def frequency_filter(unit_scores: Sequence[UnitScore], p_freq: float) -> list[UnitScore]:
    """Keep units whose feature shows up in at most a p_freq fraction of
    observed steps."""
    return [s for s in unit_scores if s.observed_frequency <= p_freq]


# ---------------------------------------------------------------------------
# Composition and baselines
# ---------------------------------------------------------------------------


def _subset_key(units: Sequence[UnitPerturbation]) -> tuple:
    return tuple(u.ordinal() for u in sorted(units, key=UnitPerturbation.ordinal))


def _iter_subsets(items: list, epsilon: int, cell_of=lambda u: u.cell):
    """All combinations of 1..epsilon items with pairwise-distinct target cells."""
    for size in range(1, epsilon + 1):
        for combo in itertools.combinations(items, size):
            cells = [cell_of(it) for it in combo]
            if len(set(cells)) == len(cells):
                yield combo


def compose_adversarial_states(
    unit_scores: Sequence[UnitScore],
    epsilon: int = 3,
    k: int = 10,
    layout_name: str = "",
    policy_id: Optional[str] = None,
    p_freq: Optional[float] = None,
    provenance: Optional[dict] = None,
) -> AttackResult:
    """Rank budget-limited unit subsets by summed estimated effect and emit
    the top k as adversarial initial states.

    Subsets are enumerated exhaustively up to EXHAUSTIVE_UNIT_LIMIT units;
    beyond that only combinations of the best-scoring units are searched
    (flagged in provenance). Ties break on unit ordinals.
    """
    if epsilon < 1 or k < 1:
        raise ValueError("epsilon and k must be at least 1")
    scores = list(unit_scores)
    truncated = False
    if len(scores) > EXHAUSTIVE_UNIT_LIMIT:
        scores.sort(key=lambda s: (-s.score, s.unit.ordinal()))
        scores = scores[:EXHAUSTIVE_UNIT_LIMIT]
        truncated = True

    ranked: list[tuple[float, tuple, tuple[UnitScore, ...]]] = []
    for combo in _iter_subsets(scores, epsilon, cell_of=lambda s: s.unit.cell):
        total = sum(s.score for s in combo)
        ranked.append((total, _subset_key([s.unit for s in combo]), combo))
    ranked.sort(key=lambda row: (-row[0], row[1]))

    if len(ranked) < k:
        log.warning("only %d feasible subsets available, requested k=%d", len(ranked), k)
    chosen = ranked[:k]
    perturbations = [
        (perturbation_of([s.unit for s in combo]), float(total)) for total, _, combo in chosen
    ]
    prov = {"n_units": len(unit_scores), "truncated_search": truncated}
    prov.update(provenance or {})
    return AttackResult(
        method="grad",
        layout_name=layout_name,
        epsilon=epsilon,
        k=k,
        p_freq=p_freq,
        policy_id=policy_id,
        perturbations=perturbations,
        provenance=prov,
    )


def generate_attack(
    policy: nn.PolicyParams,
    layout: Layout,
    epsilon: int = 3,
    k: int = 10,
    p_freq: float = 0.05,
    n_traj: int = 20,
    horizon: int = 800,
    seed: int = 0,
    trajectories: Optional[Sequence[Trajectory]] = None,
) -> AttackResult:
    """Full gradient-attack pipeline: trajectories, unit scores, frequency
    filter, budgeted composition."""
    if trajectories is None:
        trajectories = collect_attack_trajectories(policy, layout, n_traj, horizon, seed)
    scores = score_units(policy, trajectories, layout)
    kept = frequency_filter(scores, p_freq)
    if not kept:
        log.warning("frequency filter removed every unit; falling back to unfiltered set")
        kept = list(scores)
    result = compose_adversarial_states(
        kept,
        epsilon=epsilon,
        k=k,
        layout_name=layout.name,
        policy_id=nn.params_fingerprint(policy),
        p_freq=p_freq,
        provenance={"n_traj": len(trajectories), "horizon": horizon, "traj_seed": seed},
    )
    return result


def random_attack(
    layout: Layout,
    epsilon: int = 3,
    k: int = 40,
    filter_observed: bool = False,
    trajectories: Optional[Sequence[Trajectory]] = None,
    p_freq: float = 0.05,
    seed: int = 0,
) -> AttackResult:
    """Uniformly sampled feasible perturbations within budget, optionally
    restricted to units below the observation-frequency threshold."""
    units = enumerate_unit_perturbations(layout)
    if filter_observed:
        if trajectories is None:
            raise ValueError("filtered random attack needs trajectories")
        units = [
            u for u in units if unit_frequency(trajectories, layout, u) <= p_freq
        ]
    if not units:
        raise ValueError("no units available to sample from")
    subsets = [list(c) for c in _iter_subsets(units, epsilon)]
    if not subsets:
        raise ValueError("no feasible subsets within budget")
    rng = np.random.default_rng(seed)
    n = min(k, len(subsets))
    if n < k:
        log.warning("only %d feasible subsets available, requested k=%d", len(subsets), k)
    picks = rng.choice(len(subsets), size=n, replace=False)
    perturbations = [(perturbation_of(subsets[i]), None) for i in picks]
    return AttackResult(
        method="random_f" if filter_observed else "random",
        layout_name=layout.name,
        epsilon=epsilon,
        k=k,
        p_freq=p_freq if filter_observed else None,
        policy_id=None,
        perturbations=perturbations,
        provenance={"n_units": len(units)},
    )


# ---------------------------------------------------------------------------
# Diagnostics
# ---------------------------------------------------------------------------


def deviation_monitor(
    policy: nn.PolicyParams,
    layout: Layout,
    perturbation: Perturbation,
    horizon: int = 800,
    seed: int = 0,
) -> dict:
    """Reported-only check of the persistence premise: roll one standard and
    one perturbed episode with the same seed and compare per-step
    environment-channel deviation against the initial deviation. Logged,
    never asserted."""
    devs = []
    for pert in (None, perturbation):
        rng = np.random.default_rng(seed)
        s = reset(layout, pert)
        frames = []
        for _ in range(horizon):
            obs = featurize.encode(layout, s)
            frames.append(obs[featurize.ENV_CHANNELS[0] :])
            z, _, _ = nn.joint_logits(policy, obs)
            a = int(nn.sample_actions(nn.softmax_T(z, 1.0), rng)[0])
            s, _, _ = step(layout, s, (Action(a // 6), Action(a % 6)))
        devs.append(np.stack(frames))
    per_step = np.abs(devs[1] - devs[0]).sum(axis=(1, 2, 3))
    initial = float(per_step[0])
    frac = float(np.mean(per_step >= initial))
    report = {
        "initial_deviation": initial,
        "mean_deviation": float(per_step.mean()),
        "fraction_steps_at_or_above_initial": frac,
    }
    log.info("deviation monitor: %s", report)
    return report


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def _unit_to_dict(u: UnitPerturbation) -> dict:
    return {"kind": u.kind.name.lower(), "x": u.cell[0], "y": u.cell[1], "onions": u.count}


def _unit_from_dict(d: dict) -> UnitPerturbation:
    return UnitPerturbation(
        kind=UnitKind[d["kind"].upper()], cell=(int(d["x"]), int(d["y"])), count=int(d["onions"])
    )


def save_attack_result(result: AttackResult, path) -> None:
    doc = {
        "method": result.method,
        "layout": result.layout_name,
        "epsilon": result.epsilon,
        "k": result.k,
        "p_freq": result.p_freq,
        "policy_id": result.policy_id,
        "provenance": result.provenance,
        "states": [
            {
                "score": score,
                "units": [_unit_to_dict(u) for u in pert.units],
            }
            for pert, score in result.perturbations
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_attack_result(path) -> AttackResult:
    doc = json.loads(Path(path).read_text())
    perturbations = [
        (perturbation_of([_unit_from_dict(u) for u in entry["units"]]), entry["score"])
        for entry in doc["states"]
    ]
    return AttackResult(
        method=doc["method"],
        layout_name=doc["layout"],
        epsilon=doc["epsilon"],
        k=doc["k"],
        p_freq=doc["p_freq"],
        policy_id=doc["policy_id"],
        perturbations=perturbations,
        provenance=doc.get("provenance", {}),
    )
