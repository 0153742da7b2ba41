"""Boosted adversarial training (BAT).

Hardening runs in two stages. The kick-start stage distills the trained
policy onto itself under perturbed observations: for every step of the
policy's own trajectories it matches (a) the teacher's action distribution
and value on the original observation, and (b) a temperature-softened
teacher distribution and a slack-hinged value target on each configured
perturbed observation. Perturbed observations shift environment channels by
the perturbation's delta and leave agent channels untouched. The student
starts from the teacher's weights and the epoch with the best validation
loss is kept.

The fine-tune stage then continues PPO self-play from the kick-started
policy with episodes started from a mixture of the standard initial state
and the same perturbed states. A point-mass mixture on the standard state
degenerates to plain extra self-play training (the extra-training
baseline).
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import featurize, nn, rl
from .attack import AttackResult, Trajectory, collect_attack_trajectories, random_attack
from .gridworld import Layout, Perturbation

log = logging.getLogger("cookbench.defense")


@dataclass
class BATConfig:
    """Hardening hyper-parameters (kick-start and fine-tune stages)."""

    temperature: float = 1.5
    alpha: float = 0.05  # value-slack fraction in the perturbed hinge
    beta: float = 1.0  # weight of the perturbed-sample loss
    lr: float = 1e-3
    epochs: int = 100
    batch_size: int = 256
    train_fraction: float = 0.7
    n_traj: int = 20
    horizon: int = 800
    n_top_adversarial: int = 5
    n_random: int = 5
    random_epsilon: int = 3
    finetune_steps: int = 8_000_000  # desk-scale runs override this

    def __post_init__(self) -> None:
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be nonnegative")
        if not 0 < self.train_fraction < 1:
            raise ValueError("train fraction must be in (0, 1)")

    def to_text(self) -> str:
        lines = [f"{k} = {v}" for k, v in vars(self).items()]
        return "\n".join(lines) + "\n"

    @staticmethod
    def from_text(text: str) -> "BATConfig":
        kwargs: dict = {}
        casts = {f.name: f.type for f in BATConfig.__dataclass_fields__.values()}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key not in BATConfig.__dataclass_fields__:
                raise ValueError(f"unknown BAT config key {key!r}")
            kind = casts[key]
            kwargs[key] = int(value) if "int" in str(kind) else float(value)
        return BATConfig(**kwargs)


@dataclass
class DistillDataset:
    """Frozen-teacher targets for every trajectory step, plus the perturbed
    observation deltas shared across the dataset."""

    obs: np.ndarray  # [N, D] float32 original observations
    teacher_probs: np.ndarray  # [N, 36] float64, T = 1
    teacher_tempered: np.ndarray  # [N, 36] float64, configured temperature
    teacher_values: np.ndarray  # [N] float64
    deltas: np.ndarray  # [P, D] float64 dense perturbation deltas
    perturbations: tuple[Perturbation, ...]
    traj_index: np.ndarray  # [N] trajectory each sample came from
    train_idx: np.ndarray
    val_idx: np.ndarray


@dataclass
class KickstartReport:
    """Per-epoch loss table; epoch 0 is the untouched teacher clone."""

    rows: list  # dicts: epoch, train_loss, train_lo, train_lp, val_loss, val_lo, val_lp
    selected_epoch: int
    selected_val_loss: float

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(
                ["epoch", "train_loss", "train_lo", "train_lp", "val_loss", "val_lo", "val_lp"]
            )
            for r in self.rows:
                writer.writerow(
                    [r["epoch"]]
                    + [f"{r[k]:.8f}" if r[k] is not None else "" for k in
                       ("train_loss", "train_lo", "train_lp", "val_loss", "val_lo", "val_lp")]
                )


def perturbation_set(
    layout: Layout,
    adversarial: AttackResult,
    config: BATConfig,
    seed: int,
) -> list[Perturbation]:
    """The hardening set: top adversarial states plus random feasible ones."""
    chosen = adversarial.top(config.n_top_adversarial)
    if config.n_random > 0:
        rand = random_attack(
            layout,
            epsilon=config.random_epsilon,
            k=config.n_random,
            filter_observed=False,
            seed=seed,
        )
        chosen = chosen + rand.states()
    return chosen


def bat_init_distribution(perturbations: Sequence[Perturbation]) -> rl.InitDistribution:
    """Uniform mixture over the standard state and the hardening set."""
    return rl.InitDistribution.uniform([None] + list(perturbations))


def build_distill_dataset(
    policy: nn.PolicyParams,
    layout: Layout,
    perturbations: Sequence[Perturbation],
    config: BATConfig,
    seed: int,
    trajectories: Optional[Sequence[Trajectory]] = None,
) -> DistillDataset:
    """One sample per trajectory step with teacher targets computed once by
    the frozen original policy; the split assigns whole trajectories."""
    if trajectories is None:
        trajectories = collect_attack_trajectories(
            policy, layout, config.n_traj, config.horizon, seed
        )
    per_traj = [tr.obs.reshape(tr.obs.shape[0], -1) for tr in trajectories]
    obs = np.concatenate(per_traj).astype(np.float32)
    traj_index = np.concatenate(
        [np.full(a.shape[0], i, dtype=np.int64) for i, a in enumerate(per_traj)]
    )

    probs = np.zeros((obs.shape[0], nn.N_JOINT_ACTIONS), dtype=np.float64)
    tempered = np.zeros_like(probs)
    values = np.zeros(obs.shape[0], dtype=np.float64)
    for lo in range(0, obs.shape[0], 2048):
        z, v, _ = nn.joint_logits(policy, obs[lo : lo + 2048])
        probs[lo : lo + 2048] = nn.softmax_T(z, 1.0)
        tempered[lo : lo + 2048] = nn.softmax_T(z, config.temperature)
        values[lo : lo + 2048] = v

    if perturbations:
        deltas = np.stack(
            [featurize.env_delta(layout, p).to_dense(layout).reshape(-1) for p in perturbations]
        )
    else:
        deltas = np.zeros((0, obs.shape[1]))

    n_traj = len(trajectories)
    rng = np.random.default_rng(seed)
    order = rng.permutation(n_traj)
    n_train = int(round(config.train_fraction * n_traj))
    n_train = min(max(n_train, 1), n_traj - 1) if n_traj > 1 else n_traj
    train_traj = set(order[:n_train].tolist())
    train_mask = np.isin(traj_index, sorted(train_traj))
    return DistillDataset(
        obs=obs,
        teacher_probs=probs,
        teacher_tempered=tempered,
        teacher_values=values,
        deltas=deltas,
        perturbations=tuple(perturbations),
        traj_index=traj_index,
        train_idx=np.nonzero(train_mask)[0],
        val_idx=np.nonzero(~train_mask)[0],
    )


# ---------------------------------------------------------------------------
# Kick-start loss
# ---------------------------------------------------------------------------


def _kl_rows(q: np.ndarray, p: np.ndarray, floor: float = 1e-12) -> np.ndarray:
    """Row-wise KL(q || p); same clamping convention as nn.kl_divergence."""
    pc = np.maximum(p, floor)
    terms = np.where(q > 0.0, q * (np.log(np.maximum(q, floor)) - np.log(pc)), 0.0)
    return terms.sum(axis=1)


def kickstart_loss(
    student: nn.PolicyParams,
    dataset: DistillDataset,
    indices: np.ndarray,
    config: BATConfig,
    want_grads: bool = False,
):
    """Combined distillation loss over the indexed samples.

    Original-observation term: KL(teacher || student) plus the absolute
    value gap. Perturbed term (averaged over the configured perturbations):
    KL(tempered teacher || student on the shifted observation) plus a hinge
    on the value gap with slack ``alpha * |teacher value|``. Total is
    ``original + beta * perturbed``. Returns ``(loss, l_o, l_p[, grads])``.
    """
    B = len(indices)
    X = dataset.obs[indices].astype(np.float64)
    q = dataset.teacher_probs[indices]
    q_t = dataset.teacher_tempered[indices]
    v_t = dataset.teacher_values[indices]
    P = dataset.deltas.shape[0]

    grads_total: Optional[dict] = None

    def accumulate(g: dict) -> None:
        nonlocal grads_total
        if grads_total is None:
            grads_total = g
        else:
            for k in grads_total:
                grads_total[k] += g[k]

    def branch(Xb: np.ndarray, q_target: np.ndarray, hinge: bool, weight: float):
        z, v, ctx = nn.joint_logits(student, Xb)
        p = nn.softmax_T(z, 1.0)
        kl = _kl_rows(q_target, p)
        gap = v_t - v
        if hinge:
            slack = config.alpha * np.abs(v_t)
            vloss = np.maximum(np.abs(gap) - slack, 0.0)
            active = (np.abs(gap) > slack).astype(np.float64)
        else:
            vloss = np.abs(gap)
            active = np.ones(B)
        total = float(np.mean(kl + vloss))
        if want_grads and weight != 0.0:
            dz = (weight / B) * (p - q_target)
            dv = (weight / B) * (-np.sign(gap)) * active
            g, _ = nn.backward_joint(student, ctx, dz.astype(student.arch.np_dtype), dv)
            accumulate(g)
        return total

    l_o = branch(X, q, hinge=False, weight=1.0)
    l_p = 0.0
    if P > 0 and config.beta >= 0.0:
        for j in range(P):
            l_p += branch(X + dataset.deltas[j], q_t, hinge=True, weight=config.beta / P)
        l_p /= P
    loss = l_o + config.beta * l_p
    if want_grads:
        if grads_total is None:
            grads_total = {k: np.zeros_like(w) for k, w in student.weights.items()}
        return loss, l_o, l_p, grads_total
    return loss, l_o, l_p


def _dataset_loss(
    student: nn.PolicyParams, dataset: DistillDataset, indices: np.ndarray, config: BATConfig
) -> tuple[float, float, float]:
    """Mean loss over an index set, evaluated in batches."""
    total = np.zeros(3)
    n = 0
    for lo in range(0, len(indices), 2048):
        idx = indices[lo : lo + 2048]
        loss, l_o, l_p = kickstart_loss(student, dataset, idx, config)
        total += np.array([loss, l_o, l_p]) * len(idx)
        n += len(idx)
    return tuple((total / max(n, 1)).tolist())


def train_kickstart(
    policy: nn.PolicyParams,
    dataset: DistillDataset,
    config: BATConfig,
    seed: int = 0,
) -> tuple[nn.PolicyParams, KickstartReport]:
    """Distill a start policy from the frozen teacher.

    The student is initialized from the teacher, trained with Adam on the
    train split, and the epoch checkpoint with the lowest validation loss is
    returned (epoch 0 being the teacher clone itself).
    """
    student = nn.clone_params(
        policy, algo="bat_kickstart", parent=nn.params_fingerprint(policy)
    )
    opt = nn.adam_init(student)
    rng = np.random.default_rng(seed)

    val0 = _dataset_loss(student, dataset, dataset.val_idx, config)
    train0 = _dataset_loss(student, dataset, dataset.train_idx, config)
    rows = [
        {
            "epoch": 0,
            "train_loss": train0[0],
            "train_lo": train0[1],
            "train_lp": train0[2],
            "val_loss": val0[0],
            "val_lo": val0[1],
            "val_lp": val0[2],
        }
    ]
    best = (val0[0], 0, nn.clone_params(student))

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(dataset.train_idx))
        train_sum = np.zeros(3)
        n_seen = 0
        for lo in range(0, len(order), config.batch_size):
            idx = dataset.train_idx[order[lo : lo + config.batch_size]]
            loss, l_o, l_p, grads = kickstart_loss(student, dataset, idx, config, want_grads=True)
            if not np.isfinite(loss):
                raise nn.TrainingError(f"non-finite kick-start loss at epoch {epoch}")
            nn.adam_step(student, grads, opt, config.lr)
            train_sum += np.array([loss, l_o, l_p]) * len(idx)
            n_seen += len(idx)
        train_avg = train_sum / max(n_seen, 1)
        val = _dataset_loss(student, dataset, dataset.val_idx, config)
        rows.append(
            {
                "epoch": epoch,
                "train_loss": train_avg[0],
                "train_lo": train_avg[1],
                "train_lp": train_avg[2],
                "val_loss": val[0],
                "val_lo": val[1],
                "val_lp": val[2],
            }
        )
        if val[0] < best[0]:
            best = (val[0], epoch, nn.clone_params(student))
        log.debug("kickstart epoch %d train %.6f val %.6f", epoch, train_avg[0], val[0])

    chosen = best[2]
    chosen.meta["kickstart_epoch"] = best[1]
    report = KickstartReport(rows=rows, selected_epoch=best[1], selected_val_loss=best[0])
    return chosen, report


def bat_finetune(
    start_policy: nn.PolicyParams,
    layout: Layout,
    init_dist: rl.InitDistribution,
    total_steps: int,
    seed: int,
    cfg: Optional[rl.PPOConfig] = None,
) -> rl.TrainResult:
    """PPO self-play fine-tuning from the kick-started policy with episodes
    begun from the mixed initial-state distribution. A point-mass standard
    distribution makes this the extra-training baseline."""
    return rl.train_ppo(
        layout,
        init_dist,
        total_steps,
        seed,
        cfg,
        start_params=start_policy,
        algo="bat_finetune",
    )


def run_bat(
    policy: nn.PolicyParams,
    layout: Layout,
    adversarial: AttackResult,
    config: BATConfig,
    seed: int,
    ppo_cfg: Optional[rl.PPOConfig] = None,
    finetune_steps: Optional[int] = None,
    out_dir=None,
) -> tuple[nn.PolicyParams, KickstartReport, rl.InitDistribution]:
    """Full hardening pipeline: perturbation set, distill dataset,
    kick-start, fine-tune. Returns the hardened policy."""
    perts = perturbation_set(layout, adversarial, config, seed)
    dataset = build_distill_dataset(policy, layout, perts, config, seed)
    student, report = train_kickstart(policy, dataset, config, seed)
    dist = bat_init_distribution(perts)
    steps = finetune_steps if finetune_steps is not None else config.finetune_steps
    result = bat_finetune(student, layout, dist, steps, seed, ppo_cfg)
    hardened = result.params
    hardened.meta["algo"] = "bat"
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        nn.save_checkpoint(student, out / "kickstart.nn")
        nn.save_checkpoint(hardened, out / "bat_final.nn")
        report.to_csv(out / "kickstart_report.csv")
    return hardened, report, dist
