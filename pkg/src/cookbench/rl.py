"""PPO training regimes over the cooking gridworld.

Three regimes share one trainer:

  * self-play: one joint-head policy controls both characters and is
    optimized on joint trajectories;
  * diversified start: identical, but each episode's initial state is drawn
    from a distribution over perturbations (self-play is the point-mass
    special case, so the two are bit-identical under the same seed);
  * co-play (FCP): a factored-head learner controls character 1 while a
    frozen partner sampled per episode from a pool controls character 2;
    the learner is optimized on its own action marginal with the joint
    reward.

Everything is single-process and deterministic given the seed: one
generator drives initial-state sampling, action sampling and minibatch
shuffles in a fixed order. Episodes have a fixed horizon; there is no
early termination.

Reward shaping is off by default (sparse delivery reward only). When a
shaping table is configured it adds event bonuses to the training reward
stream; episode scores reported in metrics always count delivery reward
only.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import featurize, nn
from .gridworld import (
    Action,
    FeasibilityError,
    Layout,
    Perturbation,
    WorldState,
    reset,
    step,
)

log = logging.getLogger("cookbench.rl")


@dataclass
class PPOConfig:
    """Hyper-parameters; defaults follow standard PPO practice."""

    gamma: float = 0.99
    lam: float = 0.95
    clip: float = 0.2
    epochs: int = 4
    minibatch: int = 512
    lr: float = 3e-4
    lr_final: Optional[float] = None  # linear anneal target; None = constant
    vf_coef: float = 0.5
    ent_coef: float = 0.01
    max_grad_norm: float = 0.5
    n_envs: int = 8
    rollout_steps: int = 256  # per env, per update
    horizon: int = 800
    hidden: tuple[int, ...] = (64, 64)
    activation: str = "tanh"
    shaping: dict = field(default_factory=dict)  # event kind -> reward bonus
    reward_scale: float = 1.0  # training-reward multiplier; scores stay raw
    save_every: Optional[int] = None  # env steps between checkpoint snapshots

    def arch_for(self, layout: Layout, head: str = "joint") -> nn.ArchSpec:
        return nn.ArchSpec(
            height=layout.height,
            width=layout.width,
            hidden=tuple(self.hidden),
            activation=self.activation,
            head=head,
        )


@dataclass(frozen=True)
class InitDistribution:
    """Weighted support over initial-state perturbations (None = standard)."""

    atoms: tuple[Optional[Perturbation], ...]
    probs: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.atoms) != len(self.probs) or not self.atoms:
            raise ValueError("atoms and probs must align and be nonempty")
        if any(p < 0 for p in self.probs):
            raise ValueError("negative probability")
        total = sum(self.probs)
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"probabilities sum to {total}, not 1")

    @staticmethod
    def standard() -> "InitDistribution":
        return InitDistribution(atoms=(None,), probs=(1.0,))

    @staticmethod
    def uniform(perturbations: Sequence[Optional[Perturbation]]) -> "InitDistribution":
        n = len(perturbations)
        return InitDistribution(atoms=tuple(perturbations), probs=tuple([1.0 / n] * n))

    def validate(self, layout: Layout) -> None:
        for atom in self.atoms:
            if atom is not None:
                reset(layout, atom)

    def sample(self, rng: np.random.Generator) -> Optional[Perturbation]:
        u = rng.random()
        acc = 0.0
        for atom, p in zip(self.atoms, self.probs):
            acc += p
            if u < acc:
                return atom
        return self.atoms[-1]


@dataclass
class RolloutBatch:
    """Per-step tuples laid out time-major over parallel envs, flattened."""

    obs: np.ndarray  # [N, D] float32
    actions: np.ndarray  # [N] joint index (self-play) or char-1 action (co-play)
    logp: np.ndarray  # [N]
    values: np.ndarray  # [N]
    rewards: np.ndarray  # [N] training reward (shaping included)
    dones: np.ndarray  # [N] bool, True at episode-final steps
    n_steps: int
    n_envs: int
    last_values: np.ndarray  # [E] bootstrap values past the chunk end
    episode_scores: list = field(default_factory=list)  # sparse scores, completed episodes
    advantages: Optional[np.ndarray] = None
    returns: Optional[np.ndarray] = None


def gae_and_returns(batch: RolloutBatch, gamma: float, lam: float) -> RolloutBatch:
    """Generalized advantage estimates within episode boundaries; returns are
    advantages plus values. Normalization happens per update batch."""
    T, E = batch.n_steps, batch.n_envs
    rewards = batch.rewards.reshape(T, E)
    values = batch.values.reshape(T, E)
    dones = batch.dones.reshape(T, E)
    adv = np.zeros((T, E), dtype=np.float64)
    carry = np.zeros(E, dtype=np.float64)
    next_value = batch.last_values.astype(np.float64)
    for t in range(T - 1, -1, -1):
        live = 1.0 - dones[t].astype(np.float64)
        delta = rewards[t] + gamma * next_value * live - values[t]
        carry = delta + gamma * lam * live * carry
        adv[t] = carry
        next_value = values[t]
    batch.advantages = adv.reshape(-1)
    batch.returns = batch.advantages + batch.values
    return batch


# ---------------------------------------------------------------------------
# Vectorized rollout collection
# ---------------------------------------------------------------------------


class _VecEnv:
    """Fixed-horizon episodes over n parallel env instances in lockstep."""

    def __init__(
        self,
        layout: Layout,
        init_dist: InitDistribution,
        horizon: int,
        n_envs: int,
        rng: np.random.Generator,
        shaping: Optional[dict] = None,
        reward_scale: float = 1.0,
    ):
        init_dist.validate(layout)
        self.layout = layout
        self.init_dist = init_dist
        self.horizon = horizon
        self.n_envs = n_envs
        self.rng = rng
        self.shaping = dict(shaping or {})
        self.reward_scale = float(reward_scale)
        self.states: list[WorldState] = [self._initial_state() for _ in range(n_envs)]
        self.ep_t = np.zeros(n_envs, dtype=np.int64)
        self.ep_score = np.zeros(n_envs, dtype=np.float64)
        self.on_reset = [lambda i: None]

    def _initial_state(self) -> WorldState:
        for _ in range(100):
            atom = self.init_dist.sample(self.rng)
            try:
                return reset(self.layout, atom)
            except FeasibilityError as exc:
                log.warning("skipping infeasible sampled perturbation: %s", exc)
        raise FeasibilityError("could not sample a feasible initial state in 100 tries")

    def observations(self, dtype=np.float32) -> np.ndarray:
        return np.stack(
            [featurize.encode(self.layout, s, dtype=dtype).reshape(-1) for s in self.states]
        )

    def step(self, joint_actions: np.ndarray) -> tuple[np.ndarray, np.ndarray, list]:
        """Advance all envs one tick with joint action indices.

        Returns (training rewards, done flags, completed sparse scores).
        """
        rewards = np.zeros(self.n_envs, dtype=np.float64)
        dones = np.zeros(self.n_envs, dtype=bool)
        finished_scores = []
        for i in range(self.n_envs):
            a1, a2 = divmod(int(joint_actions[i]), 6)
            nxt, r, events = step(self.layout, self.states[i], (Action(a1), Action(a2)))
            bonus = sum(self.shaping.get(ev[0], 0.0) for ev in events) if self.shaping else 0.0
            rewards[i] = (r + bonus) * self.reward_scale
            self.ep_score[i] += r
            self.ep_t[i] += 1
            self.states[i] = nxt
            if self.ep_t[i] >= self.horizon:
                dones[i] = True
                finished_scores.append(float(self.ep_score[i]))
                self.states[i] = self._initial_state()
                self.ep_t[i] = 0
                self.ep_score[i] = 0.0
                for hook in self.on_reset:
                    hook(i)
        return rewards, dones, finished_scores


class _Collector:
    """Streams RolloutBatches from a persistent vectorized env.

    mode "joint": one joint-head policy controls both characters.
    mode "coplay": the learner's first factored block controls character 1;
    a frozen partner (resampled per episode) controls character 2.
    """

    def __init__(
        self,
        policy: nn.PolicyParams,
        vec: _VecEnv,
        rng: np.random.Generator,
        mode: str = "joint",
        pool: Optional[Sequence[nn.PolicyParams]] = None,
    ):
        self.policy = policy
        self.vec = vec
        self.rng = rng
        self.mode = mode
        self.pool = list(pool) if pool is not None else None
        if mode == "coplay":
            if not self.pool:
                raise ValueError("coplay mode needs a partner pool")
            self.partner_idx = np.array(
                [int(self.rng.integers(len(self.pool))) for _ in range(vec.n_envs)]
            )
            vec.on_reset.append(self._resample_partner)
        self.partner_draws = np.zeros(len(self.pool), dtype=np.int64) if self.pool else None
        if self.partner_draws is not None:
            for i in self.partner_idx:
                self.partner_draws[i] += 1

    def _resample_partner(self, env_i: int) -> None:
        self.partner_idx[env_i] = int(self.rng.integers(len(self.pool)))
        self.partner_draws[self.partner_idx[env_i]] += 1

    def _partner_char2_probs(self, obs: np.ndarray) -> np.ndarray:
        """Character-2 marginals of each env's frozen partner."""
        E = obs.shape[0]
        probs = np.zeros((E, 6), dtype=np.float64)
        for pid in sorted(set(self.partner_idx.tolist())):
            rows = np.nonzero(self.partner_idx == pid)[0]
            z, _, _ = nn.joint_logits(self.pool[pid], obs[rows])
            joint = nn.softmax_T(z, 1.0).reshape(len(rows), 6, 6)
            probs[rows] = joint.sum(axis=1)
        return probs

    def collect(self, steps_per_env: int) -> RolloutBatch:
        T, E = steps_per_env, self.vec.n_envs
        D = self.policy.arch.input_dim
        obs_buf = np.zeros((T, E, D), dtype=np.float32)
        act_buf = np.zeros((T, E), dtype=np.int64)
        logp_buf = np.zeros((T, E), dtype=np.float64)
        val_buf = np.zeros((T, E), dtype=np.float64)
        rew_buf = np.zeros((T, E), dtype=np.float64)
        done_buf = np.zeros((T, E), dtype=bool)
        scores: list[float] = []

        for t in range(T):
            obs = self.vec.observations()
            obs_buf[t] = obs
            if self.mode == "joint":
                z, v, _ = nn.joint_logits(self.policy, obs)
                p = nn.softmax_T(z, 1.0)
                acts = nn.sample_actions(p, self.rng)
                logp_buf[t] = np.log(p[np.arange(E), acts])
                act_buf[t] = acts
                joint = acts
            else:
                z1, v = _marginal_logits(self.policy, obs)
                p1 = nn.softmax_T(z1, 1.0)
                a1 = nn.sample_actions(p1, self.rng)
                p2 = self._partner_char2_probs(obs)
                a2 = nn.sample_actions(p2, self.rng)
                logp_buf[t] = np.log(p1[np.arange(E), a1])
                act_buf[t] = a1
                joint = a1 * 6 + a2
            val_buf[t] = v
            rew_buf[t], done_buf[t], fin = self.vec.step(joint)
            scores.extend(fin)

        final_obs = self.vec.observations()
        if self.mode == "joint":
            _, last_v, _ = nn.joint_logits(self.policy, final_obs)
        else:
            _, last_v = _marginal_logits(self.policy, final_obs)

        return RolloutBatch(
            obs=obs_buf.reshape(T * E, D),
            actions=act_buf.reshape(-1),
            logp=logp_buf.reshape(-1),
            values=val_buf.reshape(-1),
            rewards=rew_buf.reshape(-1),
            dones=done_buf.reshape(-1),
            n_steps=T,
            n_envs=E,
            last_values=np.asarray(last_v, dtype=np.float64),
            episode_scores=scores,
        )


def _marginal_logits(policy: nn.PolicyParams, obs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    actor_out, v, _ = nn.forward_raw(policy, nn.as_batch(obs))
    return actor_out[:, :6], v


def collect_rollouts(
    policy: nn.PolicyParams,
    layout: Layout,
    init_dist: InitDistribution,
    n_steps: int,
    horizon: int,
    seed: int,
    n_envs: int = 8,
    shaping: Optional[dict] = None,
    reward_scale: float = 1.0,
) -> RolloutBatch:
    """Collect at least ``n_steps`` env steps of fixed-horizon episodes with
    sampled actions; deterministic for a given seed."""
    rng = np.random.default_rng(seed)
    vec = _VecEnv(layout, init_dist, horizon, n_envs, rng, shaping, reward_scale)
    collector = _Collector(policy, vec, rng, mode="joint")
    per_env = -(-n_steps // n_envs)
    return collector.collect(per_env)


# ---------------------------------------------------------------------------
# PPO update
# ---------------------------------------------------------------------------


def _policy_minibatch_grads(
    policy: nn.PolicyParams, cfg: PPOConfig, obs, actions, logp_old, adv, ret, marginal: bool
):
    """Clipped-surrogate loss pieces and head gradients for one minibatch."""
    B = obs.shape[0]
    if marginal:
        actor_out, v, cache = nn.forward_raw(policy, obs)
        z = actor_out[:, :6]
        ctx = ("raw", cache)
    else:
        z, v, ctx = nn.joint_logits(policy, obs)
    p = nn.softmax_T(z, 1.0)
    logp = nn.log_softmax(z)[np.arange(B), actions]
    ratio = np.exp(logp - logp_old)
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip) * adv
    pol_loss = -np.minimum(unclipped, clipped).mean()
    ent = nn.entropy(p)
    ent_loss = -cfg.ent_coef * ent.mean()
    val_loss = cfg.vf_coef * 0.5 * np.mean((v - ret) ** 2)
    clip_frac = float(np.mean(unclipped > clipped))

    pass_mask = (unclipped <= clipped).astype(np.float64)
    d_logp = -(adv * ratio * pass_mask) / B
    onehot = np.zeros_like(p)
    onehot[np.arange(B), actions] = 1.0
    dz = d_logp[:, None] * (onehot - p)
    logp_all = np.log(np.maximum(p, 1e-300))
    dz += (-cfg.ent_coef / B) * (-p * (logp_all + ent[:, None]))
    dv = cfg.vf_coef * (v - ret) / B

    if marginal:
        d_actor = np.zeros((B, policy.arch.actor_dim), dtype=policy.arch.np_dtype)
        d_actor[:, :6] = dz
        grads, _ = nn.backward_raw(policy, ctx[1], d_actor, dv)
    else:
        grads, _ = nn.backward_joint(policy, ctx, dz.astype(policy.arch.np_dtype), dv)
    stats = {
        "policy_loss": float(pol_loss),
        "value_loss": float(val_loss),
        "entropy": float(ent.mean()),
        "clip_frac": clip_frac,
    }
    return grads, stats


def ppo_update(
    policy: nn.PolicyParams,
    opt: nn.AdamState,
    batch: RolloutBatch,
    cfg: PPOConfig,
    rng: np.random.Generator,
    marginal: bool = False,
    lr: Optional[float] = None,
) -> dict:
    """Clipped-surrogate PPO epoch loop over shuffled minibatches."""
    if batch.advantages is None:
        gae_and_returns(batch, cfg.gamma, cfg.lam)
    N = batch.obs.shape[0]
    adv = batch.advantages
    adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    agg: dict[str, float] = {}
    n_mb = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(N)
        for lo in range(0, N, cfg.minibatch):
            idx = order[lo : lo + cfg.minibatch]
            grads, stats = _policy_minibatch_grads(
                policy,
                cfg,
                batch.obs[idx],
                batch.actions[idx],
                batch.logp[idx],
                adv[idx],
                batch.returns[idx],
                marginal,
            )
            if not all(np.isfinite(v) for v in stats.values()):
                raise nn.TrainingError(f"non-finite loss in PPO update: {stats}")
            nn.adam_step(policy, grads, opt, cfg.lr if lr is None else lr, cfg.max_grad_norm)
            for k, v in stats.items():
                agg[k] = agg.get(k, 0.0) + v
            n_mb += 1
    return {k: v / max(n_mb, 1) for k, v in agg.items()}


# ---------------------------------------------------------------------------
# Training regimes
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    params: nn.PolicyParams
    history: list  # [(env_steps, PolicyParams snapshot)], monotone in steps
    metrics: list  # dict rows

    def checkpoint_at(self, fraction: float) -> nn.PolicyParams:
        """Snapshot closest to the given fraction of training."""
        target = fraction * self.history[-1][0]
        return min(self.history, key=lambda kv: abs(kv[0] - target))[1]


def _write_metrics(out_dir: Path, metrics: list) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "metrics.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "mean_score", "policy_loss", "value_loss", "entropy"])
        for row in metrics:
            writer.writerow(
                [
                    row["step"],
                    f"{row['mean_score']:.4f}",
                    f"{row['policy_loss']:.6f}",
                    f"{row['value_loss']:.6f}",
                    f"{row['entropy']:.6f}",
                ]
            )


def train_ppo(
    layout: Layout,
    init_dist: InitDistribution,
    total_steps: int,
    seed: int,
    cfg: Optional[PPOConfig] = None,
    start_params: Optional[nn.PolicyParams] = None,
    mode: str = "joint",
    pool: Optional[Sequence[nn.PolicyParams]] = None,
    algo: str = "sp",
    out_dir=None,
) -> TrainResult:
    """Shared trainer behind every regime. Deterministic per seed."""
    cfg = cfg or PPOConfig()
    rng = np.random.default_rng(seed)
    head = "joint" if mode == "joint" else "factored"
    if start_params is not None:
        policy = nn.clone_params(start_params, parent=nn.params_fingerprint(start_params))
    else:
        policy = nn.init_params(cfg.arch_for(layout, head), seed)
    policy.meta.update({"algo": algo, "layout": layout.name, "seed": int(seed)})
    base_steps = int(policy.meta.get("steps", 0))

    vec = _VecEnv(layout, init_dist, cfg.horizon, cfg.n_envs, rng, cfg.shaping, cfg.reward_scale)
    collector = _Collector(policy, vec, rng, mode=mode, pool=pool)
    opt = nn.adam_init(policy)

    history: list = [(base_steps, nn.clone_params(policy))]
    metrics: list = []
    done_steps = 0
    next_save = cfg.save_every if cfg.save_every else None
    recent_scores: list[float] = []
    while done_steps < total_steps:
        batch = collector.collect(cfg.rollout_steps)
        gae_and_returns(batch, cfg.gamma, cfg.lam)
        if cfg.lr_final is not None:
            progress = min(done_steps / max(total_steps, 1), 1.0)
            lr_now = cfg.lr + (cfg.lr_final - cfg.lr) * progress
        else:
            lr_now = None
        stats = ppo_update(policy, opt, batch, cfg, rng, marginal=(mode == "coplay"), lr=lr_now)
        done_steps += batch.n_steps * batch.n_envs
        policy.meta["steps"] = base_steps + done_steps
        recent_scores.extend(batch.episode_scores)
        recent_scores = recent_scores[-50:]
        row = {
            "step": base_steps + done_steps,
            "mean_score": float(np.mean(recent_scores)) if recent_scores else 0.0,
            **stats,
        }
        metrics.append(row)
        if next_save is not None and done_steps >= next_save:
            history.append((base_steps + done_steps, nn.clone_params(policy)))
            next_save += cfg.save_every
    history.append((base_steps + done_steps, nn.clone_params(policy)))

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_metrics(out, metrics)
        for steps_at, snap in history:
            nn.save_checkpoint(snap, out / f"ckpt_{steps_at:010d}.nn")
        nn.save_checkpoint(policy, out / "final.nn")
    return TrainResult(params=policy, history=history, metrics=metrics)


def train_self_play(
    layout: Layout,
    total_steps: int,
    seed: int,
    cfg: Optional[PPOConfig] = None,
    out_dir=None,
) -> TrainResult:
    """Joint policy trained on its own self-play trajectories."""
    return train_ppo(
        layout, InitDistribution.standard(), total_steps, seed, cfg, algo="sp", out_dir=out_dir
    )


def train_div_start(
    layout: Layout,
    init_dist: InitDistribution,
    total_steps: int,
    seed: int,
    cfg: Optional[PPOConfig] = None,
    out_dir=None,
) -> TrainResult:
    """Self-play PPO with per-episode initial states drawn from init_dist."""
    return train_ppo(layout, init_dist, total_steps, seed, cfg, algo="div_start", out_dir=out_dir)


@dataclass
class PartnerPool:
    """Frozen co-play partners: 4 seeds x 3 ability levels."""

    entries: tuple[nn.PolicyParams, ...]

    def __post_init__(self) -> None:
        if len(self.entries) != 12:
            raise ValueError(f"partner pool needs 12 entries, got {len(self.entries)}")

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for i, p in enumerate(self.entries):
            nn.save_checkpoint(p, out / f"partner_{i:02d}.nn")

    @staticmethod
    def load(in_dir) -> "PartnerPool":
        paths = sorted(Path(in_dir).glob("partner_*.nn"))
        return PartnerPool(entries=tuple(nn.load_checkpoint(p) for p in paths))


def build_partner_pool(
    layout: Layout,
    total_steps: int,
    seed: int,
    cfg: Optional[PPOConfig] = None,
    n_partners: int = 4,
    out_dir=None,
) -> PartnerPool:
    """Train self-play partners on distinct seeds and keep early / mid / final
    checkpoints of each."""
    cfg = cfg or PPOConfig()
    cfg = replace(cfg, save_every=max(total_steps // 2, 1))
    entries = []
    for i in range(n_partners):
        result = train_self_play(layout, total_steps, seed + i, cfg)
        for level, fraction in (("early", 0.0), ("mid", 0.5), ("final", 1.0)):
            snap = nn.clone_params(result.checkpoint_at(fraction), level=level, pool_seed=seed + i)
            entries.append(snap)
    pool = PartnerPool(entries=tuple(entries))
    if out_dir is not None:
        pool.save(out_dir)
    return pool


def train_fcp(
    layout: Layout,
    pool: PartnerPool,
    total_steps: int,
    seed: int,
    cfg: Optional[PPOConfig] = None,
    out_dir=None,
) -> TrainResult:
    """Fictitious co-play: the learner plays character 1 against a frozen
    pool partner resampled uniformly each episode, optimizing its own
    character-1 marginal with the joint reward. The resulting factored
    policy evaluates in self-play through its induced joint distribution."""
    return train_ppo(
        layout,
        InitDistribution.standard(),
        total_steps,
        seed,
        cfg,
        mode="coplay",
        pool=pool.entries,
        algo="fcp",
        out_dir=out_dir,
    )
