"""End-to-end acceptance suite.

Each test prints one PASS/FAIL line with its measured numbers (run with
``pytest -s`` to see them live; they also land in
``.acceptance_cache/acceptance_report.txt``).

The desk-scale experiments (criteria 6-8 and the co-play check) need trained
agents. The first run builds everything into ``.acceptance_cache/`` at the
repo root (roughly half an hour on one core); subsequent runs load the cache
and only re-verify. Delete the directory to rebuild from scratch. Every
artifact is a pure function of the frozen config below, so a rebuild
reproduces the cache bit-for-bit.
"""

import dataclasses
import hashlib
import itertools
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from cookbench import attack, defense, featurize as fz, gridworld as gw, harness, nn, rl
from cookbench.gridworld import perturbation_of

CACHE = Path(__file__).resolve().parent.parent / ".acceptance_cache"
REPORT_PATH = CACHE / "acceptance_report.txt"

# Frozen desk-scale configuration. Calibrated once; every number below is a
# deliberate constant, not a tunable.
DESK = {
    "layout": "cross",
    "seeds": (0, 1),
    "train_steps": 3_000_000,
    "epsilon": 3,
    "k": 10,
    "k_random": 40,
    "p_freq": 0.05,
    "n_traj": 20,
    "horizon": 800,
    "games": 20,
    "kickstart_epochs": 60,
    "finetune_steps": 1_500_000,
    "fcp_layout": "double_counters",
    "fcp_partner_steps": 1_000_000,
    "fcp_steps": 2_000_000,
}

SHAPING = {"pot_load": 3.0, "soup_pickup": 5.0}


def desk_ppo_config() -> rl.PPOConfig:
    return rl.PPOConfig(
        n_envs=8,
        rollout_steps=256,
        horizon=DESK["horizon"],
        shaping=dict(SHAPING),
        lr=1e-3,
        lr_final=1e-4,
        ent_coef=0.01,
        reward_scale=0.05,
    )


def record(name: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
    print(line)
    CACHE.mkdir(exist_ok=True)
    with open(REPORT_PATH, "a") as f:
        f.write(line + "\n")
    assert ok, line


# ---------------------------------------------------------------------------
# Criterion 1: gradient correctness against central finite differences
# ---------------------------------------------------------------------------


def test_criterion_1_gradient_correctness():
    t0 = time.time()
    rng = np.random.default_rng(2024)
    worst = 0.0
    n_pairs = 0
    heads = [("joint", "joint"), ("factored", "pair"), ("factored", "mirror")]
    while n_pairs < 100:
        h, w = int(rng.integers(3, 6)), int(rng.integers(3, 6))
        head, control = heads[n_pairs % 3]
        arch = nn.ArchSpec(
            height=h,
            width=w,
            hidden=tuple(int(x) for x in rng.integers(4, 12, size=int(rng.integers(1, 3)))),
            activation=("tanh", "relu")[n_pairs % 2],
            head=head,
            shared_trunk=bool(n_pairs % 4 != 0),
            dtype="f64",
        )
        params = nn.init_params(arch, seed=int(rng.integers(1 << 30)), meta={"control": control})
        params.weights["actor.W"] *= 30.0
        obs = rng.random((26, h, w))
        action = int(rng.integers(36))
        eps = 1e-5

        # input-side gradient of the chosen-action probability
        exact = nn.grad_action_prob_wrt_input(params, obs, action)
        for _ in range(4):
            c, y, x = int(rng.integers(26)), int(rng.integers(h)), int(rng.integers(w))
            hi = obs.copy()
            hi[c, y, x] += eps
            lo = obs.copy()
            lo[c, y, x] -= eps
            p_hi = nn.softmax_T(nn.forward(params, hi)[0], 1.0)[action]
            p_lo = nn.softmax_T(nn.forward(params, lo)[0], 1.0)[action]
            fd = (p_hi - p_lo) / (2 * eps)
            g = exact[c, y, x]
            worst = max(worst, abs(fd - g) / max(abs(fd), abs(g), 1e-8))

        # parameter-side gradients of logp(action) + 0.5 * value^2
        X = obs.reshape(1, -1)

        def loss_of():
            z, v, _ = nn.joint_logits(params, X)
            return float(nn.log_softmax(z)[0, action] + 0.5 * v[0] ** 2)

        z, v, ctx = nn.joint_logits(params, X)
        probs = nn.softmax_T(z, 1.0)
        dz = -probs.copy()
        dz[0, action] += 1.0
        grads, _ = nn.backward_joint(params, ctx, dz, v.copy())
        for _ in range(4):
            name = list(params.weights)[int(rng.integers(len(params.weights)))]
            flat = params.weights[name].reshape(-1)
            i = int(rng.integers(flat.size))
            old = flat[i]
            flat[i] = old + eps
            hi = loss_of()
            flat[i] = old - eps
            lo = loss_of()
            flat[i] = old
            fd = (hi - lo) / (2 * eps)
            g = grads[name].reshape(-1)[i]
            worst = max(worst, abs(fd - g) / max(abs(fd), abs(g), 1e-8))
        n_pairs += 1
    took = time.time() - t0
    record(
        "criterion 1 (gradient correctness)",
        worst < 1e-4 and took < 60,
        f"max rel err {worst:.2e} over {n_pairs} nets, {took:.1f}s",
    )


# ---------------------------------------------------------------------------
# Criterion 2: lossless encoding round trip
# ---------------------------------------------------------------------------


def test_criterion_2_losslessness():
    t0 = time.time()
    total = 0
    for name in gw.bundled_layout_names():
        layout = gw.bundled_layout(name)
        rng = np.random.default_rng(hash(name) % (1 << 31))
        state = gw.reset(layout)
        walked = 0
        for i in range(10_000):
            if walked >= 120:  # restart the walk now and then
                state = gw.reset(layout)
                walked = 0
            acts = (gw.Action(int(rng.integers(6))), gw.Action(int(rng.integers(6))))
            state, _, _ = gw.step(layout, state, acts)
            walked += 1
            probe = dataclasses.replace(state, t=0)
            assert fz.decode(fz.encode(layout, probe), layout) == probe
            total += 1
    took = time.time() - t0
    record(
        "criterion 2 (lossless round trip)",
        took < 60,
        f"{total} states across {len(gw.bundled_layout_names())} layouts exact, {took:.1f}s",
    )


# ---------------------------------------------------------------------------
# Criterion 3: distance equals BFS over unit compositions
# ---------------------------------------------------------------------------


def test_criterion_3_distance_oracle():
    t0 = time.time()
    layouts = sorted(
        (gw.bundled_layout(n) for n in gw.bundled_layout_names()),
        key=lambda L: len(gw.enumerate_unit_perturbations(L)),
    )[:2]
    checked = 0
    for layout in layouts:
        units = gw.enumerate_unit_perturbations(layout)
        standard = gw.reset(layout)
        frontier = [standard]
        depth_of = {standard.key(): 0}
        for depth in range(1, 4):
            nxt = []
            for state in frontier:
                for unit in units:
                    try:
                        reached = gw.apply_unit(layout, state, unit)
                    except gw.FeasibilityError:
                        continue
                    if reached.key() not in depth_of:
                        depth_of[reached.key()] = depth
                        nxt.append(reached)
            frontier = nxt
            for state in frontier:
                assert gw.perturbation_distance(layout, standard, state) == depth
                checked += 1
    took = time.time() - t0
    record(
        "criterion 3 (distance oracle)",
        took < 300,
        f"{checked} perturbed states on {[l.name for l in layouts]} exact, {took:.1f}s",
    )


# ---------------------------------------------------------------------------
# Heavy artifacts: trained agents, attacks, hardened agents (cached)
# ---------------------------------------------------------------------------


def _eval_cached(evals: dict, policy, layout, states, games, seed, tag) -> float:
    """Grand mean of an evaluation, memoized in the cache file."""
    state_repr = json.dumps(
        [
            None if p is None else [[int(u.kind), u.cell[0], u.cell[1], u.count] for u in p.units]
            for p in states
        ]
    )
    key_src = f"{nn.params_fingerprint(policy)}|{layout.name}|{state_repr}|{games}|{seed}"
    key = hashlib.sha256(key_src.encode()).hexdigest()[:24]
    if key in evals:
        return evals[key]["grand_mean"]
    stats = harness.evaluate(
        harness.EvalSpec(
            policy=policy,
            layout=layout,
            states=states,
            games=games,
            horizon=DESK["horizon"],
            seed=seed,
        )
    )
    evals[key] = {
        "tag": tag,
        "grand_mean": stats.grand_mean,
        "grand_stderr": stats.grand_stderr,
        "n": stats.n_episodes,
    }
    return stats.grand_mean


@pytest.fixture(scope="session")
def desk():
    """Build or load every heavy artifact of the desk-scale experiments."""
    CACHE.mkdir(exist_ok=True)
    layout = gw.bundled_layout(DESK["layout"])
    cfg = desk_ppo_config()
    evals_path = CACHE / "evals.json"
    evals = json.loads(evals_path.read_text()) if evals_path.exists() else {}

    def build(path, builder):
        path = CACHE / path
        if path.exists():
            return nn.load_checkpoint(path)
        params = builder()
        nn.save_checkpoint(params, path)
        return params

    agents = []
    for i, seed in enumerate(DESK["seeds"]):
        agents.append(
            build(
                f"sp{i}.nn",
                lambda seed=seed: rl.train_ppo(
                    layout, rl.InitDistribution.standard(), DESK["train_steps"], seed, cfg
                ).params,
            )
        )

    def build_attack(path, builder):
        path = CACHE / path
        if path.exists():
            return attack.load_attack_result(path)
        result = builder()
        attack.save_attack_result(result, path)
        return result

    grads, randoms_f = [], []
    for i, agent in enumerate(agents):
        grads.append(
            build_attack(
                f"grad{i}.json",
                lambda i=i, agent=agent: attack.generate_attack(
                    agent,
                    layout,
                    epsilon=DESK["epsilon"],
                    k=DESK["k"],
                    p_freq=DESK["p_freq"],
                    n_traj=DESK["n_traj"],
                    horizon=DESK["horizon"],
                    seed=1000 + i,
                ),
            )
        )
        randoms_f.append(
            build_attack(
                f"random_f{i}.json",
                lambda i=i, agent=agent: attack.random_attack(
                    layout,
                    DESK["epsilon"],
                    DESK["k_random"],
                    True,
                    attack.collect_attack_trajectories(
                        agent, layout, DESK["n_traj"], DESK["horizon"], seed=1000 + i
                    ),
                    DESK["p_freq"],
                    seed=3000 + i,
                ),
            )
        )
    random_states = build_attack(
        "random.json",
        lambda: attack.random_attack(
            layout, DESK["epsilon"], DESK["k_random"], False, None, seed=2000
        ),
    )

    bat_cfg = defense.BATConfig(
        epochs=DESK["kickstart_epochs"],
        n_traj=DESK["n_traj"],
        horizon=DESK["horizon"],
        random_epsilon=DESK["epsilon"],
    )
    kicks, bats, bat_grads = [], [], []
    for i, agent in enumerate(agents):
        perts = defense.perturbation_set(layout, grads[i], bat_cfg, seed=4000 + i)

        def kickstart(i=i, agent=agent, perts=perts):
            dataset = defense.build_distill_dataset(agent, layout, perts, bat_cfg, seed=4000 + i)
            student, report = defense.train_kickstart(agent, dataset, bat_cfg, seed=4000 + i)
            report.to_csv(CACHE / f"kickstart_report{i}.csv")
            return student

        kicks.append(build(f"kick{i}.nn", kickstart))
        bats.append(
            build(
                f"bat{i}.nn",
                lambda i=i, perts=perts: defense.bat_finetune(
                    kicks[i],
                    layout,
                    defense.bat_init_distribution(perts),
                    DESK["finetune_steps"],
                    seed=4000 + i,
                    cfg=cfg,
                ).params,
            )
        )
        bat_grads.append(
            build_attack(
                f"grad_bat{i}.json",
                lambda i=i: attack.generate_attack(
                    bats[i],
                    layout,
                    epsilon=DESK["epsilon"],
                    k=DESK["k"],
                    p_freq=DESK["p_freq"],
                    n_traj=DESK["n_traj"],
                    horizon=DESK["horizon"],
                    seed=5000 + i,
                ),
            )
        )

    extra0 = build(
        "extra0.nn",
        lambda: defense.bat_finetune(
            agents[0],
            layout,
            rl.InitDistribution.standard(),
            DESK["finetune_steps"],
            seed=4000,
            cfg=cfg,
        ).params,
    )
    extra0_grad = build_attack(
        "grad_extra0.json",
        lambda: attack.generate_attack(
            extra0,
            layout,
            epsilon=DESK["epsilon"],
            k=DESK["k"],
            p_freq=DESK["p_freq"],
            n_traj=DESK["n_traj"],
            horizon=DESK["horizon"],
            seed=6000,
        ),
    )

    # co-play needs a layout whose stations have detours: on cross the pot's
    # only access cell is character 1's spawn, so an untrained learner blocks
    # the partner outright and the pair never scores
    fcp_layout = gw.bundled_layout(DESK["fcp_layout"])
    pool_dir = CACHE / "fcp_pool"
    if pool_dir.exists():
        pool = rl.PartnerPool.load(pool_dir)
    else:
        pool = rl.build_partner_pool(
            fcp_layout, DESK["fcp_partner_steps"], seed=7000, cfg=cfg, out_dir=pool_dir
        )
    fcp = build(
        "fcp0.nn",
        lambda: rl.train_fcp(fcp_layout, pool, DESK["fcp_steps"], seed=7100, cfg=cfg).params,
    )

    bundle = {
        "layout": layout,
        "fcp_layout": fcp_layout,
        "cfg": cfg,
        "agents": agents,
        "grads": grads,
        "randoms_f": randoms_f,
        "random": random_states,
        "kicks": kicks,
        "bats": bats,
        "bat_grads": bat_grads,
        "extra0": extra0,
        "extra0_grad": extra0_grad,
        "fcp": fcp,
        "evals": evals,
    }
    yield bundle
    evals_path.write_text(json.dumps(bundle["evals"], indent=1, sort_keys=True))


# ---------------------------------------------------------------------------
# Criterion 4: attack-objective oracles on a trained checkpoint
# ---------------------------------------------------------------------------


def test_criterion_4_attack_objective_oracle(desk):
    t0 = time.time()
    layout = desk["layout"]
    policy = desk["agents"][0]
    trajs = attack.collect_attack_trajectories(policy, layout, n_traj=2, horizon=100, seed=42)
    scores = attack.score_units(policy, trajs, layout)

    # per-unit scores vs naive per-(step, unit) recomputation
    worst = 0.0
    for s in scores:
        delta = fz.env_delta(layout, perturbation_of([s.unit])).to_dense(layout)
        total = 0.0
        for tr in trajs:
            for t in range(tr.obs.shape[0]):
                g = nn.grad_action_prob_wrt_input(
                    policy, tr.obs[t].astype(np.float64), int(tr.astar[t])
                ).copy()
                g[: fz.ENV_CHANNELS[0]] = 0.0
                total += float((g * (-delta)).sum())
        worst = max(worst, abs(total - s.score))

    # top-1 composition vs exhaustive subset maximization
    res = attack.compose_adversarial_states(scores, epsilon=DESK["epsilon"], k=1)
    jmap = {s.unit: s.score for s in scores}
    best = -math.inf
    for size in range(1, DESK["epsilon"] + 1):
        for combo in itertools.combinations(list(jmap), size):
            if len({u.cell for u in combo}) != len(combo):
                continue
            best = max(best, sum(jmap[u] for u in combo))
    gap = abs(res.perturbations[0][1] - best)

    # trained policies are sensitive to environmental channel flips
    obs = fz.encode(layout, gw.reset(layout))
    flipped = obs.copy()
    cell = sorted(gw.reachable_empty_counters(layout, gw.reset(layout)))[0]
    flipped[fz.CH_COUNTER_ONION, cell[1], cell[0]] = 1.0
    dz = np.abs(nn.forward(policy, flipped)[0] - nn.forward(policy, obs)[0]).max()

    took = time.time() - t0
    record(
        "criterion 4 (attack-objective oracle)",
        worst < 1e-9 and gap < 1e-9 and dz > 0 and took < 60,
        f"unit-score err {worst:.2e}, top-1 gap {gap:.2e}, env sensitivity {dz:.3g}, {took:.1f}s",
    )


# ---------------------------------------------------------------------------
# Criterion 5: exact zero cases
# ---------------------------------------------------------------------------


def test_criterion_5_zero_cases():
    rng = np.random.default_rng(7)
    layout = gw.bundled_layout(DESK["layout"])

    # J contribution of the unperturbed state (zero delta) is exactly zero
    arch = nn.ArchSpec(height=layout.height, width=layout.width, dtype="f64")
    params = nn.init_params(arch, seed=1)
    trajs = attack.collect_attack_trajectories(params, layout, n_traj=1, horizon=20, seed=0)
    grad = attack.summed_prob_gradient(params, trajs, layout)
    j_zero = float((grad * np.zeros_like(grad)).sum())

    # kick-start loss vanishes in the identity scenario (64-bit)
    config = defense.BATConfig(n_traj=1, horizon=20, epochs=1)
    dataset = defense.build_distill_dataset(params, layout, (), config, seed=0,
                                            trajectories=trajs)
    ks_loss, _, _ = defense.kickstart_loss(params, dataset, np.arange(20), config)

    # KL(p, p) = 0
    kl_worst = 0.0
    for _ in range(50):
        p = rng.random(36)
        p /= p.sum()
        kl_worst = max(kl_worst, abs(nn.kl_divergence(p, p)))

    # argmax invariance of the temperature softmax
    argmax_ok = True
    for _ in range(200):
        z = rng.normal(scale=5, size=36)
        for T in (0.1, 1.0, 1.5, 10.0):
            argmax_ok &= int(np.argmax(nn.softmax_T(z, T))) == int(np.argmax(z))

    ok = j_zero == 0.0 and abs(ks_loss) < 1e-9 and kl_worst < 1e-9 and argmax_ok
    record(
        "criterion 5 (zero cases)",
        ok,
        f"J(standard)={j_zero}, kickstart identity={ks_loss:.2e}, KL(p,p)<={kl_worst:.2e}, "
        f"argmax invariant={argmax_ok}",
    )


# ---------------------------------------------------------------------------
# Criteria 6-8: desk-scale attack and defense efficacy
# ---------------------------------------------------------------------------


def test_criterion_6_attack_efficacy(desk):
    layout, evals = desk["layout"], desk["evals"]
    none_means, grad_means, rand_means = [], [], []
    for i, agent in enumerate(desk["agents"]):
        none_means.append(
            _eval_cached(evals, agent, layout, [None], DESK["games"], 9000 + i, f"none{i}")
        )
        grad_means.append(
            _eval_cached(
                evals, agent, layout, desk["grads"][i].states(), DESK["games"], 9100 + i,
                f"grad{i}",
            )
        )
        rand_means.append(
            _eval_cached(
                evals, agent, layout, desk["random"].states(), DESK["games"], 9200 + i,
                f"random{i}",
            )
        )
    none, grad_m, rand_m = map(lambda xs: float(np.mean(xs)), (none_means, grad_means, rand_means))
    ok = grad_m <= 0.5 * none and grad_m <= rand_m
    record(
        "criterion 6 (attack efficacy)",
        ok,
        f"no-attack {none:.1f} (per agent {['%.1f' % x for x in none_means]}), "
        f"grad {grad_m:.1f} (<= {0.5 * none:.1f}), random {rand_m:.1f}",
    )


def test_criterion_7_random_f_vs_random(desk):
    layout, evals = desk["layout"], desk["evals"]
    rf_means, rand_means = [], []
    for i, agent in enumerate(desk["agents"]):
        rf_means.append(
            _eval_cached(
                evals, agent, layout, desk["randoms_f"][i].states(), DESK["games"], 9300 + i,
                f"random_f{i}",
            )
        )
        rand_means.append(
            _eval_cached(
                evals, agent, layout, desk["random"].states(), DESK["games"], 9200 + i,
                f"random{i}",
            )
        )
    rf, rand_m = float(np.mean(rf_means)), float(np.mean(rand_means))
    n_states = min(len(desk["randoms_f"][i].states()) for i in range(len(desk["agents"])))
    record(
        "criterion 7 (filtered random stronger)",
        rf <= rand_m and n_states >= 20,
        f"random_f {rf:.1f} <= random {rand_m:.1f} over {n_states} states per agent",
    )


def test_criterion_8_bat_efficacy(desk):
    layout, evals = desk["layout"], desk["evals"]

    # hardening budget stays within the original training budget
    kick_passes = DESK["kickstart_epochs"] * int(0.7 * DESK["n_traj"] * DESK["horizon"])
    budget = DESK["finetune_steps"] + kick_passes
    assert budget <= DESK["train_steps"], f"hardening budget {budget} exceeds original"

    pre_none, pre_att, post_none, post_fresh = [], [], [], []
    for i, agent in enumerate(desk["agents"]):
        pre_none.append(
            _eval_cached(evals, agent, layout, [None], DESK["games"], 9000 + i, f"none{i}")
        )
        pre_att.append(
            _eval_cached(
                evals, agent, layout, desk["grads"][i].states(), DESK["games"], 9100 + i,
                f"grad{i}",
            )
        )
        post_none.append(
            _eval_cached(
                evals, desk["bats"][i], layout, [None], DESK["games"], 9400 + i, f"bat_none{i}"
            )
        )
        post_fresh.append(
            _eval_cached(
                evals, desk["bats"][i], layout, desk["bat_grads"][i].states(), DESK["games"],
                9500 + i, f"bat_fresh{i}",
            )
        )
    pre_n, pre_a = float(np.mean(pre_none)), float(np.mean(pre_att))
    post_n, post_f = float(np.mean(post_none)), float(np.mean(post_fresh))
    ok_a = post_f >= 2.0 * pre_a
    ok_b = post_n >= 0.9 * pre_n
    record(
        "criterion 8 (hardening efficacy)",
        ok_a and ok_b,
        f"under re-attack {post_f:.1f} >= 2x{pre_a:.1f}; clean {post_n:.1f} >= 0.9x{pre_n:.1f}; "
        f"budget {budget} <= {DESK['train_steps']}",
    )


def test_defense_grid_direction(desk):
    """Hardened agent beats the extra-training baseline under fresh attacks."""
    layout, evals = desk["layout"], desk["evals"]
    bat_fresh = _eval_cached(
        evals, desk["bats"][0], layout, desk["bat_grads"][0].states(), DESK["games"], 9500,
        "bat_fresh0",
    )
    extra_fresh = _eval_cached(
        evals, desk["extra0"], layout, desk["extra0_grad"].states(), DESK["games"], 9600,
        "extra_fresh0",
    )
    record(
        "defense-grid direction (hardened > extra training under attack)",
        bat_fresh > extra_fresh,
        f"hardened {bat_fresh:.1f} > extra {extra_fresh:.1f}",
    )


def test_trained_agents_clear_quality_bar(desk):
    """Desk training actually produces competent agents (calibrated bar), and
    trained policies dwarf a fresh random policy."""
    layout, evals = desk["layout"], desk["evals"]
    none_means = [
        _eval_cached(evals, a, layout, [None], DESK["games"], 9000 + i, f"none{i}")
        for i, a in enumerate(desk["agents"])
    ]
    fresh = nn.init_params(desk["cfg"].arch_for(layout), seed=123)
    fresh_mean = _eval_cached(evals, fresh, layout, [None], DESK["games"], 9700, "fresh")
    # calibrated-and-frozen bar: at least five deliveries per episode on average
    bar = 5 * layout.delivery_reward
    ok = all(m >= bar for m in none_means) and min(none_means) > 10 * max(fresh_mean, 1e-9)
    record(
        "trained-agent quality bar",
        ok,
        f"agents {['%.1f' % m for m in none_means]} >= {bar}, fresh policy {fresh_mean:.2f}",
    )


def test_kickstart_retains_baseline_capability(desk):
    """The distilled start policy keeps at least half the teacher's clean
    score before any fine-tuning."""
    layout, evals = desk["layout"], desk["evals"]
    ok = True
    details = []
    for i, agent in enumerate(desk["agents"]):
        # the hardened agent must descend from exactly this kick-start
        assert desk["bats"][i].meta["parent"] == nn.params_fingerprint(desk["kicks"][i])
        teacher = _eval_cached(evals, agent, layout, [None], DESK["games"], 9000 + i, f"none{i}")
        student = _eval_cached(
            evals, desk["kicks"][i], layout, [None], DESK["games"], 9900 + i, f"kick_none{i}"
        )
        ok &= student >= 0.5 * teacher
        details.append(f"agent{i} {student:.1f}/{teacher:.1f}")
    record("kick-start capability retention", ok, "; ".join(details) + " (bar 50%)")


def test_fcp_agent_scores_in_self_play(desk):
    evals = desk["evals"]
    mean = _eval_cached(
        evals, desk["fcp"], desk["fcp_layout"], [None], DESK["games"], 9800, "fcp_none"
    )
    record(
        "co-play agent self-play score",
        mean > 0,
        f"mirror-control self-play mean {mean:.1f} > 0 over {DESK['games']} games "
        f"on {desk['fcp_layout'].name}",
    )


# ---------------------------------------------------------------------------
# Criterion 9: degenerate equivalences (exact)
# ---------------------------------------------------------------------------


def test_criterion_9_degenerate_equivalence():
    layout = gw.bundled_layout(DESK["layout"])
    cfg = rl.PPOConfig(n_envs=4, rollout_steps=16, horizon=25, minibatch=32, epochs=2)
    sp = rl.train_self_play(layout, 256, seed=11, cfg=cfg)
    div = rl.train_div_start(layout, rl.InitDistribution.standard(), 256, seed=11, cfg=cfg)
    same_train = nn.params_fingerprint(sp.params) == nn.params_fingerprint(div.params)

    base = nn.init_params(cfg.arch_for(layout), seed=3)
    base.weights["actor.W"] *= 40.0
    ft = defense.bat_finetune(base, layout, rl.InitDistribution.standard(), 128, seed=4, cfg=cfg)
    extra = rl.train_ppo(
        layout, rl.InitDistribution.standard(), 128, seed=4, cfg=cfg,
        start_params=base, algo="bat_finetune",
    )
    same_ft = nn.params_fingerprint(ft.params) == nn.params_fingerprint(extra.params)
    record(
        "criterion 9 (degenerate equivalence)",
        same_train and same_ft,
        f"div-start point mass == self-play: {same_train}; "
        f"fine-tune point mass == extra training: {same_ft}",
    )


# ---------------------------------------------------------------------------
# Criterion 10: byte-identical reports
# ---------------------------------------------------------------------------


def test_criterion_10_reproducibility():
    layout = gw.bundled_layout(DESK["layout"])
    arch = nn.ArchSpec(height=layout.height, width=layout.width, hidden=(16, 16))
    policies = []
    for seed in (0, 1):
        p = nn.init_params(arch, seed=seed)
        p.weights["actor.W"] *= 40.0
        policies.append(p)
    config = harness.ExperimentConfig(
        layout_name=layout.name, games=3, horizon=60, k=3, k_random=4, n_traj=2,
        p_freq=0.9, seed=17,
    )
    outputs = []
    for _ in range(2):
        report, _ = harness.run_attack_experiment(policies, layout, config=config)
        outputs.append(
            harness.render_report(report, "csv") + harness.render_report(report, "md")
        )
    record(
        "criterion 10 (byte-identical reports)",
        outputs[0] == outputs[1],
        f"two runs, {len(outputs[0])} bytes each, identical={outputs[0] == outputs[1]}",
    )
