"""Command-line surface.

Subcommands:

    layout validate FILE
    train --algo sp|fcp|div-start --layout NAME|FILE --steps N --seed S --out DIR
    attack --policy CKPT --layout NAME|FILE --method grad|random|random-f ...
    bat kickstart --policy CKPT --adv FILE ...
    bat finetune --policy CKPT --adv FILE --steps N --out CKPT
    eval --policy CKPT --states FILE|standard --games G --horizon H --report csv|md
    experiment attack|defense --config FILE --out DIR

Verbosity comes from the COOKBENCH_LOG environment variable (debug, info,
warning; default warning). Exits 0 on success and nonzero with a diagnostic
on any error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import defense, harness, nn, rl
from .attack import (
    generate_attack,
    load_attack_result,
    random_attack,
    save_attack_result,
)
from .gridworld import LayoutError, bundled_layout, bundled_layout_names, load_layout_file


def _setup_logging() -> None:
    level = os.environ.get("COOKBENCH_LOG", "warning").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.WARNING),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )


def _layout_arg(value: str):
    if value in bundled_layout_names():
        return bundled_layout(value)
    path = Path(value)
    if path.exists():
        return load_layout_file(path)
    raise LayoutError(f"{value!r} is neither a bundled layout name nor a file")


def _cmd_layout(args) -> int:
    if args.layout_cmd == "validate":
        layout = load_layout_file(args.file)
        print(
            f"ok: {layout.name} {layout.width}x{layout.height}, "
            f"{len(layout.pot_cells)} pot(s), starts {layout.starts}"
        )
        return 0
    if args.layout_cmd == "list":
        for name in bundled_layout_names():
            print(name)
        return 0
    raise ValueError(f"unknown layout subcommand {args.layout_cmd}")


def _cmd_train(args) -> int:
    layout = _layout_arg(args.layout)
    cfg = rl.PPOConfig()
    if args.shaped:
        cfg.shaping = {"pot_load": 3.0, "soup_pickup": 5.0}
    if args.save_every:
        cfg.save_every = args.save_every
    if args.algo == "sp":
        result = rl.train_self_play(layout, args.steps, args.seed, cfg, out_dir=args.out)
    elif args.algo == "div-start":
        if not args.adv:
            raise ValueError("div-start training needs --adv (attack-result file)")
        adv = load_attack_result(args.adv)
        dist = defense.bat_init_distribution(adv.states())
        result = rl.train_div_start(layout, dist, args.steps, args.seed, cfg, out_dir=args.out)
    elif args.algo == "fcp":
        if args.pool:
            pool = rl.PartnerPool.load(args.pool)
        else:
            pool = rl.build_partner_pool(
                layout, args.partner_steps, args.seed + 1000, cfg,
                out_dir=Path(args.out) / "pool",
            )
        result = rl.train_fcp(layout, pool, args.steps, args.seed, cfg, out_dir=args.out)
    else:
        raise ValueError(f"unknown algo {args.algo}")
    print(f"trained {args.algo} for {result.params.meta['steps']} steps -> {args.out}/final.nn")
    if result.metrics:
        print(f"final mean score: {result.metrics[-1]['mean_score']:.2f}")
    return 0


def _cmd_attack(args) -> int:
    layout = _layout_arg(args.layout)
    policy = nn.load_checkpoint(args.policy)
    if args.method == "grad":
        result = generate_attack(
            policy, layout, epsilon=args.budget, k=args.k, p_freq=args.pfreq,
            n_traj=args.traj, horizon=args.horizon, seed=args.seed,
        )
    else:
        trajectories = None
        if args.method == "random-f":
            from .attack import collect_attack_trajectories

            trajectories = collect_attack_trajectories(
                policy, layout, args.traj, args.horizon, args.seed
            )
        result = random_attack(
            layout, args.budget, args.k, args.method == "random-f", trajectories,
            args.pfreq, args.seed,
        )
    save_attack_result(result, args.out)
    print(f"{args.method} attack: {len(result.perturbations)} states -> {args.out}")
    for pert, score in result.perturbations[:3]:
        units = ", ".join(
            f"{u.kind.name.lower()}@{u.cell}" + (f"x{u.count}" if u.count else "")
            for u in pert.units
        )
        tag = f" (J~{score:.4f})" if score is not None else ""
        print(f"  D={pert.distance}: {units}{tag}")
    return 0


def _cmd_bat(args) -> int:
    policy = nn.load_checkpoint(args.policy)
    layout = _layout_arg(args.layout)
    adv = load_attack_result(args.adv)
    if args.bat_cmd == "kickstart":
        config = defense.BATConfig(
            temperature=args.temp, alpha=args.alpha, beta=args.beta,
            lr=args.lr, epochs=args.epochs,
        )
        perts = defense.perturbation_set(layout, adv, config, args.seed)
        dataset = defense.build_distill_dataset(policy, layout, perts, config, args.seed)
        student, report = defense.train_kickstart(policy, dataset, config, args.seed)
        nn.save_checkpoint(student, args.out)
        if args.report:
            report.to_csv(args.report)
        print(
            f"kick-start done: epoch {report.selected_epoch} "
            f"val loss {report.selected_val_loss:.6f} -> {args.out}"
        )
        return 0
    if args.bat_cmd == "finetune":
        config = defense.BATConfig()
        perts = defense.perturbation_set(layout, adv, config, args.seed)
        dist = defense.bat_init_distribution(perts)
        cfg = rl.PPOConfig()
        if args.shaped:
            cfg.shaping = {"pot_load": 3.0, "soup_pickup": 5.0}
        result = defense.bat_finetune(policy, layout, dist, args.steps, args.seed, cfg)
        nn.save_checkpoint(result.params, args.out)
        print(f"fine-tune done: {result.params.meta['steps']} total steps -> {args.out}")
        return 0
    raise ValueError(f"unknown bat subcommand {args.bat_cmd}")


def _cmd_eval(args) -> int:
    policy = nn.load_checkpoint(args.policy)
    layout = _layout_arg(args.layout)
    if args.states == "standard":
        states = [None]
    else:
        states = load_attack_result(args.states).states()
    stats = harness.evaluate(
        harness.EvalSpec(
            policy=policy, layout=layout, states=states, games=args.games,
            horizon=args.horizon, seed=args.seed, deterministic=args.deterministic,
        )
    )
    report = harness.Report(
        rows=[
            harness.ReportRow(
                method=policy.meta.get("algo", "policy"),
                attack="standard" if args.states == "standard" else Path(args.states).stem,
                layout=layout.name,
                mean=stats.grand_mean,
                stderr=stats.grand_stderr,
                n=stats.n_episodes,
            )
        ],
        metadata={"seed": args.seed},
    )
    text = harness.render_report(report, args.report)
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return 0


def _cmd_experiment(args) -> int:
    if args.kind == "attack":
        config = harness.ExperimentConfig.from_json(args.config)
        layout = bundled_layout(config.layout_name)
        policies = [nn.load_checkpoint(p) for p in args.policies]
        report, _ = harness.run_attack_experiment(
            policies, layout, config=config, out_dir=args.out
        )
    else:
        config = harness.DefenseExperimentConfig.from_json(args.config)
        layout = bundled_layout(config.layout_name)
        base = [nn.load_checkpoint(p) for p in args.policies] if args.policies else None
        report = harness.run_defense_experiment(layout, config, base_agents=base, out_dir=args.out)
    print(harness.render_report(report, "md"), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cookbench")
    sub = parser.add_subparsers(dest="command", required=True)

    p_layout = sub.add_parser("layout", help="layout utilities")
    layout_sub = p_layout.add_subparsers(dest="layout_cmd", required=True)
    p_validate = layout_sub.add_parser("validate")
    p_validate.add_argument("file")
    layout_sub.add_parser("list")
    p_layout.set_defaults(func=_cmd_layout)

    p_train = sub.add_parser("train", help="train an agent")
    p_train.add_argument("--algo", choices=["sp", "fcp", "div-start"], required=True)
    p_train.add_argument("--layout", required=True)
    p_train.add_argument("--steps", type=int, required=True)
    p_train.add_argument("--seed", type=int, default=0)
    p_train.add_argument("--out", required=True)
    p_train.add_argument("--shaped", action="store_true", help="use event-shaped training reward")
    p_train.add_argument("--save-every", type=int, default=0)
    p_train.add_argument("--adv", help="attack-result file (div-start initial states)")
    p_train.add_argument("--pool", help="partner pool directory (fcp)")
    p_train.add_argument("--partner-steps", type=int, default=200_000)
    p_train.set_defaults(func=_cmd_train)

    p_attack = sub.add_parser("attack", help="generate adversarial initial states")
    p_attack.add_argument("--policy", required=True)
    p_attack.add_argument("--layout", required=True)
    p_attack.add_argument("--method", choices=["grad", "random", "random-f"], default="grad")
    p_attack.add_argument("--budget", type=int, default=3)
    p_attack.add_argument("--k", type=int, default=10)
    p_attack.add_argument("--pfreq", type=float, default=0.05)
    p_attack.add_argument("--traj", type=int, default=20)
    p_attack.add_argument("--horizon", type=int, default=800)
    p_attack.add_argument("--seed", type=int, default=0)
    p_attack.add_argument("--out", required=True)
    p_attack.set_defaults(func=_cmd_attack)

    p_bat = sub.add_parser("bat", help="boosted adversarial training stages")
    bat_sub = p_bat.add_subparsers(dest="bat_cmd", required=True)
    p_kick = bat_sub.add_parser("kickstart")
    p_kick.add_argument("--policy", required=True)
    p_kick.add_argument("--layout", required=True)
    p_kick.add_argument("--adv", required=True)
    p_kick.add_argument("--epochs", type=int, default=100)
    p_kick.add_argument("--temp", type=float, default=1.5)
    p_kick.add_argument("--alpha", type=float, default=0.05)
    p_kick.add_argument("--beta", type=float, default=1.0)
    p_kick.add_argument("--lr", type=float, default=1e-3)
    p_kick.add_argument("--seed", type=int, default=0)
    p_kick.add_argument("--out", required=True)
    p_kick.add_argument("--report")
    p_fine = bat_sub.add_parser("finetune")
    p_fine.add_argument("--policy", required=True)
    p_fine.add_argument("--layout", required=True)
    p_fine.add_argument("--adv", required=True)
    p_fine.add_argument("--steps", type=int, required=True)
    p_fine.add_argument("--seed", type=int, default=0)
    p_fine.add_argument("--shaped", action="store_true")
    p_fine.add_argument("--out", required=True)
    p_bat.set_defaults(func=_cmd_bat)

    p_eval = sub.add_parser("eval", help="score a policy")
    p_eval.add_argument("--policy", required=True)
    p_eval.add_argument("--layout", required=True)
    p_eval.add_argument("--states", default="standard", help="attack-result file or 'standard'")
    p_eval.add_argument("--games", type=int, default=100)
    p_eval.add_argument("--horizon", type=int, default=800)
    p_eval.add_argument("--seed", type=int, default=0)
    p_eval.add_argument("--deterministic", action="store_true")
    p_eval.add_argument("--report", choices=["csv", "md"], default="csv")
    p_eval.add_argument("--out")
    p_eval.set_defaults(func=_cmd_eval)

    p_exp = sub.add_parser("experiment", help="run a full experiment grid")
    p_exp.add_argument("kind", choices=["attack", "defense"])
    p_exp.add_argument("--config", required=True)
    p_exp.add_argument("--out", required=True)
    p_exp.add_argument("--policies", nargs="*", default=[])
    p_exp.set_defaults(func=_cmd_experiment)
    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # surface a clean diagnostic, nonzero exit
        print(f"error: {exc}", file=sys.stderr)
        if os.environ.get("COOKBENCH_LOG", "").lower() == "debug":
            raise
        return 1


if __name__ == "__main__":
    sys.exit(main())
