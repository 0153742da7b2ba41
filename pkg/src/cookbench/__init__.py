"""cookbench: a two-cook gridworld workbench for training PPO agents,
attacking them through semantic edits of the initial object arrangement,
and hardening them with kick-started adversarial training."""

__version__ = "0.1.0"
