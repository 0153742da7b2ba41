import pytest

from cookbench import gridworld as gw
from cookbench import nn


@pytest.fixture(scope="session")
def cross():
    return gw.bundled_layout("cross")


@pytest.fixture(scope="session")
def ring():
    return gw.bundled_layout("coordination_ring")


@pytest.fixture(scope="session")
def all_layouts():
    return [gw.bundled_layout(name) for name in gw.bundled_layout_names()]


@pytest.fixture()
def tiny_arch(cross):
    return nn.ArchSpec(height=cross.height, width=cross.width, hidden=(16, 16))


@pytest.fixture()
def tiny_policy(tiny_arch):
    return nn.init_params(tiny_arch, seed=0)


def random_reachable_state(layout, rng, n_steps=60):
    """Random-walk state generator; timestep normalized to zero because the
    observation encoding does not carry it."""
    from dataclasses import replace

    state = gw.reset(layout)
    for _ in range(int(rng.integers(0, n_steps))):
        acts = (gw.Action(int(rng.integers(6))), gw.Action(int(rng.integers(6))))
        state, _, _ = gw.step(layout, state, acts)
    return replace(state, t=0)
