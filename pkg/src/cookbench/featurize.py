"""Lossless 26-channel tensor encoding of world states.

An observation is a ``(26, height, width)`` array. The channel map is fixed:

    agent channels (0-15):
      0      character-1 position
      1      character-2 position
      2-5    character-1 facing one-hot (up, down, left, right) at its cell
      6-9    character-2 facing one-hot
      10-12  character-1 held item one-hot (onion, dish, soup) at its cell
      13-15  character-2 held item one-hot
    environment channels (16-25):
      16-20  static tile masks: counter, pot, onion dispenser, dish
             dispenser, serving location
      21-23  counter contents one-hot (onion, dish, soup)
      24     pot fill, onions / soup_size
      25     pot cook timer, steps remaining / cook_time

The split into agent and environment channels is a partition; perturbations
of the initial object arrangement only ever touch channels 21-25. The
timestep counter is deliberately not encoded (the tensor describes the
physical arrangement), so ``decode`` always returns a state with ``t = 0``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .gridworld import (
    Cell,
    Direction,
    FeasibilityError,
    Item,
    Layout,
    Perturbation,
    PlayerState,
    PotState,
    Tile,
    UnitKind,
    WorldState,
    reset,
)

N_CHANNELS = 26

CH_P1_POS = 0
CH_P2_POS = 1
CH_P1_FACING = 2  # 4 channels
CH_P2_FACING = 6
CH_P1_HELD = 10  # 3 channels
CH_P2_HELD = 13
CH_STATIC = 16  # 5 channels: counter, pot, onion src, dish src, serve
CH_COUNTER_ONION = 21
CH_COUNTER_DISH = 22
CH_COUNTER_SOUP = 23
CH_POT_FILL = 24
CH_POT_TIMER = 25

AGENT_CHANNELS = tuple(range(0, 16))
ENV_CHANNELS = tuple(range(16, 26))

_STATIC_ORDER = (Tile.COUNTER, Tile.POT, Tile.ONION_SOURCE, Tile.DISH_SOURCE, Tile.SERVE)


class DecodeError(ValueError):
    """Raised when a tensor does not describe a valid world state."""


@lru_cache(maxsize=None)
def _static_block(layout: Layout) -> np.ndarray:
    block = np.zeros((5, layout.height, layout.width))
    for i, kind in enumerate(_STATIC_ORDER):
        for x, y in layout.cells_of(kind):
            block[i, y, x] = 1.0
    block.setflags(write=False)
    return block


def obs_shape(layout: Layout) -> tuple[int, int, int]:
    return (N_CHANNELS, layout.height, layout.width)


def encode(layout: Layout, state: WorldState, dtype=np.float64) -> np.ndarray:
    """Deterministic lossless tensor for a valid state."""
    obs = np.zeros(obs_shape(layout), dtype=dtype)
    obs[CH_STATIC : CH_STATIC + 5] = _static_block(layout)
    for i, player in enumerate(state.players):
        x, y = player.pos
        obs[CH_P1_POS + i, y, x] = 1.0
        obs[(CH_P1_FACING, CH_P2_FACING)[i] + int(player.facing), y, x] = 1.0
        if player.held is not None:
            obs[(CH_P1_HELD, CH_P2_HELD)[i] + int(player.held), y, x] = 1.0
    for (x, y), item in state.counters.items():
        obs[CH_COUNTER_ONION + int(item), y, x] = 1.0
    for (x, y), pot in state.pots.items():
        if pot.onions:
            obs[CH_POT_FILL, y, x] = pot.onions / layout.soup_size
        if pot.timer:
            obs[CH_POT_TIMER, y, x] = pot.timer / layout.cook_time
    return obs


def _single_hot(channel: np.ndarray, what: str) -> Cell:
    ys, xs = np.nonzero(channel)
    if len(xs) != 1:
        raise DecodeError(f"expected exactly one {what} marker, found {len(xs)}")
    return (int(xs[0]), int(ys[0]))


def decode(obs: np.ndarray, layout: Layout) -> WorldState:
    """Reconstruct the exact world state an observation encodes (t = 0)."""
    if obs.shape != obs_shape(layout):
        raise DecodeError(f"observation shape {obs.shape} does not match {obs_shape(layout)}")

    players = []
    for i in range(2):
        pos = _single_hot(obs[CH_P1_POS + i], f"character-{i + 1} position")
        face_base = (CH_P1_FACING, CH_P2_FACING)[i]
        facing = None
        for d in Direction:
            if obs[face_base + int(d), pos[1], pos[0]] == 1.0:
                if facing is not None:
                    raise DecodeError(f"character-{i + 1} has two facings set")
                facing = d
            if np.count_nonzero(obs[face_base + int(d)]) not in (0, 1):
                raise DecodeError("facing channel set off the character cell")
        if facing is None:
            raise DecodeError(f"character-{i + 1} has no facing set")
        held_base = (CH_P1_HELD, CH_P2_HELD)[i]
        held = None
        for item in Item:
            if obs[held_base + int(item), pos[1], pos[0]] == 1.0:
                if held is not None:
                    raise DecodeError(f"character-{i + 1} holds two items")
                held = item
        players.append(PlayerState(pos=pos, facing=facing, held=held))
    if players[0].pos == players[1].pos:
        raise DecodeError("characters share a cell")

    counters: dict[Cell, Item] = {}
    for item in Item:
        ys, xs = np.nonzero(obs[CH_COUNTER_ONION + int(item)])
        for x, y in zip(xs.tolist(), ys.tolist()):
            cell = (x, y)
            if layout.tile(cell) != Tile.COUNTER:
                raise DecodeError(f"counter item off a counter tile at {cell}")
            if cell in counters:
                raise DecodeError(f"two items on counter {cell}")
            counters[cell] = item

    pots: dict[Cell, PotState] = {}
    for cell in layout.pot_cells:
        x, y = cell
        onions = int(round(float(obs[CH_POT_FILL, y, x]) * layout.soup_size))
        timer = int(round(float(obs[CH_POT_TIMER, y, x]) * layout.cook_time))
        if not 0 <= onions <= layout.soup_size:
            raise DecodeError(f"pot fill out of range at {cell}")
        if timer and onions != layout.soup_size:
            raise DecodeError(f"pot timer running with {onions} onions at {cell}")
        pots[cell] = PotState(onions=onions, timer=timer)
    if np.count_nonzero(obs[CH_POT_FILL]) > len(layout.pot_cells) or np.count_nonzero(
        obs[CH_POT_TIMER]
    ) > len(layout.pot_cells):
        raise DecodeError("pot channels set off pot tiles")

    return WorldState(players=(players[0], players[1]), counters=counters, pots=pots, t=0)


# ---------------------------------------------------------------------------
# Perturbation deltas in observation space
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EnvDelta:
    """Sparse observation-space difference introduced by a perturbation.

    Entries are ``(channel, cell, value)`` with channels restricted to the
    environment block; entries of different units never collide because unit
    target cells are pairwise distinct.
    """

    entries: tuple[tuple[int, Cell, float], ...]

    def to_dense(self, layout: Layout, dtype=np.float64) -> np.ndarray:
        dense = np.zeros(obs_shape(layout), dtype=dtype)
        for channel, (x, y), value in self.entries:
            dense[channel, y, x] += value
        return dense

    def apply(self, obs: np.ndarray) -> np.ndarray:
        out = obs.copy()
        for channel, (x, y), value in self.entries:
            out[channel, y, x] += value
        return out


def env_delta(layout: Layout, perturbation: Perturbation) -> EnvDelta:
    """Observation delta of a perturbed initial state, additive over units."""
    reset(layout, perturbation)  # feasibility gate
    entries: list[tuple[int, Cell, float]] = []
    for unit in perturbation.units:
        if unit.kind == UnitKind.ONION_ON_COUNTER:
            entries.append((CH_COUNTER_ONION, unit.cell, 1.0))
        elif unit.kind == UnitKind.DISH_ON_COUNTER:
            entries.append((CH_COUNTER_DISH, unit.cell, 1.0))
        else:
            entries.append((CH_POT_FILL, unit.cell, unit.count / layout.soup_size))
            if unit.count == layout.soup_size:
                entries.append((CH_POT_TIMER, unit.cell, 1.0))
    for channel, _, _ in entries:
        if channel not in ENV_CHANNELS:
            raise FeasibilityError("perturbation delta touches an agent channel")
    return EnvDelta(entries=tuple(entries))


# ---------------------------------------------------------------------------
# Player-perspective swap and serialization
# ---------------------------------------------------------------------------


@lru_cache(maxsize=None)
def player_swap_permutation(height: int, width: int) -> np.ndarray:
    """Index permutation over a flattened observation that swaps the two
    characters' agent channels. An involution; environment channels map to
    themselves."""
    channel_map = np.arange(N_CHANNELS)
    swaps = [(CH_P1_POS, CH_P2_POS)]
    swaps += [(CH_P1_FACING + k, CH_P2_FACING + k) for k in range(4)]
    swaps += [(CH_P1_HELD + k, CH_P2_HELD + k) for k in range(3)]
    for a, b in swaps:
        channel_map[a], channel_map[b] = channel_map[b], channel_map[a]
    idx = np.arange(N_CHANNELS * height * width).reshape(N_CHANNELS, height, width)
    perm = idx[channel_map].reshape(-1).copy()
    perm.setflags(write=False)
    return perm


def swap_players(obs: np.ndarray) -> np.ndarray:
    """Observation as seen with the two characters' identities exchanged."""
    c, h, w = obs.shape
    perm = player_swap_permutation(h, w)
    return obs.reshape(-1)[perm].reshape(c, h, w)


def obs_to_bytes(obs: np.ndarray) -> bytes:
    """Flat channel-major float32 serialization preceded by (C, w, h)."""
    c, h, w = obs.shape
    header = np.asarray([c, w, h], dtype=np.uint32).tobytes()
    return header + np.ascontiguousarray(obs, dtype=np.float32).tobytes()


def obs_from_bytes(blob: bytes) -> np.ndarray:
    c, w, h = np.frombuffer(blob[:12], dtype=np.uint32)
    body = np.frombuffer(blob[12:], dtype=np.float32)
    if body.size != c * w * h:
        raise DecodeError("observation blob size mismatch")
    return body.reshape(int(c), int(h), int(w)).astype(np.float64)
