"""Deterministic two-cook cooking gridworld.

Two characters move on a grid of floor and station tiles, fetch onions and
dishes from dispensers, cook three-onion soups in pots, and deliver finished
soups for reward. The module also defines the semantic perturbation model:
atomic edits of the initial object arrangement (an onion or dish placed on a
reachable empty counter, or onions dropped into an empty pot) and the
edit-count distance between initial states.

Dynamics conventions:
  * All actions resolve simultaneously. Movement into a non-floor tile or a
    cell the other character ends up occupying is blocked; simultaneous
    entry into the same cell and position swaps both block symmetrically
    (nobody gets priority). Moving into a cell the other character vacates
    in the same step is allowed.
  * Interact acts on the tile the character faces. If both characters
    interact with the same tile in the same step, both interactions are
    no-ops (symmetric blocking again).
  * Pot timers tick down at the start of a step, before interactions, so a
    pot loaded with its third onion keeps ``cook_time`` on the clock until
    the next step.

``step`` is a pure function: it never mutates its input state and the same
(state, actions) pair always produces the same output.
"""

from __future__ import annotations

import importlib.resources
from dataclasses import dataclass, replace
from enum import IntEnum
from typing import Iterable, Optional

Cell = tuple[int, int]  # (x, y); x indexes columns, y indexes rows


class LayoutError(ValueError):
    """Raised for malformed or invariant-violating layout files."""


class FeasibilityError(ValueError):
    """Raised when a perturbation cannot be applied to the standard state."""


class UnreachableStateError(ValueError):
    """Raised when a state is not expressible as unit edits of the standard state."""


class Tile(IntEnum):
    FLOOR = 0
    COUNTER = 1
    POT = 2
    ONION_SOURCE = 3
    DISH_SOURCE = 4
    SERVE = 5


class Item(IntEnum):
    ONION = 0
    DISH = 1
    SOUP = 2


class Direction(IntEnum):
    UP = 0
    DOWN = 1
    LEFT = 2
    RIGHT = 3


DIR_VEC: dict[Direction, Cell] = {
    Direction.UP: (0, -1),
    Direction.DOWN: (0, 1),
    Direction.LEFT: (-1, 0),
    Direction.RIGHT: (1, 0),
}


class Action(IntEnum):
    WAIT = 0
    UP = 1
    DOWN = 2
    LEFT = 3
    RIGHT = 4
    INTERACT = 5


N_ACTIONS = 6

_MOVE_DIR: dict[Action, Direction] = {
    Action.UP: Direction.UP,
    Action.DOWN: Direction.DOWN,
    Action.LEFT: Direction.LEFT,
    Action.RIGHT: Direction.RIGHT,
}

_CHAR_TILE = {
    "X": Tile.COUNTER,
    " ": Tile.FLOOR,
    "P": Tile.POT,
    "O": Tile.ONION_SOURCE,
    "D": Tile.DISH_SOURCE,
    "S": Tile.SERVE,
    "1": Tile.FLOOR,
    "2": Tile.FLOOR,
}


@dataclass(frozen=True)
class Layout:
    """Static grid description plus dynamics constants.

    ``tiles`` is indexed ``tiles[y][x]``. The two ``starts`` are distinct
    floor cells, one per character.
    """

    name: str
    width: int
    height: int
    tiles: tuple[tuple[Tile, ...], ...]
    starts: tuple[Cell, Cell]
    cook_time: int = 20
    delivery_reward: int = 20
    soup_size: int = 3

    def tile(self, cell: Cell) -> Tile:
        x, y = cell
        return self.tiles[y][x]

    def in_bounds(self, cell: Cell) -> bool:
        x, y = cell
        return 0 <= x < self.width and 0 <= y < self.height

    def cells_of(self, kind: Tile) -> tuple[Cell, ...]:
        return tuple(
            (x, y)
            for y in range(self.height)
            for x in range(self.width)
            if self.tiles[y][x] == kind
        )

    @property
    def pot_cells(self) -> tuple[Cell, ...]:
        return self.cells_of(Tile.POT)

    @property
    def counter_cells(self) -> tuple[Cell, ...]:
        return self.cells_of(Tile.COUNTER)

    @property
    def floor_cells(self) -> tuple[Cell, ...]:
        return self.cells_of(Tile.FLOOR)

    def reachable_floor(self) -> frozenset[Cell]:
        """Floor cells connected to either start by a floor path (union)."""
        seen: set[Cell] = set()
        stack = [s for s in self.starts]
        while stack:
            cell = stack.pop()
            if cell in seen:
                continue
            seen.add(cell)
            x, y = cell
            for dx, dy in DIR_VEC.values():
                nxt = (x + dx, y + dy)
                if self.in_bounds(nxt) and self.tile(nxt) == Tile.FLOOR and nxt not in seen:
                    stack.append(nxt)
        return frozenset(seen)


@dataclass(frozen=True)
class PlayerState:
    pos: Cell
    facing: Direction
    held: Optional[Item] = None


@dataclass(frozen=True)
class PotState:
    onions: int = 0
    timer: int = 0  # steps of cooking left; 0 means ready (if full) or idle


@dataclass(frozen=True, eq=False)
class WorldState:
    """Full dynamic state: character poses plus object arrangement.

    ``counters`` maps occupied counter cells to items; empty counters are
    absent. ``pots`` has an entry for every pot cell.
    """

    players: tuple[PlayerState, PlayerState]
    counters: dict[Cell, Item]
    pots: dict[Cell, PotState]
    t: int = 0

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, WorldState):
            return NotImplemented
        return (
            self.players == other.players
            and self.counters == other.counters
            and self.pots == other.pots
            and self.t == other.t
        )

    def key(self) -> tuple:
        """Canonical hashable key (used by search oracles in tests)."""
        return (
            self.players,
            tuple(sorted(self.counters.items())),
            tuple(sorted(self.pots.items())),
            self.t,
        )


class UnitKind(IntEnum):
    ONION_ON_COUNTER = 0
    DISH_ON_COUNTER = 1
    ONIONS_IN_POT = 2


@dataclass(frozen=True)
class UnitPerturbation:
    """One atomic edit of the standard initial arrangement."""

    kind: UnitKind
    cell: Cell
    count: int = 0  # onions placed, only for ONIONS_IN_POT

    def __post_init__(self) -> None:
        if self.kind == UnitKind.ONIONS_IN_POT:
            if self.count < 1:
                raise ValueError("pot unit needs count >= 1")
        elif self.count != 0:
            raise ValueError("counter units carry no count")

    def ordinal(self) -> tuple[int, int, int, int]:
        # category, then row-major cell, then onion count
        return (int(self.kind), self.cell[1], self.cell[0], self.count)


@dataclass(frozen=True)
class Perturbation:
    """A set of unit edits with pairwise-distinct target cells.

    The semantic distance of the perturbed initial state from the standard
    one is ``len(units)``.
    """

    units: tuple[UnitPerturbation, ...]

    def __post_init__(self) -> None:
        cells = [u.cell for u in self.units]
        if len(set(cells)) != len(cells):
            raise FeasibilityError("perturbation units target duplicate cells")
        object.__setattr__(self, "units", tuple(sorted(self.units, key=UnitPerturbation.ordinal)))

    @property
    def distance(self) -> int:
        return len(self.units)


def perturbation_of(units: Iterable[UnitPerturbation]) -> Perturbation:
    return Perturbation(tuple(units))


# ---------------------------------------------------------------------------
# Layout parsing
# ---------------------------------------------------------------------------


def load_layout(text: str, name: str = "unnamed") -> Layout:
    """Parse a layout from its text form.

    Optional ``key = value`` header lines (cook_time, delivery_reward,
    soup_size) precede the ASCII grid. Grid characters: ``X`` counter,
    space floor, ``P`` pot, ``O`` onion dispenser, ``D`` dish dispenser,
    ``S`` serving location, ``1``/``2`` character starts.
    """
    options = {"cook_time": 20, "delivery_reward": 20, "soup_size": 3}
    lines = text.splitlines()
    grid_lines: list[str] = []
    in_grid = False
    for line in lines:
        if not in_grid and "=" in line and not set(line) <= {"=", " "}:
            key, _, value = line.partition("=")
            key = key.strip()
            if key not in options:
                raise LayoutError(f"unknown layout option {key!r}")
            try:
                options[key] = int(value.strip())
            except ValueError as exc:
                raise LayoutError(f"bad integer for {key!r}: {value.strip()!r}") from exc
            continue
        if not in_grid and line.strip() == "":
            continue
        in_grid = True
        grid_lines.append(line)
    while grid_lines and grid_lines[-1].strip() == "":
        grid_lines.pop()
    if not grid_lines:
        raise LayoutError("empty layout grid")
    if options["cook_time"] < 1 or options["delivery_reward"] < 1 or options["soup_size"] < 1:
        raise LayoutError("layout options must be positive")

    width = len(grid_lines[0])
    height = len(grid_lines)
    if any(len(row) != width for row in grid_lines):
        raise LayoutError("layout grid is not rectangular")
    if width < 3 or height < 3:
        raise LayoutError("layout too small to enclose any floor")

    tiles: list[tuple[Tile, ...]] = []
    starts: dict[str, Cell] = {}
    n_start_marks = 0
    for y, row in enumerate(grid_lines):
        tile_row = []
        for x, ch in enumerate(row):
            if ch not in _CHAR_TILE:
                raise LayoutError(f"unknown layout character {ch!r} at ({x}, {y})")
            if ch in "12":
                n_start_marks += 1
                if ch in starts:
                    pass  # counted; duplicate detected below
                starts[ch] = (x, y)
            tile_row.append(_CHAR_TILE[ch])
        tiles.append(tuple(tile_row))

    if n_start_marks != 2 or set(starts) != {"1", "2"}:
        raise LayoutError(f"expected 2 starts, found {n_start_marks} markers")

    layout = Layout(
        name=name,
        width=width,
        height=height,
        tiles=tuple(tiles),
        starts=(starts["1"], starts["2"]),
        cook_time=options["cook_time"],
        delivery_reward=options["delivery_reward"],
        soup_size=options["soup_size"],
    )
    _validate_layout(layout)
    return layout


def _validate_layout(layout: Layout) -> None:
    for x in range(layout.width):
        for y in (0, layout.height - 1):
            if layout.tile((x, y)) == Tile.FLOOR:
                raise LayoutError(f"border cell ({x}, {y}) is floor; world must be enclosed")
    for y in range(layout.height):
        for x in (0, layout.width - 1):
            if layout.tile((x, y)) == Tile.FLOOR:
                raise LayoutError(f"border cell ({x}, {y}) is floor; world must be enclosed")
    required = {
        Tile.POT: "missing pot",
        Tile.ONION_SOURCE: "missing onion dispenser",
        Tile.DISH_SOURCE: "missing dish dispenser",
        Tile.SERVE: "missing serving location",
    }
    for kind, message in required.items():
        if not layout.cells_of(kind):
            raise LayoutError(message)
    if layout.starts[0] == layout.starts[1]:
        raise LayoutError("start cells must be distinct")


def load_layout_file(path) -> Layout:
    from pathlib import Path

    p = Path(path)
    return load_layout(p.read_text(), name=p.stem)


def bundled_layout_names() -> list[str]:
    root = importlib.resources.files("cookbench") / "layouts"
    return sorted(p.name.removesuffix(".layout") for p in root.iterdir() if p.name.endswith(".layout"))


def bundled_layout(name: str) -> Layout:
    root = importlib.resources.files("cookbench") / "layouts"
    resource = root / f"{name}.layout"
    try:
        text = resource.read_text()
    except FileNotFoundError:
        raise LayoutError(f"no bundled layout named {name!r}; have {bundled_layout_names()}")
    return load_layout(text, name=name)


# ---------------------------------------------------------------------------
# Reset and the perturbation model
# ---------------------------------------------------------------------------


def standard_initial_state(layout: Layout) -> WorldState:
    players = tuple(PlayerState(pos=s, facing=Direction.DOWN) for s in layout.starts)
    pots = {c: PotState() for c in layout.pot_cells}
    return WorldState(players=players, counters={}, pots=pots, t=0)


def reachable_empty_counters(layout: Layout, state: WorldState) -> frozenset[Cell]:
    """Counter cells with no item that touch floor connected to a start."""
    reach = layout.reachable_floor()
    out = set()
    for cell in layout.counter_cells:
        if cell in state.counters:
            continue
        x, y = cell
        if any((x + dx, y + dy) in reach for dx, dy in DIR_VEC.values()):
            out.add(cell)
    return frozenset(out)


def enumerate_unit_perturbations(layout: Layout) -> list[UnitPerturbation]:
    """Every feasible unit edit of the standard initial state.

    Ordered by (category, row-major cell, onion count); this ordering is the
    deterministic tie-breaker used throughout the attack pipeline.
    """
    standard = standard_initial_state(layout)
    counters = sorted(reachable_empty_counters(layout, standard), key=lambda c: (c[1], c[0]))
    units = [UnitPerturbation(UnitKind.ONION_ON_COUNTER, c) for c in counters]
    units += [UnitPerturbation(UnitKind.DISH_ON_COUNTER, c) for c in counters]
    for p in sorted(layout.pot_cells, key=lambda c: (c[1], c[0])):
        for n in range(1, layout.soup_size + 1):
            units.append(UnitPerturbation(UnitKind.ONIONS_IN_POT, p, n))
    return units


def apply_unit(layout: Layout, state: WorldState, unit: UnitPerturbation) -> WorldState:
    """Apply one unit edit, enforcing feasibility against ``state``."""
    if unit.kind in (UnitKind.ONION_ON_COUNTER, UnitKind.DISH_ON_COUNTER):
        if layout.tile(unit.cell) != Tile.COUNTER:
            raise FeasibilityError(f"{unit.cell} is not a counter")
        if unit.cell not in reachable_empty_counters(layout, state):
            raise FeasibilityError(f"counter {unit.cell} is occupied or unreachable")
        item = Item.ONION if unit.kind == UnitKind.ONION_ON_COUNTER else Item.DISH
        counters = dict(state.counters)
        counters[unit.cell] = item
        return replace(state, counters=counters)
    # onions into an empty pot
    if layout.tile(unit.cell) != Tile.POT:
        raise FeasibilityError(f"{unit.cell} is not a pot")
    if state.pots[unit.cell].onions != 0:
        raise FeasibilityError(f"pot {unit.cell} is not empty")
    if not 1 <= unit.count <= layout.soup_size:
        raise FeasibilityError(f"pot load {unit.count} outside 1..{layout.soup_size}")
    timer = layout.cook_time if unit.count == layout.soup_size else 0
    pots = dict(state.pots)
    pots[unit.cell] = PotState(onions=unit.count, timer=timer)
    return replace(state, pots=pots)


def reset(layout: Layout, perturbation: Optional[Perturbation] = None) -> WorldState:
    """Initial state: characters at their starts, all counters and pots empty,
    then the perturbation's units applied (if given)."""
    state = standard_initial_state(layout)
    if perturbation is not None:
        for unit in perturbation.units:
            state = apply_unit(layout, state, unit)
    return state


def check_feasible(layout: Layout, perturbation: Perturbation) -> None:
    """Raise FeasibilityError if the perturbation cannot seed an episode."""
    reset(layout, perturbation)


def perturbation_distance(layout: Layout, s: WorldState, s_hat: WorldState) -> int:
    """Minimal number of unit edits mapping ``s`` (the standard initial state)
    to ``s_hat``. Units are independent and additive, so the distance is the
    count of differing counters plus the count of pots with differing fill."""
    standard = standard_initial_state(layout)
    if s != standard:
        raise UnreachableStateError("base state is not the standard initial state")
    if s_hat.players != s.players or s_hat.t != 0:
        raise UnreachableStateError("state differs outside the object arrangement")
    if set(s_hat.pots) != set(s.pots):
        raise UnreachableStateError("pot cells differ from the layout")

    ok_counters = reachable_empty_counters(layout, standard)
    dist = 0
    for cell, item in s_hat.counters.items():
        if item not in (Item.ONION, Item.DISH):
            raise UnreachableStateError(f"counter {cell} holds {item.name}, not placeable as a unit")
        if cell not in ok_counters:
            raise UnreachableStateError(f"counter {cell} is not a reachable empty counter")
        dist += 1
    for cell, pot in s_hat.pots.items():
        if pot.onions == 0:
            if pot.timer != 0:
                raise UnreachableStateError(f"pot {cell} has a timer but no onions")
            continue
        expect_timer = layout.cook_time if pot.onions == layout.soup_size else 0
        if not 1 <= pot.onions <= layout.soup_size or pot.timer != expect_timer:
            raise UnreachableStateError(f"pot {cell} state {pot} is not a unit edit")
        dist += 1
    return dist


def perturbation_between(layout: Layout, s_hat: WorldState) -> Perturbation:
    """The unique unit set mapping the standard initial state to ``s_hat``."""
    standard = standard_initial_state(layout)
    perturbation_distance(layout, standard, s_hat)  # validates expressibility
    units = []
    for cell, item in s_hat.counters.items():
        kind = UnitKind.ONION_ON_COUNTER if item == Item.ONION else UnitKind.DISH_ON_COUNTER
        units.append(UnitPerturbation(kind, cell))
    for cell, pot in s_hat.pots.items():
        if pot.onions > 0:
            units.append(UnitPerturbation(UnitKind.ONIONS_IN_POT, cell, pot.onions))
    return perturbation_of(units)


# ---------------------------------------------------------------------------
# Transition dynamics
# ---------------------------------------------------------------------------


def _resolve_moves(
    layout: Layout, players: tuple[PlayerState, PlayerState], actions: tuple[Action, Action]
) -> tuple[tuple[Cell, Cell], tuple[Direction, Direction]]:
    cur = (players[0].pos, players[1].pos)
    facing = [players[0].facing, players[1].facing]
    want = list(cur)
    for i in (0, 1):
        a = actions[i]
        if a in _MOVE_DIR:
            d = _MOVE_DIR[a]
            facing[i] = d
            dx, dy = DIR_VEC[d]
            target = (cur[i][0] + dx, cur[i][1] + dy)
            if layout.in_bounds(target) and layout.tile(target) == Tile.FLOOR:
                want[i] = target
    if want[0] == want[1]:
        # simultaneous entry (or entry into a stationary character): both stay
        want = list(cur)
    elif want[0] == cur[1] and want[1] == cur[0]:
        # position swap: both stay
        want = list(cur)
    return (want[0], want[1]), (facing[0], facing[1])


def _interact(
    layout: Layout,
    player: PlayerState,
    counters: dict[Cell, Item],
    pots: dict[Cell, PotState],
    events: list,
    idx: int,
) -> tuple[PlayerState, float]:
    dx, dy = DIR_VEC[player.facing]
    target = (player.pos[0] + dx, player.pos[1] + dy)
    if not layout.in_bounds(target):
        return player, 0.0
    tile = layout.tile(target)
    held = player.held

    if tile == Tile.ONION_SOURCE and held is None:
        events.append(("pickup_onion", idx, target))
        return replace(player, held=Item.ONION), 0.0
    if tile == Tile.DISH_SOURCE and held is None:
        events.append(("pickup_dish", idx, target))
        return replace(player, held=Item.DISH), 0.0
    if tile == Tile.COUNTER:
        on_counter = counters.get(target)
        if held is None and on_counter is not None:
            del counters[target]
            events.append(("counter_pick", idx, target, on_counter))
            return replace(player, held=on_counter), 0.0
        if held is not None and on_counter is None:
            counters[target] = held
            events.append(("counter_place", idx, target, held))
            return replace(player, held=None), 0.0
        return player, 0.0
    if tile == Tile.POT:
        pot = pots[target]
        if held == Item.ONION and pot.onions < layout.soup_size:
            onions = pot.onions + 1
            timer = layout.cook_time if onions == layout.soup_size else 0
            pots[target] = PotState(onions=onions, timer=timer)
            events.append(("pot_load", idx, target, onions))
            if onions == layout.soup_size:
                events.append(("cook_start", idx, target))
            return replace(player, held=None), 0.0
        if held == Item.DISH and pot.onions == layout.soup_size and pot.timer == 0:
            pots[target] = PotState()
            events.append(("soup_pickup", idx, target))
            return replace(player, held=Item.SOUP), 0.0
        return player, 0.0
    if tile == Tile.SERVE and held == Item.SOUP:
        events.append(("deliver", idx, target))
        return replace(player, held=None), float(layout.delivery_reward)
    return player, 0.0


def step(
    layout: Layout, state: WorldState, actions: tuple[Action, Action]
) -> tuple[WorldState, float, list]:
    """Advance the world one tick. Returns (next state, reward, events).

    Every (state, actions) combination is defined; impossible interactions
    and blocked moves are no-ops.
    """
    # 1. pots that were cooking tick down
    pots = {
        c: (PotState(p.onions, p.timer - 1) if p.timer > 0 else p) for c, p in state.pots.items()
    }
    counters = dict(state.counters)
    events: list = []
    reward = 0.0

    # 2. interactions (on the post-tick pots, pre-move positions)
    players = list(state.players)
    interact_targets = []
    for i in (0, 1):
        if actions[i] == Action.INTERACT:
            dx, dy = DIR_VEC[players[i].facing]
            interact_targets.append((players[i].pos[0] + dx, players[i].pos[1] + dy))
        else:
            interact_targets.append(None)
    if interact_targets[0] is not None and interact_targets[0] == interact_targets[1]:
        pass  # contested tile: both interactions blocked
    else:
        for i in (0, 1):
            if interact_targets[i] is not None:
                players[i], r = _interact(layout, players[i], counters, pots, events, i)
                reward += r

    # 3. movement
    positions, facings = _resolve_moves(layout, (players[0], players[1]), actions)
    players = [replace(players[i], pos=positions[i], facing=facings[i]) for i in (0, 1)]

    next_state = WorldState(
        players=(players[0], players[1]),
        counters=counters,
        pots=pots,
        t=state.t + 1,
    )
    return next_state, reward, events
