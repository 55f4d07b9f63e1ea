"""Deterministic kinematic tabletop with short and long blocks.

Blocks are axis-aligned boxes (length along x) described by their center.
There is no dynamics: a block that loses support drops straight down until
its footprint meets the highest top face below it, or the table.

All spawned coordinates sit on a 1/256 cm grid, so every displacement the
simulator produces is exactly representable and sums of effects telescope
without rounding.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

SIM_VERSION = "kinematic-1"

CARRY_CLEARANCE = 20.0
OFFSETS = (-7.5, 0.0, 7.5)
SPAWN_HALF_EXTENT = 25.0
MIN_SEPARATION = 15.0
GRID = 1.0 / 256.0
MAX_SPAWN_ATTEMPTS = 10000


class GenerationError(RuntimeError):
    pass


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class BlockSpec:
    kind: str
    length_x: float
    width_y: float = 5.0
    height_z: float = 5.0


SHORT = BlockSpec("short", 5.0)
LONG = BlockSpec("long", 20.0)
KINDS = (SHORT, LONG)
KIND_BY_NAME = {k.kind: k for k in KINDS}


@dataclass(frozen=True)
class Block:
    spec: BlockSpec
    x: float
    y: float
    z: float  # center height

    @property
    def base(self) -> float:
        return self.z - self.spec.height_z / 2

    @property
    def top(self) -> float:
        return self.z + self.spec.height_z / 2

    @property
    def pos(self) -> tuple[float, float, float]:
        return (self.x, self.y, self.z)


@dataclass(frozen=True)
class WorldState:
    blocks: tuple[Block, ...]

    def __len__(self) -> int:
        return len(self.blocks)

    def positions(self) -> np.ndarray:
        return np.array([b.pos for b in self.blocks], dtype=np.float64).reshape(-1, 3)

    def with_block(self, i: int, block: Block) -> "WorldState":
        blocks = list(self.blocks)
        blocks[i] = block
        return WorldState(tuple(blocks))

    def dump(self) -> str:
        return "\n".join(f"{b.spec.kind} {b.x!r} {b.y!r} {b.z!r}" for b in self.blocks)

    @classmethod
    def parse(cls, text: str) -> "WorldState":
        blocks = []
        for line in text.strip().splitlines():
            kind, x, y, z = line.split()
            blocks.append(Block(KIND_BY_NAME[kind], float(x), float(y), float(z)))
        return cls(tuple(blocks))


@dataclass(frozen=True)
class ActionSpec:
    grasp_index: int
    grasp_offset: float
    target_index: int
    release_offset: float

    def validate(self, n: int) -> None:
        if not (0 <= self.grasp_index < n and 0 <= self.target_index < n):
            raise SimulationError(f"action indices out of range for {n} objects: {self}")
        if self.grasp_index == self.target_index:
            raise SimulationError("grasp and target object must differ")
        if self.grasp_offset not in OFFSETS or self.release_offset not in OFFSETS:
            raise SimulationError(f"offsets must be one of {OFFSETS}: {self}")


def footprints_overlap(a: Block, b: Block) -> bool:
    """True when the x-y rectangles share positive area."""
    return (abs(a.x - b.x) < (a.spec.length_x + b.spec.length_x) / 2
            and abs(a.y - b.y) < (a.spec.width_y + b.spec.width_y) / 2)


def covers_point(b: Block, x: float, y: float) -> bool:
    return abs(x - b.x) <= b.spec.length_x / 2 and abs(y - b.y) <= b.spec.width_y / 2


def _snap(v: float) -> float:
    return round(v / GRID) * GRID


def spawn_scene(n: int, rng: np.random.Generator) -> WorldState:
    if not 2 <= n <= 4:
        raise ValueError(f"scene size must be 2..4, got {n}")
    blocks: list[Block] = []
    attempts = 0
    while len(blocks) < n:
        attempts += 1
        if attempts > MAX_SPAWN_ATTEMPTS:
            raise GenerationError(f"could not place {n} blocks after {MAX_SPAWN_ATTEMPTS} attempts")
        spec = KINDS[int(rng.integers(2))]
        x, y = (_snap(v) for v in rng.uniform(-SPAWN_HALF_EXTENT, SPAWN_HALF_EXTENT, size=2))
        cand = Block(spec, x, y, spec.height_z / 2)
        if all(np.hypot(cand.x - b.x, cand.y - b.y) >= MIN_SEPARATION
               and not footprints_overlap(cand, b) for b in blocks):
            blocks.append(cand)
    return WorldState(tuple(blocks))


def random_action(n: int, rng: np.random.Generator) -> ActionSpec:
    g = int(rng.integers(n))
    t = int(rng.integers(n - 1))
    t += t >= g
    return ActionSpec(g, OFFSETS[int(rng.integers(3))], t, OFFSETS[int(rng.integers(3))])


def settle(state: WorldState, held: int | None = None) -> WorldState:
    """Drop every block (except ``held``) onto the highest surface under its footprint."""
    order = sorted((i for i in range(len(state)) if i != held),
                   key=lambda i: (state.blocks[i].base, i))
    blocks = list(state.blocks)
    placed: list[int] = []
    for i in order:
        b = blocks[i]
        support = max((blocks[j].top for j in placed if footprints_overlap(b, blocks[j])),
                      default=0.0)
        if support != b.base:
            blocks[i] = replace(b, z=support + b.spec.height_z / 2)
        placed.append(i)
    return WorldState(tuple(blocks))


def is_settled(state: WorldState) -> bool:
    return settle(state) == state


def grasp_success(state: WorldState, grasp_index: int, grasp_offset: float) -> bool:
    g = state.blocks[grasp_index]
    if abs(grasp_offset) > g.spec.length_x / 2:
        return False
    gx, gy = g.x + grasp_offset, g.y
    return not any(covers_point(b, gx, gy) and b.z > g.z
                   for j, b in enumerate(state.blocks) if j != grasp_index)


def carry_height(spec: BlockSpec) -> float:
    return CARRY_CLEARANCE + spec.height_z / 2


def execute(state: WorldState, action: ActionSpec) -> tuple[WorldState, np.ndarray]:
    """Run one pick-and-place; returns the next state and an n x 6 effect array.

    Columns 0-2 hold the pick-phase displacement, 3-5 the release-phase one.
    """
    n = len(state)
    action.validate(n)
    if not is_settled(state):
        raise SimulationError("execute requires a settled state")
    effects = np.zeros((n, 6))
    gi = action.grasp_index
    if not grasp_success(state, gi, action.grasp_offset):
        return state, effects

    g = state.blocks[gi]
    lifted = replace(g, z=carry_height(g.spec))
    after_pick = settle(state.with_block(gi, lifted), held=gi)
    effects[:, :3] = after_pick.positions() - state.positions()

    target = after_pick.blocks[action.target_index]
    placed = replace(lifted, x=target.x + action.release_offset, y=target.y)
    released = settle(after_pick.with_block(gi, placed))
    effects[gi, 3:] = np.subtract(released.blocks[gi].pos, placed.pos)
    return released, effects


def relative_features(state: WorldState, action: ActionSpec) -> np.ndarray:
    """Per object: [is_short, is_long, dx, dy, dz, is_target] relative to the grasped block."""
    g = state.blocks[action.grasp_index]
    rows = []
    for i, b in enumerate(state.blocks):
        rows.append([float(b.spec is SHORT), float(b.spec is LONG),
                     b.x - g.x, b.y - g.y, b.z - g.z, float(i == action.target_index)])
    return np.array(rows, dtype=np.float64)


def check_invariants(state: WorldState) -> list[str]:
    """Return human-readable violations of support, non-penetration and z >= 0."""
    problems = []
    blocks = state.blocks
    for i, b in enumerate(blocks):
        if b.base < 0:
            problems.append(f"block {i} below table (base {b.base})")
        below = [o.top for j, o in enumerate(blocks)
                 if j != i and footprints_overlap(b, o) and o.top <= b.base]
        if b.base != max(below, default=0.0):
            problems.append(f"block {i} unsupported (base {b.base})")
        for j in range(i + 1, len(blocks)):
            o = blocks[j]
            if footprints_overlap(b, o) and b.base < o.top and o.base < b.top:
                problems.append(f"blocks {i} and {j} interpenetrate")
    return problems
