"""Task families with ground-truth hierarchy: gated four-room, binary trees, counterexamples."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .mdp import TabularMDP, tv_distance

UP, RIGHT, DOWN, LEFT = 0, 1, 2, 3
MOVES = {UP: (-1, 0), RIGHT: (0, 1), DOWN: (1, 0), LEFT: (0, -1)}
LATERAL = {UP: (LEFT, RIGHT), DOWN: (LEFT, RIGHT), LEFT: (UP, DOWN), RIGHT: (UP, DOWN)}


@dataclass
class LatentHierarchy:
    cluster_of: np.ndarray          # (S,) cluster id per state
    entrances: set[int]
    exits: set[tuple[int, int]]

    def __post_init__(self):
        self.cluster_of = np.asarray(self.cluster_of, dtype=np.int64)
        self.entrances = {int(s) for s in self.entrances}
        self.exits = {(int(s), int(a)) for s, a in self.exits}
        S = len(self.cluster_of)
        for s in self.entrances:
            if not 0 <= s < S:
                raise ValueError(f"entrance {s} out of range")
        for s, a in self.exits:
            if not 0 <= s < S:
                raise ValueError(f"exit state {s} out of range")

    @property
    def num_clusters(self) -> int:
        return int(self.cluster_of.max()) + 1

    def members(self, c: int) -> np.ndarray:
        return np.flatnonzero(self.cluster_of == c)

    def cluster_entrances(self, c: int) -> set[int]:
        return {s for s in self.entrances if self.cluster_of[s] == c}

    def cluster_exits(self, c: int) -> set[tuple[int, int]]:
        return {e for e in self.exits if self.cluster_of[e[0]] == c}

    @property
    def K(self) -> int:
        return len(self.exits)

    @property
    def L(self) -> int:
        return len(self.entrances)

    @property
    def M(self) -> int:
        return max((len(self.cluster_exits(c)) for c in range(self.num_clusters)), default=0)

    def exit_mask(self, num_actions: int) -> np.ndarray:
        m = np.zeros((len(self.cluster_of), num_actions), dtype=bool)
        for s, a in self.exits:
            m[s, a] = True
        return m


@dataclass
class TaskFamily:
    tasks: list[TabularMDP]
    hierarchy: LatentHierarchy
    beta: float
    labels: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.tasks:
            raise ValueError("a family needs at least one task")
        t0 = self.tasks[0]
        for t in self.tasks[1:]:
            if (t.num_states, t.num_actions, t.horizon, t.start_state) != (
                    t0.num_states, t0.num_actions, t0.horizon, t0.start_state):
                raise ValueError("tasks must share (S, A, H, s0)")

    @property
    def T(self) -> int:
        return len(self.tasks)

    @property
    def num_states(self) -> int:
        return self.tasks[0].num_states

    @property
    def num_actions(self) -> int:
        return self.tasks[0].num_actions

    @property
    def horizon(self) -> int:
        return self.tasks[0].horizon


def exit_separation(tasks: Sequence[TabularMDP], exits) -> float:
    """Minimum TV over exits and task pairs whose rows differ (inf when nothing differs)."""
    beta = np.inf
    for s, a in exits:
        rows = [t.transitions[s, a] for t in tasks]
        for i in range(len(rows)):
            for j in range(i + 1, len(rows)):
                if not np.array_equal(rows[i], rows[j]):
                    beta = min(beta, tv_distance(rows[i], rows[j]))
    return float(beta)


# ---------------------------------------------------------------------------
# gated four-room
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FourRoomSpec:
    """One task of the gated four-room family.

    Rooms are the quadrants of a ``side`` x ``side`` grid cut by a one-cell wall row and
    column at index side // 2.  Gate k is a one-way passage from room k into room k+1
    (mod 4) around the ring TL(0) -> TR(1) -> BR(2) -> BL(3) -> TL; its position is a row
    (gates 0 and 2) or a column (gates 1 and 3) along the wall it crosses.  Moving
    against a gate's direction is a wall bump, as is using a closed gate.
    """

    side: int = 7
    gate_positions: tuple[int, int, int, int] | None = None
    gates_open: tuple[bool, bool, bool, bool] = (True, True, True, True)
    goal: tuple[int, int] = (0, 0)
    start: tuple[int, int] = (0, 0)
    slip: float = 0.0
    dummy_start: bool = False
    horizon: int = 20

    def geometry(self):
        return (self.side, self.resolved_gates(), self.slip, self.dummy_start, self.horizon)

    def resolved_gates(self) -> tuple[int, int, int, int]:
        w = self.side // 2
        if self.gate_positions is not None:
            return tuple(int(g) for g in self.gate_positions)
        lo = w // 2
        hi = w + 1 + (self.side - w - 1) // 2
        return (lo, hi, hi, lo)


class FourRoomLayout:
    """Cell indexing and gate geometry shared by every task of a family."""

    def __init__(self, side: int, gates: tuple[int, int, int, int], dummy_start: bool):
        if side < 5:
            raise ValueError("side must be >= 5")
        self.side = side
        self.wall = w = side // 2
        self.dummy = dummy_start
        offset = 1 if dummy_start else 0
        self.cells = [(r, c) for r in range(side) for c in range(side) if r != w and c != w]
        self.index = {cell: i + offset for i, cell in enumerate(self.cells)}
        self.num_states = len(self.cells) + offset
        g0, g1, g2, g3 = gates
        if not (0 <= g0 < w and w < g1 < side and w < g2 < side and 0 <= g3 < w):
            raise ValueError(f"gate positions {gates} do not lie on their walls")
        # each gate: (source cell, action, landing cell)
        self.gates = [
            ((g0, w - 1), RIGHT, (g0, w + 1)),
            ((w - 1, g1), DOWN, (w + 1, g1)),
            ((g2, w + 1), LEFT, (g2, w - 1)),
            ((w + 1, g3), UP, (w - 1, g3)),
        ]

    def room(self, cell) -> int:
        r, c = cell
        w = self.wall
        if r < w:
            return 0 if c < w else 1
        return 2 if c > w else 3

    def gate_pairs(self):
        """[(gate k, state, action, landing state)]."""
        return [(k, self.index[src], a, self.index[dst]) for k, (src, a, dst) in enumerate(self.gates)]

    def step(self, cell, action):
        """In-room move; leaving the room (or the grid) bumps back to ``cell``."""
        dr, dc = MOVES[action]
        nxt = (cell[0] + dr, cell[1] + dc)
        if nxt not in self.index or self.room(nxt) != self.room(cell):
            return cell
        return nxt


def _four_room_task(spec: FourRoomSpec, layout: FourRoomLayout) -> TabularMDP:
    S, A = layout.num_states, 4
    P = np.zeros((S, A, S))
    R = np.zeros((S, A))
    for cell in layout.cells:
        s = layout.index[cell]
        for a in range(A):
            P[s, a, layout.index[layout.step(cell, a)]] += 1.0 - spec.slip
            for lat in LATERAL[a]:
                P[s, a, layout.index[layout.step(cell, lat)]] += spec.slip / 2
    for k, s, a, land in layout.gate_pairs():
        P[s, a] = 0.0
        P[s, a, land if spec.gates_open[k] else s] = 1.0
    if spec.goal not in layout.index:
        raise ValueError(f"goal {spec.goal} is not a room cell")
    if spec.start not in layout.index:
        raise ValueError(f"start {spec.start} is not a room cell")
    R[layout.index[spec.goal]] = 1.0
    if layout.dummy:
        P[0] = 0.0
        P[0, 1:, 0] = 1.0
        P[0, 0, layout.index[spec.start]] = 1.0
        s0 = 0
    else:
        s0 = layout.index[spec.start]
    return TabularMDP(P, R, spec.horizon, s0)


def make_four_room_family(specs: Sequence[FourRoomSpec]) -> TaskFamily:
    if not specs:
        raise ValueError("need at least one task spec")
    geo = specs[0].geometry()
    for sp in specs[1:]:
        if sp.geometry() != geo:
            raise ValueError("all four-room specs must share side, gates, slip, dummy flag and horizon")
    sp0 = specs[0]
    layout = FourRoomLayout(sp0.side, sp0.resolved_gates(), sp0.dummy_start)
    if not sp0.dummy_start and len({sp.start for sp in specs}) > 1:
        raise ValueError("per-task start cells need the dummy start state")
    for k in range(4):
        if len({sp.gates_open[k] for sp in specs}) < 2:
            raise ValueError(f"exit never varies: gate {k} has the same flag in every task")
    tasks = [_four_room_task(sp, layout) for sp in specs]
    hier = _four_room_hierarchy(layout, specs)
    labels = {"kind": "four-room", "layout": layout, "specs": list(specs)}
    return TaskFamily(tasks, hier, exit_separation(tasks, hier.exits), labels)


def _four_room_hierarchy(layout: FourRoomLayout, specs: Sequence[FourRoomSpec]) -> LatentHierarchy:
    sp0 = specs[0]
    cluster_of = np.zeros(layout.num_states, dtype=np.int64)
    for cell in layout.cells:
        cluster_of[layout.index[cell]] = layout.room(cell) + (1 if layout.dummy else 0)
    exits = {(s, a) for _, s, a, _ in layout.gate_pairs()}
    # a closed gate bumps in place, so both gate cells are entrances of their own rooms
    entrances = {s for _, s, _, _ in layout.gate_pairs()} | {d for _, _, _, d in layout.gate_pairs()}
    if layout.dummy:
        exits.add((0, 0))
        entrances.add(0)
        entrances |= {layout.index[sp.start] for sp in specs}
    else:
        entrances.add(layout.index[sp0.start])
    return LatentHierarchy(cluster_of, entrances, exits)


def four_room_target(side: int = 7, horizon: int = 60, goal=None, slip: float = 0.0):
    """Start in the top-left room, reward in the bottom-right room, every gate open.

    Returns (mdp, hierarchy, states of the rewarded room).
    """
    spec = FourRoomSpec(side=side, goal=goal or (side - 1, side - 1), start=(0, 0), slip=slip,
                        horizon=horizon)
    layout = FourRoomLayout(side, spec.resolved_gates(), False)
    if layout.room(spec.goal) != 2:
        raise ValueError("the goal must lie in the bottom-right room")
    mdp = _four_room_task(spec, layout)
    hier = _four_room_hierarchy(layout, [spec])
    room = {layout.index[c] for c in layout.cells if layout.room(c) == 2}
    return mdp, hier, room


BENCHMARK_TASKS = (
    # (start cell, goal cell, closed gate or None) on the side-8 grid
    ((0, 0), (7, 0), None),
    ((0, 0), (7, 0), 1),
    ((0, 7), (7, 0), 2),
    ((7, 0), (0, 0), 0),
    ((7, 3), (0, 0), 3),
    ((0, 0), (0, 7), 0),
)


def four_room_benchmark(horizon: int = 30, slip: float = 0.0) -> TaskFamily:
    """Six deterministic tasks on the side-8 grid with a dummy start.

    Task 0 keeps every gate open.  Every gate closes in some task that needs it and
    opens in a task whose only route uses it, so each exit is both important somewhere
    and worth borrowing somewhere.
    """
    specs = []
    for start, goal, closed in BENCHMARK_TASKS:
        flags = tuple(k != closed for k in range(4))
        specs.append(FourRoomSpec(side=8, gates_open=flags, goal=goal, start=start, slip=slip,
                                  dummy_start=True, horizon=horizon))
    return make_four_room_family(specs)


# ---------------------------------------------------------------------------
# binary trees
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BinaryTreeSpec:
    W: int
    leaf: str            # binary string of length W - 1
    leaf_action: int     # a*
    gate_exit: int       # e*
    eps: float = 0.1
    horizon: int | None = None

    @property
    def H(self) -> int:
        return 3 * self.W + 3 if self.horizon is None else self.horizon

    def validate(self) -> None:
        if self.W < 2:
            raise ValueError("W must be >= 2")
        if self.H < 3 * self.W:
            raise ValueError("H must be >= 3W")
        if not 0 < self.eps <= 0.5:
            raise ValueError("eps must lie in (0, 1/2]")
        if len(self.leaf) != self.W - 1 or set(self.leaf) - {"0", "1"}:
            raise ValueError(f"leaf must be a binary string of length {self.W - 1}")
        if self.leaf_action not in (0, 1) or self.gate_exit not in (0, 1):
            raise ValueError("leaf action and gate exit are binary")


def tree_indices(W: int) -> dict:
    """root 0; tree nodes 1 .. 2^W - 1 in heap order (empty string at 1); then gate,
    trap and the two terminal sinks."""
    n = 2 ** W
    return {"root": 0, "gate": n, "trap": n + 1, "sink_success": n + 2, "sink_fail": n + 3,
            "first_leaf": n // 2}


def make_binary_tree_mdp(spec: BinaryTreeSpec, variant: str = "full"):
    """``variant`` is 'full' (with success/fail sinks behind the gate) or 'reduced'."""
    spec.validate()
    if variant not in ("full", "reduced"):
        raise ValueError("variant is 'full' or 'reduced'")
    W, H, eps = spec.W, spec.H, spec.eps
    ix = tree_indices(W)
    n = 2 ** W
    S = n + 4 if variant == "full" else n + 2
    P = np.zeros((S, 2, S))
    R = np.zeros((S, 2))
    gate, trap = ix["gate"], ix["trap"]
    star = ix["first_leaf"] + int(spec.leaf, 2)
    P[0, :, 1] = 1.0
    for i in range(1, n):
        for a in (0, 1):
            if i < ix["first_leaf"]:
                P[i, a, 2 * i + a] = 1.0
            else:
                p = 0.5 + (eps if (i == star and a == spec.leaf_action) else 0.0)
                P[i, a, gate] = p
                P[i, a, trap] = 1.0 - p
    P[trap, :, trap] = 1.0
    term = np.zeros(S, dtype=bool)
    term[trap] = True
    if variant == "full":
        ok, bad = ix["sink_success"], ix["sink_fail"]
        for a in (0, 1):
            P[gate, a, ok if a == spec.gate_exit else bad] = 1.0
        P[ok, :, ok] = 1.0
        P[bad, :, bad] = 1.0
        R[ok] = 1.0
        R[gate, spec.leaf_action] = 1.0
        term[[ok, bad]] = True
        cluster_of = np.zeros(S, dtype=np.int64)
        cluster_of[ok], cluster_of[bad] = 1, 2
        hier = LatentHierarchy(cluster_of, {0, ok, bad}, {(gate, 0), (gate, 1)})
    else:
        P[gate, :, gate] = 1.0
        R[gate] = 1.0
        term[gate] = True
        hier = LatentHierarchy(np.zeros(S, dtype=np.int64), {0}, set())
    return TabularMDP(P, R, H, 0, term), hier


def binary_tree_family(W: int, leaf: str, leaf_action: int, eps: float = 0.1, horizon=None) -> TaskFamily:
    """The two tasks sharing (leaf, leaf action) and differing in the gate exit."""
    mdps, hier = [], None
    for e in (0, 1):
        m, hier = make_binary_tree_mdp(BinaryTreeSpec(W, leaf, leaf_action, e, eps, horizon))
        mdps.append(m)
    exits = hier.exits
    return TaskFamily(mdps, hier, exit_separation(mdps, exits), {"kind": "binary-tree"})


# ---------------------------------------------------------------------------
# counterexamples
# ---------------------------------------------------------------------------

def make_counterexample_env(kind: str, H: int = 16):
    """'chain': high-variance shortcut chain (horizon H+2).  'two-arm': corridor room (horizon H)."""
    if kind == "chain":
        # s_i = i, t_i = H+1+i, s* = 2H+2; action 0 is the risky shortcut, 1 the safe step
        S = 2 * H + 3
        star = 2 * H + 2
        P = np.zeros((S, 2, S))
        R = np.zeros((S, 2))
        for i in range(H):
            P[i, 0, i + 1] = 0.5
            P[i, 0, H + 1 + i] = 0.5
            P[i, 1, i + 1] = 1.0
        P[H, 0, 2 * H + 1] = 1.0
        P[H, 1, 0] = 1.0
        for i in range(H + 1):
            P[H + 1 + i, :, star] = 1.0
        P[star, :, star] = 1.0
        R[star] = 1.0
        cluster_of = np.zeros(S, dtype=np.int64)
        cluster_of[star] = 1
        exits = {(H + 1 + i, a) for i in range(H + 1) for a in (0, 1)}
        hier = LatentHierarchy(cluster_of, {0, star}, exits)
        term = np.zeros(S, dtype=bool)
        term[star] = True
        return TabularMDP(P, R, H + 2, 0, term), hier
    if kind == "two-arm":
        if H % 2 or H < 4:
            raise ValueError("two-arm room needs an even H >= 4")
        half = H // 2
        # s0 = 0, l_i = i, r_i = half + i, t = H + 1, G = H + 2; actions red, blue, purple
        S = H + 3
        t, G = H + 1, H + 2
        P = np.zeros((S, 3, S))
        R = np.zeros((S, 3))
        P[0, 0, 1] = 1.0
        P[0, 1, half + 1] = 1.0
        P[0, 2, t] = 1.0
        for i in range(1, half):
            P[i, :, i + 1] = 1.0
            P[half + i, :, half + i + 1] = 1.0
        P[half, :, G] = 1.0
        P[H, :, G] = 1.0
        P[t, :, half] = 0.5
        P[t, :, H] = 0.5
        P[G, :, G] = 1.0
        R[G] = 1.0
        R[half] = 1.0
        R[H] = 1.0
        cluster_of = np.zeros(S, dtype=np.int64)
        cluster_of[G] = 1
        exits = {(half, a) for a in range(3)} | {(H, a) for a in range(3)}
        term = np.zeros(S, dtype=bool)
        term[G] = True
        return TabularMDP(P, R, H, 0, term), LatentHierarchy(cluster_of, {0, G}, exits)
    raise ValueError(f"unknown counterexample {kind!r}")
