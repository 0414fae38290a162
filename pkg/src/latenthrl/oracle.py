"""Planning oracle over sealed clusters, exit availability, and reaching times."""
from __future__ import annotations

import threading
from collections import deque
from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .envs import LatentHierarchy
from .mdp import Policy, TabularMDP

SUCCESS, FAILURE = 0, 1


@dataclass(frozen=True)
class OracleQuery:
    start: int
    exit_map: tuple          # ((s, a), SUCCESS | FAILURE) for every flagged exit, sorted
    reward: np.ndarray       # (S + 2, A); the two trailing rows are the success and failure sinks
    horizon: int

    def key(self):
        return (self.start, self.exit_map, hash(self.reward.tobytes()), self.horizon)


@dataclass(frozen=True)
class OracleResult:
    table: np.ndarray        # (horizon, S + 2) greedy actions
    values: np.ndarray       # (horizon + 1, S + 2)
    value: float             # value at the query's start

    @property
    def horizon(self) -> int:
        return self.table.shape[0]

    def action(self, k: int, s: int) -> int:
        return int(self.table[k, s])

    def policy(self, num_states: int, num_actions: int) -> Policy:
        """Deterministic policy on the first ``num_states`` states."""
        return Policy.deterministic(self.table[:, :num_states], num_actions)


class HierarchyOracle:
    """Exact planning on the reference model with flagged exits sealed by an exit map.

    Queried pairs on the exit map jump to a success or failure sink; every other pair
    follows the reference row.  Reference rows with no mass fall into the failure sink.
    Value ties go to the action least likely to reach the failure sink, so policies stay
    inside their cluster unless leaving pays.
    """

    def __init__(self, reference, exit_mask, entrances, horizon: int, eps0: float):
        P = np.asarray(reference, dtype=np.float64)
        if P.ndim != 3 or P.shape[0] != P.shape[2]:
            raise ValueError("reference must be an (S, A, S) kernel")
        S, A = P.shape[:2]
        if not 0 < eps0 <= 1:
            raise ValueError("eps0 must lie in (0, 1]")
        self.S, self.A = S, A
        self.horizon = int(horizon)
        self.eps0 = float(eps0)
        self.exit_mask = np.asarray(exit_mask, dtype=bool)
        self.exits = sorted((int(s), int(a)) for s, a in zip(*np.nonzero(self.exit_mask)))
        self.entrances = frozenset(int(s) for s in entrances)
        base = np.zeros((S + 2, A, S + 2))
        base[:S, :, :S] = P
        empty = P.sum(-1) <= 0
        base[:S][empty, S + FAILURE] = 1.0
        base[S:, :, :] = 0.0
        base[S + SUCCESS, :, S + SUCCESS] = 1.0
        base[S + FAILURE, :, S + FAILURE] = 1.0
        self._base = base
        self._memo: dict = {}
        self._avail: dict = {}
        self._lock = threading.Lock()

    # -- construction ------------------------------------------------------

    @classmethod
    def from_ground_truth(cls, mdp: TabularMDP, hierarchy: LatentHierarchy,
                          eps0: float | None = None) -> "HierarchyOracle":
        """Exact model and true exits; eps0 defaults to the in-cluster reachability floor."""
        if not mdp.stationary:
            raise ValueError("the oracle needs stationary dynamics")
        oracle = cls(mdp.transitions, hierarchy.exit_mask(mdp.num_actions), hierarchy.entrances,
                     mdp.horizon, 1.0)
        if eps0 is None:
            eps0 = reachability_floor(oracle, hierarchy)
        oracle.eps0 = float(eps0)
        return oracle

    @classmethod
    def from_meta_train(cls, state, start_state: int, horizon: int, eps0: float) -> "HierarchyOracle":
        """Phase II reference model with learned exit flags; entrances are the start state
        plus every state a learned exit row can land on."""
        if state.reference is None or state.exits is None:
            raise ValueError("the oracle needs the phase 2 model and the detected exits")
        entrances = {int(start_state)}
        for rows in state.exits.rows.values():
            entrances |= {int(s) for s in np.flatnonzero(np.asarray(rows).sum(0) > 0)}
        return cls(state.reference.estimate(), state.exits.is_exit, entrances, horizon, eps0)

    # -- queries -----------------------------------------------------------

    def exit_map(self, success=()) -> tuple:
        """Total exit map sending ``success`` exits to the success sink and the rest to failure."""
        ok = {tuple(int(x) for x in e) for e in success}
        unknown = ok - set(self.exits)
        if unknown:
            raise ValueError(f"exit map names unflagged pairs {sorted(unknown)}")
        return tuple((e, SUCCESS if e in ok else FAILURE) for e in self.exits)

    def pad_reward(self, reward) -> np.ndarray:
        r = np.asarray(reward, dtype=np.float64)
        if r.shape == (self.S + 2, self.A):
            return r
        if r.shape != (self.S, self.A):
            raise ValueError(f"reward must be ({self.S}, {self.A}) or padded with the two sinks")
        out = np.zeros((self.S + 2, self.A))
        out[:self.S] = r
        return out

    def query(self, start: int, success=(), reward=None, horizon: int | None = None) -> OracleQuery:
        r = np.zeros((self.S + 2, self.A)) if reward is None else self.pad_reward(reward)
        return OracleQuery(int(start), self.exit_map(success), r,
                           self.horizon if horizon is None else int(horizon))

    def sealed_kernel(self, exit_map) -> np.ndarray:
        P = self._base.copy()
        for (s, a), outcome in exit_map:
            if not self.exit_mask[s, a]:
                raise ValueError(f"({s},{a}) is not a flagged exit")
            P[s, a] = 0.0
            P[s, a, self.S + outcome] = 1.0
        return P

    def solve(self, query: OracleQuery) -> OracleResult:
        if query.start not in self.entrances:
            raise ValueError(f"state {query.start} is not a known entrance")
        if not 0 <= query.horizon <= self.horizon:
            raise ValueError(f"query horizon {query.horizon} outside [0, {self.horizon}]")
        mapped = {e for e, _ in query.exit_map}
        if mapped != set(self.exits):
            raise ValueError("the exit map must cover exactly the flagged exits")
        key = query.key()
        with self._lock:
            hit = self._memo.get(key)
        if hit is not None:
            return hit
        P = self.sealed_kernel(query.exit_map)
        if query.horizon == 0:
            res = OracleResult(np.zeros((0, self.S + 2), dtype=np.int64), np.zeros((1, self.S + 2)), 0.0)
        else:
            Q, V, _ = K.backward_induction(P, query.reward, query.horizon)
            pi = self._committed(P, Q, V)
            res = OracleResult(pi, V, float(V[0, query.start]))
        with self._lock:
            self._memo[key] = res
        return res

    def _committed(self, P, Q, V) -> np.ndarray:
        """Greedy actions that, among value ties, least often fall into the failure sink."""
        H = Q.shape[0]
        n = self.S + 2
        fail = np.zeros(n)
        fail[self.S + FAILURE] = 1.0
        pi = np.zeros((H, n), dtype=np.int64)
        for h in range(H - 1, -1, -1):
            risk = P @ fail
            tied = Q[h] >= V[h][:, None] - K.TIE_TOL
            risk = np.where(tied, risk, np.inf)
            pi[h] = np.argmin(risk, axis=1)
            fail = risk[np.arange(n), pi[h]]
        return pi

    def goal_reaching(self, z: int, g, h: int) -> OracleResult:
        """Policy performing exit ``g`` as early as possible from entrance ``z`` at time h.

        The value is (H - h) minus the expected number of steps until g is performed.
        """
        g = (int(g[0]), int(g[1]))
        if g not in self.available_exits(z):
            raise ValueError(f"exit {g} is not available from entrance {z}")
        r = np.zeros((self.S + 2, self.A))
        r[self.S + SUCCESS] = 1.0
        return self.solve(OracleQuery(int(z), self.exit_map([g]), r, self.horizon - h))

    def within_cluster(self, z: int, reward, h: int) -> OracleResult:
        """Best in-cluster behaviour from z at time h with every exit sealed."""
        return self.solve(self.query(z, (), reward, self.horizon - h))

    def available_exits(self, s: int) -> frozenset:
        """Exits performable from entrance s with value at least two thirds of eps0."""
        s = int(s)
        with self._lock:
            hit = self._avail.get(s)
        if hit is not None:
            return hit
        if s not in self.entrances:
            raise ValueError(f"state {s} is not a known entrance")
        out = set()
        sealed = self.exit_map()
        for e in self.exits:
            r = np.zeros((self.S + 2, self.A))
            r[e] = 1.0
            if self.solve(OracleQuery(s, sealed, r, self.horizon)).value >= 2.0 * self.eps0 / 3.0:
                out.add(e)
        res = frozenset(out)
        with self._lock:
            self._avail[s] = res
        return res


def reachability_floor(oracle: HierarchyOracle, hierarchy: LatentHierarchy) -> float:
    """Smallest sealed probability of performing an exit of an entrance's own cluster."""
    floor = 1.0
    sealed = oracle.exit_map()
    for x in sorted(hierarchy.entrances):
        for e in sorted(hierarchy.cluster_exits(int(hierarchy.cluster_of[x]))):
            r = np.zeros((oracle.S + 2, oracle.A))
            r[e] = 1.0
            v = oracle.solve(OracleQuery(x, sealed, r, oracle.horizon)).value
            if v > 0:
                floor = min(floor, v)
    return floor


def expected_reaching_time(P, table, start: int, target, horizon: int) -> float:
    """Exact E[min(T, horizon)] under a deterministic table, where T is the first step at
    which the chain sits in ``target`` (a state) or has just performed it (a pair)."""
    P = np.asarray(P)
    S = P.shape[0]
    rho = np.zeros(S)
    rho[start] = 1.0
    pair = isinstance(target, tuple)
    total = 0.0
    for k in range(horizon):
        if not pair:
            rho[target] = 0.0
        alive = rho.sum()
        if alive <= 0:
            break
        total += alive
        a = table[k]
        nxt = np.einsum("s,st->t", rho, P[np.arange(S), a])
        if pair:
            gs, ga = target
            if a[gs] == ga:
                nxt -= rho[gs] * P[gs, ga]
        rho = nxt
    return float(total)


# ---------------------------------------------------------------------------
# reaching times
# ---------------------------------------------------------------------------

@dataclass
class ReachingTimeStats:
    t_min: int
    t_star: float
    horizon: int
    samples: np.ndarray | None = None

    @property
    def gamma(self) -> float:
        """Smallest gamma with T* <= (1 + gamma) T^min."""
        if self.t_min <= 0:
            return 0.0
        return max(0.0, self.t_star / self.t_min - 1.0)

    @property
    def mean_hier(self) -> float:
        if self.samples is None or not len(self.samples):
            return float("nan")
        return float(np.mean(self.samples))


def bfs_steps(P, start: int, target) -> int | None:
    """Fewest steps on the support graph to reach a state or perform a pair; None if never."""
    P = np.asarray(P)
    adj = P.sum(axis=1) > 0 if P.ndim == 3 else P.sum(axis=(0, 2)) > 0
    goal = target[0] if isinstance(target, tuple) else target
    dist = {start: 0}
    queue = deque([start])
    while queue:
        u = queue.popleft()
        if u == goal:
            break
        for v in np.flatnonzero(adj[u]):
            if int(v) not in dist:
                dist[int(v)] = dist[u] + 1
                queue.append(int(v))
    if goal not in dist:
        return None
    return dist[goal] + (1 if isinstance(target, tuple) else 0)


def reaching_times(mdp: TabularMDP, s: int, g, horizon: int | None = None) -> ReachingTimeStats:
    """Minimum and optimal expected reaching times from s to a state or pair g, clamped
    at the horizon."""
    H = mdp.horizon if horizon is None else int(horizon)
    P = mdp.transitions
    if not mdp.stationary:
        raise ValueError("reaching times need stationary dynamics")
    S, A = mdp.num_states, mdp.num_actions
    steps = bfs_steps(P, s, g)
    t_min = H if steps is None else min(steps, H)
    # one reward per step spent after arrival: T* = H - V*
    Q = np.zeros((S + 1, A, S + 1))
    Q[:S, :, :S] = P
    Q[S, :, S] = 1.0
    R = np.zeros((S + 1, A))
    R[S] = 1.0
    if isinstance(g, tuple):
        gs, ga = g
        Q[gs, ga] = 0.0
        Q[gs, ga, S] = 1.0
    else:
        Q[g] = 0.0
        Q[g, :, S] = 1.0
        R[g] = 1.0
    _, V, _ = K.backward_induction(Q, R, H)
    t_star = float(H - V[0, s])
    return ReachingTimeStats(int(t_min), float(np.clip(t_star, 0.0, H)), H)
