"""Learning on top of a hierarchy: the exit-level surrogate MDP, meta-transitions,
the optimistic surrogate learner, meta-histories and the binary-tree separation run."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .envs import BinaryTreeSpec, LatentHierarchy, make_binary_tree_mdp, tree_indices
from .learners import LearnerBudget, OptimisticLearner, run_ucbvi
from .mdp import Policy, TabularMDP, Trajectory, policy_value, rng_stream, value_iteration
from .oracle import HierarchyOracle

STOP = "stop"


@dataclass
class MetaTestConfig:
    H_eff: int
    W: int
    gamma: float = 0.0
    beta: float = 0.0            # sub-Gaussian scale of the execution time
    zeta: float = 0.5            # failure mass of the time cap
    eps: float = 0.0             # oracle suboptimality
    num_episodes: int = 1000
    h_bar: int | None = None     # explicit time cap; otherwise from the formula
    enforce_width: bool = True
    bonus_scale: float = 0.01
    confidence: float = 0.05

    def __post_init__(self):
        if self.H_eff < 1 or self.W < 1:
            raise ValueError("H_eff and W must be positive")
        if self.gamma < 0 or self.beta < 0 or self.eps < 0:
            raise ValueError("gamma, beta and eps must be nonnegative")
        if not 0 < self.zeta < 1:
            raise ValueError("zeta must lie in (0, 1)")
        if self.num_episodes < 0:
            raise ValueError("num_episodes must be nonnegative")

    def time_cap(self, H: int) -> int:
        if self.h_bar is not None:
            cap = self.h_bar
        else:
            step = (1 + self.gamma) * self.W + self.eps
            cap = self.H_eff * (1 + step) + self.beta * step * math.sqrt(
                2 * self.H_eff * math.log(1 / self.zeta))
        return int(min(H, math.ceil(cap)))

    def check(self, H: int) -> None:
        if self.enforce_width and 3 * self.H_eff * self.W > H:
            raise ValueError(f"H_eff * W = {self.H_eff * self.W} exceeds H / 3 = {H / 3:.3g}")


# ---------------------------------------------------------------------------
# base-MDP session
# ---------------------------------------------------------------------------

class BaseSession:
    """One live episode of the base MDP, stepped by meta-transitions."""

    def __init__(self, mdp: TabularMDP, rng: np.random.Generator):
        self.mdp = mdp
        self.rng = rng
        self.cdf = mdp.cdf
        self.state = mdp.start_state
        self.t = 0
        self.states = [self.state]
        self.actions: list[int] = []
        self.rewards: list[float] = []

    @property
    def finished(self) -> bool:
        return self.t >= self.mdp.horizon

    def step(self, a: int) -> float:
        r = float(self.mdp.rewards[self.state, a])
        nxt = int(np.searchsorted(self.cdf[self.state, a], self.rng.random(), side="right"))
        self.state = min(nxt, self.mdp.num_states - 1)
        self.t += 1
        self.states.append(self.state)
        self.actions.append(int(a))
        self.rewards.append(r)
        return r

    def run(self, table, offset: int, until: int, pair=None) -> tuple[float, bool]:
        """Follow table[t - offset] until time ``until`` or right after performing ``pair``."""
        total = 0.0
        while self.t < min(until, self.mdp.horizon):
            s = self.state
            a = int(table[self.t - offset, s])
            total += self.step(a)
            if pair is not None and (s, a) == pair:
                return total, True
        return total, False

    def trajectory(self) -> Trajectory:
        return Trajectory(np.array(self.states), np.array(self.actions), np.array(self.rewards))


# ---------------------------------------------------------------------------
# surrogate MDP
# ---------------------------------------------------------------------------

def _propagate(P, R, table, offset, rho, t0, t1, pair=None):
    """Exact forward pass of ``rho`` (mass at time t0) under table[t - offset] until t1.

    Returns (expected reward, mass left at t1, [(t + 1, landing mass)] for ``pair``).
    """
    S = P.shape[0]
    total = 0.0
    landed = []
    idx = np.arange(S)
    for t in range(t0, t1):
        if rho.sum() <= 0:
            break
        a = table[t - offset, :S]
        total += float(rho @ R[idx, a])
        nxt = rho @ P[idx, a]
        if pair is not None:
            gs, ga = pair
            if a[gs] == ga and rho[gs] > 0:
                land = rho[gs] * P[gs, ga]
                nxt = nxt - land
                landed.append((t + 1, land))
        rho = np.maximum(nxt, 0.0)
    return total, rho, landed


class SurrogateMDP:
    """Meta-states are (entrance, time) pairs up to the time cap plus one, and a stop
    state; meta-actions are the flagged exits plus stop."""

    def __init__(self, mdp: TabularMDP, oracle: HierarchyOracle, target_cluster, cfg: MetaTestConfig):
        cfg.check(mdp.horizon)
        if oracle.horizon != mdp.horizon or oracle.S != mdp.num_states:
            raise ValueError("oracle and target MDP disagree on shape or horizon")
        self.mdp = mdp
        self.oracle = oracle
        self.cfg = cfg
        self.H = mdp.horizon
        self.h_bar = cfg.time_cap(self.H)
        self.meta_horizon = cfg.H_eff + 1
        self.target = frozenset(int(s) for s in target_cluster)
        self.entrances = sorted(oracle.entrances)
        self._eidx = {s: i for i, s in enumerate(self.entrances)}
        self.exits = list(oracle.exits)
        self._xidx = {e: i for i, e in enumerate(self.exits)}
        self.width = self.h_bar + 2
        self.num_states = len(self.entrances) * self.width + 1
        self.num_actions = len(self.exits) + 1
        self.stop_state = self.num_states - 1
        self.stop_action = self.num_actions - 1
        if mdp.start_state not in self._eidx:
            raise ValueError("the start state must be an entrance")
        self._check_support()
        self._model: dict = {}
        self._wc: dict = {}

    def _check_support(self) -> None:
        R = self.mdp.rewards
        exits = set(self.exits)
        bad = [(int(s), int(a)) for s, a in zip(*np.nonzero(R > 0))
               if int(s) not in self.target and (int(s), int(a)) not in exits]
        if bad:
            raise ValueError(f"incompatible reward support: {bad[:5]} lie outside the target "
                             "cluster and are not exits")

    # -- indexing ----------------------------------------------------------

    def encode(self, s: int, h: int) -> int:
        if s not in self._eidx:
            raise ValueError(f"state {s} is not an entrance")
        if not 0 <= h <= self.h_bar + 1:
            raise ValueError(f"time {h} outside [0, {self.h_bar + 1}]")
        return self._eidx[s] * self.width + h

    def decode(self, z: int):
        if z == self.stop_state:
            return STOP
        i, h = divmod(z, self.width)
        return self.entrances[i], h

    def action_of(self, g: int):
        return STOP if g == self.stop_action else self.exits[g]

    @property
    def start(self) -> int:
        return self.encode(self.mdp.start_state, 0)

    def mask(self) -> np.ndarray:
        m = np.zeros((self.num_states, self.num_actions), dtype=bool)
        m[:, self.stop_action] = True
        for s in self.entrances:
            avail = [self._xidx[e] for e in self.oracle.available_exits(s)]
            for h in range(self.width):
                m[self.encode(s, h), avail] = True
        return m

    def within_cluster(self, s: int, h: int):
        return self.oracle.within_cluster(s, self.mdp.rewards, h)

    # -- exact model -------------------------------------------------------

    def _tail(self, s: int, h: int, rho, t0: int) -> float:
        """Expected within-cluster reward from mass ``rho`` at time t0, policy from (s, h)."""
        res = self.within_cluster(s, h)
        P, R = self.mdp.transitions, self.mdp.rewards
        return _propagate(P, R, res.table, h, rho, t0, self.H)[0]

    def idle_value(self, z: int) -> float:
        """Reward of finishing the episode inside the cluster once meta-steps run out."""
        d = self.decode(z)
        if d == STOP or d[1] > self.h_bar:
            return 0.0
        s, h = d
        key = ("idle", s, h)
        if key not in self._wc:
            rho = np.zeros(self.mdp.num_states)
            rho[s] = 1.0
            self._wc[key] = self._tail(s, h, rho, h)
        return self._wc[key]

    def transition(self, z: int, g: int):
        """Exact (next meta-state -> probability, expected meta-reward) of one meta-step."""
        key = (z, g)
        hit = self._model.get(key)
        if hit is not None:
            return hit
        d = self.decode(z)
        if d == STOP:
            out = ({self.stop_state: 1.0}, 0.0)
        else:
            s, h = d
            if h > self.h_bar:
                out = ({self.stop_state: 1.0}, 0.0) if g == self.stop_action else ({z: 1.0}, 0.0)
            elif g == self.stop_action or s in self.target:
                out = ({self.stop_state: 1.0}, self.idle_value(z))
            else:
                e = self.exits[g]
                res = self.oracle.goal_reaching(s, e, h)
                P, R = self.mdp.transitions, self.mdp.rewards
                rho = np.zeros(self.mdp.num_states)
                rho[s] = 1.0
                reward, left, landed = _propagate(P, R, res.table, h, rho, h, self.h_bar, pair=e)
                nxt: dict = {}
                for t, mass in landed:
                    for s2 in np.flatnonzero(mass > 0):
                        z2 = self.encode(int(s2), t)
                        nxt[z2] = nxt.get(z2, 0.0) + float(mass[s2])
                stay = float(left.sum())
                if stay > 0:
                    reward += self._tail(s, h, left, self.h_bar)
                    z2 = self.encode(s, self.h_bar + 1)
                    nxt[z2] = nxt.get(z2, 0.0) + stay
                out = (nxt, reward)
        self._model[key] = out
        return out

    def exact_value(self, table) -> float:
        """Exact expected base return of a meta-policy table (meta_horizon, num_states)."""
        dist = {self.start: 1.0}
        total = 0.0
        for m in range(self.meta_horizon):
            nxt: dict = {}
            for z, p in dist.items():
                probs, r = self.transition(z, int(table[m, z]))
                total += p * r
                for z2, q in probs.items():
                    nxt[z2] = nxt.get(z2, 0.0) + p * q
            dist = nxt
        return total + sum(p * self.idle_value(z) for z, p in dist.items())

    def best_value(self) -> float:
        """Optimal surrogate value, by backward recursion over reachable meta-states."""
        mask = self.mask()
        memo: dict = {}

        def value(m: int, z: int) -> float:
            if m == self.meta_horizon:
                return self.idle_value(z)
            key = (m, z)
            if key not in memo:
                best = -np.inf
                for g in np.flatnonzero(mask[z]):
                    probs, r = self.transition(z, int(g))
                    best = max(best, r + sum(q * value(m + 1, z2) for z2, q in probs.items()))
                memo[key] = best
            return memo[key]

        return value(0, self.start)


def perform_meta_transition(session: BaseSession, sur: SurrogateMDP, z: int, g: int):
    """Execute meta-action g from meta-state z in the live episode.

    Returns (next meta-state, meta-reward).
    """
    d = sur.decode(z)
    if d == STOP:
        return sur.stop_state, 0.0
    s, h = d
    if h > sur.h_bar:
        # stalled: the episode has already been played out
        return (sur.stop_state if g == sur.stop_action else z), 0.0
    if session.state != s or session.t != h:
        raise RuntimeError(f"session at ({session.state}, {session.t}) but meta-state is ({s}, {h})")
    if g == sur.stop_action or s in sur.target:
        res = sur.within_cluster(s, h)
        r, _ = session.run(res.table, h, sur.H)
        return sur.stop_state, r
    e = sur.exits[g]
    res = sur.oracle.goal_reaching(s, e, h)
    r, done = session.run(res.table, h, sur.h_bar, pair=e)
    if done:
        return sur.encode(session.state, session.t), r
    tail = sur.within_cluster(s, h)
    r2, _ = session.run(tail.table, h, sur.H)
    return sur.encode(s, sur.h_bar + 1), r + r2


# ---------------------------------------------------------------------------
# surrogate learner
# ---------------------------------------------------------------------------

@dataclass
class HierarchyRun:
    regret: np.ndarray          # (N,) exact per-episode regret
    values: np.ndarray          # (N,) exact value of the played meta-policy
    returns: np.ndarray         # (N,) realized base returns
    meta_returns: np.ndarray    # (N,) realized surrogate returns
    v_star: float
    timesteps: np.ndarray       # (N,) base steps per episode
    surrogate: SurrogateMDP | None = None
    tables: list = field(default_factory=list)

    @property
    def cumulative(self) -> np.ndarray:
        return np.cumsum(self.regret)


def run_hierarchy_learner(mdp: TabularMDP, oracle: HierarchyOracle, target_cluster,
                          cfg: MetaTestConfig, rng: np.random.Generator,
                          keep_tables: bool = False) -> HierarchyRun:
    """Bernstein-bonus optimistic learning over the surrogate with rewards scaled by 1/H."""
    sur = SurrogateMDP(mdp, oracle, target_cluster, cfg)
    N = cfg.num_episodes
    v_star = float(value_iteration(mdp)[0].V[0, mdp.start_state])
    out = HierarchyRun(np.zeros(N), np.zeros(N), np.zeros(N), np.zeros(N), v_star,
                       np.zeros(N, dtype=np.int64), sur)
    if N == 0:
        return out
    nS, nA, Hm = sur.num_states, sur.num_actions, sur.meta_horizon
    budget = LearnerBudget(N, cfg.bonus_scale, cfg.confidence)
    learner = OptimisticLearner(nS, nA, Hm, np.zeros((nS, nA)), budget, bernstein=True,
                                mask=sur.mask())
    rsum = np.zeros((nS, nA))
    values: dict = {}
    for i in range(N):
        learner.R = rsum / np.maximum(learner.counts.sum(-1), 1.0) / sur.H
        _, _, pi = learner.plan()
        session = BaseSession(mdp, rng)
        z = sur.start
        zs, gs, rs = [z], [], []
        for m in range(Hm):
            g = int(pi[m, z])
            z2, r = perform_meta_transition(session, sur, z, g)
            rsum[z, g] += r
            gs.append(g)
            rs.append(r)
            zs.append(z2)
            z = z2
        d = sur.decode(z)
        if d != STOP and not session.finished:
            s, h = d
            tail, _ = session.run(sur.within_cluster(s, h).table, h, sur.H)
            rs[-1] += tail
        learner.update(np.array([zs]), np.array([gs]))
        key = pi.tobytes()
        if key not in values:
            values[key] = sur.exact_value(pi)
        v = values[key]
        if v > v_star + 1e-9:
            raise AssertionError(f"meta-policy value {v} exceeds the optimum {v_star}")
        out.values[i] = v
        out.regret[i] = max(v_star - v, 0.0)
        out.returns[i] = sum(session.rewards)
        out.meta_returns[i] = sum(rs)
        out.timesteps[i] = session.t
        if keep_tables:
            out.tables.append(pi)
    return out


# ---------------------------------------------------------------------------
# meta-histories
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MetaHistory:
    entrances: tuple
    exits: tuple

    def __len__(self) -> int:
        return len(self.exits)

    def sequence(self) -> tuple:
        out = [self.entrances[0]]
        for g, z in zip(self.exits, self.entrances[1:]):
            out += [g, z]
        return tuple(out)


def extract_meta_history(traj: Trajectory, hierarchy: LatentHierarchy) -> MetaHistory:
    """Entrance, then each exit performed and the state it lands on."""
    zs = [int(traj.states[0])]
    gs = []
    i = 0
    n = len(traj)
    while i < n:
        j = next((k for k in range(i, n)
                  if (int(traj.states[k]), int(traj.actions[k])) in hierarchy.exits), None)
        if j is None:
            break
        gs.append((int(traj.states[j]), int(traj.actions[j])))
        zs.append(int(traj.states[j + 1]))
        i = j + 1
    return MetaHistory(tuple(zs), tuple(gs))


# ---------------------------------------------------------------------------
# separation on binary trees
# ---------------------------------------------------------------------------

def rewrite_history(states, actions, W: int, a_star: int):
    """Rewrite a tree episode so the gate behaves as if success sat behind action 1.

    Returns (states', rewards'): the gate step moves to the success sink on action 1
    and the failure sink otherwise, paying 1 when the action is a*; afterwards a step
    pays 1 while in the success sink.
    """
    ix = tree_indices(W)
    states = np.array(states, dtype=np.int64)
    actions = np.asarray(actions, dtype=np.int64)
    rewards = np.zeros(len(actions))
    after = None
    for h, a in enumerate(actions):
        s = states[h]
        if after is None and s == ix["gate"]:
            states[h + 1] = ix["sink_success"] if a == 1 else ix["sink_fail"]
            rewards[h] = float(a == a_star)
            after = states[h + 1]
        elif after is not None:
            states[h + 1] = after
            rewards[h] = float(after == ix["sink_success"])
    return states, rewards


def _table_value(mdp: TabularMDP, table) -> float:
    return float(policy_value(mdp, Policy.deterministic(table, mdp.num_actions)).V[0, mdp.start_state])


def separation_task(W: int, rng: np.random.Generator, eps: float = 0.1, horizon: int | None = None):
    """Draw the hidden leaf, its action and the gate exit uniformly."""
    leaf = "".join(str(b) for b in rng.integers(0, 2, size=W - 1))
    a_star = int(rng.integers(0, 2))
    e_star = int(rng.integers(0, 2))
    return BinaryTreeSpec(W, leaf, a_star, e_star, eps, horizon)


def run_separation_experiment(Ws, num_episodes: int, seeds, eps: float = 0.1,
                              root_seed: int = 0, bonus_scale: float = 0.01):
    """Flat optimistic learning, the hierarchy learner with an exact oracle, and the
    reduction of the flat learner to the gate-free tree, per (W, seed).

    Returns rows of dicts (W, learner, seed, regret, v_star) and per-episode curves.
    """
    rows, curves = [], {}
    for W in Ws:
        if W < 2:
            raise ValueError("W must be >= 2")
        for seed in seeds:
            rng = rng_stream(root_seed, "separation", W, seed)
            spec = separation_task(W, rng, eps)
            if spec.H < 3 * W:
                raise ValueError("H must be >= 3W")
            mdp, hier = make_binary_tree_mdp(spec)
            reduced, _ = make_binary_tree_mdp(spec, "reduced")
            ix = tree_indices(W)
            v_flat = float(value_iteration(mdp)[0].V[0, 0])
            v_red = float(value_iteration(reduced)[0].V[0, 0])
            pset = run_ucbvi(mdp, LearnerBudget(num_episodes, bonus_scale), rng_stream(root_seed, "flat", W, seed))
            flat, red = np.zeros(num_episodes), np.zeros(num_episodes)
            cache: dict = {}
            for i, table in enumerate(pset.tables):
                key = table.tobytes()
                if key not in cache:
                    cache[key] = (_table_value(mdp, table),
                                  _table_value(reduced, table[:, :ix["sink_success"]]))
                flat[i] = v_flat - cache[key][0]
                red[i] = v_red - cache[key][1]
            oracle = HierarchyOracle.from_ground_truth(mdp, hier)
            cfg = MetaTestConfig(H_eff=2, W=W + 2, num_episodes=num_episodes, h_bar=spec.H,
                                 enforce_width=False, bonus_scale=bonus_scale)
            hrun = run_hierarchy_learner(mdp, oracle, {ix["sink_success"]}, cfg,
                                         rng_stream(root_seed, "hierarchy", W, seed))
            for name, reg, vs in (("flat", flat, v_flat), ("hierarchy", hrun.regret, v_flat),
                                  ("reduction", red, v_red)):
                curves[(W, name, seed)] = np.cumsum(reg)
                rows.append({"W": W, "learner": name, "seed": seed, "regret": float(reg.sum()),
                             "v_star": vs})
    return rows, curves
