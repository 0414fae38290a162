"""Finite-horizon tabular MDPs: planning, evaluation, simulation and estimation."""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Iterator, Sequence

import numpy as np

from . import _kernels as K

ROW_TOL = 1e-9


# ---------------------------------------------------------------------------
# random streams and query accounting
# ---------------------------------------------------------------------------

def _key(k) -> int:
    if isinstance(k, (int, np.integer)):
        if k < 0:
            raise ValueError("stream keys must be non-negative")
        return int(k)
    return zlib.crc32(str(k).encode())


def rng_stream(root_seed: int, *keys) -> np.random.Generator:
    """Child generator for (root_seed, *keys); equal keys give equal streams."""
    ss = np.random.SeedSequence(int(root_seed), spawn_key=tuple(_key(k) for k in keys))
    return np.random.Generator(np.random.PCG64(ss))


class QueryCounter:
    """Environment timesteps, keyed by (task, phase). Monotone."""

    def __init__(self):
        self._counts: dict[tuple, int] = {}

    def add(self, steps: int, task=None, phase=None) -> None:
        if steps < 0:
            raise ValueError("timestep counts only grow")
        key = (task, phase)
        self._counts[key] = self._counts.get(key, 0) + int(steps)

    @property
    def total(self) -> int:
        return sum(self._counts.values())

    def by_phase(self) -> dict:
        out: dict = {}
        for (_, phase), n in self._counts.items():
            out[phase] = out.get(phase, 0) + n
        return out

    def by_task(self) -> dict:
        out: dict = {}
        for (task, _), n in self._counts.items():
            out[task] = out.get(task, 0) + n
        return out

    def items(self):
        return sorted(self._counts.items(), key=lambda kv: (str(kv[0][1]), str(kv[0][0])))

    def merge(self, other: "QueryCounter") -> None:
        for (task, phase), n in other._counts.items():
            self.add(n, task=task, phase=phase)


# ---------------------------------------------------------------------------
# core types
# ---------------------------------------------------------------------------

class TabularMDP:
    """Finite-horizon MDP with a stationary (S, A, S) or per-step (H, S, A, S) kernel."""

    def __init__(self, transitions, rewards, horizon: int, start_state: int = 0,
                 terminal_mask=None, renormalize: bool = True):
        P = np.array(transitions, dtype=np.float64)
        R = np.array(rewards, dtype=np.float64)
        if P.ndim not in (3, 4):
            raise ValueError("transitions must be (S, A, S) or (H, S, A, S)")
        S, A = P.shape[-3], P.shape[-2]
        if P.shape[-1] != S:
            raise ValueError("transition rows must have length S")
        if P.ndim == 4 and P.shape[0] != horizon:
            raise ValueError("per-step transitions need exactly H tables")
        if R.shape != (S, A):
            raise ValueError(f"rewards must be ({S}, {A}), got {R.shape}")
        if horizon < 1:
            raise ValueError("horizon must be >= 1")
        if not 0 <= start_state < S:
            raise ValueError("start state out of range")
        if np.any(P < 0):
            raise ValueError("negative transition probability")
        sums = P.sum(axis=-1)
        bad = np.abs(sums - 1.0) > ROW_TOL
        if np.any(bad):
            where = tuple(int(i) for i in np.argwhere(bad)[0])
            raise ValueError(f"transition row {where} sums to {sums[where]!r}")
        if renormalize:
            off = sums != 1.0
            if np.any(off):
                P[off] /= sums[off][..., None]
        if np.any(R < 0) or np.any(R > 1):
            raise ValueError("rewards must lie in [0, 1]")
        term = np.zeros(S, dtype=bool) if terminal_mask is None else np.array(terminal_mask, dtype=bool)
        if term.shape != (S,):
            raise ValueError("terminal mask must have length S")
        for s in np.flatnonzero(term):
            if not np.all(P[..., s, :, s] == 1.0):
                raise ValueError(f"terminal state {s} must self-loop under every action")
        P.setflags(write=False)
        R.setflags(write=False)
        term.setflags(write=False)
        self.transitions = P
        self.rewards = R
        self.horizon = int(horizon)
        self.start_state = int(start_state)
        self.terminal_mask = term

    @property
    def num_states(self) -> int:
        return self.transitions.shape[-3]

    @property
    def num_actions(self) -> int:
        return self.transitions.shape[-2]

    @property
    def stationary(self) -> bool:
        return self.transitions.ndim == 3

    @cached_property
    def cdf(self) -> np.ndarray:
        if not self.stationary:
            raise ValueError("rollouts need stationary dynamics")
        return K.sampling_cdf(self.transitions)

    def replace(self, transitions=None, rewards=None, horizon=None, start_state=None,
                terminal_mask=None) -> "TabularMDP":
        return TabularMDP(
            self.transitions if transitions is None else transitions,
            self.rewards if rewards is None else rewards,
            self.horizon if horizon is None else horizon,
            self.start_state if start_state is None else start_state,
            self.terminal_mask if terminal_mask is None else terminal_mask,
        )

    def with_horizon(self, horizon: int) -> "TabularMDP":
        return self.replace(horizon=horizon)

    def __eq__(self, other):
        if not isinstance(other, TabularMDP):
            return NotImplemented
        return (self.horizon == other.horizon and self.start_state == other.start_state
                and np.array_equal(self.transitions, other.transitions)
                and np.array_equal(self.rewards, other.rewards)
                and np.array_equal(self.terminal_mask, other.terminal_mask))

    __hash__ = None

    def __repr__(self):
        return f"TabularMDP(S={self.num_states}, A={self.num_actions}, H={self.horizon}, s0={self.start_state})"


class Policy:
    """Markov policy as action probabilities over (h, s); deterministic tables are one-hot."""

    def __init__(self, probs):
        probs = np.array(probs, dtype=np.float64)
        if probs.ndim != 3:
            raise ValueError("policy probabilities must be (H, S, A)")
        if np.any(probs < 0) or np.any(np.abs(probs.sum(-1) - 1.0) > ROW_TOL):
            raise ValueError("policy rows must be distributions")
        probs.setflags(write=False)
        self.probs = probs

    @classmethod
    def deterministic(cls, table, num_actions: int) -> "Policy":
        table = np.asarray(table, dtype=np.int64)
        if table.ndim != 2:
            raise ValueError("deterministic table must be (H, S)")
        if np.any(table < 0) or np.any(table >= num_actions):
            raise ValueError("action index out of range")
        probs = np.zeros(table.shape + (num_actions,))
        np.put_along_axis(probs, table[..., None], 1.0, axis=-1)
        return cls(probs)

    @classmethod
    def uniform(cls, horizon: int, num_states: int, num_actions: int) -> "Policy":
        return cls(np.full((horizon, num_states, num_actions), 1.0 / num_actions))

    @property
    def horizon(self) -> int:
        return self.probs.shape[0]

    @property
    def num_states(self) -> int:
        return self.probs.shape[1]

    @property
    def num_actions(self) -> int:
        return self.probs.shape[2]

    @cached_property
    def is_deterministic(self) -> bool:
        return bool(np.all((self.probs == 0.0) | (self.probs == 1.0)))

    @property
    def table(self) -> np.ndarray:
        if not self.is_deterministic:
            raise ValueError("policy is stochastic")
        return np.argmax(self.probs, axis=-1)

    @cached_property
    def cdf(self) -> np.ndarray:
        return K.sampling_cdf(self.probs)

    def restrict(self, num_states: int) -> "Policy":
        """Drop trailing auxiliary states (planning-only absorbing states)."""
        return Policy(self.probs[:, :num_states])

    def truncate(self, horizon: int) -> "Policy":
        return Policy(self.probs[:horizon])


class MixturePolicy:
    """Uniform mixture: a member is drawn once per episode and followed throughout."""

    def __init__(self, members: Sequence[Policy]):
        if not members:
            raise ValueError("mixture needs at least one member")
        shapes = {m.probs.shape for m in members}
        if len(shapes) != 1:
            raise ValueError("mixture members must share (H, S, A)")
        self.members = list(members)

    @property
    def horizon(self) -> int:
        return self.members[0].horizon

    @cached_property
    def cdf(self) -> np.ndarray:
        return np.stack([m.cdf for m in self.members])


@dataclass(frozen=True)
class Trajectory:
    states: np.ndarray   # (n+1,)
    actions: np.ndarray  # (n,)
    rewards: np.ndarray  # (n,)

    def __len__(self):
        return len(self.actions)

    @property
    def ret(self) -> float:
        return float(self.rewards.sum())

    def steps(self) -> Iterator[tuple[int, int, int, float, int]]:
        for h in range(len(self.actions)):
            yield h, int(self.states[h]), int(self.actions[h]), float(self.rewards[h]), int(self.states[h + 1])


@dataclass(frozen=True)
class ValueTable:
    V: np.ndarray  # (H+1, S)
    Q: np.ndarray  # (H, S, A)

    @property
    def horizon(self) -> int:
        return self.Q.shape[0]


# ---------------------------------------------------------------------------
# planning and evaluation
# ---------------------------------------------------------------------------

def value_iteration(mdp: TabularMDP, rewards_override=None) -> tuple[ValueTable, Policy]:
    """Exact optimal values; the greedy policy takes the lowest index among tied actions."""
    R = mdp.rewards if rewards_override is None else np.asarray(rewards_override, dtype=np.float64)
    Q, V, pi = K.backward_induction(mdp.transitions, R, mdp.horizon)
    return ValueTable(V, Q), Policy.deterministic(pi, mdp.num_actions)


def policy_value(mdp: TabularMDP, policy, rewards_override=None) -> ValueTable:
    R = mdp.rewards if rewards_override is None else np.asarray(rewards_override, dtype=np.float64)
    if isinstance(policy, MixturePolicy):
        tables = [policy_value(mdp, m, R) for m in policy.members]
        return ValueTable(np.mean([t.V for t in tables], axis=0), np.mean([t.Q for t in tables], axis=0))
    if policy.horizon != mdp.horizon:
        raise ValueError(f"policy horizon {policy.horizon} != MDP horizon {mdp.horizon}")
    if policy.num_states != mdp.num_states or policy.num_actions != mdp.num_actions:
        raise ValueError("policy shape does not match the MDP")
    Q, V = K.evaluate(mdp.transitions, R, policy.probs)
    return ValueTable(V, Q)


def occupancy(mdp: TabularMDP, policy: Policy, start=None) -> np.ndarray:
    """d[h, s, a] = P(s_h = s, a_h = a) from the start state (or a given distribution)."""
    H, S = mdp.horizon, mdp.num_states
    if policy.horizon != H:
        raise ValueError("policy horizon mismatch")
    d = np.zeros((H, S, mdp.num_actions))
    rho = np.zeros(S)
    if start is None:
        rho[mdp.start_state] = 1.0
    else:
        rho = np.asarray(start, dtype=np.float64).copy()
    P = mdp.transitions
    for h in range(H):
        d[h] = rho[:, None] * policy.probs[h]
        Ph = P if P.ndim == 3 else P[h]
        rho = np.einsum("sa,sat->t", d[h], Ph)
    return d


def visit_probability(mdp: TabularMDP, policy: Policy, pairs) -> float:
    """Exact P(trajectory contains some (s, a) in ``pairs``) under a Markov policy."""
    mask = np.zeros((mdp.num_states, mdp.num_actions), dtype=bool)
    for s, a in pairs:
        mask[s, a] = True
    rho = np.zeros(mdp.num_states)
    rho[mdp.start_state] = 1.0
    hit = 0.0
    P = mdp.transitions
    for h in range(mdp.horizon):
        d = rho[:, None] * policy.probs[h]
        hit += d[mask].sum()
        d = np.where(mask, 0.0, d)
        Ph = P if P.ndim == 3 else P[h]
        rho = np.einsum("sa,sat->t", d, Ph)
    return float(hit)


# ---------------------------------------------------------------------------
# simulation
# ---------------------------------------------------------------------------

def _draw(rng: np.random.Generator, n: int, H: int) -> np.ndarray:
    return rng.random((n, H, 2))


def simulate_batch(mdp: TabularMDP, policy, n: int, rng: np.random.Generator,
                   counter: QueryCounter | None = None, task=None, phase=None,
                   start_state: int | None = None):
    """n independent episodes; returns (states, actions, rewards) arrays."""
    if isinstance(policy, MixturePolicy):
        pol_cdf = policy.cdf
        members = rng.integers(0, len(policy.members), size=n)
    else:
        pol_cdf = policy.cdf[None]
        members = np.zeros(n, dtype=np.int64)
    H = pol_cdf.shape[1]
    U = _draw(rng, n, H)
    s0 = mdp.start_state if start_state is None else start_state
    out = K.rollouts(mdp.cdf, mdp.rewards, pol_cdf, members, s0, U)
    if counter is not None:
        counter.add(n * H, task=task, phase=phase)
    return out


def simulate_episode(mdp: TabularMDP, policy, rng: np.random.Generator,
                     counter: QueryCounter | None = None, task=None, phase=None) -> Trajectory:
    states, actions, rewards = simulate_batch(mdp, policy, 1, rng, counter, task, phase)
    return Trajectory(states[0], actions[0], rewards[0])


# ---------------------------------------------------------------------------
# estimation
# ---------------------------------------------------------------------------

class EmpiricalModel:
    """Transition counts with a visit threshold; rows below it read as all-zero (unknown)."""

    def __init__(self, num_states: int, num_actions: int, threshold: int = 1, counts=None):
        if threshold < 1:
            raise ValueError("threshold must be >= 1")
        self.threshold = int(threshold)
        if counts is None:
            counts = np.zeros((num_states, num_actions, num_states), dtype=np.int64)
        counts = np.asarray(counts, dtype=np.int64)
        if counts.shape != (num_states, num_actions, num_states):
            raise ValueError("count table has the wrong shape")
        self.counts = counts.copy()

    @property
    def num_states(self) -> int:
        return self.counts.shape[0]

    @property
    def num_actions(self) -> int:
        return self.counts.shape[1]

    @property
    def visits(self) -> np.ndarray:
        return self.counts.sum(axis=-1)

    def add(self, s, a, s_next) -> None:
        np.add.at(self.counts, (np.asarray(s), np.asarray(a), np.asarray(s_next)), 1)

    def add_batch(self, states: np.ndarray, actions: np.ndarray) -> None:
        """Harvest every transition of a batch of episodes (states has one more column)."""
        self.add(states[:, :-1].ravel(), actions.ravel(), states[:, 1:].ravel())

    def merge(self, other: "EmpiricalModel") -> None:
        self.counts += other.counts

    def known(self) -> np.ndarray:
        return self.visits >= self.threshold

    def estimate(self) -> np.ndarray:
        N = self.visits
        P = self.counts / np.maximum(N, 1)[..., None]
        P[N < self.threshold] = 0.0
        return P

    def with_threshold(self, threshold: int) -> "EmpiricalModel":
        return EmpiricalModel(self.num_states, self.num_actions, threshold, self.counts)


def estimate_dynamics(trajectories: Iterable[Trajectory], threshold: int,
                      num_states: int, num_actions: int) -> EmpiricalModel:
    model = EmpiricalModel(num_states, num_actions, threshold)
    for tr in trajectories:
        model.add(tr.states[:-1], tr.actions, tr.states[1:])
    return model


def tv_distance(p, q) -> float:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if not p.any() or not q.any():
        raise ValueError("TV distance is undefined for an unknown (all-zero) row")
    return float(0.5 * np.abs(p - q).sum())


# ---------------------------------------------------------------------------
# derived MDPs
# ---------------------------------------------------------------------------

def add_sink(mdp: TabularMDP, n_sinks: int = 1, sink_rewards=None):
    """Append absorbing states (indices S, S+1, ...); returns P and R arrays."""
    S, A = mdp.num_states, mdp.num_actions
    lead = mdp.transitions.shape[:-3]
    P = np.zeros(lead + (S + n_sinks, A, S + n_sinks))
    P[..., :S, :, :S] = mdp.transitions
    R = np.zeros((S + n_sinks, A))
    R[:S] = mdp.rewards
    for i in range(n_sinks):
        P[..., S + i, :, S + i] = 1.0
        if sink_rewards is not None:
            R[S + i] = sink_rewards[i]
    return P, R


def importance_value(mdp: TabularMDP, pair) -> tuple[float, float]:
    """(V*, V* once ``pair`` is rerouted to a zero-reward terminal)."""
    s, a = pair
    v_star = value_iteration(mdp)[0].V[0, mdp.start_state]
    P, R = add_sink(mdp)
    P[..., s, a, :] = 0.0
    P[..., s, a, -1] = 1.0
    cut = TabularMDP(P, R, mdp.horizon, mdp.start_state)
    return float(v_star), float(value_iteration(cut)[0].V[0, mdp.start_state])


def significance(mdp: TabularMDP, target: int, horizon: int | None = None,
                 start: int | None = None) -> float:
    """max over policies of P(target is visited within the horizon)."""
    P, R = add_sink(mdp)
    R[:] = 0.0
    P[..., target, :, :] = 0.0
    P[..., target, :, -1] = 1.0
    R[target] = 1.0
    H = mdp.horizon if horizon is None else horizon
    s0 = mdp.start_state if start is None else start
    m = TabularMDP(P, R, H, s0)
    return float(value_iteration(m)[0].V[0, s0])


def pair_significance(mdp: TabularMDP, pair, horizon: int | None = None,
                      start: int | None = None) -> float:
    """max over policies of P((s, a) is performed within the horizon)."""
    s, a = pair
    P, R = add_sink(mdp)
    R[:] = 0.0
    P[..., s, a, :] = 0.0
    P[..., s, a, -1] = 1.0
    R[s, a] = 1.0
    H = mdp.horizon if horizon is None else horizon
    s0 = mdp.start_state if start is None else start
    return float(value_iteration(TabularMDP(P, R, H, s0))[0].V[0, s0])
