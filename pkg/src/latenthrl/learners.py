"""Optimistic episodic learners (Hoeffding and Bernstein bonuses) and policy-set sampling."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .mdp import MixturePolicy, Policy, QueryCounter, TabularMDP, simulate_batch


@dataclass(frozen=True)
class LearnerBudget:
    num_episodes: int
    bonus_scale: float = 0.01
    confidence: float = 0.05

    def __post_init__(self):
        if self.num_episodes < 1:
            raise ValueError("a learner needs at least one episode")
        if self.bonus_scale <= 0:
            raise ValueError("bonus_scale must be positive")
        if not 0 < self.confidence < 1:
            raise ValueError("confidence must lie in (0, 1)")


@dataclass
class PolicySet:
    """Policies played episode by episode, with the returns they earned."""

    tables: np.ndarray                 # (N, H, S) deterministic actions
    returns: np.ndarray                # (N,)
    root_values: np.ndarray            # (N,) optimistic value at the start state
    num_actions: int
    uniform_at: np.ndarray | None = None   # (N,) state made uniformly random, or -1
    counter: QueryCounter = field(default_factory=QueryCounter)

    def __len__(self) -> int:
        return len(self.tables)

    def policy(self, i: int) -> Policy:
        p = Policy.deterministic(self.tables[i], self.num_actions)
        if self.uniform_at is not None and self.uniform_at[i] >= 0:
            probs = p.probs.copy()
            probs[:, self.uniform_at[i]] = 1.0 / self.num_actions
            p = Policy(probs)
        return p

    def cdf(self, members) -> np.ndarray:
        """Sampling CDFs (len(members), H, S, A) for the given member indices."""
        a = np.arange(self.num_actions)
        c = (a >= self.tables[members][..., None]).astype(np.float64)
        if self.uniform_at is not None:
            for j, m in enumerate(members):
                if self.uniform_at[m] >= 0:
                    c[j, :, self.uniform_at[m]] = (a + 1) / self.num_actions
        return c

    def mixture(self) -> MixturePolicy:
        return MixturePolicy([self.policy(i) for i in range(len(self))])

    @staticmethod
    def concat(sets: list["PolicySet"]) -> "PolicySet":
        if not sets:
            raise ValueError("nothing to concatenate")
        A = sets[0].num_actions
        uni = [s.uniform_at if s.uniform_at is not None else np.full(len(s), -1) for s in sets]
        out = PolicySet(np.concatenate([s.tables for s in sets]),
                        np.concatenate([s.returns for s in sets]),
                        np.concatenate([s.root_values for s in sets]), A, np.concatenate(uni))
        for s in sets:
            out.counter.merge(s.counter)
        return out


class OptimisticLearner:
    """Model-based optimistic planner over pooled transition counts; rewards are known.

    ``plan`` returns the greedy table for the next episode, ``update`` absorbs an
    episode.  Keeping the two apart lets callers feed rewritten histories.
    """

    def __init__(self, num_states: int, num_actions: int, horizon: int, rewards,
                 budget: LearnerBudget, bernstein: bool, extra=None, mask=None,
                 counts=None, known=None):
        self.S, self.A, self.H = num_states, num_actions, horizon
        self.R = np.asarray(rewards, dtype=np.float64)
        self.budget = budget
        self.bernstein = bernstein
        self.extra = extra
        self.mask = mask
        # counts may be shared between learners on the same dynamics.  ``known`` is a
        # (fixed, private, rows) tuple: fixed pairs are planned exactly with no bonus,
        # private pairs use ``rows`` with this learner's own visit counts
        self.counts = np.zeros((num_states, num_actions, num_states)) if counts is None else counts
        self.known = known
        self.private_n = np.zeros((num_states, num_actions))
        self.logterm = float(np.log(num_states * num_actions * horizon
                                    * budget.num_episodes / budget.confidence))

    def model(self):
        n = self.counts.sum(-1)
        Phat = self.counts / np.maximum(n, 1.0)[..., None]
        if self.known is not None:
            fixed, private, rows = self.known
            either = fixed | private
            Phat[either] = rows[either]
            n = np.where(fixed, np.inf, np.where(private, self.private_n, n))
        return Phat, n

    def plan(self):
        Phat, n = self.model()
        return K.optimistic_backward(Phat, self.R, n, self.H, self.budget.bonus_scale,
                                     self.logterm, self.bernstein, self.extra, self.mask)

    def update(self, states, actions) -> None:
        states = np.asarray(states).reshape(-1, np.shape(states)[-1])
        actions = np.asarray(actions).reshape(len(states), -1)
        s, a, s2 = states[:, :-1].ravel(), actions.ravel(), states[:, 1:].ravel()
        if self.known is not None:
            fixed, private, _ = self.known
            np.add.at(self.private_n, (s, a), private[s, a])
            keep = ~(fixed[s, a] | private[s, a])
            s, a, s2 = s[keep], a[keep], s2[keep]
        np.add.at(self.counts, (s, a, s2), 1.0)


def _run(mdp: TabularMDP, R, budget: LearnerBudget, rng, bernstein: bool,
         counter: QueryCounter | None, task, phase, counts=None, known=None) -> PolicySet:
    S, A, H = mdp.num_states, mdp.num_actions, mdp.horizon
    learner = OptimisticLearner(S, A, H, R, budget, bernstein, counts=counts, known=known)
    N = budget.num_episodes
    tables = np.zeros((N, H, S), dtype=np.int64)
    returns = np.zeros(N)
    roots = np.zeros(N)
    env = mdp.replace(rewards=R)
    local = QueryCounter()
    for i in range(N):
        _, V, pi = learner.plan()
        tables[i] = pi
        roots[i] = V[0, mdp.start_state]
        states, actions, rewards = simulate_batch(env, Policy.deterministic(pi, A), 1, rng,
                                                  local, task, phase)
        learner.update(states, actions)
        returns[i] = rewards.sum()
    if counter is not None:
        counter.merge(local)
    return PolicySet(tables, returns, roots, A, counter=local)


def run_ucbvi(mdp: TabularMDP, budget: LearnerBudget, rng, counter=None, task=None,
              phase=None) -> PolicySet:
    """Optimistic value iteration with the Hoeffding bonus c_b * H * sqrt(L / n)."""
    return _run(mdp, mdp.rewards, budget, rng, False, counter, task, phase)


def run_euler(mdp: TabularMDP, reward_override, budget: LearnerBudget, rng, counter=None,
              task=None, phase=None, counts=None, known=None) -> PolicySet:
    """Optimistic value iteration with the Bernstein bonus
    c_b * (sqrt(Var(V) L / n) + H L / n).

    ``counts`` is updated in place, so several goals on one task can pool their
    experience.
    """
    R = mdp.rewards if reward_override is None else np.asarray(reward_override, dtype=np.float64)
    return _run(mdp, R, budget, rng, True, counter, task, phase, counts, known)


@dataclass
class TransitionData:
    states: np.ndarray
    actions: np.ndarray
    next_states: np.ndarray

    def __len__(self) -> int:
        return len(self.states)

    def counts(self, num_states: int, num_actions: int) -> np.ndarray:
        c = np.zeros((num_states, num_actions, num_states), dtype=np.int64)
        np.add.at(c, (self.states, self.actions, self.next_states), 1)
        return c


def sample_policy_returns(mdp: TabularMDP, policy_set: PolicySet, n_samples: int, rng,
                          one_step: bool = False, counter=None, task=None, phase=None):
    """Play uniformly drawn members of the set; returns (transitions, per-sample returns).

    With ``one_step`` each episode contributes a single uniformly timed transition.
    """
    if len(policy_set) == 0:
        raise ValueError("empty policy set")
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    H = policy_set.tables.shape[1]
    drawn = rng.integers(0, len(policy_set), size=n_samples)
    uniq, members = np.unique(drawn, return_inverse=True)
    U = rng.random((n_samples, H, 2))
    states, actions, rewards = K.rollouts(mdp.cdf, mdp.rewards, policy_set.cdf(uniq), members,
                                          mdp.start_state, U)
    if counter is not None:
        counter.add(n_samples * H, task=task, phase=phase)
    if one_step:
        h = rng.integers(0, states.shape[1] - 1, size=n_samples)
        rows = np.arange(n_samples)
        data = TransitionData(states[rows, h], actions[rows, h], states[rows, h + 1])
    else:
        data = TransitionData(states[:, :-1].ravel(), actions.ravel(), states[:, 1:].ravel())
    return data, rewards.sum(axis=1)
