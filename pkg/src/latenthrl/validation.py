"""Exact checks of family structure, separation, reachability and coverage."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .envs import TaskFamily
from .mdp import TabularMDP, importance_value, significance, tv_distance, value_iteration


class FamilyValidationError(ValueError):
    pass


@dataclass
class ValidationReport:
    beta: float
    rho: float
    delta: float
    C_sampled: float
    entrance_reach: dict = field(default_factory=dict)    # (entrance, task) -> probability
    exit_reach: dict = field(default_factory=dict)        # (entrance, exit, task) -> probability
    violations: list[str] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def as_dict(self) -> dict:
        return {"ok": self.ok, "beta": self.beta, "rho": self.rho, "delta": self.delta,
                "C_sampled": self.C_sampled, "violations": list(self.violations),
                "notes": list(self.notes)}


def restrict_to_cluster(mdp: TabularMDP, cluster_of, cluster: int, start: int) -> TabularMDP:
    """Mass leaving the cluster (or outside it) falls into an appended absorbing sink."""
    S, A = mdp.num_states, mdp.num_actions
    inside = np.asarray(cluster_of) == cluster
    P = np.zeros((S + 1, A, S + 1))
    P[:S, :, :S] = mdp.transitions * inside[None, None, :]
    P[:S, :, S] = 1.0 - P[:S, :, :S].sum(-1)
    P[~np.r_[inside, False], :, :] = 0.0
    P[~np.r_[inside, False], :, S] = 1.0
    P[S, :, S] = 1.0
    P = np.clip(P, 0.0, 1.0)
    return TabularMDP(P, np.zeros((S + 1, A)), mdp.horizon, start)


def _imagined(tasks, index, exit_mask):
    """Per-step kernel taking exit rows from task index[h, s, a]."""
    H = index.shape[0]
    base = tasks[0].transitions
    P = np.broadcast_to(base, (H,) + base.shape).copy()
    stack = np.stack([t.transitions for t in tasks])
    hs, ss, as_ = np.nonzero(np.broadcast_to(exit_mask, index.shape))
    P[hs, ss, as_] = stack[index[hs, ss, as_], ss, as_]
    return P


def validate_family(family: TaskFamily, rho: float | None = None, delta: float | None = None,
                    n_index_samples: int = 8, cap: int = 200_000, seed: int = 0,
                    strict: bool = False) -> ValidationReport:
    tasks = family.tasks
    hier = family.hierarchy
    S, A, T, H = family.num_states, family.num_actions, family.T, family.horizon
    if S * A * T > cap:
        raise FamilyValidationError(f"S*A*T = {S * A * T} exceeds the exact-check cap {cap}")
    if len(hier.cluster_of) != S:
        raise FamilyValidationError("hierarchy does not cover the state space")
    violations: list[str] = []
    notes: list[str] = []
    cl = hier.cluster_of
    entrance_mask = np.zeros(S, dtype=bool)
    entrance_mask[list(hier.entrances)] = True
    exit_mask = hier.exit_mask(A)
    stack = np.stack([t.transitions for t in tasks])

    for s in range(S):
        for a in range(A):
            rows = stack[:, s, a]
            support = np.flatnonzero(rows.sum(0) > 0)
            varies = any(not np.array_equal(rows[0], rows[i]) for i in range(1, T))
            if exit_mask[s, a]:
                if not varies:
                    violations.append(f"silent exit: ({s},{a}) has identical dynamics in every task")
                off = support[~entrance_mask[support]]
                if len(off):
                    violations.append(f"exit ({s},{a}) lands on non-entrance states {off.tolist()}")
                if rows[:, s].any():
                    notes.append(f"exit ({s},{a}) can stay in place; state {s} is read as an entrance of its own cluster")
            else:
                if varies:
                    violations.append(f"non-exit ({s},{a}) changes across tasks")
                out = support[cl[support] != cl[s]]
                if len(out):
                    violations.append(f"non-exit ({s},{a}) leaves its cluster to {out.tolist()}")

    beta = np.inf
    for s, a in sorted(hier.exits):
        for i in range(T):
            for j in range(i + 1, T):
                if not np.array_equal(stack[i, s, a], stack[j, s, a]):
                    beta = min(beta, tv_distance(stack[i, s, a], stack[j, s, a]))

    entrance_reach = {}
    for s in sorted(hier.entrances):
        for t, m in enumerate(tasks):
            entrance_reach[(s, t)] = significance(m, s)
    rho_min = min(entrance_reach.values(), default=1.0)
    if rho is not None and rho_min < rho:
        worst = min(entrance_reach, key=entrance_reach.get)
        violations.append(f"entrance {worst[0]} reached with probability {entrance_reach[worst]:.6g} < rho={rho} in task {worst[1]}")

    exit_reach = {}
    for c in range(hier.num_clusters):
        ents, exs = hier.cluster_entrances(c), hier.cluster_exits(c)
        for s in sorted(ents):
            for e in sorted(exs):
                for t, m in enumerate(tasks):
                    sub = restrict_to_cluster(m, cl, c, s)
                    exit_reach[(s, e, t)] = significance(sub, e[0])
    delta_min = min(exit_reach.values(), default=1.0)
    if delta is not None and delta_min < delta:
        worst = min(exit_reach, key=exit_reach.get)
        violations.append(f"exit {worst[1]} reached from entrance {worst[0]} with probability {exit_reach[worst]:.6g} < delta={delta}")

    # sampled lower bound on the reachability inflation constant
    rng = np.random.default_rng(seed)
    C = 1.0
    if T > 1 and exit_mask.any():
        base = np.array([[significance(m, s) for s in range(S)] for m in tasks])
        for _ in range(n_index_samples):
            index = rng.integers(0, T, size=(H, S, A))
            P = _imagined(tasks, index, exit_mask)
            m = TabularMDP(P, tasks[0].rewards, H, tasks[0].start_state)
            reach = np.array([significance(m, s) for s in range(S)])
            for t in range(T):
                for s in range(S):
                    if reach[s] > 1e-12:
                        C = max(C, np.inf if base[t, s] <= 1e-12 else reach[s] / base[t, s])
    report = ValidationReport(float(beta), float(rho_min), float(delta_min), float(C),
                              entrance_reach, exit_reach, violations, sorted(set(notes)))
    if strict and violations:
        raise FamilyValidationError("; ".join(violations))
    return report


@dataclass
class CoverageReport:
    alpha_max: float                 # every exit is alpha-important somewhere for alpha < this
    zeta_max: float                  # min over checked subsets of the best borrowing gain
    importance: dict                 # (exit, task) -> value gap
    subset_gain: dict                # subset -> (best gain, task)
    alpha: float
    zeta: float

    @property
    def ok(self) -> bool:
        return self.alpha_max > self.alpha and self.zeta_max > self.zeta

    def as_dict(self) -> dict:
        return {"ok": self.ok, "alpha_max": self.alpha_max, "zeta_max": self.zeta_max,
                "alpha": self.alpha, "zeta": self.zeta}


def check_coverage(family: TaskFamily, alpha: float, zeta: float, subset_size_cap: int = 2,
                   max_subsets: int = 5000) -> CoverageReport:
    tasks = family.tasks
    exits = sorted(family.hierarchy.exits)
    n_sub = sum(len(list(itertools.combinations(exits, k))) for k in range(1, subset_size_cap + 1))
    if n_sub > max_subsets:
        raise ValueError(f"{n_sub} subsets exceed the cap of {max_subsets}")
    importance = {}
    for e in exits:
        for t, m in enumerate(tasks):
            v, v_cut = importance_value(m, e)
            importance[(e, t)] = v - v_cut
    alpha_max = min((max(importance[(e, t)] for t in range(len(tasks))) for e in exits), default=np.inf)
    base = [value_iteration(m)[0].V[0, m.start_state] for m in tasks]
    donors = {e: [t for t in range(len(tasks)) if importance[(e, t)] > alpha] for e in exits}

    subset_gain = {}
    for k in range(1, subset_size_cap + 1):
        for U in itertools.combinations(exits, k):
            if any(not donors[e] for e in U):
                subset_gain[U] = (-np.inf, None)
                continue
            best, arg = -np.inf, None
            for choice in itertools.product(*(donors[e] for e in U)):
                for t, m in enumerate(tasks):
                    P = np.array(m.transitions)
                    for e, d in zip(U, choice):
                        P[e] = tasks[d].transitions[e]
                    gain = value_iteration(m.replace(transitions=P))[0].V[0, m.start_state] - base[t]
                    if gain > best:
                        best, arg = gain, t
            subset_gain[U] = (float(best), arg)
    zeta_max = min((g for g, _ in subset_gain.values()), default=np.inf)
    return CoverageReport(float(alpha_max), float(zeta_max), importance, subset_gain, alpha, zeta)
