"""Exit detection across a task family: task learning, reward-free reference dynamics,
optimistic borrowing across tasks, exit learning, and the brute-force baseline."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import _kernels as K
from .envs import TaskFamily
from .learners import LearnerBudget, PolicySet, run_euler, run_ucbvi, sample_policy_returns
from .mdp import EmpiricalModel, Policy, QueryCounter, TabularMDP, add_sink, rng_stream, simulate_batch
from .textio import counts_from_text, counts_to_text, fmt

PHASES = ("phase1", "phase2", "phase3")


class PhaseOrderError(RuntimeError):
    pass


class ExitBudgetExceeded(RuntimeError):
    pass


@dataclass
class MetaTrainConfig:
    n_ucbvi: int = 300
    n_ts: int = 400
    thresh_ts: int = 5
    n_euler_rf: int = 30
    n_rf: int = 5000
    n_ed: int = 50
    thresh_ed: int = 5
    n_euler_el: int = 40
    n_el: int = 40
    thresh_el: int = 5
    n_bf_euler: int = 40
    n_bf: int = 20
    thresh_bf: int = 5
    beta: float = 1.0
    zeta: float = 6.0
    alpha: float = 3.0
    confidence: float = 0.05
    rf_significance: float = 0.1
    bonus_scale: float = 0.01
    phase2_tasks: tuple[int, ...] = (0,)
    preliminary_pass: bool = False

    def __post_init__(self):
        self.phase2_tasks = tuple(int(t) for t in self.phase2_tasks)
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name.startswith(("n_", "thresh_")) and (not isinstance(v, (int, np.integer)) or v < 1):
                raise ValueError(f"{f.name} must be a positive integer, got {v!r}")
        for thresh, n in (("thresh_ts", "n_ts"), ("thresh_ed", "n_ed"), ("thresh_el", "n_el"),
                          ("thresh_bf", "n_bf")):
            if getattr(self, thresh) > getattr(self, n):
                raise ValueError(f"{thresh} exceeds {n}")
        if not 0 < self.beta <= 1:
            raise ValueError("beta must lie in (0, 1]")
        if self.zeta <= 0 or self.alpha <= 0:
            raise ValueError("zeta and alpha must be positive")
        if not 0 < self.confidence < 1:
            raise ValueError("confidence must lie in (0, 1)")
        if not self.phase2_tasks:
            raise ValueError("phase 2 needs at least one task")

    def budget(self, n: int, bonus_scale: float | None = None) -> LearnerBudget:
        return LearnerBudget(n, self.bonus_scale if bonus_scale is None else bonus_scale,
                             self.confidence)

    @classmethod
    def from_table(cls, S: int, A: int, H: int, T: int, K_exits: int, L: int, *, alpha: float,
                   beta: float, zeta: float, rho: float = 1.0, eps: float = 0.1,
                   eps0: float = 1.0, C: float = 1.0, confidence: float = 0.05,
                   scale: float = 1e-6, **overrides) -> "MetaTrainConfig":
        """Asymptotic budget shapes times a global scale, rounded up (minimum 1)."""
        p = confidence
        lg = math.log
        m_az = min(alpha, zeta)
        m_bz = min(beta, zeta)
        l_ts = lg(S * A * H * T / (p * alpha * m_bz))
        shapes = {
            "n_ucbvi": H ** 2 * S * A / m_az ** 2 * lg(H * S * A * T / p) ** 2,
            "thresh_ts": S * max(H ** 4 / zeta ** 2, 1 / beta ** 2) * l_ts,
            "n_ts": S * max(H ** 5 / (alpha * zeta ** 2), H / (alpha * beta ** 2)) * l_ts
                    + H ** 2 / m_az ** 2 * lg(S * A * T / p),
            "n_euler_rf": H ** 2 * S ** 4 * A / min(rho * min(eps, eps0), zeta / C) * lg(H * S * A / p) ** 3,
            "n_rf": H ** 5 * S ** 2 * A / min(rho * min(eps, eps0) ** 2, zeta ** 2 / C) * lg(A / p),
            "thresh_ed": S / beta ** 2 * lg(S * A * H / (p * zeta * beta)),
            "n_ed": H * K_exits * S / (zeta * beta ** 2) * lg(S * A * H / (p * zeta * beta))
                    + H ** 2 * K_exits ** 2 / zeta ** 2 * lg(max(K_exits, 2) / p),
            "thresh_el": L * max(H ** 4 / zeta ** 2, 1 / beta ** 2) * lg(C * S * A * H * T / (p * alpha * m_bz)),
            "n_euler_el": C * H ** 3 * S ** 2 * A / alpha * lg(H * S * A * T / p) ** 3,
            "n_el": L * max(C * H ** 5 / (alpha * zeta ** 2), C * H / (alpha * beta ** 2))
                    * lg(C * S * A * H * T / (p * alpha * m_bz)) + C ** 2 * H ** 2 / alpha ** 2 * lg(S * A * T / p),
        }
        counts = {k: max(1, math.ceil(v * scale)) for k, v in shapes.items()}
        for thresh, n in (("thresh_ts", "n_ts"), ("thresh_ed", "n_ed"), ("thresh_el", "n_el")):
            counts[thresh] = min(counts[thresh], counts[n])
        counts.update(overrides)
        return cls(**counts, alpha=alpha, beta=beta, zeta=zeta, confidence=confidence)


@dataclass
class ExitTable:
    is_exit: np.ndarray                          # (S, A) bool
    rows: dict = field(default_factory=dict)     # (s, a) -> (T, S) learned rows per task
    order: list = field(default_factory=list)    # detection order
    diagnostics: list = field(default_factory=list)

    @classmethod
    def empty(cls, S: int, A: int) -> "ExitTable":
        return cls(np.zeros((S, A), dtype=bool))

    def flag(self, pair, rows) -> None:
        s, a = pair
        self.is_exit[s, a] = True
        self.rows[(s, a)] = np.asarray(rows, dtype=np.float64)
        self.order.append((s, a))

    def pairs(self) -> set:
        return {(int(s), int(a)) for s, a in zip(*np.nonzero(self.is_exit))}

    def __len__(self) -> int:
        return int(self.is_exit.sum())


@dataclass
class TaskEstimate:
    model: EmpiricalModel
    value: float
    policies: PolicySet | None = None


@dataclass
class MetaTrainState:
    S: int
    A: int
    T: int
    completed: list = field(default_factory=list)
    tasks: list = field(default_factory=list)          # TaskEstimate per task
    reference: EmpiricalModel | None = None
    mu: np.ndarray | None = None                       # (S, A) empirical sampling distribution
    exits: ExitTable | None = None
    since_last_exit: int = 0
    counter: QueryCounter = field(default_factory=QueryCounter)
    exit_pool: dict = field(default_factory=dict, repr=False)   # task -> exit-learning counts, seeded by phase 1

    def require(self, phase: str) -> None:
        need = PHASES[: PHASES.index(phase)]
        missing = [p for p in need if p not in self.completed]
        if missing:
            raise PhaseOrderError(f"phase order: {phase} needs {', '.join(missing)} first")

    def mark(self, phase: str) -> None:
        if phase not in self.completed:
            self.completed.append(phase)

    def task_models(self) -> list[np.ndarray]:
        """Per-task estimates with learned exit rows written in."""
        out = []
        for t, est in enumerate(self.tasks):
            P = est.model.estimate()
            if self.exits is not None:
                for (s, a), rows in self.exits.rows.items():
                    P[s, a] = rows[t]
            out.append(P)
        return out

    # -- persistence -------------------------------------------------------

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        lines = ["meta-train-state 1", f"shape {self.S} {self.A} {self.T}",
                 "completed " + " ".join(self.completed), f"since_last_exit {self.since_last_exit}"]
        for t, est in enumerate(self.tasks):
            lines.append(f"task {t} threshold {est.model.threshold} value {fmt(est.value)}")
            (d / f"task{t}.counts").write_text(counts_to_text(est.model.counts))
        if self.reference is not None:
            (d / "reference.counts").write_text(counts_to_text(self.reference.counts))
            lines.append(f"reference threshold {self.reference.threshold}")
        if self.mu is not None:
            lines.append("mu " + " ".join(fmt(x) for x in self.mu.ravel()))
        if self.exits is not None:
            lines.append("exits " + " ".join(f"{s}:{a}" for s, a in self.exits.order))
            for (s, a) in self.exits.order:
                for t, row in enumerate(self.exits.rows[(s, a)]):
                    lines.append(f"row {s} {a} {t} " + " ".join(fmt(x) for x in row))
            for msg in self.exits.diagnostics:
                lines.append("diagnostic " + msg)
        for (task, phase), n in self.counter.items():
            lines.append(f"count {phase} {task} {n}")
        (d / "state.txt").write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, directory) -> "MetaTrainState":
        d = Path(directory)
        path = d / "state.txt"
        if not path.exists():
            raise FileNotFoundError(f"no meta-train state in {d}")
        st = None
        rows: dict = {}
        order: list = []
        diags: list = []
        for ln in path.read_text().splitlines():
            tok = ln.split()
            if not tok:
                continue
            head = tok[0]
            if head == "shape":
                st = cls(int(tok[1]), int(tok[2]), int(tok[3]))
            elif head == "completed":
                st.completed = tok[1:]
            elif head == "since_last_exit":
                st.since_last_exit = int(tok[1])
            elif head == "task":
                t, thr, val = int(tok[1]), int(tok[3]), float(tok[5])
                counts = counts_from_text((d / f"task{t}.counts").read_text())
                st.tasks.append(TaskEstimate(EmpiricalModel(st.S, st.A, thr, counts), val))
            elif head == "reference":
                counts = counts_from_text((d / "reference.counts").read_text())
                st.reference = EmpiricalModel(st.S, st.A, int(tok[2]), counts)
            elif head == "mu":
                st.mu = np.array([float(x) for x in tok[1:]]).reshape(st.S, st.A)
            elif head == "exits":
                order = [tuple(int(x) for x in p.split(":")) for p in tok[1:]]
            elif head == "row":
                s, a, t = int(tok[1]), int(tok[2]), int(tok[3])
                rows.setdefault((s, a), np.zeros((st.T, st.S)))[t] = [float(x) for x in tok[4:]]
            elif head == "diagnostic":
                diags.append(ln[len("diagnostic "):])
            elif head == "count":
                task = None if tok[2] == "None" else int(tok[2])
                st.counter.add(int(tok[3]), task=task, phase=tok[1])
        if st is None:
            raise ValueError("state file has no shape line")
        if "phase3" in st.completed or order:
            st.exits = ExitTable.empty(st.S, st.A)
            for pair in order:
                st.exits.flag(pair, rows[pair])
            st.exits.diagnostics = diags
        return st


# ---------------------------------------------------------------------------
# phase I
# ---------------------------------------------------------------------------

def phase1_task_learning(family: TaskFamily, cfg: MetaTrainConfig, seed: int,
                         state: MetaTrainState | None = None) -> MetaTrainState:
    """Optimistic solving per task, then policy-set sampling for dynamics and values."""
    S, A = family.num_states, family.num_actions
    st = state or MetaTrainState(S, A, family.T)
    st.tasks = []
    for t, mdp in enumerate(family.tasks):
        rng = rng_stream(seed, "phase1", t)
        pset = run_ucbvi(mdp, cfg.budget(cfg.n_ucbvi), rng, st.counter, t, "phase1")
        data, returns = sample_policy_returns(mdp, pset, cfg.n_ts, rng, counter=st.counter,
                                              task=t, phase="phase1")
        model = EmpiricalModel(S, A, cfg.thresh_ts, data.counts(S, A))
        st.tasks.append(TaskEstimate(model, float(returns.mean()), pset))
    st.mark("phase1")
    return st


# ---------------------------------------------------------------------------
# phase II
# ---------------------------------------------------------------------------

def reach_target(mdp: TabularMDP, horizon: int, goal: int | None = None, pair=None):
    """Reward 1 on reaching ``goal`` (or taking ``pair``), then drain into an appended sink.

    Returns the target MDP and the (fixed, private, rows) description of the pairs it
    rewrites: the sink is fixed, the rewarded pairs are learned privately.
    """
    P, R = add_sink(mdp)
    R[:] = 0.0
    fixed = np.zeros(R.shape, dtype=bool)
    fixed[-1] = True
    private = np.zeros(R.shape, dtype=bool)
    if goal is not None:
        P[goal] = 0.0
        P[goal, :, -1] = 1.0
        R[goal] = 1.0
        private[goal] = True
    if pair is not None:
        s, a = pair
        P[s, a] = 0.0
        P[s, a, -1] = 1.0
        R[s, a] = 1.0
        private[s, a] = True
    return TabularMDP(P, R, horizon, mdp.start_state), (fixed, private, P)


def goal_mdp(mdp: TabularMDP, goal: int, horizon: int) -> TabularMDP:
    """Reward 1 on reaching ``goal``, after which everything drains into an appended sink."""
    return reach_target(mdp, horizon, goal=goal)[0]


def _shared_counts(mdp: TabularMDP) -> np.ndarray:
    n = mdp.num_states + 1
    return np.zeros((n, mdp.num_actions, n))


def reward_free_pool(mdp: TabularMDP, cfg: MetaTrainConfig, seed: int, counter: QueryCounter,
                     task=None) -> PolicySet:
    """Goal-reaching policy sets for every state, played uniformly at their goal."""
    S = mdp.num_states
    H2 = 2 * mdp.horizon
    sets = []
    pooled = _shared_counts(mdp)
    for g in range(S):
        rng = rng_stream(seed, "phase2", task, g)
        target, known = reach_target(mdp, H2, goal=g)
        pset = run_euler(target, None, cfg.budget(cfg.n_euler_rf), rng, counter, task, "phase2",
                         counts=pooled, known=known)
        pset.tables = pset.tables[:, :, :S]
        pset.uniform_at = np.full(len(pset), g)
        sets.append(pset)
    return PolicySet.concat(sets)


def phase2_reward_free(family: TaskFamily, cfg: MetaTrainConfig, seed: int,
                       state: MetaTrainState) -> MetaTrainState:
    """Reference dynamics from one uniformly timed transition per doubled-horizon episode."""
    state.require("phase2")
    S, A = family.num_states, family.num_actions
    per_task = []
    for t in cfg.phase2_tasks:
        if not 0 <= t < family.T:
            raise ValueError(f"phase 2 task {t} out of range")
        mdp = family.tasks[t]
        pool = reward_free_pool(mdp, cfg, seed, state.counter, t)
        rng = rng_stream(seed, "phase2-samples", t)
        data, _ = sample_policy_returns(mdp.with_horizon(2 * mdp.horizon), pool, cfg.n_rf, rng,
                                        one_step=True, counter=state.counter, task=t,
                                        phase="phase2")
        per_task.append(data.counts(S, A))
    if len(per_task) == 1:
        counts = per_task[0]
    else:
        stack = np.stack(per_task)
        best = stack.sum(-1).argmax(axis=0)
        counts = np.take_along_axis(stack, best[None, ..., None], axis=0)[0]
    state.reference = EmpiricalModel(S, A, 1, counts)
    n = counts.sum(-1)
    state.mu = n / max(n.sum(), 1)
    state.mark("phase2")
    return state


# ---------------------------------------------------------------------------
# borrowing optimistically across tasks
# ---------------------------------------------------------------------------

def boat_vi(reference: np.ndarray, task_models, rewards, is_exit, horizon: int, own: int = 0):
    """Backward induction where each non-exit pair may take any task's row.

    ``reference`` already carries the invoking task's exit rows.  Returns
    (V, Q, index, greedy) where index[h, s, a] is 0 for the reference or t + 1 for
    task t; flagged pairs record ``own``.
    """
    stack = np.stack([reference] + [np.asarray(P) for P in task_models])
    Q, V, pi, index = K.boat_backward(stack, rewards, is_exit, own, horizon)
    return V, Q, index, pi


def _tv_rows(p, q) -> float:
    return 0.5 * float(np.abs(p - q).sum())


def learn_exit(mdp: TabularMDP, pair, cfg: MetaTrainConfig, rng, counter: QueryCounter,
               task=None, phase: str = "phase3", counts=None):
    """Estimate the row of ``pair`` from policies trained to perform it.

    ``counts`` optionally pools exploration with earlier exit learners on this task.

    Returns (row, visits); the row is all-zero when fewer than thresh_el samples arrive.
    """
    s, a = pair
    S = mdp.num_states
    target, known = reach_target(mdp, mdp.horizon, pair=pair)
    pset = run_euler(target, None, cfg.budget(cfg.n_euler_el), rng, counter, task, phase,
                     counts=counts, known=known)
    pset.tables = pset.tables[:, :, :S]
    data, _ = sample_policy_returns(mdp, pset, cfg.n_el, rng, counter=counter, task=task, phase=phase)
    hit = (data.states == s) & (data.actions == a)
    n = int(hit.sum())
    row = np.bincount(data.next_states[hit], minlength=S).astype(np.float64)
    if n < cfg.thresh_el:
        return np.zeros(S), n
    return row / n, n


def _detect_and_learn(family, st, cfg, seed, counts, label):
    """Flag pairs whose freshly estimated rows disagree with a known task row."""
    models = [est.model.estimate() for est in st.tasks]
    N = counts.sum(-1)
    new = []
    for s, a in zip(*np.nonzero(N >= cfg.thresh_ed)):
        if st.exits.is_exit[s, a]:
            continue
        row = counts[s, a] / N[s, a]
        if any(P[s, a].any() and _tv_rows(row, P[s, a]) > cfg.beta / 2 for P in models):
            rows = np.zeros((family.T, family.num_states))
            for t, mdp in enumerate(family.tasks):
                rng = rng_stream(seed, "learn-exit", int(s), int(a), t)
                if t not in st.exit_pool:
                    st.exit_pool[t] = _shared_counts(mdp)
                    st.exit_pool[t][:-1, :, :-1] = st.tasks[t].model.counts
                pool = st.exit_pool[t]
                rows[t], n = learn_exit(mdp, (s, a), cfg, rng, st.counter, t, counts=pool)
                if not rows[t].any():
                    st.exits.diagnostics.append(
                        f"exit unreachable at budget: ({s},{a}) in task {t} seen {n} < {cfg.thresh_el} times ({label})")
            st.exits.flag((int(s), int(a)), rows)
            new.append((int(s), int(a)))
    return new


def preliminary_pass(family: TaskFamily, cfg: MetaTrainConfig, seed: int, st: MetaTrainState) -> list:
    """Play each task's final learned policy in every other task and compare rows."""
    S, A = family.num_states, family.num_actions
    found = []
    for t, est in enumerate(st.tasks):
        pol = Policy.deterministic(est.policies.tables[-1], A)
        for u, mdp in enumerate(family.tasks):
            if u == t:
                continue
            rng = rng_stream(seed, "preliminary", t, u)
            states, actions, _ = simulate_batch(mdp, pol, cfg.n_ed, rng, st.counter, u, "phase3")
            counts = np.zeros((S, A, S))
            np.add.at(counts, (states[:, :-1].ravel(), actions.ravel(), states[:, 1:].ravel()), 1)
            found += _detect_and_learn(family, st, cfg, seed, counts, f"preliminary {t}->{u}")
    return found


def phase3_detect_exits(family: TaskFamily, cfg: MetaTrainConfig, seed: int,
                        state: MetaTrainState, max_exits: int | None = None) -> MetaTrainState:
    """Round-robin borrowing until T consecutive task visits flag nothing new."""
    state.require("phase3")
    if state.tasks and state.tasks[0].policies is None and cfg.preliminary_pass:
        raise PhaseOrderError("the preliminary pass needs the phase 1 policy sets in memory")
    S, A, T = family.num_states, family.num_actions, family.T
    K_max = S * A if max_exits is None else max_exits
    st = state
    st.exits = ExitTable.empty(S, A)
    st.since_last_exit = 0
    if cfg.preliminary_pass:
        preliminary_pass(family, cfg, seed, st)
    P0 = st.reference.estimate()
    visit = 0
    while True:
        for t, mdp in enumerate(family.tasks):
            models = st.task_models()
            ref = P0.copy()
            ref[st.exits.is_exit] = models[t][st.exits.is_exit]
            V, Q, index, pi = boat_vi(ref, models, mdp.rewards, st.exits.is_exit, mdp.horizon, t + 1)
            new = []
            if V[0, mdp.start_state] - st.tasks[t].value > 2.0 * cfg.zeta / 3.0:
                rng = rng_stream(seed, "phase3", visit, t)
                states, actions, _ = simulate_batch(mdp, Policy.deterministic(pi, A), cfg.n_ed, rng,
                                                    st.counter, t, "phase3")
                counts = np.zeros((S, A, S))
                np.add.at(counts, (states[:, :-1].ravel(), actions.ravel(), states[:, 1:].ravel()), 1)
                new = _detect_and_learn(family, st, cfg, seed, counts, f"visit {visit} task {t}")
            visit += 1
            st.since_last_exit = 0 if new else st.since_last_exit + 1
            if len(st.exits) > K_max:
                raise ExitBudgetExceeded(
                    f"{len(st.exits)} exits flagged, above the cap of {K_max}; latest {new}")
            if st.since_last_exit >= T:
                st.mark("phase3")
                return st


def run_meta_train(family: TaskFamily, cfg: MetaTrainConfig, seed: int) -> MetaTrainState:
    st = phase1_task_learning(family, cfg, seed)
    phase2_reward_free(family, cfg, seed, st)
    return phase3_detect_exits(family, cfg, seed, st)


# ---------------------------------------------------------------------------
# brute force
# ---------------------------------------------------------------------------

@dataclass
class BruteForceResult:
    exits: set
    rows: np.ndarray          # (T, S, A, S) estimates
    visits: np.ndarray        # (T, S, A)
    counter: QueryCounter


def brute_force_hierarchy(family: TaskFamily, cfg: MetaTrainConfig, seed: int) -> BruteForceResult:
    """Reach every state in every task, try every action there, and compare rows."""
    S, A, T = family.num_states, family.num_actions, family.T
    counter = QueryCounter()
    rows = np.zeros((T, S, A, S))
    visits = np.zeros((T, S, A), dtype=np.int64)
    for t, mdp in enumerate(family.tasks):
        pooled = _shared_counts(mdp)
        for s in range(S):
            rng = rng_stream(seed, "brute-force", t, s)
            target, known = reach_target(mdp, mdp.horizon, goal=s)
            pset = run_euler(target, None, cfg.budget(cfg.n_bf_euler), rng, counter, t,
                             "brute-force", counts=pooled, known=known)
            pset.tables = pset.tables[:, :, :S]
            for a in range(A):
                pset.tables[:, :, s] = a
                data, _ = sample_policy_returns(mdp, pset, cfg.n_bf, rng, counter=counter, task=t,
                                                phase="brute-force")
                hit = (data.states == s) & (data.actions == a)
                n = int(hit.sum())
                visits[t, s, a] = n
                if n:
                    rows[t, s, a] = np.bincount(data.next_states[hit], minlength=S) / n
    found = set()
    ok = visits >= cfg.thresh_bf
    for s in range(S):
        for a in range(A):
            known = [t for t in range(T) if ok[t, s, a]]
            if any(_tv_rows(rows[i, s, a], rows[j, s, a]) > cfg.beta / 2
                   for x, i in enumerate(known) for j in known[x + 1:]):
                found.add((s, a))
    return BruteForceResult(found, rows, visits, counter)
