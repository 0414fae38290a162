"""Plain-text formats: MDP tables, hierarchies, policy sets and count tables.

Floats are written with 17 significant digits so a write/read cycle is bit-exact.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .mdp import TabularMDP


def fmt(x: float) -> str:
    return format(float(x), ".17g")


def mdp_to_text(mdp: TabularMDP) -> str:
    S, A, H = mdp.num_states, mdp.num_actions, mdp.horizon
    kind = "stationary" if mdp.stationary else "per-step"
    lines = ["tabular-mdp 1", f"{S} {A} {H} {mdp.start_state} {kind}"]
    term = np.flatnonzero(mdp.terminal_mask)
    lines.append("terminal " + (" ".join(str(int(s)) for s in term) if len(term) else "-"))
    blocks = [mdp.transitions] if mdp.stationary else list(mdp.transitions)
    for h, P in enumerate(blocks):
        if not mdp.stationary:
            lines.append(f"step {h}")
        for s in range(S):
            for a in range(A):
                lines.append(" ".join([fmt(mdp.rewards[s, a])] + [fmt(p) for p in P[s, a]]))
    return "\n".join(lines) + "\n"


def mdp_from_text(text: str) -> TabularMDP:
    rows = [ln for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    if not rows or rows[0].split()[0] != "tabular-mdp":
        raise ValueError("not a tabular-mdp file")
    S, A, H, s0, kind = rows[1].split()
    S, A, H, s0 = int(S), int(A), int(H), int(s0)
    term_tok = rows[2].split()[1:]
    term = np.zeros(S, dtype=bool)
    if term_tok != ["-"]:
        term[[int(t) for t in term_tok]] = True
    body = rows[3:]
    nblocks = 1 if kind == "stationary" else H
    P = np.zeros((nblocks, S, A, S))
    R = np.zeros((S, A))
    i = 0
    for h in range(nblocks):
        if kind != "stationary":
            if body[i].split() != ["step", str(h)]:
                raise ValueError(f"expected 'step {h}'")
            i += 1
        for s in range(S):
            for a in range(A):
                vals = [float(v) for v in body[i].split()]
                i += 1
                if len(vals) != S + 1:
                    raise ValueError(f"row ({s},{a}) needs {S + 1} numbers")
                R[s, a] = vals[0]
                P[h, s, a] = vals[1:]
    return TabularMDP(P[0] if kind == "stationary" else P, R, H, s0, term, renormalize=False)


def save_mdp(mdp: TabularMDP, path) -> None:
    Path(path).write_text(mdp_to_text(mdp))


def load_mdp(path) -> TabularMDP:
    return mdp_from_text(Path(path).read_text())


def hierarchy_to_text(hier) -> str:
    lines = ["latent-hierarchy 1", "clusters " + " ".join(str(int(c)) for c in hier.cluster_of)]
    lines.append("entrances " + " ".join(str(s) for s in sorted(hier.entrances)))
    lines.append("exits " + " ".join(f"{s}:{a}" for s, a in sorted(hier.exits)))
    return "\n".join(lines) + "\n"


def hierarchy_from_text(text: str):
    from .envs import LatentHierarchy

    fields = {}
    for ln in text.splitlines():
        parts = ln.split()
        if parts:
            fields[parts[0]] = parts[1:]
    if "latent-hierarchy" not in fields:
        raise ValueError("not a latent-hierarchy file")
    cluster_of = [int(c) for c in fields["clusters"]]
    entrances = {int(s) for s in fields.get("entrances", [])}
    exits = {tuple(int(x) for x in tok.split(":")) for tok in fields.get("exits", [])}
    return LatentHierarchy(np.array(cluster_of), entrances, exits)


def counts_to_text(counts: np.ndarray) -> str:
    """Sparse 's a s2 n' lines for a (S, A, S) count table."""
    S, A, _ = counts.shape
    lines = [f"counts {S} {A}"]
    for s, a, t in zip(*np.nonzero(counts)):
        lines.append(f"{s} {a} {t} {int(counts[s, a, t])}")
    return "\n".join(lines) + "\n"


def counts_from_text(text: str) -> np.ndarray:
    rows = text.splitlines()
    _, S, A = rows[0].split()
    S, A = int(S), int(A)
    out = np.zeros((S, A, S), dtype=np.int64)
    for ln in rows[1:]:
        if ln.strip():
            s, a, t, n = (int(v) for v in ln.split())
            out[s, a, t] = n
    return out


def policies_to_text(tables: np.ndarray, returns=None) -> str:
    """Deterministic policy set: one line per episode, H*S actions then the return."""
    n, H, S = tables.shape
    lines = [f"policy-set 1 {n} {H} {S}"]
    for i in range(n):
        tail = "" if returns is None else " " + fmt(returns[i])
        lines.append(" ".join(str(int(a)) for a in tables[i].ravel()) + tail)
    return "\n".join(lines) + "\n"


def policies_from_text(text: str):
    rows = text.splitlines()
    _, _, n, H, S = rows[0].split()
    n, H, S = int(n), int(H), int(S)
    tables = np.zeros((n, H, S), dtype=np.int64)
    returns = np.full(n, np.nan)
    for i in range(n):
        vals = rows[1 + i].split()
        tables[i] = np.array(vals[: H * S], dtype=np.int64).reshape(H, S)
        if len(vals) > H * S:
            returns[i] = float(vals[H * S])
    return tables, returns
