"""Hot loops: backward induction, optimistic planning, BOAT backups, rollouts.

Every kernel exists twice: an explicit-loop version compiled with numba and a
vectorised numpy version.  ``HRL_BACKEND=numpy`` selects the numpy path at import
time; ``use_backend`` switches at runtime (tests and the benchmark use it).

Array conventions
    P      (HP, S, A, S) with HP == 1 (stationary) or HP == H
    R      (HR, S, A)    with HR == 1 or HR == H
    probs  (H, S, A) action distributions
    cdf    cumulative rows whose tail past the last positive entry is exactly 1.0
"""
from __future__ import annotations

import contextlib
import os

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda f: f


# tie tolerance for greedy action selection; lowest index wins within it
TIE_TOL = 1e-10


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

@njit(cache=True)
def _bi_nb(P, R, H, tol):
    S = P.shape[1]
    A = P.shape[2]
    Q = np.zeros((H, S, A))
    V = np.zeros((H + 1, S))
    pi = np.zeros((H, S), dtype=np.int64)
    for h in range(H - 1, -1, -1):
        Ph = P[min(h, P.shape[0] - 1)]
        Rh = R[min(h, R.shape[0] - 1)]
        for s in range(S):
            best = -np.inf
            for a in range(A):
                acc = 0.0
                for t in range(S):
                    acc += Ph[s, a, t] * V[h + 1, t]
                q = Rh[s, a] + acc
                Q[h, s, a] = q
                if q > best:
                    best = q
            V[h, s] = best
            for a in range(A):
                if Q[h, s, a] >= best - tol:
                    pi[h, s] = a
                    break
    return Q, V, pi


@njit(cache=True)
def _eval_nb(P, R, probs):
    H = probs.shape[0]
    S = P.shape[1]
    A = P.shape[2]
    Q = np.zeros((H, S, A))
    V = np.zeros((H + 1, S))
    for h in range(H - 1, -1, -1):
        Ph = P[min(h, P.shape[0] - 1)]
        Rh = R[min(h, R.shape[0] - 1)]
        for s in range(S):
            v = 0.0
            for a in range(A):
                acc = 0.0
                for t in range(S):
                    acc += Ph[s, a, t] * V[h + 1, t]
                Q[h, s, a] = Rh[s, a] + acc
                v += probs[h, s, a] * Q[h, s, a]
            V[h, s] = v
    return Q, V


@njit(cache=True)
def _optimistic_nb(ptr, idx, val, R, n, H, c_b, logterm, bernstein, extra, mask, tol):
    # Phat in CSR form: row (s * A + a) holds idx[ptr[r]:ptr[r+1]] with masses val
    S = R.shape[0]
    A = R.shape[1]
    Q = np.zeros((H, S, A))
    V = np.zeros((H + 1, S))
    pi = np.zeros((H, S), dtype=np.int64)
    for h in range(H - 1, -1, -1):
        cap = float(H - h)
        for s in range(S):
            best = -np.inf
            for a in range(A):
                if not mask[s, a]:
                    Q[h, s, a] = -1.0
                    continue
                m1 = 0.0
                m2 = 0.0
                r = s * A + a
                for k in range(ptr[r], ptr[r + 1]):
                    v = V[h + 1, idx[k]]
                    m1 += val[k] * v
                    m2 += val[k] * v * v
                nn = max(1.0, n[s, a])
                if bernstein:
                    var = m2 - m1 * m1
                    if var < 0.0:
                        var = 0.0
                    b = c_b * (np.sqrt(var * logterm / nn) + H * logterm / nn)
                else:
                    b = c_b * H * np.sqrt(logterm / nn)
                q = R[s, a] + m1 + b + extra[s, a]
                if q > cap or n[s, a] == 0.0:
                    q = cap
                if q < 0.0:
                    q = 0.0
                Q[h, s, a] = q
                if q > best:
                    best = q
            V[h, s] = best
            fewest = np.inf
            for a in range(A):
                if mask[s, a] and Q[h, s, a] >= best - tol and n[s, a] < fewest:
                    fewest = n[s, a]
                    pi[h, s] = a
    return Q, V, pi


@njit(cache=True)
def _boat_nb(Pstack, R, is_exit, own, H, tol):
    K = Pstack.shape[0]
    S = Pstack.shape[1]
    A = Pstack.shape[2]
    Q = np.zeros((H, S, A))
    V = np.zeros((H + 1, S))
    pi = np.zeros((H, S), dtype=np.int64)
    index = np.zeros((H, S, A), dtype=np.int64)
    for h in range(H - 1, -1, -1):
        for s in range(S):
            best = -np.inf
            for a in range(A):
                if is_exit[s, a]:
                    acc = 0.0
                    for t in range(S):
                        acc += Pstack[0, s, a, t] * V[h + 1, t]
                    Q[h, s, a] = R[s, a] + acc
                    index[h, s, a] = own
                else:
                    vals = np.empty(K)
                    top = -np.inf
                    for k in range(K):
                        acc = 0.0
                        for t in range(S):
                            acc += Pstack[k, s, a, t] * V[h + 1, t]
                        vals[k] = acc
                        if acc > top:
                            top = acc
                    for k in range(K):
                        if vals[k] >= top - tol:
                            index[h, s, a] = k
                            break
                    Q[h, s, a] = R[s, a] + top
                if Q[h, s, a] > best:
                    best = Q[h, s, a]
            V[h, s] = best
            for a in range(A):
                if Q[h, s, a] >= best - tol:
                    pi[h, s] = a
                    break
    return Q, V, pi, index


@njit(cache=True)
def _search(row, u):
    # first index whose cumulative mass exceeds u
    lo = 0
    hi = row.shape[0] - 1
    while lo < hi:
        mid = (lo + hi) // 2
        if row[mid] > u:
            hi = mid
        else:
            lo = mid + 1
    return lo


@njit(cache=True)
def _rollouts_nb(cdf, R, pol_cdf, members, s0, U):
    n = U.shape[0]
    H = U.shape[1]
    states = np.empty((n, H + 1), dtype=np.int64)
    actions = np.empty((n, H), dtype=np.int64)
    rewards = np.empty((n, H))
    for i in range(n):
        m = members[i]
        s = s0
        states[i, 0] = s
        for h in range(H):
            a = _search(pol_cdf[m, h, s], U[i, h, 0])
            actions[i, h] = a
            rewards[i, h] = R[s, a]
            s = _search(cdf[s, a], U[i, h, 1])
            states[i, h + 1] = s
    return states, actions, rewards


# ---------------------------------------------------------------------------
# numpy implementations
# ---------------------------------------------------------------------------

def _greedy(Qh, tol, mask=None):
    best = Qh.max(axis=-1)
    ok = Qh >= best[..., None] - tol
    if mask is not None:
        ok &= mask
    return np.argmax(ok, axis=-1), best


def _bi_np(P, R, H, tol):
    S, A = P.shape[1], P.shape[2]
    Q = np.zeros((H, S, A))
    V = np.zeros((H + 1, S))
    pi = np.zeros((H, S), dtype=np.int64)
    for h in range(H - 1, -1, -1):
        Q[h] = R[min(h, R.shape[0] - 1)] + P[min(h, P.shape[0] - 1)] @ V[h + 1]
        pi[h], V[h] = _greedy(Q[h], tol)
    return Q, V, pi


def _eval_np(P, R, probs):
    H = probs.shape[0]
    S, A = P.shape[1], P.shape[2]
    Q = np.zeros((H, S, A))
    V = np.zeros((H + 1, S))
    for h in range(H - 1, -1, -1):
        Q[h] = R[min(h, R.shape[0] - 1)] + P[min(h, P.shape[0] - 1)] @ V[h + 1]
        V[h] = (probs[h] * Q[h]).sum(axis=-1)
    return Q, V


def _optimistic_np(Phat, R, n, H, c_b, logterm, bernstein, extra, mask, tol):
    S, A = Phat.shape[0], Phat.shape[1]
    Q = np.zeros((H, S, A))
    V = np.zeros((H + 1, S))
    pi = np.zeros((H, S), dtype=np.int64)
    nn = np.maximum(1.0, n)
    hoeffding = c_b * H * np.sqrt(logterm / nn)
    for h in range(H - 1, -1, -1):
        v = V[h + 1]
        m1 = Phat @ v
        if bernstein:
            var = np.maximum(Phat @ (v * v) - m1 * m1, 0.0)
            b = c_b * (np.sqrt(var * logterm / nn) + H * logterm / nn)
        else:
            b = hoeffding
        cap = float(H - h)
        q = np.clip(R + m1 + b + extra, 0.0, cap)
        q[n == 0] = cap
        Q[h] = np.where(mask, q, -1.0)
        V[h] = Q[h].max(axis=-1)
        ok = mask & (Q[h] >= V[h][:, None] - tol)
        pi[h] = np.argmin(np.where(ok, n, np.inf), axis=-1)
    return Q, V, pi


def _boat_np(Pstack, R, is_exit, own, H, tol):
    K, S, A = Pstack.shape[0], Pstack.shape[1], Pstack.shape[2]
    Q = np.zeros((H, S, A))
    V = np.zeros((H + 1, S))
    pi = np.zeros((H, S), dtype=np.int64)
    index = np.zeros((H, S, A), dtype=np.int64)
    for h in range(H - 1, -1, -1):
        cand = Pstack @ V[h + 1]  # (K, S, A)
        top = cand.max(axis=0)
        idx = np.argmax(cand >= top[None] - tol, axis=0)
        Q[h] = R + np.where(is_exit, cand[0], top)
        index[h] = np.where(is_exit, own, idx)
        pi[h], V[h] = _greedy(Q[h], tol)
    return Q, V, pi, index


def _rollouts_np(cdf, R, pol_cdf, members, s0, U):
    n, H = U.shape[0], U.shape[1]
    states = np.empty((n, H + 1), dtype=np.int64)
    actions = np.empty((n, H), dtype=np.int64)
    rewards = np.empty((n, H))
    s = np.full(n, s0, dtype=np.int64)
    states[:, 0] = s
    for h in range(H):
        arow = pol_cdf[members, h, s]
        a = (arow <= U[:, h, 0:1]).sum(axis=1)
        actions[:, h] = a
        rewards[:, h] = R[s, a]
        s = (cdf[s, a] <= U[:, h, 1:2]).sum(axis=1)
        states[:, h + 1] = s
    return states, actions, rewards


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

_IMPLS = {
    "numba": dict(bi=_bi_nb, ev=_eval_nb, opt=_optimistic_nb, boat=_boat_nb, roll=_rollouts_nb),
    "numpy": dict(bi=_bi_np, ev=_eval_np, opt=_optimistic_np, boat=_boat_np, roll=_rollouts_np),
}


def _initial_backend() -> str:
    name = os.environ.get("HRL_BACKEND", "numba").strip().lower()
    if name not in _IMPLS:
        raise ValueError(f"HRL_BACKEND must be 'numba' or 'numpy', got {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        return "numpy"
    return name


_backend = _initial_backend()


def get_backend() -> str:
    return _backend


def set_backend(name: str) -> None:
    global _backend
    if name not in _IMPLS:
        raise ValueError(f"unknown backend {name!r}")
    _backend = name


@contextlib.contextmanager
def use_backend(name: str):
    prev = _backend
    set_backend(name)
    try:
        yield
    finally:
        set_backend(prev)


def _as4(P):
    P = np.ascontiguousarray(P, dtype=np.float64)
    return P[None] if P.ndim == 3 else P


def _as3(R):
    R = np.ascontiguousarray(R, dtype=np.float64)
    return R[None] if R.ndim == 2 else R


def backward_induction(P, R, H: int, tol: float = TIE_TOL):
    """Optimal (Q, V, greedy) by backward induction; V has H+1 rows with V[H] = 0."""
    return _IMPLS[_backend]["bi"](_as4(P), _as3(R), int(H), float(tol))


def evaluate(P, R, probs):
    """Exact (Q, V) of a Markov policy given as action probabilities (H, S, A)."""
    return _IMPLS[_backend]["ev"](_as4(P), _as3(R), np.ascontiguousarray(probs, dtype=np.float64))


def optimistic_backward(Phat, R, n, H: int, c_b: float, logterm: float, bernstein: bool,
                        extra=None, mask=None, tol: float = TIE_TOL):
    """Optimistic backward induction with a Hoeffding or Bernstein bonus.

    Q is clipped to [0, H-h]; pairs never tried (n == 0) sit at the clip value.
    Ties go to the least-tried action, then the lowest index.
    """
    S, A = R.shape
    if extra is None:
        extra = np.zeros((S, A))
    if mask is None:
        mask = np.ones((S, A), dtype=np.bool_)
    Phat = np.ascontiguousarray(Phat, dtype=np.float64)
    if _backend == "numba":
        flat = Phat.reshape(S * A, S)
        rows, cols = np.nonzero(flat)
        ptr = np.zeros(S * A + 1, dtype=np.int64)
        np.cumsum(np.bincount(rows, minlength=S * A), out=ptr[1:])
        model = (ptr, cols.astype(np.int64), flat[rows, cols])
    else:
        model = (Phat,)
    return _IMPLS[_backend]["opt"](
        *model, np.ascontiguousarray(R, dtype=np.float64),
        np.ascontiguousarray(n, dtype=np.float64), int(H), float(c_b), float(logterm),
        bool(bernstein), np.ascontiguousarray(extra, dtype=np.float64),
        np.ascontiguousarray(mask, dtype=np.bool_), float(tol))


def boat_backward(Pstack, R, is_exit, own: int, H: int, tol: float = TIE_TOL):
    """Backward induction maximising over a stack of candidate rows per (s, a).

    Row 0 of the stack is the reference model; flagged pairs always back up through it
    and record ``own`` as their index.
    """
    return _IMPLS[_backend]["boat"](
        np.ascontiguousarray(Pstack, dtype=np.float64), np.ascontiguousarray(R, dtype=np.float64),
        np.ascontiguousarray(is_exit, dtype=np.bool_), int(own), int(H), float(tol))


def rollouts(cdf, R, pol_cdf, members, s0: int, U):
    """Batch of episodes driven by pre-drawn uniforms U (n, H, 2): column 0 picks actions."""
    return _IMPLS[_backend]["roll"](
        np.ascontiguousarray(cdf, dtype=np.float64), np.ascontiguousarray(R, dtype=np.float64),
        np.ascontiguousarray(pol_cdf, dtype=np.float64), np.ascontiguousarray(members, dtype=np.int64),
        int(s0), np.ascontiguousarray(U, dtype=np.float64))


def sampling_cdf(P) -> np.ndarray:
    """Cumulative rows with the tail past the last positive entry pinned to 1.0."""
    P = np.asarray(P, dtype=np.float64)
    c = np.cumsum(P, axis=-1)
    last = P.shape[-1] - 1 - np.argmax((P > 0)[..., ::-1], axis=-1)
    pos = np.arange(P.shape[-1])
    c = np.where(pos >= last[..., None], 1.0, c)
    return c
