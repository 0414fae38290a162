"""Wall-clock comparison of the numba and numpy kernel paths."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import _kernels as K


@dataclass
class BenchRow:
    kernel: str
    backend: str
    size: str
    seconds: float          # best of the repeats, per call

    def as_dict(self) -> dict:
        return {"kernel": self.kernel, "backend": self.backend, "size": self.size,
                "seconds": self.seconds}


def _instance(S: int, A: int, H: int, rng):
    P = rng.dirichlet(np.full(S, 0.1), size=(S, A))
    R = rng.random((S, A))
    return P, R


def _cases(S: int, A: int, H: int, n_roll: int, seed: int):
    rng = np.random.default_rng(seed)
    P, R = _instance(S, A, H, rng)
    n = rng.integers(0, 20, size=(S, A)).astype(float)
    probs = rng.dirichlet(np.ones(A), size=(H, S))
    stack = np.stack([P, _instance(S, A, H, rng)[0]])
    is_exit = rng.random((S, A)) < 0.1
    cdf = K.sampling_cdf(P)
    pol_cdf = np.cumsum(probs, -1)[None]
    pol_cdf[..., -1] = 1.0
    U = rng.random((n_roll, H, 2))
    members = np.zeros(n_roll, dtype=np.int64)
    return {
        "backward_induction": lambda: K.backward_induction(P, R, H),
        "evaluate": lambda: K.evaluate(P, R, probs),
        "optimistic_backward": lambda: K.optimistic_backward(P, R, n, H, 1.0, 3.0, True),
        "boat_backward": lambda: K.boat_backward(stack, R, is_exit, 1, H),
        "rollouts": lambda: K.rollouts(cdf, R, pol_cdf, members, 0, U),
    }


def run_bench(S: int = 60, A: int = 4, H: int = 30, n_roll: int = 2000, repeats: int = 5,
              seed: int = 0) -> list[BenchRow]:
    """Time every kernel on both backends; the first call per backend warms up compilation."""
    rows = []
    size = f"S={S} A={A} H={H} n={n_roll}"
    for backend in ("numba", "numpy"):
        if backend == "numba" and not K.HAVE_NUMBA:
            continue
        with K.use_backend(backend):
            for name, fn in _cases(S, A, H, n_roll, seed).items():
                fn()
                best = np.inf
                for _ in range(repeats):
                    t0 = time.perf_counter()
                    fn()
                    best = min(best, time.perf_counter() - t0)
                rows.append(BenchRow(name, backend, size, best))
    return rows


def format_table(rows: list[BenchRow]) -> str:
    by = {(r.kernel, r.backend): r.seconds for r in rows}
    kernels = list(dict.fromkeys(r.kernel for r in rows))
    lines = [f"{'kernel':<22}{'numba ms':>12}{'numpy ms':>12}{'speedup':>10}"]
    for k in kernels:
        nb, npy = by.get((k, "numba")), by.get((k, "numpy"))
        nb_s = f"{nb * 1e3:12.3f}" if nb is not None else f"{'-':>12}"
        sp = f"{npy / nb:10.1f}" if nb else f"{'-':>10}"
        lines.append(f"{k:<22}{nb_s}{npy * 1e3:12.3f}{sp}")
    return "\n".join(lines)
