import numpy as np
import pytest
from hypothesis import given, strategies as st

from latenthrl import _kernels as K
from oracles import random_instance


def both(fn):
    out = {}
    for name in ("numba", "numpy"):
        with K.use_backend(name):
            out[name] = fn()
    return out["numba"], out["numpy"]


sizes = st.tuples(st.integers(1, 6), st.integers(1, 3), st.integers(1, 5), st.integers(0, 2**31 - 1))


@given(sizes)
def test_backward_induction_backends_agree(args):
    S, A, H, seed = args
    P, R = random_instance(np.random.default_rng(seed), S, A, H)
    (Q1, V1, pi1), (Q2, V2, pi2) = both(lambda: K.backward_induction(P, R, H))
    np.testing.assert_allclose(Q1, Q2, atol=1e-12)
    np.testing.assert_allclose(V1, V2, atol=1e-12)
    np.testing.assert_array_equal(pi1, pi2)


@given(sizes)
def test_evaluate_backends_agree(args):
    S, A, H, seed = args
    rng = np.random.default_rng(seed)
    P, R = random_instance(rng, S, A, H)
    probs = rng.dirichlet(np.ones(A), size=(H, S))
    (Q1, V1), (Q2, V2) = both(lambda: K.evaluate(P, R, probs))
    np.testing.assert_allclose(Q1, Q2, atol=1e-12)
    np.testing.assert_allclose(V1, V2, atol=1e-12)


@given(sizes, st.booleans())
def test_optimistic_backends_agree(args, bernstein):
    S, A, H, seed = args
    rng = np.random.default_rng(seed)
    P, R = random_instance(rng, S, A, H)
    n = rng.integers(0, 6, size=(S, A)).astype(float)
    mask = rng.random((S, A)) < 0.8
    mask[:, 0] = True
    (Q1, V1, pi1), (Q2, V2, pi2) = both(
        lambda: K.optimistic_backward(P, R, n, H, 0.5, 2.0, bernstein, mask=mask))
    np.testing.assert_allclose(Q1, Q2, atol=1e-6)
    np.testing.assert_allclose(V1, V2, atol=1e-6)
    np.testing.assert_array_equal(pi1, pi2)


@given(sizes)
def test_boat_backends_agree(args):
    S, A, H, seed = args
    rng = np.random.default_rng(seed)
    stack = np.stack([random_instance(rng, S, A, H)[0] for _ in range(3)])
    R = rng.random((S, A))
    is_exit = rng.random((S, A)) < 0.3
    r1, r2 = both(lambda: K.boat_backward(stack, R, is_exit, 2, H))
    for x, y in zip(r1, r2):
        np.testing.assert_allclose(x, y, atol=1e-12)


@given(sizes)
def test_rollouts_backends_agree(args):
    S, A, H, seed = args
    rng = np.random.default_rng(seed)
    P, R = random_instance(rng, S, A, H)
    probs = rng.dirichlet(np.ones(A), size=(2, H, S))
    pol_cdf = np.cumsum(probs, -1)
    pol_cdf[..., -1] = 1.0
    U = rng.random((20, H, 2))
    members = rng.integers(0, 2, size=20)
    r1, r2 = both(lambda: K.rollouts(K.sampling_cdf(P), R, pol_cdf, members, 0, U))
    for x, y in zip(r1, r2):
        np.testing.assert_array_equal(x, y)


def test_sampling_cdf_pins_tail():
    P = np.array([[[0.2, 0.3, 0.5 - 1e-17, 0.0]]])
    c = K.sampling_cdf(P)
    assert c[0, 0, -1] == 1.0 and c[0, 0, 2] == 1.0
    assert c[0, 0, 0] == pytest.approx(0.2)


def test_ties_go_to_lowest_index(backend):
    P = np.zeros((1, 3, 1))
    P[..., 0] = 1.0
    R = np.array([[0.5, 0.5, 0.5]])
    _, _, pi = K.backward_induction(P, R, 2)
    assert (pi == 0).all()


def test_optimistic_ties_prefer_least_tried(backend):
    P = np.zeros((1, 3, 1))
    P[..., 0] = 1.0
    R = np.zeros((1, 3))
    n = np.array([[5.0, 2.0, 2.0]])
    # zero bonus scale leaves every action at value 0: fewest tries wins, then lowest index
    _, _, pi = K.optimistic_backward(P, R, n, 1, 1e-300, 1.0, False)
    assert pi[0, 0] == 1


def test_optimistic_clips_and_untried_pairs_sit_at_cap(backend):
    P = np.zeros((2, 2, 2))
    P[:, :, 0] = 1.0
    R = np.zeros((2, 2))
    n = np.array([[0.0, 100.0], [100.0, 100.0]])
    Q, V, pi = K.optimistic_backward(P, R, n, 3, 1.0, 1.0, False)
    for h in range(3):
        assert Q[h, 0, 0] == pytest.approx(3 - h)
        assert (Q[h] <= 3 - h + 1e-12).all()
    assert pi[0, 0] == 0


def test_bernstein_bonus_not_above_hoeffding_for_zero_variance(backend):
    P = np.zeros((2, 1, 2))
    P[:, 0, 1] = 1.0
    R = np.array([[0.5], [0.5]])
    n = np.full((2, 1), 50.0)
    Qh, _, _ = K.optimistic_backward(P, R, n, 4, 1.0, 2.0, False)
    Qb, _, _ = K.optimistic_backward(P, R, n, 4, 1.0, 2.0, True)
    assert (Qb <= Qh + 1e-12).all()


def test_mask_excludes_actions(backend):
    P = np.zeros((1, 2, 1))
    P[..., 0] = 1.0
    R = np.array([[0.0, 1.0]])
    mask = np.array([[True, False]])
    _, _, pi = K.optimistic_backward(P, R, np.full((1, 2), 1e9), 2, 1.0, 1.0, False, mask=mask)
    assert (pi == 0).all()


def test_unknown_backend_rejected():
    with pytest.raises(ValueError):
        K.set_backend("fortran")


def test_per_step_kernels_supported(backend):
    rng = np.random.default_rng(0)
    H, S, A = 3, 3, 2
    P = np.stack([random_instance(rng, S, A, H)[0] for _ in range(H)])
    R = rng.random((S, A))
    Q, V, pi = K.backward_induction(P, R, H)
    # last step is myopic
    np.testing.assert_allclose(V[H - 1], R.max(-1))
    np.testing.assert_allclose(Q[0], R + P[0] @ V[1])
