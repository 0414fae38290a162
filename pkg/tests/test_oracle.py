import numpy as np
import pytest
from hypothesis import given, strategies as st

from latenthrl.envs import (FourRoomLayout, FourRoomSpec, binary_tree_family, four_room_benchmark,
                            four_room_target, make_counterexample_env, make_four_room_family,
                            tree_indices)
from latenthrl.mdp import Policy, TabularMDP, rng_stream, simulate_batch, value_iteration
from latenthrl.oracle import (FAILURE, SUCCESS, HierarchyOracle, bfs_steps, expected_reaching_time,
                              reachability_floor, reaching_times)
from latenthrl.validation import restrict_to_cluster
from oracles import bfs_distance, exact_reaching_time, grid_moves, random_instance

SIDE, H = 7, 60


@pytest.fixture(scope="module")
def target():
    mdp, hier, room = four_room_target(side=SIDE, horizon=H)
    layout = FourRoomLayout(SIDE, FourRoomSpec(side=SIDE).resolved_gates(), False)
    return mdp, hier, layout, HierarchyOracle.from_ground_truth(mdp, hier)


def test_zero_reward_has_zero_value(target):
    mdp, hier, layout, oracle = target
    assert oracle.solve(oracle.query(mdp.start_state)).value == 0.0


def test_exit_map_is_total_and_checked(target):
    _, hier, _, oracle = target
    m = oracle.exit_map()
    assert {e for e, _ in m} == hier.exits and {o for _, o in m} == {FAILURE}
    with pytest.raises(ValueError, match="unflagged"):
        oracle.exit_map([(0, 0)])


def test_query_errors(target):
    mdp, hier, _, oracle = target
    non_entrance = next(s for s in range(mdp.num_states) if s not in hier.entrances)
    with pytest.raises(ValueError, match="entrance"):
        oracle.solve(oracle.query(non_entrance))
    with pytest.raises(ValueError, match="horizon"):
        oracle.solve(oracle.query(mdp.start_state, horizon=H + 1))
    with pytest.raises(ValueError):
        oracle.available_exits(non_entrance)


def test_sealed_kernel_routes_exits_to_sinks(target):
    mdp, hier, _, oracle = target
    g = sorted(hier.exits)[0]
    P = oracle.sealed_kernel(oracle.exit_map([g]))
    S = mdp.num_states
    assert P[g[0], g[1], S + SUCCESS] == 1.0
    for e in hier.exits - {g}:
        assert P[e[0], e[1], S + FAILURE] == 1.0
    np.testing.assert_allclose(P.sum(-1), 1.0)


def test_in_room_reward_matches_restricted_value_iteration(target):
    mdp, hier, layout, oracle = target
    start = mdp.start_state
    cell = layout.index[(1, 2)]
    r = np.zeros((mdp.num_states, 4))
    r[cell] = 1.0
    res = oracle.within_cluster(start, r, 5)
    sub = restrict_to_cluster(mdp, hier.cluster_of, int(hier.cluster_of[start]), start)
    R = np.zeros((mdp.num_states + 1, 4))
    R[cell] = 1.0
    ref = value_iteration(sub.replace(rewards=R, horizon=H - 5))[0].V[0, start]
    assert res.value == pytest.approx(ref, abs=1e-12)


def test_reward_beyond_an_exit_is_worthless(target):
    mdp, hier, layout, oracle = target
    r = np.zeros((mdp.num_states, 4))
    r[layout.index[(SIDE - 1, SIDE - 1)]] = 1.0
    assert oracle.within_cluster(mdp.start_state, r, 0).value == 0.0


def test_self_loop_reward_at_the_entrance():
    P = np.zeros((2, 2, 2))
    P[0, 0, 0] = 1.0
    P[0, 1, 1] = P[1, :, 1] = 1.0
    m = TabularMDP(P, np.zeros((2, 2)), 6, 0)
    oracle = HierarchyOracle(P, np.array([[False, True], [False, False]]), {0, 1}, 6, 1.0)
    r = np.zeros((2, 2))
    r[0, 0] = 0.3
    assert oracle.within_cluster(0, r, 2).value == pytest.approx(0.3 * 4)


def _in_room_adjacency(layout):
    return {c: grid_moves(layout.side, c) for c in layout.cells}


def test_goal_reaching_matches_exact_reaching_time_and_bfs(target):
    mdp, hier, layout, oracle = target
    adj = _in_room_adjacency(layout)
    inv = {v: k for k, v in layout.index.items()}
    S = mdp.num_states
    checked = 0
    for z in sorted(hier.entrances):
        for g in sorted(oracle.available_exits(z)):
            for h in (0, 10):
                res = oracle.goal_reaching(z, g, h)
                Ht = H - h
                t_exact = exact_reaching_time(mdp.transitions, res.table[:, :S], z, g, Ht)
                assert Ht - res.value == pytest.approx(t_exact, abs=1e-9)
                assert t_exact == bfs_distance(adj, inv[z], inv[g[0]]) + 1
                checked += 1
    assert checked >= 8


def test_adjacent_exit_takes_one_step(target):
    mdp, hier, layout, oracle = target
    _, s, a, _ = layout.gate_pairs()[0]
    res = oracle.goal_reaching(s, (s, a), 0)
    assert H - res.value == 1.0


def test_unavailable_exit_is_refused(target):
    mdp, hier, layout, oracle = target
    _, s, a, _ = layout.gate_pairs()[2]
    with pytest.raises(ValueError, match="not available"):
        oracle.goal_reaching(mdp.start_state, (s, a), 0)


def test_available_exits_are_the_room_gates(target):
    mdp, hier, layout, oracle = target
    for z in sorted(hier.entrances):
        c = int(hier.cluster_of[z])
        assert oracle.available_exits(z) == hier.cluster_exits(c)


def test_benchmark_availability_matches_ground_truth():
    fam = four_room_benchmark()
    h = fam.hierarchy
    oracle = HierarchyOracle.from_ground_truth(fam.tasks[0], h)
    assert oracle.eps0 == reachability_floor(oracle, h) == 1.0
    for z in sorted(h.entrances):
        assert oracle.available_exits(z) == h.cluster_exits(int(h.cluster_of[z]))


def test_tree_root_sees_both_gate_exits():
    fam = binary_tree_family(3, "01", 0)
    oracle = HierarchyOracle.from_ground_truth(fam.tasks[0], fam.hierarchy)
    g = tree_indices(3)["gate"]
    assert oracle.available_exits(0) == {(g, 0), (g, 1)}


def test_two_arm_exits_take_the_committed_corridors():
    Hc = 8
    mdp, hier = make_counterexample_env("two-arm", Hc)
    oracle = HierarchyOracle.from_ground_truth(mdp, hier)
    S = mdp.num_states
    for end in (Hc // 2, Hc):
        res = oracle.goal_reaching(0, (end, 0), 0)
        t = exact_reaching_time(mdp.transitions, res.table[:, :S], 0, (end, 0), Hc)
        # the end state is reached after exactly H/2 steps, the exit is taken on the next
        assert t == Hc // 2 + 1
        assert t == Hc - res.value


def test_two_arm_shortcut_breaks_the_gamma_condition():
    Hc = 8
    mdp, _ = make_counterexample_env("two-arm", Hc)
    stats = reaching_times(mdp, 0, Hc // 2)
    assert stats.t_min == 2 and stats.t_star == Hc // 2
    assert stats.gamma == pytest.approx(Hc / 4 - 1)


def test_reaching_times_basics(target):
    mdp, hier, layout, _ = target
    s = mdp.start_state
    assert reaching_times(mdp, s, s).t_star == 0.0
    adj = _in_room_adjacency(layout)
    far = layout.index[(2, 2)]
    st_ = reaching_times(mdp, s, far)
    d = bfs_distance(adj, (0, 0), (2, 2))
    assert st_.t_min == d and st_.t_star == d and st_.gamma == 0.0


def test_unreachable_target_clamps_at_the_horizon():
    P = np.zeros((2, 1, 2))
    P[0, 0, 0] = P[1, 0, 1] = 1.0
    m = TabularMDP(P, np.zeros((2, 1)), 5, 0)
    st_ = reaching_times(m, 0, 1)
    assert st_.t_min == 5 and st_.t_star == 5
    assert bfs_steps(P, 0, 1) is None


def test_expected_reaching_time_agrees_with_enumeration():
    rng = np.random.default_rng(4)
    P, _ = random_instance(rng, 4, 2, 4)
    table = rng.integers(0, 2, size=(5, 4))
    for pair in ((1, 0), (2, 1)):
        assert expected_reaching_time(P, table, 0, pair, 5) == pytest.approx(
            exact_reaching_time(P, table, 0, pair, 5), abs=1e-12)


@given(st.integers(2, 5), st.integers(1, 3), st.integers(1, 5), st.integers(0, 2**31 - 1))
def test_exact_model_value_is_the_sealed_optimum(S, A, Hq, seed):
    rng = np.random.default_rng(seed)
    P, R = random_instance(rng, S, A, Hq)
    mask = rng.random((S, A)) < 0.3
    oracle = HierarchyOracle(P, mask, set(range(S)), Hq, 1.0)
    exits = sorted(zip(*np.nonzero(mask)))
    success = [e for e in exits if rng.random() < 0.5]
    q = oracle.query(0, success, R)
    # independent construction of the sealed problem
    P2 = np.zeros((S + 2, A, S + 2))
    P2[:S, :, :S] = P
    P2[S, :, S] = P2[S + 1, :, S + 1] = 1.0
    for s, a in exits:
        P2[s, a] = 0.0
        P2[s, a, S if (s, a) in success else S + 1] = 1.0
    ref = value_iteration(TabularMDP(P2, q.reward, Hq, 0))[0].V[0, 0]
    assert oracle.solve(q).value == pytest.approx(ref, abs=1e-9)


def test_in_cluster_policies_leave_only_through_exits():
    specs = [FourRoomSpec(side=7, gates_open=(b,) * 4, slip=0.2, goal=(0, 6), horizon=30)
             for b in (True, False)]
    fam = make_four_room_family(specs)
    mdp, h = fam.tasks[0], fam.hierarchy
    oracle = HierarchyOracle.from_ground_truth(mdp, h)
    r = np.zeros((mdp.num_states, 4))
    layout = fam.labels["layout"]
    r[layout.index[(2, 2)]] = 1.0
    res = oracle.within_cluster(mdp.start_state, r, 0)
    states, actions, _ = simulate_batch(mdp, res.policy(mdp.num_states, 4), 500, rng_stream(0, "seal"))
    moved = h.cluster_of[states[:, 1:]] != h.cluster_of[states[:, :-1]]
    used = {(int(s), int(a)) for s, a in zip(states[:, :-1][moved], actions[moved])}
    assert used <= h.exits


def test_learned_oracle_entrances():
    class Fake:
        class reference:
            @staticmethod
            def estimate():
                P = np.zeros((3, 1, 3))
                P[:, 0, 0] = 1.0
                return P
        class exits:
            is_exit = np.array([[True], [False], [False]])
            rows = {(0, 0): np.array([[0.0, 0.0, 1.0]])}
    oracle = HierarchyOracle.from_meta_train(Fake, 0, 4, 0.5)
    assert oracle.entrances == {0, 2}
    with pytest.raises(ValueError):
        HierarchyOracle(np.zeros((3, 1, 3)), np.zeros((3, 1), bool), {0}, 3, 0.0)
