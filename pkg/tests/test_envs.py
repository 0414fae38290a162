import numpy as np
import pytest

from latenthrl.envs import (BinaryTreeSpec, FourRoomLayout, FourRoomSpec, LatentHierarchy,
                            binary_tree_family, exit_separation, four_room_benchmark,
                            four_room_target, make_binary_tree_mdp, make_counterexample_env,
                            make_four_room_family, tree_indices)
from latenthrl.mdp import TabularMDP, value_iteration
from oracles import bfs_distance, grid_moves


def _adjacency(layout, spec):
    adj = {c: grid_moves(layout.side, c) for c in layout.cells}
    for k, (src, _, dst) in enumerate(layout.gates):
        if spec.gates_open[k]:
            adj[src] = adj[src] + [dst]
    return adj


# -- four-room -----------------------------------------------------------------

def test_benchmark_shape_and_clusters():
    fam = four_room_benchmark()
    assert fam.T == 6 and fam.num_actions == 4 and fam.horizon == 30
    assert fam.num_states == 1 + 7 * 7
    h = fam.hierarchy
    assert h.num_clusters == 5 and h.K == 5
    layout = fam.labels["layout"]
    for cell in layout.cells:
        assert h.cluster_of[layout.index[cell]] == layout.room(cell) + 1
    assert (0, 0) in h.exits and h.cluster_of[0] == 0


def test_benchmark_exit_rows_are_fully_separated():
    fam = four_room_benchmark()
    assert fam.beta == 1.0


def test_benchmark_optimal_values_match_bfs():
    fam = four_room_benchmark()
    layout = fam.labels["layout"]
    for spec, mdp in zip(fam.labels["specs"], fam.tasks):
        d = bfs_distance(_adjacency(layout, spec), spec.start, spec.goal)
        # one step leaves the dummy start; reward is collected on every step at the goal
        expected = 0 if d is None else max(0, mdp.horizon - 1 - d)
        assert value_iteration(mdp)[0].V[0, 0] == pytest.approx(expected)


def test_non_exit_rows_are_identical_across_tasks():
    fam = four_room_benchmark()
    mask = fam.hierarchy.exit_mask(4)
    base = fam.tasks[0].transitions
    for t in fam.tasks[1:]:
        assert np.array_equal(t.transitions[~mask], base[~mask])


def test_exit_that_never_varies_is_rejected():
    specs = [FourRoomSpec(side=5, gates_open=(True, True, True, b)) for b in (True, False)]
    with pytest.raises(ValueError, match="exit never varies"):
        make_four_room_family(specs)


def test_per_task_starts_need_the_dummy():
    specs = [FourRoomSpec(side=5, gates_open=(b,) * 4, start=s)
             for b, s in ((True, (0, 0)), (False, (0, 1)))]
    with pytest.raises(ValueError, match="dummy"):
        make_four_room_family(specs)


def test_dummy_start_routes_action_zero_to_the_task_start():
    fam = four_room_benchmark()
    layout = fam.labels["layout"]
    for spec, m in zip(fam.labels["specs"], fam.tasks):
        assert m.transitions[0, 0, layout.index[spec.start]] == 1.0
        assert (m.transitions[0, 1:, 0] == 1.0).all()


def test_gate_positions_checked():
    with pytest.raises(ValueError, match="gate positions"):
        FourRoomLayout(7, (5, 5, 5, 5), False)


def test_slip_keeps_rows_stochastic():
    spec = FourRoomSpec(side=5, slip=0.2, gates_open=(True,) * 4)
    fam = make_four_room_family([spec, FourRoomSpec(side=5, slip=0.2, gates_open=(False,) * 4)])
    P = fam.tasks[0].transitions
    np.testing.assert_allclose(P.sum(-1), 1.0)
    assert (P.max(-1) >= 0.8 - 1e-12).all()


def test_target_room_is_bottom_right():
    mdp, hier, room = four_room_target(side=7, horizon=30)
    assert len(room) == 9
    assert {int(hier.cluster_of[s]) for s in room} == {2}
    with pytest.raises(ValueError, match="bottom-right"):
        four_room_target(goal=(0, 0))


# -- binary tree ---------------------------------------------------------------

@pytest.mark.parametrize("W", [2, 3, 4])
def test_gate_probability_is_raised_only_at_the_star_pair(W):
    leaf = "1" * (W - 1)
    mdp, _ = make_binary_tree_mdp(BinaryTreeSpec(W, leaf, 1, 0))
    ix = tree_indices(W)
    star = ix["first_leaf"] + int(leaf, 2)
    for i in range(ix["first_leaf"], 2 ** W):
        for a in (0, 1):
            want = 0.6 if (i, a) == (star, 1) else 0.5
            assert mdp.transitions[i, a, ix["gate"]] == pytest.approx(want)


def test_tree_spec_validation():
    for bad in (BinaryTreeSpec(1, "", 0, 0), BinaryTreeSpec(3, "0", 0, 0),
                BinaryTreeSpec(3, "00", 2, 0), BinaryTreeSpec(3, "00", 0, 0, eps=0.7),
                BinaryTreeSpec(3, "00", 0, 0, horizon=5)):
        with pytest.raises(ValueError):
            bad.validate()


def test_reduced_tree_value():
    W, H = 2, 6
    mdp, _ = make_binary_tree_mdp(BinaryTreeSpec(W, "0", 0, 0, horizon=H), "reduced")
    assert value_iteration(mdp)[0].V[0, 0] == pytest.approx((H - W - 1) * 0.6)


def test_tree_family_differs_only_at_the_gate():
    fam = binary_tree_family(3, "01", 0)
    ix = tree_indices(3)
    a, b = (t.transitions for t in fam.tasks)
    diff = {(s, u) for s in range(a.shape[0]) for u in (0, 1) if not np.array_equal(a[s, u], b[s, u])}
    assert diff == {(ix["gate"], 0), (ix["gate"], 1)}
    assert fam.beta == 1.0


# -- counterexamples -------------------------------------------------------------

@pytest.mark.parametrize("H", [8, 16])
def test_chain_optimum(H):
    mdp, hier = make_counterexample_env("chain", H)
    assert value_iteration(mdp)[0].V[0, 0] >= H - 3
    assert hier.num_clusters == 2


def test_two_arm_values():
    H = 8
    mdp, hier = make_counterexample_env("two-arm", H)
    V, _ = value_iteration(mdp)
    # the shortcut lands on an arm end after two steps, then every step pays 1
    assert V.V[0, 0] == pytest.approx(H - 2)
    # each committed corridor reaches its exit state in exactly H/2 steps
    P = mdp.transitions
    for first, end in ((0, H // 2), (1, H)):
        adj = {st: [int(t) for t in np.flatnonzero(P[st].sum(0))] for st in range(1, P.shape[0])}
        adj[0] = [int(t) for t in np.flatnonzero(P[0, first])]
        assert bfs_distance(adj, 0, end) == H // 2
    with pytest.raises(ValueError):
        make_counterexample_env("two-arm", 5)
    with pytest.raises(ValueError):
        make_counterexample_env("nope")


# -- helpers -------------------------------------------------------------------

def test_hierarchy_range_checks():
    with pytest.raises(ValueError):
        LatentHierarchy(np.zeros(2), {3}, set())
    with pytest.raises(ValueError):
        LatentHierarchy(np.zeros(2), set(), {(5, 0)})


def test_exit_separation_is_inf_without_differences():
    P = np.ones((1, 1, 1))
    m = TabularMDP(P, np.zeros((1, 1)), 1)
    assert exit_separation([m, m], {(0, 0)}) == np.inf
