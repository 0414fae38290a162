import numpy as np
import pytest

from latenthrl.envs import (FourRoomLayout, FourRoomSpec, binary_tree_family, four_room_target,
                            make_binary_tree_mdp, make_counterexample_env, tree_indices,
                            BinaryTreeSpec)
from latenthrl.mdp import Trajectory, rng_stream, value_iteration
from latenthrl.metatest import (STOP, BaseSession, MetaTestConfig, SurrogateMDP,
                                extract_meta_history, perform_meta_transition, rewrite_history,
                                run_hierarchy_learner, run_separation_experiment)
from latenthrl.oracle import HierarchyOracle, reaching_times
from oracles import bfs_distance, grid_moves

SIDE, H = 7, 60
CFG = MetaTestConfig(H_eff=3, W=4)


def setup(slip=0.0, cfg=CFG):
    mdp, hier, room = four_room_target(side=SIDE, horizon=H, slip=slip)
    oracle = HierarchyOracle.from_ground_truth(mdp, hier)
    layout = FourRoomLayout(SIDE, FourRoomSpec(side=SIDE).resolved_gates(), False)
    return mdp, hier, room, layout, SurrogateMDP(mdp, oracle, room, cfg)


@pytest.fixture(scope="module")
def det():
    return setup()


# -- configuration ---------------------------------------------------------------

@pytest.mark.parametrize("bad", [dict(H_eff=0, W=1), dict(H_eff=1, W=1, gamma=-1),
                                 dict(H_eff=1, W=1, zeta=1.0), dict(H_eff=1, W=1, num_episodes=-1)])
def test_config_rejects(bad):
    with pytest.raises(ValueError):
        MetaTestConfig(**bad)


def test_time_cap_formula():
    cfg = MetaTestConfig(H_eff=3, W=4, gamma=0.5, eps=0.2, beta=1.0, zeta=0.25)
    step = 1.5 * 4 + 0.2
    want = 3 * (1 + step) + step * np.sqrt(2 * 3 * np.log(4))
    assert cfg.time_cap(1000) == int(np.ceil(want))
    assert cfg.time_cap(10) == 10
    assert MetaTestConfig(H_eff=1, W=1, h_bar=7).time_cap(100) == 7


def test_width_condition_enforced():
    mdp, hier, room = four_room_target(side=SIDE, horizon=H)
    oracle = HierarchyOracle.from_ground_truth(mdp, hier)
    with pytest.raises(ValueError, match="exceeds"):
        SurrogateMDP(mdp, oracle, room, MetaTestConfig(H_eff=5, W=5))


def test_incompatible_reward_support_refused():
    mdp, hier, room = four_room_target(side=SIDE, horizon=H)
    oracle = HierarchyOracle.from_ground_truth(mdp, hier)
    with pytest.raises(ValueError, match="incompatible reward support"):
        SurrogateMDP(mdp, oracle, set(), CFG)


def test_indexing_round_trip(det):
    *_, sur = det
    for s in sur.entrances:
        for h in (0, sur.h_bar + 1):
            assert sur.decode(sur.encode(s, h)) == (s, h)
    assert sur.decode(sur.stop_state) == STOP and sur.action_of(sur.stop_action) == STOP
    with pytest.raises(ValueError):
        sur.encode(sur.entrances[0], sur.h_bar + 2)


def test_mask_offers_available_exits_plus_stop(det):
    mdp, hier, room, layout, sur = det
    m = sur.mask()
    z = sur.start
    offered = {sur.action_of(g) for g in np.flatnonzero(m[z])}
    assert offered == set(hier.cluster_exits(int(hier.cluster_of[mdp.start_state]))) | {STOP}


# -- meta-transition branches ----------------------------------------------------------

def session(mdp, seed=0):
    return BaseSession(mdp, rng_stream(seed, "session"))


def test_stop_absorbs(det):
    mdp, *_, sur = det
    assert perform_meta_transition(session(mdp), sur, sur.stop_state, 0) == (sur.stop_state, 0.0)


def test_stop_action_plays_out_the_cluster(det):
    mdp, *_, sur = det
    sess = session(mdp)
    z, r = perform_meta_transition(sess, sur, sur.start, sur.stop_action)
    assert z == sur.stop_state and r == 0.0 and sess.finished


def test_success_lands_after_the_bfs_distance(det):
    mdp, hier, room, layout, sur = det
    inv = {v: k for k, v in layout.index.items()}
    adj = {c: grid_moves(SIDE, c) for c in layout.cells}
    _, s, a, land = layout.gate_pairs()[0]
    sess = session(mdp)
    z, r = perform_meta_transition(sess, sur, sur.start, sur.exits.index((s, a)))
    d = bfs_distance(adj, inv[mdp.start_state], inv[s]) + 1
    assert sur.decode(z) == (land, d) and r == 0.0


def test_target_cluster_entry_collects_the_room_reward(det):
    mdp, hier, room, layout, sur = det
    sess = session(mdp)
    z = sur.start
    for k in (0, 1):
        _, s, a, _ = layout.gate_pairs()[k]
        z, _ = perform_meta_transition(sess, sur, z, sur.exits.index((s, a)))
    s, h = sur.decode(z)
    assert s in room
    z2, r = perform_meta_transition(sess, sur, z, 0)
    assert z2 == sur.stop_state
    assert r == pytest.approx(sur.idle_value(z)) and r > 0
    assert sum(sess.rewards) == r


def test_timeout_returns_to_the_entrance_past_the_cap():
    cfg = MetaTestConfig(H_eff=3, W=4, h_bar=2)
    mdp, hier, room, layout, sur = setup(cfg=cfg)
    _, s, a, _ = layout.gate_pairs()[0]
    sess = session(mdp)
    z, r = perform_meta_transition(sess, sur, sur.start, sur.exits.index((s, a)))
    assert sur.decode(z) == (mdp.start_state, 3) and r == 0.0 and sess.finished


def test_stalled_meta_state_loops_or_stops():
    cfg = MetaTestConfig(H_eff=3, W=4, h_bar=2)
    mdp, *_, sur = setup(cfg=cfg)
    z = sur.encode(mdp.start_state, 3)
    assert perform_meta_transition(session(mdp), sur, z, 0) == (z, 0.0)
    assert perform_meta_transition(session(mdp), sur, z, sur.stop_action) == (sur.stop_state, 0.0)


def test_desync_is_detected(det):
    mdp, *_, sur = det
    sess = session(mdp)
    sess.step(1)
    with pytest.raises(RuntimeError, match="meta-state"):
        perform_meta_transition(sess, sur, sur.start, 0)


# -- exact surrogate model ---------------------------------------------------------------

def test_best_surrogate_value_matches_the_flat_optimum(det):
    mdp, *_, sur = det
    assert sur.best_value() == pytest.approx(value_iteration(mdp)[0].V[0, 0])


def test_exact_value_agrees_with_monte_carlo():
    mdp, hier, room, layout, sur = setup(slip=0.1)
    table = np.full((sur.meta_horizon, sur.num_states), sur.stop_action)
    g0 = sur.exits.index(layout.gate_pairs()[0][1:3])
    g1 = sur.exits.index(layout.gate_pairs()[1][1:3])
    table[0, :] = g0
    table[1, :] = g1
    exact = sur.exact_value(table)
    rng = rng_stream(3, "mc")
    returns = []
    for _ in range(3000):
        sess = BaseSession(mdp, rng)
        z = sur.start
        for m in range(sur.meta_horizon):
            z, _ = perform_meta_transition(sess, sur, z, int(table[m, z]))
        d = sur.decode(z)
        if d != STOP and not sess.finished:
            sess.run(sur.within_cluster(*d).table, d[1], sur.H)
        returns.append(sum(sess.rewards))
    returns = np.array(returns)
    assert abs(returns.mean() - exact) <= 3 * returns.std() / np.sqrt(len(returns))


def test_execution_time_bound_for_a_fixed_history():
    mdp, hier, room, layout, sur = setup(slip=0.1)
    path = [layout.gate_pairs()[k] for k in (0, 1)]
    starts = [mdp.start_state, path[0][3]]
    stats = [reaching_times(mdp, z, (s, a)) for z, (_, s, a, _) in zip(starts, path)]
    W = max(st.t_min for st in stats)
    gamma = max(st.gamma for st in stats)
    bound = (1 + (1 + gamma) * W) * len(path)
    rng = rng_stream(4, "exec")
    times = []
    for _ in range(2000):
        sess = BaseSession(mdp, rng)
        z = sur.start
        for _, s, a, _ in path:
            z, _ = perform_meta_transition(sess, sur, z, sur.exits.index((s, a)))
        times.append(sur.decode(z)[1] if sur.decode(z)[1] <= sur.h_bar else sur.h_bar + 1)
    times = np.array(times, dtype=float)
    assert times.mean() <= bound + 3 * times.std() / np.sqrt(len(times))


# -- learner ---------------------------------------------------------------------------

def test_zero_episodes_give_an_empty_curve(det):
    mdp, hier, room, layout, sur = det
    cfg = MetaTestConfig(H_eff=3, W=4, num_episodes=0)
    run = run_hierarchy_learner(mdp, sur.oracle, room, cfg, rng_stream(0))
    assert len(run.regret) == 0 and len(run.cumulative) == 0


def test_surrogate_returns_equal_base_returns():
    mdp, hier, room, layout, sur = setup(slip=0.1)
    cfg = MetaTestConfig(H_eff=3, W=4, num_episodes=60)
    run = run_hierarchy_learner(mdp, sur.oracle, room, cfg, rng_stream(5, "faithful"))
    np.testing.assert_array_equal(run.returns, run.meta_returns)
    assert (run.timesteps == H).all()


def test_learner_converges_on_the_target_room(det):
    mdp, hier, room, layout, sur = det
    cfg = MetaTestConfig(H_eff=3, W=4, num_episodes=300)
    run = run_hierarchy_learner(mdp, sur.oracle, room, cfg, rng_stream(6, "conv"))
    assert run.regret[-50:].max() == 0.0
    assert (run.regret >= 0).all()


def test_start_cluster_target_learns_in_room_behaviour():
    spec = FourRoomSpec(side=SIDE, goal=(2, 2), start=(0, 0), horizon=H)
    layout = FourRoomLayout(SIDE, spec.resolved_gates(), False)
    from latenthrl.envs import _four_room_hierarchy, _four_room_task
    mdp = _four_room_task(spec, layout)
    hier = _four_room_hierarchy(layout, [spec])
    oracle = HierarchyOracle.from_ground_truth(mdp, hier)
    room0 = {layout.index[c] for c in layout.cells if layout.room(c) == 0}
    cfg = MetaTestConfig(H_eff=3, W=4, num_episodes=100)
    run = run_hierarchy_learner(mdp, oracle, room0, cfg, rng_stream(7))
    assert run.regret[-20:].max() == 0.0 and run.v_star == H - 4


def test_chain_hierarchy_is_capped_near_half_the_horizon():
    Hc = 16
    mdp, hier = make_counterexample_env("chain", Hc)
    oracle = HierarchyOracle.from_ground_truth(mdp, hier)
    sur = SurrogateMDP(mdp, oracle, hier.members(1),
                       MetaTestConfig(H_eff=1, W=Hc + 1, enforce_width=False))
    assert abs(sur.best_value() - Hc / 2) <= 1
    assert value_iteration(mdp)[0].V[0, 0] >= Hc - 3


# -- meta-histories --------------------------------------------------------------------

def _traj(states, actions):
    return Trajectory(np.array(states), np.array(actions), np.zeros(len(actions)))


def test_history_without_exits(det):
    mdp, hier, *_ = det
    h = extract_meta_history(_traj([0, 1, 0], [1, 3]), hier)
    assert h.sequence() == (0,) and len(h) == 0


def test_history_with_one_exit_at_step_three():
    from latenthrl.envs import LatentHierarchy
    hier = LatentHierarchy(np.array([0, 0, 0, 0, 1]), {0, 4}, {(3, 1)})
    h = extract_meta_history(_traj([0, 1, 2, 3, 4, 4], [0, 0, 0, 1, 0]), hier)
    assert h.sequence() == (0, (3, 1), 4)


def test_tree_success_path_is_one_exit():
    W = 3
    spec = BinaryTreeSpec(W, "10", 1, 0)
    mdp, hier = make_binary_tree_mdp(spec)
    ix = tree_indices(W)
    star = ix["first_leaf"] + int("10", 2)
    states = [0, 1, 3, star, ix["gate"], ix["sink_success"], ix["sink_success"]]
    actions = [0, 1, 0, 1, 0, 0]
    h = extract_meta_history(_traj(states, actions), hier)
    assert h.exits == ((ix["gate"], 0),) and h.entrances[-1] == ix["sink_success"]


def test_history_rewrite_example():
    W = 2
    ix = tree_indices(W)
    states = [0, 1, 2, ix["gate"], ix["sink_fail"], ix["sink_fail"]]
    actions = [0, 0, 1, 1, 0]
    s2, r2 = rewrite_history(states, actions, W, a_star=1)
    assert s2[4] == ix["sink_success"] and r2[3] == 1.0
    assert s2[5] == ix["sink_success"] and r2[4] == 1.0
    s3, r3 = rewrite_history(states, [0, 0, 1, 0, 0], W, a_star=1)
    assert s3[4] == ix["sink_fail"] and r3[3] == 0.0 and r3[4] == 0.0


# -- separation ------------------------------------------------------------------------

def test_separation_comparators_are_exact():
    rows, curves = run_separation_experiment([2], 40, [0])
    by = {r["learner"]: r for r in rows}
    assert set(by) == {"flat", "hierarchy", "reduction"}
    H = 3 * 2 + 3
    assert by["reduction"]["v_star"] == pytest.approx((H - 2 - 1) * 0.6)
    assert by["flat"]["v_star"] == by["hierarchy"]["v_star"]
    for key, c in curves.items():
        assert len(c) == 40 and (np.diff(c) >= -1e-12).all()


def test_separation_rejects_tiny_width():
    with pytest.raises(ValueError):
        run_separation_experiment([1], 10, [0])
