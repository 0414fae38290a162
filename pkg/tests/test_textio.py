import numpy as np
import pytest
from hypothesis import given, strategies as st

from latenthrl.envs import four_room_benchmark, make_counterexample_env
from latenthrl.mdp import TabularMDP
from latenthrl.textio import (counts_from_text, counts_to_text, hierarchy_from_text,
                              hierarchy_to_text, load_mdp, mdp_from_text, mdp_to_text,
                              policies_from_text, policies_to_text, save_mdp)
from oracles import random_instance


@given(st.integers(1, 5), st.integers(1, 3), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_stationary_mdp_round_trip_is_bit_exact(S, A, H, seed):
    P, R = random_instance(np.random.default_rng(seed), S, A, H)
    m = TabularMDP(P, R, H, S - 1)
    back = mdp_from_text(mdp_to_text(m))
    np.testing.assert_array_equal(back.transitions, m.transitions)
    np.testing.assert_array_equal(back.rewards, m.rewards)
    assert (back.horizon, back.start_state) == (H, S - 1)


def test_per_step_mdp_round_trip():
    rng = np.random.default_rng(0)
    P = np.stack([random_instance(rng, 3, 2, 2)[0] for _ in range(2)])
    m = TabularMDP(P, rng.random((3, 2)), 2, 0)
    back = mdp_from_text(mdp_to_text(m))
    assert not back.stationary
    np.testing.assert_array_equal(back.transitions, m.transitions)


def test_terminal_mask_survives(tmp_path):
    m, _ = make_counterexample_env("chain", 4)
    save_mdp(m, tmp_path / "m.txt")
    back = load_mdp(tmp_path / "m.txt")
    np.testing.assert_array_equal(back.terminal_mask, m.terminal_mask)


def test_bad_header_rejected():
    with pytest.raises(ValueError, match="tabular-mdp"):
        mdp_from_text("nonsense\n")


def test_short_row_rejected():
    text = "tabular-mdp 1\n2 1 1 0 stationary\nterminal -\n0 1 0\n0 0\n"
    with pytest.raises(ValueError, match="needs 3"):
        mdp_from_text(text)


def test_hierarchy_round_trip():
    h = four_room_benchmark().hierarchy
    back = hierarchy_from_text(hierarchy_to_text(h))
    np.testing.assert_array_equal(back.cluster_of, h.cluster_of)
    assert back.entrances == h.entrances and back.exits == h.exits


def test_counts_round_trip():
    c = np.random.default_rng(1).integers(0, 3, size=(4, 2, 4))
    np.testing.assert_array_equal(counts_from_text(counts_to_text(c)), c)


def test_policy_set_round_trip():
    tables = np.random.default_rng(2).integers(0, 3, size=(5, 4, 3))
    ret = np.linspace(0, 1, 5)
    t2, r2 = policies_from_text(policies_to_text(tables, ret))
    np.testing.assert_array_equal(t2, tables)
    np.testing.assert_array_equal(r2, ret)
    _, r3 = policies_from_text(policies_to_text(tables))
    assert np.isnan(r3).all()
