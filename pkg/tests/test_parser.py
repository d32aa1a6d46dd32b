import numpy as np
import pytest
from hypothesis import given, strategies as st

from primil.demos import Demonstration, script_demo
from primil.parser import (
    EmptyDemo,
    IdmScorer,
    OracleScoreTable,
    ParsedSegment,
    ParsedSequence,
    TooLarge,
    candidate_boundaries,
    load_parsed,
    parse_bruteforce,
    parse_dp,
    parse_greedy,
    replay,
    save_parsed,
)
from primil.primitives import N_CLASSES, PrimitiveType as P, execute_primitive
from primil.world import PICK_PLACE_LITE, reset


def table(n, seed, low=-6.0):
    return OracleScoreTable.random(n, np.random.default_rng(seed), low=low)


def same(a, b):
    return a.total_log_score == b.total_log_score and a.key() == b.key()


def test_candidate_boundaries_include_end():
    assert candidate_boundaries(10, 3) == [0, 3, 6, 9, 10]
    assert candidate_boundaries(9, 3) == [0, 3, 6, 9]
    with pytest.raises(ValueError):
        candidate_boundaries(5, 0)


def test_t6_matches_bruteforce():
    t = OracleScoreTable(list(range(7)), np.random.default_rng(1).uniform(-5, 0, (7, 7, N_CLASSES)))
    a, b = parse_dp(None, t), parse_bruteforce(None, t)
    assert same(a, b)
    a.check(6)


@given(n=st.integers(2, 10), seed=st.integers(0, 2**32), alpha=st.sampled_from([1e-4, 0.1, 1.0]))
def test_dp_equals_bruteforce(n, seed, alpha):
    t = table(n, seed)
    a, b = parse_dp(None, t, alpha), parse_bruteforce(None, t, alpha)
    assert same(a, b)
    a.check(t.T)
    assert parse_greedy(None, t, alpha).total_log_score <= a.total_log_score


@given(n=st.integers(2, 9), seed=st.integers(0, 2**32))
def test_dp_equals_bruteforce_with_ties(n, seed):
    # coarse integer scores force many exact ties
    rng = np.random.default_rng(seed)
    t = OracleScoreTable(list(range(n)), rng.integers(-3, 1, (n, n, N_CLASSES)).astype(float))
    assert same(parse_dp(None, t, 1.0), parse_bruteforce(None, t, 1.0))


def test_all_equal_scores_tiebreak():
    n = 7
    t = OracleScoreTable(list(range(n)), np.zeros((n, n, N_CLASSES)))
    q = parse_dp(None, t, alpha=1.0)
    assert len(q) == 1 and q.segments[0].p == P.REACH  # fewest segments, then lowest class
    assert same(q, parse_bruteforce(None, t, 1.0))


def test_earlier_boundary_wins_tie():
    n = 7
    tab = np.full((n, n, N_CLASSES), -50.0)
    # two 2-segment parses with equal totals: cut at 2 or at 4
    tab[0, 2, 1] = tab[2, 6, 1] = -1.0
    tab[0, 4, 1] = tab[4, 6, 1] = -1.0
    q = parse_dp(None, OracleScoreTable(list(range(n)), tab), 1.0)
    assert q.boundaries == [0, 2, 6]


def test_t2_single_segment():
    q = parse_bruteforce(None, OracleScoreTable([0, 2], np.zeros((2, 2, N_CLASSES))))
    assert len(q) == 1 and (q.segments[0].t_start, q.segments[0].t_end) == (0, 2)


def test_alpha_limit_avoids_other():
    n = 6
    tab = np.full((n, n, N_CLASSES), -3.0)
    tab[:, :, int(P.OTHER)] = 0.0
    t = OracleScoreTable(list(range(n)), tab)
    q = parse_bruteforce(None, t, alpha=1e-12)
    assert P.OTHER not in q.types
    assert parse_dp(None, t, alpha=1.0).types == [P.OTHER]


@given(n=st.integers(2, 8), seed=st.integers(0, 2**32))
def test_alpha_monotone(n, seed):
    t = table(n, seed)
    counts = [parse_bruteforce(None, t, a).types.count(P.OTHER) for a in (1.0, 0.3, 1e-2, 1e-4)]
    assert all(b <= a for a, b in zip(counts, counts[1:]))


def test_greedy_strictly_worse_example():
    n = 5
    tab = np.full((n, n, N_CLASSES), -20.0)
    tab[0, 2, 0] = -0.1   # tempting first step
    tab[2, 4, 0] = -10.0  # that leads nowhere good
    tab[0, 4, 1] = -1.0   # one solid segment
    t = OracleScoreTable(list(range(n)), tab)
    g, d = parse_greedy(None, t, 1.0), parse_dp(None, t, 1.0)
    assert g.total_log_score < d.total_log_score


def test_greedy_equals_dp_with_dominant_segmentation():
    n = 6
    tab = np.full((n, n, N_CLASSES), -30.0)
    tab[0, 3, 1] = tab[3, 5, 2] = -0.01
    t = OracleScoreTable(list(range(n)), tab)
    assert same(parse_greedy(None, t, 1.0), parse_dp(None, t, 1.0))


def test_scoring_call_bound():
    n = 12
    t = table(n, 5)
    parse_dp(None, t)
    assert t.calls <= n * n * N_CLASSES


def test_bruteforce_too_large():
    with pytest.raises(TooLarge):
        parse_bruteforce(None, table(19, 0))


def test_empty_demo(small_pp_idm):
    with pytest.raises(EmptyDemo):
        parse_dp(Demonstration("PickPlaceLite", 0, [], reset(PICK_PLACE_LITE, 0)), small_pp_idm)


def test_segment_invariant():
    with pytest.raises(ValueError):
        ParsedSegment(0, 2, P.OTHER, np.zeros(4), 0.0)


def test_single_grasp_rollout_parses_as_grasp(small_pp_idm):
    s = reset(PICK_PLACE_LITE, 21)
    o = s.objects[0]
    seg = execute_primitive(s, P.GRASP, np.array([o.x, o.y, 0.01, 0.0]))
    demo = Demonstration("PickPlaceLite", 21, list(seg.transitions), seg.final_state)
    q = parse_dp(demo, small_pp_idm)
    assert q.types == [P.GRASP]
    assert (q.segments[0].t_start, q.segments[0].t_end) == (0, len(demo))


def test_real_scores_dp_equals_bruteforce(small_pp_idm):
    d = script_demo("PickPlaceLite", 8, 0.1)
    stride = -(-len(d) // 12)
    a = parse_dp(d, small_pp_idm, stride=stride)
    b = parse_bruteforce(d, small_pp_idm, stride=stride)
    assert same(a, b)
    a.check(len(d))


def test_parse_determinism_and_scorer(small_pp_idm):
    d = script_demo("PickPlaceLite", 9, 0.1)
    a, b = parse_dp(d, small_pp_idm, stride=4), parse_dp(d, small_pp_idm, stride=4)
    assert same(a, b)
    sc = IdmScorer(small_pp_idm, d.states)
    assert sc.T == len(d)


def test_replay_aborts_on_other():
    d = script_demo("PickPlaceLite", 1)
    q = ParsedSequence("x", [ParsedSegment(0, len(d), P.OTHER, None, -1.0)], -1.0)
    r = replay(q, d)
    assert r.aborted_on_other and not r.success and r.executed == 0


def test_replay_hand_parse_succeeds():
    d = script_demo("PickPlaceLite", 1)
    o = d.initial_state.objects[0]
    q = ParsedSequence("x", [ParsedSegment(0, 50, P.GRASP, np.array([o.x, o.y, 0.01, 0.0]), 0.0),
                             ParsedSegment(50, len(d), P.PLACE, np.array([0.72, 0.57, 0.05, 0.0]), 0.0)], 0.0)
    assert replay(q, d).success


def test_parsed_roundtrip(tmp_path):
    t = table(8, 3)
    seqs = [parse_dp(None, t), parse_greedy(None, t)]
    save_parsed(seqs, tmp_path / "p.rec")
    back = load_parsed(tmp_path / "p.rec")
    for a, b in zip(seqs, back):
        assert a.key() == b.key() and a.total_log_score == b.total_log_score
        for u, v in zip(a.segments, b.segments):
            assert (u.x is None and v.x is None) or np.array_equal(u.x, v.x)
