import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fvsim import genealogy as G
from fvsim import particles as P
from fvsim.domain import CoefficientField, FormSpec

TOY = CoefficientField.toy()


def _log(N, events_1based):
    return P.EventLog.from_events(N, [(t, v - 1, j - 1) for t, v, j in events_1based])


# a six-event pattern whose fixation index switches at t=1 and which is unfixed from t=2.25; 1-based (time, victim, target)
SWITCH = [(1.0, 1, 2), (1.75, 2, 4), (2.25, 3, 1), (2.5, 4, 1), (3.5, 2, 3), (3.75, 1, 3)]


def test_identity_and_single_event():
    log = _log(4, [(1.0, 2, 3)])
    assert all(G.ancestor_index(log, 2.0, 2.0, i) == i for i in range(4))
    assert G.ancestor_index(log, 0.0, 3.0, 1) == 2  # particle 2 died onto 3 at t=1
    assert G.ancestor_index(log, 0.0, 3.0, 0) == 0


def test_fixation_index_switches():
    log = _log(4, SWITCH)
    for t in (0.0, 0.5, 0.99):
        r = G.fixation_scan(log, t)
        assert r.fixed and r.time == 3.5 and r.index == 1  # zeta_t = 2
    for t in (1.0, 1.5, 2.2):
        r = G.fixation_scan(log, t)
        assert r.fixed and r.time == 3.5 and r.index == 0  # zeta_t = 1
    r = G.fixation_scan(log, 2.25)
    assert not r.fixed and r.time is None and r.index is None
    with pytest.raises(G.Unfixed):
        G.spine_index(log, 2.25)


def test_two_particles_fix_at_first_event():
    log = _log(2, [(0.4, 1, 2), (0.9, 2, 1)])
    r = G.fixation_scan(log, 0.1)
    assert r.time == 0.4 and r.index == 1


def _random_log(gen, N=5, n=20):
    t = np.sort(gen.random(n)) * 10
    v = gen.integers(0, N, n)
    j = (v + gen.integers(1, N, n)) % N
    return P.EventLog.from_events(N, list(zip(t, v, j)))


@settings(max_examples=50)
@given(st.integers(0, 2**32))
def test_composition_and_forward_replay(seed):
    gen = np.random.default_rng(seed)
    log = _random_log(gen)
    s, u, t = np.sort(gen.random(3) * 10)
    for i in range(5):
        assert G.ancestor_index(log, s, t, i) == G.ancestor_index(log, s, u, G.ancestor_index(log, u, t, i))
        assert G.ancestor_map(log, s, t)[i] == G.ancestor_index(log, s, t, i)
    # forward oracle: carry labels of the particles alive at s
    lab = np.arange(5)
    w = log.window(s, t)
    for v, j in zip(log.victims[w], log.targets[w]):
        lab[v] = lab[j]
    assert np.array_equal(lab, G.ancestor_map(log, s, t))


@settings(max_examples=30)
@given(st.integers(0, 2**32))
def test_coalescence_is_monotone(seed):
    gen = np.random.default_rng(seed)
    log = _random_log(gen, n=40)
    t = gen.random() * 3
    counts = [np.unique(G.ancestor_map(log, t, tp)).size for tp in np.linspace(t, 10, 30)]
    assert all(a >= b for a, b in zip(counts, counts[1:]))


@pytest.fixture(scope="module")
def micro_runs():
    out = []
    for seed in range(25):
        s = P.init_system(TOY, 5, seed=seed, dt=1e-2, store_paths_until=3.0, colours="index")
        P.run(s, 3.0)
        out.append((s, s.events, s.path_store()))
    return out


def test_dhp_properties(micro_runs):
    for s, log, ps in micro_runs:
        for i in range(5):
            h = G.dhp(log, ps, i, 3.0)
            assert np.allclose(h.value(3.0), s.positions[i])  # ends at X^i_t
            for a in h.starts[1:]:
                assert np.allclose(h.value(a), h.value(a, left=True))  # continuous
            for tt in np.linspace(0, 3, 13):
                assert h.index_at(tt) == G.ancestor_index(log, tt, 3.0, i)
    s = P.init_system(TOY.without_killing(), 3, seed=0, dt=1e-2, store_paths_until=1.0)
    P.run(s, 1.0)
    h = G.dhp(s.events, s.path_store(), 2, 1.0)
    assert h.particles == (2,)
    with pytest.raises(ValueError):
        G.dhp(s.events, s.path_store(), 2, 2.0)
    with pytest.raises(ValueError):
        G.dhp(s.events, None, 2, 1.0)


def test_spine_equals_any_late_dhp(micro_runs):
    checked = 0
    for s, log, ps in micro_runs:
        r = G.fixation_scan(log, 1.0)
        if not r.fixed or r.time > 3.0:
            continue
        sp = G.spine(log, ps, 1.0)
        ts = np.linspace(0, 1, 21)
        for i in range(5):
            h = G.dhp(log, ps, i, 3.0)
            assert np.allclose(h.values(ts), sp.values(ts))
        checked += 1
    assert checked >= 5


def test_augmented_dhp_is_a_v_primary_tree(micro_runs):
    # exhaustive over every particle of every micro run
    for s, log, ps in micro_runs:
        for i in range(5):
            a = G.augmented_dhp(log, ps, i, 3.0)
            a.validate()
            root = G.ancestor_index(log, 0.0, 3.0, i)
            u = G.descendant_tree(log, ps, root, 0.0, 3.0)
            u.validate()
            leaf = [v for v, m in u.marks.items() if m.t_d is None and m.index == i]
            assert len(leaf) == 1
            b = G.v_primary(u, leaf[0])
            assert G.trees_equal(a, b)
            assert G.tree_distance(a, b) < 1e-9
            assert a.primary_length() == len(leaf[0])


def test_descendant_tree_small_cases():
    s = P.init_system(TOY.without_killing(), 3, seed=0, dt=1e-2, store_paths_until=1.0)
    P.run(s, 1.0)
    u = G.descendant_tree(s.events, s.path_store(), 0, 0.0, 1.0)
    assert u.labels == {""} and u[""].t_d is None
    log = P.EventLog.from_events(3, [(0.5, 1, 0)])
    u = G.descendant_tree(log, None, 0, 0.0, 1.0)
    assert u.labels == {"", "1", "2"} and u["2"].index == 1 and u["1"].index == 0
    assert u[""].t_d == 0.5 and u["1"].t_b == 0.5


def test_side_trees_follow_branch_direction():
    N = 4
    # 2 jumps onto 1 at t=1, then 1 dies onto 3 at t=2; at T=3 particle 2 descends from 1 via the first event
    log = P.EventLog.from_events(N, [(1.0, 1, 0), (2.0, 0, 2)])
    ev = G.branch_events(log, 1, 3.0)
    assert len(ev) == 1 and ev[0].followed == 1 and ev[0].side == 0
    ev = G.branch_events(log, 0, 3.0)
    assert [e.time for e in ev] == [2.0] and ev[0].side == 2 and ev[0].followed == 0
    assert G.branch_events(log, 3, 3.0) == []


def _chain(t_b, t_d, x=0.0):
    return G.Mark(t_b, G.GridPath(t_b, 1.0, np.array([[x]])), t_d)


def test_glue_shapes():
    trunk = (0.0, G.GridPath(0.0, 1.0, np.zeros((1, 1))), None)
    t0 = G.glue(trunk, [], 5.0)
    assert t0.labels == {""} and t0.primary_length() == 0
    sub1 = G.MarkedTree({"": _chain(1.0, None)}, 5.0)
    sub2 = G.MarkedTree({"": _chain(3.0, 4.0)}, 5.0)
    t2 = G.glue(trunk, [sub2, sub1], 5.0)
    assert t2.labels == {"", "1", "2", "11", "12"}
    assert t2["2"].t_b == 1.0 and t2["12"].t_b == 3.0 and t2["11"].t_d is None
    t2.validate()
    with pytest.raises(ValueError):
        G.glue((2.0, trunk[1], None), [sub1], 5.0)


def _random_tree(gen, T=5.0, depth=0, label="", marks=None, t_b=0.0):
    marks = {} if marks is None else marks
    if depth < 4 and gen.random() < 0.7:
        t_d = t_b + gen.random() * (T - t_b) * 0.5
        marks[label] = _chain(t_b, t_d)
        _random_tree(gen, T, depth + 1, label + "1", marks, t_d)
        _random_tree(gen, T, depth + 1, label + "2", marks, t_d)
    else:
        marks[label] = _chain(t_b, None if gen.random() < 0.5 else t_b + gen.random() * (T - t_b))
    return G.MarkedTree(marks, T)


@settings(max_examples=40)
@given(st.integers(0, 2**32))
def test_v_primary_involution_and_glue_round_trip(seed):
    gen = np.random.default_rng(seed)
    tree = _random_tree(gen)
    tree.validate()
    leaves = tree.leaves()
    v = leaves[gen.integers(len(leaves))]
    w = G.v_primary(tree, v)
    w.validate()
    assert w.primary_length() == len(v)
    assert sorted(map(repr, (m.key() for m in w.marks.values()))) == sorted(map(repr, (m.key() for m in tree.marks.values())))
    assert G.canonical_form(w) == G.canonical_form(tree)
    # cutting off the side trees and gluing them back is the identity
    n = tree.primary_length()
    subs = [tree.subtree("1" * k + "2") for k in range(n)]
    rebuilt = G.glue((0.0, tree[""].path, tree["1" * n].t_d), subs, tree.T)
    assert rebuilt.labels == tree.labels
    assert all(rebuilt[u].t_b == tree[u].t_b and rebuilt[u].t_d == tree[u].t_d for u in tree.labels)


def test_v_primary_on_a_deep_leaf():
    labels = ["", "1", "2", "11", "12", "21", "22", "121", "122", "221", "222", "1221", "1222"]
    marks = {}
    for u in labels:
        t_b = float(len(u))
        has_kids = u + "1" in labels
        marks[u] = _chain(t_b, t_b + 1.0 if has_kids else None)
    tree = G.MarkedTree(marks, 10.0)
    tree.validate()
    w = G.v_primary(tree, "1221")
    assert w.primary_length() == 4
    assert w["1111"] is tree["1221"]
    assert w["2"] is tree["2"] and w["12"] is tree["11"] and w["111"] is tree["122"] and w["112"] is tree["121"] and w["1112"] is tree["1222"]
    assert G.v_primary(tree, "11").labels == tree.labels


def test_validation_errors():
    with pytest.raises(ValueError):
        G.MarkedTree({"": _chain(0, 1), "1": _chain(1, None)}, 2.0).validate()  # sibling missing
    with pytest.raises(ValueError):
        G.MarkedTree({"": _chain(0, 1), "1": _chain(1.5, None), "2": _chain(1, None)}, 2.0).validate()
    with pytest.raises(ValueError):
        G.MarkedTree({"": _chain(0, None), "1": _chain(1, None), "2": _chain(1, None)}, 2.0).validate()
    with pytest.raises(ValueError):
        G.MarkedTree({"": _chain(0, 1, 0.0), "1": _chain(1, None, 0.5), "2": _chain(1, None)}, 2.0).validate()


def test_mark_and_tree_distances():
    a = _chain(0.0, None, 0.2)
    b = _chain(0.1, None, 0.5)
    assert G.mark_distance(a, b, 2.0) == pytest.approx(0.1 + 0.3)
    c = _chain(0.0, 1.0, 0.2)
    assert G.mark_distance(a, c, 2.0) == pytest.approx(1.0)  # |t - *| = 1
    t1 = G.MarkedTree({"": a}, 2.0)
    t2 = G.MarkedTree({"": b}, 2.0)
    assert G.tree_distance(t1, t2) == pytest.approx(0.4)
    t3 = G.MarkedTree({"": _chain(0, 1), "1": _chain(1, None), "2": _chain(1, None)}, 2.0)
    assert G.tree_distance(t1, t3) == 1.0
    assert not G.trees_equal(t1, t3)


def test_json_round_trip(micro_runs):
    s, log, ps = micro_runs[0]
    a = G.augmented_dhp(log, ps, 0, 3.0)
    d = json.loads(json.dumps(a.to_json()))
    assert d["label"] == "" and len(d["children"]) == 2
    back = G.MarkedTree.from_json(d, 3.0, ps)
    assert G.trees_equal(a, back)


def test_critical_tree_degenerate_cases():
    f0 = TOY.without_killing()
    t = G.simulate_critical_tree(0.0, [0.3], 0.0, f0, 2.0, 1, dt=1e-2)
    assert t.labels == {""} and t[""].t_d is None
    t.validate()
    a = G.simulate_critical_tree(0.0, [0.3], 2.0, TOY, 2.0, 7, dt=1e-2)
    b = G.simulate_critical_tree(0.0, [0.3], 2.0, TOY, 2.0, 7, dt=1e-2)
    assert G.trees_equal(a, b)
    a.validate()


def test_critical_tree_mean_population():
    # killing = branching = c keeps the mean number of lines alive at T equal to 1
    c, T = 1.0, 2.0
    f = CoefficientField.constant_killing(c)
    alive = [G.alive_at_horizon(G.simulate_critical_tree(0.0, [0.5], c, f, T, s, dt=2e-2)) for s in range(3000)]
    assert abs(np.mean(alive) - 1) < 4 * np.std(alive) / math.sqrt(len(alive))
    # with time-dependent rate 2c on [0, T]: mean exp(c T), supermartingale style bound on tree size
    sizes = [len(G.simulate_critical_tree(0.0, [0.5], lambda s: 2 * c, f, 1.0, s, dt=2e-2)) for s in range(1500)]
    alive2 = []
    assert np.mean(sizes) <= math.exp(2 * 3 * c * 1.0)


def test_critical_tree_is_phi_critical_for_toy():
    # E[sum over alive lines of phi(X_T)] = phi(x) when branching at rate lambda
    tr_phi = lambda x: 2 + np.cos(np.pi * x)  # noqa: E731
    vals = []
    for s in range(3000):
        t = G.simulate_critical_tree(0.0, [0.0], 2.0, TOY, 1.0, 100 + s, dt=5e-3)
        vals.append(sum(tr_phi(m.path.value(1.0)[0]) for m in t.marks.values() if m.t_d is None))
    assert abs(np.mean(vals) - 3.0) < 4 * np.std(vals) / math.sqrt(len(vals))


def test_negative_rate_is_rejected():
    with pytest.raises(ValueError):
        G.simulate_critical_tree(0.0, [0.5], -1.0, TOY, 1.0, 0)
