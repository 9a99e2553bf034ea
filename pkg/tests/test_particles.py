import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fvsim import particles as P
from fvsim import spectral
from fvsim.domain import CoefficientField

TOY = CoefficientField.toy()


def _sys(N=50, seed=1, **kw):
    return P.init_system(TOY, N, seed=seed, **kw)


def test_deterministic_and_resumable():
    a = _sys(colours="index")
    P.run(a, 2.0)
    b = _sys(colours="index")
    P.run(b, 0.7)
    P.run(b, 1.3)
    P.run(b, 2.0)
    assert np.array_equal(a.positions, b.positions)
    assert np.array_equal(a.colours, b.colours)
    assert np.array_equal(a.events.times, b.events.times)
    c = _sys(seed=2, colours="index")
    P.run(c, 2.0)
    assert not np.array_equal(a.positions, c.positions)


def test_buffer_growth_is_invisible(monkeypatch):
    a = _sys(N=300)
    P.run(a, 2.0)
    monkeypatch.setattr(P, "MAX_EVENT_BUFFER", 1024)
    b = _sys(N=300)
    P.run(b, 2.0)
    assert len(a.events) > 1024
    assert np.array_equal(a.events.victims, b.events.victims) and np.array_equal(a.positions, b.positions)


def test_replay_reproduces_colours():
    s = _sys(N=40, colours="index")
    r = P.run(s, 3.0)
    assert np.array_equal(P.replay_colours(s.initial_colours, r.log), s.colours)
    s.events.validate()


@settings(max_examples=10)
@given(st.integers(0, 2**40))
def test_jumps_land_on_the_target(seed):
    s = _sys(N=6, seed=seed, dt=1e-2, store_paths_until=1.0)
    P.run(s, 1.0)
    ps = s.path_store()
    for t, v, j in zip(s.events.times, s.events.victims, s.events.targets):
        assert np.allclose(ps.value(v, t), ps.value(j, t))
    # the stored grid ends at the current configuration
    assert np.allclose(ps.values(np.arange(6), np.full(6, 1.0)), s.positions)


def test_no_killing_no_events():
    s = P.init_system(TOY.without_killing(), 20, seed=3)
    P.run(s, 1.0)
    assert len(s.events) == 0


def test_constant_killing_event_rate():
    c, N, t = 1.5, 400, 5.0
    s = P.init_system(CoefficientField.constant_killing(c), N, seed=4)
    P.run(s, t)
    n = len(s.events)
    assert abs(n - N * c * t) < 4 * math.sqrt(N * c * t)
    assert s.events.J(t) == pytest.approx(n / N)


def test_two_particles_merge_at_first_event():
    s = _sys(N=2, colours="index")
    r = P.run(s, 50.0, stop_on_fixation=True)
    assert r.fixation_time == pytest.approx(s.events.times[0])
    assert len(s.events) == 1 and r.fixed_colour == s.events.targets[0]


def test_fixation_stops_the_run():
    s = _sys(N=8, colours="index")
    r = P.run(s, 1e4, stop_on_fixation=True)
    assert r.fixed_colour is not None and s.n_colours == 1
    assert s.time == pytest.approx(r.fixation_time)
    assert np.all(s.colours == r.fixed_colour)


def test_change_time_step_freezes_paths():
    s = _sys(N=10, store_paths_until=1.0)
    P.run(s, 1.0)
    before = s.path_store().grid.copy()
    s.change_time_step(1e-2)
    P.run(s, 3.0)
    ps = s.path_store()
    assert ps.horizon == pytest.approx(1.0) and np.array_equal(ps.grid, before)
    t = _sys(N=10)
    P.run(t, 0.5005)
    with pytest.raises(ValueError):
        t.change_time_step(1e-2)


def test_tilt_accessors_partition():
    tr = spectral.principal_eigentriple(TOY, 256)
    s = _sys(N=100, colours="index")
    P.run(s, 1.0)
    acc = P.tilt_accessors(s, tr)
    cols = np.unique(s.colours)
    assert sum(acc.Y([c]) for c in cols) == pytest.approx(1.0)
    mu = P.tilted_colour_measure(s, tr)
    assert mu.masses.sum() == pytest.approx(1.0)
    assert P.lambda_statistic(s, tr, []) == 0.0
    assert P.lambda_statistic(s, tr, cols) > 0


def test_pi_initial_positions():
    from scipy.stats import kstest

    tr = spectral.principal_eigentriple(TOY, 512)
    x = P.initial_positions(TOY, 20_000, "pi", 5, tr)[:, 0]
    # closed form cdf of (2 + cos pi x) / 2 on [0, 1]
    cdf = lambda y: (2 * y + np.sin(np.pi * y) / np.pi) / 2  # noqa: E731
    assert kstest(x, cdf).pvalue > 1e-3


def test_atom_positions_and_position_colours():
    s = P.init_system(TOY, 42, positions={"atoms": [0.0, 0.5, 1.0]}, colours="position")
    assert np.array_equal(s.positions[:3, 0], [0.0, 0.5, 1.0])
    assert len(s.table) == 3
    assert np.bincount(s.colours).tolist() == [14, 14, 14]


def test_bad_inputs():
    with pytest.raises(ValueError):
        P.init_system(TOY, 1)
    with pytest.raises(ValueError):
        P.init_system(TOY, 3, positions=np.array([0.1, 0.2, 1.5]))
    with pytest.raises(ValueError):
        P.init_system(TOY, 3, positions="gaussian")
    s = _sys(N=3)
    P.run(s, 1.0)
    with pytest.raises(ValueError):
        P.run(s, 0.5)
    with pytest.raises(ValueError):
        s.path_store()


def test_save_and_load_round_trip(tmp_path):
    s = _sys(N=6, dt=1e-2, store_paths_until=2.0, colours="index")
    r = P.run(s, 2.0, snapshot_times=[1.0])
    P.save_run(r, tmp_path, s.path_store())
    assert (tmp_path / "snapshot_1.csv").exists()
    summary, log, store = P.load_run(tmp_path)
    assert summary["N"] == 6
    assert np.array_equal(log.times, s.events.times) and np.array_equal(log.targets, s.events.targets)
    ts = np.linspace(0, 2, 37)
    for k in range(6):
        assert np.allclose(store.values(np.full(ts.size, k), ts), s.path_store().values(np.full(ts.size, k), ts))


def test_event_log_windows():
    log = P.EventLog.from_events(3, [(1.0, 0, 1), (2.0, 1, 2), (3.0, 2, 0)])
    assert log.count(2.0) == 2 and log.window(1.0, 3.0) == slice(1, 3)
    with pytest.raises(Exception):
        P.EventLog.from_events(3, [(1.0, 0, 0)])
