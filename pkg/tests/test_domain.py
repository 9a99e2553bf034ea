import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fvsim.domain import (
    CoefficientField,
    FormSpec,
    InvariantViolation,
    NumericDomainError,
    feynman_kac_survival,
    fold,
    killed_population,
    reflect_step,
    simulate_killed_path,
)


def test_toy_field_bounds():
    f = CoefficientField.toy()
    f.check()
    x = np.linspace(0, 1, 2001)
    k = f.kappa_values(x)
    assert k.min() >= 0
    assert math.isclose(k.max(), 2 + math.pi**2 / 2, rel_tol=1e-12)
    assert math.isclose(f.kappa_max, 2 + math.pi**2 / 2, rel_tol=1e-12)


def test_kappa_above_declared_max_is_rejected():
    f = CoefficientField((0.0,), (1.0,), kappa=FormSpec("constant", {"value": 3.0}), kappa_max=2.0)
    with pytest.raises(InvariantViolation):
        f.check()


def test_negative_kappa_is_rejected():
    f = CoefficientField((0.0,), (1.0,), kappa=FormSpec("linear", {"intercept": -0.5, "slope": 1.0}), kappa_max=1.0)
    with pytest.raises(InvariantViolation):
        f.check()


@pytest.mark.parametrize("bad", [
    dict(lo=(1.0,), hi=(0.0,)),
    dict(lo=(0.0, 0.0), hi=(1.0,)),
    dict(lo=(0.0,), hi=(math.inf,)),
])
def test_bad_boxes(bad):
    with pytest.raises(ValueError):
        CoefficientField(**bad)


def test_unknown_form():
    with pytest.raises(ValueError):
        CoefficientField((0.0,), (1.0,), kappa=FormSpec("quartic"))


def test_json_round_trip(tmp_path):
    f = CoefficientField((0.0, -1.0), (1.0, 1.0), drift=FormSpec("linear", {"rate": 0.5, "center": [0.5, 0.0]}),
                         sigma=FormSpec("diagonal", {"values": [1.0, 0.5]}),
                         kappa=FormSpec("linear", {"intercept": 1.0, "slope": [0.2, 0.1]}), kappa_max=1.5)
    g = CoefficientField.from_json(f.to_json())
    assert g.to_json() == f.to_json()
    p = tmp_path / "f.json"
    import json
    p.write_text(json.dumps(f.to_json()))
    assert CoefficientField.load(p).to_json() == f.to_json()
    pts = np.random.default_rng(0).random((20, 2))
    assert np.array_equal(g.drift_values(pts), f.drift_values(pts))


@given(st.floats(-50, 50, allow_nan=False), st.floats(-3, 3), st.floats(0.1, 5))
def test_fold_lands_in_box(y, lo, width):
    hi = lo + width
    z = fold([y], [lo], [hi])[0]
    assert lo - 1e-9 <= z <= hi + 1e-9


def test_fold_is_reflection():
    assert fold([1.2], [0.0], [1.0])[0] == pytest.approx(0.8)
    assert fold([-0.3], [0.0], [1.0])[0] == pytest.approx(0.3)
    assert fold([2.5], [0.0], [1.0])[0] == pytest.approx(0.5)
    with pytest.raises(NumericDomainError):
        fold([math.nan], [0.0], [1.0])


def test_reflect_step_with_given_noise():
    f = CoefficientField.toy()
    out = reflect_step([0.95], 0.01, f, noise=[1.0])
    assert out[0] == pytest.approx(2 * 1.0 - (0.95 + 0.1))


def test_reflect_step_names_the_bad_coordinate():
    f = CoefficientField((0.0, 0.0), (1.0, 1.0), sigma=FormSpec("diagonal", {"values": [1.0, math.inf]}))
    with pytest.raises(NumericDomainError, match="coordinate 1"):
        reflect_step([0.5, 0.5], 0.01, f, noise=[0.1, 0.1])


def test_killed_path_is_reproducible_and_reflected():
    f = CoefficientField.toy()
    a = simulate_killed_path([0.3], 0.0, 2.0, 1e-3, f, 11)
    b = simulate_killed_path([0.3], 0.0, 2.0, 1e-3, f, 11)
    assert np.array_equal(a.positions, b.positions) and a.t_d == b.t_d
    assert np.all((a.positions >= 0) & (a.positions <= 1))


def test_zero_killing_never_dies():
    f = CoefficientField.toy().without_killing()
    p = simulate_killed_path([0.5], 0.0, 1.0, 1e-2, f, 3)
    assert p.t_d is None
    assert feynman_kac_survival([0.5], 1.0, 10, 1e-2, f, 3) == 1.0


def test_constant_killing_survival_is_exponential():
    c, t, R = 1.3, 1.0, 20_000
    td = killed_population([0.5], 0.0, t, 1e-2, CoefficientField.constant_killing(c), R, 5)
    p = np.isnan(td).mean()
    se = math.sqrt(math.exp(-c * t) * (1 - math.exp(-c * t)) / R)
    assert abs(p - math.exp(-c * t)) < 4 * se
    # death times of survivors are nan, the others exponential
    d = td[~np.isnan(td)]
    assert np.all((d > 0) & (d <= t))


def test_toy_survival_matches_spectral_semigroup():
    # P_x(tau > t) ~ phi(x) exp(-lambda t) <pi, 1> for large t; here check the decay rate
    f = CoefficientField.toy()
    s1 = feynman_kac_survival([0.0], 1.0, 40_000, 2e-3, f, 9)
    s2 = feynman_kac_survival([0.0], 1.5, 40_000, 2e-3, f, 10)
    assert abs(math.log(s1 / s2) / 0.5 - 2.0) < 0.15
