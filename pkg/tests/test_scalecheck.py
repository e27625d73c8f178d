import json

import pytest
from hypothesis import given, settings, strategies as st

from mupscale import scalecheck as sc
from mupscale.param_engine import Role, SpecError, base_spec, gauge_transform, mup_gauge, weight_tied_spec


# (quantity, Init prediction, Full prediction), derived by hand from the abcd tables
MUP_ADAM = [
    ("norm_h0", 0.0, 0.0), ("norm_z0", 0.0, 0.0), ("norm_f0", -0.5, -0.5),
    ("norm_dU1", 0.0, 0.0), ("norm_dW1", -1.0, -1.0), ("norm_dV1", -1.0, -1.0),
    ("norm_dh1", 0.0, 0.0), ("norm_dz1", 0.0, 0.0), ("norm_df1", -0.5, 0.0),
]
SP_ADAM = [
    ("norm_h0", 0.0, 0.0), ("norm_z0", 0.0, 0.0), ("norm_f0", 0.0, 0.0),
    ("norm_dh1", -1.0, -1.0), ("norm_dz1", -0.5, 0.0), ("norm_df1", -0.5, 0.5),
]


@pytest.mark.parametrize("name,rows", [("muP", MUP_ADAM), ("SP", SP_ADAM)])
def test_predictions_hand_derived(name, rows):
    spec = base_spec(name)
    p_init, p_full = sc.predict_exponents(spec, "Init"), sc.predict_exponents(spec, "Full")
    for q, ei, ef in rows:
        assert p_init[q] == pytest.approx(ei), q
        assert p_full[q] == pytest.approx(ef), q


def test_sgd_prediction_uses_gradient_scale():
    p = sc.predict_exponents(base_spec("muP", "SGD"), "Full")
    # SGD muP keeps every forward quantity Theta(1) under full alignment
    for q in ("norm_h0", "norm_z0", "norm_dh1", "norm_dz1", "norm_df1"):
        assert p[q] == pytest.approx(0.0), q


@settings(max_examples=30, deadline=None)
@given(gauge=st.sampled_from(["No multipliers", "No LR scaling", "Canonical", "CompleteP"]),
       opt=st.sampled_from(["Adam", "SGD"]),
       role=st.sampled_from([Role.INPUT, Role.HIDDEN, Role.OUTPUT]),
       delta=st.fractions(-1, 1, max_denominator=4))
def test_forward_predictions_gauge_invariant(gauge, opt, role, delta):
    spec = mup_gauge(gauge, opt)
    moved = gauge_transform(spec, role, delta)
    for al in ("Init", "Full"):
        a, b = sc.predict_exponents(spec, al), sc.predict_exponents(moved, al)
        for q in ("norm_h0", "norm_z0", "norm_f0", "norm_dh1", "norm_dz1", "norm_df1"):
            assert a[q] == pytest.approx(b[q]), (q, al)


def test_tied_prediction_rejected():
    with pytest.raises(SpecError):
        sc.predict_exponents(weight_tied_spec("Adam"))


def test_fit_slope_exact():
    w = [32, 64, 128, 256]
    slope, se = sc.fit_slope(w, [3 * n ** -0.75 for n in w])
    assert slope == pytest.approx(-0.75, abs=1e-12) and se == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(SpecError):
        sc.fit_slope([32], [1.0])


def test_measure_matches_predictions_muP():
    m = sc.measure(base_spec("muP"), [64, 128, 256, 512], n_seeds=4)
    rep = sc.verify(base_spec("muP"), m)
    assert rep.ok, rep.table()
    d = rep.to_dict()
    json.dumps(d)
    assert d["ok"] and len(d["rows"]) == 6
    assert "quantity" in rep.table().splitlines()[0]


def test_measure_needs_four_widths():
    with pytest.raises(SpecError):
        sc.measure(base_spec("muP"), [64, 128, 256])


def test_attention_slopes():
    rnd = sc.measure_attention([16, 64, 256, 1024])
    al = sc.measure_attention([16, 64, 256, 1024], aligned=True)
    assert rnd.slope == pytest.approx(0.5, abs=0.05)
    assert al.slope == pytest.approx(1.0, abs=0.05)


def test_gauge_dynamics_invariant():
    spec = base_spec("muP")
    assert sc.gauge_deviation(spec, gauge_transform(spec, Role.HIDDEN, 0.5), steps=50, width=64) <= 1e-5
    sgd = base_spec("muP", "SGD")
    assert sc.verify_gauge(sgd, gauge_transform(sgd, Role.OUTPUT, 0.5), steps=50, width=64)
    # a non-gauge change is detected
    assert sc.gauge_deviation(spec, base_spec("SP"), steps=50, width=64) > 1e-3
    with pytest.raises(SpecError):
        sc.gauge_deviation(spec, sgd)
