import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mupscale import microtrain as mt
from mupscale.param_engine import Role, SpecError, base_spec, lookup_spec, mup_gauge, weight_tied_spec


def _loss(state, task, x, y):
    _, _, f, _ = mt.forward(state, x)
    return task.loss_and_grad(f, y)[0]


def _fd_check(spec, net, task_spec, batch=5, h=1e-6):
    task = mt.Task(task_spec)
    state = mt.init_network(spec, net)
    rng = np.random.default_rng(3)
    # perturb LayerNorm gains and biases away from their trivial init
    for k in state.params:
        if k.startswith("ln_"):
            state.params[k] = state.params[k] + 0.3 * rng.standard_normal(state.params[k].shape)
    x, y = task.sample(batch, rng)
    _, _, f, cache = mt.forward(state, x)
    _, dl = task.loss_and_grad(f, y)
    grads = mt.backward(state, cache, dl)
    worst = 0.0
    for name, p in state.params.items():
        num = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = p[i]
            p[i] = old + h
            lp = _loss(state, task, x, y)
            p[i] = old - h
            lm = _loss(state, task, x, y)
            p[i] = old
            num[i] = (lp - lm) / (2 * h)
        err = np.linalg.norm(grads[name] - num) / max(np.linalg.norm(num), 1e-12)
        worst = max(worst, err)
        assert err <= 1e-6, (name, err)
    assert set(grads) == set(state.params)
    return worst


@pytest.mark.parametrize("nonlin", ["identity", "tanh"])
@pytest.mark.parametrize("layernorm", [False, True])
def test_gradients_match_finite_differences(nonlin, layernorm):
    net = mt.NetworkConfig(8, 3, 2, nonlinearity=nonlin, layernorm=layernorm, seed=1)
    _fd_check(base_spec("muP"), net, mt.TaskSpec(d_in=3, d_out=2, teacher_width=6))


def test_gradients_tied_and_multipliers():
    net = mt.NetworkConfig(8, 3, 3, nonlinearity="tanh", layernorm=True, weight_tied=True, seed=2)
    _fd_check(weight_tied_spec("Adam"), net, mt.TaskSpec(d_in=3, d_out=3, teacher_width=6))
    net = mt.NetworkConfig(8, 3, 2, nonlinearity="tanh", seed=2)
    _fd_check(mup_gauge("Canonical", "SGD"), net, mt.TaskSpec(d_in=3, d_out=2, teacher_width=6))


def test_gradients_cross_entropy():
    net = mt.NetworkConfig(8, 3, 4, nonlinearity="tanh", layernorm=True, seed=4)
    _fd_check(base_spec("SP"), net, mt.TaskSpec(kind="synthetic_classification", d_in=3, d_out=4, teacher_width=6))


def test_init_scale_follows_exponents():
    net = mt.NetworkConfig(400, 16, 4, seed=0)
    st_ = mt.init_network(base_spec("muP"), net)
    assert np.std(st_.params["U"]) == pytest.approx(1.0, rel=0.05)
    assert np.std(st_.params["W"]) == pytest.approx(400 ** -0.5, rel=0.05)
    assert np.std(st_.params["V"]) == pytest.approx(1 / 400, rel=0.05)


def test_init_is_keyed_by_seed_and_layer():
    a = mt.init_network(base_spec("muP"), mt.NetworkConfig(16, 4, 2, seed=5))
    b = mt.init_network(base_spec("SP"), mt.NetworkConfig(16, 4, 2, seed=5))
    # same base draw, different scale: the hidden layer shares exponents
    np.testing.assert_array_equal(a.params["W"], b.params["W"])
    c = mt.init_network(base_spec("muP"), mt.NetworkConfig(16, 4, 2, seed=6))
    assert not np.allclose(a.params["U"], c.params["U"])


def test_mismatched_network_rejected():
    with pytest.raises(SpecError):
        mt.init_network(base_spec("muP"), mt.NetworkConfig(8, 3, 3, weight_tied=True))
    with pytest.raises(SpecError):
        mt.NetworkConfig(8, 3, 2, nonlinearity="gelu")
    with pytest.raises(SpecError):
        mt.TrainConfig(10, schedule=(0.5, 0.4, 0.3))


@pytest.mark.parametrize("t,T,fr,expected", [
    (0, 100, (0.1, 0.6, 0.3), 0.0),
    (5, 100, (0.1, 0.6, 0.3), 0.5),
    (10, 100, (0.1, 0.6, 0.3), 1.0),
    (69, 100, (0.1, 0.6, 0.3), 1.0),
    (85, 100, (0.1, 0.6, 0.3), 0.5),
    (50, 100, (0.0, 1.0, 0.0), 1.0),
])
def test_schedule_values(t, T, fr, expected):
    assert mt.lr_schedule(t, T, fr) == pytest.approx(expected)


@given(T=st.integers(1, 500), w=st.floats(0, 0.5), d=st.floats(0, 0.5))
def test_schedule_bounded(T, w, d):
    fr = (w, 1 - w - d, d)
    vals = [mt.lr_schedule(t, T, fr) for t in range(T)]
    assert all(0.0 <= v <= 1.0 for v in vals)


def _train(spec="muP", n=32, steps=20, **kw):
    net = mt.NetworkConfig(n, 8, 2, nonlinearity="tanh", seed=kw.pop("seed", 0),
                           layernorm=kw.pop("layernorm", False))
    task = mt.TaskSpec(d_in=8, d_out=2, teacher_width=16, size=512)
    return mt.train(lookup_spec(spec), net, task, mt.TrainConfig(steps, **kw))


def test_training_reduces_loss_and_is_deterministic():
    a = _train(eta=2 ** -4, steps=40)
    b = _train(eta=2 ** -4, steps=40)
    assert a.losses == b.losses and a.final_loss == b.final_loss
    assert np.mean(a.losses[-5:]) < 0.5 * a.losses[0]


def test_sgd_divergence_reports_inf():
    net = mt.NetworkConfig(32, 8, 2, nonlinearity="identity", seed=0)
    task = mt.TaskSpec(d_in=8, d_out=2, teacher_width=16, size=512)
    r = mt.train(base_spec("muP", "SGD"), net, task, mt.TrainConfig(50, eta=1e6))
    assert r.diverged and r.final_loss == math.inf


def test_frozen_role_is_untouched():
    net = mt.NetworkConfig(16, 8, 2, nonlinearity="tanh", seed=0)
    task = mt.TaskSpec(d_in=8, d_out=2, teacher_width=16, size=256)
    init = mt.init_network(base_spec("muP"), net)
    r = mt.train(base_spec("muP"), net, task, mt.TrainConfig(5, eta=0.01, frozen_roles=frozenset({Role.INPUT})),
                 keep_state=True)
    np.testing.assert_array_equal(r.state.params["U"], init.params["U"])
    assert not np.allclose(r.state.params["W"], init.params["W"])


def test_switch_event_changes_embedding_lr_only_after_step():
    net = mt.NetworkConfig(64, 8, 2, nonlinearity="tanh", seed=0)
    task = mt.TaskSpec(d_in=8, d_out=2, teacher_width=16, size=256)
    ev = (mt.SwitchEvent(3, Role.INPUT, 1),)
    a = mt.train(base_spec("muP"), net, task, mt.TrainConfig(6, eta=0.01))
    b = mt.train(base_spec("muP"), net, task, mt.TrainConfig(6, eta=0.01, switch_events=ev))
    assert a.losses[:4] == b.losses[:4] and a.losses[4:] != b.losses[4:]


def test_weight_decay_shrinks_weights_decoupled():
    net = mt.NetworkConfig(16, 8, 2, seed=0)
    task = mt.TaskSpec(d_in=8, d_out=2, teacher_width=16, size=256)
    s0 = mt.init_network(base_spec("muP"), net)
    zero = {k: np.zeros_like(v) for k, v in s0.params.items()}
    cfg = mt.TrainConfig(1, eta=0.1, lam=0.5)
    s1 = mt.step(s0, zero, 0, cfg)
    # zero gradient: Adam update is 0, only the decay factor (1 - lr*wd) acts
    lr, wd = mt.layer_lr(s0, Role.HIDDEN, 0.1), mt.layer_wd(s0, Role.HIDDEN, 0.5)
    np.testing.assert_allclose(s1.params["W"], s0.params["W"] * (1 - lr * wd))
    assert lr * wd == pytest.approx(0.05)


def test_adam_first_step_is_sign_like():
    net = mt.NetworkConfig(16, 8, 2, seed=0)
    task = mt.Task(mt.TaskSpec(d_in=8, d_out=2, teacher_width=16, size=256))
    s0 = mt.init_network(base_spec("muP"), net)
    x, y = task.sample(32, np.random.default_rng(0))
    _, _, f, cache = mt.forward(s0, x)
    g = mt.backward(s0, cache, task.loss_and_grad(f, y)[1])
    s1 = mt.step(s0, g, 0, mt.TrainConfig(1, eta=1.0, eps=1e-12))
    d = (s0.params["U"] - s1.params["U"]) / mt.layer_lr(s0, Role.INPUT, 1.0)
    np.testing.assert_allclose(np.abs(d), 1.0, rtol=1e-6)


def test_grad_clip_bounds_global_norm():
    net = mt.NetworkConfig(16, 8, 2, seed=0)
    s0 = mt.init_network(base_spec("muP", "SGD"), net)
    g = {k: np.full_like(v, 10.0) for k, v in s0.params.items()}
    s1 = mt.step(s0, g, 0, mt.TrainConfig(1, eta=1.0, grad_clip=1.0))
    total = sum(float(np.sum(((s0.params[k] - s1.params[k]) / mt.layer_lr(s0, mt.PARAM_ROLE[k], 1.0)) ** 2))
                for k in s0.params)
    assert math.sqrt(total) == pytest.approx(1.0, rel=1e-9)


def test_trace_records_first_step_quantities():
    r = _train(steps=2, eta=0.01, trace=True, layernorm=True)
    assert r.trace.get(0, "act", Role.INPUT) > 0
    for q in ("weight_update", "act_update", "align_rho", "align_omega", "align_sigma"):
        assert math.isfinite(r.trace.get(1, q, Role.HIDDEN))
    csv = r.trace.to_csv()
    assert csv.splitlines()[0] == "step,quantity,role,value"
    assert r.metadata["ln_placement"] == mt.LN_PLACEMENT


def test_attention_ratio():
    assert mt.measure_attention_logit_ratio(1) == pytest.approx(1.0)
    # RMS-normalised logits grow like sqrt(d) for independent rows and like d when aligned
    vals = [mt.measure_attention_logit_ratio(256, seed=s) for s in range(8)]
    assert np.mean(vals) == pytest.approx(16.0, rel=0.3)
    # aligned: only the 8 diagonal entries of the 8x8 logit matrix are O(d)
    assert mt.measure_attention_logit_ratio(1024, aligned=True) == pytest.approx(1024 / math.sqrt(8), rel=0.1)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1))
def test_keyed_rng_reproducible(seed):
    a = mt.keyed_rng(seed, 1, 2).standard_normal(4)
    b = mt.keyed_rng(seed, 1, 2).standard_normal(4)
    c = mt.keyed_rng(seed, 2, 1).standard_normal(4)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
