import numpy as np
import pytest

from csa.autodiff import finite_difference, lift, relative_error
from csa.model import (
    ModelConfig,
    ModelOverflowError,
    PlanarFlowParams,
    SurvivalModel,
    init_model,
    load_checkpoint,
    planar_transform,
    save_checkpoint,
)
from csa.autodiff import parameter


def tiny_config(mode="csa", **kw):
    defaults = dict(mode=mode, input_dim=3, hidden_dim=5, latent_dim=4,
                    noise_dim=4, concat_hidden=6, dropout=0.2)
    defaults.update(kw)
    return ModelConfig(**defaults)


def test_encode_eval_is_deterministic():
    model = init_model(tiny_config(), seed=0)
    x = np.random.default_rng(1).normal(size=(4, 3))
    r1 = model.encode(x).data
    r2 = model.encode(x).data
    assert np.array_equal(r1, r2)


def test_encode_zero_weights_gives_zero_latent():
    model = SurvivalModel(tiny_config())  # all-zero weights, BN gamma=0 too
    model.initialize(np.random.default_rng(0), 0.0, 0.0)
    # restore the BN affine defaults (gamma 1, beta 0): zero affine output stays zero
    for name, shape, kind in model._spec:
        if kind == "one":
            model._tensors[name].data[...] = 1.0
    x = np.random.default_rng(2).normal(size=(3, 3))
    r = model.encode(x).data
    assert np.allclose(r, 0.0)


def test_encode_rejects_non_finite():
    model = init_model(tiny_config(), seed=0)
    x = np.zeros((2, 3))
    x[0, 1] = np.nan
    with pytest.raises(ValueError):
        model.encode(x)


def test_encoder_gradient_matches_finite_differences():
    model = init_model(tiny_config(), seed=3)
    x = np.random.default_rng(4).normal(size=(5, 3))
    flat0 = model.get_flat()

    def f(vec):
        model.set_flat(vec)
        r = model.encode(x, train=False)
        return float((r * r).sum().data)

    model.set_flat(flat0)
    model.zero_grads()
    (model.encode(x) ** 2).sum().backward()
    got = model.grad_flat()
    fd = finite_difference(f, flat0)
    model.set_flat(flat0)
    assert relative_error(got, fd) < 1e-4


def test_planar_transform_identity_cases():
    rng = np.random.default_rng(5)
    d = 3
    eps = rng.random((4, d))
    zero = parameter(np.zeros((d, d)))
    w = parameter(rng.normal(size=(d, d)))
    b = parameter(rng.normal(size=d))
    out = planar_transform(eps, PlanarFlowParams(zero, w, b))
    assert np.allclose(out.data, eps, atol=1e-15)

    u = parameter(rng.normal(size=(d, d)))
    out = planar_transform(eps, PlanarFlowParams(u, parameter(np.zeros((d, d))),
                                                 parameter(np.zeros(d))))
    assert np.allclose(out.data, eps, atol=1e-15)


def test_planar_transform_matches_straight_line_reimplementation():
    rng = np.random.default_rng(6)
    d = 3
    eps = rng.random((5, d))
    U = rng.normal(size=(d, d))
    W = rng.normal(size=(d, d))
    b = rng.normal(size=d)
    got = planar_transform(eps, PlanarFlowParams(lift(U), lift(W), lift(b))).data

    # independent elementwise oracle
    expect = np.empty_like(eps)
    for i in range(eps.shape[0]):
        e = eps[i]
        expect[i] = e + U @ np.tanh(W @ e + b)
    assert np.allclose(got, expect, atol=1e-12)


def test_sample_time_positive_and_deterministic_given_noise():
    model = init_model(tiny_config("csa-info"), seed=7)
    rng = np.random.default_rng(8)
    x = rng.normal(size=(6, 3))
    r = model.encode(x)
    eps = rng.random((6, 4))
    t1 = model.sample_time(r, arm=1, role="event", eps=eps).data
    t2 = model.sample_time(r, arm=1, role="event", eps=eps).data
    assert np.array_equal(t1, t2)
    assert (t1 > 0).all()
    c = model.sample_time(r, arm=0, role="censor", eps=eps).data
    assert (c > 0).all()


def test_sample_time_role_checks():
    model = init_model(tiny_config("csa"), seed=9)
    r = model.encode(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        model.sample_time(r, arm=0, role="censor", eps=np.zeros((2, 4)))
    with pytest.raises(ValueError):
        model.sample_time(r, arm=0, role="hazard", eps=np.zeros((2, 4)))


def test_sample_time_gradient_matches_finite_differences():
    model = init_model(tiny_config("csa"), seed=10)
    rng = np.random.default_rng(11)
    x = rng.normal(size=(4, 3))
    eps = rng.random((4, 4))
    flat0 = model.get_flat()

    def f(vec):
        model.set_flat(vec)
        r = model.encode(x)
        t = model.sample_time(r, arm=0, role="event", eps=eps)
        return float(t.sum().data)

    model.set_flat(flat0)
    model.zero_grads()
    model.sample_time(model.encode(x), arm=0, role="event", eps=eps).sum().backward()
    got = model.grad_flat()
    fd = finite_difference(f, flat0)
    model.set_flat(flat0)
    assert relative_error(got, fd) < 1e-4


def test_sample_time_overflow_reports_preactivation():
    model = init_model(tiny_config("csa", output_scale=1.0), seed=12)
    model._tensors["event_head.0.out.b"].data[...] = 800.0
    r = model.encode(np.zeros((2, 3)))
    with pytest.raises(ModelOverflowError) as err:
        model.sample_time(r, arm=0, role="event", eps=np.zeros((2, 4)))
    assert err.value.preactivation > 700


def test_aft_zero_weights_gives_bias_outputs():
    model = SurvivalModel(tiny_config("aft-ln", output_scale=1.0))
    model.initialize(np.random.default_rng(0), 0.0, 0.0)
    for name, shape, kind in model._spec:
        if kind == "one":
            model._tensors[name].data[...] = 1.0
    model._tensors["aft_head.0.out_a.b"].data[...] = 2.5
    model._tensors["aft_head.0.out_b.b"].data[...] = 0.3
    mu, sigma = model.aft_forward(model.encode(np.zeros((3, 3))), arm=0)
    assert np.allclose(mu.data, 2.5)
    assert np.allclose(sigma.data, np.logaddexp(0.0, 0.3))
    assert (sigma.data > 0).all()


def test_weibull_unit_quantile_hits_scale():
    # t = lam * (-log u)^(1/k) evaluated at u = e^-1 gives exactly lam
    model = init_model(tiny_config("aft-w"), seed=13)
    r = model.encode(np.random.default_rng(14).normal(size=(5, 3)))
    lam, k = model.aft_forward(r, arm=1)
    u = np.exp(-1.0)
    t = lam.data * (-np.log(u)) ** (1.0 / k.data)
    assert np.allclose(t, lam.data, rtol=1e-12)


def test_lognormal_sampling_median():
    # 1e5 draws at mu=1, sigma=0.5 -> sample median within 2% of e
    model = init_model(tiny_config("aft-ln", output_scale=1.0), seed=15)
    model.initialize(np.random.default_rng(0), 0.0, 0.0)
    for name, shape, kind in model._spec:
        if kind == "one":
            model._tensors[name].data[...] = 1.0
    model._tensors["aft_head.0.out_a.b"].data[...] = 1.0
    # softplus(b) = 0.5  =>  b = log(e^0.5 - 1)
    model._tensors["aft_head.0.out_b.b"].data[...] = np.log(np.expm1(0.5))
    draws = model.sample_event_times(np.zeros((1, 3)), arm=0, n_draws=100_000,
                                     rng=np.random.default_rng(16))
    assert abs(np.median(draws) - np.e) / np.e < 0.02


def test_sr_forward_deterministic_positive_and_gradient():
    model = init_model(tiny_config("sr"), seed=17)
    x = np.random.default_rng(18).normal(size=(4, 3))
    t1 = model.sr_forward(model.encode(x), arm=0).data
    t2 = model.sr_forward(model.encode(x), arm=0).data
    assert np.array_equal(t1, t2)
    assert (t1 > 0).all()

    flat0 = model.get_flat()

    def f(vec):
        model.set_flat(vec)
        return float(model.sr_forward(model.encode(x), arm=0).sum().data)

    model.set_flat(flat0)
    model.zero_grads()
    model.sr_forward(model.encode(x), arm=0).sum().backward()
    got = model.grad_flat()
    fd = finite_difference(f, flat0)
    model.set_flat(flat0)
    assert relative_error(got, fd) < 1e-4


def test_flat_round_trip_is_identity():
    model = init_model(tiny_config("csa-info"), seed=19)
    vec = model.get_flat()
    model.set_flat(np.zeros_like(vec))
    model.set_flat(vec)
    assert np.array_equal(model.get_flat(), vec)
    # flat buffer is the live storage for every tensor
    model.flat[3] = 123.0
    found = any(123.0 in np.atleast_1d(t.data.ravel()) for t in model.param_tensors)
    assert found


def test_train_mode_uses_caller_stream_only():
    model = init_model(tiny_config("csa"), seed=20)
    x = np.random.default_rng(21).normal(size=(5, 3))
    r1 = model.encode(x, train=True, rng=np.random.default_rng(99)).data
    r2 = model.encode(x, train=True, rng=np.random.default_rng(99)).data
    assert np.array_equal(r1, r2)
    with pytest.raises(ValueError):
        model.encode(x, train=True, rng=None)


def test_batchnorm_eval_frozen_statistics():
    model = init_model(tiny_config("csa"), seed=22)
    rng = np.random.default_rng(23)
    # accumulate some running statistics
    for _ in range(5):
        model.encode(rng.normal(size=(8, 3)), train=True, rng=rng)
    x = rng.normal(size=(6, 3))
    single = model.encode(x[2:3]).data
    batched = model.encode(x).data[2:3]
    other = model.encode(np.vstack([x[2:3], rng.normal(size=(4, 3))])).data[0:1]
    assert np.array_equal(single, batched)
    assert np.array_equal(single, other)


def test_output_bias_shift_doubles_samples():
    model = init_model(tiny_config("csa", output_scale=40.0), seed=24)
    rng = np.random.default_rng(25)
    x = rng.normal(size=(5, 3))
    eps = rng.random((5, 4))
    r = model.encode(x)
    t_before = model.sample_time(r, arm=1, role="event", eps=eps).data
    model._tensors["event_head.1.out.b"].data[...] += np.log(2.0)
    t_after = model.sample_time(r, arm=1, role="event", eps=eps).data
    assert np.allclose(t_after, 2.0 * t_before, rtol=1e-12)


def test_checkpoint_round_trip_exact(tmp_path):
    model = init_model(tiny_config("csa-info", output_scale=3.5), seed=26)
    rng = np.random.default_rng(27)
    for _ in range(3):  # move BN running stats off their defaults
        x = rng.normal(size=(8, 3))
        model.encode(x, train=True, rng=rng)
    path = tmp_path / "ckpt.json"
    save_checkpoint(model, path)
    other = load_checkpoint(path)
    assert np.array_equal(other.get_flat(), model.get_flat())
    x = rng.normal(size=(4, 3))
    eps = rng.random((4, 4))
    t0 = model.sample_time(model.encode(x), 0, "event", eps=eps).data
    t1 = other.sample_time(other.encode(x), 0, "event", eps=eps).data
    assert np.array_equal(t0, t1)
    assert other.config == model.config


def test_sample_event_times_shapes_and_positivity():
    for mode in ("csa", "csa-info", "aft-ln", "aft-w", "sr"):
        model = init_model(tiny_config(mode), seed=28)
        draws = model.sample_event_times(np.random.default_rng(29).normal(size=(3, 3)),
                                         arm=1, n_draws=7, rng=np.random.default_rng(30))
        assert draws.shape == (3, 7)
        assert (draws > 0).all()
        if mode == "sr":
            assert np.ptp(draws, axis=1).max() == 0.0
