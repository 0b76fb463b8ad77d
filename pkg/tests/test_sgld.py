import numpy as np
import pytest

from conftest import mlp_model
from tea.energy import EnergyView
from tea.nn import EVAL_STATS, TRAIN_STATS, Dense, init_model
from tea.rng import ElementStreams, RngStream
from tea.sgld import (QuadraticEnergy, SgldConfig, init_negatives, sgld_chain, sgld_step,
                      trace_to_csv)
from tea.shiftbench import Mixture2DSpec, gen_mixture2d
from tea.zoo import mlp2d, train_source


def constant_view():
    m = init_model([Dense(2, 3)], (2,), np.random.default_rng(0), np.float64)
    return EnergyView(m.with_params({"0.W": np.zeros((2, 3)), "0.b": np.array([1.0, 0.0, -1.0])}))


def test_config_validation():
    for bad in ({"steps": 0}, {"step_size": 0.0}, {"noise_std": -1.0}, {"init": "laplace"},
                {"scaling_mode": "fast"}):
        with pytest.raises(ValueError):
            SgldConfig(**bad)


def test_noise_scale_modes():
    assert SgldConfig(step_size=0.1, noise_std=0.01).noise_scale == 0.01
    assert SgldConfig(step_size=0.1, scaling_mode="paper-literal").noise_scale == 0.1
    assert SgldConfig(step_size=0.04, noise_std=5.0, scaling_mode="exact-langevin").noise_scale == pytest.approx(0.2)


def test_uniform_init_moments():
    x = init_negatives(SgldConfig(), (1000, 100), RngStream(11), np.float64)
    assert abs(x.mean()) < 0.02
    assert x.min() >= -1.0 and x.max() <= 1.0


def test_gaussian_init_moments():
    x = init_negatives(SgldConfig(init="gaussian"), (1000, 100), RngStream(12), np.float64)
    assert abs(x.var() - 1.0) < 0.05


def test_init_deterministic():
    a = init_negatives(SgldConfig(), (8, 3), RngStream(5, 2))
    b = init_negatives(SgldConfig(), (8, 3), RngStream(5, 2))
    assert a.tobytes() == b.tobytes()
    c = init_negatives(SgldConfig(), (8, 3), RngStream(6, 2))
    assert a.tobytes() != c.tobytes()


def test_element_streams_are_schedule_independent():
    """Element i of a batch draws exactly what stream i draws alone."""
    cfg = SgldConfig(steps=5, step_size=0.2, noise_std=0.3)
    batch, _ = sgld_chain(QuadraticEnergy(), cfg, (6, 3), RngStream(9), np.float64)
    for i in (0, 4):
        g = RngStream(9).stream(i).generator()
        x = g.uniform(-1, 1, size=(3,))
        eps = g.standard_normal((5, 3))
        for t in range(5):
            x = x - 0.1 * x + 0.3 * eps[t]
        np.testing.assert_allclose(batch[i], x, rtol=1e-12)


def test_chunked_normals_match_unbuffered():
    a = ElementStreams(RngStream(3), 4, chunk=1)
    b = ElementStreams(RngStream(3), 4, chunk=7)
    for _ in range(20):
        assert a.normal((2,)).tobytes() == b.normal((2,)).tobytes()


def test_zero_gradient_zero_noise_is_identity():
    cfg = SgldConfig(noise_std=0.0)
    x = np.random.default_rng(0).uniform(-1, 1, (5, 2))
    out, _ = sgld_step(constant_view(), x, cfg, RngStream(0))
    np.testing.assert_array_equal(out, x)


def test_chain_of_one_step_returns_init():
    cfg = SgldConfig(steps=1, noise_std=0.0)
    neg, trace = sgld_chain(constant_view(), cfg, (5, 2), RngStream(4), np.float64)
    np.testing.assert_array_equal(neg, init_negatives(cfg, (5, 2), RngStream(4), np.float64))
    assert trace.shape == (1,)


def test_quadratic_drift_arithmetic():
    x = np.random.default_rng(1).standard_normal((4, 3))
    out, e = sgld_step(QuadraticEnergy(), x, SgldConfig(step_size=0.2, noise_std=0.0), RngStream(0))
    np.testing.assert_allclose(out, 0.9 * x, rtol=1e-15)
    np.testing.assert_allclose(e, 0.5 * (x ** 2).sum(axis=1))


def test_decoupled_default_drift_and_noise():
    x = np.zeros((4000, 5)) + 0.5
    out, _ = sgld_step(QuadraticEnergy(), x, SgldConfig(), RngStream(2))
    resid = out - (x - 0.05 * x)
    assert abs(resid.mean()) < 1e-3
    assert abs(resid.std() - 0.01) < 2e-4


def test_clamp_to_range():
    x = np.full((3, 2), 0.99)
    cfg = SgldConfig(step_size=0.1, noise_std=1.0, clamp_to_range=True)
    out, _ = sgld_step(QuadraticEnergy(), x, cfg, RngStream(0))
    assert out.min() >= -1.0 and out.max() <= 1.0


def test_non_finite_raises_with_step():
    class Bad:
        def energy_and_input_grad(self, x):
            return np.zeros(len(x)), np.full_like(x, np.nan)
    with pytest.raises(FloatingPointError, match="step 0"):
        sgld_chain(Bad(), SgldConfig(steps=3), (2, 2), RngStream(0))


def test_model_untouched_and_deterministic():
    m = mlp_model(0, np.float32)
    snapshot = {k: v.copy() for k, v in m.params.items()}
    view = EnergyView(m, TRAIN_STATS)
    a, ta = sgld_chain(view, SgldConfig(), (16, 2), RngStream(1))
    b, tb = sgld_chain(view, SgldConfig(), (16, 2), RngStream(1))
    assert a.tobytes() == b.tobytes() and ta.tobytes() == tb.tobytes()
    for k in snapshot:
        assert m.params[k].tobytes() == snapshot[k].tobytes()


@pytest.mark.parametrize("stats", [EVAL_STATS, TRAIN_STATS])
def test_trained_model_trace_mostly_descends(stats):
    spec = Mixture2DSpec(((5.0, 4.0), (5.0, -4.0)), (((1, 0), (0, 1)),) * 2, 250)
    ds = gen_mixture2d(spec, "train", RngStream(0))
    layers, shape = mlp2d()
    m = train_source(layers, shape, ds, RngStream(0).child("train"), epochs=10)
    cfg = SgldConfig(steps=40, step_size=0.01, noise_std=0.0)
    _, trace = sgld_chain(EnergyView(m, stats), cfg, (64, 2), RngStream(3))
    assert np.mean(np.diff(trace) <= 1e-6) >= 0.8


def test_trace_csv():
    assert trace_to_csv([1.0, 0.5]) == "step,mean_energy\n0,1.0\n1,0.5\n"
