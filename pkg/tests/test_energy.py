import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import conv_model, perturb_norm
from tea.energy import (EnergyView, energy_grad_logits, energy_joint, energy_marginal,
                        energy_of_inputs, unnormalized_log_density)
from tea.losses import entropy, get_loss, mean_entropy
from tea.nn import Dense, init_model, numeric_grad, rel_error

logit_rows = arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 6)),
                    elements=st.floats(-50, 50))


def test_energy_joint_examples():
    np.testing.assert_array_equal(energy_joint([[1.0, 2.0]], [1]), [-2.0])
    np.testing.assert_array_equal(energy_joint([[0.0, 0.0, 0.0]], [2]), [0.0])
    np.testing.assert_array_equal(energy_joint([[-3.5]], [0]), [3.5])
    with pytest.raises(ValueError):
        energy_joint([[1.0, 2.0]], [2])
    with pytest.raises(ValueError):
        energy_joint([[1.0, 2.0]], [-1])


def test_energy_marginal_examples():
    np.testing.assert_allclose(energy_marginal([[0.0, 0.0]]), [-math.log(2)], rtol=1e-15)
    assert energy_marginal([[-0.0, 0.0]])[0] == pytest.approx(-0.693147, abs=1e-6)
    np.testing.assert_allclose(energy_marginal([[1000.0, 1000.0]]), [-(1000 + math.log(2))], rtol=1e-15)
    np.testing.assert_array_equal(energy_marginal([[2.5]]), [-2.5])
    with pytest.raises(FloatingPointError):
        energy_marginal([[np.inf, 0.0]])
    with pytest.raises(FloatingPointError):
        energy_marginal([[np.nan]])


def test_energy_grad_examples():
    np.testing.assert_allclose(energy_grad_logits([[0.0, 0.0]]), [[-0.5, -0.5]])
    np.testing.assert_allclose(energy_grad_logits([[0.0, math.log(3)]]), [[-0.25, -0.75]], rtol=1e-14)


def test_energy_grad_matches_finite_differences():
    z = np.random.default_rng(0).standard_normal((20, 5)) * 3
    num = np.stack([numeric_grad(lambda r: energy_marginal(r[None])[0], row, 1e-5) for row in z])
    np.testing.assert_allclose(energy_grad_logits(z), num, atol=1e-6)


def test_unnormalized_log_density_examples():
    np.testing.assert_array_equal(unnormalized_log_density([0.0]), [0.0])
    np.testing.assert_allclose(unnormalized_log_density([-math.log(2)]), [math.log(2)])
    d = unnormalized_log_density([-1.0, 0.5, 3.0])
    assert d[0] > d[1] > d[2]


@settings(max_examples=200, deadline=None)
@given(logit_rows, st.floats(-1e3, 1e3))
def test_energy_shift_equivariance_and_bounds(z, c):
    e = energy_marginal(z)
    np.testing.assert_allclose(energy_marginal(z + c), e - c, atol=1e-6 * max(1.0, abs(c)))
    free = -e
    m = z.max(axis=1)
    assert np.all(m <= free + 1e-12)
    assert np.all(free <= m + math.log(z.shape[1]) + 1e-12)
    np.testing.assert_allclose(energy_grad_logits(z).sum(axis=1), -1.0, atol=1e-6)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.integers(2, 6), elements=st.floats(-20, 20)), st.integers(0, 2 ** 31 - 1))
def test_conjugacy(z, seed):
    """-E(z) = max_p <p, z> + H(p), attained at p = softmax(z)."""
    free = -energy_marginal(z[None])[0]
    p_star = np.exp(z - free)
    h = float(entropy(z[None])[0])
    assert abs(free - (p_star @ z + h)) < 1e-6
    g = np.random.default_rng(seed)
    for _ in range(10):
        p = g.dirichlet(np.ones(len(z)))
        hp = -np.sum(np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0))
        assert free >= p @ z + hp - 1e-6


def test_joint_equals_marginal_single_class():
    z = np.random.default_rng(1).standard_normal((10, 1))
    np.testing.assert_array_equal(energy_marginal(z), energy_joint(z, np.zeros(10, int)))


def test_constant_logit_model():
    m = init_model([Dense(3, 4)], (3,), np.random.default_rng(0), np.float64)
    c = np.array([0.5, -1.0, 2.0, 0.0])
    m = m.with_params({"0.W": np.zeros((3, 4)), "0.b": c})
    x = np.random.default_rng(2).standard_normal((5, 3))
    e, gx, gp = energy_of_inputs(EnergyView(m), x)
    np.testing.assert_allclose(e, -np.log(np.exp(c).sum()))
    np.testing.assert_array_equal(gx, 0.0)
    assert set(gp) == set(m.params)


def test_energy_of_inputs_is_gradient_of_mean():
    m = perturb_norm(conv_model(7), 7)
    x = np.random.default_rng(7).uniform(-1, 1, (3, 1, 4, 4))
    view = EnergyView(m)
    _, gx, gp = energy_of_inputs(view, x)
    num = numeric_grad(lambda b: energy_of_inputs(view, b, False)[0].mean(), x)
    assert rel_error(gx, num) < 1e-4
    numw = numeric_grad(lambda w: energy_of_inputs(EnergyView(m.with_params({"8.b": w})), x, False)[0].mean(),
                        m.params["8.b"])
    assert rel_error(gp["8.b"], numw) < 1e-4
    _, summed = view.energy_and_input_grad(x)
    np.testing.assert_allclose(summed, gx * 3)


def test_duplicated_sample_identical_energy():
    m = conv_model(2, np.float32, norm2="group")
    x = np.random.default_rng(3).uniform(-1, 1, (4, 1, 4, 4)).astype(np.float32)
    x[3] = x[1]
    e, _, _ = energy_of_inputs(EnergyView(m), x, False)
    assert e[1] == e[3]


def test_entropy_examples():
    assert entropy(np.zeros((1, 4)))[0] == pytest.approx(math.log(4), abs=1e-12)
    assert entropy(np.array([[50.0, 0.0, 0.0]]))[0] < 1e-18
    z = np.random.default_rng(0).standard_normal((4, 5))
    num = numeric_grad(lambda q: mean_entropy(q)[0], z)
    assert rel_error(mean_entropy(z)[1], num) < 1e-4


def test_unknown_loss():
    with pytest.raises(ValueError):
        get_loss("nope")
