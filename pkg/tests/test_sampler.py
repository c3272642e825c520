import numpy as np
import pytest

from pointmf.backbone import MeanVelocityNet
from pointmf.sampler import NFECounter, noise, sample_fm_euler, sample_k_step, sample_one_step

from _helpers import randomized_net, tiny_config


def test_noise_is_reproducible_per_seed():
    assert np.array_equal(noise(3, (2, 4, 3)), noise(3, (2, 4, 3)))
    assert not np.array_equal(noise(3, (2, 4, 3)), noise(4, (2, 4, 3)))


def test_zero_init_sample_is_the_noise():
    net = MeanVelocityNet(tiny_config())
    cond = net.encode(np.random.default_rng(0).random((2, 13)))
    np.testing.assert_array_equal(sample_one_step(net, cond, 5, 12), noise(5, (2, 12, 3)))


def test_samplers_are_deterministic():
    net = randomized_net()
    cond = net.encode(np.random.default_rng(1).random((2, 13)))
    for fn in (lambda: sample_one_step(net, cond, 9, 12), lambda: sample_k_step(net, cond, 3, 9, 12),
               lambda: sample_fm_euler(net, cond, 3, 9, 12)):
        assert np.array_equal(fn(), fn())


def test_one_jump_grid_equals_one_step():
    net = randomized_net(seed=2)
    cond = net.encode(np.random.default_rng(2).random((3, 13)))
    np.testing.assert_array_equal(sample_k_step(net, cond, 1, 4, 12), sample_one_step(net, cond, 4, 12))


def test_sample_validation():
    with pytest.raises(ValueError):
        sample_k_step(lambda *a: 0, [None], 0, 0, 4)
    with pytest.raises(ValueError):
        sample_fm_euler(lambda *a: 0, [None], 0, 0, 4)


def test_nfe_counter_passes_outputs_through():
    field = lambda x, r, t, c: 2 * x  # noqa: E731
    c = NFECounter(field)
    x = np.ones((1, 2, 3))
    assert np.array_equal(c(x, None, None, None), 2 * x) and c.calls == 1


def test_fm_euler_error_shrinks_linearly_on_a_linear_field():
    # dx/dt = a x has the exact solution x(0) = exp(-a) x(1)
    a = 0.7
    field = lambda x, r, t, c: a * x  # noqa: E731
    exact = np.exp(-a) * noise(0, (1, 8, 3))
    errs = [np.abs(sample_fm_euler(field, [None], k, 0, 8) - exact).max() for k in (10, 20, 40)]
    assert 1.8 < errs[0] / errs[1] < 2.2 and 1.8 < errs[1] / errs[2] < 2.2


def test_k_step_is_exact_for_a_constant_field():
    rng = np.random.default_rng(3)
    x0 = rng.standard_normal((2, 6, 3))
    eps = noise(1, (2, 6, 3))
    field = lambda x, r, t, c: eps - x0  # noqa: E731
    for k in (1, 3, 7):
        np.testing.assert_allclose(sample_k_step(field, [None, None], k, 1, 6), x0, atol=1e-13)
