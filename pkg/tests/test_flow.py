import numpy as np
import pytest

from pointmf import autodiff as ad
from pointmf.autodiff import Value
from pointmf.backbone import ConditionBundle, MeanVelocityNet
from pointmf.flow import (FM, MF, GuidanceConfig, TrainBatch, adaptive_weight, cfg_tangent, fm_loss,
                          interpolate, mf_cfg_loss, sample_time_pair, sample_time_pairs,
                          weighted_regression)

from _helpers import randomized_net, tiny_config, toy_batch


def test_time_pairs_are_ordered_and_open():
    rng = np.random.default_rng(0)
    for _ in range(2000):
        p = sample_time_pair(rng)
        assert 0 < p.r <= p.t < 1
        assert (p.branch == FM) == (p.r == p.t)
    t, r, is_mf = sample_time_pairs(rng, 100_000)
    assert np.all((0 < r) & (r <= t) & (t < 1))
    assert np.all(t[is_mf] > r[is_mf]) and np.all(t[~is_mf] == r[~is_mf])
    assert abs(is_mf.mean() - 0.5) < 0.01


def test_time_marginal_matches_logit_normal_reference():
    rng = np.random.default_rng(1)
    t, r, is_mf = sample_time_pairs(rng, 100_000)
    ref = 1 / (1 + np.exp(-rng.normal(-0.4, 1.0, 1_000_000)))
    # FM rows carry one draw; MF rows the max of two
    assert abs(t[~is_mf].mean() - ref.mean()) < 0.01
    ref2 = np.maximum(ref[:500_000], ref[500_000:])
    assert abs(t[is_mf].mean() - ref2.mean()) < 0.01


def test_interpolate_examples():
    x0, eps = np.zeros((1, 3)), np.full((1, 3), 2.0)
    xt, vt = interpolate(x0, eps, 0.25)
    np.testing.assert_array_equal(xt, [[0.5, 0.5, 0.5]])
    np.testing.assert_array_equal(vt, [[2.0, 2.0, 2.0]])
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((2, 4, 3)), rng.standard_normal((2, 4, 3))
    np.testing.assert_array_equal(interpolate(a, b, 0.0)[0], a)
    np.testing.assert_array_equal(interpolate(a, b, 1.0)[0], b)
    with pytest.raises(ValueError):
        interpolate(a, b, 1.5)
    with pytest.raises(ad.ShapeError):
        interpolate(a, b[:, :2], 0.5)


def test_cfg_tangent_examples():
    cfg = GuidanceConfig()
    np.testing.assert_array_equal(
        cfg_tangent(np.array([1.0, 0.0]), np.array([0.0, 1.0]), np.array([0.0, -1.0]), cfg), [1.0, 1.0])
    v, u = np.array([0.3, -2.0]), np.array([5.0, 7.0])
    np.testing.assert_allclose(cfg_tangent(v, u, u, cfg), v, atol=1e-15)
    rng = np.random.default_rng(0)
    v, uc, uu = rng.standard_normal((3, 5))
    np.testing.assert_array_equal(cfg_tangent(v, uc, uu, GuidanceConfig(omega=1.0, kappa=0.0)), v)


def test_adaptive_weight_examples():
    cfg = GuidanceConfig()
    assert adaptive_weight(np.array([0.0]), cfg)[0] == pytest.approx(1000.0)
    np.testing.assert_array_equal(adaptive_weight(np.array([0.5, 3.0]), GuidanceConfig(weight_p=0.0)), 1.0)
    w = adaptive_weight(np.linspace(0, 10, 50), cfg)
    assert np.all(np.diff(w) < 0)
    with pytest.raises(ValueError):
        adaptive_weight(np.array([-1.0]), cfg)


def test_guidance_config_validation():
    with pytest.raises(ValueError):
        GuidanceConfig(kappa=-0.1)
    with pytest.raises(ValueError):
        GuidanceConfig(label_dropout=1.5)
    with pytest.raises(ValueError):
        GuidanceConfig(weight_c=0.0)


def _fm_batch(seed=0, n=4):
    x0, desc = toy_batch(n, 12, seed)
    return TrainBatch.draw(x0, desc, np.random.default_rng(seed), GuidanceConfig(), branch=FM)


def test_fm_loss_at_zero_init_regresses_onto_v():
    net = MeanVelocityNet(tiny_config())
    batch = _fm_batch()
    out = fm_loss(net, net.trainable(), batch, GuidanceConfig())
    np.testing.assert_allclose(out.raw_sq, np.sum(batch.v_t ** 2, axis=(1, 2)), rtol=1e-14)


def test_fm_loss_requires_fm_rows():
    net = MeanVelocityNet(tiny_config())
    x0, desc = toy_batch(4, 12)
    batch = TrainBatch.draw(x0, desc, np.random.default_rng(0), GuidanceConfig(), branch=MF)
    with pytest.raises(ValueError):
        fm_loss(net, net.trainable(), batch, GuidanceConfig())


def test_loss_zero_iff_prediction_matches():
    cfg = GuidanceConfig()
    target = np.random.default_rng(0).standard_normal((2, 5, 3))
    assert float(ad.data_of(weighted_regression(target.copy(), target, cfg).loss)) == 0.0
    assert float(ad.data_of(weighted_regression(target + 1e-3, target, cfg).loss)) > 0.0


def test_single_step_descent_on_fixed_sample():
    net = randomized_net(seed=4)
    cfg = GuidanceConfig(label_dropout=0.0)
    batch = _fm_batch(seed=4, n=2)
    P = net.trainable()
    out = fm_loss(net, P, batch, cfg)
    grads = ad.backward(out.loss, list(P.values()))
    lr = 1e-3
    stepped = {k: net.params[k] - lr * grads[v] for k, v in P.items()}
    # same detached target and weights, new parameters
    cond = net.encode(batch.desc, batch.drop, params=stepped)
    u = net(batch.x_t, batch.t, batch.t, cond, params=stepped)
    after = weighted_regression(u, out.target, cfg, out.weights)
    assert float(ad.data_of(after.loss)) < float(ad.data_of(out.loss))


def test_mf_equals_fm_when_r_equals_t():
    net = randomized_net(seed=5)
    batch = _fm_batch(seed=5)
    P = net.trainable()
    cfg = GuidanceConfig()
    a, b = fm_loss(net, P, batch, cfg), mf_cfg_loss(net, P, batch, cfg)
    assert abs(float(ad.data_of(a.loss)) - float(ad.data_of(b.loss))) <= 1e-12


def test_target_is_stop_gradded():
    net = randomized_net(seed=6)
    x0, desc = toy_batch(4, 12, 6)
    cfg = GuidanceConfig()
    batch = TrainBatch.draw(x0, desc, np.random.default_rng(6), cfg, branch=MF)
    P = net.trainable()
    out = mf_cfg_loss(net, P, batch, cfg)
    grads = ad.backward(out.loss)
    # rebuild the loss with the target as a numerically equal constant
    P2 = net.trainable()
    cond = net.encode(batch.desc, batch.drop, params=P2)
    u = net(batch.x_t, batch.r, batch.t, cond, params=P2)
    ref = ad.backward(weighted_regression(u, out.target.copy(), cfg).loss)
    for k in P:
        np.testing.assert_array_equal(grads[P[k]], ref[P2[k]])


class AffineNet:
    """u = a * x + b * (t - r) * k: a two-parameter stand-in for the backbone."""

    def __init__(self, a, b, k):
        self.params = {"a": np.array(a), "b": np.array(b)}
        self.k = k

    def encode(self, desc, drop=None, params=None):
        return ConditionBundle(np.zeros((len(desc), 1)), np.zeros((len(desc), 1, 1)),
                               np.zeros(len(desc), bool))

    def null_condition(self, batch, params=None):
        return self.encode(np.zeros((batch, 1)))

    def __call__(self, x, r, t, cond, params=None):
        P = self.params if params is None else params
        dt = ad.reshape(ad.sub(t, r), (-1, 1, 1))
        return ad.add(ad.mul(P["a"], x), ad.mul(ad.mul(P["b"], dt), self.k))


def test_mean_flow_target_closed_form():
    rng = np.random.default_rng(7)
    B, N = 3, 5
    a, b = 0.3, -0.7
    k = rng.standard_normal((1, N, 3))
    net = AffineNet(a, b, k)
    x0, eps = rng.standard_normal((B, N, 3)), rng.standard_normal((B, N, 3))
    t = np.array([0.9, 0.5, 0.3])
    r = np.array([0.2, 0.5, 0.1])
    batch = TrainBatch(x0, np.zeros((B, 1)), eps, t, r, np.zeros(B, bool))
    cfg = GuidanceConfig(omega=1.0, kappa=0.0)
    out = mf_cfg_loss(net, {n: Value(v, requires_grad=True) for n, v in net.params.items()}, batch, cfg)
    # du/dt along (v, 0, 1) is a * v + b * k
    v = batch.v_t
    dudt = a * v + b * k
    expected = v - (t - r)[:, None, None] * dudt
    np.testing.assert_allclose(out.target, expected, atol=1e-10)


def test_non_finite_tangent_aborts():
    class Exploding(AffineNet):
        def __call__(self, x, r, t, cond, params=None):
            return ad.mul(ad.reshape(ad.sqrt(ad.sub(t, r)), (-1, 1, 1)), x)

    net = Exploding(0.0, 0.0, np.zeros((1, 1, 3)))
    rng = np.random.default_rng(8)
    B = 2
    batch = TrainBatch(rng.standard_normal((B, 4, 3)), np.zeros((B, 1)), rng.standard_normal((B, 4, 3)),
                       np.array([0.5, 0.5]), np.array([0.5, 0.2]), np.zeros(B, bool))
    with np.errstate(divide="ignore", invalid="ignore"):
        with pytest.raises(FloatingPointError, match=r"\[0\]"):
            mf_cfg_loss(net, net.params, batch, GuidanceConfig(omega=1.0, kappa=0.0))


def test_batch_draw_respects_branch_and_dropout_rate():
    x0, desc = toy_batch(8, 12)
    rng = np.random.default_rng(9)
    cfg = GuidanceConfig()
    assert TrainBatch.draw(x0, desc, rng, cfg, branch=MF).is_mf.all()
    assert not TrainBatch.draw(x0, desc, rng, cfg, branch=FM).is_mf.any()
    drops = np.concatenate([TrainBatch.draw(x0, desc, rng, cfg).drop for _ in range(500)])
    assert abs(drops.mean() - 0.1) < 0.02


def test_training_steps_stay_finite():
    from pointmf.config import parse_config
    from pointmf.train import Trainer

    cfg = parse_config("[model]\nhidden=16\nblocks=2\nheads=2\npoints=16\nctx_tokens=4\npma_dim=16\n"
                       "pma_heads=2\n[data]\nn_points=16\nn_train=20\nn_test=2\n[optimizer]\nbatch=8\n"
                       "warmup_steps=10\n")
    records = Trainer(cfg).run(steps=60)
    for rec in records:
        assert np.isfinite(rec["l_mf"]) and np.isfinite(rec["grad_norm"])


def test_guidance_defaults():
    cfg = GuidanceConfig()
    assert (cfg.omega, cfg.kappa, cfg.label_dropout, cfg.weight_p) == (1.0, 0.5, 0.1, 1.0)
    assert (cfg.time_mu, cfg.time_sigma) == (-0.4, 1.0)
