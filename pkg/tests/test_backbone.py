import numpy as np
import pytest

from pointmf import autodiff as ad
from pointmf.backbone import (FULL_SCALE_CONFIG, ConditionBundle, MeanVelocityNet, ModelConfig,
                              init_params, sinusoidal_embed)

from _helpers import randomized_net, rel_err, tiny_config

# Parameter count of the desk-default model, pinned at first build.
DESK_PARAMETER_COUNT = 585907


def test_desk_parameter_count_is_pinned():
    assert MeanVelocityNet(ModelConfig()).num_parameters() == DESK_PARAMETER_COUNT


def test_full_scale_config_is_valid():
    cfg = ModelConfig(**FULL_SCALE_CONFIG)
    assert cfg.hidden % cfg.heads == 0


@pytest.mark.parametrize("bad", [dict(hidden=30, heads=4), dict(pma_dim=10, pma_heads=4), dict(blocks=0)])
def test_config_invariants(bad):
    with pytest.raises(ValueError):
        ModelConfig(**bad)


def test_sinusoidal_at_zero():
    e = sinusoidal_embed(np.array([0.0]), 8)
    np.testing.assert_array_equal(e, [[0, 0, 0, 0, 1, 1, 1, 1]])


def test_sinusoidal_range_and_separation():
    e = sinusoidal_embed(np.array([0.1, 0.9]), 256)
    assert np.all(np.abs(e) <= 1)
    cos = e[0] @ e[1] / np.linalg.norm(e[0]) / np.linalg.norm(e[1])
    assert cos < 0.999


def test_sinusoidal_rejects_odd_dim():
    with pytest.raises(ValueError):
        sinusoidal_embed(np.array([0.5]), 7)


def test_zero_init_tensors():
    cfg = tiny_config()
    p = init_params(cfg, seed=0)
    for layer in range(cfg.blocks):
        assert not np.any(p[f"blk{layer}.mod.w"]) and not np.any(p[f"blk{layer}.mod.b"])
        assert not np.any(p[f"pma.psi{layer}.fc2.w"])
    assert not np.any(p["head.w"])
    assert p["blk0.mod.w"].shape[1] == 9 * cfg.hidden


def test_init_is_seeded():
    a, b = init_params(tiny_config(), 1), init_params(tiny_config(), 1)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    c = init_params(tiny_config(), 2)
    assert any(not np.array_equal(a[k], c[k]) for k in a if np.any(a[k]))


def test_condition_vector_dt_branch_and_additivity():
    net = randomized_net()
    e = np.random.default_rng(0).standard_normal((1, 16))
    c1 = net.condition_vector(np.array([1.0]), np.array([0.0]), e)
    c2 = net.condition_vector(np.array([1.0]), np.array([0.5]), e)
    assert not np.allclose(c1, c2)
    c3 = net.condition_vector(np.array([1.0]), np.array([0.0]), 2 * e)
    np.testing.assert_allclose(c3 - c1, e, atol=1e-12)


def test_condition_vector_with_zeroed_mlps_is_e_img():
    net = MeanVelocityNet(tiny_config())
    for k in net.params:
        if k.startswith(("t_mlp", "dt_mlp")):
            net.params[k] = np.zeros_like(net.params[k])
    e = np.arange(16.0)[None]
    np.testing.assert_array_equal(net.condition_vector(np.array([0.3]), np.array([0.1]), e), e)


def test_condition_vector_rejects_r_above_t():
    with pytest.raises(ValueError):
        MeanVelocityNet(tiny_config()).condition_vector(np.array([0.2]), np.array([0.5]), np.zeros((1, 16)))


def test_pma_identity_at_init_and_single_pass():
    net = MeanVelocityNet(tiny_config(blocks=3))
    z = np.random.default_rng(0).standard_normal((2, 3, 13))
    outs = net.pma_adapt(z)
    base = ad.linear(z, net.params["pma.in.w"], net.params["pma.in.b"])
    assert len(outs) == 3 and all(np.array_equal(o, base) for o in outs)
    assert net.n_mhsa == 1
    cond = net.encode(np.random.default_rng(1).random((2, 13)))
    net.n_mhsa = 0
    net(np.zeros((2, 12, 3)), np.zeros(2), np.ones(2), cond)
    assert net.n_mhsa == 1


def test_pma_is_token_equivariant():
    net = randomized_net()
    z = np.random.default_rng(0).standard_normal((1, 3, 13))
    perm = np.array([2, 0, 1])
    for a, b in zip(net.pma_adapt(z[:, perm]), net.pma_adapt(z)):
        np.testing.assert_allclose(a, b[:, perm], atol=1e-12)


def test_dit_block_zero_init_is_identity():
    net = MeanVelocityNet(tiny_config())
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 12, 16))
    c = rng.standard_normal((2, 16))
    ctx = rng.standard_normal((2, 3, 16))
    assert np.array_equal(net.dit_block(0, x, c, ctx), x)


def test_dit_block_is_point_equivariant():
    net = randomized_net()
    rng = np.random.default_rng(0)
    x = rng.standard_normal((1, 12, 16))
    c, ctx = rng.standard_normal((1, 16)), rng.standard_normal((1, 3, 16))
    perm = rng.permutation(12)
    np.testing.assert_allclose(net.dit_block(1, x[:, perm], c, ctx), net.dit_block(1, x, c, ctx)[:, perm],
                               atol=1e-12)


def test_forward_zero_at_init_and_deterministic():
    net = MeanVelocityNet(tiny_config())
    rng = np.random.default_rng(0)
    x = rng.standard_normal((3, 12, 3))
    cond = net.encode(rng.random((3, 13)))
    assert not np.any(net(x, np.zeros(3), np.ones(3), cond))
    r = randomized_net()
    cond = r.encode(rng.random((3, 13)))
    assert np.array_equal(r(x, np.zeros(3), np.ones(3), cond), r(x, np.zeros(3), np.ones(3), cond))


def test_forward_validates_inputs():
    net = MeanVelocityNet(tiny_config())
    cond = net.encode(np.zeros((1, 13)))
    x = np.zeros((1, 12, 3))
    with pytest.raises(ValueError, match="non-finite"):
        net(np.full((1, 12, 3), np.nan), np.zeros(1), np.ones(1), cond)
    with pytest.raises(ValueError):
        net(x, np.array([0.6]), np.array([0.5]), cond)
    with pytest.raises(ad.ShapeError):
        net(np.zeros((1, 12, 2)), np.zeros(1), np.ones(1), cond)
    with pytest.raises(ValueError):
        net.encode(np.zeros((1, 12)))


def test_dropout_substitutes_both_null_embeddings():
    net = randomized_net()
    desc = np.random.default_rng(0).random((3, 13))
    cond = net.encode(desc, drop=np.array([False, True, False]))
    null = net.null_condition(1)
    np.testing.assert_array_equal(cond.global_vec[1], null.global_vec[0])
    np.testing.assert_array_equal(cond.ctx[1], null.ctx[0])
    full = net.encode(desc)
    np.testing.assert_array_equal(cond.global_vec[0], full.global_vec[0])


def test_condition_bundle_take_and_detach():
    net = randomized_net()
    P = net.trainable()
    cond = net.encode(np.random.default_rng(0).random((3, 13)), params=P)
    sub = cond.take(np.array([2]))
    assert len(sub) == 1
    d = cond.detach()
    assert isinstance(d, ConditionBundle) and not isinstance(d.global_vec, ad.Value)


def test_backbone_backward_matches_finite_differences():
    net = randomized_net(seed=3, scale=0.2)
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 12, 3))
    desc = rng.random((2, 13))
    r, t = np.array([0.1, 0.3]), np.array([0.4, 0.9])
    w = rng.standard_normal((2, 12, 3))
    P = net.trainable()
    loss = ad.sum_(ad.mul(net(x, r, t, net.encode(desc, params=P), params=P), w))
    grads = ad.backward(loss)
    h = 1e-5
    for name in ("embed.w", "blk1.attn.qkv.w", "blk0.xattn.kv.w", "pma.psi1.fc2.w", "head.w", "dt_mlp.fc1.w"):
        for i in rng.choice(net.params[name].size, 3, replace=False):
            plus, minus = dict(net.params), dict(net.params)
            plus[name] = plus[name].copy()
            minus[name] = minus[name].copy()
            plus[name].flat[i] += h
            minus[name].flat[i] -= h
            fd = (np.sum(net(x, r, t, net.encode(desc, params=plus), params=plus) * w)
                  - np.sum(net(x, r, t, net.encode(desc, params=minus), params=minus) * w)) / (2 * h)
            assert rel_err(grads[P[name]].flat[i], fd, floor=1e-8) < 1e-4, name


def test_blocks_start_moving_after_the_head_and_stay_close_to_identity():
    from pointmf.config import parse_config
    from pointmf.train import Trainer

    cfg = parse_config("[model]\nhidden=16\nblocks=2\nheads=2\npoints=12\nctx_tokens=3\npma_dim=16\n"
                       "pma_heads=2\n[data]\nn_points=12\nn_train=4\nn_test=1\n[optimizer]\nbatch=4\n"
                       "warmup_steps=0\nlr=1e-3\n")
    tr = Trainer(cfg)
    before = {k: v.copy() for k, v in tr.net.params.items()}
    tr.step()
    moved = {k for k in before if not np.array_equal(tr.net.params[k], before[k])}
    # with a zero head every upstream gradient vanishes on the first step
    assert moved == {"head.w", "head.b"}
    tr.step()
    assert np.abs(tr.net.params["blk0.mod.w"]).max() > 0
    rng = np.random.default_rng(0)
    x = rng.standard_normal((1, 12, 16))
    c, ctx = rng.standard_normal((1, 16)), rng.standard_normal((1, 3, 16))
    dev = np.abs(tr.net.dit_block(0, x, c, ctx) - x).max()
    assert 0 < dev < 1e-2 * np.abs(x).max()
