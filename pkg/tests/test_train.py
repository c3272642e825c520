import numpy as np
import pytest

from pointmf.checkpoint import load_checkpoint
from pointmf.config import parse_config
from pointmf.train import AdamW, ArraySource, NumericError, Trainer, clip_by_global_norm, read_log, replay_ratio

TEXT = ("[model]\nhidden=16\nblocks=2\nheads=2\npoints=12\nctx_tokens=3\npma_dim=16\npma_heads=2\n"
        "[data]\nn_points=12\nn_train=8\nn_test=2\n[optimizer]\nbatch=4\nwarmup_steps=4\ntotal_steps=6\n"
        "[run]\ncheckpoint_every=3\n")


def cfg(extra=""):
    return parse_config(TEXT + extra)


def test_runs_are_deterministic():
    a, b = Trainer(cfg()).run(), Trainer(cfg()).run()
    strip = lambda rs: [{k: v for k, v in r.items() if k != "wallclock"} for r in rs]  # noqa: E731
    assert strip(a) == strip(b)


def test_resume_continues_bitwise(tmp_path):
    full = Trainer(cfg())
    full.run()
    part = Trainer(cfg())
    part.run(steps=3, ckpt_dir=tmp_path)
    resumed = Trainer.resume(tmp_path / "final.ckpt")
    resumed.run()
    for k in full.net.params:
        assert np.array_equal(full.net.params[k], resumed.net.params[k])


def test_checkpoints_and_log(tmp_path):
    log = tmp_path / "log.jsonl"
    Trainer(cfg()).run(log_path=log, ckpt_dir=tmp_path)
    names = sorted(p.name for p in tmp_path.glob("*.ckpt"))
    assert names == ["final.ckpt", "step0000003.ckpt"]
    records = read_log(log)
    assert [r["step"] for r in records] == list(range(1, 7))
    assert {"lr", "l_mf", "l_dsa", "s", "lambda_mean", "grad_norm", "wallclock"} <= set(records[0])
    assert load_checkpoint(tmp_path / "final.ckpt").step == 6


def test_initial_loss_leaves_state_untouched():
    tr = Trainer(cfg())
    before = {k: v.copy() for k, v in tr.net.params.items()}
    state = tr.rng.bit_generator.state
    rec = tr.initial_loss()
    assert np.isfinite(rec["l_mf"]) and tr.step_count == 0
    assert tr.rng.bit_generator.state == state
    assert all(np.array_equal(before[k], tr.net.params[k]) for k in before)


def test_lr_schedule():
    tr = Trainer(cfg())
    assert [tr.lr_at(s) for s in (1, 2, 4, 100)] == pytest.approx([2.5e-4, 5e-4, 1e-3, 1e-3])


def test_lr_without_warmup_is_constant():
    tr = Trainer(parse_config(TEXT.replace("warmup_steps=4", "warmup_steps=0")))
    assert tr.lr_at(1) == tr.lr_at(50) == 1e-3


def test_global_norm_clipping():
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}
    clipped, norm = clip_by_global_norm(grads, 1.0)
    assert norm == 5.0
    assert np.sqrt(sum(float(g @ g) for g in clipped.values())) == pytest.approx(1.0)
    same, _ = clip_by_global_norm(grads, 10.0)
    assert same is grads


def test_adamw_first_step_moves_by_lr():
    opt = AdamW({"w": np.zeros(3)})
    out = opt.step({"w": np.zeros(3)}, {"w": np.array([2.0, -0.5, 1e-3])}, lr=0.1)
    np.testing.assert_allclose(out["w"], [-0.1, 0.1, -0.1], rtol=1e-4)
    decayed = AdamW({"w": np.ones(1)}, weight_decay=0.5).step({"w": np.ones(1)}, {"w": np.zeros(1)}, 0.1)
    np.testing.assert_allclose(decayed["w"], [0.95])


def test_numeric_failure_saves_last_good(tmp_path):
    c = cfg()
    pts = np.full((4, 12, 3), 1e200)
    source = ArraySource(pts, np.random.default_rng(0).random((4, 13)))
    tr = Trainer(c, source=source)
    with np.errstate(all="ignore"), pytest.raises(NumericError, match="step 1"):
        tr.run(ckpt_dir=tmp_path)
    ck = load_checkpoint(tmp_path / "last_good.ckpt")
    assert ck.step == 0 and all(np.all(np.isfinite(v)) for v in ck.params.values())


def test_replay_ratio_windows():
    records = [{"step": s, "fm_raw": float(200 - s)} for s in range(1, 201)]
    records[99]["fm_raw"] = None
    out = replay_ratio(records, early=100, window=4)
    assert out["early"] == pytest.approx(np.mean([103, 102, 101]))
    assert out["final"] == pytest.approx(np.mean([3, 2, 1, 0]))
    with pytest.raises(ValueError):
        replay_ratio(records[:50])
